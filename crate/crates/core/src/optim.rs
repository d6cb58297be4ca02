//! SGD with heavy-ball momentum and L2 weight decay.

/// Update rule per parameter `θ` with raw gradient `g`:
///
/// ```text
/// d = g + weight_decay · θ
/// v = momentum · v + d
/// θ = θ − lr · v
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// Restores momentum buffers, e.g. from a checkpoint.
    pub fn set_velocity(&mut self, velocity: Vec<Vec<f32>>) {
        self.velocity = velocity;
    }

    /// Applies one step. `params[i]` and `grads[i]` must have equal lengths
    /// and keep the same order across calls.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>]) {
        assert_eq!(params.len(), grads.len(), "sgd: one gradient per parameter");
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.len(), g.len(), "sgd: gradient length");
            for ((theta, &grad), vel) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = grad + self.weight_decay * *theta;
                *vel = self.momentum * *vel + d;
                *theta -= self.lr * *vel;
            }
        }
    }
}
