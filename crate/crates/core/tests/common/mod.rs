//! f64 reference implementations and finite-difference helpers shared by the
//! integration tests. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use bprune::gating::GateKind;
use bprune::network::{Layer, Network};
use bprune::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct T {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

impl T {
    pub fn new(shape: &[usize], d: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), d.len());
        T { shape: shape.to_vec(), d }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        T::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.d.iter().map(|&v| v as f32).collect()).unwrap()
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        // round through f32 so the library sees exactly the same values
        T::new(shape, (0..n).map(|_| rng.random_range(lo..hi) as f32 as f64).collect())
    }

    /// Uniform magnitudes in `[lo, hi)` with random signs.
    pub fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let mut t = T::uniform(shape, lo, hi, rng);
        for v in &mut t.d {
            if rng.random::<bool>() {
                *v = -*v;
            }
        }
        t
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- reference ops ----

pub fn conv2d(x: &T, w: &T, stride: usize, pad: usize) -> T {
    let [n, c, h, wd] = x.shape[..] else { panic!("conv input rank") };
    let [o, c2, kh, kw] = w.shape[..] else { panic!("conv weight rank") };
    assert_eq!(c, c2);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let (y, xx) = ((i * stride + ki) as isize - pad as isize, (j * stride + kj) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += x.d[((b * c + ic) * h + y as usize) * wd + xx as usize]
                                    * w.d[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    T::new(&[n, o, oh, ow], out)
}

pub fn linear(x: &T, w: &T) -> T {
    let (n, f) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    assert_eq!(w.shape[1], f);
    let mut out = vec![0.0; n * o];
    for b in 0..n {
        for k in 0..o {
            out[b * o + k] = (0..f).map(|i| x.d[b * f + i] * w.d[k * f + i]).sum();
        }
    }
    T::new(&[n, o], out)
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

/// Per-channel map `v -> f(channel, v)` over axis 1.
fn per_channel(x: &T, f: impl Fn(usize, f64) -> f64) -> T {
    let c = x.shape[1];
    let s = spatial(&x.shape);
    let d = x.d.iter().enumerate().map(|(i, &v)| f((i / s) % c, v)).collect();
    T::new(&x.shape, d)
}

/// Biased per-channel mean and variance over every axis but 1.
pub fn channel_stats(x: &T) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape[1];
    let s = spatial(&x.shape);
    let count = (x.d.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, &v) in x.d.iter().enumerate() {
        mean[(i / s) % c] += v / count;
    }
    let mut var = vec![0.0; c];
    for (i, &v) in x.d.iter().enumerate() {
        let ch = (i / s) % c;
        var[ch] += (v - mean[ch]).powi(2) / count;
    }
    (mean, var)
}

pub fn batch_norm(x: &T, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> T {
    per_channel(x, |ch, v| gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch])
}

pub fn batch_norm_train(x: &T, gamma: &[f64], beta: &[f64], eps: f64) -> T {
    let (mean, var) = channel_stats(x);
    batch_norm(x, gamma, beta, &mean, &var, eps)
}

pub fn exp_gate(x: &T, g: &[f64]) -> T {
    per_channel(x, |ch, v| v * (1.0 - (-g[ch] * g[ch]).exp()))
}

pub fn channel_scale(x: &T, f: &[f64]) -> T {
    per_channel(x, |ch, v| v * f[ch])
}

pub fn relu(x: &T) -> T {
    T::new(&x.shape, x.d.iter().map(|&v| v.max(0.0)).collect())
}

pub fn max_pool(x: &T, k: usize, stride: usize) -> T {
    let [n, c, h, w] = x.shape[..] else { panic!("pool rank") };
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = vec![f64::NEG_INFINITY; n * c * oh * ow];
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let o = &mut out[(p * oh + i) * ow + j];
                for a in 0..k {
                    for b in 0..k {
                        *o = o.max(x.d[(p * h + i * stride + a) * w + j * stride + b]);
                    }
                }
            }
        }
    }
    T::new(&[n, c, oh, ow], out)
}

pub fn global_avg_pool(x: &T) -> T {
    let (n, c, s) = (x.shape[0], x.shape[1], spatial(&x.shape));
    let d = x.d.chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
    T::new(&[n, c], d)
}

pub fn flatten(x: &T) -> T {
    let n = x.shape[0];
    T::new(&[n, x.d.len() / n], x.d.clone())
}

pub fn gather(x: &T, idx: &[usize]) -> T {
    let (n, f) = (x.shape[0], x.shape[1]);
    let d = (0..n).flat_map(|b| idx.iter().map(move |&i| (b, i))).map(|(b, i)| x.d[b * f + i]).collect();
    T::new(&[n, idx.len()], d)
}

/// Mean cross-entropy of softmax(logits).
pub fn cross_entropy(logits: &T, labels: &[usize]) -> f64 {
    let (n, k) = (logits.shape[0], logits.shape[1]);
    let mut total = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        let row = &logits.d[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / n as f64
}

pub fn dot(a: &T, w: &T) -> f64 {
    a.d.iter().zip(&w.d).map(|(x, y)| x * y).sum()
}

/// Eval or train-mode forward of `net` in f64, read straight from its layer
/// list. Train mode only changes batch norm (batch statistics); dropout is
/// treated as identity.
pub fn net_forward(net: &Network, x: &T, train: bool) -> T {
    net_forward_with(net, None, x, train)
}

/// [`net_forward`] with parameter tensor `k` (in `Network::params` order)
/// replaced by f64 values.
pub fn net_forward_with(net: &Network, replace: Option<(usize, &T)>, x: &T, train: bool) -> T {
    let mut next = 0usize;
    let mut param = |t: &Tensor| {
        let k = next;
        next += 1;
        match replace {
            Some((r, v)) if r == k => v.d.clone(),
            _ => t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>(),
        }
    };
    let mut x = x.clone();
    for layer in &net.layers {
        x = match layer {
            Layer::Conv2d { weight, stride, padding, .. } => {
                conv2d(&x, &T::new(weight.shape(), param(weight)), *stride, *padding)
            }
            Layer::Linear { weight, .. } => linear(&x, &T::new(weight.shape(), param(weight))),
            Layer::BatchNorm { gamma, beta, running_mean, running_var, epsilon, .. } => {
                let (g, b) = (param(gamma), param(beta));
                let eps = *epsilon as f64;
                if train {
                    batch_norm_train(&x, &g, &b, eps)
                } else {
                    let m: Vec<f64> = running_mean.iter().map(|&v| v as f64).collect();
                    let v: Vec<f64> = running_var.iter().map(|&v| v as f64).collect();
                    batch_norm(&x, &g, &b, &m, &v, eps)
                }
            }
            Layer::Gate { gate, .. } => match gate.kind {
                GateKind::Exponential => exp_gate(&x, &param(&gate.params)),
                GateKind::Linear => channel_scale(&x, &param(&gate.params)),
            },
            Layer::Relu => relu(&x),
            Layer::MaxPool2d { kernel, stride } => max_pool(&x, *kernel, *stride),
            Layer::GlobalAvgPool => global_avg_pool(&x),
            Layer::Flatten { select } => {
                let f = flatten(&x);
                match select {
                    Some(idx) => gather(&f, idx),
                    None => f,
                }
            }
            Layer::Dropout { .. } => x,
        };
    }
    x
}

// ---- gradient comparison ----

/// Central difference of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &T, mut f: impl FnMut(&T) -> f64) -> Vec<f64> {
    numeric_grad_at(x, &(0..x.d.len()).collect::<Vec<_>>(), &mut f)
}

/// Central difference of `f` at the listed coordinates of `x`.
pub fn numeric_grad_at(x: &T, coords: &[usize], mut f: impl FnMut(&T) -> f64) -> Vec<f64> {
    let mut xp = x.clone();
    coords
        .iter()
        .map(|&i| {
            let h = 1e-6 * x.d[i].abs().max(1.0);
            let v = x.d[i];
            xp.d[i] = v + h;
            let up = f(&xp);
            xp.d[i] = v - h;
            let down = f(&xp);
            xp.d[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, floor)` where `floor` is 1% of the
/// largest numeric gradient magnitude, so that entries that are negligible
/// relative to the rest of the tensor are compared on an absolute scale.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// One named gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    fn new(name: impl Into<String>, analytic: &[f32], numeric: &[f64]) -> Self {
        GradCheck { name: name.into(), rel_err: max_rel_err(analytic, numeric), checked: numeric.len() }
    }
}

/// Builds `Σ w ⊙ op(inputs)` on a fresh tape, returns the analytic gradient
/// of every input.
fn tape_grads(inputs: &[&T], w: &T, op: impl FnOnce(&mut Tape, &[Var]) -> Var) -> Vec<Vec<f32>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.to_tensor())).collect();
    let y = op(&mut tape, &vars);
    let wv = tape.constant(w.to_tensor());
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect()
}

/// Checks one op with inputs `inputs`, output shape `out_shape` and f64
/// reference `reference`.
fn check_op(
    name: &str,
    inputs: &[(&str, &T)],
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    op: impl FnOnce(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[T]) -> T,
) -> Vec<GradCheck> {
    let w = T::uniform(out_shape, -1.0, 1.0, rng);
    let ts: Vec<&T> = inputs.iter().map(|(_, t)| *t).collect();
    let analytic = tape_grads(&ts, &w, op);
    let mut out = Vec::new();
    for (k, (label, t)) in inputs.iter().enumerate() {
        let num = numeric_grad(t, |xp| {
            let mut args: Vec<T> = ts.iter().map(|&t| t.clone()).collect();
            args[k] = xp.clone();
            dot(&reference(&args), &w)
        });
        out.push(GradCheck::new(format!("{name} d/d{label}"), &analytic[k], &num));
    }
    out
}

/// Distinct values spaced well apart, shuffled, so max-pool windows have a
/// clear winner.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> T {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    d.shuffle(rng);
    T::new(shape, d)
}

/// Gradient checks of every differentiable tape op on small random
/// instances.
pub fn op_grad_checks(seed: u64) -> Vec<GradCheck> {
    let mut r = rng(seed);
    let mut all = Vec::new();

    let x = T::uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut r);
    let w = T::uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut r);
    all.extend(check_op(
        "conv2d",
        &[("x", &x), ("w", &w)],
        &[2, 4, 4, 4],
        &mut r,
        |t, v| t.conv2d(v[0], v[1], 1, 0).unwrap(),
        |a| conv2d(&a[0], &a[1], 1, 0),
    ));

    let x = T::uniform(&[2, 2, 7, 7], -1.0, 1.0, &mut r);
    let w = T::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    all.extend(check_op(
        "conv2d stride 2 pad 1",
        &[("x", &x), ("w", &w)],
        &[2, 3, 4, 4],
        &mut r,
        |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap(),
        |a| conv2d(&a[0], &a[1], 2, 1),
    ));

    let x = T::uniform(&[3, 5], -1.0, 1.0, &mut r);
    let w = T::uniform(&[4, 5], -1.0, 1.0, &mut r);
    all.extend(check_op(
        "linear",
        &[("x", &x), ("w", &w)],
        &[3, 4],
        &mut r,
        |t, v| t.linear(v[0], v[1]).unwrap(),
        |a| linear(&a[0], &a[1]),
    ));

    let x = T::uniform(&[4, 3, 2, 2], -2.0, 2.0, &mut r);
    let g = T::uniform(&[3], 0.5, 1.5, &mut r);
    let b = T::uniform(&[3], -0.5, 0.5, &mut r);
    all.extend(check_op(
        "batch_norm train",
        &[("x", &x), ("gamma", &g), ("beta", &b)],
        &[4, 3, 2, 2],
        &mut r,
        |t, v| t.batch_norm(v[0], v[1], v[2], bprune::autodiff::BatchNormMode::Train, 1e-5).unwrap().0,
        |a| batch_norm_train(&a[0], &a[1].d, &a[2].d, 1e-5),
    ));

    let mean = [0.1f32, -0.2, 0.3];
    let var = [0.5f32, 1.5, 0.8];
    let (m64, v64): (Vec<f64>, Vec<f64>) = (mean.iter().map(|&v| v as f64).collect(), var.iter().map(|&v| v as f64).collect());
    all.extend(check_op(
        "batch_norm eval",
        &[("x", &x), ("gamma", &g), ("beta", &b)],
        &[4, 3, 2, 2],
        &mut r,
        |t, v| {
            let mode = bprune::autodiff::BatchNormMode::Eval { mean: &mean, var: &var };
            t.batch_norm(v[0], v[1], v[2], mode, 1e-5).unwrap().0
        },
        |a| batch_norm(&a[0], &a[1].d, &a[2].d, &m64, &v64, 1e-5),
    ));

    let x = T::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
    let g = T::away_from_zero(&[3], 0.2, 1.5, &mut r);
    all.extend(check_op(
        "exp_gate",
        &[("x", &x), ("g", &g)],
        &[2, 3, 2, 2],
        &mut r,
        |t, v| t.exp_gate(v[0], v[1]).unwrap(),
        |a| exp_gate(&a[0], &a[1].d),
    ));

    let x = T::away_from_zero(&[2, 3, 4], 0.05, 1.0, &mut r);
    all.extend(check_op("relu", &[("x", &x)], &[2, 3, 4], &mut r, |t, v| t.relu(v[0]), |a| relu(&a[0])));

    let x = distinct(&[2, 2, 4, 4], &mut r);
    all.extend(check_op(
        "max_pool2d",
        &[("x", &x)],
        &[2, 2, 2, 2],
        &mut r,
        |t, v| t.max_pool2d(v[0], 2, 2).unwrap(),
        |a| max_pool(&a[0], 2, 2),
    ));

    let x = T::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
    all.extend(check_op(
        "global_avg_pool",
        &[("x", &x)],
        &[2, 3],
        &mut r,
        |t, v| t.global_avg_pool(v[0]).unwrap(),
        |a| global_avg_pool(&a[0]),
    ));

    let idx = [5usize, 0, 7, 2];
    all.extend(check_op(
        "flatten+gather",
        &[("x", &x)],
        &[2, 4],
        &mut r,
        |t, v| {
            let f = t.flatten(v[0]).unwrap();
            t.gather_features(f, &idx).unwrap()
        },
        |a| gather(&flatten(&a[0]), &idx),
    ));

    let a = T::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = T::uniform(&[3, 4], -1.0, 1.0, &mut r);
    all.extend(check_op(
        "add",
        &[("a", &a), ("b", &b)],
        &[3, 4],
        &mut r,
        |t, v| t.add(v[0], v[1]).unwrap(),
        |x| T::new(&x[0].shape, x[0].d.iter().zip(&x[1].d).map(|(p, q)| p + q).collect()),
    ));
    all.extend(check_op(
        "mul",
        &[("a", &a), ("b", &b)],
        &[3, 4],
        &mut r,
        |t, v| t.mul(v[0], v[1]).unwrap(),
        |x| T::new(&x[0].shape, x[0].d.iter().zip(&x[1].d).map(|(p, q)| p * q).collect()),
    ));
    all.extend(check_op(
        "sum",
        &[("a", &a)],
        &[1],
        &mut r,
        |t, v| t.sum(v[0]),
        |x| T::new(&[1], vec![x[0].d.iter().sum()]),
    ));

    // dropout: with the mask fixed the op is linear, so its gradient is the
    // mask itself, read back from the forward output
    let x = T::away_from_zero(&[4, 8], 0.1, 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.param(x.to_tensor());
    let mut drng = rng(seed ^ 0xd0);
    let y = tape.dropout(xv, 0.3, &mut drng).unwrap();
    let mask: Vec<f64> = tape.value(y).data().iter().zip(&x.d).map(|(&o, &i)| o as f64 / i).collect();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xv).unwrap().to_vec();
    let num = numeric_grad(&x, |xp| xp.d.iter().zip(&mask).map(|(v, m)| v * m).sum());
    all.push(GradCheck::new("dropout d/dx", &analytic, &num));

    let z = T::uniform(&[3, 5], -2.0, 2.0, &mut r);
    let labels = [1usize, 4, 0];
    let mut tape = Tape::new();
    let zv = tape.param(z.to_tensor());
    let loss = tape.softmax_cross_entropy(zv, &labels).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(zv).unwrap().to_vec();
    let num = numeric_grad(&z, |zp| cross_entropy(zp, &labels));
    all.push(GradCheck::new("softmax_cross_entropy d/dlogits", &analytic, &num));

    all
}

/// Analytic gradient of the cross-entropy on `labels` with respect to every
/// parameter tensor of `net`.
pub fn net_param_grads(net: &Network, x: &T, labels: &[usize], train: bool) -> Vec<Vec<f32>> {
    use bprune::network::Mode;
    let mut tape = Tape::new();
    let xi = tape.constant(x.to_tensor());
    let mode = if train { Mode::Train } else { Mode::Eval };
    let fwd = net.forward(&mut tape, xi, mode, None).unwrap();
    let loss = tape.softmax_cross_entropy(fwd.logits, labels).unwrap();
    tape.backward(loss).unwrap();
    fwd.params.iter().map(|&p| tape.grad(p).unwrap().to_vec()).collect()
}

/// Whole-network check: a few coordinates of every parameter tensor,
/// against central differences of the f64 reference forward.
pub fn network_grad_checks(
    name: &str,
    net: &Network,
    x: &T,
    labels: &[usize],
    per_tensor: usize,
    seed: u64,
    train: bool,
) -> Vec<GradCheck> {
    let analytic = net_param_grads(net, x, labels, train);
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (k, grad) in analytic.iter().enumerate() {
        let base = T::from_tensor(net.params()[k]);
        let coords: Vec<usize> = (0..per_tensor.min(base.d.len())).map(|_| r.random_range(0..base.d.len())).collect();
        let num = numeric_grad_at(&base, &coords, |p| cross_entropy(&net_forward_with(net, Some((k, p)), x, train), labels));
        let a: Vec<f32> = coords.iter().map(|&i| grad[i]).collect();
        out.push(GradCheck::new(format!("{name} param {k}{}", if train { " (train)" } else { "" }), &a, &num));
    }
    out
}

/// Sets each gate of `net` to a random magnitude in `[lo, hi)` (random sign)
/// and, with probability `p_zero`, to exactly 0. Every group keeps at least
/// one open gate.
pub fn randomize_gates(net: &mut Network, lo: f64, hi: f64, p_zero: f64, seed: u64) {
    let mut r = rng(seed);
    for g in 0..net.groups.len() {
        let gates = net.gate_params_mut(g);
        for v in gates.iter_mut() {
            let m: f64 = r.random_range(lo..hi);
            *v = if r.random::<bool>() { m as f32 } else { -m as f32 };
            if r.random::<f64>() < p_zero {
                *v = 0.0;
            }
        }
        if gates.iter().all(|&v| v == 0.0) {
            gates[0] = hi as f32;
        }
    }
}

/// Eval logits of `a` and `b` on the same inputs; largest absolute gap.
pub fn max_logit_gap(a: &Network, b: &Network, inputs: &Tensor) -> f32 {
    let (la, lb) = (a.predict(inputs).unwrap(), b.predict(inputs).unwrap());
    assert_eq!(la.shape(), lb.shape());
    la.data().iter().zip(lb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Uniform inputs in `[-2, 2)` of shape `[n, C, H, W]`.
pub fn random_inputs(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    T::uniform(&[n, shape[0], shape[1], shape[2]], -2.0, 2.0, &mut rng(seed)).to_tensor()
}
