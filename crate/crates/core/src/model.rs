//! A tiny feed-forward trainee with analytic gradients, organized into
//! parameter groups (one per weight matrix, one per bias vector) so the
//! per-group signature machinery has natural units to act on.

use numkit::{Mat, Rng};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::taskgen::Batch;
use crate::GroupVec;

const INIT_STREAM: u64 = 0x3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Layer widths including input and output, e.g. [n, 32, m].
    pub layer_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    pub seed: u64,
}

fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_loss() -> LossKind {
    LossKind::Mse
}
fn default_init_scale() -> f64 {
    1.0
}

/// Shape of one parameter group. Weight matrices have rows = fan-in,
/// cols = fan-out; bias vectors have cols = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl GroupShape {
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_matrix(&self) -> bool {
        self.rows > 1 && self.cols > 1
    }
}

#[derive(Debug, Clone)]
pub struct ParamGroups {
    pub shapes: Vec<GroupShape>,
    /// Row-major storage per group, index-aligned with `shapes`.
    pub values: GroupVec,
}

impl ParamGroups {
    pub fn total_dim(&self) -> usize {
        self.shapes.iter().map(|s| s.dim()).sum()
    }

    pub fn num_groups(&self) -> usize {
        self.shapes.len()
    }
}

fn validate(spec: &ModelSpec) -> Result<(), Error> {
    if spec.layer_widths.len() < 2 {
        return Err(Error::Config("need at least one layer (two widths)".into()));
    }
    if spec.layer_widths.iter().any(|w| *w == 0) {
        return Err(Error::Config("layer widths must be positive".into()));
    }
    Ok(())
}

pub fn init_params(spec: &ModelSpec) -> Result<ParamGroups, Error> {
    validate(spec)?;
    let mut rng = Rng::new(spec.seed, INIT_STREAM);
    let mut shapes = Vec::new();
    let mut values = Vec::new();
    for l in 0..spec.layer_widths.len() - 1 {
        let fan_in = spec.layer_widths[l];
        let fan_out = spec.layer_widths[l + 1];
        let scale = spec.init_scale / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.normal() * scale).collect();
        shapes.push(GroupShape { name: format!("w{l}"), rows: fan_in, cols: fan_out });
        values.push(w);
        shapes.push(GroupShape { name: format!("b{l}"), rows: fan_out, cols: 1 });
        values.push(vec![0.0; fan_out]);
    }
    Ok(ParamGroups { shapes, values })
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// a[0] = inputs, a[l+1] = post-activation of layer l.
    activations: Vec<Mat>,
    /// z[l] = pre-activation of layer l.
    preacts: Vec<Mat>,
    targets: Mat,
    /// Softmax probabilities for cross-entropy.
    probs: Option<Mat>,
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.max(0.0),
    }
}

/// Derivative expressed from (pre-activation z, activation value a).
fn act_deriv(kind: Activation, z: f64, a: f64) -> f64 {
    match kind {
        Activation::Identity => 1.0,
        Activation::Tanh => 1.0 - a * a,
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn affine(input: &Mat, w: &[f64], b: &[f64], fan_in: usize, fan_out: usize) -> Mat {
    let rows = input.rows();
    let mut out = Mat::zeros(rows, fan_out);
    for i in 0..rows {
        let xrow = input.row(i);
        let orow = out.row_mut(i);
        orow.copy_from_slice(b);
        for (k, &x) in xrow.iter().enumerate().take(fan_in) {
            if x == 0.0 {
                continue;
            }
            let wrow = &w[k * fan_out..(k + 1) * fan_out];
            for j in 0..fan_out {
                orow[j] += x * wrow[j];
            }
        }
    }
    out
}

pub fn forward_loss(
    params: &ParamGroups,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(f64, ForwardCache), Error> {
    validate(spec)?;
    let widths = &spec.layer_widths;
    let layers = widths.len() - 1;
    if batch.inputs.cols() != widths[0] {
        return Err(Error::Dimension(format!(
            "batch input dim {} != model input {}",
            batch.inputs.cols(),
            widths[0]
        )));
    }
    if batch.targets.cols() != widths[layers] {
        return Err(Error::Dimension(format!(
            "batch target dim {} != model output {}",
            batch.targets.cols(),
            widths[layers]
        )));
    }
    let b = batch.inputs.rows();
    let mut activations = vec![batch.inputs.clone()];
    let mut preacts = Vec::with_capacity(layers);
    for l in 0..layers {
        let w = &params.values[2 * l];
        let bias = &params.values[2 * l + 1];
        let z = affine(&activations[l], w, bias, widths[l], widths[l + 1]);
        if !z.is_finite() {
            return Err(Error::Numeric { step: 0, context: format!("pre-activation layer {l}") });
        }
        let a = if l + 1 < layers {
            Mat::from_fn(z.rows(), z.cols(), |i, j| act(spec.activation, z.get(i, j)))
        } else {
            z.clone() // output layer is linear
        };
        preacts.push(z);
        activations.push(a);
    }
    let out = &activations[layers];
    let m = widths[layers];
    let (loss, probs) = match spec.loss {
        LossKind::Mse => {
            let mut s = 0.0;
            for i in 0..b {
                for j in 0..m {
                    let d = out.get(i, j) - batch.targets.get(i, j);
                    s += d * d;
                }
            }
            (s / (b * m) as f64, None)
        }
        LossKind::CrossEntropy => {
            let mut p = Mat::zeros(b, m);
            let mut s = 0.0;
            for i in 0..b {
                let row = out.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..m {
                    z += (row[j] - mx).exp();
                }
                for j in 0..m {
                    let pj = (row[j] - mx).exp() / z;
                    p.set(i, j, pj);
                    let y = batch.targets.get(i, j);
                    if y > 0.0 {
                        s -= y * pj.max(1e-300).ln();
                    }
                }
            }
            (s / b as f64, Some(p))
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numeric { step: 0, context: "loss".into() });
    }
    let cache = ForwardCache { activations, preacts, targets: batch.targets.clone(), probs };
    Ok((loss, cache))
}

/// Analytic gradient of the loss with respect to every parameter group.
pub fn backward(params: &ParamGroups, spec: &ModelSpec, cache: &ForwardCache) -> GroupVec {
    let widths = &spec.layer_widths;
    let layers = widths.len() - 1;
    let b = cache.activations[0].rows();
    let m = widths[layers];
    let out = &cache.activations[layers];
    // delta = dL/dz at the output layer.
    let mut delta = match spec.loss {
        LossKind::Mse => Mat::from_fn(b, m, |i, j| {
            2.0 * (out.get(i, j) - cache.targets.get(i, j)) / (b * m) as f64
        }),
        LossKind::CrossEntropy => {
            let p = cache.probs.as_ref().expect("probs cached for cross-entropy");
            Mat::from_fn(b, m, |i, j| (p.get(i, j) - cache.targets.get(i, j)) / b as f64)
        }
    };
    let mut grads: GroupVec = params.values.iter().map(|v| vec![0.0; v.len()]).collect();
    for l in (0..layers).rev() {
        let fan_in = widths[l];
        let fan_out = widths[l + 1];
        let a_prev = &cache.activations[l];
        // gW = a_prev^T delta, row-major (fan_in x fan_out).
        {
            let gw = &mut grads[2 * l];
            for i in 0..b {
                let arow = a_prev.row(i);
                let drow = delta.row(i);
                for (k, &av) in arow.iter().enumerate().take(fan_in) {
                    if av == 0.0 {
                        continue;
                    }
                    let dst = &mut gw[k * fan_out..(k + 1) * fan_out];
                    for j in 0..fan_out {
                        dst[j] += av * drow[j];
                    }
                }
            }
        }
        {
            let gb = &mut grads[2 * l + 1];
            for i in 0..b {
                let drow = delta.row(i);
                for j in 0..fan_out {
                    gb[j] += drow[j];
                }
            }
        }
        if l > 0 {
            let w = &params.values[2 * l];
            let z_prev = &cache.preacts[l - 1];
            let a_here = &cache.activations[l];
            let mut next = Mat::zeros(b, fan_in);
            for i in 0..b {
                let drow = delta.row(i);
                let dst = next.row_mut(i);
                for (k, d) in dst.iter_mut().enumerate().take(fan_in) {
                    let wrow = &w[k * fan_out..(k + 1) * fan_out];
                    let mut s = 0.0;
                    for j in 0..fan_out {
                        s += drow[j] * wrow[j];
                    }
                    *d = s * act_deriv(spec.activation, z_prev.get(i, k), a_here.get(i, k));
                }
            }
            delta = next;
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use numkit::Mat;

    fn batch(inputs: Mat, targets: Mat) -> Batch {
        Batch { inputs, targets, true_task_id: 0 }
    }

    fn spec(widths: Vec<usize>, activation: Activation, loss: LossKind, seed: u64) -> ModelSpec {
        ModelSpec { layer_widths: widths, activation, loss, init_scale: 1.0, seed }
    }

    #[test]
    fn zero_weights_zero_targets_zero_loss() {
        let s = spec(vec![3, 1], Activation::Identity, LossKind::Mse, 0);
        let mut p = init_params(&s).unwrap();
        for v in p.values.iter_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        let b = batch(Mat::from_fn(4, 3, |i, j| (i + j) as f64), Mat::zeros(4, 1));
        let (loss, _) = forward_loss(&p, &s, &b).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn identity_net_on_identity_targets_zero_loss() {
        let s = spec(vec![3, 3], Activation::Identity, LossKind::Mse, 0);
        let mut p = init_params(&s).unwrap();
        // W = I, b = 0.
        for i in 0..3 {
            for j in 0..3 {
                p.values[0][i * 3 + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        p.values[1].iter_mut().for_each(|x| *x = 0.0);
        let x = Mat::from_fn(5, 3, |i, j| (i as f64) - (j as f64) * 0.5);
        let b = batch(x.clone(), x);
        let (loss, _) = forward_loss(&p, &s, &b).unwrap();
        assert!(loss < 1e-28);
    }

    #[test]
    fn loss_matches_independent_recomputation() {
        let s = spec(vec![4, 5, 2], Activation::Tanh, LossKind::Mse, 7);
        let p = init_params(&s).unwrap();
        let mut rng = numkit::Rng::new(3, 1);
        let x = Mat::from_fn(6, 4, |_, _| rng.normal());
        let y = Mat::from_fn(6, 2, |_, _| rng.normal());
        let (loss, _) = forward_loss(&p, &s, &batch(x.clone(), y.clone())).unwrap();
        // Straightforward second implementation.
        let mut total = 0.0;
        for i in 0..6 {
            let mut h = vec![0.0; 5];
            for jj in 0..5 {
                let mut z = p.values[1][jj];
                for k in 0..4 {
                    z += x.get(i, k) * p.values[0][k * 5 + jj];
                }
                h[jj] = z.tanh();
            }
            for o in 0..2 {
                let mut z = p.values[3][o];
                for k in 0..5 {
                    z += h[k] * p.values[2][k * 2 + o];
                }
                total += (z - y.get(i, o)).powi(2);
            }
        }
        total /= 12.0;
        assert!((loss - total).abs() < 1e-12);
    }

    fn finite_diff_check(s: &ModelSpec, n_checks: usize, tol: f64) {
        let p = init_params(s).unwrap();
        let n = s.layer_widths[0];
        let m = *s.layer_widths.last().unwrap();
        let mut rng = numkit::Rng::new(99, 2);
        let x = Mat::from_fn(8, n, |_, _| rng.normal());
        let y = match s.loss {
            LossKind::Mse => Mat::from_fn(8, m, |_, _| rng.normal()),
            LossKind::CrossEntropy => Mat::from_fn(8, m, |i, j| {
                if j == i % m {
                    1.0
                } else {
                    0.0
                }
            }),
        };
        let bt = batch(x, y);
        let (_, cache) = forward_loss(&p, s, &bt).unwrap();
        let grads = backward(&p, s, &cache);
        let h = 1e-5;
        let mut checked = 0;
        let total: usize = p.values.iter().map(|v| v.len()).sum();
        let stride = (total / n_checks).max(1);
        let mut flat_idx = 0;
        for (gi, vals) in p.values.iter().enumerate() {
            for (ei, _) in vals.iter().enumerate() {
                if flat_idx % stride == 0 {
                    let mut pp = p.clone();
                    pp.values[gi][ei] += h;
                    let (lp, _) = forward_loss(&pp, s, &bt).unwrap();
                    pp.values[gi][ei] -= 2.0 * h;
                    let (lm, _) = forward_loss(&pp, s, &bt).unwrap();
                    let num = (lp - lm) / (2.0 * h);
                    let ana = grads[gi][ei];
                    let denom = num.abs().max(ana.abs()).max(1e-6);
                    assert!(
                        (num - ana).abs() / denom < tol,
                        "group {gi} elem {ei}: analytic {ana} vs numeric {num}"
                    );
                    checked += 1;
                }
                flat_idx += 1;
            }
        }
        assert!(checked >= n_checks.min(total));
    }

    #[test]
    fn gradients_match_central_differences() {
        finite_diff_check(
            &spec(vec![6, 8, 5, 2], Activation::Tanh, LossKind::Mse, 11),
            100,
            1e-4,
        );
        finite_diff_check(
            &spec(vec![5, 7, 3], Activation::Tanh, LossKind::CrossEntropy, 13),
            80,
            1e-4,
        );
        finite_diff_check(
            &spec(vec![4, 6, 1], Activation::Identity, LossKind::Mse, 17),
            60,
            1e-4,
        );
    }

    #[test]
    fn gradient_scales_linearly_with_loss() {
        // grad of (2*loss) == 2*grad: doubling MSE targets' weight is
        // equivalent to scaling delta; verify by halving batch normalizer.
        let s = spec(vec![3, 4, 2], Activation::Tanh, LossKind::Mse, 5);
        let p = init_params(&s).unwrap();
        let mut rng = numkit::Rng::new(1, 1);
        let x = Mat::from_fn(4, 3, |_, _| rng.normal());
        let y = Mat::from_fn(4, 2, |_, _| rng.normal());
        let bt = batch(x, y);
        let (_, cache) = forward_loss(&p, &s, &bt).unwrap();
        let g = backward(&p, &s, &cache);
        // Run the model with duplicated batch rows: same mean loss, same grad.
        let x2 = Mat::from_fn(8, 3, |i, j| bt.inputs.get(i % 4, j));
        let y2 = Mat::from_fn(8, 2, |i, j| bt.targets.get(i % 4, j));
        let bt2 = batch(x2, y2);
        let (_, cache2) = forward_loss(&p, &s, &bt2).unwrap();
        let g2 = backward(&p, &s, &cache2);
        for (a, b) in g.iter().flatten().zip(g2.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_fit_has_vanishing_gradient() {
        let s = spec(vec![2, 1], Activation::Identity, LossKind::Mse, 3);
        let mut p = init_params(&s).unwrap();
        p.values[0] = vec![1.0, -1.0];
        p.values[1] = vec![0.5];
        let x = Mat::from_fn(6, 2, |i, j| (i as f64 + 1.0) * if j == 0 { 0.3 } else { -0.2 });
        let y = Mat::from_fn(6, 1, |i, _| 0.3 * (i as f64 + 1.0) + 0.2 * (i as f64 + 1.0) + 0.5);
        let bt = batch(x, y);
        let (loss, cache) = forward_loss(&p, &s, &bt).unwrap();
        assert!(loss < 1e-24);
        let g = backward(&p, &s, &cache);
        let norm: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8);
    }

    #[test]
    fn determinism_bit_identical() {
        let s = spec(vec![4, 6, 2], Activation::Tanh, LossKind::Mse, 21);
        let p = init_params(&s).unwrap();
        let mut rng = numkit::Rng::new(2, 2);
        let x = Mat::from_fn(5, 4, |_, _| rng.normal());
        let y = Mat::from_fn(5, 2, |_, _| rng.normal());
        let bt = batch(x, y);
        let (l1, c1) = forward_loss(&p, &s, &bt).unwrap();
        let (l2, c2) = forward_loss(&p, &s, &bt).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        let g1 = backward(&p, &s, &c1);
        let g2 = backward(&p, &s, &c2);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
