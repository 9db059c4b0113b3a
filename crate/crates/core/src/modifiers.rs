//! The three gradient-modification families: projection (subspace
//! exclusion), penalty-based coordinate rescaling, and replay-gradient
//! mixing, plus the Fisher-diagonal and path-integral importance
//! estimators. These produce a modified gradient without touching the
//! optimizer; where the modified signal is routed is the optimizer's
//! business.

use numkit::Rng;

use crate::error::Error;
use crate::model::{backward, forward_loss, ModelSpec, ParamGroups};
use crate::signatures::{GroupSignature, Signature};
use crate::taskgen::Batch;
use crate::GroupVec;

/// SI path-integral damping; standard default, the reference formulation
/// does not pin it.
pub const SI_DAMPING: f64 = 1e-8;

/// Scale the component of `g` along each signature direction u_i by
/// (1 - alpha * sigma_hat_i); the orthogonal complement is untouched.
pub fn project_group(g: &[f64], sig: &GroupSignature, alpha: f64, weighted: bool) -> Vec<f64> {
    debug_assert_eq!(g.len(), sig.u.rows());
    let mut coeff = sig.u.tr_mul_vec(g);
    for (i, c) in coeff.iter_mut().enumerate() {
        let w = if weighted { sig.sigma_hat[i] } else { 1.0 };
        *c *= alpha * w;
    }
    let back = sig.u.mul_vec(&coeff);
    g.iter().zip(back).map(|(gi, bi)| gi - bi).collect()
}

/// Apply the projection family across all groups. Groups without a
/// signature pass through unchanged.
pub fn apply_projection(
    g: &GroupVec,
    sig: &Signature,
    alpha: f64,
    weighted: bool,
) -> Result<GroupVec, Error> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
    }
    if g.len() != sig.groups.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} groups, signature {}",
            g.len(),
            sig.groups.len()
        )));
    }
    let mut out = Vec::with_capacity(g.len());
    for (gi, maybe_sig) in g.iter().zip(&sig.groups) {
        match maybe_sig {
            Some(gs) => {
                if gs.u.rows() != gi.len() {
                    return Err(Error::Dimension("signature/group dim mismatch".into()));
                }
                out.push(project_group(gi, gs, alpha, weighted));
            }
            None => out.push(gi.clone()),
        }
    }
    Ok(out)
}

/// Coordinate-wise attenuation g_i <- (1 - lambda * w_i) * g_i.
pub fn apply_penalty(g: &GroupVec, importance: &GroupVec, lambda: f64) -> Result<GroupVec, Error> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0,1]")));
    }
    if g.len() != importance.len()
        || g.iter().zip(importance).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Dimension("importance/gradient dims differ".into()));
    }
    Ok(g.iter()
        .zip(importance)
        .map(|(gv, wv)| gv.iter().zip(wv).map(|(x, w)| (1.0 - lambda * w) * x).collect())
        .collect())
}

/// Convex combination (1 - rho) * g_new + rho * g_replay.
pub fn mix_replay(g_new: &GroupVec, g_replay: &GroupVec, rho: f64) -> Result<GroupVec, Error> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho {rho} outside [0,1]")));
    }
    if g_new.len() != g_replay.len()
        || g_new.iter().zip(g_replay).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Dimension("replay/new gradient dims differ".into()));
    }
    Ok(g_new
        .iter()
        .zip(g_replay)
        .map(|(nv, rv)| nv.iter().zip(rv).map(|(n, r)| (1.0 - rho) * n + rho * r).collect())
        .collect())
}

fn normalize_by_global_max(mut w: GroupVec) -> GroupVec {
    let max = w
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |acc, x| acc.max(*x));
    if max > 0.0 {
        for v in w.iter_mut() {
            for x in v.iter_mut() {
                *x = (*x / max).clamp(0.0, 1.0);
            }
        }
    }
    w
}

/// Fisher-diagonal importance: per-coordinate mean of squared gradients
/// over the provided batches, normalized to [0,1] by the global max.
/// All-zero gradients yield an all-zero w.
pub fn fisher_diag_importance(
    params: &ParamGroups,
    spec: &ModelSpec,
    batches: &[Batch],
) -> Result<GroupVec, Error> {
    if batches.is_empty() {
        return Err(Error::Config("fisher importance needs >= 1 batch".into()));
    }
    let mut acc: GroupVec = params.values.iter().map(|v| vec![0.0; v.len()]).collect();
    for batch in batches {
        let (_, cache) = forward_loss(params, spec, batch)?;
        let grads = backward(params, spec, &cache);
        for (av, gv) in acc.iter_mut().zip(&grads) {
            for (a, g) in av.iter_mut().zip(gv) {
                *a += g * g;
            }
        }
    }
    let n = batches.len() as f64;
    for v in acc.iter_mut() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    Ok(normalize_by_global_max(acc))
}

/// Path-integral importance over a trajectory of (gradient, parameter
/// delta) pairs: w_i = sum_t |g_t,i * dtheta_t,i| / (sum_t dtheta_t,i^2 +
/// xi), normalized to [0,1] by the global max.
pub fn path_integral_importance(
    trajectory: &[(GroupVec, GroupVec)],
    xi: f64,
) -> Result<GroupVec, Error> {
    let Some((first, _)) = trajectory.first() else {
        return Err(Error::Config("path integral needs a non-empty trajectory".into()));
    };
    let mut num: GroupVec = first.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut den: GroupVec = first.iter().map(|v| vec![0.0; v.len()]).collect();
    for (g, dtheta) in trajectory {
        if g.len() != num.len() || dtheta.len() != num.len() {
            return Err(Error::Dimension("trajectory group counts differ".into()));
        }
        for gi in 0..num.len() {
            if g[gi].len() != num[gi].len() || dtheta[gi].len() != num[gi].len() {
                return Err(Error::Dimension("trajectory dims differ".into()));
            }
            for j in 0..num[gi].len() {
                num[gi][j] += (g[gi][j] * dtheta[gi][j]).abs();
                den[gi][j] += dtheta[gi][j] * dtheta[gi][j];
            }
        }
    }
    for gi in 0..num.len() {
        for j in 0..num[gi].len() {
            num[gi][j] /= den[gi][j] + xi;
        }
    }
    Ok(normalize_by_global_max(num))
}

#[derive(Debug, Clone)]
pub struct ReplaySample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub task_id: usize,
}

/// Per-task reservoir buffer with uniform replay draws. The per-task
/// capacity is floor(budget_fraction * samples_per_task).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    per_task_cap: usize,
    reservoirs: Vec<Vec<ReplaySample>>,
    seen: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(budget_fraction: f64, samples_per_task: usize) -> Self {
        let per_task_cap = ((budget_fraction * samples_per_task as f64).floor() as usize).max(1);
        ReplayBuffer { per_task_cap, reservoirs: Vec::new(), seen: Vec::new() }
    }

    pub fn per_task_cap(&self) -> usize {
        self.per_task_cap
    }

    pub fn len(&self) -> usize {
        self.reservoirs.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reservoir-sample every row of the batch into its task's reservoir.
    pub fn observe_batch(&mut self, batch: &Batch, rng: &mut Rng) {
        let t = batch.true_task_id;
        while self.reservoirs.len() <= t {
            self.reservoirs.push(Vec::new());
            self.seen.push(0);
        }
        for row in 0..batch.inputs.rows() {
            self.seen[t] += 1;
            let sample = ReplaySample {
                input: batch.inputs.row(row).to_vec(),
                target: batch.targets.row(row).to_vec(),
                task_id: t,
            };
            if self.reservoirs[t].len() < self.per_task_cap {
                self.reservoirs[t].push(sample);
            } else {
                let j = rng.below(self.seen[t]);
                if j < self.per_task_cap {
                    self.reservoirs[t][j] = sample;
                }
            }
        }
    }

    /// Uniform draw (with replacement) of `size` stored samples, excluding
    /// tasks at or after `before_task`. None if nothing is stored yet.
    pub fn sample_batch(&self, size: usize, before_task: usize, rng: &mut Rng) -> Option<Batch> {
        let pool: Vec<&ReplaySample> = self
            .reservoirs
            .iter()
            .take(before_task)
            .flat_map(|r| r.iter())
            .collect();
        if pool.is_empty() {
            return None;
        }
        let n = pool[0].input.len();
        let m = pool[0].target.len();
        let mut inputs = numkit::Mat::zeros(size, n);
        let mut targets = numkit::Mat::zeros(size, m);
        let mut first_task = 0;
        for row in 0..size {
            let pick = pool[rng.below(pool.len())];
            if row == 0 {
                first_task = pick.task_id;
            }
            inputs.row_mut(row).copy_from_slice(&pick.input);
            targets.row_mut(row).copy_from_slice(&pick.target);
        }
        Some(Batch { inputs, targets, true_task_id: first_task })
    }
}
