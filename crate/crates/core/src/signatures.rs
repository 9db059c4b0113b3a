//! Gradient buffering, periodic low-rank signature extraction, overlap
//! tracking, and the overlap-aware adaptive strength schedule.

use std::collections::VecDeque;

use numkit::{exact_svd_small, mix64, randomized_svd, subspace_energy, Mat, Rng};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::GroupVec;

const SVD_STREAM_TAG: u64 = 0x5D;
/// Default randomized-SVD sketch settings.
pub const DEFAULT_OVERSAMPLE: usize = 6;
pub const DEFAULT_POWER_ITERS: usize = 2;

/// Low-rank orthonormal basis with normalized singular weights for one
/// parameter group.
#[derive(Debug, Clone)]
pub struct GroupSignature {
    pub u: Mat,
    /// sigma / max(sigma); entries in [0, 1], leading entry 1.
    pub sigma_hat: Vec<f64>,
}

/// Per-group signature extracted from buffered gradients. Groups whose
/// buffered gradients carry no energy (or are too small) have `None`.
#[derive(Debug, Clone)]
pub struct Signature {
    pub groups: Vec<Option<GroupSignature>>,
    pub source_task: usize,
    pub extraction_step: u64,
}

impl Signature {
    /// Top protected direction per group: (group index, unit vector).
    pub fn top_directions(&self) -> Vec<(usize, Vec<f64>)> {
        self.groups
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|gs| (i, gs.u.col_to_vec(0))))
            .collect()
    }
}

/// Ring buffer of the last K per-group gradient vectors (FIFO eviction).
#[derive(Debug, Clone)]
pub struct GradBuffer {
    cap: usize,
    entries: VecDeque<GroupVec>,
}

impl GradBuffer {
    pub fn new(cap: usize) -> Self {
        assert!(cap >= 1, "buffer capacity must be >= 1");
        GradBuffer { cap, entries: VecDeque::with_capacity(cap) }
    }

    pub fn push(&mut self, g: GroupVec) {
        if self.entries.len() == self.cap {
            self.entries.pop_front();
        }
        self.entries.push_back(g);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Extract a per-group signature from the buffered gradients via randomized
/// SVD. The requested rank is capped per group at min(rank, group dim,
/// buffered count); sigma is normalized by its leading value.
pub fn extract_signature(
    buffer: &GradBuffer,
    rank: usize,
    svd_seed: u64,
    step: u64,
    source_task: usize,
) -> Result<Signature, Error> {
    if buffer.is_empty() {
        return Err(Error::Config("cannot extract signature from empty buffer".into()));
    }
    let cols = buffer.entries.len();
    let num_groups = buffer.entries[0].len();
    let mut rng = Rng::new(svd_seed, mix64(SVD_STREAM_TAG, step));
    let mut groups = Vec::with_capacity(num_groups);
    for gi in 0..num_groups {
        let d = buffer.entries[0][gi].len();
        let r = rank.min(d).min(cols);
        if d == 0 || r == 0 {
            groups.push(None);
            continue;
        }
        let g = Mat::from_fn(d, cols, |i, j| buffer.entries[j][gi][i]);
        let (u, sigma) =
            randomized_svd(&g, r, DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS, &mut rng)?;
        if sigma[0] <= 1e-300 {
            groups.push(None);
            continue;
        }
        let sigma_hat: Vec<f64> = sigma.iter().map(|s| (s / sigma[0]).clamp(0.0, 1.0)).collect();
        groups.push(Some(GroupSignature { u, sigma_hat }));
    }
    Ok(Signature { groups, source_task, extraction_step: step })
}

/// Push a gradient and refresh the candidate signature every
/// `refresh_every` steps. The buffer is released (cleared) after each SVD.
/// A refresh point with fewer than `rank` buffered gradients is skipped,
/// not an error.
pub fn push_and_maybe_refresh(
    buffer: &mut GradBuffer,
    g: &GroupVec,
    step: u64,
    refresh_every: u64,
    rank: usize,
    svd_seed: u64,
    source_task: usize,
) -> Result<Option<Signature>, Error> {
    if refresh_every == 0 {
        return Err(Error::Config("refresh_every must be >= 1".into()));
    }
    buffer.push(g.clone());
    if step % refresh_every != 0 {
        return Ok(None);
    }
    if buffer.len() < rank {
        return Ok(None);
    }
    let sig = extract_signature(buffer, rank, svd_seed, step, source_task)?;
    buffer.clear();
    Ok(Some(sig))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// New signature replaces the old one.
    Replace,
    /// Weighted concatenation re-orthonormalized and re-truncated to rank.
    Accumulate,
}

/// Fold a freshly extracted signature into the protecting one at a task
/// boundary.
pub fn combine_signatures(
    old: Option<&Signature>,
    new: Signature,
    mode: CombineMode,
    rank: usize,
) -> Result<Signature, Error> {
    let old = match (mode, old) {
        (CombineMode::Replace, _) | (_, None) => return Ok(new),
        (CombineMode::Accumulate, Some(o)) => o,
    };
    if old.groups.len() != new.groups.len() {
        return Err(Error::Dimension("signature group counts differ".into()));
    }
    let mut groups = Vec::with_capacity(new.groups.len());
    for (og, ng) in old.groups.iter().zip(new.groups.into_iter()) {
        groups.push(match (og, ng) {
            (None, ng) => ng,
            (Some(o), None) => Some(o.clone()),
            (Some(o), Some(n)) => {
                let d = o.u.rows();
                let total = o.u.cols() + n.u.cols();
                // Columns weighted by sigma_hat; exact SVD keeps the
                // dominant combined directions.
                let stacked = Mat::from_fn(d, total, |i, j| {
                    if j < o.u.cols() {
                        o.u.get(i, j) * o.sigma_hat[j]
                    } else {
                        let jj = j - o.u.cols();
                        n.u.get(i, jj) * n.sigma_hat[jj]
                    }
                });
                let (u, sigma, _) = exact_svd_small(&stacked)?;
                let keep = rank.min(sigma.iter().filter(|s| **s > 1e-12).count()).max(1);
                let u = u.truncate_cols(keep.min(u.cols()));
                let lead = sigma[0].max(1e-300);
                let sigma_hat: Vec<f64> =
                    sigma.iter().take(u.cols()).map(|s| (s / lead).clamp(0.0, 1.0)).collect();
                Some(GroupSignature { u, sigma_hat })
            }
        });
    }
    Ok(Signature {
        groups,
        source_task: new.source_task,
        extraction_step: new.extraction_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SAggregate {
    Mean,
    Median,
}

/// EMA of the subspace-alignment signal s_t and the adaptive strength
/// alpha_t = alpha_max * (1 - s_bar).
#[derive(Debug, Clone)]
pub struct OverlapTracker {
    pub s_bar: f64,
    pub beta_s: f64,
    pub alpha_max: f64,
    pub agg: SAggregate,
}

impl OverlapTracker {
    pub fn new(beta_s: f64, alpha_max: f64, agg: SAggregate) -> Result<Self, Error> {
        if !(0.0 < beta_s && beta_s < 1.0) {
            return Err(Error::Config(format!("beta_s {beta_s} outside (0,1)")));
        }
        if !(0.0..=1.0).contains(&alpha_max) {
            return Err(Error::Config(format!("alpha_max {alpha_max} outside [0,1]")));
        }
        Ok(OverlapTracker { s_bar: 0.0, beta_s, alpha_max, agg })
    }

    pub fn reset(&mut self) {
        self.s_bar = 0.0;
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_max * (1.0 - self.s_bar)
    }

    /// Update with the current gradient. Zero-gradient (flagged) samples
    /// skip the EMA; the returned s_t is None in that case.
    pub fn update(&mut self, g: &GroupVec, sig: &Signature) -> (Option<f64>, f64) {
        let mut vals = Vec::new();
        for (gi, maybe_sig) in sig.groups.iter().enumerate() {
            let Some(gs) = maybe_sig else { continue };
            if gi >= g.len() || g[gi].len() != gs.u.rows() {
                continue;
            }
            if let Some(v) = subspace_energy(&g[gi], &gs.u) {
                vals.push(v);
            }
        }
        if vals.is_empty() {
            return (None, self.alpha());
        }
        let s_t = match self.agg {
            SAggregate::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
            SAggregate::Median => {
                vals.sort_by(|a, b| a.partial_cmp(b).expect("finite overlap"));
                let n = vals.len();
                if n % 2 == 1 {
                    vals[n / 2]
                } else {
                    0.5 * (vals[n / 2 - 1] + vals[n / 2])
                }
            }
        };
        self.s_bar = (self.beta_s * self.s_bar + (1.0 - self.beta_s) * s_t).clamp(0.0, 1.0);
        (Some(s_t), self.alpha())
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleCell {
    pub rho: f64,
    pub delta: f64,
    pub alpha_star: f64,
    pub alpha_hat: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct ScheduleGridReport {
    pub cells: Vec<ScheduleCell>,
    pub max_error: f64,
}

/// Closed-form minimizer of the stability-plasticity loss
/// L(a, d) = ls*(1-a)^2*d^2 + lp*a^2*(1-d^2).
pub fn closed_form_alpha_star(rho: f64, delta: f64) -> f64 {
    let d2 = delta * delta;
    let denom = rho * d2 + (1.0 - d2);
    if denom == 0.0 {
        0.0
    } else {
        rho * d2 / denom
    }
}

/// Evaluate the fixed schedule alpha_hat(d) = 0.5*(1-d^2) against the
/// grid argmin of the stability-plasticity loss. Reports per-cell errors;
/// asserts nothing (the literal loss contradicts any small uniform bound,
/// with cell errors up to 0.5 at delta=0 and 1.0 at delta=1).
pub fn schedule_grid_check(
    loss_params: &[(f64, f64)],
    delta_grid: &[f64],
    alpha_grid: &[f64],
) -> ScheduleGridReport {
    assert!(!loss_params.is_empty() && !delta_grid.is_empty() && !alpha_grid.is_empty());
    let mut cells = Vec::new();
    let mut max_error = 0.0f64;
    for &(ls, lp) in loss_params {
        let rho = ls / lp;
        for &delta in delta_grid {
            let d2 = delta * delta;
            let mut best = (f64::INFINITY, alpha_grid[0]);
            for &a in alpha_grid {
                let l = ls * (1.0 - a).powi(2) * d2 + lp * a * a * (1.0 - d2);
                if l < best.0 {
                    best = (l, a);
                }
            }
            let alpha_star = best.1;
            let alpha_hat = 0.5 * (1.0 - d2);
            let error = (alpha_star - alpha_hat).abs();
            max_error = max_error.max(error);
            cells.push(ScheduleCell { rho, delta, alpha_star, alpha_hat, error });
        }
    }
    ScheduleGridReport { cells, max_error }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, idx: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[idx] = 1.0;
        v
    }

    #[test]
    fn refresh_schedule_and_skip() {
        let mut buf = GradBuffer::new(50);
        let g: GroupVec = vec![vec![1.0, 2.0, 0.5]];
        // Step 7: not a refresh point.
        let out = push_and_maybe_refresh(&mut buf, &g, 7, 10, 1, 0, 0).unwrap();
        assert!(out.is_none());
        // Step 10: refresh point with enough entries.
        let out = push_and_maybe_refresh(&mut buf, &g, 10, 10, 1, 0, 0).unwrap();
        assert!(out.is_some());
        assert_eq!(buf.len(), 0, "buffer released after SVD");
        // Refresh point with too few entries for the rank: skip.
        let out = push_and_maybe_refresh(&mut buf, &g, 20, 10, 3, 0, 0).unwrap();
        assert!(out.is_none());
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn constant_gradient_gives_rank_one_signature() {
        let mut buf = GradBuffer::new(50);
        let u = vec![3.0, 0.0, 4.0];
        for _ in 0..10 {
            buf.push(vec![u.clone()]);
        }
        let sig = extract_signature(&buf, 1, 0, 10, 0).unwrap();
        let gs = sig.groups[0].as_ref().unwrap();
        assert_eq!(gs.sigma_hat, vec![1.0]);
        let col = gs.u.col_to_vec(0);
        assert!((col[0] - 0.6).abs() < 1e-10);
        assert!(col[1].abs() < 1e-10);
        assert!((col[2] - 0.8).abs() < 1e-10);
    }

    #[test]
    fn signature_determinism_including_signs() {
        let mut buf = GradBuffer::new(50);
        let mut rng = Rng::new(4, 4);
        for _ in 0..20 {
            buf.push(vec![(0..6).map(|_| rng.normal()).collect()]);
        }
        let a = extract_signature(&buf, 3, 77, 10, 0).unwrap();
        let b = extract_signature(&buf, 3, 77, 10, 0).unwrap();
        let (ga, gb) = (a.groups[0].as_ref().unwrap(), b.groups[0].as_ref().unwrap());
        assert_eq!(ga.u.data(), gb.u.data());
        assert_eq!(ga.sigma_hat, gb.sigma_hat);
    }

    #[test]
    fn tracker_examples() {
        let mut tr = OverlapTracker::new(0.99, 0.5, SAggregate::Mean).unwrap();
        // s_bar = 0 -> alpha = alpha_max.
        assert_eq!(tr.alpha(), 0.5);
        tr.s_bar = 1.0;
        assert_eq!(tr.alpha(), 0.0);
        tr.s_bar = 0.36;
        assert!((tr.alpha() - 0.32).abs() < 1e-12);
    }

    #[test]
    fn tracker_skips_zero_gradient() {
        let sig = Signature {
            groups: vec![Some(GroupSignature {
                u: Mat::from_columns(&[unit(3, 0)]).unwrap(),
                sigma_hat: vec![1.0],
            })],
            source_task: 0,
            extraction_step: 0,
        };
        let mut tr = OverlapTracker::new(0.9, 0.5, SAggregate::Mean).unwrap();
        let (s, _) = tr.update(&vec![unit(3, 0)], &sig);
        assert!(s.is_some());
        let sbar_before = tr.s_bar;
        let (s, _) = tr.update(&vec![vec![0.0; 3]], &sig);
        assert!(s.is_none());
        assert_eq!(tr.s_bar, sbar_before, "flagged sample must not move the EMA");
    }

    #[test]
    fn tracker_scale_invariance() {
        let sig = Signature {
            groups: vec![Some(GroupSignature {
                u: Mat::from_columns(&[unit(4, 1)]).unwrap(),
                sigma_hat: vec![1.0],
            })],
            source_task: 0,
            extraction_step: 0,
        };
        let mut t1 = OverlapTracker::new(0.9, 0.5, SAggregate::Mean).unwrap();
        let mut t2 = OverlapTracker::new(0.9, 0.5, SAggregate::Mean).unwrap();
        let mut rng = Rng::new(8, 8);
        for _ in 0..50 {
            let g: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let g_scaled: Vec<f64> = g.iter().map(|x| 37.5 * x).collect();
            t1.update(&vec![g], &sig);
            t2.update(&vec![g_scaled], &sig);
            assert!((t1.s_bar - t2.s_bar).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_grid_matches_closed_form_and_exposes_discrepancy() {
        let alpha_grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let delta_grid = vec![0.0, 0.5f64.sqrt(), 1.0];
        let report = schedule_grid_check(&[(1.0, 1.0)], &delta_grid, &alpha_grid);
        // delta = 0: argmin 0, schedule 0.5 -> error 0.5.
        let c0 = &report.cells[0];
        assert_eq!(c0.alpha_star, 0.0);
        assert!((c0.error - 0.5).abs() < 1e-12);
        // symmetric point rho=1, delta^2=0.5: argmin 0.5, schedule 0.25.
        let c1 = &report.cells[1];
        assert!((c1.alpha_star - 0.5).abs() < 1e-3);
        assert!((c1.error - 0.25).abs() < 1e-3);
        // delta = 1: argmin 1, schedule 0 -> error 1.
        let c2 = &report.cells[2];
        assert_eq!(c2.alpha_star, 1.0);
        assert!((c2.error - 1.0).abs() < 1e-12);
        assert!((report.max_error - 1.0).abs() < 1e-12);
        // Grid argmin agrees with the closed form everywhere.
        for cell in &report.cells {
            let cf = closed_form_alpha_star(cell.rho, cell.delta);
            assert!(
                (cell.alpha_star - cf).abs() < 1.5e-3,
                "grid {} vs closed form {cf}",
                cell.alpha_star
            );
        }
    }

    #[test]
    fn combine_replace_and_accumulate() {
        let mk = |dir: usize| Signature {
            groups: vec![Some(GroupSignature {
                u: Mat::from_columns(&[unit(4, dir)]).unwrap(),
                sigma_hat: vec![1.0],
            })],
            source_task: dir,
            extraction_step: dir as u64,
        };
        let a = mk(0);
        let b = mk(1);
        let replaced = combine_signatures(Some(&a), b.clone(), CombineMode::Replace, 2).unwrap();
        assert_eq!(replaced.source_task, 1);
        let acc = combine_signatures(Some(&a), b, CombineMode::Accumulate, 2).unwrap();
        let gs = acc.groups[0].as_ref().unwrap();
        assert_eq!(gs.u.cols(), 2);
        // The combined basis spans e0 and e1.
        let span0 = subspace_energy(&unit(4, 0), &gs.u).unwrap();
        let span1 = subspace_energy(&unit(4, 1), &gs.u).unwrap();
        assert!(span0 > 1.0 - 1e-10);
        assert!(span1 > 1.0 - 1e-10);
    }
}
