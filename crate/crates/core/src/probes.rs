//! Optimizer-state instrumentation: old-direction second-moment energy,
//! paired-run effective-learning-rate ratios, and the analytic scalar
//! surrogate of the second-moment EMA along a single direction.

use crate::error::Error;
use crate::signatures::Signature;
use crate::GroupVec;

/// A recorded probe time series with a moving-average window and a
/// steady-state tabulation window.
#[derive(Debug, Clone)]
pub struct ProbeSeries {
    pub times: Vec<u64>,
    pub values: Vec<f64>,
    /// Moving-average length in recorded points.
    pub window: usize,
    /// Inclusive step range used for tabulated steady-state values.
    pub steady: (u64, u64),
}

impl ProbeSeries {
    pub fn new(
        times: Vec<u64>,
        values: Vec<f64>,
        window: usize,
        steady: (u64, u64),
    ) -> Result<Self, Error> {
        if times.len() != values.len() {
            return Err(Error::Dimension("times/values lengths differ".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("probe times must be strictly increasing".into()));
        }
        if let (Some(first), Some(last)) = (times.first(), times.last()) {
            if steady.0 < *first || steady.1 > *last || steady.0 > steady.1 {
                return Err(Error::Config(format!(
                    "steady window {steady:?} outside recorded range [{first}, {last}]"
                )));
            }
        }
        Ok(ProbeSeries { times, values, window, steady })
    }

    /// Trailing moving average over `window` recorded points.
    pub fn moving_average(&self) -> Vec<f64> {
        let w = self.window.max(1);
        let mut out = Vec::with_capacity(self.values.len());
        let mut sum = 0.0;
        for i in 0..self.values.len() {
            sum += self.values[i];
            if i >= w {
                sum -= self.values[i - w];
            }
            let len = (i + 1).min(w);
            out.push(sum / len as f64);
        }
        out
    }

    /// Mean of raw values whose step lies in the steady window.
    pub fn steady_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (t, v) in self.times.iter().zip(&self.values) {
            if *t >= self.steady.0 && *t <= self.steady.1 {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Optimizer-state snapshot: bias-corrected second moment per group.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: u64,
    pub v_hat: GroupVec,
}

#[derive(Debug, Clone)]
pub struct SnapshotSeries {
    pub snaps: Vec<Snapshot>,
    /// Hash of the batch sequence that produced this run; paired probes
    /// require equal hashes.
    pub stream_hash: u64,
    pub run_id: String,
}

/// Steady-state window for a post-switch step range: the reference window
/// (first + 1500, first + 2000) when at least 2000 post-switch steps exist,
/// otherwise the final 25%.
pub fn steady_window(first_step: u64, last_step: u64) -> (u64, u64) {
    let post = last_step.saturating_sub(first_step);
    if post >= 2000 {
        (first_step + 1500, first_step + 2000)
    } else {
        (last_step - post / 4, last_step)
    }
}

fn directional_energy(v_hat_group: &[f64], u_col: &[f64]) -> f64 {
    // (u^T sqrt(v_hat))^2 for one direction.
    let mut s = 0.0;
    for (v, u) in v_hat_group.iter().zip(u_col) {
        s += u * v.max(0.0).sqrt();
    }
    s * s
}

fn signature_energy(v_hat: &GroupVec, sig: &Signature, gi: usize) -> Option<f64> {
    let gs = sig.groups.get(gi)?.as_ref()?;
    if gs.u.rows() != v_hat.get(gi)?.len() {
        return None;
    }
    // ||U^T sqrt(v_hat)||^2 over all signature columns.
    let sqrt_v: Vec<f64> = v_hat[gi].iter().map(|x| x.max(0.0).sqrt()).collect();
    let coeff = gs.u.tr_mul_vec(&sqrt_v);
    Some(coeff.iter().map(|c| c * c).sum())
}

/// Old-task directional second-moment energy, normalized to 1 at the first
/// post-switch snapshot t0 and averaged over groups:
/// E_old(t) = (1/G) sum_g ||U_g^T sqrt(v_hat_t,g)||^2 / ||U_g^T sqrt(v_hat_t0,g)||^2.
pub fn e_old(
    series: &SnapshotSeries,
    sig: &Signature,
    t0: u64,
    window: usize,
) -> Result<ProbeSeries, Error> {
    let base = series
        .snaps
        .iter()
        .find(|s| s.step >= t0)
        .ok_or_else(|| Error::Config(format!("no snapshot at or after t0 = {t0}")))?;
    let mut base_energy = Vec::new();
    for gi in 0..base.v_hat.len() {
        base_energy.push(signature_energy(&base.v_hat, sig, gi));
    }
    if !base_energy.iter().any(|e| matches!(e, Some(v) if *v > 0.0)) {
        return Err(Error::Config("zero directional energy at t0".into()));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for snap in series.snaps.iter().filter(|s| s.step >= base.step) {
        let mut sum = 0.0;
        let mut n = 0usize;
        for gi in 0..snap.v_hat.len() {
            let (Some(b), Some(e)) = (
                base_energy.get(gi).copied().flatten(),
                signature_energy(&snap.v_hat, sig, gi),
            ) else {
                continue;
            };
            if b > 0.0 {
                sum += e / b;
                n += 1;
            }
        }
        if n > 0 {
            times.push(snap.step);
            values.push(sum / n as f64);
        }
    }
    let steady = steady_window(*times.first().unwrap_or(&t0), *times.last().unwrap_or(&t0));
    ProbeSeries::new(times, values, window, steady)
}

fn summed_directional(v_hat: &GroupVec, dirs: &[(usize, Vec<f64>)]) -> f64 {
    let mut s = 0.0;
    for (gi, u) in dirs {
        if let Some(group) = v_hat.get(*gi) {
            if group.len() == u.len() {
                s += directional_energy(group, u);
            }
        }
    }
    s
}

/// Old-direction effective-learning-rate ratio between paired runs along
/// fixed directions (one per group, summed before the ratio):
/// R(t) = (sqrt(v_hat_B^(u)) + eps) / (sqrt(v_hat_A^(u)) + eps).
/// The value is the effective learning rate of run A relative to run B.
pub fn r_eta(
    a: &SnapshotSeries,
    b: &SnapshotSeries,
    dirs: &[(usize, Vec<f64>)],
    eps: f64,
    window: usize,
) -> Result<ProbeSeries, Error> {
    if a.stream_hash != b.stream_hash {
        return Err(Error::Pairing(format!(
            "stream hashes differ: {:#x} vs {:#x}",
            a.stream_hash, b.stream_hash
        )));
    }
    if a.snaps.len() != b.snaps.len() {
        return Err(Error::Pairing("snapshot counts differ".into()));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (sa, sb) in a.snaps.iter().zip(&b.snaps) {
        if sa.step != sb.step {
            return Err(Error::Pairing("snapshot steps differ".into()));
        }
        let ea = summed_directional(&sa.v_hat, dirs);
        let eb = summed_directional(&sb.v_hat, dirs);
        times.push(sa.step);
        values.push((eb.sqrt() + eps) / (ea.sqrt() + eps));
    }
    let first = *times.first().unwrap_or(&0);
    let last = *times.last().unwrap_or(&0);
    ProbeSeries::new(times, values, window, steady_window(first, last))
}

/// Per-group variant of [`r_eta`]; one series per direction.
pub fn r_eta_per_group(
    a: &SnapshotSeries,
    b: &SnapshotSeries,
    dirs: &[(usize, Vec<f64>)],
    eps: f64,
    window: usize,
) -> Result<Vec<(usize, ProbeSeries)>, Error> {
    let mut out = Vec::new();
    for (gi, u) in dirs {
        let series = r_eta(a, b, &[(*gi, u.clone())], eps, window)?;
        out.push((*gi, series));
    }
    Ok(out)
}

/// Parameters of the one-dimensional EMA surrogate along a protected
/// direction.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateParams {
    pub alpha: f64,
    pub epsilon: f64,
    pub beta2: f64,
    /// E[(u^T g)^2] along the direction.
    pub directional_energy: f64,
}

/// Predicted effective-learning-rate inflation
/// (sqrt(E) + eps) / ((1 - alpha) sqrt(E) + eps); tends to 1/(1-alpha) as
/// eps/sqrt(E) -> 0.
pub fn predicted_eta_ratio(p: &SurrogateParams) -> f64 {
    assert!(p.directional_energy > 0.0, "directional energy must be positive");
    assert!(p.epsilon >= 0.0);
    let root = p.directional_energy.sqrt();
    (root + p.epsilon) / ((1.0 - p.alpha) * root + p.epsilon)
}

/// Diagnostic forgetting scale (1 - alpha)^2; a trend organizer only.
pub fn diagnostic_forgetting_scale(alpha: f64) -> f64 {
    assert!((0.0..=1.0).contains(&alpha));
    (1.0 - alpha) * (1.0 - alpha)
}

/// Anisotropic diagnostic scale
/// (1-alpha)^2 * (lambda_max + eps/(1-alpha)^2) / (lambda_min + eps).
pub fn anisotropic_diagnostic(alpha: f64, epsilon: f64, lambda_max: f64, lambda_min: f64) -> f64 {
    assert!(lambda_max >= lambda_min && lambda_min > 0.0);
    let a2 = (1.0 - alpha) * (1.0 - alpha);
    a2 * (lambda_max + epsilon / a2) / (lambda_min + epsilon)
}

/// Exact scalar EMA recursion v_{t+1} = beta2 v_t + (1 - beta2) (c g_t)^2
/// starting from v0; the brute-force oracle for fixed-point claims.
pub fn ema_simulate(c: f64, inputs: &[f64], beta2: f64, v0: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&beta2));
    let mut v = v0;
    let mut out = Vec::with_capacity(inputs.len());
    for g in inputs {
        let x = c * g;
        v = beta2 * v + (1.0 - beta2) * (x * x);
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(step: u64, v: f64, dim: usize) -> Snapshot {
        Snapshot { step, v_hat: vec![vec![v; dim]] }
    }

    #[test]
    fn probe_series_validation_and_stats() {
        let s = ProbeSeries::new(vec![0, 10, 20, 30], vec![1.0, 2.0, 3.0, 4.0], 2, (10, 30))
            .unwrap();
        assert_eq!(s.steady_mean(), 3.0);
        let ma = s.moving_average();
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
        assert!(ProbeSeries::new(vec![0, 0], vec![1.0, 2.0], 1, (0, 0)).is_err());
        assert!(ProbeSeries::new(vec![0, 10], vec![1.0, 2.0], 1, (0, 20)).is_err());
    }

    #[test]
    fn e_old_constant_and_halved() {
        let sig = Signature {
            groups: vec![Some(crate::signatures::GroupSignature {
                u: numkit::Mat::from_columns(&[vec![1.0, 0.0, 0.0]]).unwrap(),
                sigma_hat: vec![1.0],
            })],
            source_task: 0,
            extraction_step: 0,
        };
        let series = SnapshotSeries {
            snaps: vec![snap(100, 4.0, 3), snap(110, 4.0, 3), snap(120, 2.0, 3)],
            stream_hash: 1,
            run_id: "t".into(),
        };
        let p = e_old(&series, &sig, 100, 1).unwrap();
        assert_eq!(p.values[0], 1.0);
        assert_eq!(p.values[1], 1.0);
        // v halved uniformly: sqrt scales by sqrt(0.5), squared norm halves.
        assert!((p.values[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn r_eta_self_is_one_and_pairing_enforced() {
        let series = SnapshotSeries {
            snaps: (0..5).map(|i| snap(i * 10, 1.0 + i as f64, 2)).collect(),
            stream_hash: 42,
            run_id: "a".into(),
        };
        let dirs = vec![(0usize, vec![1.0, 0.0])];
        let p = r_eta(&series, &series, &dirs, 1e-8, 1).unwrap();
        assert!(p.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let other = SnapshotSeries { stream_hash: 43, ..series.clone() };
        assert!(matches!(r_eta(&series, &other, &dirs, 1e-8, 1), Err(Error::Pairing(_))));
    }

    #[test]
    fn predicted_ratio_values() {
        let p = |alpha: f64, eps: f64, e: f64| {
            predicted_eta_ratio(&SurrogateParams {
                alpha,
                epsilon: eps,
                beta2: 0.999,
                directional_energy: e,
            })
        };
        assert!((p(0.5, 0.0, 1.0) - 2.0).abs() < 1e-12);
        assert!((p(0.3, 0.0, 1.0) - 1.0 / 0.7).abs() < 1e-12);
        // Matches the tabulated predicted row to rounding.
        assert!((p(0.3, 0.0, 1.0) - 1.43).abs() < 0.005);
        assert!((p(0.8, 0.0, 1.0) - 5.01).abs() < 0.02);
        assert!((p(0.5, 1.0, 1.0) - 2.0 / 1.5).abs() < 1e-12);
        // Monotone in alpha, decreasing in eps.
        assert!(p(0.6, 0.01, 1.0) > p(0.5, 0.01, 1.0));
        assert!(p(0.5, 0.1, 1.0) < p(0.5, 0.01, 1.0));
    }

    #[test]
    fn diagnostic_scales() {
        assert_eq!(diagnostic_forgetting_scale(0.0), 1.0);
        assert_eq!(diagnostic_forgetting_scale(0.5), 0.25);
        assert_eq!(diagnostic_forgetting_scale(1.0), 0.0);
        // Isotropic reduction.
        assert!((anisotropic_diagnostic(0.5, 0.0, 2.0, 2.0) - 0.25).abs() < 1e-12);
        assert!((anisotropic_diagnostic(0.5, 0.0, 4.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((anisotropic_diagnostic(0.5, 0.0, 3.2, 1.0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ema_simulate_cases() {
        // Constant input converges within 1% by t = 100 at beta2 = 0.9.
        let v = ema_simulate(1.0, &vec![1.0; 100], 0.9, 0.0);
        assert!((v[99] - 1.0).abs() < 0.01);
        // Zero stream decays v0 geometrically.
        let v = ema_simulate(1.0, &vec![0.0; 5], 0.9, 8.0);
        for (t, val) in v.iter().enumerate() {
            assert!((val - 8.0 * 0.9f64.powi(t as i32 + 1)).abs() < 1e-12);
        }
        // +-1 inputs behave like constant magnitude 1; converged within 2%
        // after 10/(1-beta2) steps.
        let signs: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let v = ema_simulate(0.5, &signs, 0.99, 0.0);
        assert!((v[999] - 0.25).abs() < 0.25 * 0.02);
    }

    #[test]
    fn steady_window_rules() {
        assert_eq!(steady_window(2000, 4000), (3500, 4000));
        assert_eq!(steady_window(0, 1000), (750, 1000));
    }
}
