//! Optimizers with independently routable moment inputs: the first-moment
//! input, the second-moment input (including scaled, mixed and replay-only
//! denominators), and optional state correction. With (raw, raw) routing
//! every algorithm reduces exactly to its vanilla form.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{GroupShape, ParamGroups};
use crate::signatures::Signature;
use crate::GroupVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentInput {
    Raw,
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VSource {
    Raw,
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VInput {
    Raw,
    Modified,
    ReplayOnly,
    /// Feed c * source^2 into the second-moment EMA.
    Scaled { source: VSource, c: f64 },
    /// Feed wr * raw^2 + wm * modified^2.
    Mix { weight_raw: f64, weight_modified: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateCorrection {
    None,
    /// Apply (I - alpha U U^T) to the full first moment after its EMA update.
    FscM,
    /// FscM plus the same operator applied to sqrt(v), re-squared.
    FscFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub m_input: MomentInput,
    pub v_input: VInput,
    pub state_correction: StateCorrection,
}

impl RoutingConfig {
    pub fn vanilla() -> Self {
        RoutingConfig {
            m_input: MomentInput::Raw,
            v_input: VInput::Raw,
            state_correction: StateCorrection::None,
        }
    }

    /// Modified gradient drives both moments.
    pub fn shared() -> Self {
        RoutingConfig { m_input: MomentInput::Modified, v_input: VInput::Modified, ..Self::vanilla() }
    }

    /// Modified gradient drives m; raw gradient drives v.
    pub fn decoupled() -> Self {
        RoutingConfig { m_input: MomentInput::Modified, v_input: VInput::Raw, ..Self::vanilla() }
    }

    /// Negative control: raw m, modified v.
    pub fn reverse() -> Self {
        RoutingConfig { m_input: MomentInput::Raw, v_input: VInput::Modified, ..Self::vanilla() }
    }

    pub fn v_only() -> Self {
        Self::reverse()
    }

    pub fn validate(&self) -> Result<(), Error> {
        match self.v_input {
            VInput::Scaled { c, .. } => {
                if !(c > 0.0) {
                    return Err(Error::Config(format!("denominator scale {c} must be > 0")));
                }
            }
            VInput::Mix { weight_raw, weight_modified } => {
                if weight_raw < 0.0
                    || weight_modified < 0.0
                    || (weight_raw + weight_modified - 1.0).abs() > 1e-12
                {
                    return Err(Error::Config(format!(
                        "mix weights ({weight_raw}, {weight_modified}) must be >= 0 and sum to 1"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Stable label for CSV output.
    pub fn label(&self) -> String {
        let m = match self.m_input {
            MomentInput::Raw => "raw",
            MomentInput::Modified => "mod",
        };
        let v = match self.v_input {
            VInput::Raw => "raw".to_string(),
            VInput::Modified => "mod".to_string(),
            VInput::ReplayOnly => "replay".to_string(),
            VInput::Scaled { source: VSource::Raw, c } => format!("scaled-raw({c})"),
            VInput::Scaled { source: VSource::Modified, c } => format!("scaled-mod({c})"),
            VInput::Mix { weight_raw, weight_modified } => {
                format!("mix({weight_raw};{weight_modified})")
            }
        };
        let fsc = match self.state_correction {
            StateCorrection::None => "",
            StateCorrection::FscM => "+fsc-m",
            StateCorrection::FscFull => "+fsc-full",
        };
        format!("{m}/{v}{fsc}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Algo {
    Adam,
    AdamW { weight_decay: f64 },
    AdaFactor,
    SgdMomentum,
}

impl Algo {
    pub fn label(&self) -> &'static str {
        match self {
            Algo::Adam => "adam",
            Algo::AdamW { .. } => "adamw",
            Algo::AdaFactor => "adafactor",
            Algo::SgdMomentum => "sgdm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// When true, clip is applied to each routed signal after modification
    /// instead of to the raw gradient before it.
    #[serde(default)]
    pub clip_after_modification: bool,
}

fn default_eta() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            eta: default_eta(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: default_clip(),
            clip_after_modification: false,
        }
    }
}

/// Second-moment state for one group: a full vector, or factored row/col
/// means for AdaFactor matrix groups.
#[derive(Debug, Clone)]
pub enum GroupSecondMoment {
    Full(Vec<f64>),
    Factored { row: Vec<f64>, col: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct OptState {
    pub m: GroupVec,
    pub v: Vec<GroupSecondMoment>,
    pub t: u64,
}

impl OptState {
    pub fn new(shapes: &[GroupShape], algo: &Algo) -> Self {
        let m = shapes.iter().map(|s| vec![0.0; s.dim()]).collect();
        let v = shapes
            .iter()
            .map(|s| {
                if matches!(algo, Algo::AdaFactor) && s.is_matrix() {
                    GroupSecondMoment::Factored {
                        row: vec![0.0; s.rows],
                        col: vec![0.0; s.cols],
                    }
                } else {
                    GroupSecondMoment::Full(vec![0.0; s.dim()])
                }
            })
            .collect();
        OptState { m, v, t: 0 }
    }

    /// Bias-corrected second moment, reconstructed from factored state
    /// where applicable. Used for state snapshots.
    pub fn v_hat_with(&self, shapes: &[GroupShape], hyper: &Hyperparams) -> GroupVec {
        let bc2 = if self.t == 0 { 1.0 } else { 1.0 - hyper.beta2.powi(self.t as i32) };
        self.v
            .iter()
            .zip(shapes)
            .map(|(gv, shape)| match gv {
                GroupSecondMoment::Full(v) => v.iter().map(|x| x / bc2).collect(),
                GroupSecondMoment::Factored { row, col } => {
                    let mu = row.iter().sum::<f64>() / row.len() as f64;
                    let mut out = Vec::with_capacity(shape.dim());
                    for i in 0..shape.rows {
                        for j in 0..shape.cols {
                            let v = if mu > 1e-300 { row[i] * col[j] / mu } else { 0.0 };
                            out.push(v / bc2);
                        }
                    }
                    out
                }
            })
            .collect()
    }
}

/// Inputs to one optimizer step. `replay` is required only when the
/// denominator routing is replay-only.
#[derive(Debug, Clone, Copy)]
pub struct StepSignals<'a> {
    pub raw: &'a GroupVec,
    pub modified: &'a GroupVec,
    pub replay: Option<&'a GroupVec>,
}

/// Projector for state correction: the same attenuation operator the
/// projection modifier uses, applied to optimizer state.
#[derive(Debug, Clone, Copy)]
pub struct Projector<'a> {
    pub signature: &'a Signature,
    pub alpha: f64,
    pub weighted: bool,
}

impl Projector<'_> {
    fn apply_group(&self, gi: usize, x: &mut [f64]) {
        if let Some(gs) = self.signature.groups.get(gi).and_then(|g| g.as_ref()) {
            if gs.u.rows() != x.len() {
                return;
            }
            let out = crate::modifiers::project_group(x, gs, self.alpha, self.weighted);
            x.copy_from_slice(&out);
        }
    }
}

/// Scale the full per-group vector so its global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(g: &mut GroupVec, max_norm: f64) -> f64 {
    let norm = crate::groupvec::norm(g);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        crate::groupvec::scale(g, s);
    }
    norm
}

fn check_replay(routing: &RoutingConfig, signals: &StepSignals) -> Result<(), Error> {
    if matches!(routing.v_input, VInput::ReplayOnly) && signals.replay.is_none() {
        return Err(Error::Config("replay-only denominator requires a replay gradient".into()));
    }
    Ok(())
}

#[inline]
fn v_feed(routing: &RoutingConfig, raw: f64, md: f64, rp: f64) -> f64 {
    match routing.v_input {
        VInput::Raw => raw * raw,
        VInput::Modified => md * md,
        VInput::ReplayOnly => rp * rp,
        VInput::Scaled { source, c } => {
            let x = match source {
                VSource::Raw => raw,
                VSource::Modified => md,
            };
            c * (x * x)
        }
        VInput::Mix { weight_raw, weight_modified } => {
            weight_raw * (raw * raw) + weight_modified * (md * md)
        }
    }
}

/// One optimizer step. The selected m-input feeds the first moment, the
/// squared selected v-input feeds the second moment, state correction (if
/// any) is applied to the updated state, and the parameter update follows
/// the algorithm's rule with bias correction for the Adam family.
pub fn step(
    params: &mut ParamGroups,
    signals: &StepSignals,
    routing: &RoutingConfig,
    state: &mut OptState,
    algo: &Algo,
    hyper: &Hyperparams,
    projector: Option<&Projector>,
) -> Result<(), Error> {
    routing.validate()?;
    check_replay(routing, signals)?;
    if signals.raw.len() != params.values.len() || signals.modified.len() != params.values.len() {
        return Err(Error::Dimension("signal/parameter group counts differ".into()));
    }
    if !matches!(routing.state_correction, StateCorrection::None) && projector.is_none() {
        return Err(Error::Config("state correction requires a projector".into()));
    }
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let zero = vec![0.0f64; 0];
    for gi in 0..params.values.len() {
        let shape = params.shapes[gi].clone();
        let raw = &signals.raw[gi];
        let md = &signals.modified[gi];
        let rp = signals.replay.map(|r| &r[gi]).unwrap_or(&zero);
        let dim = params.values[gi].len();
        if raw.len() != dim || md.len() != dim {
            return Err(Error::Dimension(format!("group {gi} dims differ")));
        }
        let sel = |j: usize| -> f64 {
            match routing.m_input {
                MomentInput::Raw => raw[j],
                MomentInput::Modified => md[j],
            }
        };
        let rp_at = |j: usize| -> f64 { if rp.is_empty() { 0.0 } else { rp[j] } };

        match algo {
            Algo::Adam | Algo::AdamW { .. } | Algo::AdaFactor => {
                // First-moment EMA.
                {
                    let m = &mut state.m[gi];
                    for j in 0..dim {
                        m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * sel(j);
                    }
                }
                // Second-moment EMA.
                match &mut state.v[gi] {
                    GroupSecondMoment::Full(v) => {
                        for j in 0..dim {
                            v[j] = hyper.beta2 * v[j]
                                + (1.0 - hyper.beta2) * v_feed(routing, raw[j], md[j], rp_at(j));
                        }
                    }
                    GroupSecondMoment::Factored { row, col } => {
                        let (rows, cols) = (shape.rows, shape.cols);
                        let mut row_mean = vec![0.0; rows];
                        let mut col_mean = vec![0.0; cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                let idx = i * cols + j;
                                let f = v_feed(routing, raw[idx], md[idx], rp_at(idx));
                                row_mean[i] += f;
                                col_mean[j] += f;
                            }
                        }
                        for (i, r) in row.iter_mut().enumerate() {
                            *r = hyper.beta2 * *r
                                + (1.0 - hyper.beta2) * (row_mean[i] / cols as f64);
                        }
                        for (j, c) in col.iter_mut().enumerate() {
                            *c = hyper.beta2 * *c
                                + (1.0 - hyper.beta2) * (col_mean[j] / rows as f64);
                        }
                    }
                }
                // State correction.
                match routing.state_correction {
                    StateCorrection::None => {}
                    StateCorrection::FscM => {
                        projector.unwrap().apply_group(gi, &mut state.m[gi]);
                    }
                    StateCorrection::FscFull => {
                        projector.unwrap().apply_group(gi, &mut state.m[gi]);
                        match &mut state.v[gi] {
                            GroupSecondMoment::Full(v) => {
                                let mut s: Vec<f64> = v.iter().map(|x| x.max(0.0).sqrt()).collect();
                                projector.unwrap().apply_group(gi, &mut s);
                                for (vj, sj) in v.iter_mut().zip(&s) {
                                    *vj = sj * sj;
                                }
                            }
                            GroupSecondMoment::Factored { .. } => {
                                return Err(Error::Config(
                                    "fsc-full is not defined for a factored second moment".into(),
                                ));
                            }
                        }
                    }
                }
                // Parameter update; AdamW decays the incoming parameter
                // first (decoupled weight decay).
                if let Algo::AdamW { weight_decay } = algo {
                    for x in params.values[gi].iter_mut() {
                        *x -= hyper.eta * weight_decay * *x;
                    }
                }
                let m = &state.m[gi];
                let p = &mut params.values[gi];
                match &state.v[gi] {
                    GroupSecondMoment::Full(v) => {
                        for j in 0..dim {
                            let m_hat = m[j] / bc1;
                            let v_hat = v[j] / bc2;
                            p[j] -= hyper.eta * m_hat / (v_hat.sqrt() + hyper.eps);
                        }
                    }
                    GroupSecondMoment::Factored { row, col } => {
                        let mu = row.iter().sum::<f64>() / row.len() as f64;
                        for i in 0..shape.rows {
                            for j in 0..shape.cols {
                                let idx = i * shape.cols + j;
                                let v = if mu > 1e-300 { row[i] * col[j] / mu } else { 0.0 };
                                let m_hat = m[idx] / bc1;
                                let v_hat = v / bc2;
                                p[idx] -= hyper.eta * m_hat / (v_hat.sqrt() + hyper.eps);
                            }
                        }
                    }
                }
            }
            Algo::SgdMomentum => {
                if matches!(routing.state_correction, StateCorrection::FscFull) {
                    return Err(Error::Config(
                        "fsc-full is undefined without a second moment".into(),
                    ));
                }
                {
                    let m = &mut state.m[gi];
                    for j in 0..dim {
                        m[j] = hyper.beta1 * m[j] + sel(j);
                    }
                }
                if matches!(routing.state_correction, StateCorrection::FscM) {
                    projector.unwrap().apply_group(gi, &mut state.m[gi]);
                }
                let m = &state.m[gi];
                let p = &mut params.values[gi];
                for j in 0..dim {
                    p[j] -= hyper.eta * m[j];
                }
            }
        }
        if params.values[gi].iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric { step: t, context: format!("group {}", shape.name) });
        }
    }
    Ok(())
}

/// Surrogate denominator scale c_minus = (1 - alpha)^2: the constant that
/// makes a raw-fed second moment reproduce the parameter-level steady
/// state. Degenerates to 0 at alpha = 1.
pub fn surrogate_denominator_scale(alpha: f64) -> f64 {
    assert!((0.0..=1.0).contains(&alpha), "alpha outside [0,1]");
    (1.0 - alpha) * (1.0 - alpha)
}

/// Scale c_plus on the squared modified gradient that equalizes the
/// scalar-surrogate denominator with the raw one. The epsilon terms cancel
/// in the match, so c_plus = 1 / (1 - alpha)^2 for any v_inf_raw > 0.
pub fn lr_match_scale(alpha: f64, _epsilon: f64, v_inf_raw: f64) -> Result<f64, Error> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1) is degenerate")));
    }
    if !(v_inf_raw > 0.0) {
        return Err(Error::Config(format!("v_inf_raw {v_inf_raw} must be > 0")));
    }
    Ok(v_inf_raw / ((1.0 - alpha) * (1.0 - alpha) * v_inf_raw))
}

/// The momentum difference between state correction and gradient
/// projection, computed two ways: the closed form -beta1 * alpha U U^T m,
/// and the explicit difference of the two update paths fed a common
/// gradient g. The two agree to machine precision for any g.
pub fn nonequivalence_residual(
    m: &[f64],
    u: &numkit::Mat,
    g: &[f64],
    alpha: f64,
    beta1: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(m.len(), u.rows());
    assert_eq!(g.len(), u.rows());
    let pi = |x: &[f64]| -> Vec<f64> {
        let coeff = u.tr_mul_vec(x);
        let back = u.mul_vec(&coeff);
        back.iter().map(|b| alpha * b).collect()
    };
    let pim = pi(m);
    let direct: Vec<f64> = pim.iter().map(|x| -beta1 * x).collect();

    let pig = pi(g);
    let m_grad: Vec<f64> = (0..m.len())
        .map(|j| beta1 * m[j] + (1.0 - beta1) * (g[j] - pig[j]))
        .collect();
    let pre: Vec<f64> = (0..m.len()).map(|j| beta1 * m[j] + (1.0 - beta1) * g[j]).collect();
    let pipre = pi(&pre);
    let m_state: Vec<f64> = pre.iter().zip(&pipre).map(|(a, b)| a - b).collect();
    let via_paths: Vec<f64> = m_state.iter().zip(&m_grad).map(|(a, b)| a - b).collect();
    (direct, via_paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GroupShape;
    use numkit::Mat;

    fn one_group(dim: usize) -> ParamGroups {
        ParamGroups {
            shapes: vec![GroupShape { name: "w0".into(), rows: dim, cols: 1 }],
            values: vec![vec![0.0; dim]],
        }
    }

    #[test]
    fn scalar_fixed_point_shows_inflation() {
        // Constant g = 1, alpha = 0.5, shared routing, beta2 = 0.9:
        // v_inf = 0.25 and the update magnitude returns to ~eta.
        let mut params = one_group(1);
        let mut state = OptState::new(&params.shapes, &Algo::Adam);
        let hyper = Hyperparams { eta: 1e-3, beta1: 0.9, beta2: 0.9, eps: 0.0, ..Default::default() };
        let routing = RoutingConfig::shared();
        let raw = vec![vec![1.0]];
        let modified = vec![vec![0.5]];
        let mut last_delta = 0.0;
        for _ in 0..400 {
            let before = params.values[0][0];
            step(
                &mut params,
                &StepSignals { raw: &raw, modified: &modified, replay: None },
                &routing,
                &mut state,
                &Algo::Adam,
                &hyper,
                None,
            )
            .unwrap();
            last_delta = before - params.values[0][0];
        }
        let GroupSecondMoment::Full(v) = &state.v[0] else { panic!() };
        assert!((v[0] - 0.25).abs() < 0.25 * 0.01, "v_inf {}", v[0]);
        assert!((last_delta - hyper.eta).abs() < hyper.eta * 0.02, "step {last_delta}");
    }

    #[test]
    fn v_stays_nonnegative_under_all_variants() {
        let variants = [
            VInput::Raw,
            VInput::Modified,
            VInput::ReplayOnly,
            VInput::Scaled { source: VSource::Raw, c: 0.25 },
            VInput::Scaled { source: VSource::Modified, c: 4.0 },
            VInput::Mix { weight_raw: 0.75, weight_modified: 0.25 },
        ];
        let mut rng = numkit::Rng::new(10, 0);
        for v_input in variants {
            let mut params = one_group(6);
            let mut state = OptState::new(&params.shapes, &Algo::Adam);
            let routing = RoutingConfig {
                m_input: MomentInput::Modified,
                v_input,
                state_correction: StateCorrection::None,
            };
            for _ in 0..50 {
                let raw: GroupVec = vec![(0..6).map(|_| rng.normal()).collect()];
                let modified: GroupVec = vec![raw[0].iter().map(|x| 0.5 * x).collect()];
                let replay: GroupVec = vec![(0..6).map(|_| rng.normal()).collect()];
                step(
                    &mut params,
                    &StepSignals { raw: &raw, modified: &modified, replay: Some(&replay) },
                    &routing,
                    &mut state,
                    &Algo::Adam,
                    &Hyperparams::default(),
                    None,
                )
                .unwrap();
                let GroupSecondMoment::Full(v) = &state.v[0] else { panic!() };
                assert!(v.iter().all(|x| *x >= 0.0));
            }
        }
    }

    #[test]
    fn replay_only_without_replay_gradient_is_config_error() {
        let mut params = one_group(2);
        let mut state = OptState::new(&params.shapes, &Algo::Adam);
        let routing = RoutingConfig {
            m_input: MomentInput::Raw,
            v_input: VInput::ReplayOnly,
            state_correction: StateCorrection::None,
        };
        let g = vec![vec![1.0, 1.0]];
        let err = step(
            &mut params,
            &StepSignals { raw: &g, modified: &g, replay: None },
            &routing,
            &mut state,
            &Algo::Adam,
            &Hyperparams::default(),
            None,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn adafactor_rank_one_reconstruction() {
        // For rank-1 nonnegative v-targets the factored estimate is exact.
        let shapes = vec![GroupShape { name: "w0".into(), rows: 4, cols: 3 }];
        let mut params = ParamGroups { shapes: shapes.clone(), values: vec![vec![0.0; 12]] };
        let mut state = OptState::new(&shapes, &Algo::AdaFactor);
        let r = [0.5f64, 1.0, 2.0, 4.0];
        let c = [1.0f64, 3.0, 0.25];
        // g_ij = sqrt(r_i c_j) so g^2 = r c^T exactly.
        let g: Vec<f64> = (0..12).map(|idx| (r[idx / 3] * c[idx % 3]).sqrt()).collect();
        let raw = vec![g];
        let hyper = Hyperparams::default();
        for _ in 0..200 {
            step(
                &mut params,
                &StepSignals { raw: &raw, modified: &raw, replay: None },
                &RoutingConfig::vanilla(),
                &mut state,
                &Algo::AdaFactor,
                &hyper,
                None,
            )
            .unwrap();
        }
        let vhat = state.v_hat_with(&shapes, &hyper);
        for idx in 0..12 {
            let target = r[idx / 3] * c[idx % 3];
            let rel = (vhat[0][idx] - target).abs() / target;
            assert!(rel < 1e-6, "recon {} vs {} (rel {rel})", vhat[0][idx], target);
        }
    }

    #[test]
    fn reverse_routing_cell_is_constructible() {
        let routing = RoutingConfig::reverse();
        assert_eq!(routing.m_input, MomentInput::Raw);
        assert!(matches!(routing.v_input, VInput::Modified));
        let mut params = one_group(3);
        let mut state = OptState::new(&params.shapes, &Algo::Adam);
        let raw = vec![vec![1.0, -2.0, 0.5]];
        let modified = vec![vec![0.5, -1.0, 0.25]];
        step(
            &mut params,
            &StepSignals { raw: &raw, modified: &modified, replay: None },
            &routing,
            &mut state,
            &Algo::Adam,
            &Hyperparams::default(),
            None,
        )
        .unwrap();
        // m took the raw signal, v took the modified one.
        assert!((state.m[0][0] - 0.1 * 1.0).abs() < 1e-15);
        let GroupSecondMoment::Full(v) = &state.v[0] else { panic!() };
        assert!((v[0] - 0.001 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn denominator_scales() {
        assert_eq!(surrogate_denominator_scale(0.5), 0.25);
        assert_eq!(surrogate_denominator_scale(0.0), 1.0);
        assert!((surrogate_denominator_scale(0.8) - 0.04).abs() < 1e-15);
        assert_eq!(surrogate_denominator_scale(1.0), 0.0);

        assert!((lr_match_scale(0.5, 0.0, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((lr_match_scale(0.0, 1e-8, 3.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((lr_match_scale(0.3, 0.0, 0.7).unwrap() - 1.0 / 0.49).abs() < 1e-12);
        assert!(lr_match_scale(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn nonequivalence_examples() {
        let u = Mat::from_columns(&[vec![1.0, 0.0, 0.0]]).unwrap();
        // m orthogonal to span(U): zero residual.
        let (d, v) = nonequivalence_residual(&[0.0, 1.0, 0.0], &u, &[0.3, -0.4, 0.1], 1.0, 0.9);
        assert!(d.iter().all(|x| x.abs() < 1e-15));
        assert!(v.iter().all(|x| x.abs() < 1e-15));
        // m = u, alpha = 1, beta1 = 0.9: residual -0.9 u.
        let (d, v) = nonequivalence_residual(&[1.0, 0.0, 0.0], &u, &[0.5, 0.5, 0.5], 1.0, 0.9);
        assert!((d[0] + 0.9).abs() < 1e-15);
        assert!((v[0] + 0.9).abs() < 1e-12);
        // alpha = 0: zero.
        let (d, v) = nonequivalence_residual(&[1.0, 2.0, 3.0], &u, &[0.5, 0.5, 0.5], 0.0, 0.9);
        assert!(d.iter().all(|x| x.abs() < 1e-15));
        assert!(v.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![vec![3.0, 4.0]];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        let after = crate::groupvec::norm(&g);
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.1, 0.2]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], vec![0.1, 0.2]);
    }
}
