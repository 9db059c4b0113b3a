//! Single-run training engine: composes stream, trainee, modifier family,
//! routable optimizer, signatures and probes into one deterministic run.
//!
//! During the first task no signature exists, so every run executes
//! identical vanilla (raw, raw) steps regardless of its configured routing;
//! routing variants, denominator interventions and gradient modification
//! all engage after the first boundary. Paired cells that differ only in
//! routing therefore share a bitwise-identical boundary signature.

use numkit::{mix64, Rng};
use routelab_core::error::Error;
use routelab_core::metrics::{adapt_at_k, MetricKind, ScoreMatrix};
use routelab_core::model::{backward, forward_loss, init_params, ModelSpec};
use routelab_core::modifiers::{
    apply_penalty, apply_projection, fisher_diag_importance, mix_replay, ReplayBuffer,
    SI_DAMPING,
};
use routelab_core::optim::{
    clip_global_norm, step, Algo, Hyperparams, OptState, Projector, RoutingConfig, StepSignals,
    VInput,
};
use routelab_core::probes::{Snapshot, SnapshotSeries};
use routelab_core::signatures::{
    combine_signatures, push_and_maybe_refresh, CombineMode, GradBuffer, OverlapTracker,
    SAggregate, Signature,
};
use routelab_core::taskgen::{build_stream, eval_set, next_batch, Batch, StreamConfig};
use routelab_core::GroupVec;

const EVAL_TAG: u64 = 0xE7A1;
const FISHER_TAG: u64 = 0xF15;
const REPLAY_TAG: u64 = 0x9E91;
const SVD_TAG: u64 = 0x57D;

/// Gradient-modification family of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// No modification; the modified signal equals the raw gradient.
    None,
    Projection { weighted: bool },
    PenaltyFisher,
    PenaltyPath,
    Replay { rho: f64, budget_fraction: f64 },
}

impl Family {
    pub fn label(&self) -> &'static str {
        match self {
            Family::None => "vanilla",
            Family::Projection { .. } => "projection",
            Family::PenaltyFisher => "penalty-fisher",
            Family::PenaltyPath => "penalty-path",
            Family::Replay { .. } => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SigSettings {
    pub rank: usize,
    pub buffer_cap: usize,
    pub refresh_every: u64,
    pub combine: CombineMode,
    pub aggregate: SAggregate,
}

impl Default for SigSettings {
    fn default() -> Self {
        SigSettings {
            rank: 4,
            buffer_cap: 50,
            refresh_every: 10,
            combine: CombineMode::Replace,
            aggregate: SAggregate::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeSettings {
    pub snapshot_interval: u64,
    pub eval_size: usize,
    pub adapt_k: u64,
    pub adapt_interval: u64,
    /// Record first moments in snapshots (state dump support).
    pub keep_m: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            snapshot_interval: 10,
            eval_size: 256,
            adapt_k: 500,
            adapt_interval: 10,
            keep_m: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub run_id: String,
    pub stream: StreamConfig,
    pub model: ModelSpec,
    pub algo: Algo,
    pub hyper: Hyperparams,
    pub family: Family,
    /// Fixed modification strength: alpha (projection), lambda (penalty).
    /// Replay mixing weight rho lives in the family.
    pub strength: f64,
    /// Overlap-aware adaptive schedule (projection only).
    pub adaptive: bool,
    pub alpha_max: f64,
    pub beta_s: f64,
    pub routing: RoutingConfig,
    pub sig: SigSettings,
    pub probes: ProbeSettings,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub scores: ScoreMatrix,
    /// Per-task (step-in-task, held-out loss) series over the adapt grid.
    pub adapt_series: Vec<Vec<(u64, f64)>>,
    pub snapshots: SnapshotSeries,
    /// (global step, s_t, alpha_t) at snapshot steps once protection exists.
    pub overlap: Vec<(u64, f64, f64)>,
    /// Signature adopted at the first boundary (probe directions).
    pub first_boundary_sig: Option<Signature>,
    /// Optional per-snapshot first moments (state dump).
    pub m_snapshots: Option<Vec<(u64, GroupVec)>>,
    pub forgetting: f64,
    pub adapt_mean: f64,
    pub final_mean_loss: f64,
    pub mean_alpha_late: f64,
    pub mean_s_late: f64,
}

fn fold_hash(mut h: u64, batch: &Batch) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    for x in batch.inputs.data().iter().chain(batch.targets.data()) {
        h ^= x.to_bits();
        h = h.wrapping_mul(PRIME);
    }
    h ^= batch.true_task_id as u64;
    h.wrapping_mul(PRIME)
}

fn validate(cfg: &RunConfig) -> Result<(), Error> {
    cfg.routing.validate()?;
    if matches!(cfg.routing.v_input, VInput::ReplayOnly)
        && !matches!(cfg.family, Family::Replay { .. })
    {
        return Err(Error::Config(
            "replay-only denominator requires the replay family".into(),
        ));
    }
    if cfg.adaptive && !matches!(cfg.family, Family::Projection { .. }) {
        return Err(Error::Config("adaptive schedule applies to the projection family".into()));
    }
    if cfg.probes.adapt_k >= cfg.stream.steps_per_task as u64 {
        return Err(Error::Config(format!(
            "adapt_k {} must be below steps_per_task {}",
            cfg.probes.adapt_k, cfg.stream.steps_per_task
        )));
    }
    if !(0.0..=1.0).contains(&cfg.strength) {
        return Err(Error::Config(format!("strength {} outside [0,1]", cfg.strength)));
    }
    Ok(())
}

/// Execute one deterministic run.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, Error> {
    validate(cfg)?;
    let stream = build_stream(&cfg.stream)?;
    let mut params = init_params(&cfg.model)?;
    let mut state = OptState::new(&params.shapes, &cfg.algo);
    let mut buffer = GradBuffer::new(cfg.sig.buffer_cap);
    let mut tracker = OverlapTracker::new(cfg.beta_s, cfg.alpha_max, cfg.sig.aggregate)?;
    let mut candidate: Option<Signature> = None;
    let mut protect: Option<Signature> = None;
    let mut first_boundary_sig: Option<Signature> = None;
    let mut importance: Option<GroupVec> = None;
    let mut path_acc: Option<PathAccumulator> = None;
    let samples_per_task = cfg.stream.steps_per_task * cfg.stream.batch_size;
    let mut replay: Option<ReplayBuffer> = match cfg.family {
        Family::Replay { budget_fraction, .. } => {
            Some(ReplayBuffer::new(budget_fraction, samples_per_task))
        }
        _ => None,
    };
    let mut replay_rng = Rng::new(mix64(cfg.seed, REPLAY_TAG), 0);
    let svd_seed = mix64(cfg.seed, SVD_TAG);

    // Held-out evaluation sets, one per task, on dedicated streams.
    let eval_sets: Vec<Batch> = stream
        .tasks
        .iter()
        .map(|t| {
            let mut rng = Rng::new(mix64(cfg.stream.seed, EVAL_TAG), t.task_id as u64);
            eval_set(t, cfg.probes.eval_size, &mut rng)
        })
        .collect();
    let eval_loss = |params: &routelab_core::model::ParamGroups, task: usize| -> Result<f64, Error> {
        let (loss, _) = forward_loss(params, &cfg.model, &eval_sets[task])?;
        Ok(loss)
    };

    let t_tasks = cfg.stream.tasks;
    let steps_per_task = cfg.stream.steps_per_task as u64;
    let mut scores = ScoreMatrix::new(MetricKind::Loss);
    let mut adapt_series: Vec<Vec<(u64, f64)>> = Vec::with_capacity(t_tasks);
    let mut snaps: Vec<Snapshot> = Vec::new();
    let mut m_snaps: Vec<(u64, GroupVec)> = Vec::new();
    let mut overlap: Vec<(u64, f64, f64)> = Vec::new();
    let mut stream_hash: u64 = 0xcbf2_9ce4_8422_2325;

    for task in 0..t_tasks {
        let mut adapt: Vec<(u64, f64)> = Vec::new();
        if matches!(cfg.family, Family::PenaltyPath) {
            path_acc = Some(PathAccumulator::new(&params.values));
        }
        for step_in in 0..steps_per_task {
            let global = task as u64 * steps_per_task + step_in;
            if step_in % cfg.probes.adapt_interval == 0 && step_in <= cfg.probes.adapt_k {
                adapt.push((step_in, eval_loss(&params, task)?));
            }
            let batch = next_batch(&stream, global as usize)?;
            stream_hash = fold_hash(stream_hash, &batch);

            let (_, cache) =
                forward_loss(&params, &cfg.model, &batch).map_err(|e| at_step(e, global))?;
            let mut g_raw = backward(&params, &cfg.model, &cache);
            if let Some(clip) = cfg.hyper.grad_clip {
                if !cfg.hyper.clip_after_modification {
                    clip_global_norm(&mut g_raw, clip);
                }
            }

            if let Some(sig) = push_and_maybe_refresh(
                &mut buffer,
                &g_raw,
                global,
                cfg.sig.refresh_every,
                cfg.sig.rank,
                svd_seed,
                task,
            )? {
                candidate = Some(sig);
            }

            // Overlap signal and strength.
            let mut s_t: Option<f64> = None;
            let mut alpha_t = 0.0;
            if let Some(p) = &protect {
                let (s, adaptive_alpha) = tracker.update(&g_raw, p);
                s_t = s;
                alpha_t = if cfg.adaptive { adaptive_alpha } else { cfg.strength };
            }

            // Modified gradient per family; inactive until the first boundary.
            let active = task > 0;
            let (mut g_mod, mut g_rep): (GroupVec, Option<GroupVec>) = (g_raw.clone(), None);
            if active {
                match cfg.family {
                    Family::None => {}
                    Family::Projection { weighted } => {
                        if let Some(p) = &protect {
                            g_mod = apply_projection(&g_raw, p, alpha_t, weighted)?;
                        }
                    }
                    Family::PenaltyFisher | Family::PenaltyPath => {
                        if let Some(w) = &importance {
                            g_mod = apply_penalty(&g_raw, w, cfg.strength)?;
                        }
                    }
                    Family::Replay { rho, .. } => {
                        let drawn = replay.as_ref().and_then(|rb| {
                            rb.sample_batch(cfg.stream.batch_size, task, &mut replay_rng)
                        });
                        if let Some(rbatch) = drawn {
                            let (_, rcache) = forward_loss(&params, &cfg.model, &rbatch)
                                .map_err(|e| at_step(e, global))?;
                            let mut gr = backward(&params, &cfg.model, &rcache);
                            if let Some(clip) = cfg.hyper.grad_clip {
                                if !cfg.hyper.clip_after_modification {
                                    clip_global_norm(&mut gr, clip);
                                }
                            }
                            g_mod = mix_replay(&g_raw, &gr, rho)?;
                            g_rep = Some(gr);
                        }
                    }
                }
                if let Some(clip) = cfg.hyper.grad_clip {
                    if cfg.hyper.clip_after_modification {
                        clip_global_norm(&mut g_raw, clip);
                        clip_global_norm(&mut g_mod, clip);
                        if let Some(gr) = g_rep.as_mut() {
                            clip_global_norm(gr, clip);
                        }
                    }
                }
            }

            let routing = if active { cfg.routing } else { RoutingConfig::vanilla() };
            let projector = protect.as_ref().filter(|_| active).map(|sig| Projector {
                signature: sig,
                alpha: alpha_t,
                weighted: matches!(cfg.family, Family::Projection { weighted: true }),
            });
            let before = if path_acc.is_some() { Some(params.values.clone()) } else { None };
            step(
                &mut params,
                &StepSignals { raw: &g_raw, modified: &g_mod, replay: g_rep.as_ref() },
                &routing,
                &mut state,
                &cfg.algo,
                &cfg.hyper,
                projector.as_ref(),
            )
            .map_err(|e| at_step(e, global))?;
            if let (Some(acc), Some(before)) = (path_acc.as_mut(), before) {
                acc.observe(&g_raw, &before, &params.values);
            }
            if let Some(rb) = replay.as_mut() {
                rb.observe_batch(&batch, &mut replay_rng);
            }

            if global % cfg.probes.snapshot_interval == 0 {
                snaps.push(Snapshot {
                    step: global,
                    v_hat: state.v_hat_with(&params.shapes, &cfg.hyper),
                });
                if cfg.probes.keep_m {
                    m_snaps.push((global, state.m.clone()));
                }
                if let Some(s) = s_t {
                    overlap.push((global, s, alpha_t));
                }
            }
        }
        adapt_series.push(adapt);

        // Stage-end evaluation of every task seen so far.
        let mut stage = Vec::with_capacity(task + 1);
        for i in 0..=task {
            stage.push(eval_loss(&params, i)?);
        }
        scores.push_stage(stage)?;

        // Boundary: adopt the protecting signature and importance weights.
        if task + 1 < t_tasks {
            let fresh = match candidate.take() {
                Some(sig) => Some(sig),
                None if buffer.len() >= cfg.sig.rank => {
                    let last = (task as u64 + 1) * steps_per_task - 1;
                    Some(routelab_core::signatures::extract_signature(
                        &buffer,
                        cfg.sig.rank,
                        svd_seed,
                        last,
                        task,
                    )?)
                }
                None => None,
            };
            if let Some(f) = fresh {
                let combined =
                    combine_signatures(protect.as_ref(), f, cfg.sig.combine, cfg.sig.rank)?;
                if first_boundary_sig.is_none() {
                    first_boundary_sig = Some(combined.clone());
                }
                protect = Some(combined);
            }
            // The overlap EMA persists across boundaries: the schedule is
            // initialized once, not per task.
            buffer.clear();
            match cfg.family {
                Family::PenaltyFisher => {
                    let batches = fisher_batches(&stream, task, cfg);
                    importance = Some(fisher_diag_importance(&params, &cfg.model, &batches)?);
                }
                Family::PenaltyPath => {
                    if let Some(acc) = path_acc.take() {
                        importance = Some(acc.finish(SI_DAMPING));
                    }
                }
                _ => {}
            }
        }
    }

    let forgetting = scores.forgetting()?;
    let final_mean_loss = scores.final_mean();
    let mut adapt_vals = Vec::new();
    for series in &adapt_series {
        adapt_vals.push(adapt_at_k(series, cfg.probes.adapt_k)?);
    }
    let adapt_mean = adapt_vals.iter().sum::<f64>() / adapt_vals.len() as f64;
    // Late-run schedule summary over the final quarter of recorded overlap.
    let tail = overlap.len() / 4;
    let late = &overlap[overlap.len().saturating_sub(tail.max(1))..];
    let (mean_s_late, mean_alpha_late) = if late.is_empty() {
        (0.0, 0.0)
    } else {
        (
            late.iter().map(|(_, s, _)| s).sum::<f64>() / late.len() as f64,
            late.iter().map(|(_, _, a)| a).sum::<f64>() / late.len() as f64,
        )
    };

    Ok(RunOutcome {
        run_id: cfg.run_id.clone(),
        scores,
        adapt_series,
        snapshots: SnapshotSeries { snaps, stream_hash, run_id: cfg.run_id.clone() },
        overlap,
        first_boundary_sig,
        m_snapshots: if cfg.probes.keep_m { Some(m_snaps) } else { None },
        forgetting,
        adapt_mean,
        final_mean_loss,
        mean_alpha_late,
        mean_s_late,
    })
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numeric { context, .. } => Error::Numeric { step, context },
        other => other,
    }
}

fn fisher_batches(
    stream: &routelab_core::taskgen::StreamSpec,
    task: usize,
    cfg: &RunConfig,
) -> Vec<Batch> {
    let mut rng = Rng::new(mix64(cfg.stream.seed, FISHER_TAG), task as u64);
    (0..8)
        .map(|_| eval_set(&stream.tasks[task], cfg.stream.batch_size, &mut rng))
        .collect()
}

/// Running sums for the path-integral importance; equivalent to feeding the
/// whole (g, dtheta) trajectory to the trajectory operation.
struct PathAccumulator {
    num: GroupVec,
    den: GroupVec,
}

impl PathAccumulator {
    fn new(like: &GroupVec) -> Self {
        PathAccumulator {
            num: like.iter().map(|v| vec![0.0; v.len()]).collect(),
            den: like.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    fn observe(&mut self, g: &GroupVec, before: &GroupVec, after: &GroupVec) {
        for gi in 0..self.num.len() {
            for j in 0..self.num[gi].len() {
                let d = after[gi][j] - before[gi][j];
                self.num[gi][j] += (g[gi][j] * d).abs();
                self.den[gi][j] += d * d;
            }
        }
    }

    fn finish(self, xi: f64) -> GroupVec {
        let mut w = self.num;
        let mut max = 0.0f64;
        for gi in 0..w.len() {
            for j in 0..w[gi].len() {
                w[gi][j] /= self.den[gi][j] + xi;
                max = max.max(w[gi][j]);
            }
        }
        if max > 0.0 {
            for v in w.iter_mut() {
                for x in v.iter_mut() {
                    *x = (*x / max).clamp(0.0, 1.0);
                }
            }
        }
        w
    }
}

/// Build the pair of run handles for an R_eta comparison: identical stream,
/// model and seed, differing only in the supplied routing/id. The pairing
/// is verified post-run by [`verify_paired`].
pub fn paired_streams(base: &RunConfig, a: (&str, RoutingConfig), b: (&str, RoutingConfig)) -> (RunConfig, RunConfig) {
    let mut ca = base.clone();
    ca.run_id = a.0.to_string();
    ca.routing = a.1;
    let mut cb = base.clone();
    cb.run_id = b.0.to_string();
    cb.routing = b.1;
    (ca, cb)
}

/// Paired runs must have consumed identical batch sequences.
pub fn verify_paired(a: &RunOutcome, b: &RunOutcome) -> Result<(), Error> {
    if a.snapshots.stream_hash != b.snapshots.stream_hash {
        return Err(Error::Pairing(format!(
            "stream hashes differ: {:#x} vs {:#x}",
            a.snapshots.stream_hash, b.snapshots.stream_hash
        )));
    }
    Ok(())
}
