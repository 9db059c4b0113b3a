//! Experiment protocols: each one maps a table-shaped comparison onto a
//! grid of deterministic runs, executes the cells (in parallel), computes
//! probes over paired runs, and emits metrics rows, probe series, plot-data
//! tables and a text summary.
//!
//! A cell's tabulated value is the mean over `replicates` sub-seeded runs;
//! paired probes pair replicate-by-replicate (identical batch streams per
//! replicate).

use rayon::prelude::*;

use numkit::{mix64, Mat, Rng};
use routelab_core::error::Error;
use routelab_core::metrics::{pearson, spearman};
use routelab_core::model::GroupShape;
use routelab_core::optim::{
    step as opt_step, surrogate_denominator_scale, Algo, Hyperparams, MomentInput, OptState,
    RoutingConfig, StateCorrection, StepSignals, VInput, VSource,
};
use routelab_core::probes::{
    e_old, predicted_eta_ratio, r_eta, ProbeSeries, Snapshot, SnapshotSeries, SurrogateParams,
};
use routelab_core::signatures::{GroupSignature, Signature};
use routelab_core::GroupVec;

use crate::config::{AlgoName, ExperimentSpec, Protocol};
use crate::csvio::{fmt9, run_id, MetricsRow};
use crate::engine::{run, Family, ProbeSettings, RunConfig, RunOutcome, SigSettings};

const ALIGNED_TAG: u64 = 0xA117;
const REPLICATE_TAG: u64 = 0x9E99;

/// Everything a protocol produces; the runner persists it.
#[derive(Debug, Default)]
pub struct ProtocolOutput {
    pub rows: Vec<MetricsRow>,
    /// run_id -> named probe series.
    pub probe_files: Vec<(String, Vec<(String, ProbeSeries)>)>,
    /// file name -> CSV body.
    pub plotdata: Vec<(String, String)>,
    pub summary: String,
    /// (run_id, error string) for failed cells; surviving cells continue.
    pub failures: Vec<(String, String)>,
    /// Optional state dumps (run_id -> CSV body).
    pub state_dumps: Vec<(String, String)>,
}

/// One grid cell: metrics-row labels plus one run configuration per
/// replicate.
#[derive(Debug, Clone)]
struct Cell {
    method: String,
    routing_label: String,
    schedule: String,
    alpha: f64,
    delta: f64,
    seed: u64,
    base_id: String,
    cfgs: Vec<RunConfig>,
}

/// Replicate-averaged outcome of one cell.
struct CellOutcome {
    reps: Vec<RunOutcome>,
    forgetting: f64,
}

fn sig_settings(spec: &ExperimentSpec) -> SigSettings {
    SigSettings {
        rank: spec.signature.rank,
        buffer_cap: spec.signature.buffer_cap,
        refresh_every: spec.signature.refresh_every,
        combine: spec.signature.combine,
        aggregate: spec.signature.aggregate,
    }
}

fn probe_settings(spec: &ExperimentSpec) -> ProbeSettings {
    ProbeSettings {
        snapshot_interval: spec.probes.snapshot_interval,
        eval_size: spec.probes.eval_size,
        adapt_k: spec.probes.adapt_k,
        adapt_interval: spec.probes.adapt_interval,
        keep_m: spec.probes.dump_state,
    }
}

/// Base run configuration for one (replicate seed, algo): vanilla family
/// and routing. Stream and model seeds derive from both the config base
/// seeds and the run seed, so seeds vary data and initialization while
/// cells within a seed share them exactly.
fn base_run(spec: &ExperimentSpec, run_seed: u64, algo: Algo) -> RunConfig {
    let mut stream = spec.stream.clone();
    stream.seed = mix64(spec.stream.seed, run_seed);
    let mut model = spec.model.clone();
    model.seed = mix64(spec.model.seed, run_seed);
    RunConfig {
        run_id: String::new(),
        stream,
        model,
        algo,
        hyper: spec.optimizer.hyper(),
        family: Family::None,
        strength: 0.0,
        adaptive: false,
        alpha_max: spec.schedule.alpha_max,
        beta_s: spec.schedule.beta_s,
        routing: RoutingConfig::vanilla(),
        sig: sig_settings(spec),
        probes: probe_settings(spec),
        seed: run_seed,
    }
}

#[allow(clippy::too_many_arguments)]
fn make_cell(
    protocol: &str,
    spec: &ExperimentSpec,
    seed: u64,
    algo: Algo,
    method: &str,
    schedule: &str,
    alpha: f64,
    family: Family,
    routing: RoutingConfig,
    adaptive: bool,
) -> Cell {
    let routing_label = routing.label();
    let base_id = run_id(
        protocol,
        method,
        &routing_label,
        schedule,
        alpha,
        spec.stream.delta,
        seed,
    );
    let reps = spec.run.replicates.max(1);
    let mut cfgs = Vec::with_capacity(reps);
    for rep in 0..reps {
        let run_seed = if reps == 1 {
            seed
        } else {
            mix64(seed, REPLICATE_TAG.wrapping_add(rep as u64))
        };
        let mut cfg = base_run(spec, run_seed, algo);
        cfg.family = family;
        cfg.strength = alpha;
        cfg.adaptive = adaptive;
        cfg.routing = routing;
        cfg.run_id = format!("{base_id}__r{rep}");
        cfgs.push(cfg);
    }
    Cell {
        method: method.to_string(),
        routing_label,
        schedule: schedule.to_string(),
        alpha,
        delta: spec.stream.delta,
        seed,
        base_id,
        cfgs,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

struct Collected {
    rows: Vec<MetricsRow>,
    outcomes: Vec<Option<CellOutcome>>,
    failures: Vec<(String, String)>,
    probe_files: Vec<(String, Vec<(String, ProbeSeries)>)>,
    state_dumps: Vec<(String, String)>,
}

/// Run every replicate of every cell in parallel and aggregate.
fn run_and_collect(protocol: &str, cells: &[Cell]) -> Collected {
    let jobs: Vec<(usize, &RunConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(ci, cell)| cell.cfgs.iter().map(move |cfg| (ci, cfg)))
        .collect();
    let results: Vec<(usize, Result<RunOutcome, Error>)> =
        jobs.par_iter().map(|(ci, cfg)| (*ci, run(cfg))).collect();

    let mut per_cell: Vec<Vec<Result<RunOutcome, Error>>> =
        cells.iter().map(|_| Vec::new()).collect();
    for (ci, result) in results {
        per_cell[ci].push(result);
    }

    let mut rows = Vec::new();
    let mut outcomes = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    let mut probe_files = Vec::new();
    let mut state_dumps = Vec::new();
    for (cell, results) in cells.iter().zip(per_cell) {
        let mut reps = Vec::new();
        let mut failed = None;
        for result in results {
            match result {
                Ok(out) => reps.push(out),
                Err(e) => failed = Some(e.to_string()),
            }
        }
        if let Some(err) = failed {
            failures.push((cell.base_id.clone(), err));
            outcomes.push(None);
            continue;
        }
        let forgetting = mean(&reps.iter().map(|r| r.forgetting).collect::<Vec<_>>());
        let adapt = mean(&reps.iter().map(|r| r.adapt_mean).collect::<Vec<_>>());
        let final_loss = mean(&reps.iter().map(|r| r.final_mean_loss).collect::<Vec<_>>());
        rows.push(MetricsRow {
            protocol: protocol.to_string(),
            method: cell.method.clone(),
            routing: cell.routing_label.clone(),
            schedule: cell.schedule.clone(),
            alpha: cell.alpha,
            delta: cell.delta,
            seed: cell.seed,
            forgetting,
            adapt_at_k: adapt,
            final_avg_loss: final_loss,
        });
        // Representative probe series from replicate 0.
        let series = overlap_series(&reps[0]);
        if !series.is_empty() {
            probe_files.push((cell.base_id.clone(), series));
        }
        if let Some(dump) = state_dump_csv(&reps[0]) {
            state_dumps.push((cell.base_id.clone(), dump));
        }
        outcomes.push(Some(CellOutcome { reps, forgetting }));
    }
    Collected { rows, outcomes, failures, probe_files, state_dumps }
}

fn overlap_series(out: &RunOutcome) -> Vec<(String, ProbeSeries)> {
    if out.overlap.len() < 2 {
        return Vec::new();
    }
    let times: Vec<u64> = out.overlap.iter().map(|(t, _, _)| *t).collect();
    let s: Vec<f64> = out.overlap.iter().map(|(_, s, _)| *s).collect();
    let a: Vec<f64> = out.overlap.iter().map(|(_, _, a)| *a).collect();
    let steady =
        routelab_core::probes::steady_window(*times.first().unwrap(), *times.last().unwrap());
    let mut entries = Vec::new();
    if let Ok(series) = ProbeSeries::new(times.clone(), s, 50, steady) {
        entries.push(("s_t".to_string(), series));
    }
    if let Ok(series) = ProbeSeries::new(times, a, 50, steady) {
        entries.push(("alpha_t".to_string(), series));
    }
    entries
}

fn state_dump_csv(out: &RunOutcome) -> Option<String> {
    let m_snaps = out.m_snapshots.as_ref()?;
    let mut body = String::from("step,group,index,m,v_hat\n");
    for ((step, m), snap) in m_snaps.iter().zip(&out.snapshots.snaps) {
        for (gi, mg) in m.iter().enumerate() {
            for (j, mv) in mg.iter().enumerate() {
                body.push_str(&format!(
                    "{},{},{},{},{}\n",
                    step,
                    gi,
                    j,
                    fmt9(*mv),
                    fmt9(snap.v_hat[gi][j])
                ));
            }
        }
    }
    Some(body)
}

/// Per-method mean +- std table over seeds.
fn summary_table(rows: &[MetricsRow]) -> String {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.routing.clone(), r.schedule.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = format!(
        "{:<28} {:<22} {:<10} {:>22} {:>22} {:>22}\n",
        "method", "routing", "schedule", "forgetting", "adapt_at_k", "final_avg_loss"
    );
    for (method, routing, schedule) in keys {
        let sel: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| r.method == method && r.routing == routing && r.schedule == schedule)
            .collect();
        let f: Vec<f64> = sel.iter().map(|r| r.forgetting).collect();
        let a: Vec<f64> = sel.iter().map(|r| r.adapt_at_k).collect();
        let l: Vec<f64> = sel.iter().map(|r| r.final_avg_loss).collect();
        let fmt_ms = |xs: &[f64]| {
            if xs.len() > 1 {
                format!("{:.6} ± {:.6}", mean(xs), std(xs))
            } else {
                format!("{:.6}", mean(xs))
            }
        };
        out.push_str(&format!(
            "{:<28} {:<22} {:<10} {:>22} {:>22} {:>22}\n",
            method,
            routing,
            schedule,
            fmt_ms(&f),
            fmt_ms(&a),
            fmt_ms(&l)
        ));
    }
    out
}

/// Dispatch a protocol.
pub fn execute(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    match spec.protocol.name {
        Protocol::SurrogateValidate => surrogate_validate(spec),
        Protocol::Ablate2x2 => ablate_2x2(spec),
        Protocol::DenomIntervene => denom_intervene(spec),
        Protocol::EtaMatch => eta_match(spec),
        Protocol::Stress => stress(spec),
        Protocol::RoutingXSchedule => routing_x_schedule(spec),
        Protocol::OverlapSweep => overlap_sweep(spec),
        Protocol::Breadth => breadth(spec),
        Protocol::ReverseRouting => reverse_routing(spec),
        Protocol::NoisyBoundary => noisy_boundary(spec),
    }
}

// ---------------------------------------------------------------------
// surrogate-validate: coordinate-aligned scalar construction
// ---------------------------------------------------------------------

/// Paired shared/decoupled Adam runs fed identical stationary gradients
/// with a single coordinate-axis protected direction. Exactly the setting
/// where the scalar EMA surrogate is exact.
pub fn aligned_pair(
    alpha: f64,
    hyper: &Hyperparams,
    steps: u64,
    snapshot_interval: u64,
    seed: u64,
    dim: usize,
) -> Result<(SnapshotSeries, SnapshotSeries), Error> {
    let shapes = vec![GroupShape { name: "w0".into(), rows: dim, cols: 1 }];
    let mut params_a = routelab_core::model::ParamGroups {
        shapes: shapes.clone(),
        values: vec![vec![0.0; dim]],
    };
    let mut params_b = routelab_core::model::ParamGroups {
        shapes: shapes.clone(),
        values: vec![vec![0.0; dim]],
    };
    let mut state_a = OptState::new(&shapes, &Algo::Adam);
    let mut state_b = OptState::new(&shapes, &Algo::Adam);
    let mut u = vec![0.0; dim];
    u[0] = 1.0;
    let sig = Signature {
        groups: vec![Some(GroupSignature {
            u: Mat::from_columns(&[u]).unwrap(),
            sigma_hat: vec![1.0],
        })],
        source_task: 0,
        extraction_step: 0,
    };
    let shared = RoutingConfig::shared();
    let decoupled = RoutingConfig::decoupled();
    let mut rng = Rng::new(seed, ALIGNED_TAG);
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut snaps_a = Vec::new();
    let mut snaps_b = Vec::new();
    for t in 0..steps {
        let g: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for x in &g {
            hash ^= x.to_bits();
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let raw: GroupVec = vec![g];
        let modified: GroupVec = vec![routelab_core::modifiers::project_group(
            &raw[0],
            sig.groups[0].as_ref().unwrap(),
            alpha,
            false,
        )];
        opt_step(
            &mut params_a,
            &StepSignals { raw: &raw, modified: &modified, replay: None },
            &shared,
            &mut state_a,
            &Algo::Adam,
            hyper,
            None,
        )?;
        opt_step(
            &mut params_b,
            &StepSignals { raw: &raw, modified: &modified, replay: None },
            &decoupled,
            &mut state_b,
            &Algo::Adam,
            hyper,
            None,
        )?;
        if t % snapshot_interval == 0 {
            snaps_a.push(Snapshot { step: t, v_hat: state_a.v_hat_with(&shapes, hyper) });
            snaps_b.push(Snapshot { step: t, v_hat: state_b.v_hat_with(&shapes, hyper) });
        }
    }
    Ok((
        SnapshotSeries { snaps: snaps_a, stream_hash: hash, run_id: "shared".into() },
        SnapshotSeries { snaps: snaps_b, stream_hash: hash, run_id: "decoupled".into() },
    ))
}

fn surrogate_validate(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::SurrogateValidate.label();
    let hyper = spec.optimizer.hyper();
    let steps = 2001u64;
    let interval = spec.probes.snapshot_interval;
    let dim = 8;
    let jobs: Vec<(f64, u64)> = spec
        .grids
        .alpha
        .iter()
        .flat_map(|a| spec.run.seeds.iter().map(move |s| (*a, *s)))
        .collect();
    let results: Vec<Result<(f64, u64, f64, f64, ProbeSeries), Error>> = jobs
        .par_iter()
        .map(|(alpha, seed)| {
            let (shared, decoupled) = aligned_pair(*alpha, &hyper, steps, interval, *seed, dim)?;
            let dirs = {
                let mut u = vec![0.0; dim];
                u[0] = 1.0;
                vec![(0usize, u)]
            };
            let series = r_eta(&shared, &decoupled, &dirs, hyper.eps, 50)?;
            let measured = series.steady_mean();
            let predicted = predicted_eta_ratio(&SurrogateParams {
                alpha: *alpha,
                epsilon: hyper.eps,
                beta2: hyper.beta2,
                directional_energy: 1.0,
            });
            Ok((*alpha, *seed, predicted, measured, series))
        })
        .collect();

    let mut out = ProtocolOutput::default();
    let mut plot_rows = Vec::new();
    let mut per_alpha: Vec<(f64, Vec<f64>, f64)> = Vec::new();
    for result in results {
        match result {
            Ok((alpha, seed, predicted, measured, series)) => {
                let id = run_id(
                    protocol,
                    "surrogate-pair",
                    "shared-vs-decoupled",
                    "fixed",
                    alpha,
                    0.0,
                    seed,
                );
                out.rows.push(MetricsRow {
                    protocol: protocol.into(),
                    method: "surrogate-pair".into(),
                    routing: "shared-vs-decoupled".into(),
                    schedule: "fixed".into(),
                    alpha,
                    delta: 0.0,
                    seed,
                    forgetting: f64::NAN,
                    adapt_at_k: f64::NAN,
                    final_avg_loss: f64::NAN,
                });
                plot_rows.push(vec![
                    fmt9(alpha),
                    seed.to_string(),
                    fmt9(predicted),
                    fmt9(measured),
                    fmt9((measured - predicted).abs() / predicted),
                ]);
                out.probe_files.push((id, vec![("r_eta".to_string(), series)]));
                match per_alpha.iter_mut().find(|(a, _, _)| *a == alpha) {
                    Some((_, ms, _)) => ms.push(measured),
                    None => per_alpha.push((alpha, vec![measured], predicted)),
                }
            }
            Err(e) => out.failures.push(("surrogate-pair".into(), e.to_string())),
        }
    }
    per_alpha.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut summary = String::from("surrogate-validate: predicted vs measured steady R_eta\n");
    summary.push_str(&format!(
        "{:>6} {:>12} {:>12} {:>10}\n",
        "alpha", "predicted", "measured", "rel_err"
    ));
    let mut preds = Vec::new();
    let mut meas = Vec::new();
    let mut max_rel = 0.0f64;
    for (alpha, ms, predicted) in &per_alpha {
        let m = mean(ms);
        let rel = (m - predicted).abs() / predicted;
        max_rel = max_rel.max(rel);
        preds.push(*predicted);
        meas.push(m);
        summary.push_str(&format!(
            "{alpha:>6.2} {predicted:>12.4} {m:>12.4} {:>9.2}%\n",
            rel * 100.0
        ));
    }
    if preds.len() >= 2 {
        summary.push_str(&format!(
            "max relative error {:.2}%; Pearson(predicted, measured) = {:.5}\n",
            max_rel * 100.0,
            pearson(&preds, &meas)
        ));
    }
    out.plotdata.push((
        "surrogate_validate.csv".into(),
        crate::csvio::table_csv("alpha,seed,predicted,measured,rel_err", &plot_rows),
    ));
    out.summary = summary;
    Ok(out)
}

// ---------------------------------------------------------------------
// Mechanism protocols on real streams
// ---------------------------------------------------------------------

/// Attach e_old and r_eta probe series for a block of cells sharing a
/// reference cell (paired streams, replicate by replicate). Returns each
/// cell's replicate-mean steady R_eta relative to the reference.
fn attach_mechanism_probes(
    out: &mut ProtocolOutput,
    cells: &[Cell],
    outcomes: &[Option<CellOutcome>],
    reference_idx: usize,
    spec: &ExperimentSpec,
) -> Vec<Option<f64>> {
    let switch_step = spec.stream.steps_per_task as u64;
    let ma_points = (500 / spec.probes.snapshot_interval.max(1)) as usize;
    let mut steady_ratios = vec![None; cells.len()];
    let Some(reference) = outcomes.get(reference_idx).and_then(|o| o.as_ref()) else {
        return steady_ratios;
    };
    for (idx, (cell, maybe_out)) in cells.iter().zip(outcomes).enumerate() {
        let Some(outcome) = maybe_out.as_ref() else { continue };
        let mut rep_ratios = Vec::new();
        let mut rep0_entries: Vec<(String, ProbeSeries)> = Vec::new();
        for (rep, (run_out, ref_out)) in
            outcome.reps.iter().zip(&reference.reps).enumerate()
        {
            let Some(ref_sig) = ref_out.first_boundary_sig.as_ref() else { continue };
            let dirs = ref_sig.top_directions();
            if rep == 0 {
                if let Some(sig) = run_out.first_boundary_sig.as_ref() {
                    if let Ok(series) = e_old(&run_out.snapshots, sig, switch_step, ma_points) {
                        rep0_entries.push(("e_old".to_string(), series));
                    }
                }
            }
            if let Ok(full) = r_eta(
                &run_out.snapshots,
                &ref_out.snapshots,
                &dirs,
                spec.optimizer.eps,
                ma_points,
            ) {
                let post: Vec<(u64, f64)> = full
                    .times
                    .iter()
                    .zip(&full.values)
                    .filter(|(t, _)| **t >= switch_step)
                    .map(|(t, v)| (*t, *v))
                    .collect();
                if post.len() >= 2 {
                    let times: Vec<u64> = post.iter().map(|(t, _)| *t).collect();
                    let vals: Vec<f64> = post.iter().map(|(_, v)| *v).collect();
                    let steady = routelab_core::probes::steady_window(
                        times[0],
                        *times.last().unwrap(),
                    );
                    if let Ok(series) = ProbeSeries::new(times, vals, ma_points, steady) {
                        rep_ratios.push(series.steady_mean());
                        if rep == 0 {
                            rep0_entries.push(("r_eta".to_string(), series));
                        }
                    }
                }
            }
        }
        if !rep_ratios.is_empty() {
            steady_ratios[idx] = Some(mean(&rep_ratios));
        }
        if !rep0_entries.is_empty() {
            let existing = out.probe_files.iter_mut().find(|(id, _)| *id == cell.base_id);
            match existing {
                Some((_, list)) => list.extend(rep0_entries),
                None => out.probe_files.push((cell.base_id.clone(), rep0_entries)),
            }
        }
    }
    steady_ratios
}

fn ablate_2x2(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::Ablate2x2.label();
    let alpha = spec.grids.alpha[0];
    let algo = spec.optimizer.algo(spec.optimizer.algos[0]);
    let weighted = spec.signature.weighted;
    let mut cells = Vec::new();
    for &seed in &spec.run.seeds {
        cells.push(make_cell(
            protocol, spec, seed, algo, "vanilla", "fixed", alpha,
            Family::None, RoutingConfig::vanilla(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "v-only", "fixed", alpha,
            Family::Projection { weighted }, RoutingConfig::reverse(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "shared", "fixed", alpha,
            Family::Projection { weighted }, RoutingConfig::shared(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "ogp", "fixed", alpha,
            Family::Projection { weighted }, RoutingConfig::decoupled(), false,
        ));
    }
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    for block in 0..spec.run.seeds.len() {
        let lo = block * 4;
        attach_mechanism_probes(
            &mut out,
            &cells[lo..lo + 4],
            &collected.outcomes[lo..lo + 4],
            3,
            spec,
        );
    }
    let mut summary = format!("ablate-2x2 (alpha = {alpha}):\n");
    summary.push_str(&summary_table(&out.rows));
    let mut ord1 = 0;
    let mut ord2 = 0;
    for block in 0..spec.run.seeds.len() {
        let get =
            |o: usize| collected.outcomes[block * 4 + o].as_ref().map(|r| r.forgetting);
        if let (Some(v), Some(vo), Some(sh), Some(og)) = (get(0), get(1), get(2), get(3)) {
            if og < sh && sh < v {
                ord1 += 1;
            }
            if vo >= sh {
                ord2 += 1;
            }
        }
    }
    summary.push_str(&format!(
        "seeds with ogp < shared < vanilla: {ord1}/{}; v-only >= shared: {ord2}/{}\n",
        spec.run.seeds.len(),
        spec.run.seeds.len()
    ));
    out.summary = summary;
    Ok(out)
}

fn denom_intervene(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::DenomIntervene.label();
    let alpha = spec.grids.alpha[0];
    let algo = spec.optimizer.algo(spec.optimizer.algos[0]);
    let weighted = spec.signature.weighted;
    let c_minus = surrogate_denominator_scale(alpha);
    let mk_routing = |v_input: VInput| RoutingConfig {
        m_input: MomentInput::Modified,
        v_input,
        state_correction: StateCorrection::None,
    };
    let mut cells = Vec::new();
    for &seed in &spec.run.seeds {
        cells.push(make_cell(
            protocol, spec, seed, algo, "param-level", "fixed", alpha,
            Family::Projection { weighted }, mk_routing(VInput::Modified), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "surrogate-denom", "fixed", alpha,
            Family::Projection { weighted },
            mk_routing(VInput::Scaled { source: VSource::Raw, c: c_minus }),
            false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "partial-restore", "fixed", alpha,
            Family::Projection { weighted },
            mk_routing(VInput::Mix { weight_raw: 0.75, weight_modified: 0.25 }),
            false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "ogp", "fixed", alpha,
            Family::Projection { weighted }, mk_routing(VInput::Raw), false,
        ));
    }
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    let n_seeds = spec.run.seeds.len();
    let mut spearmans = Vec::new();
    let mut pearsons = Vec::new();
    let mut plot_rows = Vec::new();
    for block in 0..n_seeds {
        let lo = block * 4;
        let ratios = attach_mechanism_probes(
            &mut out,
            &cells[lo..lo + 4],
            &collected.outcomes[lo..lo + 4],
            3,
            spec,
        );
        let mut r = Vec::new();
        let mut f = Vec::new();
        for (i, ratio) in ratios.iter().enumerate() {
            if let (Some(ratio), Some(outc)) = (ratio, collected.outcomes[lo + i].as_ref()) {
                r.push(*ratio);
                f.push(outc.forgetting);
                plot_rows.push(vec![
                    cells[lo + i].method.clone(),
                    cells[lo + i].seed.to_string(),
                    fmt9(*ratio),
                    fmt9(outc.forgetting),
                ]);
            }
        }
        if r.len() == 4 {
            spearmans.push(spearman(&r, &f));
            pearsons.push(pearson(&r, &f));
        }
    }
    let mut summary = format!("denom-intervene (alpha = {alpha}, c_minus = {c_minus}):\n");
    summary.push_str(&summary_table(&out.rows));
    summary.push_str(&format!(
        "Spearman(R_eta, forgetting) per-seed mean = {:.4} over {} seeds\n",
        mean(&spearmans),
        spearmans.len()
    ));
    summary.push_str(&format!(
        "Pearson(R_eta, forgetting) per-seed mean = {:.4}\n",
        mean(&pearsons)
    ));
    out.plotdata.push((
        "denom_intervene.csv".into(),
        crate::csvio::table_csv("cell,seed,r_eta,forgetting", &plot_rows),
    ));
    out.summary = summary;
    Ok(out)
}

fn eta_match(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::EtaMatch.label();
    let alpha = spec.grids.alpha[0];
    let algo = spec.optimizer.algo(spec.optimizer.algos[0]);
    let weighted = spec.signature.weighted;
    let c_plus = routelab_core::optim::lr_match_scale(alpha, spec.optimizer.eps, 1.0)?;
    let mk_routing = |v_input: VInput| RoutingConfig {
        m_input: MomentInput::Modified,
        v_input,
        state_correction: StateCorrection::None,
    };
    let mut cells = Vec::new();
    for &seed in &spec.run.seeds {
        cells.push(make_cell(
            protocol, spec, seed, algo, "param-level", "fixed", alpha,
            Family::Projection { weighted }, mk_routing(VInput::Modified), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "lr-match", "fixed", alpha,
            Family::Projection { weighted },
            mk_routing(VInput::Scaled { source: VSource::Modified, c: c_plus }),
            false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "ogp", "fixed", alpha,
            Family::Projection { weighted }, mk_routing(VInput::Raw), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "denom-downscale", "fixed", alpha,
            Family::Projection { weighted },
            mk_routing(VInput::Scaled { source: VSource::Raw, c: 0.90 }),
            false,
        ));
    }
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    let n_seeds = spec.run.seeds.len();
    let mut recoveries = Vec::new();
    let mut pearsons = Vec::new();
    for block in 0..n_seeds {
        let lo = block * 4;
        let ratios = attach_mechanism_probes(
            &mut out,
            &cells[lo..lo + 4],
            &collected.outcomes[lo..lo + 4],
            2,
            spec,
        );
        let get = |o: usize| collected.outcomes[lo + o].as_ref().map(|r| r.forgetting);
        if let (Some(fp), Some(fm), Some(fo)) = (get(0), get(1), get(2)) {
            let gap = fp - fo;
            if gap.abs() > 1e-12 {
                recoveries.push((fp - fm) / gap);
            }
        }
        let mut r = Vec::new();
        let mut f = Vec::new();
        for (i, ratio) in ratios.iter().enumerate() {
            if let (Some(ratio), Some(outc)) = (ratio, collected.outcomes[lo + i].as_ref()) {
                r.push(*ratio);
                f.push(outc.forgetting);
            }
        }
        if r.len() == 4 {
            pearsons.push(pearson(&r, &f));
        }
    }
    let mut summary = format!("eta-match (alpha = {alpha}, c_plus = {c_plus:.3}):\n");
    summary.push_str(&summary_table(&out.rows));
    summary.push_str(&format!(
        "lr-match gap recovery mean = {:.3} over {} seeds (1.0 = full)\n",
        mean(&recoveries),
        recoveries.len()
    ));
    summary.push_str(&format!(
        "Pearson(R_eta, forgetting) per-seed mean = {:.4}\n",
        mean(&pearsons)
    ));
    out.summary = summary;
    Ok(out)
}

fn stress_like_cells(spec: &ExperimentSpec, protocol: &str, include_shared: bool) -> Vec<Cell> {
    let alpha = spec.grids.alpha[0];
    let algo = spec.optimizer.algo(spec.optimizer.algos[0]);
    let weighted = spec.signature.weighted;
    let mut cells = Vec::new();
    for &seed in &spec.run.seeds {
        cells.push(make_cell(
            protocol, spec, seed, algo, "vanilla", "none", alpha,
            Family::None, RoutingConfig::vanilla(), false,
        ));
        if include_shared {
            cells.push(make_cell(
                protocol, spec, seed, algo, "param-fixed", "fixed", alpha,
                Family::Projection { weighted }, RoutingConfig::shared(), false,
            ));
            cells.push(make_cell(
                protocol, spec, seed, algo, "param-adaptive", "adaptive", alpha,
                Family::Projection { weighted }, RoutingConfig::shared(), true,
            ));
        }
        cells.push(make_cell(
            protocol, spec, seed, algo, "ogp-fixed", "fixed", alpha,
            Family::Projection { weighted }, RoutingConfig::decoupled(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "ogp-adaptive", "adaptive", alpha,
            Family::Projection { weighted }, RoutingConfig::decoupled(), true,
        ));
    }
    cells
}

fn stress(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::Stress.label();
    let cells = stress_like_cells(spec, protocol, false);
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    let mut by_method: Vec<(String, Vec<f64>)> = Vec::new();
    for (cell, outc) in cells.iter().zip(&collected.outcomes) {
        if let Some(o) = outc {
            match by_method.iter_mut().find(|(m, _)| *m == cell.method) {
                Some((_, v)) => v.push(o.forgetting),
                None => by_method.push((cell.method.clone(), vec![o.forgetting])),
            }
        }
    }
    let mut summary = format!("stress (delta = {}):\n", spec.stream.delta);
    summary.push_str(&summary_table(&out.rows));
    let lookup = |m: &str| by_method.iter().find(|(k, _)| k == m).map(|(_, v)| mean(v));
    if let (Some(v), Some(fx), Some(ad)) =
        (lookup("vanilla"), lookup("ogp-fixed"), lookup("ogp-adaptive"))
    {
        summary.push_str(&format!(
            "sign pattern: fixed - vanilla = {:+.6}; adaptive - vanilla = {:+.6}\n",
            fx - v,
            ad - v
        ));
    }
    out.summary = summary;
    Ok(out)
}

fn routing_x_schedule(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::RoutingXSchedule.label();
    let cells = stress_like_cells(spec, protocol, true);
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    let mut summary = format!("routing-x-schedule (delta = {}):\n", spec.stream.delta);
    summary.push_str(&summary_table(&out.rows));
    out.summary = summary;
    Ok(out)
}

fn overlap_sweep(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::OverlapSweep.label();
    if spec.grids.delta.is_empty() {
        return Err(Error::Config("overlap-sweep requires a delta grid".into()));
    }
    let alpha = spec.grids.alpha[0];
    let algo = spec.optimizer.algo(spec.optimizer.algos[0]);
    let weighted = spec.signature.weighted;
    let mut cells = Vec::new();
    for &delta in &spec.grids.delta {
        let mut sub = spec.clone();
        sub.stream.delta = delta;
        for &seed in &spec.run.seeds {
            for (method, family, routing, adaptive, schedule) in [
                ("vanilla", Family::None, RoutingConfig::vanilla(), false, "none"),
                (
                    "ogp-fixed",
                    Family::Projection { weighted },
                    RoutingConfig::decoupled(),
                    false,
                    "fixed",
                ),
                (
                    "ogp-adaptive",
                    Family::Projection { weighted },
                    RoutingConfig::decoupled(),
                    true,
                    "adaptive",
                ),
            ] {
                cells.push(make_cell(
                    protocol, &sub, seed, algo, method, schedule, alpha, family, routing,
                    adaptive,
                ));
            }
        }
    }
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    let mut plot_rows = Vec::new();
    for (cell, outc) in cells.iter().zip(&collected.outcomes) {
        if let Some(o) = outc {
            if cell.method == "ogp-adaptive" {
                let s_vals: Vec<f64> = o.reps.iter().map(|r| r.mean_s_late).collect();
                let a_vals: Vec<f64> = o.reps.iter().map(|r| r.mean_alpha_late).collect();
                plot_rows.push(vec![
                    fmt9(cell.delta),
                    cell.seed.to_string(),
                    fmt9(mean(&s_vals)),
                    fmt9(mean(&a_vals)),
                ]);
            }
        }
    }
    out.plotdata.push((
        "overlap_measured.csv".into(),
        crate::csvio::table_csv("delta,seed,measured_overlap,mean_alpha", &plot_rows),
    ));
    let mut summary = String::from("overlap-sweep:\n");
    summary.push_str(&summary_table(&out.rows));
    out.summary = summary;
    Ok(out)
}

fn breadth(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::Breadth.label();
    let alpha = spec.grids.alpha[0];
    let lambda = spec.grids.lambda[0];
    let rho = spec.grids.rho[0];
    let budget = spec.grids.replay_budget;
    let weighted = spec.signature.weighted;
    let mut cells = Vec::new();
    for &seed in &spec.run.seeds {
        for name in &spec.optimizer.algos {
            let algo = spec.optimizer.algo(*name);
            let tag = match name {
                AlgoName::Adam => "projection@adam",
                AlgoName::Adamw => "projection@adamw",
                AlgoName::Adafactor => "projection@adafactor",
                AlgoName::Sgdm => "projection@sgdm",
            };
            // SGD+Momentum has no denominator pathway; its contrast is
            // state projection of the full momentum (parameter-level)
            // against gradient projection into the momentum.
            let shared_routing = if matches!(name, AlgoName::Sgdm) {
                RoutingConfig {
                    m_input: MomentInput::Raw,
                    v_input: VInput::Raw,
                    state_correction: StateCorrection::FscM,
                }
            } else {
                RoutingConfig::shared()
            };
            cells.push(make_cell(
                protocol, spec, seed, algo, tag, "fixed", alpha,
                Family::Projection { weighted }, shared_routing, false,
            ));
            cells.push(make_cell(
                protocol, spec, seed, algo, tag, "fixed", alpha,
                Family::Projection { weighted }, RoutingConfig::decoupled(), false,
            ));
        }
        let adam = spec.optimizer.algo(AlgoName::Adam);
        cells.push(make_cell(
            protocol, spec, seed, adam, "penalty-fisher", "fixed", lambda,
            Family::PenaltyFisher, RoutingConfig::shared(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, adam, "penalty-fisher", "fixed", lambda,
            Family::PenaltyFisher, RoutingConfig::decoupled(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, adam, "penalty-fisher", "fixed", lambda,
            Family::PenaltyFisher, RoutingConfig::reverse(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, adam, "penalty-path", "fixed", lambda,
            Family::PenaltyPath, RoutingConfig::shared(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, adam, "penalty-path", "fixed", lambda,
            Family::PenaltyPath, RoutingConfig::decoupled(), false,
        ));
        let replay = Family::Replay { rho, budget_fraction: budget };
        cells.push(make_cell(
            protocol, spec, seed, adam, "replay", "fixed", rho,
            replay, RoutingConfig::shared(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, adam, "replay", "fixed", rho,
            replay, RoutingConfig::decoupled(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, adam, "replay", "fixed", rho,
            replay,
            RoutingConfig {
                m_input: MomentInput::Modified,
                v_input: VInput::ReplayOnly,
                state_correction: StateCorrection::None,
            },
            false,
        ));
    }
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    let mut summary = String::from("breadth:\n");
    summary.push_str(&summary_table(&out.rows));
    let pick = |method: &str, routing: &str| {
        let vals: Vec<f64> = cells
            .iter()
            .zip(&collected.outcomes)
            .filter_map(|(c, o)| {
                (c.method == method && c.routing_label == routing)
                    .then(|| o.as_ref().map(|r| r.forgetting))
                    .flatten()
            })
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(mean(&vals))
        }
    };
    if let (Some(new_v), Some(mixed), Some(rep)) = (
        pick("replay", "mod/raw"),
        pick("replay", "mod/mod"),
        pick("replay", "mod/replay"),
    ) {
        summary.push_str(&format!(
            "replay denominators: raw-new {new_v:.6} | mixed {mixed:.6} | replay-only {rep:.6}\n"
        ));
    }
    out.summary = summary;
    Ok(out)
}

fn reverse_routing(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::ReverseRouting.label();
    let alpha = spec.grids.alpha[0];
    let algo = spec.optimizer.algo(spec.optimizer.algos[0]);
    let weighted = spec.signature.weighted;
    let mut cells = Vec::new();
    for &seed in &spec.run.seeds {
        cells.push(make_cell(
            protocol, spec, seed, algo, "shared", "fixed", alpha,
            Family::Projection { weighted }, RoutingConfig::shared(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "ogp", "fixed", alpha,
            Family::Projection { weighted }, RoutingConfig::decoupled(), false,
        ));
        cells.push(make_cell(
            protocol, spec, seed, algo, "reverse", "fixed", alpha,
            Family::Projection { weighted }, RoutingConfig::reverse(), false,
        ));
    }
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    let mut worse = 0;
    for block in 0..spec.run.seeds.len() {
        let lo = block * 3;
        if let (Some(sh), Some(rv)) = (
            collected.outcomes[lo].as_ref().map(|o| o.forgetting),
            collected.outcomes[lo + 2].as_ref().map(|o| o.forgetting),
        ) {
            if rv > sh {
                worse += 1;
            }
        }
    }
    let mut summary = format!("reverse-routing (alpha = {alpha}):\n");
    summary.push_str(&summary_table(&out.rows));
    summary.push_str(&format!(
        "seeds with reverse > shared: {worse}/{}\n",
        spec.run.seeds.len()
    ));
    out.summary = summary;
    Ok(out)
}

fn noisy_boundary(spec: &ExperimentSpec) -> Result<ProtocolOutput, Error> {
    let protocol = Protocol::NoisyBoundary.label();
    let noise_grid = if spec.grids.boundary_noise.is_empty() {
        vec![0.0, 0.1, 0.2, 0.3]
    } else {
        spec.grids.boundary_noise.clone()
    };
    let alpha = spec.grids.alpha[0];
    let algo = spec.optimizer.algo(spec.optimizer.algos[0]);
    let weighted = spec.signature.weighted;
    let mut cells = Vec::new();
    for &noise in &noise_grid {
        let mut sub = spec.clone();
        sub.stream.boundary_noise = noise;
        for &seed in &spec.run.seeds {
            for (base, family, routing, adaptive, schedule) in [
                ("vanilla", Family::None, RoutingConfig::vanilla(), false, "none"),
                (
                    "ogp-fixed",
                    Family::Projection { weighted },
                    RoutingConfig::decoupled(),
                    false,
                    "fixed",
                ),
                (
                    "ogp-adaptive",
                    Family::Projection { weighted },
                    RoutingConfig::decoupled(),
                    true,
                    "adaptive",
                ),
            ] {
                let method = format!("{base}~bn{noise:.2}");
                cells.push(make_cell(
                    protocol, &sub, seed, algo, &method, schedule, alpha, family, routing,
                    adaptive,
                ));
            }
        }
    }
    let collected = run_and_collect(protocol, &cells);
    let mut out = ProtocolOutput {
        rows: collected.rows,
        probe_files: collected.probe_files,
        failures: collected.failures,
        state_dumps: collected.state_dumps,
        ..Default::default()
    };
    let mut summary = String::from("noisy-boundary:\n");
    summary.push_str(&summary_table(&out.rows));
    out.summary = summary;
    Ok(out)
}
