//! Synthetic continual task streams with controllable inter-task
//! gradient-subspace overlap, task boundaries, and optional boundary noise.
//!
//! Two constructions are available. `subspace`: consecutive tasks share
//! `ceil(delta * k)` feature-basis columns (a fixed chain-wide core), the
//! rest orthogonal; teacher weights are inherited on shared columns so
//! supervision on the overlap stays consistent across tasks. `mixture`:
//! per-sample mixing, each sample of task i drawn from task i-1's base
//! distribution with probability delta.
//!
//! Streams are bitwise reproducible: batch content is pure in
//! (StreamSpec, global step) because each step derives its own RNG stream
//! from the stream seed.

use numkit::{mix64, orthonormal_columns, Mat, Rng};
use serde::{Deserialize, Serialize};

use crate::error::Error;

const BASIS_STREAM: u64 = 0xB0;
const TEACHER_STREAM: u64 = 0x7E;
const TRAIN_TAG: u64 = 0x11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    Subspace,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    /// Linear teacher plus Gaussian noise; MSE trainee, 1 output.
    Linear,
    /// 2-class logistic teacher; cross-entropy trainee, 2 outputs.
    Logistic,
}

/// Generative parameters of a stream; this is what the runner config
/// serializes. The full [`StreamSpec`] (bases, teachers) is derived
/// deterministically from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    /// Inter-task overlap in [0, 1].
    pub delta: f64,
    /// Number of tasks (>= 2).
    pub tasks: usize,
    /// Ambient input dimension n.
    pub input_dim: usize,
    /// Per-task feature subspace dimension k.
    pub subspace_dim: usize,
    #[serde(default = "default_steps_per_task")]
    pub steps_per_task: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub boundary_noise: f64,
    #[serde(default = "default_construction")]
    pub construction: Construction,
    #[serde(default = "default_target")]
    pub target: TargetKind,
    pub seed: u64,
}

fn default_steps_per_task() -> usize {
    2000
}
fn default_batch_size() -> usize {
    16
}
fn default_noise_std() -> f64 {
    0.05
}
fn default_construction() -> Construction {
    Construction::Subspace
}
fn default_target() -> TargetKind {
    TargetKind::Linear
}

#[derive(Debug, Clone)]
pub enum TargetMap {
    Linear(Vec<f64>),
    Logistic(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Orthonormal feature basis, input_dim x subspace_dim.
    pub basis: Mat,
    pub teacher: TargetMap,
    pub noise_std: f64,
}

#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub config: StreamConfig,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// batch_size x input_dim.
    pub inputs: Mat,
    /// batch_size x output_dim.
    pub targets: Mat,
    /// Task whose distribution actually produced this batch.
    pub true_task_id: usize,
}

pub fn output_dim(target: TargetKind) -> usize {
    match target {
        TargetKind::Linear => 1,
        TargetKind::Logistic => 2,
    }
}

pub fn total_steps(cfg: &StreamConfig) -> usize {
    cfg.tasks * cfg.steps_per_task
}

pub fn scheduled_task(cfg: &StreamConfig, global_step: usize) -> usize {
    global_step / cfg.steps_per_task
}

/// Boundary-noise window: the first 10% of each task's steps.
pub fn boundary_window(cfg: &StreamConfig) -> usize {
    (cfg.steps_per_task as f64 * 0.10).ceil() as usize
}

fn validate(cfg: &StreamConfig) -> Result<(), Error> {
    if cfg.tasks < 2 {
        return Err(Error::Config(format!("need >= 2 tasks, got {}", cfg.tasks)));
    }
    if !(0.0..=1.0).contains(&cfg.delta) {
        return Err(Error::Config(format!("delta {} outside [0,1]", cfg.delta)));
    }
    if !(0.0..=1.0).contains(&cfg.boundary_noise) {
        return Err(Error::Config(format!(
            "boundary_noise {} outside [0,1]",
            cfg.boundary_noise
        )));
    }
    if cfg.subspace_dim == 0 || cfg.input_dim < cfg.subspace_dim {
        return Err(Error::Config(format!(
            "subspace_dim {} must be in [1, input_dim {}]",
            cfg.subspace_dim, cfg.input_dim
        )));
    }
    if cfg.steps_per_task == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("steps_per_task and batch_size must be positive".into()));
    }
    if cfg.noise_std < 0.0 {
        return Err(Error::Config(format!("noise_std {} < 0", cfg.noise_std)));
    }
    Ok(())
}

/// Number of basis columns consecutive tasks share under the subspace
/// construction.
pub fn shared_columns(delta: f64, subspace_dim: usize) -> usize {
    ((delta * subspace_dim as f64).ceil() as usize).min(subspace_dim)
}

pub fn build_stream(cfg: &StreamConfig) -> Result<StreamSpec, Error> {
    validate(cfg)?;
    let n = cfg.input_dim;
    let k = cfg.subspace_dim;
    let t = cfg.tasks;
    let fresh_total = match cfg.construction {
        Construction::Subspace => {
            let c = shared_columns(cfg.delta, k);
            k + (t - 1) * (k - c)
        }
        Construction::Mixture => k * t,
    };
    if fresh_total > n {
        return Err(Error::Config(format!(
            "stream needs {fresh_total} orthogonal directions but input_dim is {n}"
        )));
    }

    let mut basis_rng = Rng::new(cfg.seed, BASIS_STREAM);
    let raw = Mat::from_fn(n, fresh_total, |_, _| basis_rng.normal());
    let pool = orthonormal_columns(&raw);

    let mut teacher_rng = Rng::new(cfg.seed, TEACHER_STREAM);
    let mut tasks = Vec::with_capacity(t);
    let mut prev_weights: Option<Vec<f64>> = None;
    for task_id in 0..t {
        let (cols, inherit) = match cfg.construction {
            Construction::Subspace => {
                let c = shared_columns(cfg.delta, k);
                if task_id == 0 {
                    ((0..k).collect::<Vec<_>>(), 0)
                } else {
                    let mut cols: Vec<usize> = (0..c).collect();
                    let start = k + (task_id - 1) * (k - c);
                    cols.extend(start..start + (k - c));
                    (cols, c)
                }
            }
            Construction::Mixture => ((task_id * k..(task_id + 1) * k).collect(), 0),
        };
        let basis = Mat::from_fn(n, k, |i, j| pool.get(i, cols[j]));
        // Every teacher has unit norm so all tasks carry the same signal
        // scale; shared positions inherit the previous task's weights
        // exactly and the fresh part is scaled to fill the remaining norm.
        let mut weights = vec![0.0; k];
        let mut inherited_norm2 = 0.0;
        for (j, w) in weights.iter_mut().enumerate().take(inherit) {
            *w = prev_weights.as_ref().expect("previous task exists")[j];
            inherited_norm2 += *w * *w;
        }
        let fresh: Vec<f64> = (0..k - inherit).map(|_| teacher_rng.normal()).collect();
        let fresh_norm2: f64 = fresh.iter().map(|x| x * x).sum();
        if k > inherit && fresh_norm2 > 0.0 {
            let target = (1.0 - inherited_norm2.min(1.0)).max(0.0);
            let scale = (target / fresh_norm2).sqrt();
            for (j, f) in fresh.into_iter().enumerate() {
                weights[inherit + j] = f * scale;
            }
        }
        prev_weights = Some(weights.clone());
        let teacher = match cfg.target {
            TargetKind::Linear => TargetMap::Linear(weights),
            TargetKind::Logistic => TargetMap::Logistic(weights),
        };
        tasks.push(TaskSpec { task_id, basis, teacher, noise_std: cfg.noise_std });
    }
    Ok(StreamSpec { config: cfg.clone(), tasks })
}

fn sample_into(
    task: &TaskSpec,
    rng: &mut Rng,
    input_row: &mut [f64],
    target_row: &mut [f64],
) {
    let k = task.basis.cols();
    let z: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    let x = task.basis.mul_vec(&z);
    input_row.copy_from_slice(&x);
    match &task.teacher {
        TargetMap::Linear(w) => {
            let mut y = 0.0;
            for j in 0..k {
                y += w[j] * z[j];
            }
            y += task.noise_std * rng.normal();
            target_row[0] = y;
        }
        TargetMap::Logistic(w) => {
            let mut margin = 0.0;
            for j in 0..k {
                margin += w[j] * z[j];
            }
            let p = 1.0 / (1.0 + (-2.0 * margin).exp());
            let label = rng.uniform() < p;
            target_row[0] = if label { 0.0 } else { 1.0 };
            target_row[1] = if label { 1.0 } else { 0.0 };
        }
    }
}

/// Training batch for `global_step`. Pure in (stream, global_step).
pub fn next_batch(stream: &StreamSpec, global_step: usize) -> Result<Batch, Error> {
    let cfg = &stream.config;
    if global_step >= total_steps(cfg) {
        return Err(Error::Range(format!(
            "step {global_step} >= {}",
            total_steps(cfg)
        )));
    }
    let sched = scheduled_task(cfg, global_step);
    let step_in_task = global_step % cfg.steps_per_task;
    let mut rng = Rng::new(cfg.seed, mix64(TRAIN_TAG, global_step as u64));

    let mut source = sched;
    if sched > 0 && step_in_task < boundary_window(cfg) && cfg.boundary_noise > 0.0 {
        if rng.uniform() < cfg.boundary_noise {
            source = sched - 1;
        }
    }

    let m = output_dim(cfg.target);
    let b = cfg.batch_size;
    let mut inputs = Mat::zeros(b, cfg.input_dim);
    let mut targets = Mat::zeros(b, m);
    for row in 0..b {
        let task_idx = match cfg.construction {
            Construction::Mixture if source > 0 && rng.uniform() < cfg.delta => source - 1,
            _ => source,
        };
        let (ins, tgs) = (inputs.row_mut(row), targets_row(&mut targets, row));
        sample_into(&stream.tasks[task_idx], &mut rng, ins, tgs);
    }
    Ok(Batch { inputs, targets, true_task_id: source })
}

fn targets_row(targets: &mut Mat, row: usize) -> &mut [f64] {
    targets.row_mut(row)
}

/// Held-out evaluation set drawn from the task's own distribution. Callers
/// supply a dedicated RNG stream disjoint from training.
pub fn eval_set(task: &TaskSpec, size: usize, rng: &mut Rng) -> Batch {
    assert!(size >= 1, "eval_set: size must be >= 1");
    let m = match &task.teacher {
        TargetMap::Linear(_) => 1,
        TargetMap::Logistic(_) => 2,
    };
    let n = task.basis.rows();
    let mut inputs = Mat::zeros(size, n);
    let mut targets = Mat::zeros(size, m);
    for row in 0..size {
        let (ins, tgs) = (inputs.row_mut(row), targets_row(&mut targets, row));
        sample_into(task, rng, ins, tgs);
    }
    Batch { inputs, targets, true_task_id: task.task_id }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(delta: f64, tasks: usize, n: usize, k: usize, seed: u64) -> StreamConfig {
        StreamConfig {
            delta,
            tasks,
            input_dim: n,
            subspace_dim: k,
            steps_per_task: 40,
            batch_size: 8,
            noise_std: 0.05,
            boundary_noise: 0.0,
            construction: Construction::Subspace,
            target: TargetKind::Linear,
            seed,
        }
    }

    #[test]
    fn disjoint_bases_at_delta_zero() {
        let stream = build_stream(&cfg(0.0, 2, 8, 2, 3)).unwrap();
        let b0 = &stream.tasks[0].basis;
        let b1 = &stream.tasks[1].basis;
        let cross = b0.transpose().mul(b1);
        for i in 0..2 {
            for j in 0..2 {
                assert!(cross.get(i, j).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_bases_at_delta_one() {
        let stream = build_stream(&cfg(1.0, 2, 8, 3, 3)).unwrap();
        assert_eq!(stream.tasks[0].basis.data(), stream.tasks[1].basis.data());
    }

    #[test]
    fn dimension_overflow_is_config_error() {
        assert!(build_stream(&cfg(0.0, 4, 6, 2, 0)).is_err());
    }

    #[test]
    fn batches_replay_bitwise() {
        let stream = build_stream(&cfg(0.4, 3, 12, 3, 17)).unwrap();
        for step in [0usize, 5, 41, 80, 119] {
            let a = next_batch(&stream, step).unwrap();
            let b = next_batch(&stream, step).unwrap();
            assert_eq!(a.inputs.data(), b.inputs.data());
            assert_eq!(a.targets.data(), b.targets.data());
            assert_eq!(a.true_task_id, b.true_task_id);
        }
        assert!(next_batch(&stream, 120).is_err());
    }

    #[test]
    fn boundary_noise_extremes() {
        let mut c = cfg(0.0, 2, 8, 2, 5);
        c.boundary_noise = 0.0;
        let stream = build_stream(&c).unwrap();
        for step in 40..44 {
            assert_eq!(next_batch(&stream, step).unwrap().true_task_id, 1);
        }
        c.boundary_noise = 1.0;
        let stream = build_stream(&c).unwrap();
        let window = boundary_window(&c);
        for step in 40..40 + window {
            assert_eq!(next_batch(&stream, step).unwrap().true_task_id, 0);
        }
        // Outside the window the scheduled task always wins.
        assert_eq!(next_batch(&stream, 40 + window).unwrap().true_task_id, 1);
    }

    #[test]
    fn boundary_noise_fraction_within_three_se() {
        let p = 0.3;
        let mut c = cfg(0.0, 2, 8, 2, 23);
        c.steps_per_task = 4000;
        c.boundary_noise = p;
        let stream = build_stream(&c).unwrap();
        let window = boundary_window(&c);
        let mut off = 0usize;
        for step in 4000..4000 + window {
            if next_batch(&stream, step).unwrap().true_task_id == 0 {
                off += 1;
            }
        }
        let frac = off as f64 / window as f64;
        let se = (p * (1.0 - p) / window as f64).sqrt();
        assert!(
            (frac - p).abs() <= 3.0 * se,
            "off-task fraction {frac} vs p {p} (se {se})"
        );
    }

    #[test]
    fn eval_set_deterministic_per_stream() {
        let stream = build_stream(&cfg(0.2, 2, 10, 2, 9)).unwrap();
        let mut r1 = Rng::new(9, 0xE0);
        let mut r2 = Rng::new(9, 0xE0);
        let a = eval_set(&stream.tasks[0], 32, &mut r1);
        let b = eval_set(&stream.tasks[0], 32, &mut r2);
        assert_eq!(a.inputs.data(), b.inputs.data());
        let mut r3 = Rng::new(9, 0xE1);
        let c = eval_set(&stream.tasks[0], 32, &mut r3);
        assert_ne!(a.inputs.data(), c.inputs.data());
    }

    #[test]
    fn teacher_loss_floor_is_noise_variance() {
        // Evaluating the teacher itself: MSE ~= noise_std^2.
        let c = cfg(0.0, 2, 10, 3, 31);
        let stream = build_stream(&c).unwrap();
        let task = &stream.tasks[0];
        let mut rng = Rng::new(31, 0xE0);
        let batch = eval_set(task, 20_000, &mut rng);
        let TargetMap::Linear(w) = &task.teacher else { panic!("linear teacher") };
        let teacher_dir = task.basis.mul_vec(w); // prediction = x . (B w) since z = B^T x
        let mut mse = 0.0;
        for row in 0..20_000 {
            let x = batch.inputs.row(row);
            let pred: f64 = x.iter().zip(&teacher_dir).map(|(a, b)| a * b).sum();
            mse += (pred - batch.targets.get(row, 0)).powi(2);
        }
        mse /= 20_000.0;
        let floor = c.noise_std * c.noise_std;
        assert!(
            (mse - floor).abs() < 0.2 * floor,
            "teacher mse {mse} vs floor {floor}"
        );
    }
}
