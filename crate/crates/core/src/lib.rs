//! Desk-scale laboratory for routable-moment adaptive optimizers under
//! continual task streams: synthetic stream generation, a small analytic-
//! gradient trainee, the three gradient-modification families, boundary-
//! triggered gradient signatures with an overlap-aware strength schedule,
//! optimizers with independently routable moment inputs, optimizer-state
//! probes, and continual-learning outcome metrics.

pub mod error;
pub mod metrics;
pub mod model;
pub mod modifiers;
pub mod optim;
pub mod probes;
pub mod signatures;
pub mod taskgen;

pub use error::Error;

/// Per-parameter-group vector storage; index order matches
/// [`model::ParamGroups`].
pub type GroupVec = Vec<Vec<f64>>;

/// Helpers over per-group vectors.
pub mod groupvec {
    use super::GroupVec;

    pub fn zeros_like(g: &GroupVec) -> GroupVec {
        g.iter().map(|v| vec![0.0; v.len()]).collect()
    }

    pub fn norm(g: &GroupVec) -> f64 {
        g.iter()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(g: &mut GroupVec, c: f64) {
        for v in g.iter_mut() {
            for x in v.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn total_dim(g: &GroupVec) -> usize {
        g.iter().map(|v| v.len()).sum()
    }

    pub fn is_finite(g: &GroupVec) -> bool {
        g.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}
