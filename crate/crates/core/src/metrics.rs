//! Continual-learning outcome metrics over per-task evaluation scores,
//! plus the correlation estimators the reports use.

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Lower is better (loss).
    Loss,
    /// Higher is better (accuracy).
    Accuracy,
}

/// s[t][i]: evaluation score of task i measured at the end of training
/// stage t, defined for i <= t.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    kind: MetricKind,
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(kind: MetricKind) -> Self {
        ScoreMatrix { kind, rows: Vec::new() }
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    /// Append the scores recorded at the end of the next stage; stage t
    /// must carry exactly t+1 task scores.
    pub fn push_stage(&mut self, scores: Vec<f64>) -> Result<(), Error> {
        if scores.len() != self.rows.len() + 1 {
            return Err(Error::Score(format!(
                "stage {} needs {} scores, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Score("non-finite score".into()));
        }
        self.rows.push(scores);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn score(&self, stage: usize, task: usize) -> f64 {
        self.rows[stage][task]
    }

    /// Mean over tasks of the final-stage scores.
    pub fn final_mean(&self) -> f64 {
        let last = self.rows.last().expect("at least one stage");
        last.iter().sum::<f64>() / last.len() as f64
    }

    /// Forgetting = (1/(T-1)) sum over earlier tasks of the worst-case drop
    /// from peak to final. For loss metrics the difference is flipped so
    /// degradation stays positive. Never negative: the max over t >= i
    /// includes the final stage itself.
    pub fn forgetting(&self) -> Result<f64, Error> {
        let t_total = self.rows.len();
        if t_total < 2 {
            return Err(Error::Score(format!("forgetting needs >= 2 stages, got {t_total}")));
        }
        let last = t_total - 1;
        let mut sum = 0.0;
        for i in 0..last {
            let final_score = self.rows[last][i];
            let mut worst = f64::NEG_INFINITY;
            for t in i..t_total {
                let diff = match self.kind {
                    MetricKind::Accuracy => self.rows[t][i] - final_score,
                    MetricKind::Loss => final_score - self.rows[t][i],
                };
                worst = worst.max(diff);
            }
            sum += worst;
        }
        Ok(sum / last as f64)
    }
}

/// Evaluation score of the current task after exactly k optimizer steps,
/// read from a recorded (step, score) series.
pub fn adapt_at_k(series: &[(u64, f64)], k: u64) -> Result<f64, Error> {
    if series.last().map_or(true, |(step, _)| *step < k) {
        return Err(Error::Score(format!("series too short for k = {k}")));
    }
    series
        .iter()
        .find(|(step, _)| *step == k)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Score(format!("no recorded evaluation at step {k}")))
}

/// Standard Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).expect("finite values"));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // Average rank for ties.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}
