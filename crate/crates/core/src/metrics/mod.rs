//! Evaluation metrics: OOD detection scores, normalization and summary
//! statistics, checkpoint evaluation and far-from-data diagnostics.

mod diagnostics;
mod eval;

pub use diagnostics::{asymptotic_diagnostics, probe_states, DiagnosticRow, DiagnosticSummary, DiagnosticsReport, DELTA_GRID};
pub use eval::{
    evaluate_checkpoint, evaluate_head, run_episodes, target_name, CellSummary, EpisodeDump, EpisodeOutcome, EvalConfig,
    EvalOutput, EvalReport, DEFAULT_STRENGTHS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentError;
use crate::envs::EnvError;
use crate::heads::HeadError;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Id,
    Ood,
}

/// One uncertainty score; OOD is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
}

impl ScoredSample {
    pub fn id(score: f64) -> Self {
        Self { score, label: Label::Id }
    }

    pub fn ood(score: f64) -> Self {
        Self { score, label: Label::Ood }
    }
}

/// Groups of tied scores in descending score order as `(ood, id)` counts.
fn tie_groups(samples: &[ScoredSample]) -> Result<Vec<(u64, u64)>, MetricsError> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(MetricsError::Undefined(format!("non-finite score {}", s.score)));
    }
    let n_ood = samples.iter().filter(|s| s.label == Label::Ood).count();
    if n_ood == 0 || n_ood == samples.len() {
        return Err(MetricsError::Undefined("both ID and OOD samples are required".into()));
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = f64::NAN;
    for s in sorted {
        if s.score != last {
            groups.push((0, 0));
            last = s.score;
        }
        let g = groups.last_mut().expect("pushed above");
        match s.label {
            Label::Ood => g.0 += 1,
            Label::Id => g.1 += 1,
        }
    }
    Ok(groups)
}

/// Mann-Whitney AUC: `P(score_ood > score_id) + ½·P(tie)`.
pub fn auc_roc(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    let groups = tie_groups(samples)?;
    let (n_ood, n_id) = groups.iter().fold((0, 0), |(p, q), g| (p + g.0, q + g.1));
    // twice the statistic stays an integer
    let mut twice_u: u64 = 0;
    let mut id_below: u64 = n_id;
    for &(ood, id) in &groups {
        id_below -= id;
        twice_u += 2 * ood * id_below + ood * id;
    }
    Ok(twice_u as f64 / (2 * n_ood * n_id) as f64)
}

/// Average precision with OOD as positive: `Σ (R_k − R_{k−1})·P_k` over
/// distinct thresholds in descending order, tied scores entering together.
pub fn auc_pr(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    let groups = tie_groups(samples)?;
    let n_pos: u64 = groups.iter().map(|g| g.0).sum();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    for &(ood, id) in &groups {
        tp += ood;
        fp += id;
        if ood > 0 {
            area += (ood as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

/// `(x − min)/(max − min)`; a constant (or empty) series maps to zeros.
pub fn minmax_normalize(series: &[f64]) -> Vec<f64> {
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; series.len()];
    }
    series.iter().map(|x| (x - lo) / span).collect()
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`; zero for a single value).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (Pearson on average ranks); 0 when either
/// series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired series");
    if x.len() < 2 {
        return 0.0;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Trapezoidal area under `y` sampled at `x`.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0).sum()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
