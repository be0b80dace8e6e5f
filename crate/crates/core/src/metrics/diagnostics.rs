use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::envs::{Env, EnvId, Environment};
use crate::heads::{AnyHead, Head, HeadKind};
use crate::ndcore::Tensor;

pub const DELTA_GRID: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

/// DKL: predictive variance within this relative distance of κ(0,0).
pub const DKL_VAR_TOL: f64 = 0.01;
/// PostNet: evidence ratio n(δx)/n(x) below this at the largest δ.
pub const POSTNET_RATIO_MAX: f64 = 1e-3;
/// Share of probes whose pre-normalization latent norm must be non-decreasing.
pub const MONOTONE_SHARE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub probe: usize,
    pub delta: f64,
    /// Norm of the encoder output before its final batch norm.
    pub latent_norm: f64,
    /// Per action: GP predictive variance (DKL) or log evidence (PostNet).
    pub value: Vec<f64>,
    /// Per action: κ(0,0) (DKL) or n(δx)/n(x) (PostNet).
    pub reference: Vec<f64>,
    /// Per action epistemic uncertainty from the head's ordinary prediction.
    pub epistemic: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub head: HeadKind,
    pub probes: usize,
    pub max_delta: f64,
    pub monotone_share: f64,
    pub latent_norms_pass: bool,
    /// DKL: max over probes and actions of |σ²/κ(0,0) − 1| at the largest δ.
    pub dkl_max_var_gap: Option<f64>,
    /// PostNet: max evidence ratio at the largest δ.
    pub postnet_max_ratio: Option<f64>,
    pub limit_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rows: Vec<DiagnosticRow>,
    /// `None` for heads without the far-from-data results.
    pub summary: Option<DiagnosticSummary>,
    pub notice: Option<String>,
}

impl DiagnosticsReport {
    pub fn passed(&self) -> bool {
        self.summary.as_ref().is_some_and(|s| s.latent_norms_pass && s.limit_pass)
    }
}

/// Up to `n` states visited by greedy in-distribution rollouts, evenly spaced
/// over the trajectory.
pub fn probe_states(head: &AnyHead, env_id: EnvId, n: usize, seed: u64) -> Result<Tensor, MetricsError> {
    let mut env = Env::new(env_id, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visited: Vec<Vec<f64>> = Vec::new();
    while visited.len() < n {
        let mut state = env.reset();
        loop {
            visited.push(state.clone());
            let x = Tensor::from_rows(std::slice::from_ref(&state)).map_err(|e| MetricsError::Config(e.to_string()))?;
            let pred = head.predict(&x, &mut rng)?;
            let step = env.step(pred.greedy(0))?;
            if step.terminal {
                break;
            }
            state = step.observation;
        }
    }
    let stride = visited.len() as f64 / n as f64;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| visited[(i as f64 * stride) as usize].clone()).collect();
    Tensor::from_rows(&rows).map_err(|e| MetricsError::Config(e.to_string()))
}

fn norms(z: &Tensor) -> Vec<f64> {
    (0..z.rows()).map(|i| z.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Scales every probe state by each δ and records latent norms together with
/// the GP variance (DKL) or flow evidence (PostNet).
pub fn asymptotic_diagnostics(
    head: &AnyHead,
    probes: &Tensor,
    deltas: &[f64],
) -> Result<DiagnosticsReport, MetricsError> {
    if deltas.is_empty() || deltas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MetricsError::Config("δ grid must be non-empty and increasing".into()));
    }
    let (n, a) = (probes.rows(), head.num_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(n * deltas.len());
    let mut base_log_n: Option<Tensor> = None;
    for &delta in deltas {
        let x = probes.map(|v| v * delta);
        let pred = head.predict(&x, &mut rng)?;
        let (latent, value, reference): (Vec<f64>, Tensor, Tensor) = match head {
            AnyHead::Dkl(h) => {
                let z = h.latent(&x, false)?;
                let (_, var) = h.predict_latent(&z)?;
                let k00: Vec<f64> = (0..a).map(|j| h.kernel_spec(j).outputscale).collect();
                let refs = Tensor::mat(n, a, (0..n).flat_map(|_| k00.clone()).collect());
                (norms(&h.latent(&x, true)?), var, refs)
            }
            AnyHead::PostNet(h) => {
                let z = h.latent(&x, false)?;
                let log_n = h.log_evidence_latent(&z);
                let base = base_log_n.get_or_insert_with(|| log_n.clone());
                let ratio = Tensor::mat(
                    n,
                    a,
                    log_n.data().iter().zip(base.data()).map(|(l, b)| (l - b).exp()).collect(),
                );
                (norms(&h.latent(&x, true)?), log_n, ratio)
            }
            AnyHead::MonteCarlo(_) => {
                return Ok(DiagnosticsReport {
                    rows: Vec::new(),
                    summary: None,
                    notice: Some(format!(
                        "{} heads have no far-from-data guarantee; diagnostics skipped",
                        head.kind().name()
                    )),
                })
            }
        };
        for i in 0..n {
            rows.push(DiagnosticRow {
                probe: i,
                delta,
                latent_norm: latent[i],
                value: value.row_slice(i).to_vec(),
                reference: reference.row_slice(i).to_vec(),
                epistemic: pred.epistemic.row_slice(i).to_vec(),
            });
        }
    }

    let monotone = (0..n)
        .filter(|&i| {
            let path: Vec<f64> = rows.iter().filter(|r| r.probe == i).map(|r| r.latent_norm).collect();
            path.windows(2).all(|w| w[1] >= w[0])
        })
        .count();
    let monotone_share = monotone as f64 / n.max(1) as f64;
    let max_delta = *deltas.last().expect("non-empty");
    let last: Vec<&DiagnosticRow> = rows.iter().filter(|r| r.delta == max_delta).collect();
    let (dkl_gap, pn_ratio, limit_pass) = match head.kind() {
        HeadKind::Dkl => {
            let gap = last
                .iter()
                .flat_map(|r| r.value.iter().zip(&r.reference).map(|(v, k)| (v / k - 1.0).abs()))
                .fold(0.0, f64::max);
            (Some(gap), None, gap <= DKL_VAR_TOL)
        }
        _ => {
            let ratio = last.iter().flat_map(|r| r.reference.iter().copied()).fold(0.0, f64::max);
            (None, Some(ratio), ratio < POSTNET_RATIO_MAX)
        }
    };
    Ok(DiagnosticsReport {
        rows,
        summary: Some(DiagnosticSummary {
            head: head.kind(),
            probes: n,
            max_delta,
            monotone_share,
            latent_norms_pass: monotone_share >= MONOTONE_SHARE,
            dkl_max_var_gap: dkl_gap,
            postnet_max_ratio: pn_ratio,
            limit_pass,
        }),
        notice: None,
    })
}
