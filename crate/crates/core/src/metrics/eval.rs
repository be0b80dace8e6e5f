use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{auc_pr, auc_roc, mean_sem, MetricsError, ScoredSample};
use crate::agent::{derive_seed, select_action, write_atomic, AgentError, Checkpoint, StrategyConfig, StrategyKind};
use crate::envs::{Env, EnvId, Environment, PerturbationSpec, PerturbationTarget, PerturbedEnv};
use crate::heads::{AnyHead, Head};
use crate::ndcore::Tensor;

pub const DEFAULT_STRENGTHS: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0];

// seed streams under the evaluation seed
const ID_ENV: u64 = 10;
const ID_ACT: u64 = 11;
const OOD_ENV: u64 = 12;
const OOD_ACT: u64 = 13;
const DRAWS: u64 = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// ID episodes for the reward estimate; their states are the ID scores.
    pub episodes: usize,
    pub ood_episodes: usize,
    pub strategy: StrategyConfig,
    pub targets: Vec<PerturbationTarget>,
    pub strengths: Vec<f64>,
    /// Random perturbations per (target, strength).
    pub draws: usize,
    pub episodes_per_draw: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            ood_episodes: 10,
            strategy: StrategyConfig::of(StrategyKind::Greedy),
            targets: vec![PerturbationTarget::State, PerturbationTarget::Action, PerturbationTarget::Transition],
            strengths: DEFAULT_STRENGTHS.to_vec(),
            draws: 5,
            episodes_per_draw: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.episodes == 0 || self.ood_episodes == 0 || self.draws == 0 || self.episodes_per_draw == 0 {
            return Err(MetricsError::Config("evaluation counts must be positive".into()));
        }
        if self.strengths.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(MetricsError::Config("perturbation strengths must be finite and >= 0".into()));
        }
        self.strategy.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub reward: f64,
    pub length: usize,
    /// Epistemic uncertainty of the greedy action at every visited state.
    pub scores: Vec<f64>,
}

impl EpisodeOutcome {
    pub fn epist_mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Plays `n` episodes; ε-greedy uses its final ε.
pub fn run_episodes(
    head: &AnyHead,
    env: &mut dyn Environment,
    n: usize,
    strategy: &StrategyConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<EpisodeOutcome>, MetricsError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut state = env.reset();
        let mut ep = EpisodeOutcome {
            reward: 0.0,
            length: 0,
            scores: Vec::new(),
        };
        loop {
            let x = Tensor::from_rows(std::slice::from_ref(&state)).map_err(|e| MetricsError::Config(e.to_string()))?;
            let pred = head.predict(&x, rng)?;
            ep.scores.push(pred.epistemic.get(0, pred.greedy(0)));
            let action = select_action(&pred, 0, strategy, usize::MAX, rng);
            let step = env.step(action)?;
            ep.reward += step.reward;
            ep.length += 1;
            if step.terminal {
                break;
            }
            state = step.observation;
        }
        out.push(ep);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub target: PerturbationTarget,
    pub strength: f64,
    pub draws: usize,
    pub reward_mean: f64,
    pub reward_sem: f64,
    pub epist_mean: f64,
    pub epist_sem: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_index: usize,
    pub step: usize,
    pub strategy: StrategyKind,
    pub id_episodes: usize,
    pub id_reward_mean: f64,
    /// Over the ID episodes.
    pub id_reward_sem: f64,
    pub id_epist_mean: f64,
    pub ood_epist_mean: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    /// Reward and epistemic statistics per (target, strength); the sem is
    /// over draws, each draw contributing its mean over episodes.
    pub perturbations: Vec<CellSummary>,
}

/// One row per evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDump {
    /// `id`, `ood` or `perturbed`.
    pub cell: String,
    /// Perturbation target, empty for `id` and `ood`.
    pub target: String,
    pub strength: f64,
    pub draw: usize,
    pub episode: usize,
    pub reward: f64,
    pub length: usize,
    pub epist_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub episodes: Vec<EpisodeDump>,
}

impl EvalOutput {
    /// Writes `<stem>.json` and `<stem>_episodes.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), MetricsError> {
        let json = serde_json::to_vec_pretty(&self.report).map_err(|e| MetricsError::Config(e.to_string()))?;
        write_atomic(&dir.join(format!("{stem}.json")), &json)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.episodes {
            w.serialize(row).map_err(|e| AgentError::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| AgentError::Io(e.to_string()))?;
        write_atomic(&dir.join(format!("{stem}_episodes.csv")), &bytes)?;
        Ok(())
    }

    pub fn read_report(path: &Path) -> Result<EvalReport, MetricsError> {
        let bytes = std::fs::read(path).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| MetricsError::Config(format!("{}: {e}", path.display())))
    }

    pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeDump>, MetricsError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
        r.deserialize()
            .map(|row| row.map_err(|e| MetricsError::from(AgentError::Io(e.to_string()))))
            .collect()
    }
}

fn dumps(cell: &str, target: &str, strength: f64, draw: usize, eps: &[EpisodeOutcome]) -> Vec<EpisodeDump> {
    eps.iter()
        .enumerate()
        .map(|(i, e)| EpisodeDump {
            cell: cell.into(),
            target: target.into(),
            strength,
            draw,
            episode: i,
            reward: e.reward,
            length: e.length,
            epist_mean: e.epist_mean(),
        })
        .collect()
}

/// Evaluates a head: ID reward, OOD detection from per-state greedy-action
/// epistemic scores, and, when `perturb` is set, the perturbation grid.
///
/// Every perturbed draw replays the ID episode seeds, so a zero-strength
/// cell reproduces the ID episodes exactly.
pub fn evaluate_head(
    head: &AnyHead,
    env_id: EnvId,
    config: &EvalConfig,
    seed: u64,
    perturb: bool,
) -> Result<EvalOutput, MetricsError> {
    config.validate()?;
    if head.obs_dim() != env_id.obs_dim() || head.num_actions() != env_id.num_actions() {
        return Err(MetricsError::Config(format!(
            "head expects {}-d states and {} actions, {} has {} and {}",
            head.obs_dim(),
            head.num_actions(),
            env_id.name(),
            env_id.obs_dim(),
            env_id.num_actions()
        )));
    }
    let strategy = &config.strategy;
    let mut episodes = Vec::new();

    let mut env = Env::new(env_id, derive_seed(seed, ID_ENV));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ID_ACT));
    let id = run_episodes(head, &mut env, config.episodes, strategy, &mut rng)?;
    episodes.extend(dumps("id", "", 0.0, 0, &id));

    let mut env = Env::ood(env_id, derive_seed(seed, OOD_ENV));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, OOD_ACT));
    let ood = run_episodes(head, &mut env, config.ood_episodes, strategy, &mut rng)?;
    episodes.extend(dumps("ood", "", 0.0, 0, &ood));

    let mut samples: Vec<ScoredSample> =
        id.iter().flat_map(|e| e.scores.iter().map(|&s| ScoredSample::id(s))).collect();
    samples.extend(ood.iter().flat_map(|e| e.scores.iter().map(|&s| ScoredSample::ood(s))));
    let mean_of = |s: &[ScoredSample], label| {
        let v: Vec<f64> = s.iter().filter(|x| x.label == label).map(|x| x.score).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };

    let id_rewards: Vec<f64> = id.iter().map(|e| e.reward).collect();
    let (id_reward_mean, id_reward_sem) = mean_sem(&id_rewards);

    let mut perturbations = Vec::new();
    if perturb {
        let draw_base = derive_seed(seed, DRAWS);
        for &target in &config.targets {
            for &strength in &config.strengths {
                let mut rewards = Vec::with_capacity(config.draws);
                let mut epists = Vec::with_capacity(config.draws);
                for d in 0..config.draws {
                    let spec = PerturbationSpec {
                        target,
                        strength,
                        draw_seed: derive_seed(draw_base, d as u64),
                    };
                    let mut env = PerturbedEnv::new(Env::new(env_id, derive_seed(seed, ID_ENV)), spec)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ID_ACT));
                    let eps = run_episodes(head, &mut env, config.episodes_per_draw, strategy, &mut rng)?;
                    let rows = dumps("perturbed", target_name(target), strength, d, &eps);
                    rewards.push(rows.iter().map(|r| r.reward).sum::<f64>() / rows.len() as f64);
                    epists.push(rows.iter().map(|r| r.epist_mean).sum::<f64>() / rows.len() as f64);
                    episodes.extend(rows);
                }
                let (reward_mean, reward_sem) = mean_sem(&rewards);
                let (epist_mean, epist_sem) = mean_sem(&epists);
                perturbations.push(CellSummary {
                    target,
                    strength,
                    draws: config.draws,
                    reward_mean,
                    reward_sem,
                    epist_mean,
                    epist_sem,
                });
            }
        }
    }

    Ok(EvalOutput {
        report: EvalReport {
            checkpoint_index: 0,
            step: 0,
            strategy: strategy.kind,
            id_episodes: config.episodes,
            id_reward_mean,
            id_reward_sem,
            id_epist_mean: mean_of(&samples, super::Label::Id),
            ood_epist_mean: mean_of(&samples, super::Label::Ood),
            auc_roc: auc_roc(&samples)?,
            auc_pr: auc_pr(&samples)?,
            perturbations,
        },
        episodes,
    })
}

pub fn target_name(t: PerturbationTarget) -> &'static str {
    match t {
        PerturbationTarget::State => "state",
        PerturbationTarget::Action => "action",
        PerturbationTarget::Transition => "transition",
    }
}

/// Restores a checkpoint and evaluates it.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    env_id: EnvId,
    config: &EvalConfig,
    seed: u64,
    perturb: bool,
) -> Result<EvalOutput, MetricsError> {
    let head = AnyHead::restore(&checkpoint.snapshot, 1)?;
    let mut out = evaluate_head(&head, env_id, config, seed, perturb)?;
    out.report.checkpoint_index = checkpoint.index;
    out.report.step = checkpoint.step;
    Ok(out)
}
