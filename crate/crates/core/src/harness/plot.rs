use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunManifest};
use crate::agent::{write_atomic, RunLog};
use crate::metrics::{mean_sem, minmax_normalize};

/// Figure families: training curves (reward and normalized uncertainties
/// against steps), testing curves (per checkpoint) and perturbation sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FigureKind {
    Training,
    Testing,
    Strategies,
    Perturbation,
}

impl std::str::FromStr for FigureKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "training" => Ok(Self::Training),
            "testing" => Ok(Self::Testing),
            "strategies" => Ok(Self::Strategies),
            "perturbation" => Ok(Self::Perturbation),
            other => Err(HarnessError::Config(format!("unknown figure kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    /// Aligned with the panel's x; `None` where the model has no value.
    pub mean: Vec<Option<f64>>,
    pub sem: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotPanel {
    pub name: String,
    pub x: Vec<f64>,
    pub series: Vec<PlotSeries>,
}

/// Per step, the return of the most recently finished episode (0 before
/// the first one ends).
pub fn training_reward_curve(log: &RunLog) -> Vec<f64> {
    let mut out = Vec::with_capacity(log.steps.len());
    let mut eps = log.episodes.iter().peekable();
    let mut current = 0.0;
    for s in &log.steps {
        while let Some(e) = eps.peek() {
            if e.start_step + e.length - 1 <= s.step {
                current = e.total_reward;
                eps.next();
            } else {
                break;
            }
        }
        out.push(current);
    }
    out
}

/// Bin means of the logged uncertainty of the selected action, min-max
/// normalized over the run.
pub fn uncertainty_curve(log: &RunLog, epistemic: bool, bin: usize) -> Vec<f64> {
    let raw: Vec<f64> = log.steps.iter().map(|s| if epistemic { s.epist_raw } else { s.alea_raw }).collect();
    minmax_normalize(&bin_means(&raw, bin))
}

fn bin_means(v: &[f64], bin: usize) -> Vec<f64> {
    v.chunks(bin.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// x at the end of each bin: the 1-based step count.
fn bin_x(n: usize, bin: usize) -> Vec<f64> {
    let bin = bin.max(1);
    (0..n.div_ceil(bin)).map(|i| ((i + 1) * bin).min(n) as f64).collect()
}

/// Mean and sem over seeds at each x; `curves[i]` holds `(x, y)` pairs.
fn aggregate(label: &str, curves: &[Vec<(f64, f64)>], xs: &[f64]) -> PlotSeries {
    let mut mean = Vec::with_capacity(xs.len());
    let mut sem = Vec::with_capacity(xs.len());
    for &x in xs {
        let ys: Vec<f64> = curves.iter().filter_map(|c| c.iter().find(|p| p.0 == x).map(|p| p.1)).collect();
        if ys.is_empty() {
            mean.push(None);
            sem.push(None);
        } else {
            let (m, s) = mean_sem(&ys);
            mean.push(Some(m));
            sem.push(Some(s));
        }
    }
    PlotSeries {
        label: label.into(),
        mean,
        sem,
    }
}

fn union_x(curves: &[Vec<Vec<(f64, f64)>>]) -> Vec<f64> {
    let mut xs: Vec<f64> = curves.iter().flatten().flatten().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

fn panel(name: &str, labels: &[String], curves: Vec<Vec<Vec<(f64, f64)>>>) -> PlotPanel {
    let x = union_x(&curves);
    let series = labels.iter().zip(&curves).map(|(l, c)| aggregate(l, c, &x)).collect();
    PlotPanel {
        name: name.into(),
        x,
        series,
    }
}

fn model_label(m: &RunManifest) -> String {
    m.name.clone()
}

/// Builds the panels of one figure kind from completed seeds.
pub fn plot_panels(manifests: &[RunManifest], kind: FigureKind, bin: usize) -> Result<Vec<PlotPanel>, HarnessError> {
    let first = manifests.first().ok_or_else(|| HarnessError::Config("no manifests given".into()))?;
    if let Some(m) = manifests.iter().find(|m| m.env != first.env) {
        return Err(HarnessError::Config(format!(
            "mixed environments: {} is {:?}, {} is {:?}",
            first.name, first.env, m.name, m.env
        )));
    }
    let labels: Vec<String> = manifests.iter().map(model_label).collect();
    let mut panels = Vec::new();
    match kind {
        FigureKind::Training | FigureKind::Strategies => {
            let mut reward = Vec::new();
            let mut epist = Vec::new();
            let mut alea = Vec::new();
            for m in manifests {
                let (mut r, mut e, mut a) = (Vec::new(), Vec::new(), Vec::new());
                for rec in m.completed() {
                    let log = m.run_log(rec)?;
                    let xs = bin_x(log.steps.len(), bin);
                    let zip = |ys: Vec<f64>| xs.iter().copied().zip(ys).collect::<Vec<_>>();
                    r.push(zip(bin_means(&training_reward_curve(&log), bin)));
                    e.push(zip(uncertainty_curve(&log, true, bin)));
                    a.push(zip(uncertainty_curve(&log, false, bin)));
                }
                reward.push(r);
                epist.push(e);
                alea.push(a);
            }
            panels.push(panel("training_reward", &labels, reward));
            if kind == FigureKind::Training {
                panels.push(panel("training_epistemic", &labels, epist));
                panels.push(panel("training_aleatoric", &labels, alea));
            }
        }
        FigureKind::Testing => {
            let (mut reward, mut roc, mut pr) = (Vec::new(), Vec::new(), Vec::new());
            for m in manifests {
                let (mut r, mut a, mut p) = (Vec::new(), Vec::new(), Vec::new());
                for rec in m.completed() {
                    let reports = m.eval_reports(rec)?;
                    r.push(reports.iter().map(|x| (x.step as f64, x.id_reward_mean)).collect());
                    a.push(reports.iter().map(|x| (x.step as f64, x.auc_roc)).collect());
                    p.push(reports.iter().map(|x| (x.step as f64, x.auc_pr)).collect());
                }
                reward.push(r);
                roc.push(a);
                pr.push(p);
            }
            panels.push(panel("testing_reward", &labels, reward));
            panels.push(panel("testing_auc_roc", &labels, roc));
            panels.push(panel("testing_auc_pr", &labels, pr));
        }
        FigureKind::Perturbation => {
            let mut targets = Vec::new();
            let mut finals = Vec::new();
            for m in manifests {
                let mut per_seed = Vec::new();
                for rec in m.completed() {
                    let r = m.final_report(rec)?;
                    for c in &r.perturbations {
                        if !targets.contains(&c.target) {
                            targets.push(c.target);
                        }
                    }
                    per_seed.push(r);
                }
                finals.push(per_seed);
            }
            for t in targets {
                let name = crate::metrics::target_name(t);
                let pick = |f: &dyn Fn(&crate::metrics::CellSummary) -> f64| -> Vec<Vec<Vec<(f64, f64)>>> {
                    finals
                        .iter()
                        .map(|seeds| {
                            seeds
                                .iter()
                                .map(|r| {
                                    r.perturbations.iter().filter(|c| c.target == t).map(|c| (c.strength, f(c))).collect()
                                })
                                .collect()
                        })
                        .collect()
                };
                panels.push(panel(&format!("perturb_{name}_reward"), &labels, pick(&|c| c.reward_mean)));
                panels.push(panel(&format!("perturb_{name}_epistemic"), &labels, pick(&|c| c.epist_mean)));
            }
        }
    }
    Ok(panels)
}

/// Writes one CSV per panel (`x, <label>_mean, <label>_sem, ...`) into `out`.
pub fn emit_plot_data(
    manifests: &[RunManifest],
    kind: FigureKind,
    bin: usize,
    out: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for p in plot_panels(manifests, kind, bin)? {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["x".to_string()];
        for s in &p.series {
            header.push(format!("{}_mean", s.label));
            header.push(format!("{}_sem", s.label));
        }
        let io = |e: csv::Error| HarnessError::Io(e.to_string());
        w.write_record(&header).map_err(io)?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, x) in p.x.iter().enumerate() {
            let mut row = vec![x.to_string()];
            for s in &p.series {
                row.push(cell(s.mean[i]));
                row.push(cell(s.sem[i]));
            }
            w.write_record(&row).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
        let path = out.join(format!("{}.csv", p.name));
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
