use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NdError, NodeId, ParamId, ParamStore, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub dropout_p: f64,
    pub batch_norm_after_encoder: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), NdError> {
        if self.layer_widths.len() < 3 {
            return Err(NdError::Contract("an MLP needs at least one hidden layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(NdError::Contract("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(NdError::Contract(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

/// How a forward pass treats dropout and batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks on, batch norm uses batch statistics.
    Train,
    /// Deterministic: no dropout, batch norm uses running statistics.
    Eval,
    /// Eval-mode batch norm with dropout masks forced on (MC dropout).
    McDropout,
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::mat(fan_in, fan_out, w));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w);
        g.add(h, b)
    }
}

/// Per-feature batch normalization with a learnable affine map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Batch statistics produced by a training-mode pass, applied with
/// [`BatchNorm::update_running`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, width, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, width));
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    /// Returns `(normalized_before_affine, output, stats)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        use_batch_stats: bool,
    ) -> (NodeId, NodeId, Option<BatchStats>) {
        let (rows, _) = g.shape(x);
        let (xhat, stats) = if use_batch_stats {
            let inv_n = 1.0 / rows as f64;
            let s = g.sum_rows(x);
            let mean = g.scale(s, inv_n);
            let xc = g.sub(x, mean);
            let sq = g.square(xc);
            let ss = g.sum_rows(sq);
            let var = g.scale(ss, inv_n);
            let var_eps = g.add_scalar(var, BN_EPS);
            let sd = g.sqrt(var_eps);
            let xhat = g.div(xc, sd);
            let mean_v = g.value(mean).data().to_vec();
            let unbias = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
            let var_v = g.value(var).data().iter().map(|v| v * unbias).collect();
            (
                xhat,
                Some(BatchStats {
                    mean: mean_v,
                    var_unbiased: var_v,
                }),
            )
        } else {
            let mean = g.constant(Tensor::row(&self.running_mean));
            let sd: Vec<f64> = self.running_var.iter().map(|v| (v + BN_EPS).sqrt()).collect();
            let sd = g.constant(Tensor::row(&sd));
            let xc = g.sub(x, mean);
            (g.div(xc, sd), None)
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul(xhat, gamma);
        let y = g.add(y, beta);
        (xhat, y, stats)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut dyn rand::RngCore) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::mat(rows, cols, data)
}

/// Nodes produced by one MLP pass.
#[derive(Clone, Debug)]
pub struct MlpOutput {
    /// Final layer output before batch norm (equal to `output` without it).
    pub pre_norm: NodeId,
    pub output: NodeId,
    pub batch_stats: Option<BatchStats>,
}

/// Fully connected ReLU network, optionally followed by batch norm.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<Dense>,
    pub norm: Option<BatchNorm>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, config: MlpConfig, rng: &mut (impl Rng + ?Sized)) -> Result<Self, NdError> {
        config.validate()?;
        let layers = config
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        let norm = config
            .batch_norm_after_encoder
            .then(|| BatchNorm::new(store, &format!("{name}.bn"), config.output_width()));
        Ok(Self { config, layers, norm })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<MlpOutput, NdError> {
        let (rows, cols) = g.shape(x);
        if cols != self.config.input_width() {
            return Err(NdError::Shape(format!(
                "input width {cols} does not match first layer width {}",
                self.config.input_width()
            )));
        }
        let p = self.config.dropout_p;
        let dropout = p > 0.0 && matches!(mode, Mode::Train | Mode::McDropout);
        if dropout && rng.is_none() {
            return Err(NdError::Contract("dropout requires an rng".into()));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = match self.config.activation {
                    Activation::Relu => g.relu(h),
                };
                if dropout {
                    let r = rng.as_deref_mut().expect("checked above");
                    let width = g.shape(h).1;
                    let m = g.constant(dropout_mask(rows, width, p, r));
                    h = g.mul(h, m);
                }
            }
        }
        let pre_norm = h;
        let (output, batch_stats) = match &self.norm {
            Some(bn) => {
                let (_, y, stats) = bn.forward(g, store, h, mode == Mode::Train);
                (y, stats)
            }
            None => (h, None),
        };
        Ok(MlpOutput {
            pre_norm,
            output,
            batch_stats,
        })
    }

    pub fn update_running(&mut self, stats: &Option<BatchStats>) {
        if let (Some(bn), Some(s)) = (self.norm.as_mut(), stats) {
            bn.update_running(s);
        }
    }
}
