//! Assembly of the four forecaster configurations and Monte-Carlo
//! prediction.
//!
//! The configurations differ in exactly one component each:
//!
//! * `gru-ed`: point GRU encoder and decoder, no attention.
//! * `bgru-ed`: variational cells, no attention; the encoder states `H`
//!   feed the decoder directly.
//! * `mhatt`: point cells plus point multi-head self-attention.
//! * `bedma`: variational cells, variational attention, variational
//!   output head.
//!
//! A [`Model`] owns plain tensors. Each forward pass binds them to a
//! fresh [`Tape`], draws one weight sample per variational parameter,
//! and emits `relu(w_y h' + b_y)` for all horizon steps at once, along
//! with the summed KL contribution of every sampled weight.

pub mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, read_checkpoint, save_checkpoint,
    write_checkpoint, CheckpointError,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    multihead_from_vars, AttentionError, BoundMultiHead, HeadProjections, MultiHeadParams,
    MultiHeadWeights, PointMultiHeadParams, VariationalHead,
};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::NormStats;
use crate::recurrent::{
    run_stack_collect, run_stack_last, BgruCellParams, BoundCell, CellParams, GruCellParams,
    RecurrentError,
};
use crate::variational::{
    kl_sample_term, sample_weight, softplus_inv, BoundGaussian, GaussianVariational, KlSink,
    NoiseSource, PriorSpec, VariationalError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {field} must be at least 1")]
    FieldTooSmall { field: &'static str },
    #[error("config: {field} must be positive")]
    FieldNotPositive { field: &'static str },
    #[error("config: hidden ({hidden}) must be divisible by heads ({heads})")]
    NotDivisible { hidden: usize, heads: usize },
    #[error("unknown variant {name:?}; expected gru-ed, bgru-ed, mhatt, or bedma")]
    UnknownVariant { name: String },
    #[error("window shape {got:?} does not match expected [{window}, {input_width}]")]
    WindowShape {
        got: Vec<usize>,
        window: usize,
        input_width: usize,
    },
    #[error("window needs {expected} values ({window} steps x {input_width}), got {got}")]
    WindowLength {
        expected: usize,
        window: usize,
        input_width: usize,
        got: usize,
    },
    #[error("monte carlo sample count must be at least 1")]
    ZeroSamples,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error(transparent)]
    Recurrent(#[from] RecurrentError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// The four buildable configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "gru-ed")]
    GruEd,
    #[serde(rename = "bgru-ed")]
    BgruEd,
    #[serde(rename = "mhatt")]
    Mhatt,
    #[serde(rename = "bedma")]
    Bedma,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::GruEd,
        Variant::BgruEd,
        Variant::Mhatt,
        Variant::Bedma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::GruEd => "gru-ed",
            Variant::BgruEd => "bgru-ed",
            Variant::Mhatt => "mhatt",
            Variant::Bedma => "bedma",
        }
    }

    /// Whether the encoder states pass through multi-head attention.
    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Mhatt | Variant::Bedma)
    }

    /// Whether weights carry Gaussian posteriors.
    pub fn is_variational(self) -> bool {
        matches!(self, Variant::BgruEd | Variant::Bedma)
    }

    /// The point-weight configuration with the same wiring.
    pub fn deterministic_counterpart(self) -> Variant {
        match self {
            Variant::BgruEd => Variant::GruEd,
            Variant::Bedma => Variant::Mhatt,
            v => v,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru-ed" => Ok(Variant::GruEd),
            "bgru-ed" => Ok(Variant::BgruEd),
            "mhatt" => Ok(Variant::Mhatt),
            "bedma" => Ok(Variant::Bedma),
            other => Err(ModelError::UnknownVariant { name: other.into() }),
        }
    }
}

fn default_layers() -> usize {
    2
}

fn default_hidden() -> usize {
    64
}

fn default_heads() -> usize {
    2
}

fn default_input_width() -> usize {
    1
}

fn default_sigma_init() -> f64 {
    0.15
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Stacked cells per coder.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// State width m of every cell.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Attention head count h; hidden must divide evenly.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Input window length t.
    pub window: usize,
    /// Forecast horizon r, emitted in one shot.
    pub horizon: usize,
    /// Features per step (1 for a univariate series).
    #[serde(default = "default_input_width")]
    pub input_width: usize,
    /// Weight prior shared by all variational parameters.
    #[serde(default)]
    pub prior: PriorSpec,
    /// Initial posterior standard deviation.
    #[serde(default = "default_sigma_init")]
    pub sigma_init: f64,
}

impl ModelConfig {
    /// A config with the library defaults (2 layers of 64 units, 2 heads).
    pub fn new(variant: Variant, window: usize, horizon: usize) -> Self {
        ModelConfig {
            variant,
            layers: default_layers(),
            hidden: default_hidden(),
            heads: default_heads(),
            window,
            horizon,
            input_width: default_input_width(),
            prior: PriorSpec::default(),
            sigma_init: default_sigma_init(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, value) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("window", self.window),
            ("horizon", self.horizon),
            ("input_width", self.input_width),
        ] {
            if value < 1 {
                return Err(ModelError::FieldTooSmall { field });
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::NotDivisible {
                hidden: self.hidden,
                heads: self.heads,
            });
        }
        if !(self.sigma_init > 0.0) {
            return Err(ModelError::FieldNotPositive {
                field: "sigma_init",
            });
        }
        if !(self.prior.std > 0.0) {
            return Err(ModelError::FieldNotPositive { field: "prior.std" });
        }
        Ok(())
    }

    /// Per-head projection width d = hidden / heads.
    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Final projection from the decoder state to the horizon vector.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputHead {
    Point { w_y: Tensor, b_y: Tensor },
    Variational { w_y: GaussianVariational, b_y: GaussianVariational },
}

impl OutputHead {
    pub fn is_variational(&self) -> bool {
        matches!(self, OutputHead::Variational { .. })
    }

    pub fn to_point(&self) -> OutputHead {
        match self {
            OutputHead::Point { w_y, b_y } => OutputHead::Point {
                w_y: w_y.clone(),
                b_y: b_y.clone(),
            },
            OutputHead::Variational { w_y, b_y } => OutputHead::Point {
                w_y: w_y.mu.clone(),
                b_y: b_y.mu.clone(),
            },
        }
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        match self {
            OutputHead::Point { w_y, b_y } => vec![
                ("head.w_y".into(), w_y),
                ("head.b_y".into(), b_y),
            ],
            OutputHead::Variational { w_y, b_y } => vec![
                ("head.w_y.mu".into(), &w_y.mu),
                ("head.w_y.rho".into(), &w_y.rho),
                ("head.b_y.mu".into(), &b_y.mu),
                ("head.b_y.rho".into(), &b_y.rho),
            ],
        }
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            OutputHead::Point { w_y, b_y } => vec![
                ("head.w_y".into(), w_y),
                ("head.b_y".into(), b_y),
            ],
            OutputHead::Variational { w_y, b_y } => vec![
                ("head.w_y.mu".into(), &mut w_y.mu),
                ("head.w_y.rho".into(), &mut w_y.rho),
                ("head.b_y.mu".into(), &mut b_y.mu),
                ("head.b_y.rho".into(), &mut b_y.rho),
            ],
        }
    }

    fn bind(&self, tape: &mut Tape) -> Result<BoundHead, ModelError> {
        match self {
            OutputHead::Point { w_y, b_y } => Ok(BoundHead::Point {
                w_y: tape.leaf(w_y.clone()),
                b_y: tape.leaf(b_y.clone()),
            }),
            OutputHead::Variational { w_y, b_y } => Ok(BoundHead::Variational {
                w_y: w_y.bind(tape)?,
                b_y: b_y.bind(tape)?,
            }),
        }
    }
}

enum BoundHead {
    Point { w_y: Var, b_y: Var },
    Variational { w_y: BoundGaussian, b_y: BoundGaussian },
}

impl BoundHead {
    fn realize(
        &self,
        tape: &mut Tape,
        noise: &mut NoiseSource,
        kl: &mut KlSink,
        prior: &PriorSpec,
    ) -> Result<(Var, Var), ModelError> {
        match self {
            BoundHead::Point { w_y, b_y } => Ok((*w_y, *b_y)),
            BoundHead::Variational { w_y, b_y } => {
                let mut draw = |tape: &mut Tape,
                                kl: &mut KlSink,
                                bound: &BoundGaussian|
                 -> Result<Var, ModelError> {
                    let sample = sample_weight(tape, bound, noise)?;
                    let term = kl_sample_term(tape, &sample, bound, prior)?;
                    kl.push(term);
                    Ok(sample.w)
                };
                let w = draw(tape, kl, w_y)?;
                let b = draw(tape, kl, b_y)?;
                Ok((w, b))
            }
        }
    }

    fn leaf_vars(&self) -> Vec<Var> {
        match self {
            BoundHead::Point { w_y, b_y } => vec![*w_y, *b_y],
            BoundHead::Variational { w_y, b_y } => {
                vec![w_y.mu, w_y.rho, b_y.mu, b_y.rho]
            }
        }
    }
}

/// Summary stored alongside checkpointed weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainInfo {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub seed: u64,
}

/// A forecaster with its parameters, in plain tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Vec<CellParams>,
    pub attention: Option<MultiHeadWeights>,
    pub decoder: Vec<CellParams>,
    pub head: OutputHead,
    /// Normalization fitted during training, carried for prediction.
    pub stats: Option<NormStats>,
    pub train_info: Option<TrainInfo>,
}

fn glorot(init: &mut NoiseSource, label: &str, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = init.uniform(label, rows * cols, -bound, bound);
    Tensor::new(vec![rows, cols], data).expect("glorot tensor shape")
}

fn gaussian_matrix(
    init: &mut NoiseSource,
    name: &str,
    rows: usize,
    cols: usize,
    sigma_init: f64,
) -> Result<GaussianVariational, VariationalError> {
    let mu = glorot(init, &format!("{name}.init"), rows, cols);
    let rho = Tensor::filled(&[rows, cols], softplus_inv(sigma_init));
    GaussianVariational::new(name, mu, rho)
}

fn gaussian_zero_vector(
    name: &str,
    len: usize,
    sigma_init: f64,
) -> Result<GaussianVariational, VariationalError> {
    GaussianVariational::new(
        name,
        Tensor::zeros(&[len]),
        Tensor::filled(&[len], softplus_inv(sigma_init)),
    )
}

fn make_cell(
    name: &str,
    m: usize,
    n_in: usize,
    variational: bool,
    sigma_init: f64,
    init: &mut NoiseSource,
) -> Result<CellParams, ModelError> {
    if variational {
        let gate = |init: &mut NoiseSource, gate: &str| {
            gaussian_matrix(init, &format!("{name}.{gate}"), m, m + n_in, sigma_init)
        };
        let bias = |gate: &str| gaussian_zero_vector(&format!("{name}.{gate}"), m, sigma_init);
        Ok(CellParams::Variational(BgruCellParams::new(
            name,
            gate(init, "w_z")?,
            bias("b_z")?,
            gate(init, "w_r")?,
            bias("b_r")?,
            gate(init, "w_h")?,
            bias("b_h")?,
        )?))
    } else {
        let gate = |init: &mut NoiseSource, gate: &str| {
            glorot(init, &format!("{name}.{gate}.init"), m, m + n_in)
        };
        Ok(CellParams::Point(GruCellParams::new(
            name,
            gate(init, "w_z"),
            Tensor::zeros(&[m]),
            gate(init, "w_r"),
            Tensor::zeros(&[m]),
            gate(init, "w_h"),
            Tensor::zeros(&[m]),
        )?))
    }
}

fn make_attention(
    name: &str,
    cfg: &ModelConfig,
    init: &mut NoiseSource,
) -> Result<MultiHeadWeights, ModelError> {
    let m = cfg.hidden;
    let d = cfg.head_width();
    if cfg.variant.is_variational() {
        let mut heads = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let proj = |init: &mut NoiseSource, proj: &str| {
                gaussian_matrix(init, &format!("{name}.h{i}.{proj}"), d, m, cfg.sigma_init)
            };
            heads.push(VariationalHead {
                w_q: proj(init, "w_q")?,
                w_k: proj(init, "w_k")?,
                w_v: proj(init, "w_v")?,
            });
        }
        let w_c = gaussian_matrix(init, &format!("{name}.w_c"), m, m, cfg.sigma_init)?;
        Ok(MultiHeadWeights::Variational(MultiHeadParams::new(
            name, heads, w_c,
        )?))
    } else {
        let mut heads = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let proj = |init: &mut NoiseSource, proj: &str| {
                glorot(init, &format!("{name}.h{i}.{proj}.init"), d, m)
            };
            heads.push(HeadProjections {
                w_q: proj(init, "w_q"),
                w_k: proj(init, "w_k"),
                w_v: proj(init, "w_v"),
            });
        }
        let w_c = glorot(init, &format!("{name}.w_c.init"), m, m);
        Ok(MultiHeadWeights::Point(PointMultiHeadParams::new(
            name, heads, w_c,
        )?))
    }
}

// A zero head bias can leave every pre-activation negative at
// initialization, and the relu then blocks all gradient flow forever.
// A small positive bias keeps the head alive for targets in [0, 1].
const HEAD_BIAS_INIT: f64 = 0.1;

fn make_head(cfg: &ModelConfig, init: &mut NoiseSource) -> Result<OutputHead, ModelError> {
    let (r, m) = (cfg.horizon, cfg.hidden);
    if cfg.variant.is_variational() {
        Ok(OutputHead::Variational {
            w_y: gaussian_matrix(init, "head.w_y", r, m, cfg.sigma_init)?,
            b_y: GaussianVariational::new(
                "head.b_y",
                Tensor::filled(&[r], HEAD_BIAS_INIT),
                Tensor::filled(&[r], softplus_inv(cfg.sigma_init)),
            )?,
        })
    } else {
        Ok(OutputHead::Point {
            w_y: glorot(init, "head.w_y.init", r, m),
            b_y: Tensor::filled(&[r], HEAD_BIAS_INIT),
        })
    }
}

/// Builds a freshly initialized model.
///
/// Weight matrices (and posterior means) start Glorot-uniform, biases
/// start at zero, and posterior standard deviations start at
/// `cfg.sigma_init`. Initialization draws come from per-parameter
/// streams of `seed`, so two builds with the same seed agree bit for
/// bit.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut init = NoiseSource::seeded(seed);
    let variational = cfg.variant.is_variational();
    let m = cfg.hidden;

    let mut encoder = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let n_in = if layer == 0 { cfg.input_width } else { m };
        encoder.push(make_cell(
            &format!("encoder.l{layer}"),
            m,
            n_in,
            variational,
            cfg.sigma_init,
            &mut init,
        )?);
    }

    let attention = if cfg.variant.has_attention() {
        Some(make_attention("attention", cfg, &mut init)?)
    } else {
        None
    };

    let mut decoder = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        decoder.push(make_cell(
            &format!("decoder.l{layer}"),
            m,
            m,
            variational,
            cfg.sigma_init,
            &mut init,
        )?);
    }

    let head = make_head(cfg, &mut init)?;

    Ok(Model {
        cfg: cfg.clone(),
        encoder,
        attention,
        decoder,
        head,
        stats: None,
        train_info: None,
    })
}

impl Model {
    /// Every named parameter tensor, in a fixed order: encoder layers,
    /// attention, decoder layers, head.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for cell in &self.encoder {
            out.extend(cell.param_entries());
        }
        if let Some(att) = &self.attention {
            out.extend(att.param_entries());
        }
        for cell in &self.decoder {
            out.extend(cell.param_entries());
        }
        out.extend(self.head.param_entries());
        out
    }

    /// Mutable variant of [`Model::param_entries`], same order.
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for cell in &mut self.encoder {
            out.extend(cell.param_entries_mut());
        }
        if let Some(att) = &mut self.attention {
            out.extend(att.param_entries_mut());
        }
        for cell in &mut self.decoder {
            out.extend(cell.param_entries_mut());
        }
        out.extend(self.head.param_entries_mut());
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// The point-weight twin: every posterior replaced by its mean.
    pub fn to_deterministic(&self) -> Model {
        let mut cfg = self.cfg.clone();
        cfg.variant = cfg.variant.deterministic_counterpart();
        Model {
            cfg,
            encoder: self.encoder.iter().map(CellParams::to_point).collect(),
            attention: self.attention.as_ref().map(MultiHeadWeights::to_point),
            decoder: self.decoder.iter().map(CellParams::to_point).collect(),
            head: self.head.to_point(),
            stats: self.stats,
            train_info: self.train_info.clone(),
        }
    }

    /// Shapes a flat slice into the `[window, input_width]` matrix
    /// expected by [`BoundModel::forward`].
    pub fn input_window(&self, values: &[f64]) -> Result<Tensor, ModelError> {
        let expected = self.cfg.window * self.cfg.input_width;
        if values.len() != expected {
            return Err(ModelError::WindowLength {
                expected,
                window: self.cfg.window,
                input_width: self.cfg.input_width,
                got: values.len(),
            });
        }
        Ok(Tensor::new(
            vec![self.cfg.window, self.cfg.input_width],
            values.to_vec(),
        )?)
    }

    /// Registers every parameter on `tape` once. Forward passes may then
    /// run many windows against the same leaves, which is how minibatch
    /// gradients accumulate.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel, ModelError> {
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut enc_widths = Vec::with_capacity(self.encoder.len());
        let mut leaves: Vec<Var> = Vec::new();
        for cell in &self.encoder {
            let bound = cell.bind(tape)?;
            leaves.extend(cell_leaves(&bound));
            enc_widths.push((cell.hidden_width(), cell.input_width()));
            encoder.push(bound);
        }
        let attention = match &self.attention {
            Some(att) => {
                let bound = att.bind(tape)?;
                leaves.extend(attention_leaves(&bound));
                Some(bound)
            }
            None => None,
        };
        let mut decoder = Vec::with_capacity(self.decoder.len());
        let mut dec_widths = Vec::with_capacity(self.decoder.len());
        for cell in &self.decoder {
            let bound = cell.bind(tape)?;
            leaves.extend(cell_leaves(&bound));
            dec_widths.push((cell.hidden_width(), cell.input_width()));
            decoder.push(bound);
        }
        let head = self.head.bind(tape)?;
        leaves.extend(head.leaf_vars());

        let names = self.param_entries();
        debug_assert_eq!(names.len(), leaves.len());
        let params = names
            .into_iter()
            .map(|(name, _)| name)
            .zip(leaves)
            .collect();

        Ok(BoundModel {
            cfg: self.cfg.clone(),
            encoder,
            enc_widths,
            attention,
            decoder,
            dec_widths,
            head,
            params,
        })
    }

    /// Runs one forward pass on a throwaway tape and returns plain
    /// values: the horizon vector and the summed KL.
    pub fn forward_values(
        &self,
        window: &Tensor,
        noise: &mut NoiseSource,
    ) -> Result<(Tensor, f64), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let fwd = bound.forward(&mut tape, window, noise)?;
        let y = tape.value(fwd.y_hat).clone();
        let kl = tape.value(fwd.kl).item();
        Ok((y, kl))
    }

    /// Draws `n_mc` stochastic forecasts and summarizes them.
    ///
    /// Sampling noise comes from per-parameter streams of `seed`, so the
    /// result is reproducible. Point-weight models produce identical
    /// draws and an exactly zero variance.
    pub fn predict_mc(
        &self,
        window: &Tensor,
        n_mc: usize,
        seed: u64,
    ) -> Result<PredictionResult, ModelError> {
        if n_mc == 0 {
            return Err(ModelError::ZeroSamples);
        }
        let mut noise = NoiseSource::seeded(seed);
        let mut draws: Vec<Tensor> = Vec::with_capacity(n_mc);
        for _ in 0..n_mc {
            let (y, _) = self.forward_values(window, &mut noise)?;
            draws.push(y);
        }
        summarize_draws(&draws, self.cfg.horizon)
    }
}

fn cell_leaves(bound: &BoundCell) -> Vec<Var> {
    match bound {
        BoundCell::Point(v) => vec![v.w_z, v.b_z, v.w_r, v.b_r, v.w_h, v.b_h],
        BoundCell::Variational(b) => vec![
            b.w_z.mu, b.w_z.rho, b.b_z.mu, b.b_z.rho, b.w_r.mu, b.w_r.rho, b.b_r.mu, b.b_r.rho,
            b.w_h.mu, b.w_h.rho, b.b_h.mu, b.b_h.rho,
        ],
    }
}

fn attention_leaves(bound: &BoundMultiHead) -> Vec<Var> {
    match bound {
        BoundMultiHead::Point(heads, w_c) => {
            let mut out = Vec::with_capacity(heads.len() * 3 + 1);
            for h in heads {
                out.extend([h.w_q, h.w_k, h.w_v]);
            }
            out.push(*w_c);
            out
        }
        BoundMultiHead::Variational { heads, w_c } => {
            let mut out = Vec::with_capacity(heads.len() * 6 + 2);
            for h in heads {
                out.extend([h.w_q.mu, h.w_q.rho, h.w_k.mu, h.w_k.rho, h.w_v.mu, h.w_v.rho]);
            }
            out.extend([w_c.mu, w_c.rho]);
            out
        }
    }
}

/// A model with all parameters registered on one tape.
pub struct BoundModel {
    cfg: ModelConfig,
    encoder: Vec<BoundCell>,
    enc_widths: Vec<(usize, usize)>,
    attention: Option<BoundMultiHead>,
    decoder: Vec<BoundCell>,
    dec_widths: Vec<(usize, usize)>,
    head: BoundHead,
    params: Vec<(String, Var)>,
}

/// Nodes produced by one forward pass.
pub struct WindowForward {
    /// Horizon vector, elementwise nonnegative.
    pub y_hat: Var,
    /// Scalar sum of all KL contributions (a zero leaf for point models).
    pub kl: Var,
    /// How many weight tensors were sampled.
    pub kl_terms: usize,
}

impl BoundModel {
    /// Leaf nodes by parameter name, in [`Model::param_entries`] order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Runs one window through encoder, attention (when present),
    /// decoder, and the relu head.
    ///
    /// Variational weights are sampled exactly once per call, so every
    /// window sees one coherent parameter draw.
    pub fn forward(
        &self,
        tape: &mut Tape,
        window: &Tensor,
        noise: &mut NoiseSource,
    ) -> Result<WindowForward, ModelError> {
        if window.shape() != [self.cfg.window, self.cfg.input_width] {
            return Err(ModelError::WindowShape {
                got: window.shape().to_vec(),
                window: self.cfg.window,
                input_width: self.cfg.input_width,
            });
        }
        let x = tape.leaf(window.clone());
        let mut kl = KlSink::new();
        let prior = &self.cfg.prior;

        let mut enc_weights = Vec::with_capacity(self.encoder.len());
        for cell in &self.encoder {
            enc_weights.push(cell.realize(tape, noise, &mut kl, prior)?);
        }
        let enc = run_stack_collect(tape, x, &enc_weights, &self.enc_widths)?;

        let context = match &self.attention {
            Some(bound) => {
                let (heads, w_c) = bound.realize(tape, noise, &mut kl, prior)?;
                multihead_from_vars(tape, enc.h, &heads, w_c)?.c
            }
            None => enc.h,
        };

        let mut dec_weights = Vec::with_capacity(self.decoder.len());
        for cell in &self.decoder {
            dec_weights.push(cell.realize(tape, noise, &mut kl, prior)?);
        }
        let dec = run_stack_last(tape, context, &dec_weights, &self.dec_widths)?;

        let (w_y, b_y) = self.head.realize(tape, noise, &mut kl, prior)?;
        let linear = tape.matvec(w_y, dec.h_last)?;
        let shifted = tape.add(linear, b_y)?;
        let y_hat = tape.relu(shifted);

        let kl_terms = kl.len();
        let kl_total = kl.total(tape)?;
        Ok(WindowForward {
            y_hat,
            kl: kl_total,
            kl_terms,
        })
    }
}

/// Monte-Carlo forecast summary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// Arithmetic mean across draws, per horizon step.
    pub mean: Tensor,
    /// Population variance across draws, per horizon step.
    pub variance: Tensor,
    /// All draws, one row per sample.
    pub samples: Tensor,
    /// `(mean - 2 std, mean + 2 std)` per horizon step.
    pub interval: (Tensor, Tensor),
}

impl PredictionResult {
    pub fn std(&self) -> Tensor {
        let data = self.variance.data().iter().map(|v| v.sqrt()).collect();
        Tensor::new(self.variance.shape().to_vec(), data).expect("variance shape")
    }

    pub fn sample_count(&self) -> usize {
        self.samples.rows()
    }
}

fn summarize_draws(draws: &[Tensor], horizon: usize) -> Result<PredictionResult, ModelError> {
    let n = draws.len();
    let mut mean = vec![0.0; horizon];
    let mut variance = vec![0.0; horizon];
    for j in 0..horizon {
        let first = draws[0].data()[j];
        // Point-weight models repeat the same draw; report the value
        // itself and an exactly zero variance instead of accumulating
        // rounding dust.
        let all_equal = draws
            .iter()
            .all(|d| d.data()[j].to_bits() == first.to_bits());
        if all_equal {
            mean[j] = first;
            continue;
        }
        let m = draws.iter().map(|d| d.data()[j]).sum::<f64>() / n as f64;
        let v = draws
            .iter()
            .map(|d| {
                let diff = d.data()[j] - m;
                diff * diff
            })
            .sum::<f64>()
            / n as f64;
        mean[j] = m;
        variance[j] = v;
    }
    let lower: Vec<f64> = mean
        .iter()
        .zip(&variance)
        .map(|(m, v)| m - 2.0 * v.sqrt())
        .collect();
    let upper: Vec<f64> = mean
        .iter()
        .zip(&variance)
        .map(|(m, v)| m + 2.0 * v.sqrt())
        .collect();
    let mut flat = Vec::with_capacity(n * horizon);
    for d in draws {
        flat.extend_from_slice(d.data());
    }
    Ok(PredictionResult {
        mean: Tensor::new(vec![horizon], mean)?,
        variance: Tensor::new(vec![horizon], variance)?,
        samples: Tensor::new(vec![n, horizon], flat)?,
        interval: (
            Tensor::new(vec![horizon], lower)?,
            Tensor::new(vec![horizon], upper)?,
        ),
    })
}
