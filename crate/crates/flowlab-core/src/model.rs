//! The velocity field `v(x_t, t, c)` with three interchangeable conditioning
//! pathways, plus exact parameter accounting for the conditioning trade-off.
//!
//! The backbone is an MLP over the flattened state: an input projection over
//! `[x, condition embedding, step-token slot]`, `L` pre-norm residual hidden
//! layers, and an output projection back to the state width. The pathways:
//!
//! * `adaln` — per-layer (scale, shift, gate) modulation computed from a
//!   sinusoidal time embedding through a bias-free two-stage map
//!   `D -> D -> 3D` (exactly `4D^2` parameters per layer). The final stage is
//!   zero-initialized, so at initialization the modulation is the identity
//!   (scale `1` via `1+s`, shift `0`, gate `1` via `1+g`) and the forward
//!   pass equals the plain backbone exactly.
//! * `step-token` — `m` learnable width-`D` vectors per supported step count,
//!   mean-pooled and concatenated into the input projection. Continuous time
//!   is not consumed; the discrete step count is the only step conditioning.
//! * `plain` — no time or step pathway at all.
//!
//! The step-token slot of the input projection is zero-filled in `adaln` and
//! `plain` modes, so backbones have identical parameter counts across modes
//! and the adaln/step-token total difference is exactly `4LD^2 - |S| m D`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::graph::{concat_cols, gather_rows, Node};
use crate::math;
use crate::params::ParamStore;
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::Result;

/// Conditioning pathway selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    AdaLn,
    StepToken,
    Plain,
}

impl CondMode {
    pub fn name(self) -> &'static str {
        match self {
            CondMode::AdaLn => "adaln",
            CondMode::StepToken => "step-token",
            CondMode::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaln" => Ok(CondMode::AdaLn),
            "step-token" => Ok(CondMode::StepToken),
            "plain" => Ok(CondMode::Plain),
            other => Err(CoreError::InvalidConfig(format!("unknown conditioning mode '{other}'"))),
        }
    }
}

/// Condition input: a dataset condition id or the null condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondId {
    Id(usize),
    Null,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub d_data: usize,
    pub conditions: usize,
    pub mode: CondMode,
    /// Learnable tokens per supported step count (`m`).
    pub tokens_per_step: usize,
    /// Supported inference step counts (`S`).
    pub supported_steps: Vec<u32>,
    /// Sinusoidal time-embedding width; must equal `hidden` so the adaln
    /// accounting is exactly `4D^2` per layer.
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 64,
            d_data: 2,
            conditions: 4,
            mode: CondMode::AdaLn,
            tokens_per_step: 3,
            supported_steps: vec![1, 2, 4],
            time_embed_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.d_data == 0 {
            return Err(CoreError::InvalidConfig("layers, hidden and d_data must be >= 1".into()));
        }
        if self.conditions == 0 {
            return Err(CoreError::InvalidConfig("conditions must be >= 1".into()));
        }
        if self.tokens_per_step == 0 {
            return Err(CoreError::InvalidConfig("tokens_per_step must be >= 1".into()));
        }
        if self.mode == CondMode::StepToken && self.supported_steps.is_empty() {
            return Err(CoreError::InvalidConfig(
                "step-token mode requires a non-empty supported step set".into(),
            ));
        }
        if self.time_embed_dim != self.hidden {
            return Err(CoreError::InvalidConfig(
                "time_embed_dim must equal hidden (modulation accounting)".into(),
            ));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(CoreError::InvalidConfig("time_embed_dim must be even".into()));
        }
        let mut sorted = self.supported_steps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.supported_steps.len() || sorted.iter().any(|&n| n == 0) {
            return Err(CoreError::InvalidConfig(
                "supported_steps must be distinct positive integers".into(),
            ));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: CondMode) -> Self {
        self.mode = mode;
        self
    }

    /// Input-projection width: state + condition slot + step-token slot.
    fn input_width(&self) -> usize {
        self.d_data + 2 * self.hidden
    }
}

/// Sinusoidal continuous-time embedding: half sines, half cosines over a
/// geometric frequency bank from 1 to 1000.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    freqs: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Self {
        let half = dim / 2;
        let freqs = (0..half)
            .map(|i| {
                if half > 1 {
                    math::powf(1000.0, i as f64 / (half - 1) as f64)
                } else {
                    1.0
                }
            })
            .collect();
        TimeEmbedding { dim, freqs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_batch(&self, ts: &[f64]) -> Tensor {
        let mut out = Tensor::zeros(ts.len(), self.dim);
        let half = self.dim / 2;
        for (r, &t) in ts.iter().enumerate() {
            for (i, &f) in self.freqs.iter().enumerate() {
                out.set(r, i, math::sin(f * t));
                out.set(r, half + i, math::cos(f * t));
            }
        }
        out
    }
}

/// The parameterized velocity field. Owns its [`ParamStore`]; parameter
/// insertion order is the canonical checkpoint order.
pub struct VelocityModel {
    config: ModelConfig,
    store: ParamStore,
    time_embedding: TimeEmbedding,
    cond_embed: Node,
    in_w: Node,
    in_b: Node,
    layer_w: Vec<Node>,
    layer_b: Vec<Node>,
    out_w: Node,
    out_b: Node,
    adaln_w1: Vec<Node>,
    adaln_w2: Vec<Node>,
    step_tokens: Vec<(u32, Node)>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl core::fmt::Debug for VelocityModel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("VelocityModel")
            .field("config", &self.config)
            .field("params", &self.store.total_param_count())
            .finish()
    }
}

impl VelocityModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedRng::new(SeedRng::derive_seed(seed, "model-init"));
        let mut store = ParamStore::new();
        let d = config.hidden;

        let cond_embed = store.insert(
            "cond_embed",
            rng.normal_tensor(config.conditions + 1, d).scale(0.3)?,
        )?;
        let in_w = store.insert(
            "in_proj.weight",
            rng.normal_tensor(config.input_width(), d)
                .scale(1.0 / math::sqrt(config.input_width() as f64))?,
        )?;
        let in_b = store.insert("in_proj.bias", Tensor::zeros(1, d))?;
        let mut layer_w = Vec::with_capacity(config.layers);
        let mut layer_b = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layer_w.push(store.insert(
                &format!("layers.{l:02}.weight"),
                rng.normal_tensor(d, d).scale(1.0 / math::sqrt(d as f64))?,
            )?);
            layer_b.push(store.insert(&format!("layers.{l:02}.bias"), Tensor::zeros(1, d))?);
        }
        let out_w = store.insert(
            "out_proj.weight",
            rng.normal_tensor(d, config.d_data).scale(1.0 / math::sqrt(d as f64))?,
        )?;
        let out_b = store.insert("out_proj.bias", Tensor::zeros(1, config.d_data))?;

        let mut adaln_w1 = Vec::new();
        let mut adaln_w2 = Vec::new();
        if config.mode == CondMode::AdaLn {
            for l in 0..config.layers {
                adaln_w1.push(store.insert(
                    &format!("adaln.{l:02}.w1"),
                    rng.normal_tensor(config.time_embed_dim, d)
                        .scale(1.0 / math::sqrt(config.time_embed_dim as f64))?,
                )?);
                // Zero init: modulation starts as the identity.
                adaln_w2.push(store.insert(&format!("adaln.{l:02}.w2"), Tensor::zeros(d, 3 * d))?);
            }
        }

        let mut step_tokens = Vec::new();
        if config.mode == CondMode::StepToken {
            for &n in &config.supported_steps {
                step_tokens.push((
                    n,
                    store.insert(
                        &format!("step_tokens.{n}"),
                        rng.normal_tensor(config.tokens_per_step, d).scale(0.3)?,
                    )?,
                ));
            }
        }

        let time_embedding = TimeEmbedding::new(config.time_embed_dim);
        Ok(VelocityModel {
            config,
            store,
            time_embedding,
            cond_embed,
            in_w,
            in_b,
            layer_w,
            layer_b,
            out_w,
            out_b,
            adaln_w1,
            adaln_w2,
            step_tokens,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn total_params(&self) -> u64 {
        self.store.total_param_count()
    }

    /// Copies every parameter shared by name from `other` (e.g. the backbone
    /// of a plain model into an adaln model).
    pub fn copy_common_params_from(&mut self, other: &VelocityModel) -> Result<()> {
        for (name, node) in other.store.iter() {
            if let Ok(mine) = self.store.get(name) {
                mine.set_value(node.value_clone())?;
            }
        }
        Ok(())
    }

    /// Fresh model with identical config and parameter values.
    pub fn deep_clone(&self, seed: u64) -> Result<VelocityModel> {
        let mut clone = VelocityModel::new(self.config.clone(), seed)?;
        clone.copy_common_params_from(self)?;
        Ok(clone)
    }

    /// Concatenated little-endian bytes of all parameters in canonical
    /// order; used for bit-exact freeze checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, node) in self.store.iter() {
            for v in node.value().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn check_inputs(&self, x: &Tensor, ts: &[f64], conds: &[CondId], step: Option<u32>) -> Result<()> {
        if x.rows() == 0 {
            return Err(CoreError::EmptyBatch);
        }
        if x.cols() != self.config.d_data {
            return Err(CoreError::ShapeMismatch {
                op: "forward",
                detail: format!("state width {} vs d_data {}", x.cols(), self.config.d_data),
            });
        }
        if ts.len() != x.rows() || conds.len() != x.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "batch {} vs {} times / {} conditions",
                    x.rows(),
                    ts.len(),
                    conds.len()
                ),
            });
        }
        for &t in ts {
            if !(0.0..=1.0).contains(&t) || !t.is_finite() {
                return Err(CoreError::TimeOutOfRange(t));
            }
        }
        for &c in conds {
            if let CondId::Id(id) = c {
                if id >= self.config.conditions {
                    return Err(CoreError::ConditionOutOfRange {
                        id,
                        conditions: self.config.conditions,
                    });
                }
            }
        }
        if self.config.mode == CondMode::StepToken {
            match step {
                None => return Err(CoreError::MissingStepCount),
                Some(n) => {
                    if !self.config.supported_steps.contains(&n) {
                        return Err(CoreError::UnsupportedStepCount {
                            n,
                            supported: self.config.supported_steps.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn cond_rows(&self, conds: &[CondId]) -> Vec<usize> {
        conds
            .iter()
            .map(|c| match c {
                CondId::Id(id) => *id,
                CondId::Null => self.config.conditions,
            })
            .collect()
    }

    fn token_node(&self, n: u32) -> Result<&Node> {
        self.step_tokens
            .iter()
            .find(|(k, _)| *k == n)
            .map(|(_, node)| node)
            .ok_or_else(|| CoreError::UnsupportedStepCount {
                n,
                supported: self.config.supported_steps.clone(),
            })
    }

    /// Differentiable forward pass over a batch node. The per-row flow times
    /// `ts` feed the adaln pathway; step-token mode consumes `step` instead
    /// and ignores the numeric times beyond range validation.
    pub fn forward_node(
        &self,
        x: &Node,
        ts: &[f64],
        conds: &[CondId],
        step: Option<u32>,
    ) -> Result<Node> {
        let batch = {
            let v = x.value();
            self.check_inputs(&v, ts, conds, step)?;
            v.rows()
        };
        let d = self.config.hidden;

        let cond = gather_rows(&self.cond_embed, &self.cond_rows(conds))?;
        let token = match self.config.mode {
            CondMode::StepToken => {
                let table = self.token_node(step.expect("validated above"))?;
                table.mean_rows()?.broadcast_row(batch)?
            }
            _ => Node::constant(Tensor::zeros(batch, d)),
        };
        let feats = concat_cols(&[x.clone(), cond, token])?;
        let mut h = feats.matmul(&self.in_w)?.add_row(&self.in_b)?;

        let modulation = if self.config.mode == CondMode::AdaLn {
            Some(Node::constant(self.time_embedding.embed_batch(ts)))
        } else {
            None
        };
        let ones = Node::constant(Tensor::ones(batch, d));

        for l in 0..self.config.layers {
            let nh = h.layer_norm(LAYER_NORM_EPS)?;
            let f = match &modulation {
                Some(temb) => {
                    let m = temb.matmul(&self.adaln_w1[l])?.silu()?.matmul(&self.adaln_w2[l])?;
                    let scale = m.slice_cols(0..d)?;
                    let shift = m.slice_cols(d..2 * d)?;
                    let gate = m.slice_cols(2 * d..3 * d)?;
                    let u = nh.mul(&scale.add(&ones)?)?.add(&shift)?;
                    let f = u.matmul(&self.layer_w[l])?.add_row(&self.layer_b[l])?.silu()?;
                    f.mul(&gate.add(&ones)?)?
                }
                None => nh.matmul(&self.layer_w[l])?.add_row(&self.layer_b[l])?.silu()?,
            };
            h = h.add(&f)?;
        }
        h.matmul(&self.out_w)?.add_row(&self.out_b)
    }

    /// Non-differentiating forward pass.
    pub fn forward(
        &self,
        x: &Tensor,
        ts: &[f64],
        conds: &[CondId],
        step: Option<u32>,
    ) -> Result<Tensor> {
        let node = self.forward_node(&Node::constant(x.clone()), ts, conds, step)?;
        Ok(node.value_clone())
    }

    /// Forward pass with one shared flow time for the whole batch.
    pub fn forward_at(
        &self,
        x: &Tensor,
        t: f64,
        conds: &[CondId],
        step: Option<u32>,
    ) -> Result<Tensor> {
        let ts = vec![t; x.rows()];
        self.forward(x, &ts, conds, step)
    }
}

// ----- parameter accounting ----------------------------------------------

/// Exact integer parameter counts for the two conditioning pathways.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditioningCounts {
    /// `|S| * m * D` step-token parameters.
    pub token_params: u64,
    /// `4 * L * D^2` modulation parameters.
    pub adaln_params: u64,
}

impl ConditioningCounts {
    /// Exact ratio `adaln / token = 4LD / (|S| m)`.
    pub fn ratio(&self) -> f64 {
        self.adaln_params as f64 / self.token_params as f64
    }

    /// Ratio rounded to the nearest integer, as quoted in the analysis.
    pub fn ratio_rounded(&self) -> u64 {
        math::round(self.ratio()) as u64
    }
}

/// Parameter cost of step conditioning: token table `|S| * m * D` versus the
/// per-layer bias-free two-stage modulation maps `L * (D*D + D*3D) = 4LD^2`.
/// Use `tokens_per_step = 1` to reproduce the one-embedding-per-step
/// analysis arithmetic.
pub fn count_conditioning_params(
    step_counts: u64,
    layers: u64,
    hidden: u64,
    tokens_per_step: u64,
) -> ConditioningCounts {
    ConditioningCounts {
        token_params: step_counts * tokens_per_step * hidden,
        adaln_params: 4 * layers * hidden * hidden,
    }
}

/// Shannon entropy in bits of a discrete step-count prior.
pub fn step_entropy_bits(prior: &[f64]) -> Result<f64> {
    if prior.is_empty() {
        return Err(CoreError::InvalidPrior("empty prior".into()));
    }
    let mut sum = 0.0;
    for &p in prior {
        if p < 0.0 || !p.is_finite() {
            return Err(CoreError::InvalidPrior(format!("negative or non-finite probability {p}")));
        }
        sum += p;
    }
    if math::abs(sum - 1.0) > 1e-9 {
        return Err(CoreError::InvalidPrior(format!("probabilities sum to {sum}")));
    }
    let mut h = 0.0;
    for &p in prior {
        if p > 0.0 {
            h -= p * math::log2(p);
        }
    }
    Ok(h)
}

/// Information-theoretic floor on step-conditioning parameters:
/// `log2(K) * D`, with the entropy taken at two decimal places (1.58 bits
/// for K = 3) before rounding up, matching the published arithmetic.
pub fn entropy_lower_bound_params(step_counts: u64, hidden: u64) -> u64 {
    let bits = math::log2(step_counts as f64);
    let bits_2dp = math::round(bits * 100.0) / 100.0;
    math::ceil(bits_2dp * hidden as f64) as u64
}

/// Uniform prior over `n` step counts.
pub fn uniform_prior(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
