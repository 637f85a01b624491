//! The forecasting network.
//!
//! Pipeline per univariate window: tokenizer (mask, stationarize, pad,
//! patch, project, gated fusion), a causal transformer over the instruction
//! tokens followed by the series tokens, and a decoder that pads the sequence
//! to a fixed token budget with a learnable pad vector, runs a lightweight
//! transformer, and maps the flattened result through linear heads sized for
//! the maximum horizon and maximum reconstruction length. Domains with
//! shorter horizons read a prefix of the shared head output.

pub mod net;
pub mod tokenizer;

pub use net::{forward_batch, predict_batch, BatchOutputs, WindowGeometry, WindowTrace};
pub use tokenizer::{token_count, tokenize_series, Stationarization};

use serde::{Deserialize, Serialize};

use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::rng::Rng;
use crate::text::Vocabulary;

/// Layer norm epsilon throughout the network.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// MLP expansion factor inside transformer layers.
pub const MLP_RATIO: usize = 4;
/// Standard deviation of weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Which pieces of the architecture a run disables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_instructions: bool,
    pub use_masking: bool,
    pub use_light_trans: bool,
    pub use_reconstruction: bool,
    /// Concatenate series tokens before instruction tokens.
    pub ts_first: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_instructions: true,
            use_masking: true,
            use_light_trans: true,
            use_reconstruction: true,
            ts_first: false,
        }
    }
}

/// How much of the backbone the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tunability {
    /// Everything trains.
    #[default]
    Full,
    /// Backbone layers and positional embeddings are frozen.
    Freeze,
    /// Within the backbone, only positional embeddings and layer-norm
    /// scale/shift train; everything outside the backbone always trains.
    Fpt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width D.
    pub hidden: usize,
    /// Attention heads.
    pub heads: usize,
    /// Causal backbone depth.
    pub backbone_layers: usize,
    /// Lightweight decoder transformer depth.
    pub light_layers: usize,
    /// Patch (series token) length, shared across domains.
    pub patch_len: usize,
    /// Maximum token length R: instruction plus series tokens never exceed
    /// it, and the decoder pads every sequence up to it.
    pub max_tokens: usize,
    /// Maximum predictive length O of the shared forecast head.
    pub max_horizon: usize,
    /// Maximum reconstruction length of the shared reconstruction head.
    pub max_recon: usize,
    /// Training-time mask ratio r_m.
    pub mask_ratio: f64,
    /// Vocabulary size; derived from the instruction corpus, not configured.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub tunability: Tunability,
    /// Kept last so TOML serialization emits scalar keys before this table.
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_width(&self) -> usize {
        MLP_RATIO * self.hidden
    }

    /// Structural checks that do not need domain information.
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.patch_len == 0 {
            return Err(Error::Config("patch_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    /// Checks every domain against the model's budgets, including the token
    /// budget `instruction_len + series_tokens <= max_tokens`. Instruction
    /// lengths are static per domain, so this runs once at startup.
    pub fn validate_domains(&self, domains: &[DomainSpec], vocab: &Vocabulary) -> Result<()> {
        self.validate()?;
        for d in domains {
            if d.horizon > self.max_horizon {
                return Err(Error::Config(format!(
                    "domain {:?}: horizon {} exceeds the forecast head length {}",
                    d.name, d.horizon, self.max_horizon
                )));
            }
            if d.lookback > self.max_recon {
                return Err(Error::Config(format!(
                    "domain {:?}: lookback {} exceeds the reconstruction head length {}",
                    d.name, d.lookback, self.max_recon
                )));
            }
            if d.lookback < self.patch_len {
                return Err(Error::Config(format!(
                    "domain {:?}: lookback {} is shorter than the patch length {}",
                    d.name, d.lookback, self.patch_len
                )));
            }
            if d.stride == 0 {
                return Err(Error::Config(format!("domain {:?}: stride must be positive", d.name)));
            }
            let series_tokens = token_count(d.lookback, self.patch_len, d.stride);
            let instr_tokens = if self.ablation.use_instructions {
                vocab.encode(&d.instruction).len()
            } else {
                0
            };
            if instr_tokens + series_tokens > self.max_tokens {
                return Err(Error::Config(format!(
                    "domain {:?}: {} instruction + {} series tokens exceed max_tokens {}",
                    d.name, instr_tokens, series_tokens, self.max_tokens
                )));
            }
        }
        Ok(())
    }
}

/// Weights of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
}

impl LayerParams {
    fn init(d: usize, mlp: usize, rng: &mut Rng) -> Self {
        Self {
            w_q: Tensor::randn(&[d, d], INIT_STD, rng),
            b_q: Tensor::zeros(&[d]),
            w_k: Tensor::randn(&[d, d], INIT_STD, rng),
            b_k: Tensor::zeros(&[d]),
            w_v: Tensor::randn(&[d, d], INIT_STD, rng),
            b_v: Tensor::zeros(&[d]),
            w_o: Tensor::randn(&[d, d], INIT_STD, rng),
            b_o: Tensor::zeros(&[d]),
            ln1_scale: Tensor::ones(&[d]),
            ln1_shift: Tensor::zeros(&[d]),
            w_fc1: Tensor::randn(&[d, mlp], INIT_STD, rng),
            b_fc1: Tensor::zeros(&[mlp]),
            w_fc2: Tensor::randn(&[mlp, d], INIT_STD, rng),
            b_fc2: Tensor::zeros(&[d]),
            ln2_scale: Tensor::ones(&[d]),
            ln2_shift: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("attn.w_q", &self.w_q),
            ("attn.b_q", &self.b_q),
            ("attn.w_k", &self.w_k),
            ("attn.b_k", &self.b_k),
            ("attn.w_v", &self.w_v),
            ("attn.b_v", &self.b_v),
            ("attn.w_o", &self.w_o),
            ("attn.b_o", &self.b_o),
            ("ln1.scale", &self.ln1_scale),
            ("ln1.shift", &self.ln1_shift),
            ("mlp.w1", &self.w_fc1),
            ("mlp.b1", &self.b_fc1),
            ("mlp.w2", &self.w_fc2),
            ("mlp.b2", &self.b_fc2),
            ("ln2.scale", &self.ln2_scale),
            ("ln2.shift", &self.ln2_shift),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("attn.w_q", &mut self.w_q),
            ("attn.b_q", &mut self.b_q),
            ("attn.w_k", &mut self.w_k),
            ("attn.b_k", &mut self.b_k),
            ("attn.w_v", &mut self.w_v),
            ("attn.b_v", &mut self.b_v),
            ("attn.w_o", &mut self.w_o),
            ("attn.b_o", &mut self.b_o),
            ("ln1.scale", &mut self.ln1_scale),
            ("ln1.shift", &mut self.ln1_shift),
            ("mlp.w1", &mut self.w_fc1),
            ("mlp.b1", &mut self.b_fc1),
            ("mlp.w2", &mut self.w_fc2),
            ("mlp.b2", &mut self.b_fc2),
            ("ln2.scale", &mut self.ln2_scale),
            ("ln2.shift", &mut self.ln2_shift),
        ]
    }
}

/// The full named, shaped parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_proj: Tensor,
    pub mask_proj: Tensor,
    pub gate_w_series: Tensor,
    pub gate_w_mask: Tensor,
    pub gate_bias: Tensor,
    pub instr_embedding: Tensor,
    pub pos_embedding: Tensor,
    pub backbone: Vec<LayerParams>,
    pub pad_token: Tensor,
    pub light: Vec<LayerParams>,
    pub forecast_head: Tensor,
    pub recon_head: Tensor,
}

impl ModelParams {
    /// Fresh parameters: weights N(0, 0.02), biases zero, layer norms
    /// identity. Creation order is fixed, so a seeded generator yields
    /// bit-identical parameter sets.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if config.vocab_size == 0 {
            return Err(Error::Config(
                "vocab_size is unset; build the vocabulary before the parameters".into(),
            ));
        }
        let d = config.hidden;
        let mlp = config.mlp_width();
        let flat = config.max_tokens * d;
        Ok(Self {
            patch_proj: Tensor::randn(&[config.patch_len, d], INIT_STD, rng),
            mask_proj: Tensor::randn(&[config.patch_len, d], INIT_STD, rng),
            gate_w_series: Tensor::randn(&[d, d], INIT_STD, rng),
            gate_w_mask: Tensor::randn(&[d, d], INIT_STD, rng),
            gate_bias: Tensor::zeros(&[d]),
            instr_embedding: Tensor::randn(&[config.vocab_size, d], INIT_STD, rng),
            pos_embedding: Tensor::randn(&[config.max_tokens, d], INIT_STD, rng),
            backbone: (0..config.backbone_layers)
                .map(|_| LayerParams::init(d, mlp, rng))
                .collect(),
            pad_token: Tensor::randn(&[d], INIT_STD, rng),
            light: (0..config.light_layers)
                .map(|_| LayerParams::init(d, mlp, rng))
                .collect(),
            forecast_head: Tensor::randn(&[flat, config.max_horizon], INIT_STD, rng),
            recon_head: Tensor::randn(&[flat, config.max_recon], INIT_STD, rng),
        })
    }

    /// All-zero parameters of the configured shapes (a restore target).
    fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden;
        let mlp = config.mlp_width();
        let flat = config.max_tokens * d;
        let zero_layer = || LayerParams {
            w_q: Tensor::zeros(&[d, d]),
            b_q: Tensor::zeros(&[d]),
            w_k: Tensor::zeros(&[d, d]),
            b_k: Tensor::zeros(&[d]),
            w_v: Tensor::zeros(&[d, d]),
            b_v: Tensor::zeros(&[d]),
            w_o: Tensor::zeros(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln1_scale: Tensor::zeros(&[d]),
            ln1_shift: Tensor::zeros(&[d]),
            w_fc1: Tensor::zeros(&[d, mlp]),
            b_fc1: Tensor::zeros(&[mlp]),
            w_fc2: Tensor::zeros(&[mlp, d]),
            b_fc2: Tensor::zeros(&[d]),
            ln2_scale: Tensor::zeros(&[d]),
            ln2_shift: Tensor::zeros(&[d]),
        };
        Self {
            patch_proj: Tensor::zeros(&[config.patch_len, d]),
            mask_proj: Tensor::zeros(&[config.patch_len, d]),
            gate_w_series: Tensor::zeros(&[d, d]),
            gate_w_mask: Tensor::zeros(&[d, d]),
            gate_bias: Tensor::zeros(&[d]),
            instr_embedding: Tensor::zeros(&[config.vocab_size, d]),
            pos_embedding: Tensor::zeros(&[config.max_tokens, d]),
            backbone: (0..config.backbone_layers).map(|_| zero_layer()).collect(),
            pad_token: Tensor::zeros(&[d]),
            light: (0..config.light_layers).map(|_| zero_layer()).collect(),
            forecast_head: Tensor::zeros(&[flat, config.max_horizon]),
            recon_head: Tensor::zeros(&[flat, config.max_recon]),
        }
    }

    /// Rebuilds parameters from `(name, tensor)` pairs in canonical order,
    /// verifying names and shapes against the config.
    pub fn from_named(config: &ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::zeros(config);
        {
            let expected = params.named_tensors_mut();
            if expected.len() != entries.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} tensors, found {}",
                    expected.len(),
                    entries.len()
                )));
            }
            for ((expect_name, slot), (name, tensor)) in expected.into_iter().zip(entries) {
                if expect_name != name {
                    return Err(Error::Checkpoint(format!(
                        "tensor order mismatch: expected `{expect_name}`, found `{name}`"
                    )));
                }
                if slot.shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}`: shape {:?} does not match configured {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = tensor;
            }
        }
        Ok(params)
    }

    /// `(name, tensor)` pairs in canonical (creation/serialization) order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("mask_proj".into(), &self.mask_proj),
            ("gate_w_series".into(), &self.gate_w_series),
            ("gate_w_mask".into(), &self.gate_w_mask),
            ("gate_bias".into(), &self.gate_bias),
            ("instr_embedding".into(), &self.instr_embedding),
            ("pos_embedding".into(), &self.pos_embedding),
        ];
        for (i, layer) in self.backbone.iter().enumerate() {
            for (suffix, t) in layer.fields() {
                out.push((format!("backbone.{i}.{suffix}"), t));
            }
        }
        out.push(("pad_token".into(), &self.pad_token));
        for (i, layer) in self.light.iter().enumerate() {
            for (suffix, t) in layer.fields() {
                out.push((format!("light.{i}.{suffix}"), t));
            }
        }
        out.push(("forecast_head".into(), &self.forecast_head));
        out.push(("recon_head".into(), &self.recon_head));
        out
    }

    /// Mutable variant of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("mask_proj".into(), &mut self.mask_proj),
            ("gate_w_series".into(), &mut self.gate_w_series),
            ("gate_w_mask".into(), &mut self.gate_w_mask),
            ("gate_bias".into(), &mut self.gate_bias),
            ("instr_embedding".into(), &mut self.instr_embedding),
            ("pos_embedding".into(), &mut self.pos_embedding),
        ];
        for (i, layer) in self.backbone.iter_mut().enumerate() {
            for (suffix, t) in layer.fields_mut() {
                out.push((format!("backbone.{i}.{suffix}"), t));
            }
        }
        out.push(("pad_token".into(), &mut self.pad_token));
        for (i, layer) in self.light.iter_mut().enumerate() {
            for (suffix, t) in layer.fields_mut() {
                out.push((format!("light.{i}.{suffix}"), t));
            }
        }
        out.push(("forecast_head".into(), &mut self.forecast_head));
        out.push(("recon_head".into(), &mut self.recon_head));
        out
    }

    /// Lifts every parameter onto a tape. `trainable` decides per name
    /// whether the node participates in differentiation.
    pub fn lift(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> ModelVars {
        fn one(tape: &mut Tape, f: &dyn Fn(&str) -> bool, name: &str, t: &Tensor) -> Var {
            tape.leaf(t.clone(), f(name))
        }
        fn layer(tape: &mut Tape, f: &dyn Fn(&str) -> bool, prefix: &str, l: &LayerParams) -> LayerVars {
            LayerVars {
                w_q: one(tape, f, &format!("{prefix}.attn.w_q"), &l.w_q),
                b_q: one(tape, f, &format!("{prefix}.attn.b_q"), &l.b_q),
                w_k: one(tape, f, &format!("{prefix}.attn.w_k"), &l.w_k),
                b_k: one(tape, f, &format!("{prefix}.attn.b_k"), &l.b_k),
                w_v: one(tape, f, &format!("{prefix}.attn.w_v"), &l.w_v),
                b_v: one(tape, f, &format!("{prefix}.attn.b_v"), &l.b_v),
                w_o: one(tape, f, &format!("{prefix}.attn.w_o"), &l.w_o),
                b_o: one(tape, f, &format!("{prefix}.attn.b_o"), &l.b_o),
                ln1_scale: one(tape, f, &format!("{prefix}.ln1.scale"), &l.ln1_scale),
                ln1_shift: one(tape, f, &format!("{prefix}.ln1.shift"), &l.ln1_shift),
                w_fc1: one(tape, f, &format!("{prefix}.mlp.w1"), &l.w_fc1),
                b_fc1: one(tape, f, &format!("{prefix}.mlp.b1"), &l.b_fc1),
                w_fc2: one(tape, f, &format!("{prefix}.mlp.w2"), &l.w_fc2),
                b_fc2: one(tape, f, &format!("{prefix}.mlp.b2"), &l.b_fc2),
                ln2_scale: one(tape, f, &format!("{prefix}.ln2.scale"), &l.ln2_scale),
                ln2_shift: one(tape, f, &format!("{prefix}.ln2.shift"), &l.ln2_shift),
            }
        }
        ModelVars {
            patch_proj: one(tape, trainable, "patch_proj", &self.patch_proj),
            mask_proj: one(tape, trainable, "mask_proj", &self.mask_proj),
            gate_w_series: one(tape, trainable, "gate_w_series", &self.gate_w_series),
            gate_w_mask: one(tape, trainable, "gate_w_mask", &self.gate_w_mask),
            gate_bias: one(tape, trainable, "gate_bias", &self.gate_bias),
            instr_embedding: one(tape, trainable, "instr_embedding", &self.instr_embedding),
            pos_embedding: one(tape, trainable, "pos_embedding", &self.pos_embedding),
            backbone: self
                .backbone
                .iter()
                .enumerate()
                .map(|(i, l)| layer(tape, trainable, &format!("backbone.{i}"), l))
                .collect(),
            pad_token: one(tape, trainable, "pad_token", &self.pad_token),
            light: self
                .light
                .iter()
                .enumerate()
                .map(|(i, l)| layer(tape, trainable, &format!("light.{i}"), l))
                .collect(),
            forecast_head: one(tape, trainable, "forecast_head", &self.forecast_head),
            recon_head: one(tape, trainable, "recon_head", &self.recon_head),
        }
    }
}

/// Whether a parameter name belongs to the backbone stack (positional
/// embeddings included, matching the freeze semantics).
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.") || name == "pos_embedding"
}

/// Whether a backbone parameter is layer-norm scale/shift.
pub fn is_backbone_layer_norm(name: &str) -> bool {
    name.starts_with("backbone.") && (name.contains(".ln1.") || name.contains(".ln2."))
}

/// The trainable-parameter predicate for a tunability mode.
pub fn trainable_filter(mode: Tunability) -> impl Fn(&str) -> bool {
    move |name: &str| match mode {
        Tunability::Full => true,
        Tunability::Freeze => !is_backbone_param(name),
        Tunability::Fpt => {
            !is_backbone_param(name) || name == "pos_embedding" || is_backbone_layer_norm(name)
        }
    }
}

/// Tape handles for one transformer layer.
#[derive(Clone, Copy)]
pub struct LayerVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln1_scale: Var,
    pub ln1_shift: Var,
    pub w_fc1: Var,
    pub b_fc1: Var,
    pub w_fc2: Var,
    pub b_fc2: Var,
    pub ln2_scale: Var,
    pub ln2_shift: Var,
}

/// Tape handles for the full parameter set.
pub struct ModelVars {
    pub patch_proj: Var,
    pub mask_proj: Var,
    pub gate_w_series: Var,
    pub gate_w_mask: Var,
    pub gate_bias: Var,
    pub instr_embedding: Var,
    pub pos_embedding: Var,
    pub backbone: Vec<LayerVars>,
    pub pad_token: Var,
    pub light: Vec<LayerVars>,
    pub forecast_head: Var,
    pub recon_head: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{for_stream, Stream};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            backbone_layers: 1,
            light_layers: 1,
            patch_len: 4,
            max_tokens: 8,
            max_horizon: 6,
            max_recon: 12,
            mask_ratio: 0.25,
            vocab_size: 7,
            ablation: AblationFlags::default(),
            tunability: Tunability::Full,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = tiny_config();
        let a = ModelParams::init(&config, &mut for_stream(4, Stream::Init)).unwrap();
        let b = ModelParams::init(&config, &mut for_stream(4, Stream::Init)).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&config, &mut for_stream(5, Stream::Init)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn named_orders_agree_between_shared_and_mutable_views() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let shared: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let muts: Vec<String> = params.named_tensors_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(shared, muts);
        assert_eq!(shared.len(), 7 + 16 + 1 + 16 + 2);
        assert!(shared.contains(&"backbone.0.ln2.shift".to_string()));
    }

    #[test]
    fn tunability_filters_follow_the_freeze_rules() {
        let full = trainable_filter(Tunability::Full);
        let freeze = trainable_filter(Tunability::Freeze);
        let fpt = trainable_filter(Tunability::Fpt);

        assert!(full("backbone.0.attn.w_q") && full("pos_embedding") && full("forecast_head"));

        assert!(!freeze("backbone.0.attn.w_q"));
        assert!(!freeze("pos_embedding"));
        assert!(freeze("patch_proj") && freeze("instr_embedding") && freeze("pad_token"));
        assert!(freeze("light.0.attn.w_q") && freeze("forecast_head"));

        assert!(fpt("pos_embedding"));
        assert!(fpt("backbone.0.ln1.scale") && fpt("backbone.0.ln2.shift"));
        assert!(!fpt("backbone.0.attn.w_q") && !fpt("backbone.0.mlp.w1"));
        assert!(fpt("light.0.mlp.w1"), "light stack is outside the backbone");
    }

    #[test]
    fn domain_validation_enforces_budgets() {
        let mut config = tiny_config();
        config.vocab_size = 0; // filled later in this test
        let vocab = Vocabulary::build(&["alpha beta gamma"]).unwrap();
        config.vocab_size = vocab.len();
        let domain = DomainSpec {
            name: "d".into(),
            instruction: "alpha beta gamma".into(),
            channels: 1,
            lookback: 8,
            horizon: 4,
            stride: 4,
            csv: String::new(),
        };
        // 3 instruction + 2 series tokens = 5 <= 8
        config.validate_domains(&[domain.clone()], &vocab).unwrap();

        let mut too_long = domain.clone();
        too_long.horizon = 7;
        assert!(config.validate_domains(&[too_long], &vocab).is_err());

        let mut too_wide = domain.clone();
        too_wide.lookback = 13;
        assert!(config.validate_domains(&[too_wide], &vocab).is_err());

        let mut tight = config.clone();
        tight.max_tokens = 4;
        assert!(tight.validate_domains(&[domain], &vocab).is_err());
    }
}
