//! Configuration for model dimensions, training, decoding, and corpus prep.
//!
//! Defaults reproduce the reference setup (512-unit LSTMs, 4 prototypes per
//! bank, Adam at 1e-4, scheduled teacher forcing 0.95 → 0.8 over 50k
//! iterations). Tests and the bundled synthetic corpus override dimensions
//! downward; everything is plumbed through these structs so "desk scale" and
//! "paper scale" differ only in config.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Ablation variants: which conditioning signals the decoder receives.
///
/// Naming follows the component list: `gt` = ground-truth paraphrasing noise
/// encoder, `ctxproto`/`ctx` = context encoder with/without the prototype
/// bottleneck, `tmpl` = template semantic encoder, `slots` = slot inputs
/// (always on).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Context (raw) + slots only; no template encoder.
    CtxSlots,
    /// Template + raw context + slots.
    CtxSlotsTmpl,
    /// Template + prototype-bottlenecked context + slots.
    CtxprotoSlotsTmpl,
    /// Full model: noise encoder + prototype context + template + slots.
    GtCtxprotoSlotsTmpl,
    /// Noise encoder + raw context + template + slots.
    GtCtxSlotsTmpl,
    /// Noise encoder + template + slots; no context encoder.
    GtSlotsTmpl,
}

/// How the dialogue context feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    /// No context signal (zero vector).
    Off,
    /// The hierarchical encoder's final state, used directly.
    Raw,
    /// Attention over the context prototype bank.
    Proto,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::CtxSlots,
        Variant::CtxSlotsTmpl,
        Variant::CtxprotoSlotsTmpl,
        Variant::GtCtxprotoSlotsTmpl,
        Variant::GtCtxSlotsTmpl,
        Variant::GtSlotsTmpl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::CtxSlots => "ctx_slots",
            Variant::CtxSlotsTmpl => "ctx_slots_tmpl",
            Variant::CtxprotoSlotsTmpl => "ctxproto_slots_tmpl",
            Variant::GtCtxprotoSlotsTmpl => "gt_ctxproto_slots_tmpl",
            Variant::GtCtxSlotsTmpl => "gt_ctx_slots_tmpl",
            Variant::GtSlotsTmpl => "gt_slots_tmpl",
        }
    }

    pub fn uses_template(&self) -> bool {
        !matches!(self, Variant::CtxSlots)
    }

    pub fn context_mode(&self) -> ContextMode {
        match self {
            Variant::CtxSlots | Variant::CtxSlotsTmpl | Variant::GtCtxSlotsTmpl => ContextMode::Raw,
            Variant::CtxprotoSlotsTmpl | Variant::GtCtxprotoSlotsTmpl => ContextMode::Proto,
            Variant::GtSlotsTmpl => ContextMode::Off,
        }
    }

    pub fn uses_noise(&self) -> bool {
        matches!(
            self,
            Variant::GtCtxprotoSlotsTmpl | Variant::GtCtxSlotsTmpl | Variant::GtSlotsTmpl
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!(
                    "unknown variant {s:?}; expected one of: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Model dimensions. All encoder LSTMs share `d_hidden`; the three style
/// vectors have their own widths.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Word embedding width.
    pub d_word: usize,
    /// Slot embedding width (type + position + gated value CBOW).
    pub d_slot: usize,
    /// Common width word and slot embeddings are projected to before any RNN.
    pub d_model: usize,
    /// LSTM hidden size per direction.
    pub d_hidden: usize,
    /// Width of each bidirectional encoder's outputs after projection.
    pub d_enc_out: usize,
    /// Decoder LSTM hidden size.
    pub d_dec: usize,
    /// Hidden width of the additive attention scorers.
    pub d_attn: usize,
    /// Context prototype count and width.
    pub k_context_prototypes: usize,
    pub d_context_style: usize,
    /// Response (noise) prototype count and width.
    pub k_response_prototypes: usize,
    pub d_response_noise: usize,
    /// Highest slot type_position the sinusoidal code must distinguish.
    pub max_type_position: usize,
    /// Dropout applied to embedded RNN inputs during training.
    pub dropout: f64,
    /// Maximum tokens generated before giving up on end-of-sequence.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::GtCtxprotoSlotsTmpl,
            d_word: 300,
            d_slot: 512,
            d_model: 512,
            d_hidden: 512,
            d_enc_out: 512,
            d_dec: 512,
            d_attn: 256,
            k_context_prototypes: 4,
            d_context_style: 256,
            k_response_prototypes: 4,
            d_response_noise: 64,
            max_type_position: 16,
            dropout: 0.2,
            max_len: 60,
        }
    }
}

impl ModelConfig {
    /// Width of the context style vector the decoder actually sees, which
    /// depends on whether the prototype bottleneck is in play.
    pub fn d_context_effective(&self) -> usize {
        match self.variant.context_mode() {
            ContextMode::Proto | ContextMode::Off => self.d_context_style,
            ContextMode::Raw => self.d_enc_out,
        }
    }

    /// A small configuration for unit tests and the in-suite training runs.
    pub fn desk_scale(variant: Variant) -> Self {
        ModelConfig {
            variant,
            d_word: 40,
            d_slot: 24,
            d_model: 40,
            d_hidden: 48,
            d_enc_out: 48,
            d_dec: 48,
            d_attn: 32,
            k_context_prototypes: 4,
            d_context_style: 24,
            k_response_prototypes: 4,
            d_response_noise: 16,
            max_type_position: 16,
            dropout: 0.0,
            max_len: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_word", self.d_word),
            ("d_slot", self.d_slot),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("d_enc_out", self.d_enc_out),
            ("d_dec", self.d_dec),
            ("d_attn", self.d_attn),
            ("k_context_prototypes", self.k_context_prototypes),
            ("d_context_style", self.d_context_style),
            ("k_response_prototypes", self.k_response_prototypes),
            ("d_response_noise", self.d_response_noise),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_slot % 2 != 0 {
            return Err(Error::config(
                "d_slot must be even for the sinusoidal position code",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Gradient clipping threshold (global L2 norm).
    pub clip_norm: f64,
    /// Scheduled teacher forcing: starts at `tf_start`, decays exponentially
    /// to `tf_end` at `tf_horizon` iterations, constant afterwards.
    pub tf_start: f64,
    pub tf_end: f64,
    pub tf_horizon: usize,
    /// Noise dropout: probability of zeroing the noise vector for all steps.
    pub noise_zero_prob: f64,
    /// Geometric parameter for the "zero the first k steps" draw.
    pub noise_geometric_p: f64,
    /// Balanced sampling: per-set weight is min(sqrt(|set|), weight_cap).
    pub weight_cap: f64,
    /// Iterations between checkpoint writes (0 = only final).
    pub checkpoint_every: usize,
    /// Iterations between validation passes (0 = never).
    pub validate_every: usize,
    /// Instances drawn from the validation split per validation pass.
    pub validation_instances: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_iterations: 50_000,
            clip_norm: 5.0,
            tf_start: 0.95,
            tf_end: 0.8,
            tf_horizon: 50_000,
            noise_zero_prob: 0.4,
            noise_geometric_p: 0.4,
            weight_cap: 200.0,
            checkpoint_every: 5_000,
            validate_every: 1_000,
            validation_instances: 64,
            seed: 17,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for (name, p) in [
            ("noise_zero_prob", self.noise_zero_prob),
            ("noise_geometric_p", self.noise_geometric_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.noise_geometric_p <= 0.0 {
            return Err(Error::config("noise_geometric_p must be positive"));
        }
        if !(self.tf_start > 0.0 && self.tf_start <= 1.0 && self.tf_end > 0.0) {
            return Err(Error::config("teacher forcing ratios must be in (0, 1]"));
        }
        if self.tf_horizon == 0 {
            return Err(Error::config("tf_horizon must be positive"));
        }
        if self.weight_cap <= 0.0 {
            return Err(Error::config("weight_cap must be positive"));
        }
        Ok(())
    }
}

/// Decoding strategies for generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Single gate-thresholded greedy decode.
    Greedy,
    /// N noise-weight draws, one greedy decode per draw; inputs stay fixed.
    #[serde(rename = "sample_prototypes")]
    SampleProtos,
    /// Plain beam search over joint (slot ∪ word) probabilities.
    Beam,
    /// Stochastic beam search (Gumbel-top-k over sequences).
    StochasticBeam,
    /// Diverse beam search with between-group repetition penalties.
    DiverseBeam,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::SampleProtos => "sample_prototypes",
            Strategy::Beam => "beam",
            Strategy::StochasticBeam => "stochastic_beam",
            Strategy::DiverseBeam => "diverse_beam",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "sample_prototypes" => Ok(Strategy::SampleProtos),
            "beam" => Ok(Strategy::Beam),
            "stochastic_beam" => Ok(Strategy::StochasticBeam),
            "diverse_beam" => Ok(Strategy::DiverseBeam),
            _ => Err(Error::config(format!(
                "unknown strategy {s:?}; expected greedy, sample_prototypes, beam, \
                 stochastic_beam or diverse_beam"
            ))),
        }
    }
}

/// Parameters for generation / evaluation runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    /// Samples per instance (prototype-weight draws for greedy; returned
    /// hypotheses for the beam strategies).
    pub n_samples: usize,
    /// Gate threshold: a step emits a word when p_gen > delta, else a slot.
    pub delta: f64,
    /// Dirichlet concentration for prototype-weight sampling.
    pub alpha: f64,
    pub beam_width: usize,
    /// Diverse beam: number of groups.
    pub groups: usize,
    /// Diverse beam: penalty strength for tokens already chosen by earlier
    /// groups at the same step.
    pub gamma: f64,
    /// Replace sampled prototype weights with a zero noise vector.
    pub zero_noise: bool,
    /// Maximum tokens per generated sequence.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            strategy: Strategy::Greedy,
            n_samples: 8,
            delta: 0.5,
            alpha: 0.25,
            beam_width: 8,
            groups: 4,
            gamma: 0.5,
            zero_noise: false,
            max_len: 60,
            seed: 23,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be positive"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::config("delta must be in [0, 1]"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        if self.beam_width == 0 {
            return Err(Error::config("beam_width must be positive"));
        }
        if self.groups == 0 || self.groups > self.beam_width {
            return Err(Error::config("groups must be in [1, beam_width]"));
        }
        if self.beam_width % self.groups != 0 {
            return Err(Error::config("groups must divide beam_width evenly"));
        }
        if self.gamma < 0.0 {
            return Err(Error::config("gamma must be non-negative"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        Ok(())
    }
}

/// Corpus preparation settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorpusConfig {
    /// Minimum members for a paraphrase set to enter the training pool.
    pub min_train_members: usize,
    /// Evaluation sets carved per split (seen and unseen alike).
    pub eval_sets_per_split: usize,
    /// Member count range for evaluation sets.
    pub eval_min_members: usize,
    pub eval_max_members: usize,
    /// Minimum word frequency for the vocabulary.
    pub min_word_freq: usize,
    /// Context turns kept per response.
    pub context_turns: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            min_train_members: 4,
            eval_sets_per_split: 100,
            eval_min_members: 5,
            eval_max_members: 7,
            min_word_freq: 1,
            context_turns: 3,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_train_members == 0 {
            return Err(Error::config("min_train_members must be positive"));
        }
        if self.eval_min_members > self.eval_max_members {
            return Err(Error::config(
                "eval_min_members must not exceed eval_max_members",
            ));
        }
        if self.context_turns == 0 {
            return Err(Error::config("context_turns must be positive"));
        }
        Ok(())
    }
}

/// Top-level bundle, the unit stored in checkpoints and config files.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub decoding: DecodingConfig,
    pub corpus: CorpusConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.decoding.validate()?;
        self.corpus.validate()
    }
}
