use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::assign::resolve_ffn_assignment;
use crate::error::{Error, Result};
use crate::text::RESERVED_TOKENS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    EncoderDecoder,
    DecoderOnly,
}

/// Encoder or decoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "encoder" | "enc" => Ok(Side::Encoder),
            "decoder" | "dec" => Ok(Side::Decoder),
            _ => Err(Error::config(format!("unknown side `{s}` (encoder|decoder)"))),
        }
    }
}

/// How the FFN sublayers of one stack map onto physical FFNs.
///
/// Textual form (used in config files): `individual`, `shared`, `noop`,
/// `sequence:M`, `cycle:M`, `cycle-rev:M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FfnSharing {
    /// One FFN per layer.
    Individual,
    /// A single FFN for the whole stack.
    SharedAll,
    /// No FFN sublayer at all: no weights, no residual, no layer norm.
    NoOp,
    /// `M` FFNs, each covering `N/M` consecutive layers.
    Sequence(usize),
    /// `M` FFNs repeated in order.
    Cycle(usize),
    /// `N/2` FFNs ascending, then the same FFNs descending.
    CycleRev(usize),
}

impl FfnSharing {
    /// Physical FFN index per layer, or `None` when the stack has no FFNs.
    pub fn layer_assignment(self, layers: usize) -> Result<Option<Vec<usize>>> {
        if self == FfnSharing::NoOp {
            return Ok(None);
        }
        resolve_ffn_assignment(self, layers).map(Some)
    }

    /// Whether the physical FFNs take the shared width `d_ff_shared`.
    pub fn uses_shared_width(self) -> bool {
        !matches!(self, FfnSharing::Individual | FfnSharing::NoOp)
    }
}

impl fmt::Display for FfnSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FfnSharing::Individual => write!(f, "individual"),
            FfnSharing::SharedAll => write!(f, "shared"),
            FfnSharing::NoOp => write!(f, "noop"),
            FfnSharing::Sequence(m) => write!(f, "sequence:{m}"),
            FfnSharing::Cycle(m) => write!(f, "cycle:{m}"),
            FfnSharing::CycleRev(m) => write!(f, "cycle-rev:{m}"),
        }
    }
}

impl FromStr for FfnSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (head, arg) = match lower.split_once(':') {
            Some((h, a)) => (h.to_string(), Some(a.to_string())),
            None => (lower.clone(), None),
        };
        let count = || -> Result<usize> {
            arg.as_deref()
                .ok_or_else(|| Error::config(format!("`{s}` needs a count, e.g. `{head}:2`")))?
                .parse()
                .map_err(|_| Error::config(format!("bad FFN count in `{s}`")))
        };
        match head.as_str() {
            "individual" | "indiv" => Ok(FfnSharing::Individual),
            "shared" | "sharedall" | "shared-all" => Ok(FfnSharing::SharedAll),
            "noop" | "no-op" | "none" => Ok(FfnSharing::NoOp),
            "sequence" => Ok(FfnSharing::Sequence(count()?)),
            "cycle" => Ok(FfnSharing::Cycle(count()?)),
            "cycle-rev" | "cyclerev" | "cycle_rev" => Ok(FfnSharing::CycleRev(count()?)),
            _ => Err(Error::config(format!(
                "unknown FFN sharing `{s}` (individual|shared|noop|sequence:M|cycle:M|cycle-rev:M)"
            ))),
        }
    }
}

impl TryFrom<String> for FfnSharing {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FfnSharing> for String {
    fn from(s: FfnSharing) -> String {
        s.to_string()
    }
}

/// Attention blocks are either per layer or one per stack and type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnSharing {
    #[default]
    Individual,
    Shared,
}

/// Complete tying plan for FFN and attention sublayers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharingSpec {
    pub enc_ffn: FfnSharing,
    pub dec_ffn: FfnSharing,
    /// One FFN serving every encoder and decoder layer.
    pub tie_enc_dec_ffn: bool,
    pub enc_self_attn: AttnSharing,
    pub dec_self_attn: AttnSharing,
    pub dec_cross_attn: AttnSharing,
}

impl Default for SharingSpec {
    fn default() -> Self {
        SharingSpec {
            enc_ffn: FfnSharing::Individual,
            dec_ffn: FfnSharing::Individual,
            tie_enc_dec_ffn: false,
            enc_self_attn: AttnSharing::Individual,
            dec_self_attn: AttnSharing::Individual,
            dec_cross_attn: AttnSharing::Individual,
        }
    }
}

/// Architectural description of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_model: usize,
    /// Inner width of per-layer (individual) FFNs.
    pub d_ff: usize,
    /// Inner width of shared FFNs; 0 removes them.
    pub d_ff_shared: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub architecture: Architecture,
    #[serde(default)]
    pub sharing: SharingSpec,
    /// Per-layer FFN width for the encoder only, overriding `d_ff`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_d_ff: Option<usize>,
    /// Per-layer FFN width for the decoder only, overriding `d_ff`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dec_d_ff: Option<usize>,
}

impl ModelConfig {
    fn shape(n_enc: usize, n_dec: usize, d_model: usize, d_ff: usize, heads: usize, vocab: usize) -> Self {
        ModelConfig {
            n_enc,
            n_dec,
            d_model,
            d_ff,
            d_ff_shared: d_ff,
            heads,
            vocab_size: vocab,
            max_len: 1024,
            dropout: 0.1,
            architecture: Architecture::EncoderDecoder,
            sharing: SharingSpec::default(),
            enc_d_ff: None,
            dec_d_ff: None,
        }
    }

    /// 6+6 layers, d_model 1024, d_ff 4096, 16 heads.
    pub fn transformer_big(vocab: usize) -> Self {
        Self::shape(6, 6, 1024, 4096, 16, vocab)
    }

    /// 6+6 layers, d_model 512, d_ff 2048, 8 heads.
    pub fn transformer_base(vocab: usize) -> Self {
        Self::shape(6, 6, 512, 2048, 8, vocab)
    }

    /// Big widths with 12 encoder and 2 decoder layers.
    pub fn deep_enc_shallow_dec(vocab: usize) -> Self {
        Self::shape(12, 2, 1024, 4096, 16, vocab)
    }

    /// Big widths with all 12 layers on a prefix-LM decoder.
    pub fn decoder_only_big(vocab: usize) -> Self {
        let mut c = Self::shape(0, 12, 1024, 4096, 16, vocab);
        c.architecture = Architecture::DecoderOnly;
        c
    }

    /// Desk-scale encoder-decoder.
    pub fn tiny(n_enc: usize, n_dec: usize, d_model: usize, heads: usize, vocab: usize) -> Self {
        let mut c = Self::shape(n_enc, n_dec, d_model, 4 * d_model, heads, vocab);
        c.max_len = 64;
        c.dropout = 0.0;
        c
    }

    pub fn layers(&self, side: Side) -> usize {
        match side {
            Side::Encoder => self.n_enc,
            Side::Decoder => self.n_dec,
        }
    }

    pub fn ffn_sharing(&self, side: Side) -> FfnSharing {
        match side {
            Side::Encoder => self.sharing.enc_ffn,
            Side::Decoder => self.sharing.dec_ffn,
        }
    }

    /// Inner width of the physical FFNs on `side` (0 when removed).
    pub fn ffn_width(&self, side: Side) -> usize {
        let sharing = self.ffn_sharing(side);
        if sharing == FfnSharing::NoOp {
            0
        } else if sharing.uses_shared_width() {
            self.d_ff_shared
        } else {
            match side {
                Side::Encoder => self.enc_d_ff.unwrap_or(self.d_ff),
                Side::Decoder => self.dec_d_ff.unwrap_or(self.d_ff),
            }
        }
    }

    /// Physical FFN index for each layer of `side`; `None` when the side has
    /// no FFN sublayers (No-op, or zero width).
    pub fn ffn_assignment(&self, side: Side) -> Result<Option<Vec<usize>>> {
        if self.layers(side) == 0 || self.ffn_width(side) == 0 {
            return Ok(None);
        }
        self.ffn_sharing(side).layer_assignment(self.layers(side))
    }

    /// Checks every structural rule and names the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(Error::config(format!(
                "vocab_size ({}) must exceed the {RESERVED_TOKENS} reserved tokens",
                self.vocab_size
            )));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_dec == 0 {
            return Err(Error::config("the decoder needs at least one layer"));
        }
        let s = &self.sharing;
        if self.architecture == Architecture::DecoderOnly {
            if self.n_enc != 0 {
                return Err(Error::config("decoder-only models must have n_enc = 0"));
            }
            if s.enc_ffn != FfnSharing::Individual
                || s.tie_enc_dec_ffn
                || s.enc_self_attn != AttnSharing::Individual
                || s.dec_cross_attn != AttnSharing::Individual
            {
                return Err(Error::config(
                    "decoder-only models only admit decoder-side sharing (SharedDec / NoDec)",
                ));
            }
            if !matches!(
                s.dec_ffn,
                FfnSharing::Individual | FfnSharing::SharedAll | FfnSharing::NoOp
            ) {
                return Err(Error::config(
                    "decoder-only models only admit individual, shared or noop decoder FFNs",
                ));
            }
        }
        if s.tie_enc_dec_ffn {
            if s.enc_ffn != FfnSharing::SharedAll || s.dec_ffn != FfnSharing::SharedAll {
                return Err(Error::config(
                    "tie_enc_dec_ffn requires enc_ffn = dec_ffn = shared",
                ));
            }
            if self.n_enc == 0 {
                return Err(Error::config("tie_enc_dec_ffn requires an encoder"));
            }
        }
        for side in [Side::Encoder, Side::Decoder] {
            let n = self.layers(side);
            if n > 0 {
                self.ffn_sharing(side).layer_assignment(n).map_err(|e| match e {
                    Error::Config(msg) => Error::config(format!("{} FFN: {msg}", side.name())),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    /// `(N_enc + N_dec) · d_ff`: the shared width that restores the baseline
    /// FFN parameter budget in a single FFN.
    pub fn one_wide_dff(&self) -> usize {
        (self.n_enc + self.n_dec) * self.d_ff
    }
}

/// Named FFN configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Baseline,
    SharedEnc,
    SharedDec,
    SharedEncSharedDec,
    SharedEncDec,
    NoEnc,
    NoDec,
    NoEncNoDec,
    SharedEncNoDec,
    NoEncSharedDec,
    OneWideFfn,
}

impl Preset {
    pub const ALL: [Preset; 11] = [
        Preset::Baseline,
        Preset::SharedEnc,
        Preset::SharedDec,
        Preset::SharedEncSharedDec,
        Preset::SharedEncDec,
        Preset::NoEnc,
        Preset::NoDec,
        Preset::NoEncNoDec,
        Preset::SharedEncNoDec,
        Preset::NoEncSharedDec,
        Preset::OneWideFfn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::SharedEnc => "SharedEnc",
            Preset::SharedDec => "SharedDec",
            Preset::SharedEncSharedDec => "SharedEncSharedDec",
            Preset::SharedEncDec => "SharedEncDec",
            Preset::NoEnc => "NoEnc",
            Preset::NoDec => "NoDec",
            Preset::NoEncNoDec => "NoEncNoDec",
            Preset::SharedEncNoDec => "SharedEncNoDec",
            Preset::NoEncSharedDec => "NoEncSharedDec",
            Preset::OneWideFfn => "OneWideFFN",
        }
    }

    /// (encoder FFN, decoder FFN, tie across encoder and decoder).
    pub fn ffn_plan(self) -> (FfnSharing, FfnSharing, bool) {
        use FfnSharing::*;
        match self {
            Preset::Baseline => (Individual, Individual, false),
            Preset::SharedEnc => (SharedAll, Individual, false),
            Preset::SharedDec => (Individual, SharedAll, false),
            Preset::SharedEncSharedDec => (SharedAll, SharedAll, false),
            Preset::SharedEncDec => (SharedAll, SharedAll, true),
            Preset::NoEnc => (NoOp, Individual, false),
            Preset::NoDec => (Individual, NoOp, false),
            Preset::NoEncNoDec => (NoOp, NoOp, false),
            Preset::SharedEncNoDec | Preset::OneWideFfn => (SharedAll, NoOp, false),
            Preset::NoEncSharedDec => (NoOp, SharedAll, false),
        }
    }

    /// Applies this preset's FFN plan to `shape`, keeping its widths and
    /// attention sharing. `OneWideFFN` also sets `d_ff_shared` to
    /// `(N_enc + N_dec) · d_ff`; on a decoder-only shape it widens the single
    /// shared decoder FFN instead.
    pub fn apply(self, shape: &ModelConfig) -> Result<ModelConfig> {
        let mut c = shape.clone();
        let (enc, dec, tie) = self.ffn_plan();
        if c.architecture == Architecture::DecoderOnly {
            let dec = match self {
                Preset::Baseline => FfnSharing::Individual,
                Preset::SharedDec | Preset::OneWideFfn => FfnSharing::SharedAll,
                Preset::NoDec => FfnSharing::NoOp,
                other => {
                    return Err(Error::config(format!(
                        "preset {} is not defined for decoder-only models (baseline, SharedDec, NoDec, OneWideFFN)",
                        other.name()
                    )))
                }
            };
            c.sharing.dec_ffn = dec;
        } else {
            c.sharing.enc_ffn = enc;
            c.sharing.dec_ffn = dec;
            c.sharing.tie_enc_dec_ffn = tie;
        }
        if self == Preset::OneWideFfn {
            c.d_ff_shared = c.one_wide_dff();
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::config(format!(
                    "unknown preset `{s}`; valid presets: {}",
                    valid.join(", ")
                ))
            })
    }
}
