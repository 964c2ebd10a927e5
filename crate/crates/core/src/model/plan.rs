use std::collections::BTreeMap;
use std::fmt;

use super::config::{Architecture, AttnSharing, ModelConfig, Side};
use crate::error::Result;

/// Parameter-count bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Embedding,
    EncAttn,
    /// Includes an FFN tied across encoder and decoder.
    EncFfn,
    DecSelfAttn,
    DecCrossAttn,
    DecFfn,
    LayerNorms,
    Biases,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Embedding,
        Component::EncAttn,
        Component::EncFfn,
        Component::DecSelfAttn,
        Component::DecCrossAttn,
        Component::DecFfn,
        Component::LayerNorms,
        Component::Biases,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Component::Embedding => "embedding",
            Component::EncAttn => "enc_attn",
            Component::EncFfn => "enc_ffn",
            Component::DecSelfAttn => "dec_self_attn",
            Component::DecCrossAttn => "dec_cross_attn",
            Component::DecFfn => "dec_ffn",
            Component::LayerNorms => "layer_norms",
            Component::Biases => "biases",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (rows + cols))`.
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub component: Component,
}

impl PlannedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every physical tensor of a model, in initialization order, plus the map
/// from logical site names to physical names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamPlan {
    pub tensors: Vec<PlannedTensor>,
    pub aliases: BTreeMap<String, String>,
}

pub const EMBEDDING: &str = "embedding";
/// Logical tensors of an attention sublayer; the trailing layer norm is
/// per layer, the rest may be shared.
pub const ATTN_TENSORS: [&str; 10] =
    ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_gain", "ln_bias"];
/// Logical tensors of an FFN sublayer, norm last as above.
pub const FFN_TENSORS: [&str; 6] = ["w1", "b1", "w2", "b2", "ln_gain", "ln_bias"];

/// Logical prefix of layer `layer`'s sublayer, e.g. `decoder.layers.3.ffn`.
pub fn site(side: Side, layer: usize, sublayer: &str) -> String {
    format!("{}.layers.{layer}.{sublayer}", side.name())
}

/// Logical name of the embedding table as used by `side`.
pub fn embed_site(side: Side) -> String {
    format!("{}.embed_tokens", side.name())
}

pub const OUTPUT_PROJECTION: &str = "decoder.output_projection";

impl ParamPlan {
    pub fn for_config(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut plan = ParamPlan::default();
        let d = config.d_model;
        plan.push(EMBEDDING, vec![config.vocab_size, d], Init::Xavier, Component::Embedding);
        if config.n_enc > 0 {
            plan.alias(embed_site(Side::Encoder), EMBEDDING);
        }
        plan.alias(embed_site(Side::Decoder), EMBEDDING);
        plan.alias(OUTPUT_PROJECTION.to_string(), EMBEDDING);

        let s = config.sharing;
        let mut attn_kinds = vec![(Side::Encoder, "self_attn", s.enc_self_attn, Component::EncAttn)];
        attn_kinds.push((Side::Decoder, "self_attn", s.dec_self_attn, Component::DecSelfAttn));
        if config.architecture == Architecture::EncoderDecoder {
            attn_kinds.push((Side::Decoder, "cross_attn", s.dec_cross_attn, Component::DecCrossAttn));
        }
        for side in [Side::Encoder, Side::Decoder] {
            for layer in 0..config.layers(side) {
                for &(kind_side, kind, sharing, component) in &attn_kinds {
                    if kind_side != side {
                        continue;
                    }
                    let index = match sharing {
                        AttnSharing::Individual => layer,
                        AttnSharing::Shared => 0,
                    };
                    let physical = format!("{}.{kind}.{index}", side.name());
                    if sharing == AttnSharing::Individual || layer == 0 {
                        plan.attention_block(&physical, d, component);
                    }
                    plan.alias_block(&site(side, layer, kind), &physical, &ATTN_TENSORS[..8]);
                    plan.layer_norm_for(side, layer, kind, d);
                }
                if let Some(assign) = config.ffn_assignment(side)? {
                    let m = assign[layer];
                    let physical = if s.tie_enc_dec_ffn {
                        "shared.ffn.0".to_string()
                    } else {
                        format!("{}.ffn.{m}", side.name())
                    };
                    let first_use = !plan.tensors.iter().any(|t| t.name == format!("{physical}.w1"));
                    if first_use {
                        let component = match side {
                            Side::Encoder => Component::EncFfn,
                            Side::Decoder => Component::DecFfn,
                        };
                        plan.ffn_block(&physical, d, config.ffn_width(side), component);
                    }
                    plan.alias_block(&site(side, layer, "ffn"), &physical, &FFN_TENSORS[..4]);
                    plan.layer_norm_for(side, layer, "ffn", d);
                }
            }
        }
        Ok(plan)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, init: Init, component: Component) {
        self.tensors.push(PlannedTensor {
            name: name.to_string(),
            shape,
            init,
            component,
        });
    }

    fn alias(&mut self, logical: String, physical: &str) {
        self.aliases.insert(logical, physical.to_string());
    }

    fn alias_block(&mut self, logical: &str, physical: &str, names: &[&str]) {
        for t in names {
            self.alias(format!("{logical}.{t}"), &format!("{physical}.{t}"));
        }
    }

    fn attention_block(&mut self, prefix: &str, d: usize, component: Component) {
        for proj in ["q", "k", "v", "o"] {
            self.push(&format!("{prefix}.w{proj}"), vec![d, d], Init::Xavier, component);
            self.push(&format!("{prefix}.b{proj}"), vec![d], Init::Zeros, Component::Biases);
        }
    }

    fn ffn_block(&mut self, prefix: &str, d: usize, width: usize, component: Component) {
        self.push(&format!("{prefix}.w1"), vec![d, width], Init::Xavier, component);
        self.push(&format!("{prefix}.b1"), vec![width], Init::Zeros, Component::Biases);
        self.push(&format!("{prefix}.w2"), vec![width, d], Init::Xavier, component);
        self.push(&format!("{prefix}.b2"), vec![d], Init::Zeros, Component::Biases);
    }

    /// Residual layer norms are never tied: each layer keeps its own even
    /// when the sublayer's weights are shared.
    fn layer_norm_for(&mut self, side: Side, layer: usize, kind: &str, d: usize) {
        let physical = format!("{}.{kind}_norm.{layer}", side.name());
        self.push(&format!("{physical}.ln_gain"), vec![d], Init::Ones, Component::LayerNorms);
        self.push(&format!("{physical}.ln_bias"), vec![d], Init::Zeros, Component::LayerNorms);
        self.alias_block(&site(side, layer, kind), &physical, &["ln_gain", "ln_bias"]);
    }

    pub fn total(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }
}

/// Physical parameter totals of a configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    /// Every [`Component`] key, zero when absent.
    pub breakdown: BTreeMap<&'static str, u64>,
}

impl ParamCount {
    /// Parameters outside biases and layer norms.
    pub fn matrices(&self) -> u64 {
        self.total - self.breakdown["biases"] - self.breakdown["layer_norms"]
    }

    /// Percentage of `baseline`'s total.
    pub fn percent_of(&self, baseline: &ParamCount) -> f64 {
        100.0 * self.total as f64 / baseline.total as f64
    }

    /// `baseline - self`, with and without biases and layer norms.
    pub fn savings_vs(&self, baseline: &ParamCount) -> ParamDelta {
        ParamDelta {
            total: baseline.total as i64 - self.total as i64,
            matrices_only: baseline.matrices() as i64 - self.matrices() as i64,
        }
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} total", self.total)?;
        for c in Component::ALL {
            write!(f, ", {} {}", c.key(), self.breakdown[c.key()])?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamDelta {
    pub total: i64,
    pub matrices_only: i64,
}

/// Counts physical parameters without allocating them: tied tensors count
/// once, removed sublayers count zero.
pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    let plan = ParamPlan::for_config(config)?;
    let mut breakdown: BTreeMap<&'static str, u64> =
        Component::ALL.iter().map(|c| (c.key(), 0)).collect();
    for t in &plan.tensors {
        *breakdown.get_mut(t.component.key()).expect("all keys present") += t.numel() as u64;
    }
    Ok(ParamCount {
        total: plan.total(),
        breakdown,
    })
}
