//! Run configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::Deserialize;
use wideffn::model::{ModelConfig, Preset, SharingSpec};
use wideffn::training::{
    generate_toy_task, load_parallel_corpus, load_parallel_corpus_with_vocab, Corpus, Schedule, ToyTask, TrainOptions,
};
use wideffn::{Error, Result};

/// Overrides the configured seed when set.
pub const SEED_ENV: &str = "WFN_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Big,
    Base,
    DeepEncShallowDec,
    DecoderOnlyBig,
    #[default]
    Tiny,
}

/// Shape name plus optional overrides of any dimension.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub shape: Shape,
    pub n_enc: Option<usize>,
    pub n_dec: Option<usize>,
    pub d_model: Option<usize>,
    /// Also sets `d_ff_shared` unless that is given too.
    pub d_ff: Option<usize>,
    pub d_ff_shared: Option<usize>,
    pub heads: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_len: Option<usize>,
    pub dropout: Option<f32>,
    pub enc_d_ff: Option<usize>,
    pub dec_d_ff: Option<usize>,
    /// Explicit tying plan; a top-level `preset` replaces its FFN part.
    pub sharing: Option<SharingSpec>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub target_accuracy: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = TrainOptions::default();
        TrainSection {
            steps: o.steps,
            batch_size: o.batch_size,
            lr: o.schedule.base_lr,
            warmup_steps: o.schedule.warmup_steps,
            eval_every: o.eval_every,
            target_accuracy: o.target_accuracy,
        }
    }
}

/// Either a generated toy task or line-aligned parallel files.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub task: Option<ToyTask>,
    /// Toy vocabulary size, special tokens included.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub heldout_size: usize,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            task: None,
            vocab: 20,
            min_len: 1,
            max_len: 8,
            train_size: 2000,
            heldout_size: 200,
            train_src: None,
            train_tgt: None,
            valid_src: None,
            valid_tgt: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Option<String>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    /// Directory relative data paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run configuration: {}", e.message())))
    }

    /// Reads `path` and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        c.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        c.apply_env()?;
        Ok(c)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Option<Preset>> {
        self.preset.as_deref().map(str::parse).transpose()
    }

    /// The model configuration with `vocab_size` taken from `vocab` when
    /// the file does not fix it.
    pub fn model_config(&self, vocab: Option<usize>) -> Result<ModelConfig> {
        let m = &self.model;
        let v = match (m.vocab_size, vocab) {
            (Some(set), Some(data)) if set != data => {
                return Err(Error::Config(format!(
                    "model.vocab_size = {set} but the data vocabulary has {data} entries"
                )))
            }
            (Some(v), _) | (None, Some(v)) => v,
            (None, None) => match m.shape {
                Shape::Tiny => DataSection::default().vocab,
                _ => 32_000,
            },
        };
        let mut c = match m.shape {
            Shape::Big => ModelConfig::transformer_big(v),
            Shape::Base => ModelConfig::transformer_base(v),
            Shape::DeepEncShallowDec => ModelConfig::deep_enc_shallow_dec(v),
            Shape::DecoderOnlyBig => ModelConfig::decoder_only_big(v),
            Shape::Tiny => ModelConfig::tiny(2, 2, 32, 4, v),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(x) = m.$f { c.$f = x; })* };
        }
        set!(n_enc, n_dec, d_model, heads, max_len, dropout);
        if let Some(f) = m.d_ff {
            c.d_ff = f;
            c.d_ff_shared = f;
        }
        set!(d_ff_shared);
        c.enc_d_ff = m.enc_d_ff;
        c.dec_d_ff = m.dec_d_ff;
        if let Some(s) = m.sharing {
            c.sharing = s;
        }
        match self.preset()? {
            Some(p) => p.apply(&c),
            None => {
                c.validate()?;
                Ok(c)
            }
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            steps: t.steps,
            batch_size: t.batch_size,
            seed: self.seed,
            schedule: Schedule {
                base_lr: t.lr,
                warmup_steps: t.warmup_steps,
            },
            eval_every: t.eval_every,
            target_accuracy: t.target_accuracy,
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `(training set, held-out set)`. Toy tasks draw both from one seeded
    /// stream; file corpora share the training vocabulary.
    pub fn corpora(&self) -> Result<(Corpus, Corpus)> {
        let d = &self.data;
        match (d.task, &d.train_src, &d.train_tgt) {
            (Some(task), None, None) => {
                if d.min_len > d.max_len || d.min_len == 0 {
                    return Err(Error::Config(format!("data length range {}..={} is empty", d.min_len, d.max_len)));
                }
                let all = generate_toy_task(task, d.train_size + d.heldout_size, d.min_len..=d.max_len, d.vocab, self.seed)?;
                Ok(all.split_at(d.train_size))
            }
            (None, Some(src), Some(tgt)) => {
                let train = load_parallel_corpus(&self.resolve(src), &self.resolve(tgt))?;
                let heldout = match (&d.valid_src, &d.valid_tgt) {
                    (Some(vs), Some(vt)) => load_parallel_corpus_with_vocab(&self.resolve(vs), &self.resolve(vt), &train.vocab)?,
                    (None, None) => train.take(d.heldout_size),
                    _ => return Err(Error::Config("data.valid_src and data.valid_tgt go together".into())),
                };
                Ok((train, heldout))
            }
            (None, None, None) => Err(Error::Config(
                "no data: set data.task (copy|reverse|sort) or data.train_src and data.train_tgt".into(),
            )),
            _ => Err(Error::Config(
                "set either data.task or both data.train_src and data.train_tgt, not a mix".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("preset = \"SharedEnc\"\nShardEnc = true\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("ShardEnc"), "{err}");
        assert!(RunConfig::parse("[model]\nd_modle = 4\n").is_err());
    }

    #[test]
    fn bad_preset_lists_the_valid_ones() {
        let c = RunConfig::parse("preset = \"ShardEnc\"").unwrap();
        let err = c.model_config(None).unwrap_err().to_string();
        assert!(err.contains("SharedEncNoDec") && err.contains("OneWideFFN"), "{err}");
    }

    #[test]
    fn preset_expansion_covers_the_nomenclature() {
        use wideffn::model::FfnSharing::*;
        let golden = [
            ("baseline", Individual, Individual, false),
            ("SharedEnc", SharedAll, Individual, false),
            ("SharedDec", Individual, SharedAll, false),
            ("SharedEncSharedDec", SharedAll, SharedAll, false),
            ("SharedEncDec", SharedAll, SharedAll, true),
            ("NoEnc", NoOp, Individual, false),
            ("NoDec", Individual, NoOp, false),
            ("NoEncNoDec", NoOp, NoOp, false),
            ("SharedEncNoDec", SharedAll, NoOp, false),
            ("NoEncSharedDec", NoOp, SharedAll, false),
            ("OneWideFFN", SharedAll, NoOp, false),
        ];
        for (name, enc, dec, tie) in golden {
            let c = RunConfig::parse(&format!("preset = \"{name}\"\n[model]\nshape = \"big\"\n"))
                .unwrap()
                .model_config(None)
                .unwrap();
            assert_eq!((c.sharing.enc_ffn, c.sharing.dec_ffn, c.sharing.tie_enc_dec_ffn), (enc, dec, tie), "{name}");
        }
    }

    #[test]
    fn overrides_and_vocab() {
        let c = RunConfig::parse("preset = \"SharedEncNoDec\"\n[model]\nshape = \"big\"\nd_ff_shared = 24576\n").unwrap();
        let m = c.model_config(None).unwrap();
        assert_eq!((m.d_ff, m.d_ff_shared, m.vocab_size), (4096, 24_576, 32_000));
        let c = RunConfig::parse("[model]\nd_model = 16\nd_ff = 48\nvocab_size = 30\n").unwrap();
        let m = c.model_config(None).unwrap();
        assert_eq!((m.d_model, m.d_ff, m.d_ff_shared), (16, 48, 48));
        assert!(c.model_config(Some(20)).is_err());
    }

    #[test]
    fn toy_data_splits() {
        let c = RunConfig::parse("[data]\ntask = \"copy\"\ntrain_size = 10\nheldout_size = 4\n").unwrap();
        let (train, heldout) = c.corpora().unwrap();
        assert_eq!((train.len(), heldout.len()), (10, 4));
        assert!(RunConfig::default().corpora().is_err());
    }
}
