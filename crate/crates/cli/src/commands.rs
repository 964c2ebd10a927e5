use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use wideffn::bench::{batch_size_sweep, batch_sweep_csv, corpus_bleu_tokens, decode_corpus};
use wideffn::model::checkpoint::{load_model, save_model};
use wideffn::model::{build_model, count_params, ModelConfig, Side, SharingSpec, TransformerModel};
use wideffn::similarity::{
    collect_activations, pairwise_layer_similarity, read_activations, self_similarity, write_activations, ActivationSet,
    Metric,
};
use wideffn::training::{evaluate, ffn_dim_sweep, sweep_csv, train, Corpus};
use wideffn::{Error, Result};

use crate::config::{RunConfig, Shape};
use crate::{Command, ConfigArgs};

/// First line of every output whose numbers depend on wall-clock timing.
pub const TIMING_HEADER: &str = "# nondeterministic: timing";

const DUMP_MAGIC: &[u8; 4] = b"WFNA";

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Params {
            cfg,
            shape,
            vocab,
            d_ff_shared,
        } => {
            let mut rc = load(&cfg)?;
            if cfg.config.is_none() {
                rc.model.shape = Shape::Big;
            }
            if let Some(s) = shape {
                rc.model.shape = s;
            }
            if vocab.is_some() {
                rc.model.vocab_size = vocab;
            }
            if d_ff_shared.is_some() {
                rc.model.d_ff_shared = d_ff_shared;
            }
            cmd_params(&rc.model_config(None)?, rc.preset.as_deref().unwrap_or("custom"), out)
        }
        Command::Train {
            cfg,
            out: ckpt,
            resume,
            loss_csv,
        } => cmd_train(&load(&cfg)?, &ckpt, resume.as_deref(), loss_csv, out),
        Command::Eval { cfg, checkpoint, beam } => cmd_eval(&load(&cfg)?, &checkpoint, beam, out),
        Command::Compare {
            cfg,
            a,
            b,
            benchmarks,
            metric,
            k,
            out_dir,
        } => {
            let mut metric: Metric = metric.parse()?;
            if let Metric::Lns { k: slot } = &mut metric {
                *slot = k;
            } else if k.is_some() {
                return Err(Error::Config("--k only applies to --metric lns".into()));
            }
            cmd_compare(&cfg, &a, &b, &benchmarks, metric, &out_dir, out)
        }
        Command::Selfsim { cfg, checkpoint, out_dir } => cmd_selfsim(&load(&cfg)?, &checkpoint, &out_dir, out),
        Command::Bench {
            cfg,
            checkpoints,
            batch_sizes,
            beam,
            runs,
            out: dest,
        } => {
            let csv = cmd_bench(&load(&cfg)?, &checkpoints, &batch_sizes, beam, runs)?;
            emit(&csv, dest.as_deref(), out)
        }
        Command::Sweep {
            cfg,
            side,
            dims,
            out: dest,
        } => {
            let csv = cmd_sweep(&load(&cfg)?, side.parse()?, &dims)?;
            emit(&csv, dest.as_deref(), out)
        }
    }
}

fn load(cfg: &ConfigArgs) -> Result<RunConfig> {
    let mut rc = match &cfg.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut rc = RunConfig::default();
            rc.apply_env()?;
            rc
        }
    };
    if cfg.preset.is_some() {
        rc.preset = cfg.preset.clone();
    }
    Ok(rc)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn emit(text: &str, dest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match dest {
        Some(p) => write_file(p, text),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

#[derive(Debug, Serialize)]
struct ParamsJson<'a> {
    preset: &'a str,
    total: u64,
    baseline_total: u64,
    percent_of_baseline: f64,
    d_ff: usize,
    d_ff_shared: usize,
    breakdown: &'a BTreeMap<&'static str, u64>,
}

/// Same shape with every sublayer individual: the reference for percentages.
pub fn baseline_of(config: &ModelConfig) -> ModelConfig {
    let mut b = config.clone();
    b.sharing = SharingSpec::default();
    b.d_ff_shared = b.d_ff;
    b
}

/// Prints an aligned table followed by the same numbers as one JSON line.
pub fn cmd_params(config: &ModelConfig, label: &str, out: &mut dyn Write) -> Result<()> {
    let count = count_params(config)?;
    let base = count_params(&baseline_of(config))?;
    let pct = count.percent_of(&base);
    writeln!(out, "preset        {label}")?;
    writeln!(out, "total         {:>13} ({pct:.1}% of baseline {})", count.total, base.total)?;
    for (k, v) in &count.breakdown {
        writeln!(out, "  {k:<14}{v:>12}")?;
    }
    let json = ParamsJson {
        preset: label,
        total: count.total,
        baseline_total: base.total,
        percent_of_baseline: pct,
        d_ff: config.d_ff,
        d_ff_shared: config.d_ff_shared,
        breakdown: &count.breakdown,
    };
    writeln!(out, "{}", serde_json::to_string(&json).expect("plain data serializes"))?;
    Ok(())
}

fn data_model_config(rc: &RunConfig, corpus: &Corpus) -> Result<ModelConfig> {
    let mut c = rc.model_config(Some(corpus.vocab.len()))?;
    let needed = corpus.max_len() + 2;
    let needed = match c.architecture {
        wideffn::model::Architecture::DecoderOnly => 2 * needed,
        wideffn::model::Architecture::EncoderDecoder => needed,
    };
    if rc.model.max_len.is_none() && c.max_len < needed {
        c.max_len = needed;
    }
    Ok(c)
}

pub fn cmd_train(
    rc: &RunConfig,
    ckpt: &Path,
    resume: Option<&Path>,
    loss_csv: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<()> {
    let (train_set, heldout) = rc.corpora()?;
    let config = data_model_config(rc, &train_set)?;
    let mut model = match resume {
        Some(p) => {
            let m = load_model(p)?;
            if m.config() != &config {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    p.display()
                )));
            }
            m
        }
        None => build_model(&config, rc.seed)?,
    };
    let opts = rc.train_options();
    let report = train(&mut model, &train_set, Some(&heldout), &opts)?;
    save_model(&model, ckpt)?;
    let loss_path = loss_csv.unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", ckpt.display())));
    write_file(&loss_path, &report.loss_csv())?;
    let (loss, acc) = evaluate(&model, &heldout, opts.batch_size)?;
    writeln!(
        out,
        "trained {} steps; held-out loss {loss:.4}, token accuracy {acc:.4}",
        report.steps_run()
    )?;
    writeln!(out, "wrote {} and {}", ckpt.display(), loss_path.display())?;
    Ok(())
}

pub fn cmd_eval(rc: &RunConfig, ckpt: &Path, beam: usize, out: &mut dyn Write) -> Result<()> {
    let (_, heldout) = rc.corpora()?;
    let model = load_model(ckpt)?;
    let (loss, acc) = evaluate(&model, &heldout, rc.train.batch_size)?;
    let hyps = decode_corpus(&model, &heldout, rc.train.batch_size, beam)?;
    let refs: Vec<Vec<usize>> = heldout.pairs.iter().map(|p| p.tgt.clone()).collect();
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count() as f64 / refs.len() as f64;
    let bleu = corpus_bleu_tokens(&hyps, &refs)?;
    writeln!(out, "metric,value")?;
    writeln!(out, "loss,{loss:.6}")?;
    writeln!(out, "token_accuracy,{acc:.6}")?;
    writeln!(out, "exact_match,{exact:.6}")?;
    writeln!(out, "bleu,{bleu:.4}")?;
    Ok(())
}

fn is_dump(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut magic = [0u8; 4];
    let mut f = std::fs::File::open(path)?;
    Ok(f.read_exact(&mut magic).is_ok() && &magic == DUMP_MAGIC)
}

fn label(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

/// Activations of every available side, keyed by side name.
fn side_activations(path: &Path, rc: Option<&RunConfig>, corpus: Option<&Corpus>) -> Result<BTreeMap<String, ActivationSet>> {
    if is_dump(path)? {
        return Ok(BTreeMap::from([("activations".to_string(), read_activations(path)?)]));
    }
    let (Some(_), Some(corpus)) = (rc, corpus) else {
        return Err(Error::Config(format!(
            "{} is a checkpoint; comparing checkpoints needs --config for the corpus",
            path.display()
        )));
    };
    let model = load_model(path)?;
    let mut sides = BTreeMap::new();
    for side in sides_of(&model) {
        sides.insert(side.name().to_string(), collect_activations(&model, &label(path), corpus, side)?);
    }
    Ok(sides)
}

fn sides_of(model: &TransformerModel) -> Vec<Side> {
    if model.is_decoder_only() {
        vec![Side::Decoder]
    } else {
        vec![Side::Encoder, Side::Decoder]
    }
}

pub fn cmd_compare(
    cfg: &ConfigArgs,
    a: &Path,
    b: &Path,
    benchmarks: &[PathBuf],
    metric: Metric,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let rc = cfg.config.as_ref().map(|_| load(cfg)).transpose()?;
    let corpus = rc.as_ref().map(|r| r.corpora().map(|(_, h)| h)).transpose()?;
    let acts_a = side_activations(a, rc.as_ref(), corpus.as_ref())?;
    let acts_b = side_activations(b, rc.as_ref(), corpus.as_ref())?;
    let benches = benchmarks
        .iter()
        .map(|p| side_activations(p, rc.as_ref(), corpus.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir)?;
    let mut summary = String::from("side,metric,aggregate,normalized\n");
    for (side, sa) in &acts_a {
        let Some(sb) = acts_b.get(side) else { continue };
        if corpus.is_some() {
            write_activations(&out_dir.join(format!("{}.{side}.acts", label(a))), sa)?;
            write_activations(&out_dir.join(format!("{}.{side}.acts", label(b))), sb)?;
        }
        let mut report = pairwise_layer_similarity(sa, sb, metric)?;
        let raws = benches
            .iter()
            .filter_map(|bm| bm.get(side))
            .map(|bm| pairwise_layer_similarity(sa, bm, metric).map(|r| r.aggregate))
            .collect::<Result<Vec<_>>>()?;
        if !raws.is_empty() {
            report.normalize(&raws)?;
        }
        write_file(&out_dir.join(format!("compare.{side}.csv")), &report.heatmap.to_csv())?;
        let normalized = report.normalized.map(|n| format!("{n:.2}")).unwrap_or_default();
        summary.push_str(&format!("{side},{metric},{:.6},{normalized}\n", report.aggregate));
    }
    if summary.lines().count() == 1 {
        return Err(Error::Data("the two inputs share no comparable side".into()));
    }
    write_file(&out_dir.join("summary.csv"), &summary)?;
    out.write_all(summary.as_bytes())?;
    Ok(())
}

pub fn cmd_selfsim(rc: &RunConfig, ckpt: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let (_, heldout) = rc.corpora()?;
    let model = load_model(ckpt)?;
    for side in sides_of(&model) {
        let acts = collect_activations(&model, &label(ckpt), &heldout, side)?;
        let path = out_dir.join(format!("selfsim.{}.csv", side.name()));
        write_file(&path, &self_similarity(&acts)?.to_csv())?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(())
}

/// Timing table, prefixed by [`TIMING_HEADER`].
pub fn cmd_bench(rc: &RunConfig, checkpoints: &[PathBuf], batch_sizes: &[usize], beam: usize, runs: usize) -> Result<String> {
    let (_, heldout) = rc.corpora()?;
    let models = checkpoints.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let mut labels: Vec<String> = checkpoints.iter().map(|p| label(p)).collect();
    for i in 0..labels.len() {
        if labels[..i].contains(&labels[i]) {
            labels[i] = format!("{}#{i}", labels[i]);
        }
    }
    let pairs: Vec<(&str, &TransformerModel)> = labels.iter().map(String::as_str).zip(&models).collect();
    let rows = batch_size_sweep(&pairs, batch_sizes, &heldout, beam, runs)?;
    Ok(format!("{TIMING_HEADER}\n{}", batch_sweep_csv(&rows)))
}

pub fn cmd_sweep(rc: &RunConfig, side: Side, dims: &[usize]) -> Result<String> {
    let (train_set, heldout) = rc.corpora()?;
    let base = data_model_config(rc, &train_set)?;
    let rows = ffn_dim_sweep(side, dims, &base, &train_set, &heldout, &rc.train_options())?;
    Ok(sweep_csv(&rows))
}
