use super::corpus::Corpus;
use super::trainer::{token_accuracy, train, TrainOptions};
use crate::error::{Error, Result};
use crate::model::{build_model, count_params, FfnSharing, ModelConfig, Side};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub d_ff: usize,
    pub side: Side,
    pub token_accuracy: f64,
    pub params: u64,
}

impl SweepRow {
    /// Width 0 removes the side's FFN sublayers.
    pub fn noop(&self) -> bool {
        self.d_ff == 0
    }
}

/// `base` with only `side`'s per-layer FFN width set to `d_ff`.
pub fn with_side_width(base: &ModelConfig, side: Side, d_ff: usize) -> Result<ModelConfig> {
    if base.ffn_sharing(side) != FfnSharing::Individual {
        return Err(Error::config(format!(
            "the FFN width sweep needs individual {} FFNs, found {}",
            side.name(),
            base.ffn_sharing(side)
        )));
    }
    let mut c = base.clone();
    match side {
        Side::Encoder => c.enc_d_ff = Some(d_ff),
        Side::Decoder => c.dec_d_ff = Some(d_ff),
    }
    c.validate()?;
    Ok(c)
}

/// Trains one model per width in `dims`, each from the same seed, and
/// reports held-out token accuracy.
pub fn ffn_dim_sweep(
    side: Side,
    dims: &[usize],
    base: &ModelConfig,
    train_set: &Corpus,
    eval_set: &Corpus,
    opts: &TrainOptions,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(dims.len());
    for &d_ff in dims {
        let config = with_side_width(base, side, d_ff)?;
        let mut model = build_model(&config, opts.seed)?;
        train(&mut model, train_set, None, opts)?;
        rows.push(SweepRow {
            d_ff,
            side,
            token_accuracy: token_accuracy(&model, eval_set, opts.batch_size)?,
            params: count_params(&config)?.total,
        });
        log::info!("{} d_ff={d_ff}: accuracy {:.4}", side.name(), rows.last().unwrap().token_accuracy);
    }
    Ok(rows)
}

/// `d_ff,side,token_accuracy,params,noop`
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("d_ff,side,token_accuracy,params,noop\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            r.d_ff,
            r.side.name(),
            r.token_accuracy,
            r.params,
            r.noop()
        ));
    }
    s
}
