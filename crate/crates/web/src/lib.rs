//! Browser demo over the core library. Each operation has a plain Rust
//! entry point returning JSON (tested natively) and a thin wasm wrapper.

use serde::Serialize;
use wasm_bindgen::prelude::*;
use wideffn::model::{build_model, count_params, FfnSharing, ModelConfig, Preset, Side};
use wideffn::similarity::{collect_activations, self_similarity};
use wideffn::training::{generate_toy_task, train, Schedule, ToyTask, TrainOptions};

/// Heatmap requests train for at most this many steps so the page stays
/// responsive.
pub const MAX_DEMO_STEPS: u64 = 300;

#[derive(Serialize)]
struct PresetRow {
    preset: &'static str,
    total: u64,
    percent_of_baseline: f64,
    d_ff_shared: usize,
}

fn shape(name: &str, vocab: usize) -> Result<ModelConfig, String> {
    match name {
        "big" => Ok(ModelConfig::transformer_big(vocab)),
        "base" => Ok(ModelConfig::transformer_base(vocab)),
        "deep-enc-shallow-dec" => Ok(ModelConfig::deep_enc_shallow_dec(vocab)),
        _ => Err(format!("unknown shape `{name}` (big|base|deep-enc-shallow-dec)")),
    }
}

/// Parameter count of every encoder-decoder preset as a share of the
/// same-shape baseline. `d_ff_shared` widens the shared FFNs; OneWideFFN
/// always uses its own width.
pub fn preset_table(shape_name: &str, vocab: usize, d_ff_shared: Option<usize>) -> Result<String, String> {
    let mut base = shape(shape_name, vocab)?;
    let baseline = count_params(&base).map_err(|e| e.to_string())?;
    if let Some(w) = d_ff_shared {
        base.d_ff_shared = w;
    }
    let mut rows = Vec::new();
    for p in Preset::ALL {
        let c = p.apply(&base).map_err(|e| e.to_string())?;
        let count = count_params(&c).map_err(|e| e.to_string())?;
        rows.push(PresetRow {
            preset: p.name(),
            total: count.total,
            percent_of_baseline: count.percent_of(&baseline),
            d_ff_shared: c.d_ff_shared,
        });
    }
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

/// Physical FFN index per layer, e.g. `cycle:3` over 6 layers.
pub fn assignment(strategy: &str, layers: usize) -> Result<String, String> {
    let s: FfnSharing = strategy.parse().map_err(|e: wideffn::Error| e.to_string())?;
    let a = s.layer_assignment(layers).map_err(|e| e.to_string())?;
    serde_json::to_string(&a).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct HeatmapJson {
    labels: Vec<String>,
    values: Vec<Vec<f64>>,
}

/// CKA self-similarity of one side's module outputs for a tiny 2+2 model
/// trained `steps` steps on the copy task.
pub fn self_similarity_heatmap(preset: &str, side: &str, steps: u64, seed: u64) -> Result<String, String> {
    if steps > MAX_DEMO_STEPS {
        return Err(format!("at most {MAX_DEMO_STEPS} steps in the demo"));
    }
    let preset: Preset = preset.parse().map_err(|e: wideffn::Error| e.to_string())?;
    let side: Side = side.parse().map_err(|e: wideffn::Error| e.to_string())?;
    let c = preset.apply(&ModelConfig::tiny(2, 2, 16, 2, 12)).map_err(|e| e.to_string())?;
    let mut model = build_model(&c, seed).map_err(|e| e.to_string())?;
    let corpus = generate_toy_task(ToyTask::Copy, 200, 1..=6, 12, seed).map_err(|e| e.to_string())?;
    let (train_set, probe) = corpus.split_at(160);
    let opts = TrainOptions {
        steps,
        batch_size: 16,
        seed,
        schedule: Schedule {
            base_lr: 3e-3,
            warmup_steps: 20,
        },
        ..TrainOptions::default()
    };
    train(&mut model, &train_set, None, &opts).map_err(|e| e.to_string())?;
    let acts = collect_activations(&model, preset.name(), &probe, side).map_err(|e| e.to_string())?;
    let h = self_similarity(&acts).map_err(|e| e.to_string())?;
    serde_json::to_string(&HeatmapJson {
        labels: h.row_labels,
        values: h.values,
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = presetTable)]
pub fn preset_table_js(shape_name: &str, vocab: usize, d_ff_shared: Option<usize>) -> Result<String, JsError> {
    preset_table(shape_name, vocab, d_ff_shared).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = assignment)]
pub fn assignment_js(strategy: &str, layers: usize) -> Result<String, JsError> {
    assignment(strategy, layers).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = selfSimilarity)]
pub fn self_similarity_js(preset: &str, side: &str, steps: u32, seed: u32) -> Result<String, JsError> {
    self_similarity_heatmap(preset, side, steps as u64, seed as u64).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_table_has_every_preset_and_a_full_baseline() {
        let rows: Vec<serde_json::Value> = serde_json::from_str(&preset_table("big", 32_000, None).unwrap()).unwrap();
        assert_eq!(rows.len(), Preset::ALL.len());
        let baseline = rows.iter().find(|r| r["preset"] == "baseline").unwrap();
        assert_eq!(baseline["percent_of_baseline"], 100.0);
        let wide = rows.iter().find(|r| r["preset"] == "OneWideFFN").unwrap();
        assert_eq!(wide["d_ff_shared"], 49_152);
        assert!(preset_table("huge", 32_000, None).unwrap_err().contains("unknown shape"));
    }

    #[test]
    fn shared_width_override_grows_shared_presets_only() {
        let parse = |s: String| -> Vec<serde_json::Value> { serde_json::from_str(&s).unwrap() };
        let plain = parse(preset_table("base", 32_000, None).unwrap());
        let wide = parse(preset_table("base", 32_000, Some(8192)).unwrap());
        let pct = |rows: &[serde_json::Value], p: &str| {
            rows.iter().find(|r| r["preset"] == p).unwrap()["percent_of_baseline"].as_f64().unwrap()
        };
        assert!(pct(&wide, "SharedEnc") > pct(&plain, "SharedEnc"));
        assert_eq!(pct(&wide, "NoEnc"), pct(&plain, "NoEnc"));
    }

    #[test]
    fn assignments_render_as_json() {
        assert_eq!(assignment("cycle-rev:3", 6).unwrap(), "[0,1,2,2,1,0]");
        assert_eq!(assignment("noop", 6).unwrap(), "null");
        assert!(assignment("cycle:4", 6).is_err());
        assert!(assignment("zigzag", 6).is_err());
    }

    #[test]
    fn heatmap_is_square_with_unit_diagonal() {
        let h: serde_json::Value =
            serde_json::from_str(&self_similarity_heatmap("NoDec", "decoder", 10, 1).unwrap()).unwrap();
        let labels = h["labels"].as_array().unwrap();
        assert_eq!(labels.len(), 4);
        assert!(labels.iter().all(|l| !l.as_str().unwrap().ends_with("ffn")));
        for (i, row) in h["values"].as_array().unwrap().iter().enumerate() {
            assert_eq!(row[i], 1.0);
        }
        assert!(self_similarity_heatmap("baseline", "encoder", MAX_DEMO_STEPS + 1, 1).is_err());
    }
}
