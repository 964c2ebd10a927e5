use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use super::activations::{ActivationMatrix, ActivationSet};
use super::cka::{linear_cka, Matrix};
use super::neighbors::lns;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cka,
    /// `k = None` uses 5% of the sentences.
    Lns { k: Option<usize> },
}

impl Metric {
    pub fn score(self, a: &Matrix, b: &Matrix) -> Result<f64> {
        match self {
            Metric::Cka => linear_cka(a, b),
            Metric::Lns { k } => lns(a, b, k),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cka" => Ok(Metric::Cka),
            "lns" => Ok(Metric::Lns { k: None }),
            _ => Err(Error::config(format!("unknown metric `{s}` (cka|lns)"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cka => "CKA",
            Metric::Lns { .. } => "LNS",
        })
    }
}

/// Labeled score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    /// Header row of column labels, then one labeled row per module.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("module");
        for c in &self.col_labels {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            s.push_str(label);
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub metric: Metric,
    pub heatmap: Heatmap,
    /// Corresponding module pairs the aggregate averages over.
    pub matched: Vec<(String, String)>,
    pub aggregate: f64,
    /// `aggregate` as a percentage of a benchmark mean, once normalized.
    pub normalized: Option<f64>,
}

impl SimilarityReport {
    pub fn normalize(&mut self, benchmark_raws: &[f64]) -> Result<f64> {
        let v = normalize_against_benchmark(self.aggregate, benchmark_raws)?;
        self.normalized = Some(v);
        Ok(v)
    }
}

fn layer_of(tap: &str) -> &str {
    tap.split('.').next().unwrap_or(tap)
}

/// Last tap of every layer: the layer's final output.
fn layer_outputs(set: &ActivationSet) -> IndexMap<&str, &str> {
    let mut out = IndexMap::new();
    for name in set.keys() {
        out.insert(layer_of(name), name.as_str());
    }
    out
}

fn check_corpus(a: &ActivationSet, b: &ActivationSet) -> Result<()> {
    let mut hashes = a.values().chain(b.values()).map(|m| &m.corpus_hash);
    if let Some(first) = hashes.next() {
        if hashes.any(|h| h != first) {
            return Err(Error::data("activations were collected on different corpora"));
        }
    }
    Ok(())
}

/// Corresponding module pairs: identical tap names when both models have
/// the same modules, otherwise each layer's final output.
fn correspondences(a: &ActivationSet, b: &ActivationSet) -> Result<Vec<(String, String)>> {
    if a.len() == b.len() && a.keys().all(|k| b.contains_key(k)) {
        return Ok(a.keys().map(|k| (k.clone(), k.clone())).collect());
    }
    let (la, lb) = (layer_outputs(a), layer_outputs(b));
    if la.len() == lb.len() {
        return Ok(la
            .values()
            .zip(lb.values())
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect());
    }
    let shared: Vec<_> = a.keys().filter(|k| b.contains_key(*k)).map(|k| (k.clone(), k.clone())).collect();
    if shared.is_empty() {
        return Err(Error::Precondition(format!(
            "no common modules and layer counts differ ({} vs {})",
            la.len(),
            lb.len()
        )));
    }
    Ok(shared)
}

/// Scores every module of `a` against every module of `b`; the aggregate
/// is the mean over corresponding modules.
pub fn pairwise_layer_similarity(a: &ActivationSet, b: &ActivationSet, metric: Metric) -> Result<SimilarityReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("empty activation set".into()));
    }
    check_corpus(a, b)?;
    let matched = correspondences(a, b)?;
    let ma: Vec<Matrix> = a.values().map(ActivationMatrix::to_matrix).collect();
    let mb: Vec<Matrix> = b.values().map(ActivationMatrix::to_matrix).collect();
    let values = ma
        .iter()
        .map(|x| mb.iter().map(|y| metric.score(x, y)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    for (x, y) in &matched {
        sum += values[a.get_index_of(x).expect("matched tap")][b.get_index_of(y).expect("matched tap")];
    }
    Ok(SimilarityReport {
        metric,
        heatmap: Heatmap {
            row_labels: a.keys().cloned().collect(),
            col_labels: b.keys().cloned().collect(),
            values,
        },
        aggregate: sum / matched.len() as f64,
        matched,
        normalized: None,
    })
}

/// Symmetric CKA matrix among one model's module outputs.
pub fn self_similarity(taps: &ActivationSet) -> Result<Heatmap> {
    if taps.len() < 2 {
        return Err(Error::Precondition("self-similarity needs at least two taps".into()));
    }
    let m: Vec<Matrix> = taps.values().map(ActivationMatrix::to_matrix).collect();
    let mut values = vec![vec![0.0; m.len()]; m.len()];
    for i in 0..m.len() {
        values[i][i] = 1.0;
        for j in 0..i {
            let v = linear_cka(&m[i], &m[j])?;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let labels: Vec<String> = taps.keys().cloned().collect();
    Ok(Heatmap {
        row_labels: labels.clone(),
        col_labels: labels,
        values,
    })
}

/// `100 · raw / mean(benchmark_raws)`.
pub fn normalize_against_benchmark(raw: f64, benchmark_raws: &[f64]) -> Result<f64> {
    if benchmark_raws.is_empty() {
        return Err(Error::Precondition("no benchmark scores".into()));
    }
    let mean = benchmark_raws.iter().sum::<f64>() / benchmark_raws.len() as f64;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::numeric(format!("benchmark mean {mean} cannot normalize")));
    }
    Ok(100.0 * raw / mean)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(names: &[&str], seed: u64, hash: &str) -> ActivationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        names
            .iter()
            .map(|&n| {
                let m = ActivationMatrix {
                    module_name: n.into(),
                    model_id: "m".into(),
                    corpus_hash: hash.into(),
                    n: 30,
                    d: 4,
                    values: (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                };
                (n.to_string(), m)
            })
            .collect()
    }

    const BASE: [&str; 4] = ["0.sa", "0.ffn", "1.sa", "1.ffn"];

    #[test]
    fn same_model_has_unit_diagonal() {
        let a = set(&BASE, 1, "h");
        let r = pairwise_layer_similarity(&a, &a, Metric::Cka).unwrap();
        assert_eq!(r.heatmap.values.len(), 4);
        for i in 0..4 {
            assert!((r.heatmap.values[i][i] - 1.0).abs() < 1e-9);
        }
        assert!((r.aggregate - 1.0).abs() < 1e-9);
        let l = pairwise_layer_similarity(&a, &a, Metric::Lns { k: Some(3) }).unwrap();
        assert_eq!(l.aggregate, 1.0);
    }

    #[test]
    fn aggregate_is_mean_of_matched_diagonal() {
        let (a, b) = (set(&BASE, 1, "h"), set(&BASE, 2, "h"));
        let r = pairwise_layer_similarity(&a, &b, Metric::Cka).unwrap();
        let m = |s: &ActivationSet, k: &str| s[k].to_matrix();
        let hand: f64 = BASE.iter().map(|k| linear_cka(&m(&a, k), &m(&b, k)).unwrap()).sum::<f64>() / 4.0;
        assert!((r.aggregate - hand).abs() < 1e-12);
    }

    #[test]
    fn differing_modules_compare_layer_outputs() {
        let (a, b) = (set(&BASE, 1, "h"), set(&["0.sa", "1.sa"], 2, "h"));
        let r = pairwise_layer_similarity(&a, &b, Metric::Cka).unwrap();
        assert_eq!((r.heatmap.values.len(), r.heatmap.values[0].len()), (4, 2));
        let pairs: Vec<(&str, &str)> = r.matched.iter().map(|(x, y)| (x.as_str(), y.as_str())).collect();
        assert_eq!(pairs, [("0.ffn", "0.sa"), ("1.ffn", "1.sa")]);
    }

    #[test]
    fn incomparable_sets_error() {
        let a = set(&BASE, 1, "h");
        assert!(pairwise_layer_similarity(&a, &set(&["5.x"], 2, "h"), Metric::Cka).is_err());
        assert!(pairwise_layer_similarity(&a, &set(&BASE, 2, "other"), Metric::Cka).is_err());
    }

    #[test]
    fn self_similarity_is_symmetric_with_unit_diagonal() {
        let mut a = set(&BASE, 3, "h");
        let dup = ActivationMatrix {
            module_name: "1.dup".into(),
            ..a["1.ffn"].clone()
        };
        a.insert("1.dup".into(), dup);
        let h = self_similarity(&a).unwrap();
        for i in 0..5 {
            assert!((h.values[i][i] - 1.0).abs() < 1e-9);
            for j in 0..5 {
                assert!((h.values[i][j] - h.values[j][i]).abs() < 1e-9);
            }
        }
        assert!((h.values[3][4] - 1.0).abs() < 1e-9);
        assert!(self_similarity(&set(&["0.sa"], 1, "h")).is_err());
    }

    #[test]
    fn heatmap_csv_layout() {
        let h = Heatmap {
            row_labels: vec!["0.sa".into()],
            col_labels: vec!["0.sa".into(), "0.ffn".into()],
            values: vec![vec![1.0, 0.25]],
        };
        assert_eq!(h.to_csv(), "module,0.sa,0.ffn\n0.sa,1.000000,0.250000\n");
    }

    #[test]
    fn benchmark_normalization() {
        assert_eq!(normalize_against_benchmark(0.8, &[0.8]).unwrap(), 100.0);
        let v = normalize_against_benchmark(0.94, &[0.95, 0.97]).unwrap();
        assert!((v - 97.917).abs() < 1e-3);
        assert!(normalize_against_benchmark(0.99, &[0.9, 0.92]).unwrap() > 100.0);
        assert!(normalize_against_benchmark(0.5, &[]).is_err());
        assert!(normalize_against_benchmark(0.5, &[0.0]).is_err());
    }
}
