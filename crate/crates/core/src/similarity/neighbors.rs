use std::collections::BTreeSet;

use super::cka::Matrix;
use crate::error::{Error, Result};

/// Default neighborhood size: 5% of the sentences, rounded up, at least 1.
pub fn default_k(n: usize) -> usize {
    n.div_ceil(20).max(1)
}

fn norms(space: &Matrix) -> Vec<f64> {
    (0..space.rows)
        .map(|r| space.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
fn cosine_distance(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (na * nb)
}

fn knn_with_norms(space: &Matrix, norms: &[f64], query: usize, k: usize) -> Vec<usize> {
    let q = space.row(query);
    let mut dist: Vec<(f64, usize)> = (0..space.rows)
        .filter(|&j| j != query)
        .map(|j| (cosine_distance(q, space.row(j), norms[query], norms[j]), j))
        .collect();
    // Stable order: distance, then lower index.
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist.truncate(k);
    dist.into_iter().map(|(_, j)| j).collect()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::Precondition(format!("k must be in 1..{n}, got {k}")));
    }
    Ok(())
}

/// The `k` rows nearest to `query` by cosine distance, excluding `query`
/// itself, nearest first. Ties go to the lower row index.
pub fn knn(space: &Matrix, query: usize, k: usize) -> Result<Vec<usize>> {
    check_k(space.rows, k)?;
    if query >= space.rows {
        return Err(Error::Index {
            what: "knn query",
            index: query,
            bound: space.rows,
        });
    }
    Ok(knn_with_norms(space, &norms(space), query, k))
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Local neighborhood similarity: the mean Jaccard overlap of each
/// sentence's k-NN sets in the two spaces. Rows must describe the same
/// sentences in the same order. `k` defaults to [`default_k`].
pub fn lns(space1: &Matrix, space2: &Matrix, k: Option<usize>) -> Result<f64> {
    if space1.rows != space2.rows {
        return Err(Error::Shape {
            op: "lns",
            lhs: vec![space1.rows, space1.cols],
            rhs: vec![space2.rows, space2.cols],
        });
    }
    let n = space1.rows;
    let k = k.unwrap_or_else(|| default_k(n));
    check_k(n, k)?;
    let (n1, n2) = (norms(space1), norms(space2));
    let zero_rows = n1.iter().chain(&n2).filter(|&&v| v == 0.0).count();
    if zero_rows > 0 {
        log::warn!("{zero_rows} zero activation rows; their cosine distance is taken as 1");
    }
    let total: f64 = (0..n)
        .map(|s| jaccard(&knn_with_norms(space1, &n1, s, k), &knn_with_norms(space2, &n2, s, k)))
        .sum();
    Ok(total / n as f64)
}
