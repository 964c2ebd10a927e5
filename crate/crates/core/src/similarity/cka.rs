use crate::error::{Error, Result};

/// Dense row-major `f64` matrix; rows are sentences, columns features.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "matrix rows",
                lhs: vec![rows.len(), cols],
                rhs: rows.iter().map(Vec::len).collect(),
            });
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Subtracts each column's mean over rows.
    pub fn centered(&self) -> Matrix {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= self.rows as f64);
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, m) in out.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }

    /// `selfᵀ · other`, `cols × other.cols`.
    fn gram_t(&self, other: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * other.cols];
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut out[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        out
    }
}

fn frobenius_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Linear CKA between two representations of the same `n` sentences:
/// `‖AᵀB‖²_F / (‖AᵀA‖_F ‖BᵀB‖_F)` on column-centered `A`, `B`.
///
/// Returns 0 when either centered matrix is all zeros.
pub fn linear_cka(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "linear_cka",
            lhs: vec![a.rows, a.cols],
            rhs: vec![b.rows, b.cols],
        });
    }
    if a.rows < 2 {
        return Err(Error::Precondition("CKA needs at least two rows".into()));
    }
    let (a, b) = (a.centered(), b.centered());
    let ab = frobenius_sq(&a.gram_t(&b));
    let aa = frobenius_sq(&a.gram_t(&a)).sqrt();
    let bb = frobenius_sq(&b.gram_t(&b)).sqrt();
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok(ab / (aa * bb))
}
