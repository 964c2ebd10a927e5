use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, mutable access to a set of parameter tensors.
pub trait Parameters {
    fn parameter_names(&self) -> Vec<String>;
    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl Parameters for BTreeMap<String, Tensor> {
    fn parameter_names(&self) -> Vec<String> {
        self.keys().cloned().collect()
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

/// Which coordinates to probe.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub eps: f32,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

/// Compares `analytic` gradients against central finite differences of
/// `loss_fn` and returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over the probed coordinates.
///
/// `analytic` maps parameter name to a gradient of that tensor's length.
/// Parameters absent from `analytic` are treated as having zero gradient.
/// When `skip` returns true for `(name, index)` that coordinate is left out
/// (used to avoid ReLU kinks).
pub fn grad_check<P, F, S>(
    params: &mut P,
    analytic: &BTreeMap<String, Vec<f32>>,
    opts: &GradCheckOptions,
    mut loss_fn: F,
    skip: S,
) -> Result<f64>
where
    P: Parameters,
    F: FnMut(&P) -> Result<f64>,
    S: FnMut(&str, usize) -> bool,
{
    grad_check_piecewise(params, analytic, opts, |p| loss_fn(p).map(|l| (l, ())), skip)
        .map(|r| r.max_rel_error)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose probes left the linear piece of the base point.
    pub straddled: usize,
}

/// [`grad_check`] for piecewise-smooth losses: `loss_fn` also returns an
/// identifier of the smooth piece it evaluated on, and a coordinate is
/// skipped when either probe lands on a different piece than the
/// unperturbed parameters.
pub fn grad_check_piecewise<P, F, S, R>(
    params: &mut P,
    analytic: &BTreeMap<String, Vec<f32>>,
    opts: &GradCheckOptions,
    mut loss_fn: F,
    mut skip: S,
) -> Result<GradCheckReport>
where
    P: Parameters,
    F: FnMut(&P) -> Result<(f64, R)>,
    S: FnMut(&str, usize) -> bool,
    R: PartialEq,
{
    let (_, base_piece) = loss_fn(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for name in params.parameter_names() {
        let numel = params
            .parameter_mut(&name)
            .map(|t| t.numel())
            .unwrap_or_default();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(c) if c < numel => sample(&mut rng, numel, c).into_vec(),
            _ => (0..numel).collect(),
        };
        for idx in coords {
            if skip(&name, idx) {
                continue;
            }
            let original = params.parameter_mut(&name).expect("listed").data()[idx];
            let plus = original + opts.eps;
            let minus = original - opts.eps;
            params.parameter_mut(&name).expect("listed").data_mut()[idx] = plus;
            let (f_plus, piece_plus) = loss_fn(params)?;
            params.parameter_mut(&name).expect("listed").data_mut()[idx] = minus;
            let (f_minus, piece_minus) = loss_fn(params)?;
            params.parameter_mut(&name).expect("listed").data_mut()[idx] = original;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss while probing {name}[{idx}]: {f_plus} / {f_minus}"
                )));
            }
            if piece_plus != base_piece || piece_minus != base_piece {
                report.straddled += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (plus as f64 - minus as f64);
            let a = analytic.get(&name).map_or(0.0, |g| g[idx] as f64);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;

    fn store(values: &[f32]) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(
            "w".to_string(),
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        );
        m
    }

    fn quadratic(p: &BTreeMap<String, Tensor>) -> Result<f64> {
        Ok(p["w"].data().iter().map(|&v| v as f64 * v as f64).sum())
    }

    #[test]
    fn quadratic_is_exact() {
        let mut p = store(&[0.5, -1.25, 2.0, 0.0]);
        let mut tape = Tape::new();
        let w = tape.param(&p["w"]);
        let loss = tape.sum_squares(w);
        let g = tape.backward(loss).unwrap().get(w).unwrap().to_vec();
        drop(tape);
        let analytic = BTreeMap::from([("w".to_string(), g)]);
        let err = grad_check(
            &mut p,
            &analytic,
            &GradCheckOptions::default(),
            quadratic,
            |_, _| false,
        )
        .unwrap();
        assert!(err < 1e-6, "quadratic error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut p = store(&[0.0; 3]);
        let analytic = BTreeMap::from([("w".to_string(), vec![0.0; 3])]);
        let err = grad_check(
            &mut p,
            &analytic,
            &GradCheckOptions::default(),
            |_| Ok(7.0),
            |_, _| false,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut p = store(&[1.0]);
        let err = grad_check(
            &mut p,
            &BTreeMap::new(),
            &GradCheckOptions::default(),
            |_| Ok(f64::NAN),
            |_, _| false,
        );
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn straddled_coordinates_are_skipped() {
        // |w| has a kink at 0; the probe at w = 1e-4 straddles it.
        let mut p = store(&[1e-4, 2.0]);
        let analytic = BTreeMap::from([("w".to_string(), vec![1.0, 1.0])]);
        let report = grad_check_piecewise(
            &mut p,
            &analytic,
            &GradCheckOptions::default(),
            |p| {
                let w = p["w"].data();
                Ok((w.iter().map(|v| v.abs() as f64).sum(), w.iter().map(|&v| v > 0.0).collect::<Vec<_>>()))
            },
            |_, _| false,
        )
        .unwrap();
        assert_eq!(report.straddled, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = store(&[1.0, 2.0]);
        let analytic = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        let err = grad_check(
            &mut p,
            &analytic,
            &GradCheckOptions::default(),
            quadratic,
            |_, _| false,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
