use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam with bias correction. Moments are keyed by physical tensor name,
/// so a tied tensor has a single moment pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Names with moment state, in sorted order.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Applies one update from each tensor's stored gradient. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, lr: f32) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient {} at {name}[{i}]; step aborted",
                        g[i]
                    )));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (name, tensor) in params.iter_mut() {
            let Some(g) = tensor.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let data = tensor.data_mut();
            for i in 0..g.len() {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g[i];
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let denom = mom.v[i].sqrt() / bc2_sqrt + self.eps;
                data[i] -= step_size * mom.m[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use indexmap::IndexMap;

    use super::*;
    use crate::numeric::Tensor;

    fn scalar_store(w: f32) -> ParamStore {
        let tensors = IndexMap::from([("w".to_string(), Tensor::new(vec![1], vec![w]).unwrap())]);
        ParamStore::from_parts(tensors, BTreeMap::new()).unwrap()
    }

    fn set_grad(s: &mut ParamStore, g: f32) {
        s.set_grads(&BTreeMap::from([("w".to_string(), vec![g])])).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        set_grad(&mut s, 0.0);
        Adam::default().step(&mut s, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.3f32, -7.0] {
            let mut s = scalar_store(0.0);
            set_grad(&mut s, g);
            Adam::default().step(&mut s, 0.01).unwrap();
            let moved = s.get("w").unwrap().data()[0];
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn descends_a_quadratic() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::default();
        let loss = |w: f32| (w - 3.0) * (w - 3.0);
        let mut prev = loss(0.0);
        for _ in 0..10 {
            let w = s.get("w").unwrap().data()[0];
            set_grad(&mut s, 2.0 * (w - 3.0));
            adam.step(&mut s, 0.1).unwrap();
            let now = loss(s.get("w").unwrap().data()[0]);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = scalar_store(1.0);
        set_grad(&mut s, f32::NAN);
        let mut adam = Adam::default();
        assert!(matches!(adam.step(&mut s, 0.1), Err(Error::Numeric(_))));
        assert_eq!(s.get("w").unwrap().data()[0], 1.0);
        assert_eq!(adam.steps(), 0);
    }
}
