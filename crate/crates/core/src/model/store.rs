use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::plan::{Init, ParamPlan};
use crate::error::{Error, Result};
use crate::numeric::{Parameters, Tensor};

/// Physical parameter tensors plus the logical-to-physical alias table.
///
/// Every logical site resolves to exactly one physical tensor; tied sites
/// share storage, so an update through one name is visible through all.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
    aliases: BTreeMap<String, String>,
}

impl ParamStore {
    /// Validates that every alias targets a physical tensor and that no
    /// logical name shadows a physical one.
    pub fn from_parts(tensors: IndexMap<String, Tensor>, aliases: BTreeMap<String, String>) -> Result<Self> {
        for (logical, physical) in &aliases {
            if !tensors.contains_key(physical) {
                return Err(Error::Format(format!(
                    "alias {logical} points at missing tensor {physical}"
                )));
            }
            if tensors.contains_key(logical) {
                return Err(Error::Format(format!("alias {logical} shadows a physical tensor")));
            }
        }
        Ok(ParamStore { tensors, aliases })
    }

    /// Draws every planned tensor in plan order from a seeded stream.
    pub fn initialize(plan: &ParamPlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::with_capacity(plan.tensors.len());
        for t in &plan.tensors {
            let data = match t.init {
                Init::Zeros => vec![0.0; t.numel()],
                Init::Ones => vec![1.0; t.numel()],
                Init::Xavier => {
                    let bound = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt() as f32;
                    (0..t.numel()).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
            };
            let tensor = Tensor::new(t.shape.clone(), data).expect("planned shapes are valid");
            tensors.insert(t.name.clone(), tensor);
        }
        ParamStore {
            tensors,
            aliases: plan.aliases.clone(),
        }
    }

    /// Physical name for a logical or physical `name`.
    pub fn resolve<'a>(&'a self, name: &'a str) -> Result<&'a str> {
        if let Some((k, _)) = self.tensors.get_key_value(name) {
            return Ok(k);
        }
        self.aliases
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Precondition(format!("unknown parameter {name}")))
    }

    /// Physical name and tensor for a logical or physical `name`.
    pub fn entry(&self, name: &str) -> Result<(&str, &Tensor)> {
        let physical = match self.aliases.get(name) {
            Some(p) => p.as_str(),
            None => name,
        };
        self.tensors
            .get_key_value(physical)
            .map(|(k, v)| (k.as_str(), v))
            .ok_or_else(|| Error::Precondition(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let physical = self.aliases.get(name).cloned().unwrap_or_else(|| name.to_string());
        self.tensors
            .get_mut(&physical)
            .ok_or_else(|| Error::Precondition(format!("unknown parameter {name}")))
    }

    /// True when both names resolve to the same physical tensor.
    pub fn shares_storage(&self, a: &str, b: &str) -> Result<bool> {
        Ok(self.resolve(a)? == self.resolve(b)?)
    }

    /// Physical tensors in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    /// Errors unless names, order, shapes and aliases equal `plan`'s.
    pub fn check_plan(&self, plan: &ParamPlan) -> Result<()> {
        if self.tensors.len() != plan.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                plan.tensors.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), p) in self.tensors.iter().zip(&plan.tensors) {
            if *name != p.name || t.shape() != p.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match planned {} {:?}",
                    t.shape(),
                    p.name,
                    p.shape
                )));
            }
        }
        if self.aliases != plan.aliases {
            return Err(Error::Format("alias table does not match the configuration".into()));
        }
        Ok(())
    }

    /// Replaces every physical tensor's gradient with `grads[name]`
    /// (zeros when absent).
    pub fn set_grads(&mut self, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            t.zero_grad();
            if let Some(g) = grads.get(name) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl Parameters for ParamStore {
    fn parameter_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, Preset};

    fn store(preset: Preset) -> ParamStore {
        let c = preset.apply(&ModelConfig::tiny(3, 2, 8, 2, 12)).unwrap();
        ParamStore::initialize(&ParamPlan::for_config(&c).unwrap(), 7)
    }

    #[test]
    fn writes_through_one_alias_are_seen_by_all() {
        let mut s = store(Preset::SharedEnc);
        s.get_mut("encoder.layers.0.ffn.w1").unwrap().data_mut()[3] = 42.0;
        for i in 0..3 {
            assert_eq!(s.get(&format!("encoder.layers.{i}.ffn.w1")).unwrap().data()[3], 42.0);
        }
        assert!(s.shares_storage("encoder.embed_tokens", "decoder.output_projection").unwrap());
        assert!(!s.shares_storage("decoder.layers.0.ffn.w1", "decoder.layers.1.ffn.w1").unwrap());
    }

    #[test]
    fn initialization_is_seeded() {
        assert_eq!(store(Preset::Baseline), store(Preset::Baseline));
        let c = ModelConfig::tiny(1, 1, 8, 2, 12);
        let plan = ParamPlan::for_config(&c).unwrap();
        assert_ne!(ParamStore::initialize(&plan, 1), ParamStore::initialize(&plan, 2));
    }

    #[test]
    fn init_kinds() {
        let s = store(Preset::Baseline);
        assert!(s.get("encoder.layers.0.ffn.b1").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.get("encoder.layers.0.ffn.ln_gain").unwrap().data().iter().all(|&v| v == 1.0));
        let w = s.get("encoder.layers.0.self_attn.wq").unwrap();
        let bound = (6.0f32 / 16.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unknown_names_and_bad_aliases_fail() {
        let s = store(Preset::NoDec);
        assert!(s.get("decoder.layers.0.ffn.w1").is_err());
        let tensors = IndexMap::from([("a".to_string(), Tensor::zeros(&[1]))]);
        let bad = BTreeMap::from([("b".to_string(), "missing".to_string())]);
        assert!(ParamStore::from_parts(tensors, bad).is_err());
    }
}
