//! Named parameter storage and the adaptive-moment optimizer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Bindings, GradientReport};

/// Named parameter arrays, some of which may be frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub arrays: BTreeMap<String, Array>,
    pub frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            arrays: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        self.arrays.insert(name.to_string(), value);
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn get(&self, name: &str) -> &Array {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    /// All arrays as graph bindings.
    pub fn bindings(&self) -> Bindings {
        self.arrays
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Array::all_finite)
    }

    pub fn count(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// True when names and shapes agree.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient for {0}; step rejected")]
    NonFiniteGradient(String),
    #[error("gradient for unknown parameter {0}")]
    UnknownParameter(String),
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    pub step_count: u64,
    first: BTreeMap<String, Array>,
    second: BTreeMap<String, Array>,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &GradientReport,
    ) -> Result<StepInfo, OptimError> {
        for (name, g) in &grads.grads {
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
            if !params.arrays.contains_key(name) {
                return Err(OptimError::UnknownParameter(name.clone()));
            }
        }
        let grad_norm = grads.norm();
        let scale = match self.max_grad_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in &grads.grads {
            if params.is_frozen(name) {
                continue;
            }
            let p = params.arrays.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi * scale;
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(StepInfo {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Array::vector(vec![1.0, -2.0]));
        p
    }

    fn grads(v: Vec<f64>) -> GradientReport {
        let mut g = GradientReport::default();
        g.grads.insert("w".into(), Array::vector(v));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store();
        let before = p.clone();
        Adam::new(0.1).step(&mut p, &grads(vec![0.0, 0.0])).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store();
        Adam::new(0.1).step(&mut p, &grads(vec![3.0, -0.5])).unwrap();
        let d = p.get("w").data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = store();
        let before = p.clone();
        let mut opt = Adam::new(0.1);
        assert!(opt.step(&mut p, &grads(vec![f64::NAN, 0.0])).is_err());
        assert_eq!(p, before);
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut p = store();
        p.freeze("w");
        let before = p.clone();
        Adam::new(0.1).step(&mut p, &grads(vec![1.0, 1.0])).unwrap();
        assert_eq!(p, before);
    }
}
