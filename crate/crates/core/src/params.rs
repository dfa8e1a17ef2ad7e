//! Named parameter storage and gradient snapshots.
//!
//! Parameter values live outside any tape. A scheduler run binds them
//! into its own tape as leaves (`requires_grad` for the trainable
//! subset) and extracts a [`GradReport`] at the end, so concurrent runs
//! can share read-only values while owning their own accumulators.

use indexmap::IndexMap;

use crate::tape::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>, shape: Vec<usize>, trainable: bool) {
        let numel: usize = shape.iter().product();
        assert_eq!(values.len(), numel, "param {name}: values/shape mismatch");
        let prev = self.entries.insert(
            name.to_string(),
            Param {
                values,
                shape,
                trainable,
            },
        );
        assert!(prev.is_none(), "duplicate param name {name}");
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n)
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.values.len())
            .sum()
    }

    pub fn total_scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_scalar_count() as f64 / self.total_scalar_count() as f64
    }

    /// Insert every parameter into `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = IndexMap::new();
        for (name, p) in &self.entries {
            let id = tape.leaf(p.values.clone(), p.shape.clone(), p.trainable);
            ids.insert(name.clone(), id);
        }
        BoundParams { ids }
    }
}

/// Tape handles for one bound copy of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: IndexMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound param {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

/// Frozen copy of accumulated gradients for the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    entries: IndexMap<String, Vec<f64>>,
}

impl GradReport {
    /// Snapshot trainable gradients from `tape`; absent grads read as zero.
    pub fn collect(tape: &Tape, params: &ParamSet, bound: &BoundParams) -> Self {
        let mut entries = IndexMap::new();
        for (name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let grad = tape
                .grad(bound.id(name))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.values.len()]);
            entries.insert(name.clone(), grad);
        }
        GradReport { entries }
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        let mut entries = IndexMap::new();
        for (name, p) in params.iter() {
            if p.trainable {
                entries.insert(name.clone(), vec![0.0; p.values.len()]);
            }
        }
        GradReport { entries }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("no gradient entry for {name}"))
    }

    pub fn entry_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient entry for {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flatten().cloned().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flatten()
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += factor * other` component-wise.
    pub fn add_scaled(&mut self, other: &GradReport, factor: f64) {
        for (name, v) in self.entries.iter_mut() {
            let o = other.get(name);
            for (x, y) in v.iter_mut().zip(o) {
                *x += factor * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.entries.values_mut() {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &GradReport) -> f64 {
        let mut max = 0.0_f64;
        for (name, v) in &self.entries {
            for (x, y) in v.iter().zip(other.get(name)) {
                max = max.max((x - y).abs());
            }
        }
        max
    }

    /// ||self - other||_2 / ||other||_2 over the flattened gradients.
    pub fn relative_l2_distance(&self, other: &GradReport) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (name, v) in &self.entries {
            for (x, y) in v.iter().zip(other.get(name)) {
                num += (x - y) * (x - y);
                den += y * y;
            }
        }
        num.sqrt() / den.sqrt()
    }
}

/// True when every frozen parameter's gradient is absent or exactly zero.
pub fn frozen_grads_zero(tape: &Tape, params: &ParamSet, bound: &BoundParams) -> bool {
    params.iter().all(|(name, p)| {
        p.trainable
            || tape
                .grad(bound.id(name))
                .map(|g| g.iter().all(|&x| x == 0.0))
                .unwrap_or(true)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_keys_are_exactly_the_trainable_names() {
        let mut params = ParamSet::new();
        params.insert("w", vec![1.0, 2.0], vec![2], true);
        params.insert("frozen", vec![0.0], vec![1], false);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let report = GradReport::collect(&tape, &params, &bound);
        let names: Vec<_> = report.names().cloned().collect();
        assert_eq!(names, vec!["w".to_string()]);
        assert_eq!(report.get("w"), &[0.0, 0.0]);
    }

    #[test]
    fn trainable_fraction() {
        let mut params = ParamSet::new();
        params.insert("a", vec![0.0; 2], vec![2], true);
        params.insert("b", vec![0.0; 6], vec![2, 3], false);
        assert!((params.trainable_fraction() - 0.25).abs() < 1e-15);
    }
}
