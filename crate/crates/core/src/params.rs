use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors with a flat view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n, t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn dim(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Same structure as `self`, values taken from `flat`.
    pub fn unflatten(&self, flat: &[f32]) -> Result<ParamSet> {
        if flat.len() != self.dim() {
            return Err(Error::Invariant(format!(
                "flat vector has {} values, parameter set needs {}",
                flat.len(),
                self.dim()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let n = t.len();
                let data = flat[offset..offset + n].to_vec();
                offset += n;
                (name.clone(), Tensor::new(t.shape().to_vec(), data).expect("shape kept"))
            })
            .collect();
        Ok(ParamSet { entries })
    }

    /// Same names, shapes and order.
    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn ensure_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Invariant("parameter sets are not structurally congruent".into()))
        }
    }

    /// Uniform average. Values are summed in slice order, then divided.
    pub fn mean(sets: &[&ParamSet]) -> Result<ParamSet> {
        let first = *sets
            .first()
            .ok_or_else(|| Error::Argument("cannot average zero parameter sets".into()))?;
        let mut acc = first.clone();
        for s in &sets[1..] {
            first.ensure_congruent(s)?;
            for (dst, (_, src)) in acc.tensors_mut().zip(s.iter()) {
                for (d, v) in dst.data_mut().iter_mut().zip(src.data()) {
                    *d += v;
                }
            }
        }
        let n = sets.len() as f32;
        for t in acc.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        Ok(acc)
    }

    /// Sum of absolute elementwise differences, accumulated in `f64`.
    pub fn l1_distance(&self, other: &ParamSet) -> Result<f64> {
        self.ensure_congruent(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (*x as f64 - *y as f64).abs())
                    .sum::<f64>()
            })
            .sum())
    }
}
