use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a parameter entry holds; decides who may update it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_running_stat(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_bn_affine(self) -> bool {
        matches!(self, ParamKind::BnScale | ParamKind::BnShift)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, named list of every tensor of a network, stored contiguously.
///
/// The layout is shared between all vectors built for one network, so
/// structural checks are cheap and element-wise arithmetic is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Arc<Vec<ParamEntry>>,
    values: Vec<f64>,
}

/// Builds a layout entry by entry.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl LayoutBuilder {
    /// Appends an entry and returns its index.
    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, shape: Vec<usize>) -> usize {
        let entry = ParamEntry { name: name.into(), kind, shape, offset: self.len };
        self.len += entry.len();
        self.entries.push(entry);
        self.entries.len() - 1
    }

    pub fn finish(self) -> Arc<Vec<ParamEntry>> {
        Arc::new(self.entries)
    }
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Vec<ParamEntry>>) -> Self {
        let len = layout.last().map_or(0, |e| e.offset + e.len());
        Self { layout, values: vec![0.0; len] }
    }

    pub fn from_values(layout: Arc<Vec<ParamEntry>>, values: Vec<f64>) -> Result<Self> {
        let len = layout.last().map_or(0, |e| e.offset + e.len());
        if values.len() != len {
            return Err(Error::arg(format!("parameter vector needs {len} values, got {}", values.len())));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Vec<ParamEntry>> {
        &self.layout
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, entry: usize) -> &[f64] {
        &self.values[self.layout[entry].range()]
    }

    pub fn slice_mut(&mut self, entry: usize) -> &mut [f64] {
        let r = self.layout[entry].range();
        &mut self.values[r]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.iter().position(|e| e.name == name).map(|i| self.slice(i))
    }

    /// Same names, kinds, shapes and order.
    pub fn same_structure(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn ensure_same_structure(&self, other: &Self) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::arg("parameter vectors have different structure"))
        }
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        self.ensure_same_structure(x)?;
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.ensure_same_structure(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self { layout: self.layout.clone(), values })
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.ensure_same_structure(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self { layout: self.layout.clone(), values })
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { layout: self.layout.clone(), values: self.values.iter().map(|v| a * v).collect() }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_structure(other) && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<Vec<ParamEntry>> {
        let mut b = LayoutBuilder::default();
        b.push("w", ParamKind::Weight, vec![2, 2]);
        b.push("b", ParamKind::Bias, vec![2]);
        b.finish()
    }

    #[test]
    fn arithmetic_and_structure() {
        let l = layout();
        let a = ParameterVector::from_values(l.clone(), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let z = ParameterVector::zeros(l.clone());
        assert_eq!(a.checked_add(&z).unwrap(), a);
        assert_eq!(a.get("b").unwrap(), &[5., 6.]);
        let d = a.checked_sub(&a).unwrap();
        assert_eq!(d.norm(), 0.0);
        let mut c = z.clone();
        c.axpy(2.0, &a).unwrap();
        assert_eq!(c, a.scaled(2.0));

        let mut other = LayoutBuilder::default();
        other.push("w", ParamKind::Weight, vec![4]);
        other.push("b", ParamKind::Bias, vec![2]);
        let o = ParameterVector::zeros(other.finish());
        assert!(a.checked_sub(&o).is_err());
        assert!(ParameterVector::from_values(l, vec![0.0; 5]).is_err());
    }
}
