//! Flat parameter storage.
//!
//! All trainable parts of a model (network weights, damping coefficients)
//! live in one contiguous `Vec<f64>`. The optimizer and the autodiff tape
//! only ever see that flat vector; the structured parts hold [`ParamSlice`]
//! views into it. Components are registered under stable names so a
//! checkpoint can be validated against the layout it is loaded into.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A named view into the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlice {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlice {
    #[inline]
    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// One registered component of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub name: String,
    pub slice: ParamSlice,
}

/// Accumulates component registrations, then produces a zeroed vector.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    components: Vec<Component>,
    total: usize,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserve `len` entries under `name`; names must be unique.
    pub fn register(&mut self, name: &str, len: usize) -> ParamSlice {
        assert!(
            self.components.iter().all(|c| c.name != name),
            "duplicate parameter component {name:?}"
        );
        let slice = ParamSlice {
            offset: self.total,
            len,
        };
        self.components.push(Component {
            name: name.to_string(),
            slice,
        });
        self.total += len;
        slice
    }

    pub fn finish(self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.total],
            components: self.components,
        }
    }
}

/// The flat parameter vector plus its component layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    components: Vec<Component>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, name: &str) -> Option<ParamSlice> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.slice)
    }

    #[inline]
    pub fn slice(&self, s: ParamSlice) -> &[f64] {
        &self.values[s.range()]
    }

    #[inline]
    pub fn slice_mut(&mut self, s: ParamSlice) -> &mut [f64] {
        &mut self.values[s.range()]
    }

    /// Copy of the raw values (the checkpoint payload).
    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Overwrite all values from a flat slice of exactly matching length.
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_is_contiguous_and_named() {
        let mut b = ParamBuilder::new();
        let w = b.register("net.w1", 6);
        let bias = b.register("net.b1", 3);
        let mut p = b.finish();
        assert_eq!(p.len(), 9);
        assert_eq!(w, ParamSlice { offset: 0, len: 6 });
        assert_eq!(bias, ParamSlice { offset: 6, len: 3 });
        assert_eq!(p.component("net.b1"), Some(bias));
        assert_eq!(p.component("nope"), None);
        p.slice_mut(bias).copy_from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(p.values()[6..], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut b = ParamBuilder::new();
        b.register("a", 4);
        let mut p = b.finish();
        p.values_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let flat = p.flatten();
        let mut q = {
            let mut b = ParamBuilder::new();
            b.register("a", 4);
            b.finish()
        };
        q.unflatten(&flat).unwrap();
        assert_eq!(p.values(), q.values());
        assert!(q.unflatten(&[1.0]).is_err(), "length mismatch must error");
    }

    #[test]
    #[should_panic(expected = "duplicate parameter component")]
    fn duplicate_names_panic() {
        let mut b = ParamBuilder::new();
        b.register("x", 1);
        b.register("x", 2);
    }
}
