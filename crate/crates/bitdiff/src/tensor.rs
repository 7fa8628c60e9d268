//! Dense tensor types for the binary latent pipeline.
//!
//! All data is stored row-major as `[channel][row][column]`.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use std::fmt;

/// Shape of a channels-by-height-by-width tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidRange(format!("dims must be positive, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

fn check_same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// A binary tensor; every entry is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    dims: Dims,
    data: Vec<u8>,
}

impl BitTensor {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "bit tensor data length {} does not match dims {dims}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidProbability(format!(
                "bit tensor entry {idx} is {} (must be 0 or 1)",
                data[idx]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0; dims.len()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Entrywise logical XOR.
    pub fn xor(&self, other: &BitTensor) -> Result<BitTensor> {
        check_same_dims(self.dims, other.dims, "xor")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a ^ b).collect();
        Ok(Self { dims: self.dims, data })
    }

    /// Entrywise logical OR, in place.
    pub fn or_assign(&mut self, other: &BitTensor) -> Result<()> {
        check_same_dims(self.dims, other.dims, "or")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    /// View as a degenerate probability tensor with entries in {0, 1}.
    pub fn to_probs(&self) -> ProbTensor {
        ProbTensor { dims: self.dims, data: self.data.iter().map(|&v| v as f64).collect() }
    }
}

/// A tensor of probabilities; every entry lies in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTensor {
    dims: Dims,
    data: Vec<f64>,
}

impl ProbTensor {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "probability tensor data length {} does not match dims {dims}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidProbability(format!(
                "entry {idx} is {} (must lie in [0, 1])",
                data[idx]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn constant(dims: Dims, p: f64) -> Result<Self> {
        Self::new(dims, vec![p; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Draw one Bernoulli bit per entry. Deterministic given the stream state.
    pub fn sample(&self, rng: &mut RngStream) -> BitTensor {
        let data = self.data.iter().map(|&p| u8::from(rng.bernoulli(p))).collect();
        BitTensor { dims: self.dims, data }
    }
}

/// An image with pixel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    dims: Dims,
    data: Vec<f64>,
}

impl Image {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} does not match dims {dims}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidRange(format!(
                "pixel {idx} is {} (must lie in [0, 1])",
                data[idx]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// A single-channel map of non-negative scores (e.g. an anomaly map).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidRange(format!("map dims must be positive, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "map data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidRange(format!(
                "map entry {idx} is {} (must be finite and >= 0)",
                data[idx]
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-map min-max rescaling into [0, 1]; a constant map rescales to zero.
    pub fn normalized(&self) -> ScalarMap {
        let min = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let data = if span > 0.0 {
            self.data.iter().map(|v| (v - min) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        ScalarMap { h: self.h, w: self.w, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_tensor_rejects_non_binary() {
        let dims = Dims::new(1, 1, 3);
        assert!(BitTensor::new(dims, vec![0, 1, 2]).is_err());
        assert!(BitTensor::new(dims, vec![0, 1, 1]).is_ok());
    }

    #[test]
    fn prob_tensor_rejects_nan_and_out_of_range() {
        let dims = Dims::new(1, 1, 2);
        assert!(ProbTensor::new(dims, vec![0.5, f64::NAN]).is_err());
        assert!(ProbTensor::new(dims, vec![0.5, 1.1]).is_err());
        assert!(ProbTensor::new(dims, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn xor_matches_logic() {
        let dims = Dims::new(1, 1, 4);
        let a = BitTensor::new(dims, vec![0, 0, 1, 1]).unwrap();
        let b = BitTensor::new(dims, vec![0, 1, 0, 1]).unwrap();
        assert_eq!(a.xor(&b).unwrap().data(), &[0, 1, 1, 0]);
    }

    #[test]
    fn normalized_constant_map_is_zero() {
        let m = ScalarMap::new(2, 2, vec![3.0; 4]).unwrap();
        assert!(m.normalized().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(BitTensor::new(Dims::new(0, 2, 2), vec![]).is_err());
        assert!(Image::new(Dims::new(1, 0, 2), vec![]).is_err());
    }
}
