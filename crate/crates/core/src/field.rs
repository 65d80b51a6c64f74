//! Multi-channel nodal fields and the `FLD1` binary format.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const FIELD_MAGIC: &[u8; 4] = b"FLD1";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("expected {expected} values for {nodes}x{channels} field, got {got}")]
    Shape {
        nodes: usize,
        channels: usize,
        expected: usize,
        got: usize,
    },
    #[error("field contains non-finite value at node {node}, channel {channel}")]
    NonFinite { node: usize, channel: usize },
    #[error("bad field file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-node function values, `nodes x channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    nodes: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(nodes: usize, channels: usize) -> Self {
        Self {
            nodes,
            channels,
            values: vec![0.0; nodes * channels],
        }
    }

    pub fn new(nodes: usize, channels: usize, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != nodes * channels {
            return Err(FieldError::Shape {
                nodes,
                channels,
                expected: nodes * channels,
                got: values.len(),
            });
        }
        Ok(Self {
            nodes,
            channels,
            values,
        })
    }

    /// Single-channel field.
    pub fn scalar(values: Vec<f64>) -> Self {
        Self {
            nodes: values.len(),
            channels: 1,
            values,
        }
    }

    pub fn constant(nodes: usize, channels: usize, value: f64) -> Self {
        Self {
            nodes,
            channels,
            values: vec![value; nodes * channels],
        }
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, node: usize, channel: usize) -> f64 {
        self.values[node * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, node: usize, channel: usize, v: f64) {
        self.values[node * self.channels + channel] = v;
    }

    #[inline]
    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.channels..(node + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.nodes == other.nodes && self.channels == other.channels
    }

    pub fn check_finite(&self) -> Result<(), FieldError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(FieldError::NonFinite {
                node: k / self.channels.max(1),
                channel: k % self.channels.max(1),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Field) {
        assert!(self.same_shape(x), "axpy shape mismatch");
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += alpha * v;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        Field {
            nodes: self.nodes,
            channels: self.channels,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn sub(&self, other: &Field) -> Field {
        assert!(self.same_shape(other), "sub shape mismatch");
        Field {
            nodes: self.nodes,
            channels: self.channels,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn dot(&self, other: &Field) -> f64 {
        assert!(self.same_shape(other), "dot shape mismatch");
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Channel `c` as a standalone single-channel field.
    pub fn channel(&self, c: usize) -> Field {
        Field::scalar((0..self.nodes).map(|i| self.get(i, c)).collect())
    }

    /// Reorders nodes: `out[k] = self[perm[k]]`.
    pub fn permuted(&self, perm: &[usize]) -> Field {
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            values.extend_from_slice(self.row(p));
        }
        Field {
            nodes: perm.len(),
            channels: self.channels,
            values,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FieldError> {
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&(self.nodes as u64).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FieldError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| FieldError::Format("truncated header".into()))?;
        if &magic != FIELD_MAGIC {
            return Err(FieldError::Format(format!("bad magic {magic:?}")));
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8)
            .map_err(|_| FieldError::Format("truncated header".into()))?;
        r.read_exact(&mut b4)
            .map_err(|_| FieldError::Format("truncated header".into()))?;
        let nodes = u64::from_le_bytes(b8) as usize;
        let channels = u32::from_le_bytes(b4) as usize;
        let count = nodes
            .checked_mul(channels)
            .ok_or_else(|| FieldError::Format("size overflow".into()))?;
        let mut values = Vec::with_capacity(count.min(1 << 24));
        for k in 0..count {
            r.read_exact(&mut b8)
                .map_err(|_| FieldError::Format(format!("truncated at value {k} of {count}")))?;
            values.push(f64::from_le_bytes(b8));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(FieldError::Format("trailing bytes".into()));
        }
        Ok(Field {
            nodes,
            channels,
            values,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FieldError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }
}
