use crate::error::{Error, Result};

/// Row-major N×d matrix of doubles (key dumps, query batches).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    d: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDimension("matrix row length must be positive".into()));
        }
        if !data.len().is_multiple_of(d) {
            return Err(Error::InvalidDimension(format!(
                "{} values do not form rows of length {d}",
                data.len()
            )));
        }
        Ok(Self { d, data })
    }

    pub fn empty(d: usize) -> Self {
        Self { d, data: Vec::new() }
    }

    pub fn from_rows(d: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::InvalidDimension(format!(
                    "row {i} has {} values, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(d, data)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}
