//! Fixed-capacity FIFO queue of teacher embeddings used as extra negatives.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queue: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "memory bank needs positive capacity and dimension, got {capacity} x {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            queue: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Oldest entry first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.queue.iter().map(Vec::as_slice)
    }

    /// Enqueues every row of `batch` in order, evicting the oldest entries
    /// once the bank is full. Stored rows are plain copies.
    pub fn push(&mut self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.dim {
            return Err(Error::shape("bank_push", &[batch.rows(), self.dim], batch.shape()));
        }
        if batch.rows() > self.capacity {
            return Err(Error::Invalid(format!(
                "batch of {} embeddings exceeds bank capacity {}",
                batch.rows(),
                self.capacity
            )));
        }
        let overflow = (self.queue.len() + batch.rows()).saturating_sub(self.capacity);
        self.queue.drain(..overflow);
        self.queue.extend(batch.row_iter().map(<[f64]>::to_vec));
        Ok(())
    }

    /// Current contents as a `[fill, dim]` matrix, `None` while empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.queue.is_empty() {
            return None;
        }
        let rows: Vec<&[f64]> = self.iter().collect();
        Some(Tensor::from_rows(&rows).expect("rows share the bank dimension"))
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }
}
