use ndarray::{Array1, Array2};
use rand::Rng;

use super::{AgentError, Batch};

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Absorbing transition (loss of synchronism); horizon ends are not.
    pub done: bool,
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten when
/// full. Rows live in flat arrays allocated once on the first push, so a long
/// run does not scatter small allocations across the heap.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    len: usize,
    cursor: usize,
    s_dim: usize,
    a_dim: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: Vec<f64>,
    s_next: Vec<f64>,
    done: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            len: 0,
            cursor: 0,
            s_dim: 0,
            a_dim: 0,
            s: Vec::new(),
            a: Vec::new(),
            r: Vec::new(),
            s_next: Vec::new(),
            done: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores a transition. Every transition must match the sizes of the first.
    pub fn push(&mut self, e: Experience) -> Result<(), AgentError> {
        if self.r.is_empty() {
            self.s_dim = e.s.len();
            self.a_dim = e.a.len();
            self.s = vec![0.0; self.capacity * self.s_dim];
            self.a = vec![0.0; self.capacity * self.a_dim];
            self.r = vec![0.0; self.capacity];
            self.s_next = vec![0.0; self.capacity * self.s_dim];
            self.done = vec![false; self.capacity];
        }
        if e.s.len() != self.s_dim || e.s_next.len() != self.s_dim {
            return Err(AgentError::Shape {
                expected: self.s_dim,
                got: e.s.len().max(e.s_next.len()),
            });
        }
        if e.a.len() != self.a_dim {
            return Err(AgentError::Shape {
                expected: self.a_dim,
                got: e.a.len(),
            });
        }
        let k = self.cursor;
        self.s[k * self.s_dim..(k + 1) * self.s_dim].copy_from_slice(&e.s);
        self.a[k * self.a_dim..(k + 1) * self.a_dim].copy_from_slice(&e.a);
        self.s_next[k * self.s_dim..(k + 1) * self.s_dim].copy_from_slice(&e.s_next);
        self.r[k] = e.r;
        self.done[k] = e.done;
        self.cursor = (k + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Transition in storage slot `i < len()`.
    pub fn get(&self, i: usize) -> Experience {
        assert!(i < self.len, "slot {i} of {}", self.len);
        Experience {
            s: self.s[i * self.s_dim..(i + 1) * self.s_dim].to_vec(),
            a: self.a[i * self.a_dim..(i + 1) * self.a_dim].to_vec(),
            r: self.r[i],
            s_next: self.s_next[i * self.s_dim..(i + 1) * self.s_dim].to_vec(),
            done: self.done[i],
        }
    }

    /// Slot written most recently, if any.
    pub fn newest(&self) -> Option<usize> {
        (self.len > 0).then(|| (self.cursor + self.capacity - 1) % self.capacity)
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, AgentError> {
        if self.len < m || m == 0 {
            return Err(AgentError::InsufficientSamples {
                have: self.len,
                need: m.max(1),
            });
        }
        Ok((0..m).map(|_| rng.random_range(0..self.len)).collect())
    }

    /// Minibatch of the given slots.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let rows = |src: &[f64], width: usize| {
            Array2::from_shape_fn((idx.len(), width), |(i, j)| src[idx[i] * width + j])
        };
        Batch {
            s: rows(&self.s, self.s_dim),
            a: rows(&self.a, self.a_dim),
            r: idx.iter().map(|&i| self.r[i]).collect::<Array1<f64>>(),
            s_next: rows(&self.s_next, self.s_dim),
            done: idx.iter().map(|&i| self.done[i]).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Batch, AgentError> {
        Ok(self.batch(&self.sample_indices(m, rng)?))
    }
}
