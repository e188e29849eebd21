use super::{Minibatch, Source};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::Rng;

/// Reservoir-sampled replay memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    ids: Vec<usize>,
    seen: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            inputs: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// After `n` inserts every offered sample is held with probability
    /// `min(1, capacity / n)`.
    pub fn insert(&mut self, input: &[f64], label: usize, id: usize, rng: &mut Rng) {
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        if self.len() < self.capacity {
            self.inputs.push(input.to_vec());
            self.labels.push(label);
            self.ids.push(id);
            return;
        }
        let j = rng.below(self.seen as usize);
        if j < self.capacity {
            self.inputs[j] = input.to_vec();
            self.labels[j] = label;
            self.ids[j] = id;
        }
    }

    /// `k` distinct stored samples, uniformly without replacement.
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Result<Minibatch> {
        if self.is_empty() {
            return Err(Error::Contract("cannot sample from an empty buffer".into()));
        }
        if k > self.len() {
            return Err(Error::Contract(format!(
                "requested {k} samples from a buffer holding {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in 0..k {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        let f = self.inputs[0].len();
        let mut data = Vec::with_capacity(k * f);
        for &i in &idx {
            data.extend_from_slice(&self.inputs[i]);
        }
        Ok(Minibatch {
            inputs: Tensor::from_parts(vec![k, f], data),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sources: vec![Source::Replay; k],
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            task: 0,
        })
    }
}
