//! Datasets, the Si-Blurry scenario, minibatch streaming and replay memory.

mod buffer;
mod idx;
mod siblurry;
mod synth;

pub use buffer::MemoryBuffer;
pub use idx::{idx_load, idx_load_images, idx_load_labels, IdxArray};
pub use siblurry::{
    scenario_csv, si_blurry_split, stream_batches, ClassKind, SiBlurryConfig, TaskAssignment,
};
pub use synth::{synth_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::Rng;

/// Labelled samples, one per row of `inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = inputs
            .dims2()
            .ok_or_else(|| Error::dim("dataset", format!("inputs {:?}", inputs.shape())))?;
        if n != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{n} input rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Dataset {
            inputs: Tensor::from_parts(vec![indices.len(), f], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Holds out `round(fraction · n_c)` random samples of every class.
    /// Returns `(train, test)`; both keep the original relative order.
    pub fn split_per_class(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "test fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut is_test = vec![false; self.len()];
        for members in &mut by_class {
            let k = (fraction * members.len() as f64).round() as usize;
            rng.shuffle(members);
            for &i in &members[..k] {
                is_test[i] = true;
            }
        }
        let (test, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| is_test[i]);
        Ok((self.subset(&train), self.subset(&test)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Stream,
    Replay,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    /// `B × F`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub sources: Vec<Source>,
    /// Dataset index of each stream sample (replay rows carry the index they
    /// were stored with).
    pub ids: Vec<usize>,
    /// Task during which the batch arrives.
    pub task: usize,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Minibatch) -> Minibatch {
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let f = self.inputs.cols().max(other.inputs.cols());
        Minibatch {
            inputs: Tensor::from_parts(vec![self.len() + other.len(), f], data),
            labels: [&self.labels[..], &other.labels].concat(),
            sources: [&self.sources[..], &other.sources].concat(),
            ids: [&self.ids[..], &other.ids].concat(),
            task: self.task,
        }
    }
}

/// Snaps products that are integers up to rounding, so that e.g.
/// `0.3 × 10` counts as 3 rather than 3.0000000000000004.
pub(crate) fn snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_per: usize, classes: usize) -> Dataset {
        let labels: Vec<usize> = (0..classes).flat_map(|c| vec![c; n_per]).collect();
        let inputs = Tensor::from_fn(&[labels.len(), 2], |i| i as f64);
        Dataset::new(inputs, labels, classes).unwrap()
    }

    #[test]
    fn label_and_shape_checks() {
        assert!(Dataset::new(Tensor::zeros(&[2, 3]), vec![0], 2).is_err());
        assert!(matches!(
            Dataset::new(Tensor::zeros(&[1, 3]), vec![4], 2),
            Err(Error::Label { label: 4, classes: 2 })
        ));
    }

    #[test]
    fn per_class_split_counts() {
        let d = toy(10, 3);
        let (train, test) = d.split_per_class(0.2, &mut Rng::new(0)).unwrap();
        assert_eq!(train.class_counts(), vec![8, 8, 8]);
        assert_eq!(test.class_counts(), vec![2, 2, 2]);
        let mut all: Vec<f64> = train.inputs.data().iter().chain(test.inputs.data()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, d.inputs.data().to_vec());
        assert!(d.split_per_class(1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn snapping() {
        assert_eq!((snapped(0.3 * 10.0)).ceil(), 3.0);
        assert_eq!((snapped(0.29 * 100.0)).floor(), 29.0);
        assert_eq!(snapped(2.5), 2.5);
    }
}
