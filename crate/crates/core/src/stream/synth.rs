use super::Dataset;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub spread: f64,
    /// Norm of every class mean.
    pub separation: f64,
    pub seed: u64,
}

/// Class-cluster data: each class has a random unit direction scaled by
/// `separation`; samples add isotropic noise of std `spread`. Samples are
/// laid out class by class.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if !cfg.spread.is_finite() || cfg.spread < 0.0 {
        return Err(Error::Config(format!(
            "cluster spread must be finite and >= 0, got {}",
            cfg.spread
        )));
    }
    if !cfg.separation.is_finite() {
        return Err(Error::Config("cluster separation must be finite".into()));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("feature dim must be positive".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..cfg.dim).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n * cfg.separation).collect();
            }
        })
        .collect();
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            data.extend(mean.iter().map(|m| m + cfg.spread * rng.normal()));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, cfg.dim], data)?, labels, cfg.classes)
}
