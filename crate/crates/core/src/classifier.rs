//! Classification heads, minibatch logit masking and the masked loss.
//!
//! The cosine head scores `z_c = cos(g, c_c) / τ`. Row norms are clamped
//! from below by [`NORM_EPS`] instead of having it added, which keeps the
//! logits exactly invariant to rescaling of `g` or of any prototype.
//!
//! Masking never materializes `-∞`: masked classes are dropped from the
//! log-sum-exp, so their probability is exactly 0 and no gradient reaches
//! their prototypes.

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::Rng;

pub const NORM_EPS: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CosineHead {
    /// `C × D`, one prototype per row.
    pub prototypes: Tensor,
    pub tau: f64,
}

impl CosineHead {
    /// Random unit-norm prototypes.
    pub fn new(classes: usize, dim: usize, tau: f64, rng: &mut Rng) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        let mut prototypes = Tensor::zeros(&[classes, dim]);
        for c in 0..classes {
            let row = prototypes.row_mut(c);
            loop {
                for v in row.iter_mut() {
                    *v = rng.normal();
                }
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > NORM_EPS {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        Ok(Self { prototypes, tau })
    }
}

/// Affine head `g Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `C × D`.
    pub weight: Tensor,
    /// Length `C`.
    pub bias: Tensor,
}

impl LinearHead {
    /// Uniform `±1/√D` init for both weight and bias.
    pub fn new(classes: usize, dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = || (rng.uniform() * 2.0 - 1.0) * bound;
        let weight = Tensor::from_fn(&[classes, dim], |_| draw());
        let bias = Tensor::from_fn(&[classes], |_| draw());
        Self { weight, bias }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Cosine,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Cosine(CosineHead),
    Linear(LinearHead),
}

/// Head parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundHead {
    kind: BoundKind,
    vars: Vec<Var>,
}

#[derive(Clone, Debug)]
enum BoundKind {
    Cosine { prototypes: Var, tau: f64 },
    Linear { weight: Var, bias: Var },
}

impl BoundHead {
    /// Leaf handles in [`Head::tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Cosine(_) => HeadKind::Cosine,
            Head::Linear(_) => HeadKind::Linear,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Cosine(h) => h.prototypes.rows(),
            Head::Linear(h) => h.weight.rows(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Head::Cosine(h) => vec![&h.prototypes],
            Head::Linear(h) => vec![&h.weight, &h.bias],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Cosine(h) => vec![&mut h.prototypes],
            Head::Linear(h) => vec![&mut h.weight, &mut h.bias],
        }
    }

    /// Registers the head as learnable leaves (or frozen, if `learnable` is false).
    pub fn bind(&self, tape: &mut Tape, learnable: bool) -> BoundHead {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if learnable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.bound_from(&vars)
    }

    /// Wraps leaf handles given in [`Head::tensors`] order.
    pub fn bound_from(&self, vars: &[Var]) -> BoundHead {
        let kind = match self {
            Head::Cosine(h) => BoundKind::Cosine {
                prototypes: vars[0],
                tau: h.tau,
            },
            Head::Linear(_) => BoundKind::Linear {
                weight: vars[0],
                bias: vars[1],
            },
        };
        BoundHead {
            kind,
            vars: vars.to_vec(),
        }
    }

    /// Logits for features that are not on a tape (evaluation).
    pub fn logits_of(&self, g: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let vg = tape.constant(g.clone());
        let z = logits(&mut tape, vg, &bound)?;
        Ok(tape.value(z).clone())
    }

    /// Unmasked argmax prediction, lowest class index on ties.
    pub fn predict(&self, g: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits_of(g)?))
    }

    /// L2 norm of each class's prototype or weight row, indexed by class.
    pub fn prototype_norms(&self) -> Vec<f64> {
        let w = match self {
            Head::Cosine(h) => &h.prototypes,
            Head::Linear(h) => &h.weight,
        };
        (0..w.rows())
            .map(|c| w.row(c).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

pub fn cosine_logits(tape: &mut Tape, g: Var, prototypes: Var, tau: f64) -> Result<Var> {
    let gn = tape.normalize_rows(g, NORM_EPS)?;
    let cn = tape.normalize_rows(prototypes, NORM_EPS)?;
    let ct = tape.transpose(cn)?;
    let z = tape.matmul(gn, ct)?;
    Ok(tape.scale(z, 1.0 / tau))
}

pub fn linear_logits(tape: &mut Tape, g: Var, weight: Var, bias: Var) -> Result<Var> {
    let wt = tape.transpose(weight)?;
    let z = tape.matmul(g, wt)?;
    tape.add_row(z, bias)
}

pub fn logits(tape: &mut Tape, g: Var, head: &BoundHead) -> Result<Var> {
    match head.kind {
        BoundKind::Cosine { prototypes, tau } => cosine_logits(tape, g, prototypes, tau),
        BoundKind::Linear { weight, bias } => linear_logits(tape, g, weight, bias),
    }
}

pub fn argmax_rows(z: &Tensor) -> Vec<usize> {
    (0..z.rows())
        .map(|i| {
            z.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Minibatch logit mask: class `c` is open iff it occurs in the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogitMask {
    allowed: Vec<bool>,
}

impl LogitMask {
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("mask needs at least one label".into()));
        }
        let mut allowed = vec![false; classes];
        for &y in labels {
            if y >= classes {
                return Err(Error::Label { label: y, classes });
            }
            allowed[y] = true;
        }
        Ok(Self { allowed })
    }

    /// Every class open; masking becomes a no-op.
    pub fn all(classes: usize) -> Self {
        Self {
            allowed: vec![true; classes],
        }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_open(&self, class: usize) -> bool {
        self.allowed[class]
    }

    /// Additive form: `0` for open classes, `-∞` for masked ones.
    pub fn additive(&self) -> Vec<f64> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }
}

pub fn make_mask(labels: &[usize], classes: usize) -> Result<LogitMask> {
    LogitMask::from_labels(labels, classes)
}

/// Mean cross-entropy with masked classes excluded from the normalizer.
pub fn masked_ce_loss(tape: &mut Tape, z: Var, mask: &LogitMask, labels: &[usize]) -> Result<Var> {
    tape.masked_cross_entropy(z, mask.allowed(), labels)
}

/// One row of the weight-norm probe CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct NormRecord {
    pub step: usize,
    pub class_id: usize,
    pub first_seen_step: usize,
    pub norm: f64,
}

/// Norms of every class seen so far, ordered by first-seen step, then class.
pub fn norm_probe(head: &Head, step: usize, first_seen: &[Option<usize>]) -> Vec<NormRecord> {
    let norms = head.prototype_norms();
    let mut rows: Vec<NormRecord> = first_seen
        .iter()
        .enumerate()
        .filter_map(|(c, fs)| {
            fs.map(|f| NormRecord {
                step,
                class_id: c,
                first_seen_step: f,
                norm: norms[c],
            })
        })
        .collect();
    rows.sort_by_key(|r| (r.first_seen_step, r.class_id));
    rows
}

/// `step,class_id,first_seen_step,norm`.
pub fn norm_csv(rows: &[NormRecord]) -> String {
    let mut s = String::from("step,class_id,first_seen_step,norm\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.step, r.class_id, r.first_seen_step, r.norm);
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::Rng;

    fn cosine(protos: Vec<f64>, c: usize, d: usize) -> Head {
        Head::Cosine(CosineHead {
            prototypes: Tensor::matrix(c, d, protos).unwrap(),
            tau: DEFAULT_TAU,
        })
    }

    #[test]
    fn aligned_feature_scores_inverse_temperature() {
        let h = cosine(vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0], 2, 3);
        let g = Tensor::matrix(1, 3, vec![2.5, 5.0, -2.5]).unwrap();
        let z = h.logits_of(&g).unwrap();
        assert!((z.data()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_feature_scores_zero() {
        let h = cosine(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let g = Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap();
        assert_eq!(h.logits_of(&g).unwrap().data()[0], 0.0);
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut rng = Rng::new(0);
        assert!(CosineHead::new(3, 4, 0.0, &mut rng).is_err());
        let h = CosineHead::new(3, 4, 0.1, &mut rng).unwrap();
        for n in Head::Cosine(h).prototype_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_head_cases() {
        let zero = Head::Linear(LinearHead {
            weight: Tensor::zeros(&[3, 3]),
            bias: Tensor::zeros(&[3]),
        });
        let g = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(zero.logits_of(&g).unwrap().data(), &[0.0; 3]);
        assert_eq!(zero.prototype_norms(), vec![0.0; 3]);

        let eye = Head::Linear(LinearHead {
            weight: Tensor::eye(3),
            bias: Tensor::zeros(&[3]),
        });
        assert_eq!(eye.logits_of(&g).unwrap().data(), &[0.0, 1.0, 0.0]);

        let mut rng = Rng::new(1);
        let lin = LinearHead::new(4, 3, &mut rng);
        let mut doubled = lin.clone();
        doubled.weight.data_mut().iter_mut().for_each(|w| *w *= 2.0);
        doubled.bias = Tensor::zeros(&[4]);
        let mut base = lin;
        base.bias = Tensor::zeros(&[4]);
        let g = Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let a = Head::Linear(base).logits_of(&g).unwrap();
        let b = Head::Linear(doubled).logits_of(&g).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_construction() {
        let m = make_mask(&[1, 3, 3], 5).unwrap();
        assert_eq!(m.allowed(), &[false, true, false, true, false]);
        let add = m.additive();
        assert_eq!(add[1], 0.0);
        assert_eq!(add[0], f64::NEG_INFINITY);
        assert_eq!(make_mask(&[0, 1, 2], 3).unwrap(), LogitMask::all(3));
        assert_eq!(make_mask(&[0], 4).unwrap().allowed().iter().filter(|&&a| a).count(), 1);
        assert!(matches!(make_mask(&[5], 5), Err(Error::Label { label: 5, classes: 5 })));
        assert!(make_mask(&[], 5).is_err());
    }

    #[test]
    fn equal_logits_give_ln2() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::matrix(1, 3, vec![0.7, 0.7, -4.0]).unwrap());
        let mask = make_mask(&[0, 1], 3).unwrap();
        let loss = masked_ce_loss(&mut t, z, &mask, &[1]).unwrap();
        assert!((t.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_logit_loss_matches_extended_precision() {
        // ln(1 + e^-10) at 25 significant digits.
        let oracle = 4.539_889_921_686_465e-5;
        let mut t = Tape::new();
        let z = t.constant(Tensor::matrix(1, 2, vec![10.0, 0.0]).unwrap());
        let loss = masked_ce_loss(&mut t, z, &LogitMask::all(2), &[0]).unwrap();
        let got = t.value(loss).item().unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-12, "{got}");
    }

    #[test]
    fn masked_label_is_contract_error() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 3]));
        let mask = make_mask(&[0], 3).unwrap();
        assert!(matches!(
            masked_ce_loss(&mut t, z, &mask, &[2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masked_prototypes_get_bitwise_zero_gradient() {
        let mut rng = Rng::new(4);
        let head = Head::Cosine(CosineHead::new(6, 5, 0.1, &mut rng).unwrap());
        let mut t = Tape::new();
        let bound = head.bind(&mut t, true);
        let g = t.param(Tensor::from_fn(&[3, 5], |_| rng.normal()));
        let z = logits(&mut t, g, &bound).unwrap();
        let labels = [1, 4, 1];
        let mask = make_mask(&labels, 6).unwrap();
        let loss = masked_ce_loss(&mut t, z, &mask, &labels).unwrap();
        let probs = t.ce_probabilities(loss).unwrap();
        let grads = t.backward(loss).unwrap();
        let gp = grads.get(bound.vars()[0]).unwrap();
        for c in [0, 2, 3, 5] {
            assert!(gp.row(c).iter().all(|v| *v == 0.0));
            for i in 0..3 {
                assert_eq!(probs.row(i)[c], 0.0);
            }
        }
        assert!(gp.row(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn all_present_mask_equals_plain_cross_entropy() {
        let mut rng = Rng::new(5);
        let zt = Tensor::from_fn(&[4, 3], |_| rng.normal() * 3.0);
        let labels = [0, 1, 2, 2];
        let mut t = Tape::new();
        let z = t.constant(zt);
        let masked = masked_ce_loss(&mut t, z, &make_mask(&labels, 3).unwrap(), &labels).unwrap();
        let plain = t.masked_cross_entropy(z, &[true; 3], &labels).unwrap();
        assert_eq!(t.value(masked).to_bits(), t.value(plain).to_bits());
        // Independent evaluation of mean -log softmax.
        let zd = t.value(z).clone();
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = zd.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[y];
        }
        want /= 4.0;
        assert!((t.value(plain).item().unwrap() - want).abs() < 1e-13);
    }

    #[test]
    fn prediction_rules() {
        let h = cosine(vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0], 4, 2);
        // Classes 1 and 3 share a prototype: tie goes to 1.
        let g = Tensor::matrix(2, 2, vec![0.0, 2.0, 3.0, 0.1]).unwrap();
        assert_eq!(h.predict(&g).unwrap(), vec![1, 0]);
    }

    #[test]
    fn norm_probe_orders_by_first_seen() {
        let h = cosine(vec![3.0, 4.0, 1.0, 0.0, 0.0, 2.0], 3, 2);
        let rows = norm_probe(&h, 7, &[Some(5), None, Some(2)]);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].class_id, rows[0].norm), (2, 2.0));
        assert_eq!((rows[1].class_id, rows[1].norm), (0, 5.0));
        assert!(rows.iter().all(|r| r.step == 7));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cosine_logits_are_scale_invariant(seed in any::<u64>(), which in 0usize..5, exp in -3i32..=3) {
            let alpha = 10f64.powi(exp);
            let mut rng = Rng::new(seed);
            let head = CosineHead::new(5, 8, 0.1, &mut rng).unwrap();
            let g = Tensor::from_fn(&[3, 8], |_| rng.normal());
            let base = Head::Cosine(head.clone()).logits_of(&g).unwrap();

            let mut scaled = head.clone();
            scaled.prototypes.row_mut(which).iter_mut().for_each(|v| *v *= alpha);
            let z1 = Head::Cosine(scaled).logits_of(&g).unwrap();

            let g2 = Tensor::from_fn(&[3, 8], |i| g.data()[i] * alpha);
            let z2 = Head::Cosine(head).logits_of(&g2).unwrap();
            for ((a, b), c) in base.data().iter().zip(z1.data()).zip(z2.data()) {
                prop_assert!((a - b).abs() <= 1e-10);
                prop_assert!((a - c).abs() <= 1e-10);
                prop_assert!(a.abs() <= 10.0 + 1e-12);
            }
            prop_assert_eq!(argmax_rows(&base), argmax_rows(&z2));
        }
    }
}
