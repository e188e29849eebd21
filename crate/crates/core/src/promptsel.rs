//! Prompt-pool baselines and selection analytics.
//!
//! A pool holds `P` entries, each a learnable key plus one `(p^k, p^v)`
//! prefix pair per pooled block. Blocks before the pooled ones may carry a
//! single shared prompt. Every sample picks one entry; that choice is used
//! in all pooled blocks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::encoder::{BlockPrefix, EncoderParams, PromptSet};
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    Similarity,
    Random,
    Fixed,
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "random" => Ok(Self::Random),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::Config(format!(
                "unknown selection mode `{other}` (similarity|random|fixed)"
            ))),
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Similarity => "similarity",
            Self::Random => "random",
            Self::Fixed => "fixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    pub mode: SelectionMode,
    /// `P × D`, one key per entry.
    pub keys: Tensor,
    /// Prompt shared by every sample in the leading blocks.
    pub shared: PromptSet,
    /// Per-entry prompts for the blocks after the shared ones.
    pub entries: Vec<PromptSet>,
}

impl PromptPool {
    pub fn new(
        size: usize,
        shared_layers: usize,
        pool_layers: usize,
        length: usize,
        hidden: usize,
        mode: SelectionMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        let keys = Tensor::from_fn(&[size, hidden], |_| rng.normal());
        let shared = PromptSet::new(shared_layers, length, hidden, rng);
        let entries = (0..size)
            .map(|_| PromptSet::new(pool_layers, length, hidden, rng))
            .collect();
        Ok(Self {
            mode,
            keys,
            shared,
            entries,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Number of leading blocks receiving a prefix.
    pub fn depth(&self) -> usize {
        self.shared.injected_layers() + self.entries.first().map_or(0, |e| e.injected_layers())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.keys];
        out.extend(self.shared.tensors());
        for e in &self.entries {
            out.extend(e.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.keys];
        out.extend(self.shared.tensors_mut());
        for e in &mut self.entries {
            out.extend(e.tensors_mut());
        }
        out
    }

    pub fn select(&self, q: &[f64], rng: &mut Rng) -> usize {
        select_prompt(q, self, rng)
    }

    /// Registers keys and every prompt as learnable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundPool {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        self.bound_from(&vars)
    }

    /// Arranges leaf handles given in [`PromptPool::tensors`] order.
    pub fn bound_from(&self, vars: &[Var]) -> BoundPool {
        let shared_n = self.shared.injected_layers();
        let per_entry = self.entries.first().map_or(0, |e| e.injected_layers());
        let pair = |i: usize| (vars[i], vars[i + 1]);
        let shared = (0..shared_n).map(|l| pair(1 + 2 * l)).collect();
        let base = 1 + 2 * shared_n;
        let entries = (0..self.size())
            .map(|e| {
                (0..per_entry)
                    .map(|l| pair(base + 2 * (e * per_entry + l)))
                    .collect()
            })
            .collect();
        BoundPool {
            keys: vars[0],
            shared,
            entries,
            vars: vars.to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundPool {
    pub keys: Var,
    shared: Vec<(Var, Var)>,
    entries: Vec<Vec<(Var, Var)>>,
    vars: Vec<Var>,
}

impl BoundPool {
    /// Leaf handles in [`PromptPool::tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-block prefixes for a batch whose samples chose `selected`.
    pub fn prefixes(&self, selected: &[usize]) -> Vec<BlockPrefix> {
        let mut out: Vec<BlockPrefix> = self
            .shared
            .iter()
            .map(|&(k, v)| BlockPrefix::Shared(k, v))
            .collect();
        let layers = self.entries.first().map_or(0, Vec::len);
        for l in 0..layers {
            out.push(BlockPrefix::PerSample(
                selected.iter().map(|&s| self.entries[s][l]).collect(),
            ));
        }
        out
    }
}

/// Class-token feature of the frozen, prompt-free encoder.
pub fn query_of(encoder: &EncoderParams, batch: &Tensor) -> Result<Tensor> {
    encoder.features(batch)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(crate::classifier::NORM_EPS) * nb.max(crate::classifier::NORM_EPS))
}

/// Cosine between a query and one key of the pool.
pub fn query_key_cosine(q: &[f64], pool: &PromptPool, index: usize) -> f64 {
    cosine(q, pool.keys.row(index))
}

pub fn select_prompt(q: &[f64], pool: &PromptPool, rng: &mut Rng) -> usize {
    let p = pool.size();
    match pool.mode {
        SelectionMode::Fixed => 0,
        SelectionMode::Random => rng.below(p),
        SelectionMode::Similarity => {
            let mut best = (0, f64::NEG_INFINITY);
            for i in 0..p {
                let c = query_key_cosine(q, pool, i);
                if c > best.1 {
                    best = (i, c);
                }
            }
            best.0
        }
    }
}

/// Mean of `1 − cos(q_b, k_{selected_b})` over the batch. Queries enter as
/// constants, so only the selected keys receive gradient.
pub fn key_pull_loss(tape: &mut Tape, queries: &Tensor, keys: Var, selected: &[usize]) -> Result<Var> {
    let (b, d) = queries
        .dims2()
        .ok_or_else(|| Error::dim("key_pull_loss", format!("queries {:?}", queries.shape())))?;
    if selected.len() != b || b == 0 {
        return Err(Error::dim(
            "key_pull_loss",
            format!("{} queries vs {} selections", b, selected.len()),
        ));
    }
    let p = tape.value(keys).rows();
    let rows = selected
        .iter()
        .map(|&s| {
            if s >= p {
                Err(Error::Contract(format!("selected prompt {s} out of pool size {p}")))
            } else {
                tape.slice(keys, s..s + 1, 0..d)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let k = tape.concat_rows_many(&rows)?;
    let kn = tape.normalize_rows(k, crate::classifier::NORM_EPS)?;
    let q = tape.constant(queries.clone());
    let qn = tape.normalize_rows(q, crate::classifier::NORM_EPS)?;
    let prod = tape.mul(qn, kn)?;
    let total = tape.sum(prod);
    let mean = tape.scale(total, -1.0 / b as f64);
    Ok(tape.add_scalar(mean, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionRecord {
    pub class_id: usize,
    pub task_id: Option<usize>,
    pub prompt: usize,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionLog {
    prompts: usize,
    records: Vec<SelectionRecord>,
}

impl SelectionLog {
    pub fn new(prompts: usize) -> Self {
        Self {
            prompts,
            records: Vec::new(),
        }
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn push(&mut self, r: SelectionRecord) -> Result<()> {
        if r.prompt >= self.prompts {
            return Err(Error::Contract(format!(
                "prompt index {} out of pool size {}",
                r.prompt, self.prompts
            )));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[SelectionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// `C × P` selection counts.
pub fn selection_histogram(log: &SelectionLog, classes: usize) -> Result<Vec<Vec<u64>>> {
    let mut h = vec![vec![0u64; log.prompts]; classes];
    for r in &log.records {
        if r.class_id >= classes {
            return Err(Error::Label {
                label: r.class_id,
                classes,
            });
        }
        h[r.class_id][r.prompt] += 1;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassAccuracy {
    pub n: usize,
    pub accuracy: f64,
}

/// Per class, the share of records whose selected prompt belongs to the
/// record's true task. Classes without any task-labelled record are `None`.
pub fn task_id_accuracy(
    log: &SelectionLog,
    task_of_prompt: &[Option<usize>],
    classes: usize,
) -> Result<Vec<Option<ClassAccuracy>>> {
    if task_of_prompt.len() != log.prompts {
        return Err(Error::Config(format!(
            "task map covers {} prompts, pool has {}",
            task_of_prompt.len(),
            log.prompts
        )));
    }
    let mut hits = vec![(0usize, 0usize); classes];
    for r in &log.records {
        let Some(task) = r.task_id else { continue };
        if r.class_id >= classes {
            return Err(Error::Label {
                label: r.class_id,
                classes,
            });
        }
        let mapped = task_of_prompt[r.prompt]
            .ok_or_else(|| Error::Config(format!("prompt {} has no task", r.prompt)))?;
        let slot = &mut hits[r.class_id];
        slot.0 += 1;
        slot.1 += usize::from(mapped == task);
    }
    Ok(hits
        .into_iter()
        .map(|(n, ok)| {
            (n > 0).then(|| ClassAccuracy {
                n,
                accuracy: ok as f64 / n as f64,
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskCosine {
    pub task_id: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and spread of the logged query–key cosines, grouped by true task.
pub fn key_similarity_stats(log: &SelectionLog) -> Vec<TaskCosine> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &log.records {
        if let Some(t) = r.task_id {
            groups.entry(t).or_default().push(r.cosine);
        }
    }
    groups
        .into_iter()
        .map(|(task_id, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
            TaskCosine {
                task_id,
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

pub fn histogram_csv(h: &[Vec<u64>]) -> String {
    let mut s = String::from("class_id,prompt_id,count\n");
    for (c, row) in h.iter().enumerate() {
        for (p, n) in row.iter().enumerate() {
            s += &format!("{c},{p},{n}\n");
        }
    }
    s
}

/// Absent classes are written with `n = 0` and an empty accuracy field.
pub fn accuracy_csv(acc: &[Option<ClassAccuracy>]) -> String {
    let mut s = String::from("class_id,n,accuracy\n");
    for (c, a) in acc.iter().enumerate() {
        match a {
            Some(a) => s += &format!("{c},{},{}\n", a.n, a.accuracy),
            None => s += &format!("{c},0,\n"),
        }
    }
    s
}

pub fn stats_csv(stats: &[TaskCosine]) -> String {
    let mut s = String::from("task_id,mean_cos,std_cos\n");
    for t in stats {
        s += &format!("{},{},{}\n", t.task_id, t.mean, t.std);
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::Rng;

    fn pool_with_keys(keys: Tensor, mode: SelectionMode) -> PromptPool {
        let mut rng = Rng::new(0);
        let mut p = PromptPool::new(keys.rows(), 0, 1, 2, keys.cols(), mode, &mut rng).unwrap();
        p.keys = keys;
        p
    }

    fn rec(class_id: usize, task_id: Option<usize>, prompt: usize, cosine: f64) -> SelectionRecord {
        SelectionRecord {
            class_id,
            task_id,
            prompt,
            cosine,
        }
    }

    #[test]
    fn single_entry_pool_always_selects_zero() {
        let mut rng = Rng::new(3);
        for mode in [SelectionMode::Similarity, SelectionMode::Random, SelectionMode::Fixed] {
            let pool = PromptPool::new(1, 1, 1, 2, 4, mode, &mut rng).unwrap();
            for _ in 0..20 {
                let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                assert_eq!(pool.select(&q, &mut rng), 0);
            }
        }
        assert!(PromptPool::new(0, 0, 1, 2, 4, SelectionMode::Fixed, &mut rng).is_err());
    }

    #[test]
    fn forced_argmax() {
        let keys = Tensor::from_fn(&[5, 5], |i| if i % 6 == 0 { 1.0 } else { 0.0 });
        let pool = pool_with_keys(keys, SelectionMode::Similarity);
        let mut rng = Rng::new(0);
        assert_eq!(pool.select(&[0.0, 0.0, 0.0, 2.0, 0.0], &mut rng), 3);
        // Ties go to the lowest index.
        assert_eq!(pool.select(&[0.0, 1.0, 0.0, 1.0, 0.0], &mut rng), 1);
    }

    #[test]
    fn random_selection_is_uniform() {
        let pool = pool_with_keys(Tensor::zeros(&[10, 3]), SelectionMode::Random);
        let mut rng = Rng::new(11);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[pool.select(&[1.0, 0.0, 0.0], &mut rng)] += 1;
        }
        for c in counts {
            let f = c as f64 / 1e4;
            assert!((f - 0.1).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn pull_loss_values_and_gradient_routing() {
        let keys = Tensor::matrix(3, 2, vec![2.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let q = Tensor::matrix(1, 2, vec![5.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let k = t.param(keys.clone());
        let par = key_pull_loss(&mut t, &q, k, &[0]).unwrap();
        let perp = key_pull_loss(&mut t, &q, k, &[1]).unwrap();
        assert!(t.value(par).item().unwrap().abs() < 1e-15);
        assert!((t.value(perp).item().unwrap() - 1.0).abs() < 1e-15);

        let mut t = Tape::new();
        let k = t.param(keys);
        let loss = key_pull_loss(&mut t, &q, k, &[2]).unwrap();
        let g = t.backward(loss).unwrap();
        let gk = g.get(k).unwrap();
        assert!(gk.row(0).iter().chain(gk.row(1)).all(|v| *v == 0.0));
        assert!(gk.row(2).iter().any(|v| *v != 0.0));
        assert!(key_pull_loss(&mut t, &q, k, &[3]).is_err());
    }

    #[test]
    fn bound_pool_routes_entries_per_sample() {
        let mut rng = Rng::new(2);
        let pool = PromptPool::new(3, 1, 2, 2, 4, SelectionMode::Fixed, &mut rng).unwrap();
        assert_eq!(pool.depth(), 3);
        let mut t = Tape::new();
        let bound = pool.bind(&mut t);
        assert_eq!(bound.vars().len(), pool.tensors().len());
        let pre = bound.prefixes(&[2, 0]);
        assert_eq!(pre.len(), 3);
        assert!(matches!(pre[0], BlockPrefix::Shared(..)));
        match &pre[1] {
            BlockPrefix::PerSample(pairs) => {
                assert_eq!(t.value(pairs[0].0), &pool.entries[2].layers[0].0);
                assert_eq!(t.value(pairs[1].1), &pool.entries[0].layers[0].1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn histogram_cases() {
        let log = SelectionLog::new(8);
        assert!(selection_histogram(&log, 3).unwrap().iter().flatten().all(|&n| n == 0));
        let mut log = SelectionLog::new(8);
        log.push(rec(2, None, 7, 0.0)).unwrap();
        let h = selection_histogram(&log, 3).unwrap();
        assert_eq!(h[2][7], 1);
        assert_eq!(h.iter().flatten().sum::<u64>(), 1);
        assert!(log.push(rec(0, None, 8, 0.0)).is_err());
        assert!(histogram_csv(&h).starts_with("class_id,prompt_id,count\n0,0,0\n"));
    }

    #[test]
    fn task_id_accuracy_cases() {
        let mut log = SelectionLog::new(2);
        for _ in 0..3 {
            log.push(rec(0, Some(0), 0, 0.9)).unwrap();
        }
        log.push(rec(2, Some(1), 0, 0.1)).unwrap();
        log.push(rec(2, Some(1), 1, 0.1)).unwrap();
        let acc = task_id_accuracy(&log, &[Some(0), Some(1)], 3).unwrap();
        assert_eq!(acc[0], Some(ClassAccuracy { n: 3, accuracy: 1.0 }));
        assert_eq!(acc[1], None);
        assert_eq!(acc[2].unwrap().accuracy, 0.5);
        assert!(matches!(
            task_id_accuracy(&log, &[Some(0), None], 3),
            Err(Error::Config(_))
        ));
        assert_eq!(accuracy_csv(&acc), "class_id,n,accuracy\n0,3,1\n1,0,\n2,2,0.5\n");
    }

    #[test]
    fn similarity_stats_cases() {
        let mut log = SelectionLog::new(1);
        log.push(rec(0, Some(4), 0, 0.4)).unwrap();
        assert_eq!(
            key_similarity_stats(&log),
            vec![TaskCosine { task_id: 4, mean: 0.4, std: 0.0 }]
        );
        let mut log = SelectionLog::new(1);
        for c in [0.2, 0.6] {
            log.push(rec(0, Some(1), 0, c)).unwrap();
        }
        let s = key_similarity_stats(&log);
        assert!((s[0].mean - 0.4).abs() < 1e-15 && (s[0].std - 0.2).abs() < 1e-15);
        assert_eq!(stats_csv(&s), format!("task_id,mean_cos,std_cos\n1,{},{}\n", s[0].mean, s[0].std));
    }

    #[test]
    fn identical_queries_and_keys_have_unit_cosine() {
        let keys = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.0, 0.0]).unwrap();
        let pool = pool_with_keys(keys.clone(), SelectionMode::Similarity);
        let mut rng = Rng::new(0);
        let mut log = SelectionLog::new(2);
        for i in 0..2 {
            let q = keys.row(i);
            let s = pool.select(q, &mut rng);
            assert_eq!(s, i);
            log.push(rec(i, Some(i), s, query_key_cosine(q, &pool, s))).unwrap();
        }
        for s in key_similarity_stats(&log) {
            assert!((s.mean - 1.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn similarity_selection_ignores_key_scale(seed in any::<u64>(), which in 0usize..6, exp in -3i32..=3) {
            let mut rng = Rng::new(seed);
            let mut pool = PromptPool::new(6, 0, 1, 1, 5, SelectionMode::Similarity, &mut rng).unwrap();
            let q: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let before = pool.select(&q, &mut rng);
            pool.keys.row_mut(which).iter_mut().for_each(|v| *v *= 10f64.powi(exp));
            let after = pool.select(&q, &mut rng);
            let changed = before != after;
            // A different winner is only legitimate when cosines tie to rounding.
            if changed {
                let a = query_key_cosine(&q, &pool, before);
                let b = query_key_cosine(&q, &pool, after);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn histogram_total_equals_log_length(picks in proptest::collection::vec((0usize..4, 0usize..3), 0..50)) {
            let mut log = SelectionLog::new(3);
            for &(c, p) in &picks {
                log.push(rec(c, Some(p), p, 0.0)).unwrap();
            }
            let h = selection_histogram(&log, 4).unwrap();
            prop_assert_eq!(h.iter().flatten().sum::<u64>() as usize, picks.len());
            for (c, row) in h.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<u64>() as usize, picks.iter().filter(|x| x.0 == c).count());
            }
            for a in task_id_accuracy(&log, &[Some(0), Some(1), Some(2)], 4).unwrap().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&a.accuracy));
            }
        }
    }
}
