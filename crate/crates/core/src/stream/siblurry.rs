use std::fmt;

use super::{snapped, Dataset, Minibatch, Source};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SiBlurryConfig {
    pub classes: usize,
    pub tasks: usize,
    pub disjoint_ratio: f64,
    pub blurry_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SiBlurryConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            tasks: 5,
            disjoint_ratio: 0.5,
            blurry_ratio: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SiBlurryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks == 0 {
            return bad("tasks must be at least 1".into());
        }
        if self.classes < self.tasks {
            return bad(format!(
                "classes ({}) must be at least tasks ({})",
                self.classes, self.tasks
            ));
        }
        for (name, r) in [
            ("disjoint_ratio", self.disjoint_ratio),
            ("blurry_ratio", self.blurry_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// `⌈disjoint_ratio · C⌉`.
    pub fn disjoint_classes(&self) -> usize {
        snapped(self.disjoint_ratio * self.classes as f64).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassKind {
    Disjoint,
    Blurry,
}

impl fmt::Display for ClassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassKind::Disjoint => "disjoint",
            ClassKind::Blurry => "blurry",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskAssignment {
    pub tasks: usize,
    pub kind: Vec<ClassKind>,
    pub home_task: Vec<usize>,
    /// Task each sample is streamed in, by dataset index.
    pub final_task: Vec<usize>,
    /// Dataset indices of the samples drawn for reassignment.
    pub reassigned: Vec<usize>,
}

impl TaskAssignment {
    /// Labels present in each task.
    pub fn task_label_sets(&self, labels: &[usize]) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.tasks];
        for (&y, &t) in labels.iter().zip(&self.final_task) {
            sets[t].push(y);
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        sets
    }
}

/// Partitions classes into disjoint and blurry groups, deals them
/// round-robin onto tasks, then moves `⌊blurry_ratio · n_blurry⌋` blurry
/// samples to uniformly drawn tasks (the home task included).
pub fn si_blurry_split(cfg: &SiBlurryConfig, labels: &[usize]) -> Result<TaskAssignment> {
    cfg.validate()?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= cfg.classes) {
        return Err(Error::Label {
            label: bad,
            classes: cfg.classes,
        });
    }
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..cfg.classes).collect();
    rng.shuffle(&mut order);
    let n_disjoint = cfg.disjoint_classes();
    let mut kind = vec![ClassKind::Blurry; cfg.classes];
    let mut home_task = vec![0; cfg.classes];
    for (j, &c) in order[..n_disjoint].iter().enumerate() {
        kind[c] = ClassKind::Disjoint;
        home_task[c] = j % cfg.tasks;
    }
    // The blurry group continues the rotation, so every task owns at least
    // one class whenever C >= T.
    for (j, &c) in order[n_disjoint..].iter().enumerate() {
        home_task[c] = (n_disjoint + j) % cfg.tasks;
    }

    let mut final_task: Vec<usize> = labels.iter().map(|&y| home_task[y]).collect();
    let mut blurry: Vec<usize> = (0..labels.len())
        .filter(|&i| kind[labels[i]] == ClassKind::Blurry)
        .collect();
    let n_move = snapped(cfg.blurry_ratio * blurry.len() as f64).floor() as usize;
    rng.shuffle(&mut blurry);
    let mut reassigned = blurry[..n_move].to_vec();
    for &i in &reassigned {
        final_task[i] = rng.below(cfg.tasks);
    }
    reassigned.sort_unstable();
    Ok(TaskAssignment {
        tasks: cfg.tasks,
        kind,
        home_task,
        final_task,
        reassigned,
    })
}

/// Tasks in order; inside a task, samples are shuffled and cut into
/// batches of `batch_size` (the last one of a task may be short).
pub fn stream_batches(
    assignment: &TaskAssignment,
    data: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Minibatch>> {
    if assignment.final_task.len() != data.len() {
        return Err(Error::dim(
            "stream_batches",
            format!(
                "assignment covers {} samples, dataset has {}",
                assignment.final_task.len(),
                data.len()
            ),
        ));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut per_task = vec![Vec::new(); assignment.tasks];
    for (i, &t) in assignment.final_task.iter().enumerate() {
        per_task[t].push(i);
    }
    let f = data.feature_dim();
    let mut out = Vec::new();
    for (task, mut ids) in per_task.into_iter().enumerate() {
        rng.shuffle(&mut ids);
        for chunk in ids.chunks(batch_size) {
            let sub = data.subset(chunk);
            out.push(Minibatch {
                inputs: Tensor::from_parts(vec![chunk.len(), f], sub.inputs.into_data()),
                labels: sub.labels,
                sources: vec![Source::Stream; chunk.len()],
                ids: chunk.to_vec(),
                task,
            });
        }
    }
    Ok(out)
}

/// `sample_id,class_id,kind,home_task,final_task`, one row per sample.
pub fn scenario_csv(assignment: &TaskAssignment, labels: &[usize]) -> String {
    let mut s = String::from("sample_id,class_id,kind,home_task,final_task\n");
    for (i, &y) in labels.iter().enumerate() {
        s += &format!(
            "{i},{y},{},{},{}\n",
            assignment.kind[y], assignment.home_task[y], assignment.final_task[i]
        );
    }
    s
}
