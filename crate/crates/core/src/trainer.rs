//! The online learning loop: one pass over the stream, one optimizer step
//! per minibatch, with periodic any-time evaluation and end-of-task
//! evaluation for the accuracy matrix.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::classifier::{
    logits, masked_ce_loss, norm_probe, CosineHead, Head, HeadKind, LinearHead, LogitMask,
    NormRecord,
};
use crate::config::{AdapterKind, ExperimentConfig};
use crate::encoder::{BlockPrefix, EncoderParams, InputPrompt, PromptSet};
use crate::error::{Error, Result};
use crate::metrics::{a_auc, a_last, f_last, AccuracyMatrix, AucRecorder};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::optim::{AdamConfig, AdamState};
use crate::promptsel::{
    key_pull_loss, query_key_cosine, query_of, PromptPool, SelectionLog, SelectionRecord,
};
use crate::rng::Rng;
use crate::stream::{
    si_blurry_split, stream_batches, Dataset, MemoryBuffer, Minibatch, SiBlurryConfig, Source,
    TaskAssignment,
};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Prefix(PromptSet),
    Input(InputPrompt),
    Pool(PromptPool),
    None,
}

impl Adapter {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Adapter::Prefix(p) => p.tensors(),
            Adapter::Input(p) => vec![&p.tokens],
            Adapter::Pool(p) => p.tensors(),
            Adapter::None => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Adapter::Prefix(p) => p.tensors_mut(),
            Adapter::Input(p) => vec![&mut p.tokens],
            Adapter::Pool(p) => p.tensors_mut(),
            Adapter::None => Vec::new(),
        }
    }
}

/// Pool queries and per-row selections.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolChoice {
    pub queries: Tensor,
    pub selected: Vec<usize>,
}

/// Prompt-free query features keyed by the bits of the input row. The
/// backbone is frozen and rows are encoded independently, so a cached
/// query is bit-identical to a fresh one.
#[derive(Clone, Debug, Default)]
struct QueryCache {
    rows: HashMap<Vec<u64>, Vec<f64>>,
}

impl QueryCache {
    fn queries(&mut self, encoder: &EncoderParams, inputs: &Tensor) -> Result<Tensor> {
        let key = |r: usize| -> Vec<u64> { inputs.row(r).iter().map(|v| v.to_bits()).collect() };
        let mut missing: Vec<usize> = Vec::new();
        let mut pending = HashSet::new();
        for r in 0..inputs.rows() {
            let k = key(r);
            if !self.rows.contains_key(&k) && pending.insert(k) {
                missing.push(r);
            }
        }
        if !missing.is_empty() {
            let f = inputs.cols();
            let data: Vec<f64> = missing.iter().flat_map(|&r| inputs.row(r).to_vec()).collect();
            let fresh = query_of(encoder, &Tensor::from_parts(vec![missing.len(), f], data))?;
            for (i, &r) in missing.iter().enumerate() {
                self.rows.insert(key(r), fresh.row(i).to_vec());
            }
        }
        let d = encoder.config().hidden;
        let data = (0..inputs.rows()).flat_map(|r| self.rows[&key(r)].clone()).collect();
        Ok(Tensor::from_parts(vec![inputs.rows(), d], data))
    }
}

fn choose(
    encoder: &EncoderParams,
    adapter: &Adapter,
    cache: &RefCell<QueryCache>,
    inputs: &Tensor,
    rng: &mut Rng,
) -> Result<Option<PoolChoice>> {
    let Adapter::Pool(pool) = adapter else {
        return Ok(None);
    };
    let queries = cache.borrow_mut().queries(encoder, inputs)?;
    let selected = (0..queries.rows())
        .map(|i| pool.select(queries.row(i), rng))
        .collect();
    Ok(Some(PoolChoice { queries, selected }))
}

/// Class-token features with the adapter whose leaves are `vars`
/// (in [`Adapter::tensors`] order).
fn adapter_encode(
    encoder: &EncoderParams,
    adapter: &Adapter,
    tape: &mut Tape,
    inputs: &Tensor,
    vars: &[Var],
    choice: Option<&PoolChoice>,
) -> Result<Var> {
    match adapter {
        Adapter::None => encoder.encode(tape, inputs, None, None),
        Adapter::Prefix(_) => {
            let prefixes: Vec<BlockPrefix> = vars
                .chunks_exact(2)
                .map(|kv| BlockPrefix::Shared(kv[0], kv[1]))
                .collect();
            encoder.encode(tape, inputs, Some(&prefixes), None)
        }
        Adapter::Input(_) => encoder.encode(tape, inputs, None, Some(vars[0])),
        Adapter::Pool(pool) => {
            let choice = choice.ok_or_else(|| Error::Contract("pool forward without selections".into()))?;
            let prefixes = pool.bound_from(vars).prefixes(&choice.selected);
            encoder.encode(tape, inputs, Some(&prefixes), None)
        }
    }
}

/// Learner state for one seed.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub encoder: EncoderParams,
    pub adapter: Adapter,
    pub head: Head,
    pub buffer: MemoryBuffer,
    pub masking: bool,
    pub pull_weight: f64,
    pub selection: Option<SelectionLog>,
    adam: AdamState,
    rng: Rng,
    first_seen: Vec<Option<usize>>,
    steps: usize,
    queries: RefCell<QueryCache>,
}

impl TrainRun {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        encoder: EncoderParams,
        adapter: Adapter,
        head: Head,
        buffer_capacity: usize,
        masking: bool,
        pull_weight: f64,
        adam: AdamConfig,
        seed: u64,
    ) -> Self {
        let mut params = adapter.tensors();
        params.extend(head.tensors());
        let adam = AdamState::new(adam, &params);
        let selection = match &adapter {
            Adapter::Pool(p) => Some(SelectionLog::new(p.size())),
            _ => None,
        };
        let classes = head.classes();
        Self {
            encoder,
            adapter,
            head,
            buffer: MemoryBuffer::new(buffer_capacity),
            masking,
            pull_weight,
            selection,
            adam,
            rng: Rng::new(seed),
            first_seen: vec![None; classes],
            steps: 0,
            queries: RefCell::default(),
        }
    }

    /// Adapter and head drawn from `init_seed` as `cfg` describes.
    pub fn from_config(
        cfg: &ExperimentConfig,
        encoder: EncoderParams,
        init_seed: u64,
        train_seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(init_seed);
        let d = encoder.config().hidden;
        let m = cfg.prompt_length;
        let adapter = match cfg.adapter {
            AdapterKind::Prefix => Adapter::Prefix(PromptSet::new(cfg.prefix_layers, m, d, &mut rng)),
            AdapterKind::Input => Adapter::Input(InputPrompt::new(m, d, &mut rng)),
            AdapterKind::Pool => Adapter::Pool(PromptPool::new(
                cfg.pool_size,
                cfg.pool_shared_layers,
                cfg.pool_layers,
                m,
                d,
                cfg.selection,
                &mut rng,
            )?),
            AdapterKind::None => Adapter::None,
        };
        let c = cfg.scenario.classes;
        let head = match cfg.head {
            HeadKind::Cosine => Head::Cosine(CosineHead::new(c, d, cfg.tau, &mut rng)?),
            HeadKind::Linear => Head::Linear(LinearHead::new(c, d, &mut rng)),
        };
        Ok(Self::new(
            encoder,
            adapter,
            head,
            cfg.buffer_capacity,
            cfg.masking,
            cfg.pull_weight,
            cfg.adam,
            train_seed,
        ))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step index at which each class first arrived in the stream.
    pub fn first_seen(&self) -> &[Option<usize>] {
        &self.first_seen
    }

    /// Every trainable tensor: adapter first, then head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.adapter.tensors();
        p.extend(self.head.tensors());
        p
    }

    /// Pool selections for `inputs`; `None` for other adapters.
    pub fn choose(&self, inputs: &Tensor, rng: &mut Rng) -> Result<Option<PoolChoice>> {
        choose(&self.encoder, &self.adapter, &self.queries, inputs, rng)
    }

    /// The training objective on leaves `vars` given in [`TrainRun::params`]
    /// order: masked cross-entropy, plus the weighted key pull in pool mode.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &Tensor,
        labels: &[usize],
        choice: Option<&PoolChoice>,
    ) -> Result<Var> {
        let na = self.adapter.tensors().len();
        let g = adapter_encode(&self.encoder, &self.adapter, tape, inputs, &vars[..na], choice)?;
        let bound = self.head.bound_from(&vars[na..]);
        let z = logits(tape, g, &bound)?;
        let classes = self.head.classes();
        let mask = if self.masking {
            LogitMask::from_labels(labels, classes)?
        } else {
            LogitMask::all(classes)
        };
        let loss = masked_ce_loss(tape, z, &mask, labels)?;
        match (choice, &self.adapter) {
            (Some(c), Adapter::Pool(_)) if self.pull_weight > 0.0 => {
                let pull = key_pull_loss(tape, &c.queries, vars[0], &c.selected)?;
                let pull = tape.scale(pull, self.pull_weight);
                tape.add(loss, pull)
            }
            _ => Ok(loss),
        }
    }

    /// One optimizer step. Replay samples, if any, are drawn before the step
    /// and the stream samples enter the buffer after it.
    pub fn train_on_batch(&mut self, batch: &Minibatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty minibatch".into()));
        }
        let combined = if self.buffer.capacity() > 0 && !self.buffer.is_empty() {
            let k = batch.len().min(self.buffer.len());
            batch.concat(&self.buffer.sample(k, &mut self.rng)?)
        } else {
            batch.clone()
        };

        let choice = choose(
            &self.encoder,
            &self.adapter,
            &self.queries,
            &combined.inputs,
            &mut self.rng,
        )?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params().into_iter().map(|t| tape.param(t.clone())).collect();
        let loss = self.loss_graph(&mut tape, &vars, &combined.inputs, &combined.labels, choice.as_ref())?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let grad_list: Vec<Tensor> = vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect();
        let grad_refs: Vec<&Tensor> = grad_list.iter().collect();

        if let (Some(log), Some(c), Adapter::Pool(pool)) = (&mut self.selection, &choice, &self.adapter) {
            for (r, src) in combined.sources.iter().enumerate() {
                if *src == Source::Stream {
                    log.push(SelectionRecord {
                        class_id: combined.labels[r],
                        task_id: Some(batch.task),
                        prompt: c.selected[r],
                        cosine: query_key_cosine(c.queries.row(r), pool, c.selected[r]),
                    })?;
                }
            }
        }

        let mut params = self.adapter.tensors_mut();
        params.extend(self.head.tensors_mut());
        self.adam.step(&mut params, &grad_refs)?;

        for r in 0..batch.len() {
            let y = batch.labels[r];
            self.first_seen[y].get_or_insert(self.steps);
            self.buffer
                .insert(batch.inputs.row(r), y, batch.ids[r], &mut self.rng);
        }
        self.steps += 1;
        Ok(value)
    }

    /// Unmasked predictions. `rng` only matters for random pool selection.
    pub fn predict(&self, inputs: &Tensor, rng: &mut Rng) -> Result<Vec<usize>> {
        let n = inputs.rows();
        let f = inputs.cols();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = Tensor::from_parts(
                vec![end - start, f],
                inputs.data()[start * f..end * f].to_vec(),
            );
            let choice = self.choose(&chunk, rng)?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = self.params().into_iter().map(|t| tape.constant(t.clone())).collect();
            let na = self.adapter.tensors().len();
            let g = adapter_encode(&self.encoder, &self.adapter, &mut tape, &chunk, &vars[..na], choice.as_ref())?;
            let bound = self.head.bound_from(&vars[na..]);
            let z = logits(&mut tape, g, &bound)?;
            out.extend(crate::classifier::argmax_rows(tape.value(z)));
        }
        Ok(out)
    }

    pub fn prototype_norms(&self) -> Vec<NormRecord> {
        norm_probe(&self.head, self.steps, &self.first_seen)
    }
}

/// Per-run seeds, drawn in a fixed order from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub split: u64,
    pub scenario: u64,
    pub stream: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut r = Rng::new(seed);
        Self {
            split: r.next_u64(),
            scenario: r.next_u64(),
            stream: r.next_u64(),
            init: r.next_u64(),
            train: r.next_u64(),
            eval: r.next_u64(),
        }
    }
}

/// The stream one seed sees.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub train: Dataset,
    pub test: Dataset,
    pub assignment: TaskAssignment,
    pub batches: Vec<Minibatch>,
}

pub fn build_scenario(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<Scenario> {
    let seeds = RunSeeds::derive(seed);
    if data.classes != cfg.scenario.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config expects {}",
            data.classes, cfg.scenario.classes
        )));
    }
    let (train, test) = data.split_per_class(cfg.test_fraction, &mut Rng::new(seeds.split))?;
    let sc = SiBlurryConfig {
        seed: seeds.scenario,
        ..cfg.scenario.clone()
    };
    let assignment = si_blurry_split(&sc, &train.labels)?;
    let batches = stream_batches(&assignment, &train, sc.batch_size, seeds.stream)?;
    Ok(Scenario {
        train,
        test,
        assignment,
        batches,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub auc: AucRecorder,
    pub a_last: Option<f64>,
    pub f_last: Option<f64>,
    pub a_auc: Option<f64>,
    pub losses: Vec<f64>,
    pub norms: Vec<NormRecord>,
    pub selection: Option<SelectionLog>,
    pub scenario: Scenario,
}

fn accuracy(pred: &[usize], labels: &[usize], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        if keep(y) {
            n += 1;
            ok += usize::from(p == y);
        }
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

/// Trains one seed over the whole stream. Evaluation happens every time the
/// number of stream samples seen crosses a multiple of `eval_interval`
/// (on the held-out samples of all classes seen so far) and after every
/// task (one accuracy-matrix row, tasks owning classes by home task).
pub fn run_stream(cfg: &ExperimentConfig, encoder: &EncoderParams, data: &Dataset, seed: u64) -> Result<RunOutput> {
    let seeds = RunSeeds::derive(seed);
    let scenario = build_scenario(cfg, data, seed)?;
    let mut run = TrainRun::from_config(cfg, encoder.clone(), seeds.init, seeds.train)?;
    let mut eval_rng = Rng::new(seeds.eval);
    let tasks = cfg.scenario.tasks;
    let home = &scenario.assignment.home_task;
    let test = &scenario.test;

    let mut matrix = AccuracyMatrix::new(tasks);
    let mut auc = AucRecorder::new();
    let mut losses = Vec::with_capacity(scenario.batches.len());
    let mut norms = Vec::new();
    let mut seen_class = vec![false; cfg.scenario.classes];
    let mut seen = 0usize;
    let mut evals = 0usize;

    if scenario.batches.is_empty() {
        return Ok(RunOutput {
            seed,
            matrix,
            auc,
            a_last: None,
            f_last: None,
            a_auc: None,
            losses,
            norms,
            selection: run.selection.clone(),
            scenario,
        });
    }

    let mut next = 0;
    for t in 0..tasks {
        while next < scenario.batches.len() && scenario.batches[next].task == t {
            let batch = &scenario.batches[next];
            next += 1;
            losses.push(run.train_on_batch(batch)?);
            for &y in &batch.labels {
                seen_class[y] = true;
            }
            seen += batch.len();
            let due = seen / cfg.eval_interval;
            if due > evals {
                let idx: Vec<usize> = (0..test.len()).filter(|&i| seen_class[test.labels[i]]).collect();
                let sub = test.subset(&idx);
                let pred = run.predict(&sub.inputs, &mut eval_rng)?;
                let acc = accuracy(&pred, &sub.labels, |_| true).unwrap_or(0.0);
                for _ in evals..due {
                    auc.push(seen, acc)?;
                }
                evals = due;
                if cfg.norm_probe {
                    norms.extend(run.prototype_norms());
                }
            }
        }
        let pred = run.predict(&test.inputs, &mut eval_rng)?;
        let row = (0..=t)
            .map(|i| {
                accuracy(&pred, &test.labels, |y| home[y] == i).ok_or_else(|| {
                    Error::Contract(format!("task {i} owns no held-out samples"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        matrix.push_row(row)?;
    }

    Ok(RunOutput {
        seed,
        a_last: Some(a_last(&matrix)?),
        f_last: Some(f_last(&matrix)?),
        a_auc: if auc.is_empty() { None } else { Some(a_auc(&auc)?) },
        matrix,
        auc,
        losses,
        norms,
        selection: run.selection.clone(),
        scenario,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::CosineHead;
    use crate::encoder::{init_encoder, EncoderConfig};
    use crate::promptsel::SelectionMode;
    use crate::stream::{synth_dataset, SynthConfig};

    fn small_encoder() -> EncoderParams {
        init_encoder(&EncoderConfig {
            depth: 2,
            hidden: 8,
            heads: 2,
            tokens: 3,
            mlp_ratio: 2.0,
            chunk: 2,
            seed: 1,
        })
        .unwrap()
    }

    fn batch(rng: &mut Rng, labels: Vec<usize>, f: usize) -> Minibatch {
        let n = labels.len();
        Minibatch {
            inputs: Tensor::from_fn(&[n, f], |_| rng.normal()),
            sources: vec![Source::Stream; n],
            ids: (0..n).collect(),
            labels,
            task: 0,
        }
    }

    fn prefix_run(masking: bool, capacity: usize) -> TrainRun {
        let enc = small_encoder();
        let mut rng = Rng::new(5);
        let adapter = Adapter::Prefix(PromptSet::new(1, 2, 8, &mut rng));
        let head = Head::Cosine(CosineHead::new(6, 8, 0.1, &mut rng).unwrap());
        TrainRun::new(enc, adapter, head, capacity, masking, 0.5, AdamConfig::default(), 9)
    }

    #[test]
    fn masked_prototypes_survive_a_step() {
        let mut run = prefix_run(true, 0);
        let before = run.head.clone();
        let mut rng = Rng::new(1);
        let loss = run.train_on_batch(&batch(&mut rng, vec![1, 3, 3, 1], 4)).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        let (Head::Cosine(a), Head::Cosine(b)) = (&before, &run.head) else { unreachable!() };
        for c in 0..6 {
            let same = a.prototypes.row(c) == b.prototypes.row(c);
            assert_eq!(same, c != 1 && c != 3, "class {c}");
        }
    }

    #[test]
    fn unmasked_step_moves_every_prototype() {
        let mut run = prefix_run(false, 0);
        let before = run.head.clone();
        run.train_on_batch(&batch(&mut Rng::new(1), vec![0, 0], 4)).unwrap();
        let (Head::Cosine(a), Head::Cosine(b)) = (&before, &run.head) else { unreachable!() };
        for c in 0..6 {
            assert_ne!(a.prototypes.row(c), b.prototypes.row(c));
        }
    }

    #[test]
    fn encoder_stays_frozen_and_buffer_fills_after_step() {
        let mut run = prefix_run(true, 3);
        let bytes = run.encoder.to_weight_file().to_bytes();
        let mut rng = Rng::new(2);
        run.train_on_batch(&batch(&mut rng, vec![0, 1], 4)).unwrap();
        assert_eq!(run.buffer.len(), 2);
        run.train_on_batch(&batch(&mut rng, vec![2, 3], 4)).unwrap();
        assert_eq!(run.buffer.len(), 3);
        assert_eq!(run.encoder.to_weight_file().to_bytes(), bytes);
        assert_eq!(run.first_seen(), &[Some(0), Some(0), Some(1), Some(1), None, None]);
        assert!(run.train_on_batch(&batch(&mut rng, vec![], 4)).is_err());
    }

    #[test]
    fn single_entry_pool_matches_single_prompt() {
        let enc = small_encoder();
        let mut rng = Rng::new(3);
        let prompts = PromptSet::new(1, 2, 8, &mut rng);
        let head = Head::Cosine(CosineHead::new(4, 8, 0.1, &mut rng).unwrap());
        let mut pool = PromptPool::new(1, 0, 1, 2, 8, SelectionMode::Fixed, &mut rng).unwrap();
        pool.entries[0] = prompts.clone();
        let adam = AdamConfig::default();
        let mut a = TrainRun::new(enc.clone(), Adapter::Prefix(prompts), head.clone(), 0, true, 0.0, adam, 1);
        let mut b = TrainRun::new(enc, Adapter::Pool(pool), head, 0, true, 0.0, adam, 1);
        let mut data_rng = Rng::new(4);
        for _ in 0..5 {
            let labels = (0..6).map(|_| data_rng.below(4)).collect();
            let mb = batch(&mut data_rng, labels, 4);
            let la = a.train_on_batch(&mb).unwrap();
            let lb = b.train_on_batch(&mb).unwrap();
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert_eq!(b.selection.as_ref().unwrap().len(), 30);
    }

    fn tiny_cfg() -> (ExperimentConfig, EncoderParams, Dataset) {
        let mut cfg = ExperimentConfig {
            encoder: small_encoder().config().clone(),
            ..ExperimentConfig::default()
        };
        cfg.scenario.classes = 4;
        cfg.scenario.tasks = 2;
        cfg.scenario.batch_size = 8;
        cfg.eval_interval = 10;
        cfg.norm_probe = true;
        let data = synth_dataset(&SynthConfig {
            classes: 4,
            per_class: 20,
            dim: cfg.encoder.feature_dim(),
            spread: 0.3,
            separation: 3.0,
            seed: 0,
        })
        .unwrap();
        (cfg, small_encoder(), data)
    }

    #[test]
    fn evaluation_count_follows_interval() {
        let (cfg, enc, data) = tiny_cfg();
        let out = run_stream(&cfg, &enc, &data, 0).unwrap();
        let n = out.scenario.train.len();
        assert_eq!(n, 64);
        assert_eq!(out.auc.len(), n / 10);
        assert!(out.matrix.is_complete());
        assert!(out.a_last.is_some() && out.f_last.is_some() && out.a_auc.is_some());
        assert_eq!(out.losses.len(), out.scenario.batches.len());
        assert!(!out.norms.is_empty());
    }

    #[test]
    fn empty_stream_yields_empty_metrics() {
        let (cfg, enc, data) = tiny_cfg();
        let empty = data.subset(&[]);
        let out = run_stream(&cfg, &enc, &empty, 0).unwrap();
        assert!(out.auc.is_empty() && out.a_last.is_none() && out.losses.is_empty());
    }

    #[test]
    fn reruns_are_identical() {
        let (mut cfg, enc, data) = tiny_cfg();
        cfg.adapter = AdapterKind::Pool;
        cfg.pool_size = 3;
        cfg.pool_shared_layers = 1;
        cfg.pool_layers = 1;
        cfg.selection = SelectionMode::Random;
        cfg.buffer_capacity = 5;
        let a = run_stream(&cfg, &enc, &data, 7).unwrap();
        let b = run_stream(&cfg, &enc, &data, 7).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.losses), bits(&b.losses));
        assert_eq!(a.auc, b.auc);
        assert_eq!(a.selection, b.selection);
    }
}
