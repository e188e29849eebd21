//! Multi-seed experiment runner and artifact writer.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.txt          resolved config, every key
//! metrics.csv         seed,metric,value for all seeds
//! aggregate.csv       metric,mean,std,seeds
//! seed_<s>/metrics.csv
//! seed_<s>/anytime.csv
//! seed_<s>/accuracy_matrix.csv     after_task,task_id,accuracy
//! seed_<s>/scenario.csv
//! seed_<s>/norms.csv               if norm_probe = true
//! seed_<s>/selection_histogram.csv pool adapter only
//! seed_<s>/key_similarity.csv      pool adapter only
//! seed_<s>/task_id_accuracy.csv    pool adapter with pool_size = tasks
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::classifier::norm_csv;
use crate::config::{DataSource, ExperimentConfig};
use crate::encoder::{init_encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_csv, aggregate_seeds, anytime_csv, metrics_csv, AccuracyMatrix};
use crate::ndgrad::{grad_check, GradCheck, Tensor, Var};
use crate::promptsel::{
    accuracy_csv, histogram_csv, key_similarity_stats, selection_histogram, stats_csv,
    task_id_accuracy,
};
use crate::rng::Rng;
use crate::stream::{idx_load, scenario_csv, synth_dataset, Dataset, SynthConfig};
use crate::trainer::{build_scenario, run_stream, RunOutput, RunSeeds, TrainRun};

pub fn build_encoder(cfg: &ExperimentConfig) -> Result<EncoderParams> {
    match &cfg.weights {
        Some(path) => EncoderParams::load(&cfg.encoder, path),
        None => init_encoder(&cfg.encoder),
    }
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dim = cfg.encoder.feature_dim();
    let data = match cfg.data {
        DataSource::Synthetic => synth_dataset(&SynthConfig {
            classes: cfg.scenario.classes,
            per_class: cfg.samples_per_class,
            dim,
            spread: cfg.cluster_spread,
            separation: cfg.cluster_separation,
            seed: cfg.data_seed,
        })?,
        DataSource::Idx => {
            let (Some(images), Some(labels)) = (&cfg.idx_images, &cfg.idx_labels) else {
                return Err(Error::Config("idx data needs idx_images and idx_labels".into()));
            };
            idx_load(images, labels, Some(cfg.scenario.classes))?
        }
    };
    if data.feature_dim() != dim && !data.is_empty() {
        return Err(Error::Config(format!(
            "samples have {} features, encoder expects (tokens - 1) x chunk = {dim}",
            data.feature_dim()
        )));
    }
    Ok(data)
}

/// Scenario dump for one seed.
pub fn dump_scenario(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let data = build_dataset(cfg)?;
    let sc = build_scenario(cfg, &data, seed)?;
    Ok(scenario_csv(&sc.assignment, &sc.train.labels))
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    pub runs: Vec<RunOutput>,
    pub failures: Vec<(u64, Error)>,
    /// `(metric, mean, std, seeds)`.
    pub aggregate: Vec<(String, f64, f64, usize)>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn matrix_csv(m: &AccuracyMatrix) -> String {
    let mut s = String::from("after_task,task_id,accuracy\n");
    for (t, row) in m.rows().iter().enumerate() {
        for (i, a) in row.iter().enumerate() {
            s += &format!("{t},{i},{a}\n");
        }
    }
    s
}

fn metric_rows(r: &RunOutput) -> Vec<(u64, &'static str, f64)> {
    [("a_last", r.a_last), ("f_last", r.f_last), ("a_auc", r.a_auc)]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (r.seed, k, v)))
        .collect()
}

fn write_seed(cfg: &ExperimentConfig, dir: &Path, r: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("metrics.csv"), &metrics_csv(&metric_rows(r)))?;
    write(&dir.join("anytime.csv"), &anytime_csv(&r.auc))?;
    write(&dir.join("accuracy_matrix.csv"), &matrix_csv(&r.matrix))?;
    write(
        &dir.join("scenario.csv"),
        &scenario_csv(&r.scenario.assignment, &r.scenario.train.labels),
    )?;
    if cfg.norm_probe {
        write(&dir.join("norms.csv"), &norm_csv(&r.norms))?;
    }
    if let Some(log) = &r.selection {
        let classes = cfg.scenario.classes;
        write(
            &dir.join("selection_histogram.csv"),
            &histogram_csv(&selection_histogram(log, classes)?),
        )?;
        write(&dir.join("key_similarity.csv"), &stats_csv(&key_similarity_stats(log)))?;
        if log.prompts() == cfg.scenario.tasks {
            let map: Vec<Option<usize>> = (0..log.prompts()).map(Some).collect();
            write(
                &dir.join("task_id_accuracy.csv"),
                &accuracy_csv(&task_id_accuracy(log, &map, classes)?),
            )?;
        }
    }
    Ok(())
}

/// Runs every seed (in parallel on up to `threads` workers), then writes
/// all artifacts. Seeds that fail are listed in the summary; the others
/// are still written and aggregated.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentSummary> {
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let encoder = build_encoder(cfg)?;
    let data = build_dataset(cfg)?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<(u64, Result<RunOutput>)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| (s, run_stream(cfg, &encoder, &data, s)))
            .collect()
    });

    write(&out.join("config.txt"), &cfg.to_text())?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(r) => {
                write_seed(cfg, &out.join(format!("seed_{seed}")), &r)?;
                runs.push(r);
            }
            Err(e) => failures.push((seed, e)),
        }
    }
    let rows: Vec<(u64, &str, f64)> = runs.iter().flat_map(metric_rows).collect();
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;

    let mut aggregate = Vec::new();
    for name in ["a_last", "f_last", "a_auc"] {
        let vals: Vec<f64> = rows.iter().filter(|r| r.1 == name).map(|r| r.2).collect();
        if !vals.is_empty() {
            let (m, s) = aggregate_seeds(&vals)?;
            aggregate.push((name.to_string(), m, s, vals.len()));
        }
    }
    let agg_rows: Vec<(&str, f64, f64, usize)> = aggregate
        .iter()
        .map(|(n, m, s, k)| (n.as_str(), *m, *s, *k))
        .collect();
    write(&out.join("aggregate.csv"), &aggregate_csv(&agg_rows))?;
    Ok(ExperimentSummary {
        out_dir: out,
        runs,
        failures,
        aggregate,
    })
}

/// Finite-difference check of every trainable tensor of the configured
/// model, on `batch` dataset samples picked with the first seed.
pub fn grad_check_suite(cfg: &ExperimentConfig, batch: usize, step: f64) -> Result<GradCheck> {
    let encoder = build_encoder(cfg)?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let seeds = RunSeeds::derive(seed);
    let run = TrainRun::from_config(cfg, encoder, seeds.init, seeds.train)?;
    let data = build_dataset(cfg)?;
    let mut rng = Rng::new(seeds.train);
    let n = batch.min(data.len());
    if n == 0 {
        return Err(Error::Config("grad check needs at least one sample".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut idx);
    let mb = data.subset(&idx[..n]);
    let choice = run.choose(&mb.inputs, &mut rng)?;
    let params: Vec<Tensor> = run.params().into_iter().cloned().collect();
    let learnable = vec![true; params.len()];
    grad_check(
        |tape, vars: &[Var]| run.loss_graph(tape, vars, &mb.inputs, &mb.labels, choice.as_ref()),
        &params,
        &learnable,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny(out: &Path) -> ExperimentConfig {
        let text = format!(
            "classes = 4\ntasks = 2\nbatch_size = 8\nsamples_per_class = 15\n\
             depth = 2\nhidden = 8\nheads = 2\ntokens = 3\nchunk = 2\n\
             eval_interval = 10\nseeds = 0,1\nnorm_probe = true\nout_dir = {}\n",
            out.display()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn writes_all_artifacts_and_creates_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested/out");
        let cfg = tiny(&out);
        let s = run_experiment(&cfg, Some(1)).unwrap();
        assert!(s.failures.is_empty());
        for f in ["config.txt", "metrics.csv", "aggregate.csv", "seed_0/anytime.csv", "seed_1/norms.csv", "seed_1/accuracy_matrix.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let agg = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
        assert!(agg.contains("\na_last,") && agg.contains("\na_auc,"));
        let scen = std::fs::read_to_string(out.join("seed_0/scenario.csv")).unwrap();
        assert_eq!(scen.lines().count(), 1 + s.runs[0].scenario.train.len());
    }

    #[test]
    fn pool_runs_emit_selection_analytics() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.adapter = crate::config::AdapterKind::Pool;
        cfg.pool_size = 2;
        cfg.pool_shared_layers = 1;
        cfg.pool_layers = 1;
        cfg.seeds = vec![3];
        run_experiment(&cfg, None).unwrap();
        for f in ["selection_histogram.csv", "key_similarity.csv", "task_id_accuracy.csv"] {
            assert!(dir.path().join("seed_3").join(f).exists(), "{f}");
        }
    }

    #[test]
    fn scenario_dump_matches_train_split() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let csv = dump_scenario(&cfg, 0).unwrap();
        // 15 per class, 3 held out per class.
        assert_eq!(csv.lines().count(), 1 + 4 * 12);
    }

    #[test]
    fn feature_dim_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.data = DataSource::Idx;
        let img = dir.path().join("i");
        let lab = dir.path().join("l");
        std::fs::write(&img, [0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 3, 1, 2, 3]).unwrap();
        std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 1, 0]).unwrap();
        cfg.idx_images = Some(img);
        cfg.idx_labels = Some(lab);
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn two_seed_reference_run_is_quick() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            seeds: vec![0, 1],
            out_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let t = std::time::Instant::now();
        run_experiment(&cfg, None).unwrap();
        let secs = t.elapsed().as_secs_f64();
        assert!(secs < 60.0, "{secs:.1}s");
        let agg = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert!(agg.contains("\na_last,") && agg.contains("\na_auc,"));
    }

    #[test]
    fn grad_check_on_small_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let r = grad_check_suite(&cfg, 3, 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        assert_eq!(r.checked, 2 * 4 * 8 + 4 * 8);
    }
}
