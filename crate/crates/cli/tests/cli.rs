use std::path::Path;
use std::process::{Command, Output};

fn oclbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oclbench"))
        .args(args)
        .env("OCLBENCH_THREADS", "1")
        .output()
        .expect("spawn oclbench")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# two-task toy run
classes = 4
tasks = 2
batch_size = 8
samples_per_class = 15
depth = 2
hidden = 8
heads = 2
tokens = 3
chunk = 2
eval_interval = 10
seeds = 0,1
";

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.display().to_string()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_writes_aggregate_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b/nested");
    for out in [&a, &b] {
        let o = oclbench(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("a_last"));
    }
    let agg = std::fs::read_to_string(a.join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("metric,mean,std,seeds\n"));
    assert!(agg.contains("\na_last,") && agg.contains("\na_auc,"));
    // config.txt records out_dir, so compare everything else.
    let strip = |t: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        t.into_iter().filter(|(n, _)| n != "config.txt").collect()
    };
    let (ta, tb) = (strip(read_tree(&a)), strip(read_tree(&b)));
    assert!(ta.len() >= 10);
    assert_eq!(ta, tb);
}

#[test]
fn dump_scenario_has_a_row_per_training_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = oclbench(&["dump-scenario", "--config", &cfg, "--seed", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    // 15 per class, 3 held out per class, 4 classes.
    assert_eq!(text.lines().count(), 1 + 4 * 12);
    assert!(text.starts_with("sample_id,class_id,kind,home_task,final_task\n"));
}

fn fixture() -> Vec<u8> {
    let mut b = b"OCLW1\ncount 2\nalpha 2x3 0\nbeta 4 48\ndata\n".to_vec();
    for i in 0..10 {
        b.extend_from_slice(&(i as f64 * 0.5).to_le_bytes());
    }
    b
}

#[test]
fn inspect_lists_both_fixture_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.oclw");
    std::fs::write(&p, fixture()).unwrap();
    let o = oclbench(&["inspect-weights", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "name,shape,offset\nalpha,2x3,0\nbeta,4,48\n");
}

#[test]
fn inspect_rejects_corrupt_magic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.oclw");
    let mut bytes = fixture();
    bytes[3] = b'X';
    std::fs::write(&p, bytes).unwrap();
    let o = oclbench(&["inspect-weights", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset"));
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "disjoint_ratio = 1.5\n");
    let o = oclbench(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("disjoint_ratio"));
}

#[test]
fn grad_check_passes_on_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = oclbench(&["grad-check", "--config", &cfg, "--batch", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("checked "));
}
