use std::path::Path;
use std::process::Command;

use ddb::dataset::{build_data, generate_benchmark, load_eval, Manifest, EVAL, TRAIN};
use ddb::report::{render, Format};
use ddb::run::{checkpoint_path, read_eval_csv, train, EVAL_CSV};
use ddb::{Checkpoint, Config, Origin, Role};

fn tiny(seed: u64) -> Config {
    let mut cfg = Config::benchmark(seed);
    for s in [&mut cfg.plan.region.schedule, &mut cfg.plan.class.schedule, &mut cfg.plan.distill.schedule] {
        s.steps = 3;
        s.batch_size = 1;
    }
    for d in &mut cfg.domains {
        d.count = 4;
        d.eval_count = if d.role == Role::Target { 3 } else { 0 };
    }
    cfg
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_json_round_trip() {
    let cfg = Config::benchmark(9);
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    for field in ["\"rounds\"", "\"region\"", "\"class\"", "\"distill\"", "\"area_ratio\"", "\"tau\"", "\"alpha\"", "\"temperature\"", "\"role\"", "\"generator\""] {
        assert!(text.contains(field), "{field} missing");
    }
    let back: Config = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = tiny(0);
    cfg.domains.retain(|d| d.role == Role::Source);
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(0);
    cfg.domains[1].name = cfg.domains[0].name.clone();
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(0);
    cfg.plan.rounds = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn generation_is_byte_identical_and_matches_memory() {
    let cfg = tiny(3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate_benchmark(&cfg, a.path()).unwrap();
    generate_benchmark(&cfg, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_eq!(m, Manifest::load(a.path()).unwrap());
    assert_eq!(m.entries.iter().filter(|e| e.split == TRAIN).count(), 8);
    assert!(m.entries.iter().filter(|e| e.split == TRAIN && e.domain == "target").all(|e| e.label.is_none()));
    assert!(m.entries.iter().filter(|e| e.split == EVAL).all(|e| e.label.is_some()));

    let (mem_train, mem_eval) = build_data(&cfg).unwrap();
    let mut disk_cfg = cfg.clone();
    for d in &mut disk_cfg.domains {
        d.origin = Origin::Dir(a.path().to_path_buf());
    }
    let (disk_train, disk_eval) = build_data(&disk_cfg).unwrap();
    assert_eq!(mem_train, disk_train);
    assert_eq!(mem_eval, disk_eval);
    assert_eq!(load_eval(a.path()).unwrap(), mem_eval);
}

#[test]
fn missing_dataset_reports_path() {
    let mut cfg = tiny(0);
    cfg.domains[0].origin = Origin::Dir("/nonexistent/ddb-data".into());
    let e = build_data(&cfg).unwrap_err();
    assert!(e.to_string().contains("/nonexistent/ddb-data"), "{e}");
}

#[test]
fn training_run_layout_and_determinism() {
    let cfg = tiny(1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = train(&cfg, a.path()).unwrap();
    train(&cfg, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_eq!(out.reports.len(), 2);

    let events = std::fs::read_to_string(a.path().join("events.csv")).unwrap();
    let stages: Vec<String> = events.lines().skip(1).map(|l| l.split(',').skip(1).collect::<Vec<_>>().join(":")).collect();
    let per_round = ["region", "class", "teacher-eval", "prototypes", "student", "student-eval"];
    let expected: Vec<String> = (1..=2).flat_map(|r| per_round.iter().map(move |s| format!("{r}:{s}"))).collect();
    assert_eq!(stages, expected);

    for r in 1..=2 {
        for stage in ["region", "class", "student"] {
            let ck = Checkpoint::load(&checkpoint_path(a.path(), r, stage)).unwrap();
            assert_eq!((ck.round, ck.stage.as_str()), (r as u32, stage));
            let log = std::fs::read_to_string(a.path().join(format!("logs/round{r}-{stage}.csv"))).unwrap();
            assert_eq!(log.lines().count(), 4);
        }
        assert!(a.path().join(format!("prototypes/round{r}-region.csv")).is_file());
    }
    let last = Checkpoint::load(&a.path().join("student.ckpt")).unwrap().model().unwrap();
    assert_eq!(&last, &out.student);

    let rows = read_eval_csv(&a.path().join(EVAL_CSV)).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[5].miou, out.reports[1].student.as_ref().unwrap().miou);
    let md = render(&[("a".into(), rows.clone()), ("b".into(), rows)], Format::Markdown);
    assert!(md.contains("| a | 1 | region | target |"));
    assert!(md.contains("mean miou"));
}

#[test]
fn cli_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_ddb");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    tiny(2).save(&cfg_path).unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");

    let ok = |args: &[&str]| {
        let o = Command::new(bin).args(args).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let p = |x: &Path| x.display().to_string();
    ok(&["gen-data", "--config", &p(&cfg_path), "--out", &p(&data)]);
    assert!(data.join("manifest.txt").is_file());
    let run_dir = runs.join("seed5");
    let out = ok(&["train", "--config", &p(&cfg_path), "--out", &p(&run_dir), "--rounds", "1", "--seed", "5"]);
    assert!(out.contains("round 1:"), "{out}");
    let saved = Config::load(&run_dir.join("config.json")).unwrap();
    assert_eq!((saved.plan.rounds, saved.plan.seed), (1, 5));
    let out = ok(&["eval", "--checkpoint", &p(&run_dir.join("student.ckpt")), "--data", &p(&data)]);
    assert!(out.starts_with("target: mIoU"), "{out}");
    let csv = ok(&["report", "--runs", &p(&runs), "--format", "csv"]);
    assert!(csv.starts_with("run,round,model,domain,miou"), "{csv}");
    assert_eq!(csv.lines().count(), 4);
    let md = ok(&["report", "--runs", &p(&runs), "--format", "markdown"]);
    assert!(md.contains("| seed5 | 1 | student |"));

    let o = Command::new(bin).args(["eval", "--checkpoint", &p(&cfg_path), "--data", &p(&data)]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn cli_grad_check() {
    let o = Command::new(env!("CARGO_BIN_EXE_ddb")).args(["grad-check", "--instances", "2"]).output().unwrap();
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), ddb_core::gradcheck::OPS.len());
    assert!(out.lines().all(|l| l.ends_with("ok")));
}

#[test]
fn shipped_benchmark_config_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.json");
    assert_eq!(Config::load(&path).unwrap(), Config::benchmark(0));
}
