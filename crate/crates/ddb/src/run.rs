//! Training runs written to a directory of checkpoints, logs and reports.
//!
//! ```text
//! <out>/config.json
//! <out>/events.csv                        stage completion order
//! <out>/logs/round<r>-<stage>.csv         per-step losses
//! <out>/checkpoints/round<r>-<stage>.ckpt region, class and student models
//! <out>/prototypes/round<r>-<path>.csv    class centroids per teacher
//! <out>/eval.csv                          per-round, per-domain IoU
//! <out>/student.ckpt                      final student
//! ```

use std::path::{Path, PathBuf};

use ddb_core::ckd::PrototypeSet;
use ddb_core::metrics::EvalReport;
use ddb_core::pipeline::{run_ddb, DdbOutcome, RoundReport, StageEvent};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::dataset::build_data;
use crate::error::{PathContext, Result};

pub const EVAL_CSV: &str = "eval.csv";
pub const EVENTS_CSV: &str = "events.csv";
pub const FINAL_CHECKPOINT: &str = "student.ckpt";

pub fn checkpoint_path(out: &Path, round: usize, stage: &str) -> PathBuf {
    out.join("checkpoints").join(format!("round{round}-{stage}.ckpt"))
}

pub fn log_path(out: &Path, round: usize, stage: &str) -> PathBuf {
    out.join("logs").join(format!("round{round}-{stage}.csv"))
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    for r in rows {
        w.serialize(r).at(path)?;
    }
    w.flush().at(path)
}

pub fn write_prototypes(path: &Path, set: &PrototypeSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    let mut header = vec!["class".to_string(), "count".to_string()];
    header.extend((0..set.dim()).map(|i| format!("f{i}")));
    w.write_record(&header).at(path)?;
    for c in 0..set.classes() {
        let mut row = vec![c.to_string(), set.counts[c].to_string()];
        row.extend(set.centroid(c).iter().map(|v| format!("{v:e}")));
        w.write_record(&row).at(path)?;
    }
    w.flush().at(path)
}

/// One line of `eval.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub round: usize,
    pub model: String,
    pub domain: String,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
}

pub fn eval_rows(round: usize, model: &str, report: &EvalReport) -> Vec<EvalRow> {
    let mut rows: Vec<EvalRow> = report
        .domains
        .iter()
        .map(|d| EvalRow { round, model: model.into(), domain: d.domain.clone(), miou: d.miou, iou: d.iou.clone() })
        .collect();
    if report.domains.len() > 1 {
        let classes = report.domains[0].iou.len();
        let iou = (0..classes).map(|c| report.class_iou(c)).collect();
        rows.push(EvalRow { round, model: model.into(), domain: "mean".into(), miou: report.miou, iou });
    }
    rows
}

pub fn round_rows(reports: &[RoundReport]) -> Vec<EvalRow> {
    let mut rows = Vec::new();
    for r in reports {
        for (model, rep) in [("region", &r.region), ("class", &r.class), ("student", &r.student)] {
            if let Some(rep) = rep {
                rows.extend(eval_rows(r.round, model, rep));
            }
        }
    }
    rows
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    let classes = rows.first().map_or(0, |r| r.iou.len());
    let mut header: Vec<String> = ["round", "model", "domain", "miou"].map(String::from).to_vec();
    header.extend((0..classes).map(|c| format!("iou{c}")));
    w.write_record(&header).at(path)?;
    for r in rows {
        let mut rec = vec![r.round.to_string(), r.model.clone(), r.domain.clone(), r.miou.to_string()];
        rec.extend(r.iou.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
        w.write_record(&rec).at(path)?;
    }
    w.flush().at(path)
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).at(path)?;
    let bad = |m: &str| crate::error::format_err(path, m);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.at(path)?;
        if rec.len() < 4 {
            return Err(bad("eval row has fewer than 4 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("non-numeric IoU field"));
        rows.push(EvalRow {
            round: rec[0].parse().map_err(|_| bad("non-integer round"))?,
            model: rec[1].into(),
            domain: rec[2].into(),
            miou: num(&rec[3])?,
            iou: rec.iter().skip(4).map(|s| if s.is_empty() { Ok(None) } else { num(s).map(Some) }).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

#[derive(serde::Serialize)]
struct EventRow {
    seq: usize,
    round: usize,
    stage: &'static str,
}

/// Runs the configured plan, persisting every stage under `out`.
pub fn train(cfg: &Config, out: &Path) -> Result<DdbOutcome> {
    cfg.validate()?;
    let (data, eval) = build_data(cfg)?;
    for sub in ["logs", "checkpoints", "prototypes"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).at(&d)?;
    }
    cfg.save(&out.join("config.json"))?;
    let mut events = Vec::new();
    let mut io_result = Ok(());
    let mut observer = |ev: StageEvent<'_>| -> ddb_core::Result<()> {
        let (round, stage) = (ev.round(), ev.stage().tag());
        events.push(EventRow { seq: events.len(), round, stage });
        let step = match ev {
            StageEvent::PathTrained { teacher, logs, rng, .. } => write_rows(&log_path(out, round, stage), logs)
                .and_then(|_| Checkpoint::from_model(teacher, rng, round as u32, stage).save(&checkpoint_path(out, round, stage))),
            StageEvent::PrototypesReady { prototypes: Some((r, c)), .. } => {
                let dir = out.join("prototypes");
                write_prototypes(&dir.join(format!("round{round}-region.csv")), r)
                    .and_then(|_| write_prototypes(&dir.join(format!("round{round}-class.csv")), c))
            }
            StageEvent::StudentTrained { student, logs, rng, .. } => write_rows(&log_path(out, round, stage), logs)
                .and_then(|_| Checkpoint::from_model(student, rng, round as u32, stage).save(&checkpoint_path(out, round, stage))),
            _ => Ok(()),
        };
        step.map_err(|e| {
            let msg = e.to_string();
            io_result = Err(e);
            ddb_core::Error::Config(msg)
        })
    };
    let outcome = run_ddb(&cfg.plan, &cfg.arch, &data, &eval, &mut observer);
    io_result?;
    let outcome = outcome?;
    write_rows(&out.join(EVENTS_CSV), &events)?;
    if !eval.is_empty() {
        write_eval_csv(&out.join(EVAL_CSV), &round_rows(&outcome.reports))?;
    }
    let last = checkpoint_path(out, cfg.plan.rounds, "student");
    std::fs::copy(&last, out.join(FINAL_CHECKPOINT)).at(&last)?;
    Ok(outcome)
}
