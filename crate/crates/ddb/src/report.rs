//! Tables over one or more run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{PathContext, Result};
use crate::run::{read_eval_csv, EvalRow, EVAL_CSV};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Markdown,
}

/// `runs` itself when it holds an `eval.csv`, otherwise every child that does,
/// sorted by name.
pub fn find_runs(runs: &Path) -> Result<Vec<PathBuf>> {
    if runs.join(EVAL_CSV).is_file() {
        return Ok(vec![runs.to_path_buf()]);
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(runs).at(runs)? {
        let p = entry.at(runs)?.path();
        if p.join(EVAL_CSV).is_file() {
            found.push(p);
        }
    }
    found.sort();
    Ok(found)
}

pub fn load_runs(runs: &Path) -> Result<Vec<(String, Vec<EvalRow>)>> {
    find_runs(runs)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, read_eval_csv(&p.join(EVAL_CSV))?))
        })
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn render(runs: &[(String, Vec<EvalRow>)], format: Format) -> String {
    let classes = runs.iter().flat_map(|(_, r)| r.iter()).map(|r| r.iou.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["run", "round", "model", "domain", "miou"].map(String::from).to_vec();
    header.extend((0..classes).map(|c| format!("iou{c}")));
    let mut lines = Vec::new();
    for (name, rows) in runs {
        for r in rows {
            let mut cells = vec![name.clone(), r.round.to_string(), r.model.clone(), r.domain.clone(), pct(r.miou)];
            cells.extend((0..classes).map(|c| r.iou.get(c).copied().flatten().map_or(String::new(), pct)));
            lines.push(cells);
        }
    }
    let mut s = String::new();
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).expect("in-memory write");
            for l in &lines {
                w.write_record(l).expect("in-memory write");
            }
            s = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        }
        Format::Markdown => {
            writeln!(s, "| {} |", header.join(" | ")).expect("string write");
            writeln!(s, "|{}", "---|".repeat(header.len())).expect("string write");
            for l in &lines {
                writeln!(s, "| {} |", l.join(" | ")).expect("string write");
            }
            if runs.len() > 1 {
                writeln!(s, "\n| round | model | domain | mean miou | runs |\n|---|---|---|---|---|").expect("string write");
                let mut keys: Vec<(usize, String, String)> = Vec::new();
                for r in runs.iter().flat_map(|(_, r)| r.iter()) {
                    let k = (r.round, r.model.clone(), r.domain.clone());
                    if !keys.contains(&k) {
                        keys.push(k);
                    }
                }
                for (round, model, domain) in keys {
                    let v: Vec<f64> = runs
                        .iter()
                        .flat_map(|(_, r)| r.iter())
                        .filter(|r| r.round == round && r.model == model && r.domain == domain)
                        .map(|r| r.miou)
                        .collect();
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    writeln!(s, "| {round} | {model} | {domain} | {} | {} |", pct(mean), v.len()).expect("string write");
                }
            }
        }
    }
    s
}
