use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddb::report::Format;
use ddb::{Checkpoint, Config};
use ddb_core::gradcheck::check_all;
use ddb_core::metrics::evaluate;

#[derive(Parser)]
#[command(name = "ddb", version, about = "Dual-path domain bridging on a synthetic segmentation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured domains to PPM/PGM files plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the alternating bridging and distillation rounds.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the evaluation split of a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Tabulate the evaluations of one run or a directory of runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

fn load_config(path: &std::path::Path) -> ddb::Result<Config> {
    let mut cfg = Config::load(path)?;
    cfg.resolve_dirs(path.parent().unwrap_or(std::path::Path::new(".")));
    Ok(cfg)
}

fn run(cli: Cli) -> ddb::Result<bool> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let manifest = ddb::dataset::generate_benchmark(&cfg, &out)?;
            cfg.save(&out.join("config.json"))?;
            println!("wrote {} samples to {}", manifest.entries.len(), out.display());
        }
        Command::Train { config, out, rounds, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = rounds {
                cfg.plan.rounds = r;
            }
            if let Some(s) = seed {
                cfg.plan.seed = s;
            }
            let outcome = ddb::run::train(&cfg, &out)?;
            for r in &outcome.reports {
                let show = |rep: &Option<ddb_core::metrics::EvalReport>| rep.as_ref().map_or("-".into(), |e| format!("{:.2}", 100.0 * e.miou));
                println!("round {}: region {} class {} student {}", r.round, show(&r.region), show(&r.class), show(&r.student));
            }
            println!("run written to {}", out.display());
        }
        Command::Eval { checkpoint, data } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let eval = ddb::dataset::load_eval(&data)?;
            let report = evaluate(&model, &eval)?;
            let rows = ddb::run::eval_rows(0, "checkpoint", &report);
            for r in &rows {
                let iou: Vec<String> = r.iou.iter().map(|v| v.map_or("-".into(), |x| format!("{:.2}", 100.0 * x))).collect();
                println!("{}: mIoU {:.2} [{}]", r.domain, 100.0 * r.miou, iou.join(" "));
            }
        }
        Command::GradCheck { instances, eps, seed, tolerance } => {
            let mut ok = true;
            for r in check_all(instances, eps, seed)? {
                let pass = r.max_rel_err < tolerance;
                ok &= pass;
                println!("{:<24} {:>3} instances {:>6} checks  max rel err {:.3e}  {}", r.op, r.instances, r.checked, r.max_rel_err, if pass { "ok" } else { "FAIL" });
            }
            return Ok(ok);
        }
        Command::Report { runs, format } => {
            let loaded = ddb::report::load_runs(&runs)?;
            if loaded.is_empty() {
                return Err(ddb::Error::Config(format!("no runs with evaluations under {}", runs.display())));
            }
            print!("{}", ddb::report::render(&loaded, format));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
