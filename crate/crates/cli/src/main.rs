use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use iavf_core::akm::distribution_gap;
use iavf_core::io::{pgm, weights};
use iavf_core::pipeline::model::render_fusion;
use iavf_core::pipeline::train::{evaluate_model, train_with};
use iavf_core::{selftest, Error, GrayImage, Model, RunConfig};

#[derive(Parser)]
#[command(name = "iavf", version, about = "Registration-free infrared/visible feature fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse a visible/infrared pair into a displayable image.
    Fuse {
        #[arg(long)]
        visible: PathBuf,
        #[arg(long)]
        infrared: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-scale distribution gap and measurement loss as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train on seeded synthetic pairs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        /// One JSON object per epoch.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 200)]
        train_samples: usize,
    },
    /// Evaluate detection on a seeded synthetic test set.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 50)]
        test_samples: usize,
    },
    /// Run the built-in property checks.
    Selftest,
}

fn load_model(config: &RunConfig, path: &Path) -> Result<Model> {
    let mut model = Model::new(config.model_config(), config.seed)?;
    let bytes = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    weights::load_into(&mut model.params, &weights::decode(&bytes)?)?;
    Ok(model)
}

fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(pgm::decode(&bytes)?)
}

fn fuse(
    visible: &Path,
    infrared: &Path,
    weights_path: &Path,
    config: &Path,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(&cfg, weights_path)?;
    let (vis, ir) = (read_pgm(visible)?, read_pgm(infrared)?);
    if (vis.width, vis.height) != (ir.width, ir.height) {
        return Err(Error::Shape(format!(
            "visible is {}x{} but infrared is {}x{}",
            vis.width, vis.height, ir.width, ir.height
        ))
        .into());
    }
    let stride = model.stride();
    let (pv, pi) = (vis.pad_to_multiple(stride), ir.pad_to_multiple(stride));
    let (fx, fy, fusion) = model.fuse(&pv, &pi)?;
    let image = render_fusion(&fusion.fused[0], (pv.width, pv.height), (vis.width, vis.height));
    fs::write(out, pgm::encode(&image)).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = metrics {
        let mut scales = Vec::new();
        for l in 0..fx.len() {
            scales.push(json!({
                "scale": l,
                "distribution_gap_before": distribution_gap(&fx[l], &fy[l])?,
                "distribution_gap_after": distribution_gap(&fx[l], &fusion.remodeled[l])?,
                "measurement_loss": fusion.measurement_losses[l],
            }));
        }
        let n = fx.len() as f64;
        let mean = |key: &str| scales.iter().map(|s| s[key].as_f64().unwrap_or(0.0)).sum::<f64>() / n;
        let doc = json!({
            "distribution_gap_before": mean("distribution_gap_before"),
            "distribution_gap_after": mean("distribution_gap_after"),
            "mean_measurement_loss": mean("measurement_loss"),
            "scales": scales,
        });
        fs::write(path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn train_cmd(config: &Path, out_weights: &Path, log: &Path, train_samples: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut file = fs::File::create(log).with_context(|| format!("creating {}", log.display()))?;
    let mut write_err = None;
    let outcome = train_with(&mut model, &cfg.train_config(train_samples), |r| {
        eprintln!(
            "epoch {:>3}  total {:.5}  detection {:.5}  mean L_m {:.5}",
            r.epoch, r.total_loss, r.detection_loss, r.mean_lm
        );
        let line = serde_json::to_string(r).expect("plain data");
        if let Err(e) = writeln!(file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log.display()));
    }
    fs::write(out_weights, weights::encode(&outcome.params)?)
        .with_context(|| format!("writing {}", out_weights.display()))?;
    Ok(())
}

fn eval_cmd(weights_path: &Path, config: &Path, report: &Path, test_samples: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(&cfg, weights_path)?;
    let result = evaluate_model(&model, cfg.seed, test_samples, &cfg.synth_config())?;
    println!("mAP@.50 {:.4}", result.map50);
    for c in &result.per_class {
        match c.ap {
            Some(ap) => println!("  {:<6} AP {ap:.4}  tp {} fp {} fn {}", c.name, c.tp, c.fp, c.fn_),
            None => println!("  {:<6} no ground truth", c.name),
        }
    }
    fs::write(report, serde_json::to_string_pretty(&result)?).with_context(|| format!("writing {}", report.display()))?;
    Ok(())
}

fn selftest_cmd() -> bool {
    let results = selftest::run_all(|r| println!("{r}"));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    failed == 0
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fuse {
            visible,
            infrared,
            weights,
            config,
            out,
            metrics,
        } => fuse(visible, infrared, weights, config, out, metrics.as_deref()),
        Command::Train {
            config,
            out_weights,
            log,
            train_samples,
        } => train_cmd(config, out_weights, log, *train_samples),
        Command::Eval {
            weights,
            config,
            report,
            test_samples,
        } => eval_cmd(weights, config, report, *test_samples),
        Command::Selftest => {
            return if selftest_cmd() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
