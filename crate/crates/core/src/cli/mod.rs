//! The `varnet` command line: `bench-uq`, `classify` and `gp-check`.
//!
//! Every run resolves its configuration (profile defaults, then `--config`,
//! then flags), writes `manifest.json` to the output directory and only
//! then starts work. Passing a previous `manifest.json` as `--config`
//! repeats that run.

pub mod classify;
pub mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::benchmark::{run_benchmark_suite, svg};
use crate::datasets::{data_root, load_mnist};
use crate::error::{Error, Result};
use crate::exec::{configure_threads, Execution};
use crate::gp::checks::{run_checks, CheckSettings};
use crate::tensor::RngStream;
use config::{overlay, BenchFile, ClassifyFile, Profile};

#[derive(Debug, Parser)]
#[command(name = "varnet", version, about = "Variational networks and an NNGP-scored uncertainty benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score uncertainty estimators against exact GP posteriors.
    BenchUq(Common),
    /// Train and evaluate classifiers on MNIST.
    Classify(Common),
    /// Verify the NNGP kernel and posterior against independent estimates.
    GpCheck(GpCheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory [default: results/<command>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed [default: 0, or the manifest's seed]
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
}

#[derive(Debug, Clone, Args)]
pub struct GpCheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scale the analytic kernel before comparing it with wide networks.
    #[arg(long, hide = true)]
    pub perturb_kernel: Option<f64>,
    #[arg(long, hide = true)]
    pub width: Option<usize>,
    #[arg(long, hide = true)]
    pub nets: Option<usize>,
    #[arg(long, hide = true)]
    pub pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpCheckSection {
    pub width: usize,
    pub nets: usize,
    pub pairs: usize,
    pub input_dim: usize,
    pub kernel_perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpCheckFile {
    pub gp_check: GpCheckSection,
}

impl GpCheckFile {
    pub fn defaults(profile: Profile) -> Self {
        let d = CheckSettings::default();
        let nets = match profile {
            Profile::Desk => d.nets,
            Profile::Paper => 10_000,
        };
        Self {
            gp_check: GpCheckSection {
                width: d.width,
                nets,
                pairs: d.pairs,
                input_dim: d.input_dim,
                kernel_perturbation: d.kernel_perturbation,
            },
        }
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config: serde_json::Value,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

/// Resolves the configuration for `command` and the effective seed.
fn resolve<T: Serialize + DeserializeOwned>(command: &str, common: &Common, defaults: T) -> Result<(T, u64)> {
    let Some(path) = &common.config else {
        return Ok((defaults, common.seed.unwrap_or(0)));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let m: Manifest = serde_json::from_str(&text).map_err(json_err)?;
        if m.command != command {
            return Err(Error::Config(format!("manifest is for `{}`, not `{command}`", m.command)));
        }
        let cfg = serde_json::from_value(m.config).map_err(json_err)?;
        return Ok((cfg, common.seed.unwrap_or(m.seed)));
    }
    Ok((overlay(&defaults, &text)?, common.seed.unwrap_or(0)))
}

fn prepare_out(command: &str, common: &Common, seed: u64, config: &impl Serialize) -> Result<PathBuf> {
    let out = common.out.clone().unwrap_or_else(|| Path::new("results").join(command));
    std::fs::create_dir_all(&out)?;
    let manifest = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        out_dir: out.clone(),
        config: serde_json::to_value(config).map_err(json_err)?,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err)? + "\n";
    std::fs::write(out.join("manifest.json"), text)?;
    Ok(out)
}

fn execution(common: &Common) -> Execution {
    if let Some(j) = common.jobs {
        configure_threads(j);
        if j == 1 {
            return Execution::Sequential;
        }
    }
    Execution::default()
}

/// Runs a parsed command. `Ok(false)` means the run completed but some
/// check or run failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::BenchUq(c) => bench_uq(&c),
        Command::Classify(c) => classify_cmd(&c),
        Command::GpCheck(a) => gp_check(&a),
    }
}

/// Process exit code for an outcome of [`run`]: 0 on success, 1 on a failed
/// run or check, 2 on bad configuration or missing data.
pub fn exit_code(outcome: &Result<bool>) -> i32 {
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Error::Config(_) | Error::Usage(_) | Error::Parse { .. }) => 2,
        Err(_) => 1,
    }
}

fn bench_uq(c: &Common) -> Result<bool> {
    let (cfg, seed) = resolve("bench-uq", c, BenchFile::defaults(c.profile))?;
    let cells = cfg.cells(seed)?;
    let exec = execution(c);
    let out = prepare_out("bench-uq", c, seed, &cfg)?;
    let started = Instant::now();
    eprintln!("bench-uq: {} cells, {} seeds each", cells.len(), cfg.grid.seed_count);
    let result = run_benchmark_suite(&cells, exec)?;
    std::fs::write(out.join("results.csv"), result.to_csv())?;
    std::fs::write(out.join("results.jsonl"), result.to_jsonl())?;
    for (id, chart) in svg::charts_by_config(&result.aggregates) {
        std::fs::write(out.join(format!("{id}.svg")), chart)?;
    }
    for f in &result.failures {
        eprintln!("failed: {} {} seed {}: {}", f.id.config_id, f.id.method, f.id.seed, f.error);
    }
    eprintln!(
        "bench-uq: {} runs, {} failures in {:.1}s -> {}",
        result.runs.len(),
        result.failures.len(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(result.failures.is_empty())
}

fn classify_cmd(c: &Common) -> Result<bool> {
    let (cfg, seed) = resolve("classify", c, ClassifyFile::defaults(c.profile))?;
    cfg.validate()?;
    let root = if cfg.classify.data_dir.is_empty() { data_root() } else { PathBuf::from(&cfg.classify.data_dir) };
    let (train, test) = load_mnist(&root)?;
    let exec = execution(c);
    let out = prepare_out("classify", c, seed, &cfg)?;
    let k = &cfg.classify;
    let mut splits = classify::make_splits(
        &train,
        &test,
        k.train_size,
        k.validation_size,
        k.test_size,
        &RngStream::new(seed).child("splits", 0),
    )?;
    if k.standardize {
        splits.standardize();
    }
    eprintln!(
        "classify: {} train / {} validation / {} test images",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    let started = Instant::now();
    let rows = classify::run_classification(&cfg, &splits, seed, exec)?;
    std::fs::write(out.join("results.csv"), classify::to_csv(&rows))?;
    let mut jsonl = String::new();
    for r in &rows {
        jsonl += &(serde_json::to_string(r).map_err(json_err)? + "\n");
    }
    std::fs::write(out.join("results.jsonl"), jsonl)?;
    if k.save_checkpoints {
        let dir = out.join("checkpoints");
        std::fs::create_dir_all(&dir)?;
        for r in &rows {
            r.model.save(&dir.join(format!("{}-{}.ckpt", r.architecture, r.method)))?;
        }
    }
    for r in &rows {
        eprintln!(
            "{:>6} {:>12}: val {:.4} test {:.4} entropy {:.4}{}",
            r.architecture,
            r.method,
            r.validation.accuracy,
            r.test.accuracy,
            r.test.mean_entropy,
            if r.top2 { "  *" } else { "" }
        );
    }
    eprintln!("classify: done in {:.1}s -> {}", started.elapsed().as_secs_f64(), out.display());
    Ok(true)
}

fn gp_check(a: &GpCheckArgs) -> Result<bool> {
    let c = &a.common;
    let (mut cfg, seed) = resolve("gp-check", c, GpCheckFile::defaults(c.profile))?;
    let g = &mut cfg.gp_check;
    g.width = a.width.unwrap_or(g.width);
    g.nets = a.nets.unwrap_or(g.nets);
    g.pairs = a.pairs.unwrap_or(g.pairs);
    g.kernel_perturbation = a.perturb_kernel.unwrap_or(g.kernel_perturbation);
    if g.width == 0 || g.nets < 2 || g.pairs == 0 || g.input_dim == 0 {
        return Err(Error::Config("gp_check needs width, pairs, input_dim >= 1 and nets >= 2".into()));
    }
    let exec = execution(c);
    let out = prepare_out("gp-check", c, seed, &cfg)?;
    let g = &cfg.gp_check;
    let settings = CheckSettings {
        width: g.width,
        nets: g.nets,
        pairs: g.pairs,
        input_dim: g.input_dim,
        seed,
        kernel_perturbation: g.kernel_perturbation,
    };
    let started = Instant::now();
    let outcomes = run_checks(&settings, exec);
    let mut csv = String::from("check,passed,detail\n");
    let mut jsonl = String::new();
    let mut stdout = std::io::stdout().lock();
    for o in &outcomes {
        // a closed pipe (e.g. `| head`) must not abort the run
        let _ = writeln!(stdout, "{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        csv += &format!("{},{},\"{}\"\n", o.name, o.passed, o.detail.replace('"', "\"\""));
        jsonl += &(serde_json::to_string(o).map_err(json_err)? + "\n");
    }
    std::fs::write(out.join("results.csv"), csv)?;
    std::fs::write(out.join("results.jsonl"), jsonl)?;
    eprintln!("gp-check: done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(outcomes.iter().all(|o| o.passed))
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = run(cli);
    if let Err(e) = &outcome {
        eprintln!("error: {e}");
    }
    exit_code(&outcome)
}
