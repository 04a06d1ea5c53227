use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use cpdyn::experiments::{
    dynamics_preset, rank_one_preset, recovery_preset, run_dynamics, run_rank_one_experiment, run_recovery,
    ProblemSpec, RecoveryConfig, RECOVERY_PRESETS,
};
use cpdyn::optim::write_json_manifest;
use cpdyn::probe::{run_probe, ProbeConfig};
use cpdyn::Error;

#[derive(Parser)]
#[command(name = "cpdyn", version, about = "Gradient descent on CP factorizations and its implicit bias")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tensor completion from sampled entries.
    Complete(Common),
    /// Tensor sensing from Gaussian measurements.
    Sense(Common),
    /// Small-step runs with the conservation, norm-ODE and rate-bound checks.
    Dynamics(Common),
    /// Initialization-scale sweep on a rank-one Huber instance.
    Rank1(Common),
    /// Rank-k fits and a ridge baseline on binarized IDX images.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct Common {
    /// Built-in starting config (see --list-presets).
    #[arg(long)]
    preset: Option<String>,
    /// TOML or JSON config, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides with dotted keys, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    list_presets: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding the four standard IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Only this digit (smoke runs).
    #[arg(long)]
    digit: Option<u8>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Run(Error::Divergence { .. } | Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn to_value<T: Serialize>(v: &T) -> CliResult<toml::Value> {
    toml::Value::try_from(v).map_err(|e| usage(format!("cannot encode config: {e}")))
}

/// Preset without its placeholder seed, so a run never inherits one.
fn preset_table<T: Serialize>(preset: Option<T>, name: &str) -> CliResult<toml::Table> {
    let preset = preset.ok_or_else(|| usage(format!("unknown preset '{name}'")))?;
    match to_value(&preset)? {
        toml::Value::Table(mut t) => {
            t.remove("seed");
            Ok(t)
        }
        _ => Err(usage("preset is not a table")),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_config(path: &Path) -> CliResult<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        // Manifests nest the resolved config under "config".
        let json = json.get("config").cloned().unwrap_or(json);
        match to_value(&json)? {
            toml::Value::Table(t) => Ok(t),
            _ => Err(usage(format!("{}: expected an object", path.display()))),
        }
    } else {
        text.parse::<toml::Table>()
            .map_err(|e| usage(format!("{}: {e}", path.display())))
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for numbers, booleans, arrays and inline tables.
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override '{spec}' is not KEY=VALUE")))?;
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| usage(format!("empty key in '{spec}'")))?;
    let mut node = table;
    for p in parts {
        node = match node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(usage(format!("'{p}' in '{key}' is not a table"))),
        };
    }
    node.insert(last.to_string(), parse_scalar(raw.trim()));
    Ok(())
}

/// Preset, then config file, then `--set`, then `--seed`. A seed must be
/// given explicitly by one of the three.
fn resolve<T: DeserializeOwned>(mut table: toml::Table, common: &Common) -> CliResult<T> {
    if let Some(path) = &common.config {
        merge(&mut table, read_config(path)?);
    }
    for o in &common.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = common.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    if !table.contains_key("seed") {
        return Err(usage("a seed is required (--seed N); runs are never seeded implicitly"));
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("invalid config: {e}")))
}

fn prepare_out(common: &Common, default: &str) -> CliResult<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    preset: Option<&'a str>,
    version: &'a str,
    config: &'a T,
}

fn write_manifest<T: Serialize>(dir: &Path, command: &str, common: &Common, config: &T) -> CliResult<()> {
    let manifest = Manifest {
        command,
        preset: common.preset.as_deref(),
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    write_json_manifest(&dir.join("manifest.json"), &manifest)?;
    let toml = toml::to_string(config).map_err(|e| usage(format!("cannot encode config: {e}")))?;
    std::fs::write(dir.join("config.toml"), toml).map_err(Error::from)?;
    Ok(())
}

fn list(names: &[&str]) {
    for n in names {
        println!("{n}");
    }
}

fn cmd_recovery(common: &Common, sensing: bool) -> CliResult<()> {
    let command = if sensing { "sense" } else { "complete" };
    let presets: Vec<&str> = RECOVERY_PRESETS
        .iter()
        .copied()
        .filter(|n| n.starts_with("fig7") == sensing)
        .collect();
    if common.list_presets {
        list(&presets);
        return Ok(());
    }
    let base = match &common.preset {
        Some(name) if presets.contains(&name.as_str()) => preset_table(recovery_preset(name), name)?,
        Some(name) => return Err(usage(format!("unknown {command} preset '{name}'"))),
        None => toml::Table::new(),
    };
    let config: RecoveryConfig = resolve(base, common)?;
    if matches!(config.problem, ProblemSpec::Sensing { .. }) != sensing {
        return Err(usage(format!("`{command}` needs a {} problem", if sensing { "sensing" } else { "completion" })));
    }
    config.validate()?;
    let out = prepare_out(common, &format!("runs/{command}"))?;
    write_manifest(&out, command, common, &config)?;
    let report = run_recovery(&config, Some(&out))?;
    #[derive(Serialize)]
    struct WithRip<'a> {
        #[serde(flatten)]
        inner: Manifest<'a, RecoveryConfig>,
        rip: &'a Option<cpdyn::problems::RipEstimate>,
    }
    let manifest = WithRip {
        inner: Manifest {
            command,
            preset: common.preset.as_deref(),
            version: env!("CARGO_PKG_VERSION"),
            config: &config,
        },
        rip: &report.rip,
    };
    // Rewritten with the RIP estimate appended.
    write_json_manifest(&out.join("manifest.json"), &manifest)?;
    write_json_manifest(&out.join("report.json"), &report)?;
    for (i, r) in report.runs.iter().enumerate() {
        println!(
            "run {i}: std {:e}, {:?} after {} iters, loss {:.3e}, error {:.3e}, gap {:.3e}",
            r.init_std, r.stop, r.iters, r.final_loss, r.reconstruction_error, r.gap_ratio
        );
    }
    if let Some(rip) = &report.rip {
        println!("rip lower bound {:.3} (normalized {:.3})", rip.delta_lower_bound, rip.normalized_delta_lower_bound);
    }
    if let Some(r) = report.runs.iter().find(|r| r.diverged()) {
        return Err(Error::Divergence {
            iter: r.iters,
            detail: format!("run with init std {} diverged", r.init_std),
        }
        .into());
    }
    Ok(())
}

fn cmd_dynamics(common: &Common) -> CliResult<()> {
    if common.list_presets {
        list(&["desk"]);
        return Ok(());
    }
    let base = match &common.preset {
        Some(name) => preset_table(dynamics_preset(name), name)?,
        None => toml::Table::new(),
    };
    let config: cpdyn::experiments::DynamicsConfig = resolve(base, common)?;
    config.validate()?;
    let out = prepare_out(common, "runs/dynamics")?;
    write_manifest(&out, "dynamics", common, &config)?;
    let report = run_dynamics(&config, Some(&out))?;
    write_json_manifest(&out.join("report.json"), &report)?;
    for c in [&report.conservation, &report.ode, &report.bounds] {
        println!(
            "{}: {} (max {:.3e}, tolerance {:.1e})",
            c.name,
            if c.pass { "pass" } else { "fail" },
            c.max_violation,
            c.tolerance
        );
    }
    println!(
        "step halving: {} (drift ratio {:.2})",
        if report.halving_pass { "pass" } else { "fail" },
        report.halving_ratio
    );
    Ok(())
}

fn cmd_rank1(common: &Common) -> CliResult<()> {
    if common.list_presets {
        list(&["desk"]);
        return Ok(());
    }
    let base = match &common.preset {
        Some(name) => preset_table(rank_one_preset(name), name)?,
        None => toml::Table::new(),
    };
    let config: cpdyn::experiments::RankOneConfig = resolve(base, common)?;
    config.validate()?;
    let out = prepare_out(common, "runs/rank1")?;
    write_manifest(&out, "rank1", common, &config)?;
    let summary = run_rank_one_experiment(&config, Some(&out))?;
    write_json_manifest(&out.join("report.json"), &summary)?;
    for (i, a) in summary.alphas.iter().enumerate() {
        println!(
            "alpha {a:e}: crossing time {:.4e}, max distance {:.3e}, non-leading sum {:.3e}",
            summary.crossing_times[i], summary.max_distances[i], summary.nonleading_sums[i]
        );
    }
    if let Some(c) = &summary.sphere_starts {
        println!("random starts on the sphere: {}", if c.pass { "pass" } else { "fail" });
    }
    Ok(())
}

fn probe_preset(name: &str, dir: &Path) -> Option<ProbeConfig> {
    let mut cfg = ProbeConfig::new(dir, 0);
    match name {
        "desk" => {
            cfg.subsample = Some(10_000);
            cfg.ranks = vec![1];
        }
        "paper" => {}
        "ridge" => cfg.fit = false,
        _ => return None,
    }
    Some(cfg)
}

fn cmd_probe(args: &ProbeArgs) -> CliResult<()> {
    let common = &args.common;
    if common.list_presets {
        list(&["desk", "paper", "ridge"]);
        return Ok(());
    }
    let dir = args.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
    let mut base = match &common.preset {
        Some(name) => preset_table(probe_preset(name, &dir), name)?,
        None => toml::Table::new(),
    };
    if let Some(d) = args.digit {
        base.insert("digits".into(), toml::Value::Array(vec![toml::Value::Integer(d.into())]));
    }
    let config: ProbeConfig = resolve(base, common)?;
    config.validate()?;
    for p in [&config.train_images, &config.train_labels, &config.test_images, &config.test_labels] {
        if !p.is_file() {
            return Err(usage(format!("missing IDX file {}", p.display())));
        }
    }
    let out = prepare_out(common, "runs/probe")?;
    write_manifest(&out, "probe", common, &config)?;
    let results = run_probe(&config)?;
    results.write(&out)?;
    for s in results.summary() {
        let what = if s.k == 0 { "ridge".to_string() } else { format!("k={}", s.k) };
        println!(
            "{} {what}: train {:.4} ± {:.4}, test {:.4} ± {:.4}",
            s.variant.name(),
            s.train_mean,
            s.train_std,
            s.test_mean,
            s.test_std
        );
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Complete(c) | Command::Sense(c) | Command::Dynamics(c) | Command::Rank1(c) => c,
        Command::Probe(p) => &p.common,
    };
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Complete(c) => cmd_recovery(c, false),
        Command::Sense(c) => cmd_recovery(c, true),
        Command::Dynamics(c) => cmd_dynamics(c),
        Command::Rank1(c) => cmd_rank1(c),
        Command::Probe(p) => cmd_probe(p),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
