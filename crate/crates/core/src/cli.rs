//! Command-line front end: presets, scenario files, overrides and the
//! `run`/`sweep`/`verify`/`presets` subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::formation::SpringMatrix;
use crate::models::ModelKind;
use crate::simulation::{run, sweep, GainsConfig, ModelConfig, ReferenceConfig, ScenarioConfig, SweepSpec};
use crate::verify::{verify, VerifyOptions};

pub const PRESETS: [&str; 4] = ["formation-di", "formation-ss", "tracking-di", "tracking-ss"];

const X0: [f64; 6] = [-0.35, 4.59, 4.72, 0.64, 3.53, -1.26];
const Y0: [f64; 6] = [-1.11, -4.59, 2.42, 1.36, 1.56, 3.36];

fn hexagon_rows() -> Vec<Vec<f64>> {
    let k = SpringMatrix::hexagon();
    (0..k.len()).map(|i| (0..k.len()).map(|j| k.get(i, j)).collect()).collect()
}

fn hexagon_offsets(n: usize) -> Vec<Vec<f64>> {
    let s3 = 3f64.sqrt();
    let xs = [0.0, 2.0, 3.0, 2.0, 0.0, -1.0];
    let ys = [0.0, 0.0, s3, 2.0 * s3, 2.0 * s3, s3];
    (0..6).map(|i| [xs[i], ys[i], 0.0][..n].to_vec()).collect()
}

/// Expands a named preset.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let (kind, tracking) = match name {
        "formation-di" => (ModelKind::Di, false),
        "tracking-di" => (ModelKind::Di, true),
        "formation-ss" => (ModelKind::Ss, false),
        "tracking-ss" => (ModelKind::Ss, true),
        other => {
            return Err(Error::InvalidInput(format!("unknown preset '{other}' (expected one of {})", PRESETS.join(", "))))
        }
    };
    let n = kind.dim();
    let q0 = (0..6).map(|i| [X0[i], Y0[i], 0.0][..n].to_vec()).collect();
    let gains = match (kind, tracking) {
        (ModelKind::Di, false) => GainsConfig {
            kp: 1.0, kg: 15.0, ks: None, k0: 0.0, eta: 0.0, eta2: 7.5, b: 1.0 / 15.0, gamma: 0.01, dt: 0.01, t_final: 2.0, d_max: 0.0,
        },
        (ModelKind::Di, true) => GainsConfig {
            kp: 1.0, kg: 15.0, ks: None, k0: 2.0, eta: 0.0, eta2: 7.5, b: 1.0 / 15.0, gamma: 0.01, dt: 0.01, t_final: 3.5, d_max: 0.0,
        },
        (ModelKind::Ss, false) => GainsConfig {
            kp: 6.0, kg: 20.0, ks: None, k0: 0.0, eta: 20.0, eta2: 7.5, b: 1.0 / 20.0, gamma: 0.01, dt: 0.01, t_final: 2.0, d_max: 20.0,
        },
        (ModelKind::Ss, true) => GainsConfig {
            kp: 6.0, kg: 20.0, ks: None, k0: 1.5, eta: 50.0, eta2: 7.5, b: 1.0 / 20.0, gamma: 0.01, dt: 0.01, t_final: 2.5, d_max: 50.0,
        },
    };
    let model = match kind {
        ModelKind::Di => ModelConfig { kind, theta_bound_frac: 0.1, model_error: false, k_c: None },
        ModelKind::Ss => ModelConfig { kind, theta_bound_frac: 0.1, model_error: true, k_c: None },
    };
    Ok(ScenarioConfig {
        name: name.to_string(),
        seed: 1,
        estimator: match kind {
            ModelKind::Di => EstimatorKind::Zoh,
            ModelKind::Ss => EstimatorKind::Accurate,
        },
        permanent_comm: false,
        hold_input: false,
        model,
        gains,
        reference: if tracking {
            ReferenceConfig::Sinusoid { amplitude: 4.0, omega: 0.4, yaw_accel: 0.4 }
        } else {
            ReferenceConfig::Stationary
        },
        offsets: hexagon_offsets(n),
        spring: hexagon_rows(),
        q0,
        qdot0: vec![vec![0.0; n]; 6],
    })
}

/// Contents of a scenario file: a scenario (possibly starting from a preset)
/// and an optional sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub scenario: ScenarioConfig,
    pub sweep: Option<SweepSpec>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn parse_error(src: Option<&str>, e: toml::de::Error) -> Error {
    let line = src.zip(e.span()).map(|(s, span)| line_of(s, span.start));
    Error::Parse { line, message: e.message().to_string() }
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table(cfg: &ScenarioConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::InvalidInput(format!("cannot serialize scenario: {e}")))
}

/// Applies one `key.path=value` override. Values are parsed as TOML and fall
/// back to plain strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidInput(format!("override '{assignment}' is not of the form key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidInput(format!("override key '{key}': '{part}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Builds a configuration from an optional file, an optional preset name
/// and overrides, in that order of increasing precedence (a `preset` key in
/// the file is the base the file's own values are merged onto).
pub fn load_config(path: Option<&Path>, preset_name: Option<&str>, overrides: &[String]) -> Result<ConfigFile> {
    let (src, mut file) = match path {
        Some(p) => {
            let src = fs::read_to_string(p)?;
            let table: toml::Table = toml::from_str(&src).map_err(|e| parse_error(Some(&src), e))?;
            (Some(src), table)
        }
        None => (None, toml::Table::new()),
    };
    let file_preset = match file.remove("preset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => return Err(Error::Parse { line: None, message: format!("preset must be a string, got {other}") }),
        None => None,
    };
    let sweep_table = file.remove("sweep");
    let base_name = preset_name.map(str::to_string).or(file_preset);
    let mut table = match &base_name {
        Some(name) => to_table(&preset(name)?)?,
        None => toml::Table::new(),
    };
    deep_merge(&mut table, file);
    let mut sweep_table = match sweep_table {
        Some(toml::Value::Table(t)) => Some(t),
        Some(_) => return Err(Error::Parse { line: None, message: "sweep must be a table".into() }),
        None => None,
    };
    for o in overrides {
        if let Some(rest) = o.strip_prefix("sweep.") {
            apply_override(sweep_table.get_or_insert_with(toml::Table::new), rest)?;
        } else {
            apply_override(&mut table, o)?;
        }
    }
    let scenario: ScenarioConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        // Spans refer to the merged document, so only file-only configs keep line numbers.
        let direct = base_name.is_none() && overrides.is_empty();
        parse_error(if direct { src.as_deref() } else { None }, e)
    })?;
    let sweep = sweep_table
        .map(|t| toml::Value::Table(t).try_into::<SweepSpec>().map_err(|e| parse_error(None, e)))
        .transpose()?;
    crate::simulation::Scenario::build(&scenario)?;
    Ok(ConfigFile { scenario, sweep })
}

/// Parses a scenario file from disk.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    load_config(Some(path), None, &[]).map(|c| c.scenario)
}

/// Serializes a scenario so that [`parse_config`] reproduces it.
pub fn to_toml(cfg: &ScenarioConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::InvalidInput(format!("cannot serialize scenario: {e}")))
}

#[derive(Debug, Parser)]
#[command(name = "etfc", version, about = "Event-triggered formation control simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset used as the base configuration.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override a configuration value, e.g. `gains.eta=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its outputs.
    Run(ScenarioArgs),
    /// Run a grid over D_max and eta.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        replicates: Option<usize>,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the invariant battery.
    Verify {
        /// Make the spring matrix asymmetric to exercise failure reporting.
        #[arg(long, hide = true)]
        inject_asymmetric_k: bool,
    },
    /// List the shipped presets, or print one as TOML.
    Presets { name: Option<String> },
}

fn scenario_from(args: &ScenarioArgs) -> Result<ConfigFile> {
    if args.config.is_none() && args.preset.is_none() {
        return Err(Error::Usage("either --config or --preset is required".into()));
    }
    let mut cfg = load_config(args.config.as_deref(), args.preset.as_deref(), &args.set)?;
    if let Some(seed) = args.seed {
        cfg.scenario.seed = seed;
    }
    Ok(cfg)
}

/// Output directory of one run.
pub fn run_dir(root: &Path, cfg: &ScenarioConfig) -> PathBuf {
    root.join(format!("{}-seed{}", cfg.name, cfg.seed))
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(args) => {
            let cfg = scenario_from(&args)?.scenario;
            let series = run(&cfg)?;
            let dir = run_dir(&args.out, &cfg);
            series.write_outputs(&dir)?;
            let s = &series.summary;
            println!(
                "{}: N_m={} R_com={:.2}% P(T)={:.4e} eps0(T)={:.4e} xi={} -> {}",
                s.name,
                s.n_m,
                s.r_com,
                s.p_final,
                s.eps0_final,
                s.xi,
                dir.display()
            );
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            Ok(0)
        }
        Command::Sweep { scenario, replicates, jobs } => {
            let cfg = scenario_from(&scenario)?;
            let mut grid = cfg.sweep.unwrap_or(SweepSpec { d_max: vec![cfg.scenario.gains.d_max], eta: vec![cfg.scenario.gains.eta], replicates: 1 });
            if let Some(r) = replicates {
                grid.replicates = r;
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
            let result = pool.install(|| sweep(&cfg.scenario, &grid))?;
            fs::create_dir_all(&scenario.out)?;
            result.write_csv(&scenario.out.join("sweep.csv"))?;
            let mut w = csv::Writer::from_path(scenario.out.join("runs.csv"))?;
            for (cell, rep, s) in &result.runs {
                w.serialize(RunRow {
                    cell: *cell,
                    replicate: *rep,
                    seed: s.seed,
                    d_max: s.config.gains.d_max,
                    eta: s.config.gains.eta,
                    n_m: s.n_m,
                    r_com: s.r_com,
                    p_final: s.p_final,
                    eps0_final: s.eps0_final,
                    bound_lhs: s.bound_lhs,
                    xi: s.xi,
                    bound_holds: s.bound_holds,
                })?;
            }
            w.flush()?;
            println!("{} cells x {} replicates -> {}", result.rows.len(), grid.replicates, scenario.out.join("sweep.csv").display());
            Ok(0)
        }
        Command::Verify { inject_asymmetric_k } => {
            let report = verify(&VerifyOptions { inject_asymmetric_k, ..VerifyOptions::default() });
            for c in &report.checks {
                println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = report.failures();
            println!("{} checks, {} failed", report.checks.len(), failed);
            Ok(if failed == 0 { 0 } else { 4 })
        }
        Command::Presets { name } => {
            match name {
                Some(n) => print!("{}", to_toml(&preset(&n)?)?),
                None => PRESETS.iter().for_each(|p| println!("{p}")),
            }
            Ok(0)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RunRow {
    cell: usize,
    replicate: usize,
    seed: u64,
    d_max: f64,
    eta: f64,
    n_m: usize,
    r_com: f64,
    p_final: f64,
    eps0_final: f64,
    bound_lhs: f64,
    xi: f64,
    bound_holds: bool,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn presets_expand() {
        let f = preset("formation-di").unwrap();
        assert_eq!((f.gains.kp, f.gains.kg, f.gains.k0, f.gains.eta2), (1.0, 15.0, 0.0, 7.5));
        let t = preset("tracking-ss").unwrap();
        assert_eq!((t.gains.kp, t.gains.kg, t.gains.k0), (6.0, 20.0, 1.5));
        for p in PRESETS {
            crate::simulation::Scenario::build(&preset(p).unwrap()).unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn b_bound_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.toml", "preset = \"formation-di\"\n[gains]\nb = 1.0\n");
        let err = parse_config(&p).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("b =")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "u.toml", "preset = \"formation-di\"\n[gains]\nkq = 1.0\n");
        assert!(matches!(parse_config(&p), Err(Error::Parse { .. })));
        let p = write(dir.path(), "bad.toml", "name = \"x\"\nseed = = 3\n");
        match parse_config(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, Some(2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_apply_after_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "o.toml", "preset = \"formation-ss\"\nseed = 4\n[gains]\neta = 3.0\n");
        let c = load_config(Some(&p), None, &["gains.eta=7".into(), "estimator=zoh".into(), "sweep.replicates=2".into(), "sweep.d_max=[0.0]".into(), "sweep.eta=[1.0, 2.0]".into()]).unwrap();
        assert_eq!(c.scenario.seed, 4);
        assert_eq!(c.scenario.gains.eta, 7.0);
        assert_eq!(c.scenario.estimator, EstimatorKind::Zoh);
        assert_eq!(c.sweep.unwrap().eta, vec![1.0, 2.0]);
    }

    #[test]
    fn serialized_preset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            let p = write(dir.path(), "r.toml", &to_toml(&cfg).unwrap());
            assert_eq!(parse_config(&p).unwrap(), cfg);
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["etfc", "bogus"]), 1);
        assert_eq!(main_with_args(["etfc", "run"]), 1);
        assert_eq!(main_with_args(["etfc", "presets"]), 0);
        assert_eq!(main_with_args(["etfc", "verify", "--inject-asymmetric-k"]), 4);
    }
}
