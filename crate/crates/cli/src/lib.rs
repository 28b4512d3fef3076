//! Orchestration behind the `es-adapt` binary: resolve a scenario, run the
//! MES loop, write the artifacts, and map failures onto exit codes.

pub mod output;

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::Deserialize;
use thiserror::Error;

use es_adapt::scenario::{parse_config, ConfigError, ScenarioPreset, CONFIG_KEYS, WAVEFORM_HELP};
use es_adapt::sim::{run_mes_loop, MesRun, SimConfig, SimError};

use output::{
    iterations_csv, trace_csv, write_atomic, RunManifest, ITERATIONS_FILE, MANIFEST_FILE, TRACE_FIRST_FILE,
    TRACE_LAST_FILE,
};

pub const OUT_ENV: &str = "ES_ADAPT_OUT";
pub const DEFAULT_OUT_ROOT: &str = "es_adapt_out";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{failed} of {total} sweep runs failed")]
    SweepFailed { failed: usize, total: usize },
}

impl CliError {
    /// 1 for schema or validation problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Sim(e) if e.is_config_error() => 1,
            _ => 2,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Output root: explicit flag, else `$ES_ADAPT_OUT`, else `./es_adapt_out`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// Preset, optional config document and overrides, with `iterations` applied last.
pub fn resolve(
    scenario: &str,
    document: Option<&str>,
    overrides: &[String],
    iterations: Option<usize>,
) -> Result<(ScenarioPreset, SimConfig), CliError> {
    let preset: ScenarioPreset = scenario.parse()?;
    let mut overrides = overrides.to_vec();
    if let Some(n) = iterations {
        overrides.push(format!("sim.iterations={n}"));
    }
    Ok((preset, parse_config(preset, document, &overrides)?))
}

fn sanity_checks(cfg: &SimConfig, run: &MesRun) -> Vec<(String, bool)> {
    let traces_finite = [&run.first_trace, &run.last_trace]
        .iter()
        .all(|t| t.z_norm.iter().chain(&t.t).all(|v| v.is_finite()));
    vec![
        ("records_complete".into(), run.records.len() == cfg.sim.iterations),
        ("costs_finite".into(), run.records.iter().all(|r| r.j.is_finite() && r.j >= 0.0)),
        ("estimates_finite".into(), run.final_state.delta_hat.iter().all(|v| v.is_finite())),
        ("traces_finite".into(), traces_finite),
    ]
}

/// Runs one resolved scenario and writes its artifacts into `out_dir`.
pub fn run_command(name: &str, cfg: &SimConfig, out_dir: &Path) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let run = run_mes_loop(cfg)?;

    let files = [
        (ITERATIONS_FILE, iterations_csv(&run.records)),
        (TRACE_FIRST_FILE, trace_csv(&run.first_trace)),
        (TRACE_LAST_FILE, trace_csv(&run.last_trace)),
    ];
    let mut artifacts = Vec::new();
    for (file, bytes) in files {
        let path = out_dir.join(file);
        let bytes = bytes.map_err(|e| CliError::io(&path, e))?;
        write_atomic(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        artifacts.push(path);
    }

    let config = toml::Table::try_from(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let last = run.records.last();
    let manifest = RunManifest {
        scenario: name.to_string(),
        config,
        artifacts,
        duration: started.elapsed(),
        checks: sanity_checks(cfg, &run),
        iterations: run.records.len(),
        final_j: last.map_or(f64::NAN, |r| r.j),
        final_delta_hat: run.final_state.delta_hat.clone(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    write_atomic(&path, manifest.render().as_bytes()).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

/// One entry of a sweep file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub scenario: String,
    /// Subdirectory name; defaults to the scenario name.
    pub name: Option<String>,
    pub iterations: Option<usize>,
    #[serde(default)]
    pub set: Vec<String>,
}

/// Sweep file: an optional output root and a list of `[[run]]` tables.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub out: Option<PathBuf>,
    pub run: Vec<SweepEntry>,
}

#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub name: String,
    pub scenario: ScenarioPreset,
    pub config: SimConfig,
}

/// Parses and resolves every sweep entry up front, so config errors surface before any run starts.
pub fn plan_sweep(text: &str) -> Result<(Option<PathBuf>, Vec<PlannedRun>), CliError> {
    let file: SweepFile = toml::from_str(text).map_err(|e| {
        CliError::Config(ConfigError::Schema {
            key: "sweep".into(),
            message: e.message().to_string(),
        })
    })?;
    if file.run.is_empty() {
        return Err(CliError::Usage("sweep file has no [[run]] entries".into()));
    }
    let mut seen = HashSet::new();
    let mut planned = Vec::with_capacity(file.run.len());
    for entry in file.run {
        let name = entry.name.clone().unwrap_or_else(|| entry.scenario.clone());
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(CliError::Usage(format!("sweep run name `{name}` is not a plain directory name")));
        }
        if !seen.insert(name.clone()) {
            return Err(CliError::Usage(format!("sweep run name `{name}` is used twice; set `name` to tell them apart")));
        }
        let (scenario, config) = resolve(&entry.scenario, None, &entry.set, entry.iterations)?;
        planned.push(PlannedRun { name, scenario, config });
    }
    Ok((file.out, planned))
}

/// Runs planned scenarios concurrently, each in `root/<name>`.
pub fn run_sweep(root: &Path, runs: &[PlannedRun]) -> Vec<(String, Result<RunManifest, CliError>)> {
    thread::scope(|s| {
        let handles: Vec<_> = runs
            .iter()
            .map(|r| {
                let dir = root.join(&r.name);
                (r.name.clone(), s.spawn(move || run_command(r.scenario.name(), &r.config, &dir)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(name, h)| {
                let result = h
                    .join()
                    .unwrap_or_else(|_| Err(CliError::Usage(format!("run `{name}` panicked"))));
                (name, result)
            })
            .collect()
    })
}

/// Config keys and presets, appended to `--help`.
pub fn help_epilogue() -> String {
    let mut text = String::from("Config keys (TOML document via --config, or --set section.key=value):\n");
    for (key, doc) in CONFIG_KEYS {
        text.push_str(&format!("  {key:<28} {doc}\n"));
    }
    text.push_str(&format!("  Waveforms: {WAVEFORM_HELP}\n\nScenario presets:\n"));
    for p in ScenarioPreset::ALL {
        text.push_str(&format!("  {:<20} {}\n", p.name(), p.citation()));
    }
    text.push_str(&format!(
        "\nOutput goes to <root>/<scenario>; root is --out, else ${OUT_ENV}, else ./{DEFAULT_OUT_ROOT}.\n\
         Exit status: 0 success, 1 schema/validation error, 2 runtime failure."
    ));
    text
}
