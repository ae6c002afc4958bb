//! Command-line front end: `run`, `oracle` and `report`.
//!
//! Exit codes: 0 success, 2 invalid input (config, pipeline, missing files),
//! 3 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::envs::{
    riccati_policy, DistractorEnv, DistractorParams, Environment, FiniteMdp, FiniteMdpEnv, LqgEnv,
    LqgParams,
};
use crate::error::Error;
use crate::framework::{run_pipeline, Pipeline, PipelineInput, PipelineKind, RunResult, Stage, StageKind, StageTrace, Unit};
use crate::hyper::HyperparamAssignment;
use crate::mdp::Horizon;
use crate::metrics::{evaluate_policy, ReturnKind};
use crate::policy::argmax;
use crate::rng::RngStream;

pub const CONFIG_VERSION: u32 = 1;

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment section of a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Lqg(LqgParams),
    Finite(FiniteMdp),
    Chain {
        n_states: usize,
        gamma: f64,
        horizon: Horizon,
    },
    Distractor(DistractorParams),
}

impl EnvSpec {
    pub fn build(&self, stream: &RngStream) -> crate::Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::Lqg(p) => Box::new(LqgEnv::new(p.clone(), stream)?),
            EnvSpec::Finite(m) => Box::new(FiniteMdpEnv::new(m.clone(), stream)?),
            EnvSpec::Chain {
                n_states,
                gamma,
                horizon,
            } => {
                if *n_states == 0 {
                    return Err(Error::InvalidArgument("chain needs n_states >= 1".into()));
                }
                Box::new(FiniteMdpEnv::new(FiniteMdp::chain(*n_states, *gamma, *horizon), stream)?)
            }
            EnvSpec::Distractor(p) => Box::new(DistractorEnv::new(p.clone(), stream)?),
        })
    }

    fn finite_mdp(&self) -> Option<FiniteMdp> {
        match self {
            EnvSpec::Finite(m) => Some(m.clone()),
            EnvSpec::Chain {
                n_states,
                gamma,
                horizon,
            } => Some(FiniteMdp::chain(*n_states, *gamma, *horizon)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// JSON Lines file, relative to the config file.
    pub path: PathBuf,
}

/// Appended as a fixed Monte-Carlo evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_episodes: usize,
    #[serde(default)]
    pub kind: ReturnKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub pipeline: PipelineKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<EnvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalSettings>,
    pub stages: Vec<Stage>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Sets `path` (dot separated; numeric segments index arrays) in `root`.
/// The value is parsed as a TOML literal, falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::invalid(format!("override `{assignment}` is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let segments: Vec<&str> = path.trim().split('.').collect();
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(seg.to_string(), value);
                    return Ok(());
                }
                t.entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| CliError::invalid(format!("`{seg}` in `{path}` must index an array")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| CliError::invalid(format!("index {idx} out of range ({len}) in `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::invalid(format!("`{path}` descends into a scalar"))),
        };
    }
    Err(CliError::invalid(format!("empty override path in `{assignment}`")))
}

/// Parses a config document, applying `--set` overrides first.
pub fn parse_config(text: &str, overrides: &[String]) -> CliResult<RunConfig> {
    let mut value: toml::Value = toml::from_str::<toml::Table>(text)
        .map(toml::Value::Table)
        .map_err(|e| CliError::invalid(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(v) = value.get("version") {
        if v.as_integer() != Some(CONFIG_VERSION as i64) {
            return Err(CliError::invalid(format!(
                "config: unsupported version {v} (expected {CONFIG_VERSION})"
            )));
        }
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| CliError::invalid(format!("config: {e}")))?;
    Ok(cfg)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// The pipeline this config describes, with the evaluation stage appended.
    pub fn pipeline(&self, seed: u64) -> CliResult<Pipeline> {
        let mut stages = self.stages.clone();
        if let Some(ev) = &self.evaluation {
            if stages.iter().any(|s| s.kind == StageKind::PolicyEvaluation) {
                return Err(CliError::invalid(
                    "config has both an [evaluation] section and a policy_evaluation stage",
                ));
            }
            let kind = serde_json::to_value(ev.kind).expect("kind serializes");
            stages.push(Stage {
                kind: StageKind::PolicyEvaluation,
                unit: Unit::fixed(
                    "monte_carlo",
                    HyperparamAssignment::new()
                        .with("n_episodes", ev.n_episodes as i64)
                        .with("kind", kind.as_str().unwrap_or("discounted")),
                ),
            });
        }
        Ok(Pipeline {
            kind: self.pipeline,
            stages,
            global_seed: seed,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub index: usize,
    pub kind: StageKind,
    pub unit_variant: String,
    pub algorithm: String,
    pub chosen_hyperparams: HyperparamAssignment,
    pub trace_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub run_id: String,
    pub seed: u64,
    pub pipeline_kind: PipelineKind,
    pub stages: Vec<StageSummary>,
    pub evaluation: Option<crate::metrics::ReturnEstimate>,
    pub policy_ref: String,
    pub dataset_ref: Option<String>,
}

/// Files of a finished run, keyed by relative path.
pub fn run_artifacts(run_id: &str, seed: u64, result: &RunResult) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stages = Vec::new();
    for r in &result.per_stage {
        let trace_ref = r.trace.as_ref().map(|t| {
            let path = format!("traces/stage_{}.json", r.index);
            files.insert(path.clone(), pretty(t));
            path
        });
        stages.push(StageSummary {
            index: r.index,
            kind: r.kind,
            unit_variant: r.unit_variant.clone(),
            algorithm: r.algorithm.clone(),
            chosen_hyperparams: r.chosen_hyperparams.clone(),
            trace_ref,
        });
    }
    let dataset_ref = result.final_dataset.as_ref().map(|d| {
        let path = "datasets/final.jsonl".to_string();
        files.insert(path.clone(), d.to_jsonl_string().into_bytes());
        path
    });
    files.insert("policy.json".into(), pretty(&result.final_policy));
    let doc = ResultDoc {
        run_id: run_id.into(),
        seed,
        pipeline_kind: result.pipeline_kind,
        stages,
        evaluation: result.evaluation,
        policy_ref: "policy.json".into(),
        dataset_ref,
    };
    files.insert("result.json".into(), pretty(&doc));
    files
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("artifacts serialize");
    s.push('\n');
    s.into_bytes()
}

fn write_files(out: &Path, files: &BTreeMap<String, Vec<u8>>, run_id: &str) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::runtime(format!("writing {}: {e}", out.display()));
    let mut entries = Vec::new();
    for (rel, bytes) in files {
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(&path, bytes).map_err(io)?;
        entries.push(ManifestEntry {
            path: rel.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        run_id: run_id.into(),
        files: entries,
    };
    fs::write(out.join("manifest.json"), pretty(&manifest)).map_err(io)
}

fn read_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

/// `run`: executes the configured pipeline and persists its artifacts.
pub fn cmd_run(config: &Path, seed: Option<u64>, out: Option<&Path>, overrides: &[String]) -> CliResult<PathBuf> {
    let cfg = read_config(config, overrides)?;
    let seed = seed
        .or(cfg.seed)
        .ok_or_else(|| CliError::invalid("no seed: pass --seed or set `seed` in the config"))?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::invalid("no output directory: pass --out or set `out` in the config"))?;
    let pipeline = cfg.pipeline(seed)?;
    let root = RngStream::new(seed);
    let env = cfg
        .environment
        .as_ref()
        .map(|e| e.build(&root.child(u64::MAX)))
        .transpose()
        .map_err(|e| CliError::invalid(format!("environment: {e}")))?;
    let dataset = match &cfg.dataset {
        Some(src) => {
            let path = config.parent().unwrap_or(Path::new(".")).join(&src.path);
            let file = fs::File::open(&path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
            Some(
                Dataset::read_jsonl(std::io::BufReader::new(file))
                    .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let input = PipelineInput { env, dataset };
    if let Err(diags) = crate::framework::validate_pipeline(&pipeline, &input.slots()) {
        return Err(CliError::invalid(format!("invalid pipeline:\n  {}", diags.join("\n  "))));
    }
    let result = run_pipeline(&pipeline, input, &root).map_err(|e| CliError::runtime(e.to_string()))?;
    let canonical = serde_json::to_string(&cfg).expect("config serializes");
    let run_id = sha256_hex(format!("{canonical}\n{seed}").as_bytes())[..16].to_string();
    let files = run_artifacts(&run_id, seed, &result);
    write_files(&out, &files, &run_id)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OracleReport {
    Lqg {
        gains: Vec<Vec<Vec<f64>>>,
        cost_matrices: Vec<Vec<Vec<f64>>>,
        noise_offsets: Vec<f64>,
        /// Unclipped closed form, averaged over the initial-state box.
        closed_form_return: f64,
        monte_carlo: crate::metrics::ReturnEstimate,
    },
    Finite {
        q_table: Vec<Vec<f64>>,
        greedy_actions: Vec<usize>,
        n_iterations: usize,
        /// Σ_s μ0(s) max_a Q(s, a).
        expected_return: f64,
    },
}

/// The analytic oracle for the environment of a config.
pub fn oracle_report(env: &EnvSpec, seed: u64, n_episodes: usize) -> CliResult<OracleReport> {
    if let Some(mdp) = env.finite_mdp() {
        mdp.validate().map_err(|e| CliError::invalid(e.to_string()))?;
        let n_iterations = match mdp.horizon {
            Horizon::Finite(h) => h,
            Horizon::Infinite => {
                // enough backups for γ^n · max|R| / (1-γ) < 1e-12
                let rmax = mdp.r.iter().flatten().fold(0.0f64, |m, r| m.max(r.abs())).max(1e-300);
                let g = mdp.gamma;
                if g == 0.0 {
                    1
                } else {
                    ((1e-12 * (1.0 - g) / rmax).ln() / g.ln()).ceil().max(1.0) as usize
                }
            }
        };
        let q = mdp.value_iteration(n_iterations);
        let greedy: Vec<usize> = q.iter().map(|row| argmax(row.iter().copied())).collect();
        let expected_return = q
            .iter()
            .zip(&mdp.mu0)
            .map(|(row, p)| p * row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        return Ok(OracleReport::Finite {
            q_table: q,
            greedy_actions: greedy,
            n_iterations,
            expected_return,
        });
    }
    match env {
        EnvSpec::Lqg(p) => {
            let root = RngStream::new(seed);
            let lqg = LqgEnv::new(p.clone(), &root.child(0)).map_err(|e| CliError::invalid(e.to_string()))?;
            let sol = lqg.riccati_solve().map_err(|e| CliError::runtime(e.to_string()))?;
            let policy = riccati_policy(&sol, lqg.spec().action_space.clone());
            let mc = evaluate_policy(&lqg, &policy, n_episodes, ReturnKind::Discounted, &root.child(1))
                .map_err(|e| CliError::runtime(e.to_string()))?;
            Ok(OracleReport::Lqg {
                closed_form_return: sol.expected_return_uniform(&p.init_low, &p.init_high),
                gains: sol.gains,
                cost_matrices: sol.cost_matrices,
                noise_offsets: sol.noise_offsets,
                monte_carlo: mc,
            })
        }
        _ => Err(CliError::invalid("oracle: only lqg, finite and chain environments have an oracle")),
    }
}

/// `oracle`: prints the analytic solution for the config's environment.
/// Accepts a full run config or a document holding only `[environment]`.
pub fn cmd_oracle(config: &Path, seed: u64, n_episodes: usize) -> CliResult<String> {
    let text = fs::read_to_string(config).map_err(|e| CliError::invalid(format!("{}: {e}", config.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::invalid(format!("config: {e}")))?;
    let env_value = table
        .get("environment")
        .cloned()
        .ok_or_else(|| CliError::invalid("config has no [environment] section"))?;
    let env: EnvSpec = env_value
        .try_into()
        .map_err(|e: toml::de::Error| CliError::invalid(format!("environment: {e}")))?;
    let report = oracle_report(&env, seed, n_episodes)?;
    Ok(serde_json::to_string_pretty(&report).expect("oracle serializes"))
}

fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x > 0.0 {
        "inf".into()
    } else if x < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// Report files derived from a run directory, keyed by path relative to
/// `<run>/report`.
pub fn report_files(run_dir: &Path) -> CliResult<BTreeMap<String, Vec<u8>>> {
    let read = |rel: &str| {
        fs::read(run_dir.join(rel)).map_err(|e| CliError::invalid(format!("{}: {e}", run_dir.join(rel).display())))
    };
    let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)
        .map_err(|e| CliError::invalid(format!("manifest.json: {e}")))?;
    let result: ResultDoc =
        serde_json::from_slice(&read("result.json")?).map_err(|e| CliError::invalid(format!("result.json: {e}")))?;
    let mut files = BTreeMap::new();
    let mut summary = format!("run {} (seed {}, {} pipeline)\n", manifest.run_id, result.seed, result.pipeline_kind);
    for st in &result.stages {
        summary.push_str(&format!(
            "stage {} {}: {} {} h = {}\n",
            st.index,
            st.kind,
            st.unit_variant,
            st.algorithm,
            serde_json::to_string(&st.chosen_hyperparams).expect("assignment serializes")
        ));
        let Some(trace_ref) = &st.trace_ref else { continue };
        let trace: StageTrace =
            serde_json::from_slice(&read(trace_ref)?).map_err(|e| CliError::invalid(format!("{trace_ref}: {e}")))?;
        if let StageTrace::Automatic(a) = &trace {
            for (j, s) in a.subunits.iter().enumerate() {
                summary.push_str(&format!(
                    "  subunit {j} {}: re-evaluated {}{}\n",
                    s.algorithm,
                    s.reevaluated.map_or("-".into(), fmt_f64),
                    if j == a.chosen { " (chosen)" } else { "" }
                ));
            }
        }
        for (label, t) in trace.tuning_traces() {
            let stem = if label.is_empty() {
                format!("stage_{}", st.index)
            } else {
                format!("stage_{}_{label}", st.index)
            };
            let best_rows = t
                .best_per_generation()
                .into_iter()
                .enumerate()
                .map(|(g, f)| vec![g.to_string(), fmt_f64(f)])
                .collect();
            files.insert(format!("{stem}_best_fitness.csv"), csv_bytes(&["generation", "best_fitness"], best_rows));
            let mut rows = Vec::new();
            for g in &t.generations {
                for (j, m) in g.members.iter().enumerate() {
                    for (name, v) in &m.h.values {
                        rows.push(vec![
                            g.index.to_string(),
                            j.to_string(),
                            name.clone(),
                            v.to_string(),
                            fmt_f64(m.fitness_mean),
                        ]);
                    }
                }
            }
            files.insert(
                format!("{stem}_hyperparams.csv"),
                csv_bytes(&["generation", "agent", "param_name", "value", "fitness"], rows),
            );
            if let Some(b) = &t.best_overall {
                summary.push_str(&format!(
                    "  best{}: fitness {} at generation {} agent {} h = {}\n",
                    if label.is_empty() { String::new() } else { format!(" {label}") },
                    fmt_f64(b.fitness),
                    b.generation,
                    b.member,
                    serde_json::to_string(&b.h).expect("assignment serializes")
                ));
            }
        }
    }
    match &result.evaluation {
        Some(e) => summary.push_str(&format!(
            "evaluation ({:?}, {} episodes): mean {} std {}\n",
            e.kind,
            e.n_episodes,
            fmt_f64(e.mean),
            fmt_f64(e.std)
        )),
        None => summary.push_str("evaluation: none\n"),
    }
    files.insert("summary.txt".into(), summary.into_bytes());
    Ok(files)
}

/// `report`: writes the CSV series and summary into `<run>/report`.
pub fn cmd_report(run_dir: &Path) -> CliResult<PathBuf> {
    let files = report_files(run_dir)?;
    let dir = run_dir.join("report");
    fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    for (name, bytes) in files {
        fs::write(dir.join(&name), bytes).map_err(|e| CliError::runtime(format!("{name}: {e}")))?;
    }
    Ok(dir)
}

#[derive(Parser, Debug)]
#[command(name = "autorl", version, about = "Automated RL pipelines with analytic oracles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a pipeline and write result.json, traces, datasets and a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dotted-path override, e.g. `stages.0.unit.h.alpha=0.2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the analytic oracle (Riccati gains or value-iteration Q-table).
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
    },
    /// Derive per-generation CSV series and a summary from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            set,
        } => cmd_run(&config, seed, out.as_deref(), &set).map(|dir| emit(&dir.display().to_string())),
        Command::Oracle {
            config,
            seed,
            episodes,
        } => cmd_oracle(&config, seed, episodes).map(|json| emit(&json)),
        Command::Report { run } => cmd_report(&run).map(|dir| emit(&dir.display().to_string())),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

// a closed pipe (`autorl oracle ... | head`) is not an error worth a panic
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}
