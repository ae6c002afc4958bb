//! Stages, units and pipelines.
//!
//! A [`Pipeline`] is an ordered list of stages, each filled by a [`Unit`].
//! Stages exchange typed slots ([`SlotType`]); the environment is carried
//! alongside the dataset through the offline stages so every stage can stay
//! a pure function of its inputs.
//!
//! Streams: stage `i` executes on `root/[i, 0]` and tunes on `root/[i, 1]`.
//! The execution stream does not depend on the unit variant, so a tuned unit
//! and the fixed unit holding its chosen hyper-parameters produce identical
//! output.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::envs::{environment_copy, Environment};
use crate::error::{Error, Result};
use crate::hyper::{HpValue, HyperparamAssignment, HyperparamSpace};
use crate::metrics::{evaluate_policy, knn_entropy, ReturnEstimate, ReturnKind};
use crate::policy::Policy;
use crate::regress::{Basis, RegressorSpec};
use crate::rng::RngStream;
use crate::tuner::{Fitness, TunerConfig, TuningTrace};
use crate::units::{
    dg_random_uniform, dp_1nn_impute, dp_mean_impute, fe_engineer_environment,
    fe_forward_mi_select, pe_monte_carlo, pg_fqi, pg_gpomdp, pg_lspi, pg_q_learning, Baseline,
    FeatureTransform, FqiConfig, GpomdpConfig, MiObjective,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotType {
    Environment,
    Dataset,
    Policy,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    DataGeneration,
    DataPreparation,
    FeatureEngineering,
    PolicyGeneration,
    PolicyEvaluation,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StageKind::DataGeneration => "DataGeneration",
            StageKind::DataPreparation => "DataPreparation",
            StageKind::FeatureEngineering => "FeatureEngineering",
            StageKind::PolicyGeneration => "PolicyGeneration",
            StageKind::PolicyEvaluation => "PolicyEvaluation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Online,
    Offline,
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineKind::Online => "online",
            PipelineKind::Offline => "offline",
        })
    }
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::DataGeneration,
        StageKind::DataPreparation,
        StageKind::FeatureEngineering,
        StageKind::PolicyGeneration,
        StageKind::PolicyEvaluation,
    ];

    fn rank(self) -> usize {
        self as usize
    }

    pub fn allowed_in(self, pk: PipelineKind) -> bool {
        pk == PipelineKind::Offline
            || matches!(
                self,
                StageKind::FeatureEngineering | StageKind::PolicyGeneration | StageKind::PolicyEvaluation
            )
    }

    /// Slots consumed by the stage.
    pub fn inputs(self, pk: PipelineKind) -> &'static [SlotType] {
        use SlotType::*;
        match (self, pk) {
            (StageKind::DataGeneration, _) => &[Environment],
            (StageKind::DataPreparation, _) => &[Dataset],
            (StageKind::FeatureEngineering, PipelineKind::Online) => &[Environment],
            (StageKind::FeatureEngineering, PipelineKind::Offline) => &[Environment, Dataset],
            (StageKind::PolicyGeneration, PipelineKind::Online) => &[Environment],
            (StageKind::PolicyGeneration, PipelineKind::Offline) => &[Dataset],
            (StageKind::PolicyEvaluation, _) => &[Environment, Policy],
        }
    }

    /// Slots produced by the stage.
    pub fn outputs(self, pk: PipelineKind) -> &'static [SlotType] {
        use SlotType::*;
        match (self, pk) {
            (StageKind::DataGeneration, _) => &[Environment, Dataset],
            (StageKind::DataPreparation, _) => &[Dataset],
            (StageKind::FeatureEngineering, PipelineKind::Online) => &[Environment],
            (StageKind::FeatureEngineering, PipelineKind::Offline) => &[Environment, Dataset],
            (StageKind::PolicyGeneration, _) => &[Policy],
            (StageKind::PolicyEvaluation, _) => &[Scalar],
        }
    }

    pub fn default_index(self) -> Option<IndexSpec> {
        match self {
            StageKind::DataGeneration => Some(IndexSpec::Entropy { k: 5 }),
            StageKind::FeatureEngineering => Some(IndexSpec::MutualInformation {
                k: 5,
                objective: MiObjective::Raw,
            }),
            StageKind::PolicyGeneration => Some(IndexSpec::Return {
                n_episodes: 100,
                kind: ReturnKind::Discounted,
            }),
            StageKind::DataPreparation | StageKind::PolicyEvaluation => None,
        }
    }
}

/// Slots alive after a stage: what it produces plus what passes through.
/// The environment passes through every stage that does not replace it;
/// a dataset survives until policy generation consumes it.
fn live_after(kind: StageKind, pk: PipelineKind, live: &BTreeSet<SlotType>) -> BTreeSet<SlotType> {
    let mut out: BTreeSet<SlotType> = kind.outputs(pk).iter().copied().collect();
    match kind {
        StageKind::PolicyGeneration | StageKind::PolicyEvaluation => {
            if live.contains(&SlotType::Environment) {
                out.insert(SlotType::Environment);
            }
            if kind == StageKind::PolicyEvaluation && live.contains(&SlotType::Policy) {
                out.insert(SlotType::Policy);
            }
        }
        _ => {
            out.extend(live.iter().copied().filter(|s| *s == SlotType::Environment || *s == SlotType::Dataset));
        }
    }
    out
}

/// Performance index ℓ used to score a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum IndexSpec {
    /// Monte-Carlo return of the generated policy.
    Return { n_episodes: usize, kind: ReturnKind },
    /// k-NN entropy of the generated state-action sample.
    Entropy { k: usize },
    /// k-NN mutual information of the selected features.
    MutualInformation { k: usize, objective: MiObjective },
}

impl IndexSpec {
    fn fits(&self, kind: StageKind) -> bool {
        matches!(
            (self, kind),
            (IndexSpec::Return { .. }, StageKind::PolicyGeneration)
                | (IndexSpec::Entropy { .. }, StageKind::DataGeneration)
                | (IndexSpec::MutualInformation { .. }, StageKind::FeatureEngineering)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunableUnit {
    pub algorithm: String,
    pub space: HyperparamSpace,
    #[serde(default)]
    pub tuner: TunerConfig,
    /// Defaults to the stage kind's index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<IndexSpec>,
    /// Hyper-parameters held fixed while the space is searched.
    #[serde(default)]
    pub fixed: HyperparamAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum Unit {
    Fixed {
        algorithm: String,
        #[serde(default)]
        h: HyperparamAssignment,
    },
    Tunable(TunableUnit),
    Automatic {
        subunits: Vec<TunableUnit>,
        /// Common index for the final comparison; defaults to the stage kind's.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        index: Option<IndexSpec>,
    },
}

impl Unit {
    pub fn fixed(algorithm: &str, h: HyperparamAssignment) -> Self {
        Unit::Fixed {
            algorithm: algorithm.into(),
            h,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Unit::Fixed { .. } => "fixed",
            Unit::Tunable(_) => "tunable",
            Unit::Automatic { .. } => "automatic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub kind: StageKind,
    pub unit: Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipeline {
    pub kind: PipelineKind,
    pub stages: Vec<Stage>,
    pub global_seed: u64,
}

/// Hyper-parameter names accepted by each algorithm, or `None` if the
/// algorithm does not exist for that stage and pipeline kind.
pub fn algorithm_params(kind: StageKind, pk: PipelineKind, algorithm: &str) -> Option<&'static [&'static str]> {
    use PipelineKind::*;
    use StageKind::*;
    Some(match (kind, pk, algorithm) {
        (DataGeneration, Offline, "random_uniform") => &["n_episodes"],
        (DataPreparation, Offline, "mean_impute" | "knn1_impute") => &[],
        (FeatureEngineering, Online, "forward_mi") => &["k", "n_features", "objective", "standardize", "n_episodes"],
        (FeatureEngineering, Offline, "forward_mi") => &["k", "n_features", "objective", "standardize"],
        (PolicyGeneration, Online, "q_learning") => &["episodes", "alpha", "epsilon"],
        (PolicyGeneration, Online, "gpomdp") => {
            &["learning_rate", "n_epochs", "n_episodes_per_fit", "init_std", "baseline"]
        }
        (PolicyGeneration, Offline, "fqi") => {
            &["n_iterations", "regressor", "n_estimators", "min_samples_split", "k"]
        }
        (PolicyGeneration, Offline, "lspi") => &["n_iterations", "basis"],
        (PolicyEvaluation, _, "monte_carlo") => &["n_episodes", "kind"],
        _ => return None,
    })
}

/// Checks stage order, slot chaining and unit well-formedness against the
/// slots supplied as pipeline input. Returns every violation found.
pub fn validate_pipeline(p: &Pipeline, input: &[SlotType]) -> std::result::Result<(), Vec<String>> {
    let mut errs = Vec::new();
    let pk = p.kind;
    let stage_name = |i: usize| format!("stage {i} ({})", p.stages[i].kind);

    if p.stages.is_empty() {
        errs.push("pipeline has no stages".to_string());
    }
    for (i, st) in p.stages.iter().enumerate() {
        if !st.kind.allowed_in(pk) {
            errs.push(format!("{}: {} is not allowed in an {pk} pipeline", stage_name(i), st.kind));
        }
    }
    for i in 1..p.stages.len() {
        let (a, b) = (p.stages[i - 1].kind, p.stages[i].kind);
        if a == b {
            errs.push(format!("{} -> {}: duplicate {a} stage", stage_name(i - 1), stage_name(i)));
        } else if a.rank() > b.rank() {
            errs.push(format!("{} -> {}: {a} before {b}", stage_name(i - 1), stage_name(i)));
        }
    }
    if !p.stages.iter().any(|s| s.kind == StageKind::PolicyGeneration) {
        errs.push("pipeline has no PolicyGeneration stage".to_string());
    }

    let mut live: BTreeSet<SlotType> = input.iter().copied().collect();
    for (i, st) in p.stages.iter().enumerate() {
        for slot in st.kind.inputs(pk) {
            if !live.contains(slot) {
                errs.push(format!("{}: {} requires {:?}", stage_name(i), st.kind, slot));
            }
        }
        let tuned_pg_offline = st.kind == StageKind::PolicyGeneration
            && pk == PipelineKind::Offline
            && !matches!(st.unit, Unit::Fixed { .. });
        if tuned_pg_offline && !live.contains(&SlotType::Environment) {
            errs.push(format!(
                "{}: tuned PolicyGeneration requires Environment to evaluate its index",
                stage_name(i)
            ));
        }
        for e in validate_unit(st.kind, pk, &st.unit) {
            errs.push(format!("{}: {e}", stage_name(i)));
        }
        live = live_after(st.kind, pk, &live);
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

fn validate_algorithm(kind: StageKind, pk: PipelineKind, algorithm: &str, names: &[&String]) -> Vec<String> {
    let Some(known) = algorithm_params(kind, pk, algorithm) else {
        return vec![format!("unknown algorithm `{algorithm}` for {kind}")];
    };
    names
        .iter()
        .filter(|n| !known.contains(&n.as_str()))
        .map(|n| format!("algorithm `{algorithm}` has no hyper-parameter `{n}`"))
        .collect()
}

fn validate_tunable(kind: StageKind, pk: PipelineKind, t: &TunableUnit, index: Option<&IndexSpec>) -> Vec<String> {
    let mut errs = Vec::new();
    let names: Vec<&String> = t
        .space
        .entries()
        .iter()
        .map(|e| &e.name)
        .chain(t.fixed.values.keys())
        .collect();
    errs.extend(validate_algorithm(kind, pk, &t.algorithm, &names));
    if let Err(e) = t.space.validate() {
        errs.push(e.to_string());
    }
    if let Some(dup) = t.fixed.values.keys().find(|k| t.space.domain(k).is_some()) {
        errs.push(format!("`{dup}` is both fixed and tuned"));
    }
    if let Err(e) = t.tuner.validate() {
        errs.push(e.to_string());
    }
    if kind == StageKind::FeatureEngineering && pk == PipelineKind::Online && t.space.domain("n_episodes").is_some() {
        errs.push("n_episodes cannot be tuned: the selection dataset is shared by all candidates".into());
    }
    match index.cloned().or_else(|| kind.default_index()) {
        None => errs.push(format!("{kind} has no performance index; only fixed units are allowed")),
        Some(ix) if !ix.fits(kind) => errs.push(format!("index {ix:?} does not apply to {kind}")),
        Some(_) => {}
    }
    errs
}

fn validate_unit(kind: StageKind, pk: PipelineKind, unit: &Unit) -> Vec<String> {
    match unit {
        Unit::Fixed { algorithm, h } => {
            let names: Vec<&String> = h.values.keys().collect();
            validate_algorithm(kind, pk, algorithm, &names)
        }
        _ if kind == StageKind::PolicyEvaluation => {
            vec!["PolicyEvaluation admits only fixed units".into()]
        }
        Unit::Tunable(t) => validate_tunable(kind, pk, t, t.index.as_ref()),
        Unit::Automatic { subunits, index } => {
            let mut errs = Vec::new();
            if subunits.is_empty() {
                errs.push("automatic unit has no subunits".into());
            }
            if let Some(ix) = index {
                if !ix.fits(kind) {
                    errs.push(format!("index {ix:?} does not apply to {kind}"));
                }
            }
            for (j, t) in subunits.iter().enumerate() {
                for e in validate_tunable(kind, pk, t, t.index.as_ref()) {
                    errs.push(format!("subunit {j}: {e}"));
                }
            }
            errs
        }
    }
}

/// What a pipeline starts from.
#[derive(Debug, Clone, Default)]
pub struct PipelineInput {
    pub env: Option<Box<dyn Environment>>,
    pub dataset: Option<Dataset>,
}

impl PipelineInput {
    pub fn env(env: Box<dyn Environment>) -> Self {
        Self {
            env: Some(env),
            dataset: None,
        }
    }

    pub fn slots(&self) -> Vec<SlotType> {
        let mut s = Vec::new();
        if self.env.is_some() {
            s.push(SlotType::Environment);
        }
        if self.dataset.is_some() {
            s.push(SlotType::Dataset);
        }
        s
    }
}

/// Live slots between stages.
#[derive(Debug, Clone, Default)]
struct Slots {
    env: Option<Box<dyn Environment>>,
    dataset: Option<Dataset>,
    policy: Option<Policy>,
    scalar: Option<ReturnEstimate>,
}

impl Slots {
    fn types(&self) -> BTreeSet<SlotType> {
        let mut s = BTreeSet::new();
        if self.env.is_some() {
            s.insert(SlotType::Environment);
        }
        if self.dataset.is_some() {
            s.insert(SlotType::Dataset);
        }
        if self.policy.is_some() {
            s.insert(SlotType::Policy);
        }
        if self.scalar.is_some() {
            s.insert(SlotType::Scalar);
        }
        s
    }
}

/// Read-only view of a stage's inputs.
#[derive(Clone, Copy)]
pub struct StageContext<'a> {
    pub kind: StageKind,
    pub pipeline_kind: PipelineKind,
    pub env: Option<&'a dyn Environment>,
    pub dataset: Option<&'a Dataset>,
}

impl<'a> StageContext<'a> {
    fn env(&self) -> Result<&'a dyn Environment> {
        self.env
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs an environment", self.kind)))
    }

    fn dataset(&self) -> Result<&'a Dataset> {
        self.dataset
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs a dataset", self.kind)))
    }
}

/// Result of executing one algorithm.
#[derive(Debug, Clone)]
pub enum StageOutput {
    Data {
        env: Option<Box<dyn Environment>>,
        dataset: Dataset,
    },
    Env(Box<dyn Environment>),
    Policy(Policy),
    Scalar(ReturnEstimate),
}

fn hp_text<'a>(h: &'a HyperparamAssignment, name: &str, default: &'a str) -> Result<&'a str> {
    h.str_or(name, default)
}

fn parse_kind(s: &str) -> Result<ReturnKind> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Error::BadHyperparam {
            name: "kind".into(),
            reason: format!("unknown return kind `{s}`"),
        })
}

fn fqi_config(h: &HyperparamAssignment) -> Result<FqiConfig> {
    let regressor = match hp_text(h, "regressor", "extra_trees")? {
        "extra_trees" => RegressorSpec::ExtraTrees {
            n_estimators: h.usize_or("n_estimators", 100)?,
            min_samples_split: h.usize_or("min_samples_split", 10)?,
        },
        "knn" => RegressorSpec::Knn { k: h.usize_or("k", 5)? },
        "tabular" => RegressorSpec::TabularMean,
        other => {
            return Err(Error::BadHyperparam {
                name: "regressor".into(),
                reason: format!("unknown regressor `{other}`"),
            })
        }
    };
    Ok(FqiConfig {
        n_iterations: h.usize_or("n_iterations", 60)?,
        regressor,
        action_grid: None,
    })
}

fn gpomdp_config(h: &HyperparamAssignment) -> Result<GpomdpConfig> {
    let d = GpomdpConfig::default();
    let baseline = match hp_text(h, "baseline", "mean")? {
        "mean" => Baseline::Mean,
        "none" => Baseline::None,
        other => {
            return Err(Error::BadHyperparam {
                name: "baseline".into(),
                reason: format!("unknown baseline `{other}`"),
            })
        }
    };
    Ok(GpomdpConfig {
        learning_rate: h.f64_or("learning_rate", d.learning_rate)?,
        n_epochs: h.usize_or("n_epochs", d.n_epochs)?,
        n_episodes_per_fit: h.usize_or("n_episodes_per_fit", d.n_episodes_per_fit)?,
        init_std: h.f64_or("init_std", d.init_std)?,
        baseline,
    })
}

fn lspi_basis(h: &HyperparamAssignment, env_spec: &crate::mdp::MdpSpec, state_dim: usize) -> Result<Basis> {
    let n_actions = crate::units::default_action_grid(&env_spec.action_space).len();
    match hp_text(h, "basis", "linear")? {
        "linear" => Ok(Basis::PerActionLinear { state_dim, n_actions }),
        "tabular" => {
            let n_states = env_spec
                .state_space
                .n_discrete()
                .ok_or_else(|| Error::Unsupported("tabular basis needs a discrete state space".into()))?;
            Ok(Basis::Tabular { n_states, n_actions })
        }
        other => Err(Error::BadHyperparam {
            name: "basis".into(),
            reason: format!("unknown basis `{other}`"),
        }),
    }
}

fn mi_objective_param(h: &HyperparamAssignment) -> Result<MiObjective> {
    match hp_text(h, "objective", "raw")? {
        "raw" => Ok(MiObjective::Raw),
        "per_feature" => Ok(MiObjective::PerFeature),
        other => Err(Error::BadHyperparam {
            name: "objective".into(),
            reason: format!("unknown objective `{other}`"),
        }),
    }
}

/// Feature selection plus optional standardization, on a given dataset.
fn select_features(h: &HyperparamAssignment, d: &Dataset) -> Result<(FeatureTransform, f64)> {
    let k = h.usize_or("k", 5)?;
    let n_features = h.usize_or("n_features", d.state_dim())?;
    let sel = fe_forward_mi_select(d, k, n_features, mi_objective_param(h)?)?;
    let mut t = sel.transform.clone();
    if h.bool_or("standardize", false)? {
        t = t.with_standardization(d)?;
    }
    Ok((t, sel.score()))
}

fn online_fe_dataset(h: &HyperparamAssignment, env: &dyn Environment, stream: &RngStream) -> Result<Dataset> {
    dg_random_uniform(env, h.usize_or("n_episodes", 50)?, stream)
}

/// Runs one algorithm with fixed hyper-parameters on the stage inputs.
pub fn execute_algorithm(
    ctx: &StageContext<'_>,
    algorithm: &str,
    h: &HyperparamAssignment,
    stream: &RngStream,
) -> Result<StageOutput> {
    let pk = ctx.pipeline_kind;
    let known = algorithm_params(ctx.kind, pk, algorithm)
        .ok_or_else(|| Error::Unsupported(format!("algorithm `{algorithm}` for {}", ctx.kind)))?;
    h.check_known(known)?;
    match (ctx.kind, algorithm) {
        (StageKind::DataGeneration, _) => {
            let env = ctx.env()?;
            let dataset = dg_random_uniform(env, h.usize_or("n_episodes", 100)?, stream)?;
            Ok(StageOutput::Data {
                env: Some(env.box_clone()),
                dataset,
            })
        }
        (StageKind::DataPreparation, name) => {
            let d = ctx.dataset()?;
            let dataset = if name == "mean_impute" {
                dp_mean_impute(d)?
            } else {
                dp_1nn_impute(d)?
            };
            Ok(StageOutput::Data {
                env: ctx.env.map(|e| e.box_clone()),
                dataset,
            })
        }
        (StageKind::FeatureEngineering, _) => {
            let env = ctx.env()?;
            match pk {
                PipelineKind::Online => {
                    let d = online_fe_dataset(h, env, stream)?;
                    let (t, _) = select_features(h, &d)?;
                    Ok(StageOutput::Env(Box::new(fe_engineer_environment(env, &t)?)))
                }
                PipelineKind::Offline => {
                    let d = ctx.dataset()?;
                    let (t, _) = select_features(h, d)?;
                    Ok(StageOutput::Data {
                        env: Some(Box::new(fe_engineer_environment(env, &t)?)),
                        dataset: t.apply_to_dataset(d),
                    })
                }
            }
        }
        (StageKind::PolicyGeneration, "q_learning") => {
            let out = pg_q_learning(
                ctx.env()?,
                h.usize_or("episodes", 500)?,
                h.f64_or("alpha", 0.1)?,
                h.f64_or("epsilon", 0.1)?,
                stream,
            )?;
            Ok(StageOutput::Policy(out.policy))
        }
        (StageKind::PolicyGeneration, "gpomdp") => {
            Ok(StageOutput::Policy(pg_gpomdp(ctx.env()?, &gpomdp_config(h)?, stream)?))
        }
        (StageKind::PolicyGeneration, "fqi") => {
            let d = ctx.dataset()?;
            let spec = offline_spec(ctx, d)?;
            Ok(StageOutput::Policy(pg_fqi(d, &spec, &fqi_config(h)?, stream)?))
        }
        (StageKind::PolicyGeneration, "lspi") => {
            let d = ctx.dataset()?;
            let spec = offline_spec(ctx, d)?;
            let basis = lspi_basis(h, &spec, d.state_dim())?;
            Ok(StageOutput::Policy(pg_lspi(d, &spec, &basis, h.usize_or("n_iterations", 20)?, None)?.policy))
        }
        (StageKind::PolicyEvaluation, _) => unreachable!("evaluation is executed by run_pipeline"),
        (kind, name) => Err(Error::Unsupported(format!("algorithm `{name}` for {kind}"))),
    }
}

/// The MDP description offline learners need: taken from the environment
/// when one is present, otherwise inferred as a box around the data.
fn offline_spec(ctx: &StageContext<'_>, d: &Dataset) -> Result<crate::mdp::MdpSpec> {
    if let Some(env) = ctx.env {
        return Ok(env.spec().clone());
    }
    let bounds = |f: &dyn Fn(&crate::dataset::Transition) -> &[f64], dim: usize| {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for t in d.transitions() {
            for (i, v) in f(t).iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        crate::mdp::Space::boxed(lo, hi)
    };
    crate::mdp::MdpSpec::new(
        bounds(&|t| &t.state, d.state_dim())?,
        bounds(&|t| &t.action, d.action_dim())?,
        0.99,
        crate::mdp::Horizon::Infinite,
    )
}

fn merged(fixed: &HyperparamAssignment, h: &HyperparamAssignment) -> HyperparamAssignment {
    let mut out = fixed.clone();
    out.values.extend(h.values.iter().map(|(k, v)| (k.clone(), v.clone())));
    out
}

/// Evaluates ℓ for hyper-parameters `h` on the stage inputs, following the
/// per-agent protocol: private environment copies and, offline, a
/// bootstrapped dataset. `shared` is the online feature-engineering dataset.
fn index_value(
    ctx: &StageContext<'_>,
    algorithm: &str,
    h: &HyperparamAssignment,
    index: &IndexSpec,
    shared: Option<&Dataset>,
    stream: &RngStream,
) -> Result<Fitness> {
    match (ctx.kind, index) {
        (StageKind::PolicyGeneration, IndexSpec::Return { n_episodes, kind }) => {
            let env = ctx.env()?;
            let policy = match ctx.pipeline_kind {
                PipelineKind::Online => {
                    let copy = environment_copy(env, &stream.child(0));
                    let agent_ctx = StageContext {
                        env: Some(copy.as_ref()),
                        ..*ctx
                    };
                    execute_algorithm(&agent_ctx, algorithm, h, &stream.child(1))?
                }
                PipelineKind::Offline => {
                    let boot = ctx.dataset()?.bootstrap(&stream.child(0))?;
                    let agent_ctx = StageContext {
                        dataset: Some(&boot),
                        ..*ctx
                    };
                    execute_algorithm(&agent_ctx, algorithm, h, &stream.child(1))?
                }
            };
            let StageOutput::Policy(policy) = policy else {
                unreachable!("policy generation yields a policy")
            };
            let est = evaluate_policy(env, &policy, *n_episodes, *kind, &stream.child(2))?;
            Ok(Fitness {
                mean: est.mean,
                std: est.std,
            })
        }
        (StageKind::DataGeneration, IndexSpec::Entropy { k }) => {
            let StageOutput::Data { dataset, .. } = execute_algorithm(ctx, algorithm, h, stream)? else {
                unreachable!("data generation yields a dataset")
            };
            let points: Vec<Vec<f64>> = dataset
                .transitions()
                .iter()
                .map(|t| t.state.iter().chain(&t.action).copied().collect())
                .collect();
            Ok(Fitness::exact(knn_entropy(&points, *k)?.value))
        }
        (StageKind::FeatureEngineering, IndexSpec::MutualInformation { k, objective }) => {
            let d = match shared {
                Some(d) => d,
                None => ctx.dataset()?,
            };
            let (t, _) = select_features(h, d)?;
            let subset = &t.selected_state_indices;
            let mut v = crate::units::mi_objective(d, subset, *k)?;
            if *objective == MiObjective::PerFeature {
                v /= subset.len() as f64;
            }
            Ok(Fitness::exact(v))
        }
        (kind, ix) => Err(Error::Unsupported(format!("index {ix:?} for {kind}"))),
    }
}

/// Searches `t.space` with `t.tuner` under ℓ and returns the best
/// assignment (merged with the fixed hyper-parameters) and the trace.
pub fn tune_unit(
    t: &TunableUnit,
    ctx: &StageContext<'_>,
    stream: &RngStream,
) -> Result<(HyperparamAssignment, TuningTrace)> {
    let index = t
        .index
        .clone()
        .or_else(|| ctx.kind.default_index())
        .ok_or_else(|| Error::Unsupported(format!("{} has no performance index", ctx.kind)))?;
    let shared = match (ctx.kind, ctx.pipeline_kind) {
        (StageKind::FeatureEngineering, PipelineKind::Online) => {
            Some(online_fe_dataset(&t.fixed, ctx.env()?, &stream.child(1))?)
        }
        _ => None,
    };
    let trace = t.tuner.run(
        &t.space,
        |h, s| index_value(ctx, &t.algorithm, &merged(&t.fixed, h), &index, shared.as_ref(), s),
        &stream.child(0),
    )?;
    match &trace.best_overall {
        Some(best) => Ok((merged(&t.fixed, &best.h), trace)),
        None => Err(Error::TuningFailed {
            count: trace.n_evaluations(),
        }),
    }
}

/// One subunit of an automatic unit, after tuning and re-evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubunitRecord {
    pub algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_hyperparams: Option<HyperparamAssignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuned_fitness: Option<f64>,
    /// ℓ re-evaluated on the common fresh stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reevaluated: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TuningTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutomaticTrace {
    pub index: IndexSpec,
    pub subunits: Vec<SubunitRecord>,
    pub chosen: usize,
}

impl AutomaticTrace {
    /// The chosen subunit is the first argmax of the re-evaluation scores.
    pub fn verify(&self) -> std::result::Result<(), String> {
        let mut best: Option<(usize, f64)> = None;
        for (j, s) in self.subunits.iter().enumerate() {
            if let Some(v) = s.reevaluated {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
        }
        match best {
            Some((j, _)) if j == self.chosen => Ok(()),
            Some((j, _)) => Err(format!("chose subunit {} but argmax is {j}", self.chosen)),
            None => Err("no subunit was re-evaluated".into()),
        }
    }
}

/// Tunes every subunit, re-evaluates each winner on one common fresh
/// stream, and returns the argmax (lowest index on ties).
pub fn resolve_automatic(
    subunits: &[TunableUnit],
    index: Option<&IndexSpec>,
    ctx: &StageContext<'_>,
    stream: &RngStream,
) -> Result<(usize, HyperparamAssignment, AutomaticTrace)> {
    if subunits.is_empty() {
        return Err(Error::InvalidArgument("automatic unit has no subunits".into()));
    }
    let index = index
        .cloned()
        .or_else(|| ctx.kind.default_index())
        .ok_or_else(|| Error::Unsupported(format!("{} has no performance index", ctx.kind)))?;
    let reeval_stream = stream.child(1);
    let shared = match (ctx.kind, ctx.pipeline_kind) {
        (StageKind::FeatureEngineering, PipelineKind::Online) => {
            Some(online_fe_dataset(&subunits[0].fixed, ctx.env()?, &reeval_stream.child(1))?)
        }
        _ => None,
    };
    let mut records = Vec::with_capacity(subunits.len());
    let mut best: Option<(usize, f64, HyperparamAssignment)> = None;
    let mut last_err = None;
    for (j, t) in subunits.iter().enumerate() {
        let mut rec = SubunitRecord {
            algorithm: t.algorithm.clone(),
            chosen_hyperparams: None,
            tuned_fitness: None,
            reevaluated: None,
            error: None,
            trace: None,
        };
        match tune_unit(t, ctx, &stream.descend(&[0, j as u64])) {
            Ok((h, trace)) => {
                rec.tuned_fitness = trace.best_overall.as_ref().map(|b| b.fitness);
                rec.trace = Some(trace);
                match index_value(ctx, &t.algorithm, &h, &index, shared.as_ref(), &reeval_stream.child(0)) {
                    Ok(f) if !f.mean.is_nan() => {
                        rec.reevaluated = Some(f.mean);
                        if best.as_ref().is_none_or(|(_, b, _)| f.mean > *b) {
                            best = Some((j, f.mean, h.clone()));
                        }
                    }
                    Ok(_) => rec.error = Some("re-evaluation is NaN".into()),
                    Err(e) => rec.error = Some(e.to_string()),
                }
                rec.chosen_hyperparams = Some(h);
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                last_err = Some(e);
            }
        }
        records.push(rec);
    }
    match best {
        Some((j, _, h)) => Ok((
            j,
            h,
            AutomaticTrace {
                index,
                subunits: records,
                chosen: j,
            },
        )),
        None => Err(last_err.unwrap_or(Error::TuningFailed { count: subunits.len() })),
    }
}

/// Tuning record attached to a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StageTrace {
    Tuning(TuningTrace),
    Automatic(AutomaticTrace),
}

impl StageTrace {
    /// Every (subunit label, tuning trace) pair it contains.
    pub fn tuning_traces(&self) -> Vec<(String, &TuningTrace)> {
        match self {
            StageTrace::Tuning(t) => vec![(String::new(), t)],
            StageTrace::Automatic(a) => a
                .subunits
                .iter()
                .enumerate()
                .filter_map(|(j, s)| s.trace.as_ref().map(|t| (format!("sub{j}_{}", s.algorithm), t)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub index: usize,
    pub kind: StageKind,
    pub unit_variant: String,
    pub algorithm: String,
    pub chosen_hyperparams: HyperparamAssignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<StageTrace>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub pipeline_kind: PipelineKind,
    pub final_policy: Policy,
    pub evaluation: Option<ReturnEstimate>,
    pub per_stage: Vec<StageReport>,
    /// Dataset leaving the last data-carrying stage, if any.
    pub final_dataset: Option<Dataset>,
    pub final_env: Option<Box<dyn Environment>>,
}

/// Execution stream of stage `i`.
pub fn stage_exec_stream(root: &RngStream, i: usize) -> RngStream {
    root.descend(&[i as u64, 0])
}

/// Tuning stream of stage `i`.
pub fn stage_tune_stream(root: &RngStream, i: usize) -> RngStream {
    root.descend(&[i as u64, 1])
}

/// Resolves and runs stage `i` against the live slots.
fn run_stage(
    i: usize,
    stage: &Stage,
    pk: PipelineKind,
    slots: &Slots,
    root: &RngStream,
) -> Result<(StageReport, StageOutput)> {
    let ctx = StageContext {
        kind: stage.kind,
        pipeline_kind: pk,
        env: slots.env.as_deref(),
        dataset: slots.dataset.as_ref(),
    };
    let (algorithm, h, trace) = match &stage.unit {
        Unit::Fixed { algorithm, h } => (algorithm.clone(), h.clone(), None),
        Unit::Tunable(t) => {
            let (h, trace) = tune_unit(t, &ctx, &stage_tune_stream(root, i))?;
            (t.algorithm.clone(), h, Some(StageTrace::Tuning(trace)))
        }
        Unit::Automatic { subunits, index } => {
            let (j, h, trace) = resolve_automatic(subunits, index.as_ref(), &ctx, &stage_tune_stream(root, i))?;
            (subunits[j].algorithm.clone(), h, Some(StageTrace::Automatic(trace)))
        }
    };
    let exec = stage_exec_stream(root, i);
    let output = if stage.kind == StageKind::PolicyEvaluation {
        algorithm_params(stage.kind, pk, &algorithm)
            .ok_or_else(|| Error::Unsupported(format!("algorithm `{algorithm}`")))
            .and_then(|known| h.check_known(known))?;
        let policy = slots
            .policy
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("PolicyEvaluation needs a policy".into()))?;
        let kind = parse_kind(h.str_or("kind", "discounted")?)?;
        StageOutput::Scalar(pe_monte_carlo(ctx.env()?, policy, h.usize_or("n_episodes", 100)?, kind, &exec)?)
    } else {
        execute_algorithm(&ctx, &algorithm, &h, &exec)?
    };
    let report = StageReport {
        index: i,
        kind: stage.kind,
        unit_variant: stage.unit.variant_name().into(),
        algorithm,
        chosen_hyperparams: h,
        trace,
    };
    Ok((report, output))
}

/// Validates and executes the pipeline, threading slots between stages.
pub fn run_pipeline(p: &Pipeline, input: PipelineInput, root: &RngStream) -> Result<RunResult> {
    validate_pipeline(p, &input.slots()).map_err(Error::InvalidPipeline)?;
    let pk = p.kind;
    let mut slots = Slots {
        env: input.env,
        dataset: input.dataset,
        ..Default::default()
    };
    let mut reports = Vec::with_capacity(p.stages.len());
    let mut final_dataset = None;
    for (i, stage) in p.stages.iter().enumerate() {
        let before = slots.types();
        let (report, output) = run_stage(i, stage, pk, &slots, root).map_err(|e| Error::Stage {
            index: i,
            kind: stage.kind.to_string(),
            cause: Box::new(e),
        })?;
        match output {
            StageOutput::Data { env, dataset } => {
                if env.is_some() {
                    slots.env = env;
                }
                final_dataset = Some(dataset.clone());
                slots.dataset = Some(dataset);
            }
            StageOutput::Env(env) => slots.env = Some(env),
            StageOutput::Policy(policy) => {
                slots.policy = Some(policy);
                slots.dataset = None;
            }
            StageOutput::Scalar(s) => slots.scalar = Some(s),
        }
        debug_assert_eq!(slots.types(), live_after(stage.kind, pk, &before), "slot conservation at stage {i}");
        reports.push(report);
    }
    let final_policy = slots
        .policy
        .ok_or_else(|| Error::InvalidPipeline(vec!["no policy was generated".into()]))?;
    Ok(RunResult {
        pipeline_kind: pk,
        final_policy,
        evaluation: slots.scalar,
        per_stage: reports,
        final_dataset,
        final_env: slots.env,
    })
}

/// Convenience for tests and examples: a one-entry assignment.
pub fn hp(name: &str, v: impl Into<HpValue>) -> HyperparamAssignment {
    HyperparamAssignment::new().with(name, v)
}
