//! Hyper-parameter tuners: an elitist genetic algorithm with tournament
//! selection and multiplicative mutation, and a random-search baseline.
//!
//! Streams: with base stream `b`, agent `j` of generation `g` is evaluated on
//! `b/[0, g, j]`, the selection and mutation draws producing generation
//! `g + 1` come from `b/[1, g]`, and the initial population from `b/[2]`.
//! Evaluations inside a generation run in parallel; since each one owns its
//! stream the trace does not depend on scheduling.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::{HpDomain, HpValue, HyperparamAssignment, HyperparamSpace, Scale};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneticConfig {
    pub n_generations: usize,
    pub n_agents: usize,
    pub mutation_prob: f64,
    pub tournament_size: usize,
    pub numeric_mutation_lo: f64,
    pub numeric_mutation_hi: f64,
}

impl Default for GeneticConfig {
    fn default() -> Self {
        Self {
            n_generations: 50,
            n_agents: 20,
            mutation_prob: 0.5,
            tournament_size: 3,
            numeric_mutation_lo: 0.8,
            numeric_mutation_hi: 1.2,
        }
    }
}

impl GeneticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(format!("genetic config: {m}")));
        if self.n_generations == 0 {
            return fail("n_generations must be >= 1");
        }
        if self.n_agents < 2 {
            return fail("n_agents must be >= 2");
        }
        if self.tournament_size == 0 || self.tournament_size > self.n_agents {
            return fail("tournament_size must be in 1..=n_agents");
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return fail("mutation_prob must be in [0, 1]");
        }
        if !(self.numeric_mutation_lo > 0.0 && self.numeric_mutation_lo < self.numeric_mutation_hi) {
            return fail("need 0 < numeric_mutation_lo < numeric_mutation_hi");
        }
        Ok(())
    }

    pub fn evaluations(&self) -> usize {
        self.n_generations * self.n_agents
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TunerConfig {
    Genetic(GeneticConfig),
    RandomSearch { budget: usize },
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig::Genetic(GeneticConfig::default())
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            TunerConfig::Genetic(g) => g.validate(),
            TunerConfig::RandomSearch { budget: 0 } => Err(Error::InvalidArgument(
                "random search budget must be >= 1".into(),
            )),
            TunerConfig::RandomSearch { .. } => Ok(()),
        }
    }

    pub fn run<F>(&self, space: &HyperparamSpace, fitness: F, stream: &RngStream) -> Result<TuningTrace>
    where
        F: Fn(&HyperparamAssignment, &RngStream) -> Result<Fitness> + Sync,
    {
        match self {
            TunerConfig::Genetic(cfg) => genetic_tune(space, fitness, cfg, stream),
            TunerConfig::RandomSearch { budget } => random_search_tune(space, fitness, *budget, stream),
        }
    }
}

/// Score of one evaluated assignment. Larger is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fitness {
    pub mean: f64,
    pub std: f64,
}

impl Fitness {
    pub fn exact(mean: f64) -> Self {
        Self { mean, std: 0.0 }
    }
}

mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub h: HyperparamAssignment,
    /// `-inf` (serialized as `null`) for failed evaluations.
    #[serde(with = "nonfinite")]
    pub fitness_mean: f64,
    pub fitness_std: f64,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub index: usize,
    pub members: Vec<MemberRecord>,
    pub best_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub generation: usize,
    pub member: usize,
    pub h: HyperparamAssignment,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningTrace {
    pub config: TunerConfig,
    pub generations: Vec<GenerationRecord>,
    /// Argmax over every recorded member; absent when all evaluations failed.
    pub best_overall: Option<BestRecord>,
}

/// First index of the maximum fitness.
fn best_of(members: &[MemberRecord]) -> usize {
    let mut best = 0;
    for (i, m) in members.iter().enumerate() {
        if m.fitness_mean > members[best].fitness_mean {
            best = i;
        }
    }
    best
}

impl TuningTrace {
    fn from_generations(config: TunerConfig, generations: Vec<GenerationRecord>) -> Self {
        let mut best: Option<BestRecord> = None;
        for g in &generations {
            for (j, m) in g.members.iter().enumerate() {
                if m.failed {
                    continue;
                }
                if best.as_ref().is_none_or(|b| m.fitness_mean > b.fitness) {
                    best = Some(BestRecord {
                        generation: g.index,
                        member: j,
                        h: m.h.clone(),
                        fitness: m.fitness_mean,
                    });
                }
            }
        }
        Self {
            config,
            generations,
            best_overall: best,
        }
    }

    pub fn n_evaluations(&self) -> usize {
        self.generations.iter().map(|g| g.members.len()).sum()
    }

    pub fn n_failed(&self) -> usize {
        self.generations
            .iter()
            .flat_map(|g| &g.members)
            .filter(|m| m.failed)
            .count()
    }

    /// Best fitness of each generation, in order.
    pub fn best_per_generation(&self) -> Vec<f64> {
        self.generations
            .iter()
            .map(|g| g.members[g.best_index].fitness_mean)
            .collect()
    }

    /// Checks the structural invariants: constant population, correct
    /// per-generation best, global argmax, and (for genetic runs) that each
    /// generation starts with the previous generation's best, unmutated.
    pub fn verify(&self) -> std::result::Result<(), String> {
        let Some(first) = self.generations.first() else {
            return Err("trace has no generations".into());
        };
        let pop = first.members.len();
        for (i, g) in self.generations.iter().enumerate() {
            if g.index != i {
                return Err(format!("generation {i} recorded with index {}", g.index));
            }
            if g.members.len() != pop {
                return Err(format!("generation {i} has {} members, expected {pop}", g.members.len()));
            }
            if g.best_index != best_of(&g.members) {
                return Err(format!("generation {i} best_index is not the argmax"));
            }
        }
        if let TunerConfig::Genetic(cfg) = &self.config {
            if pop != cfg.n_agents || self.generations.len() != cfg.n_generations {
                return Err("trace shape differs from the genetic config".into());
            }
            for w in self.generations.windows(2) {
                let elite = &w[0].members[w[0].best_index].h;
                if !w[1].members[0].h.bit_eq(elite) {
                    return Err(format!(
                        "generation {} does not carry the elite of generation {}",
                        w[1].index, w[0].index
                    ));
                }
            }
        }
        let expected = Self::from_generations(self.config.clone(), self.generations.clone());
        if expected.best_overall != self.best_overall {
            return Err("best_overall is not the argmax over all members".into());
        }
        Ok(())
    }
}

fn evaluate_population<F>(
    population: &[HyperparamAssignment],
    generation: usize,
    fitness: &F,
    stream: &RngStream,
) -> GenerationRecord
where
    F: Fn(&HyperparamAssignment, &RngStream) -> Result<Fitness> + Sync,
{
    let members: Vec<MemberRecord> = population
        .par_iter()
        .enumerate()
        .map(|(j, h)| {
            let s = stream.descend(&[0, generation as u64, j as u64]);
            match fitness(h, &s) {
                Ok(f) if !f.mean.is_nan() => MemberRecord {
                    h: h.clone(),
                    fitness_mean: f.mean,
                    fitness_std: f.std,
                    failed: false,
                    error: None,
                },
                Ok(_) => failed(h, "fitness is NaN".into()),
                Err(e) => failed(h, e.to_string()),
            }
        })
        .collect();
    GenerationRecord {
        index: generation,
        best_index: best_of(&members),
        members,
    }
}

fn failed(h: &HyperparamAssignment, error: String) -> MemberRecord {
    MemberRecord {
        h: h.clone(),
        fitness_mean: f64::NEG_INFINITY,
        fitness_std: 0.0,
        failed: true,
        error: Some(error),
    }
}

/// Elitist genetic search: evaluate every agent, keep the generation best
/// unmutated, fill the remaining slots by tournament selection over the
/// whole previous generation, then mutate the newcomers.
pub fn genetic_tune<F>(
    space: &HyperparamSpace,
    fitness: F,
    cfg: &GeneticConfig,
    stream: &RngStream,
) -> Result<TuningTrace>
where
    F: Fn(&HyperparamAssignment, &RngStream) -> Result<Fitness> + Sync,
{
    cfg.validate()?;
    space.validate()?;
    let mut init_rng = stream.child(2).rng();
    let mut population: Vec<HyperparamAssignment> =
        (0..cfg.n_agents).map(|_| space.sample(&mut init_rng)).collect();
    let mut generations = Vec::with_capacity(cfg.n_generations);
    for g in 0..cfg.n_generations {
        let record = evaluate_population(&population, g, &fitness, stream);
        if g + 1 < cfg.n_generations {
            let mut rng = stream.descend(&[1, g as u64]).rng();
            let scored: Vec<(HyperparamAssignment, f64)> = record
                .members
                .iter()
                .map(|m| (m.h.clone(), m.fitness_mean))
                .collect();
            let mut next = Vec::with_capacity(cfg.n_agents);
            next.push(record.members[record.best_index].h.clone());
            for _ in 1..cfg.n_agents {
                next.push(tournament_select(&scored, cfg.tournament_size, &mut rng));
            }
            for h in next.iter_mut().skip(1) {
                *h = mutate(h, space, cfg, &mut rng);
            }
            population = next;
        }
        generations.push(record);
    }
    Ok(TuningTrace::from_generations(
        TunerConfig::Genetic(cfg.clone()),
        generations,
    ))
}

/// `budget` independent uniform samples, recorded as a single generation.
pub fn random_search_tune<F>(
    space: &HyperparamSpace,
    fitness: F,
    budget: usize,
    stream: &RngStream,
) -> Result<TuningTrace>
where
    F: Fn(&HyperparamAssignment, &RngStream) -> Result<Fitness> + Sync,
{
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be >= 1".into()));
    }
    space.validate()?;
    let mut rng = stream.child(2).rng();
    let population: Vec<HyperparamAssignment> = (0..budget).map(|_| space.sample(&mut rng)).collect();
    let record = evaluate_population(&population, 0, &fitness, stream);
    Ok(TuningTrace::from_generations(
        TunerConfig::RandomSearch { budget },
        vec![record],
    ))
}

/// Index of the tournament winner: `size` distinct members drawn uniformly,
/// highest fitness wins, lowest index on ties.
pub fn tournament_select_index<R: Rng + ?Sized>(fitness: &[f64], size: usize, rng: &mut R) -> usize {
    let size = size.clamp(1, fitness.len());
    let mut drawn = index::sample(rng, fitness.len(), size).into_vec();
    drawn.sort_unstable();
    let mut best = drawn[0];
    for &i in &drawn[1..] {
        if fitness[i] > fitness[best] {
            best = i;
        }
    }
    best
}

pub fn tournament_select<R: Rng + ?Sized>(
    members: &[(HyperparamAssignment, f64)],
    size: usize,
    rng: &mut R,
) -> HyperparamAssignment {
    let fitness: Vec<f64> = members.iter().map(|m| m.1).collect();
    members[tournament_select_index(&fitness, size, rng)].0.clone()
}

/// Multiplies a real value by `factor` and clamps it into the domain.
pub fn scale_real(value: f64, lo: f64, hi: f64, factor: f64) -> f64 {
    (value * factor).clamp(lo, hi)
}

/// Mutates each entry independently with probability `mutation_prob`.
/// Categorical and integer entries are redrawn uniformly from their whole
/// domain; real entries are multiplied by a factor drawn from
/// `[numeric_mutation_lo, numeric_mutation_hi]` (uniformly, or log-uniformly
/// on log-scale entries) and clamped back into range.
pub fn mutate<R: Rng + ?Sized>(
    h: &HyperparamAssignment,
    space: &HyperparamSpace,
    cfg: &GeneticConfig,
    rng: &mut R,
) -> HyperparamAssignment {
    let mut out = h.clone();
    for entry in space.entries() {
        if rng.random::<f64>() >= cfg.mutation_prob {
            continue;
        }
        let new = match &entry.domain {
            HpDomain::Categorical { .. } | HpDomain::Integer { .. } => entry.domain.sample(rng),
            HpDomain::Real { lo, hi, scale } => {
                let current = h.get(&entry.name).and_then(HpValue::as_f64).unwrap_or(*lo);
                let (flo, fhi) = (cfg.numeric_mutation_lo, cfg.numeric_mutation_hi);
                let factor = match scale {
                    Scale::Linear => rng.random_range(flo..=fhi),
                    Scale::Log => rng.random_range(flo.ln()..=fhi.ln()).exp(),
                };
                HpValue::Real(scale_real(current, *lo, *hi, factor))
            }
        };
        out.values.insert(entry.name.clone(), new);
    }
    out
}
