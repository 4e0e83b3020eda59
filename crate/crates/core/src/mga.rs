//! Microbial genetic algorithm over perturbations, driven only by
//! black-box probability queries.
//!
//! Each round draws two members, keeps the fitter one (the winner) and
//! overwrites the other with a crossover child of both, after sign-flip
//! mutation. Fitness is the target's cross-entropy against the true label,
//! so higher is closer to a misclassification.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics;
use crate::target::BlackBoxTarget;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub delta: Tensor,
    pub fitness: Option<f64>,
    /// Target label and its probability at the last evaluation.
    pub label: Option<usize>,
    pub confidence: Option<f64>,
}

impl Individual {
    pub fn new(delta: Tensor) -> Self {
        Self {
            delta,
            fitness: None,
            label: None,
            confidence: None,
        }
    }

    pub fn evaluated(&self) -> bool {
        self.fitness.is_some()
    }
}

pub type Population = Vec<Individual>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgaConfig {
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub population: usize,
    pub max_queries: u64,
    pub rng_seed: u64,
    /// Re-query both parents every round instead of trusting cached fitness.
    #[serde(default)]
    pub requery_parents: bool,
}

impl Default for MgaConfig {
    fn default() -> Self {
        Self {
            crossover_rate: 0.7,
            mutation_rate: 1e-4,
            population: 5,
            max_queries: 50_000,
            rng_seed: 0,
            requery_parents: false,
        }
    }
}

impl MgaConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.crossover_rate) || !unit.contains(&self.mutation_rate) {
            return Err(Error::Config("crossover and mutation rates must lie in [0, 1]".into()));
        }
        if self.population < 2 {
            return Err(Error::Config(format!("population {} must be >= 2", self.population)));
        }
        if self.max_queries < self.population as u64 {
            return Err(Error::Config(format!(
                "budget {} is smaller than the population {}",
                self.max_queries, self.population
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub success: bool,
    pub queries: u64,
    pub final_delta: Tensor,
    pub adv_label: usize,
    pub adv_confidence: f64,
    pub elapsed: Duration,
}

/// Wraps the seeds as unevaluated individuals, re-projecting onto the ball.
pub fn init_population(x: &Tensor, seeds: &[Tensor], epsilon: f64, n: usize) -> Result<Population> {
    if seeds.len() != n {
        return Err(Error::Config(format!("expected {n} seeds, got {}", seeds.len())));
    }
    seeds
        .iter()
        .map(|s| {
            s.ensure_same_shape(x)?;
            Ok(Individual::new(s.map(|v| v.clamp(-epsilon, epsilon))))
        })
        .collect()
}

/// `clip(x + delta, 0, 1)`.
pub fn materialize(x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    x.zip_map(delta, |a, d| (a + d).clamp(0.0, 1.0))
}

/// Cross-entropy of the target's answer for `x + delta` against `y`. Costs
/// exactly one query unless the individual already carries a fitness.
pub fn get_fitness(target: &mut BlackBoxTarget, x: &Tensor, ind: &mut Individual, y: usize) -> Result<f64> {
    if let Some(f) = ind.fitness {
        return Ok(f);
    }
    evaluate(target, x, ind, y)
}

fn evaluate(target: &mut BlackBoxTarget, x: &Tensor, ind: &mut Individual, y: usize) -> Result<f64> {
    let r = target.query(&materialize(x, &ind.delta)?)?;
    let f = numerics::cross_entropy(&r.probs, y)?;
    ind.fitness = Some(f);
    ind.confidence = Some(r.probs[r.label]);
    ind.label = Some(r.label);
    Ok(f)
}

/// Draws two distinct members uniformly and returns `(winner, loser)`
/// indices; the first draw wins ties.
pub fn select_and_sort(pop: &[Individual], rng: &mut impl Rng) -> (usize, usize) {
    let pick = sample(rng, pop.len(), 2);
    let (a, b) = (pick.index(0), pick.index(1));
    let fa = pop[a].fitness.unwrap_or(f64::NEG_INFINITY);
    let fb = pop[b].fitness.unwrap_or(f64::NEG_INFINITY);
    if fb > fa {
        (b, a)
    } else {
        (a, b)
    }
}

/// Per-coordinate choice: winner with probability `cr`, loser otherwise.
pub fn crossover(cr: f64, loser: &Individual, winner: &Individual, rng: &mut impl Rng) -> Result<Individual> {
    winner.delta.ensure_same_shape(&loser.delta)?;
    let data = winner
        .delta
        .data()
        .iter()
        .zip(loser.delta.data())
        .map(|(&w, &l)| if rng.gen_bool(cr) { w } else { l })
        .collect();
    Ok(Individual::new(Tensor::new(winner.delta.shape().to_vec(), data)?))
}

/// Flips the sign of each coordinate independently with probability `mr`.
pub fn mutation(mr: f64, child: Individual, rng: &mut impl Rng) -> Individual {
    let shape = child.delta.shape().to_vec();
    let mut data = child.delta.into_data();
    for v in &mut data {
        if rng.gen_bool(mr) {
            *v = -*v;
        }
    }
    Individual::new(Tensor::new(shape, data).expect("shape is unchanged"))
}

/// What one round did to the population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Round {
    pub winner: usize,
    pub loser: usize,
    /// Slot holding the individual that fooled the target, if any; the
    /// loser's slot otherwise.
    pub written: usize,
    pub fooled: bool,
}

/// Queries one round costs.
pub fn round_cost(cfg: &MgaConfig) -> u64 {
    if cfg.requery_parents {
        3
    } else {
        1
    }
}

/// One round on an evaluated population: select, cross over, mutate,
/// evaluate the child and store it over the loser. With `requery_parents`
/// both parents are re-evaluated first, and a parent that now fools the
/// target ends the round without breeding.
pub fn generation(
    target: &mut BlackBoxTarget,
    x: &Tensor,
    y: usize,
    pop: &mut Population,
    epsilon: f64,
    cfg: &MgaConfig,
    rng: &mut impl Rng,
) -> Result<Round> {
    let (mut w, mut l) = select_and_sort(pop, rng);
    if cfg.requery_parents {
        for k in [w, l] {
            evaluate(target, x, &mut pop[k], y)?;
            if pop[k].label.is_some_and(|lab| lab != y) {
                return Ok(Round {
                    winner: w,
                    loser: l,
                    written: k,
                    fooled: true,
                });
            }
        }
        if pop[l].fitness > pop[w].fitness {
            std::mem::swap(&mut w, &mut l);
        }
    }
    let child = crossover(cfg.crossover_rate, &pop[l], &pop[w], rng)?;
    let mut child = mutation(cfg.mutation_rate, child, rng);
    debug_assert!(child.delta.max_abs() <= epsilon);
    evaluate(target, x, &mut child, y)?;
    let fooled = child.label.is_some_and(|lab| lab != y);
    pop[l] = child;
    Ok(Round {
        winner: w,
        loser: l,
        written: l,
        fooled,
    })
}

fn best(pop: &[Individual]) -> &Individual {
    pop.iter()
        .reduce(|a, b| if b.fitness > a.fitness { b } else { a })
        .expect("population is non-empty")
}

/// Runs the attack until the target mislabels a queried individual or the
/// query budget runs out.
pub fn run_attack(
    target: &mut BlackBoxTarget,
    x: &Tensor,
    y: usize,
    seeds: &[Tensor],
    epsilon: f64,
    cfg: &MgaConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let base = target.query_count();
    let budget_end = base + cfg.max_queries.min(target.remaining());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut pop = init_population(x, seeds, epsilon, cfg.population)?;

    let finish = |target: &BlackBoxTarget, ind: &Individual, success: bool| AttackOutcome {
        success,
        queries: target.query_count() - base,
        final_delta: ind.delta.clone(),
        adv_label: ind.label.unwrap_or(y),
        adv_confidence: ind.confidence.unwrap_or(0.0),
        elapsed: start.elapsed(),
    };
    let fooled = |ind: &Individual| ind.label.is_some_and(|l| l != y);

    for i in 0..pop.len() {
        if target.query_count() >= budget_end {
            break;
        }
        get_fitness(target, x, &mut pop[i], y)?;
        if fooled(&pop[i]) {
            return Ok(finish(target, &pop[i], true));
        }
    }

    while target.query_count() + round_cost(cfg) <= budget_end && pop.iter().all(Individual::evaluated) {
        let round = generation(target, x, y, &mut pop, epsilon, cfg, &mut rng)?;
        if round.fooled {
            return Ok(finish(target, &pop[round.written], true));
        }
    }
    Ok(finish(target, best(&pop), false))
}
