//! Monte-Carlo interpretation of utility plans.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::efcore::Value;
use crate::error::{invalid, Error, Result};

use super::data::Batch;
use super::models::{Assignment, ModelSet, Use};
use super::plan::{utility_terms, Draw, PlayerPlan, Term};
use super::scenario::Scenario;

/// Named random streams: stream 0 shuffles data, stream `p + 1` belongs to
/// player `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub players: Vec<ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(seed: u64, players: usize) -> Self {
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self { data: stream(0), players: (1..=players as u64).map(stream).collect() }
    }
}

/// A player's utility estimate and the gradient of it with respect to the
/// player's own parameters (blocks concatenated in model order).
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerEstimate {
    pub player: usize,
    pub utility: f64,
    pub grad: Vec<f64>,
}

/// Sums over one term's samples, before scaling by weight / count.
pub(crate) struct TermSums {
    pub grads: Vec<Vec<f64>>,
    pub log_density: f64,
}

impl TermSums {
    pub fn new(models: &ModelSet) -> Self {
        Self { grads: models.zero_grads(), log_density: 0.0 }
    }
}

/// Running per-block totals for one player.
pub(crate) struct PlayerTotals {
    pub grads: Vec<Vec<f64>>,
    pub utility: f64,
}

impl PlayerTotals {
    pub fn new(models: &ModelSet) -> Self {
        Self { grads: models.zero_grads(), utility: 0.0 }
    }

    /// Adds `weight / count` times a term's sums. Fails on non-finite values,
    /// naming the term.
    pub fn fold(&mut self, models: &ModelSet, player: usize, term: &str, weight: f64, count: usize, sums: &TermSums) -> Result<()> {
        let scale = weight / count as f64;
        let finite = sums.log_density.is_finite()
            && models.player_blocks(player).all(|b| sums.grads[b].iter().all(|g| g.is_finite()));
        if !finite {
            return Err(Error::NonFinite { term: term.to_string() });
        }
        for b in models.player_blocks(player) {
            for (t, g) in self.grads[b].iter_mut().zip(&sums.grads[b]) {
                *t += g * scale;
            }
        }
        self.utility += weight * sums.log_density / count as f64;
        Ok(())
    }

    pub fn finish(self, models: &ModelSet, player: usize) -> PlayerEstimate {
        PlayerEstimate { player, utility: self.utility, grad: models.flatten_player_grad(player, &self.grads) }
    }
}

/// Scores one use: factors owned by `player` contribute their gradient,
/// everything else only its log-density.
pub(crate) fn score(models: &ModelSet, player: usize, u: &Use, asg: &Assignment, sums: &mut TermSums) -> Result<()> {
    let ld = if models.factor_owner(u.factor) == Some(player) {
        models.accumulate_log_density_grad(u, asg, &mut sums.grads)?
    } else {
        models.log_density(u, asg)?
    };
    sums.log_density += ld;
    Ok(())
}

pub(crate) fn bind_record(vars: &[super::models::Var], record: &[Value], asg: &mut Assignment) -> Result<()> {
    if record.len() != vars.len() {
        return invalid(format!("record has {} fields, the plan binds {}", record.len(), vars.len()));
    }
    for (v, value) in vars.iter().zip(record) {
        asg.set(*v, value.clone());
    }
    Ok(())
}

/// Executes the draws of a term for one completion.
pub(crate) fn run_draws<R: rand::Rng + ?Sized>(
    models: &ModelSet,
    draws: &[Draw],
    record: Option<&[Value]>,
    rng: &mut R,
    asg: &mut Assignment,
) -> Result<()> {
    for d in draws {
        match d {
            Draw::Data { vars, .. } => bind_record(vars, record.expect("data term without record"), asg)?,
            Draw::Sample(u) => {
                let v = models.sample(u, asg, rng)?;
                asg.set(u.output, v);
            }
            Draw::Gibbs { init, stages, sweeps } => {
                let fam = models.family(*init)?;
                asg.set(*init, fam.sample(&fam.reference_params(), rng)?);
                for _ in 0..*sweeps {
                    for u in stages {
                        let v = models.sample(u, asg, rng)?;
                        asg.set(u.output, v);
                    }
                }
            }
        }
    }
    Ok(())
}

fn estimate_term<R: rand::Rng + ?Sized>(
    models: &ModelSet,
    player: usize,
    term: &Term,
    batch: &Batch,
    n_mc: usize,
    rng: &mut R,
    totals: &mut PlayerTotals,
) -> Result<()> {
    let mut sums = TermSums::new(models);
    let records: Vec<Option<&[Value]>> = match term.stream() {
        Some(s) => batch.records(s).iter().map(|r| Some(r.as_slice())).collect(),
        None => vec![None; batch.model_draws],
    };
    for record in &records {
        for _ in 0..n_mc {
            let mut asg = Assignment::new();
            run_draws(models, &term.draws, *record, rng, &mut asg)?;
            for u in &term.scores {
                score(models, player, u, &asg, &mut sums)?;
            }
        }
    }
    totals.fold(models, player, &term.id, term.weight, records.len() * n_mc, &sums)
}

/// Estimates one player's utility and gradient from its plan.
pub fn estimate_player<R: rand::Rng + ?Sized>(
    models: &ModelSet,
    plan: &PlayerPlan,
    batch: &Batch,
    n_mc: usize,
    rng: &mut R,
) -> Result<PlayerEstimate> {
    if n_mc == 0 {
        return invalid("n_mc must be at least 1");
    }
    let mut totals = PlayerTotals::new(models);
    for term in &plan.terms {
        estimate_term(models, plan.player, term, batch, n_mc, rng, &mut totals)?;
    }
    Ok(totals.finish(models, plan.player))
}

/// Monte-Carlo utility gradients of every player, each drawing from its own
/// random stream. All gradients are taken at the given models.
pub fn estimate_gradients(
    scenario: &Scenario,
    models: &ModelSet,
    batch: &Batch,
    n_mc: usize,
    rngs: &mut RngStreams,
) -> Result<Vec<PlayerEstimate>> {
    let plans = utility_terms(scenario, models, batch)?;
    plans
        .iter()
        .map(|p| estimate_player(models, p, batch, n_mc, &mut rngs.players[p.player]))
        .collect()
}
