//! Declarative utility plans: which variables are drawn from which model or
//! data stream, and which log-densities each player scores.
//!
//! The Monte-Carlo estimator and the exact enumeration oracle both interpret
//! the same plans, so the two can be compared term by term.

use crate::error::{Error, Result};

use super::data::{Batch, Stream};
use super::models::{ModelSet, Use, Var};
use super::scenario::{names, PriorKind, Scenario, Variant};

#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    /// Bind `vars` to the fields of one record of `stream`.
    Data { stream: Stream, vars: Vec<Var> },
    /// Sample the use's output given its (already bound) inputs.
    Sample(Use),
    /// Initialize `init` from its family's reference member, then run
    /// `sweeps` passes over `stages`, sampling each in order.
    Gibbs { init: Var, stages: Vec<Use>, sweeps: usize },
}

/// One expectation in a player's utility. Samples are constants: only the
/// scored log-densities are differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub id: String,
    pub weight: f64,
    pub draws: Vec<Draw>,
    pub scores: Vec<Use>,
}

impl Term {
    fn new(id: &str, draws: Vec<Draw>, scores: Vec<Use>) -> Self {
        Self { id: id.into(), weight: 1.0, draws, scores }
    }

    /// The data stream the term iterates over, if any.
    pub fn stream(&self) -> Option<Stream> {
        self.draws.iter().find_map(|d| match d {
            Draw::Data { stream, .. } => Some(*stream),
            _ => None,
        })
    }

    /// Number of outer iterations the term averages over for a batch.
    pub fn outer_count(&self, batch: &Batch) -> usize {
        match self.stream() {
            Some(s) => batch.records(s).len(),
            None => batch.model_draws,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlayerPlan {
    pub player: usize,
    pub terms: Vec<Term>,
}

fn data(stream: Stream, vars: &[Var]) -> Draw {
    Draw::Data { stream, vars: vars.to_vec() }
}

fn uses(models: &ModelSet, names: &[String]) -> Result<Vec<Use>> {
    names.iter().map(|n| models.use_of(n)).collect()
}

fn sample_all(models: &ModelSet, names: &[String]) -> Result<Vec<Draw>> {
    Ok(uses(models, names)?.into_iter().map(Draw::Sample).collect())
}

/// Every term of every player, before any batch-dependent filtering.
pub fn scenario_plans(scenario: &Scenario, models: &ModelSet) -> Result<Vec<PlayerPlan>> {
    scenario.validate()?;
    let z0 = Var::Z(0);
    let dec_x = names::DEC_X.to_string();
    let enc0 = names::enc(0);
    let prior0 = names::prior(0);
    let explicit_prior = scenario.options.prior != PriorKind::Implicit;
    let plans = match scenario.variant {
        Variant::MarginalsOnly => vec![
            vec![Term::new(
                "p.data_x",
                vec![data(Stream::X, &[Var::X]), Draw::Sample(models.use_of(&enc0)?)],
                vec![models.use_of(&dec_x)?],
            )],
            vec![Term::new(
                "q.data_z",
                vec![data(Stream::Z, &[z0]), Draw::Sample(models.use_of(&dec_x)?)],
                vec![models.use_of(&enc0)?],
            )],
        ],
        Variant::SemiSupervisedMixed => {
            let joint = uses(models, &[prior0.clone(), dec_x.clone()])?;
            vec![
                vec![
                    Term::new("p.pairs", vec![data(Stream::XZ, &[Var::X, z0])], joint.clone()),
                    Term::new("p.latent", vec![data(Stream::Z, &[z0])], vec![models.use_of(&prior0)?]),
                    Term::new(
                        "p.data_x",
                        vec![data(Stream::X, &[Var::X]), Draw::Sample(models.use_of(&enc0)?)],
                        joint,
                    ),
                ],
                vec![
                    Term::new("q.pairs", vec![data(Stream::XZ, &[Var::X, z0])], vec![models.use_of(&enc0)?]),
                    Term::new(
                        "q.latent",
                        vec![data(Stream::Z, &[z0]), Draw::Sample(models.use_of(&dec_x)?)],
                        vec![models.use_of(&enc0)?],
                    ),
                ],
            ]
        }
        Variant::Unsupervised => {
            let (decoder, prior_draw) = if explicit_prior {
                (vec![prior0.clone(), dec_x.clone()], Draw::Sample(models.use_of(&prior0)?))
            } else {
                (vec![dec_x.clone()], data(Stream::Z, &[z0]))
            };
            vec![
                vec![Term::new(
                    "p.data_x",
                    vec![data(Stream::X, &[Var::X]), Draw::Sample(models.use_of(&enc0)?)],
                    uses(models, &decoder)?,
                )],
                vec![Term::new(
                    "q.dream",
                    vec![prior_draw, Draw::Sample(models.use_of(&dec_x)?)],
                    vec![models.use_of(&enc0)?],
                )],
            ]
        }
        Variant::Hierarchical => return hierarchical_plans(scenario, models),
        Variant::TripleGame => {
            let seg = models.use_of(names::SEG)?;
            let img = models.use_of(names::IMG)?;
            let q = models.use_of(&enc0)?;
            let prior = models.use_of(&prior0)?;
            let xs = data(Stream::XS, &[Var::X, Var::S]);
            let sweeps = scenario.options.gibbs_sweeps;
            vec![
                vec![Term::new(
                    "t1.pairs",
                    vec![xs.clone(), Draw::Sample(q.clone()), Draw::Sample(img.clone().rebind(Var::X, Var::XAlt))],
                    vec![seg.clone(), seg.clone().rebind(Var::X, Var::XAlt)],
                )],
                vec![Term::new(
                    "t2.pairs",
                    vec![xs, Draw::Sample(q.clone()), Draw::Sample(seg.clone().rebind(Var::S, Var::SAlt))],
                    vec![img.clone(), img.clone().rebind(Var::S, Var::SAlt)],
                )],
                vec![Term::new(
                    "phi.dream",
                    vec![Draw::Sample(prior), Draw::Gibbs { init: Var::S, stages: vec![img, seg], sweeps }],
                    vec![q],
                )],
            ]
        }
    };
    Ok(plans.into_iter().enumerate().map(|(player, terms)| PlayerPlan { player, terms }).collect())
}

/// Per-layer factor names of a hierarchical model in sampling order:
/// (decoder factors, encoder factors).
fn hierarchical_order(scenario: &Scenario) -> (Vec<String>, Vec<String>) {
    let layers = scenario.layers();
    let class = scenario.options.classes.is_some();
    let mut dec = vec![names::prior(0)];
    let mut enc = Vec::new();
    if class {
        dec.push(names::PRIOR_C.into());
        enc.push(names::ENC_C.into());
    }
    for i in 1..layers {
        dec.push(names::prior(i));
    }
    dec.push(names::DEC_X.into());
    for i in 0..layers {
        enc.push(names::enc(i));
    }
    (dec, enc)
}

/// Plans of the hierarchical scenario. Utilities decompose into one scored
/// log-density per block of the decoder and encoder factorizations; labelled
/// terms are added when the scenario asks for them.
pub fn hierarchical_plans(scenario: &Scenario, models: &ModelSet) -> Result<Vec<PlayerPlan>> {
    if scenario.variant != Variant::Hierarchical {
        return Err(Error::Configuration("hierarchical plans need the hierarchical variant".into()));
    }
    let (dec, enc) = hierarchical_order(scenario);
    let class = scenario.options.classes.is_some();
    let mut p_terms = vec![Term::new(
        "p.data_x",
        std::iter::once(data(Stream::X, &[Var::X])).chain(sample_all(models, &enc)?).collect(),
        uses(models, &dec)?,
    )];
    let mut q_terms = vec![Term::new("q.dream", sample_all(models, &dec)?, uses(models, &enc)?)];
    if scenario.options.labelled {
        // Labelled records bind (x, c) when the first layer is class-split,
        // (x, z0) otherwise; the encoder completes everything else.
        let (label_var, label_enc) = if class { (Var::Class, names::ENC_C.to_string()) } else { (Var::Z(0), names::enc(0)) };
        let completion: Vec<String> = enc.iter().filter(|n| **n != label_enc).cloned().collect();
        p_terms.push(Term::new(
            "p.labelled",
            std::iter::once(data(Stream::Labelled, &[Var::X, label_var]))
                .chain(sample_all(models, &completion)?)
                .collect(),
            uses(models, &dec)?,
        ));
        let w = scenario.options.labelled_encoder_weight;
        if w > 0.0 {
            let mut t = Term::new(
                "q.labelled",
                vec![data(Stream::Labelled, &[Var::X, label_var])],
                vec![models.use_of(&label_enc)?],
            );
            t.weight = w;
            q_terms.push(t);
        }
    }
    Ok(vec![PlayerPlan { player: 0, terms: p_terms }, PlayerPlan { player: 1, terms: q_terms }])
}

/// The plans applicable to `batch`: terms whose data stream is absent from
/// the batch (or that have nothing to average over) are dropped. A player
/// left without any term is a configuration error naming the missing streams.
pub fn utility_terms(scenario: &Scenario, models: &ModelSet, batch: &Batch) -> Result<Vec<PlayerPlan>> {
    let mut plans = scenario_plans(scenario, models)?;
    for plan in &mut plans {
        let wanted: Vec<Stream> = plan.terms.iter().filter_map(|t| t.stream()).collect();
        plan.terms.retain(|t| t.outer_count(batch) > 0);
        if plan.terms.is_empty() {
            return Err(Error::Configuration(format!(
                "player {} has no utility term for this batch (needs one of {:?} or model draws)",
                models.players[plan.player], wanted
            )));
        }
    }
    Ok(plans)
}
