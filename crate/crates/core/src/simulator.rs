//! Monte Carlo journey rollouts and conversion estimation.
//!
//! A [`Predictor`] turns a journey prefix into a next-page distribution and
//! can be advanced one sampled page at a time. Rollouts sample each step from
//! the predictor's own distribution and feed the sample back. Every rollout
//! draws from its own ChaCha stream keyed by `(seed, sample index)`, so
//! results do not depend on how rollouts are spread over threads.
//!
//! [`exact_conversion`] enumerates every continuation instead, which is only
//! feasible for tiny vocabularies or sparse predictors; it exists to check
//! the sampler.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journeydata::{MarkovSpec, NULL_PAGE};
use crate::seqmodel::{LstmState, SequenceModel};

pub const DEFAULT_HORIZON: usize = 30;
pub const DEFAULT_SAMPLES: usize = 1_000;
/// Largest number of complete paths [`exact_conversion`] will enumerate.
pub const MAX_ENUMERATED_PATHS: u64 = 10_000_000;

/// Observed part of a journey: keywords plus visited pages.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JourneyPrefix {
    pub keywords: String,
    pub pages: Vec<String>,
}

impl JourneyPrefix {
    pub fn new(keywords: impl Into<String>, pages: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { keywords: keywords.into(), pages: pages.into_iter().map(Into::into).collect() }
    }
}

/// A conversion goal: reaching any of `pages`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub id: String,
    pub pages: BTreeSet<String>,
}

impl Objective {
    pub fn new(id: impl Into<String>, pages: impl IntoIterator<Item = impl Into<String>>) -> Result<Self> {
        let pages: BTreeSet<String> = pages.into_iter().map(Into::into).collect();
        if pages.is_empty() {
            return Err(Error::Argument("objective needs at least one target page".into()));
        }
        if pages.contains(NULL_PAGE) {
            return Err(Error::Argument("the exit page cannot be an objective target".into()));
        }
        Ok(Self { id: id.into(), pages })
    }

    fn hit_by_prefix(&self, prefix: &JourneyPrefix) -> bool {
        prefix.pages.iter().any(|p| self.pages.contains(p))
    }

    fn resolve<P: Predictor + ?Sized>(&self, predictor: &P) -> Result<Vec<bool>> {
        let mut mask = vec![false; predictor.num_classes()];
        for p in &self.pages {
            let idx = predictor
                .class_index(p)
                .ok_or_else(|| Error::Argument(format!("objective {:?} targets unknown page {p:?}", self.id)))?;
            mask[idx] = true;
        }
        Ok(mask)
    }
}

/// Anything that yields next-page distributions over a fixed class set whose
/// terminal class is [`Predictor::null_index`].
pub trait Predictor: Sync {
    type State: Clone + Send + Sync;

    fn num_classes(&self) -> usize;
    fn null_index(&self) -> usize;
    fn class_index(&self, page: &str) -> Option<usize>;
    fn class_name(&self, index: usize) -> &str;

    /// Consumes the keyword phrase; returns the state and the distribution
    /// of the first page.
    fn start(&self, keywords: &str) -> Result<(Self::State, Vec<f64>)>;

    /// Feeds one visited page; returns the distribution of the next one.
    fn observe(&self, state: &mut Self::State, page: &str) -> Result<Vec<f64>>;

    /// Consumes a whole prefix.
    fn begin(&self, prefix: &JourneyPrefix) -> Result<(Self::State, Vec<f64>)> {
        let (mut state, mut dist) = self.start(&prefix.keywords)?;
        for p in &prefix.pages {
            dist = self.observe(&mut state, p)?;
        }
        Ok((state, dist))
    }

    /// Feeds a sampled class.
    fn advance(&self, state: &mut Self::State, class: usize) -> Result<Vec<f64>> {
        if class >= self.num_classes() {
            return Err(Error::Argument(format!("class {class} outside the predictor")));
        }
        let name = self.class_name(class).to_string();
        self.observe(state, &name)
    }
}

impl Predictor for SequenceModel {
    type State = LstmState;

    fn num_classes(&self) -> usize {
        self.vocab().len()
    }

    fn null_index(&self) -> usize {
        self.vocab().null_index()
    }

    fn class_index(&self, page: &str) -> Option<usize> {
        self.vocab().lookup(page)
    }

    fn class_name(&self, index: usize) -> &str {
        self.vocab().decode(index).unwrap_or("")
    }

    fn start(&self, keywords: &str) -> Result<(LstmState, Vec<f64>)> {
        let mut state = self.initial_state();
        let dist = self.step(&mut state, keywords)?;
        Ok((state, dist))
    }

    fn observe(&self, state: &mut LstmState, page: &str) -> Result<Vec<f64>> {
        self.step(state, page)
    }
}

/// First-order Markov predictor over named classes; the last class is the
/// exit. The first distribution depends only on the keywords.
#[derive(Clone, Debug)]
pub struct MarkovPredictor {
    names: Vec<String>,
    transitions: Vec<Vec<f64>>,
    initial: Vec<f64>,
    keywords_by_class: Vec<String>,
}

impl MarkovPredictor {
    /// `transitions[i]` is the next-class distribution after class `i`. The
    /// last class is renamed to [`NULL_PAGE`].
    pub fn new(mut names: Vec<String>, transitions: Vec<Vec<f64>>, initial: Vec<f64>) -> Result<Self> {
        let n = names.len();
        if n < 2 || transitions.len() != n || initial.len() != n || transitions.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("Markov predictor needs n >= 2 names and n x n transitions".into()));
        }
        names[n - 1] = NULL_PAGE.to_string();
        Ok(Self { names, transitions, initial, keywords_by_class: Vec::new() })
    }

    /// Ground-truth predictor of a synthetic chain: class `i` is state `i`
    /// and the terminal state is the exit class.
    pub fn from_spec(spec: &MarkovSpec) -> Result<Self> {
        spec.validate()?;
        let mut p = Self::new(spec.states.clone(), spec.transitions.clone(), spec.initial.clone())?;
        p.keywords_by_class = spec.keywords_by_state.clone();
        Ok(p)
    }

    fn first_distribution(&self, keywords: &str) -> Vec<f64> {
        if self.keywords_by_class.is_empty() {
            return self.initial.clone();
        }
        let masked: Vec<f64> = self
            .initial
            .iter()
            .zip(&self.keywords_by_class)
            .map(|(p, k)| if k == keywords { *p } else { 0.0 })
            .collect();
        let total: f64 = masked.iter().sum();
        if total > 0.0 {
            masked.iter().map(|p| p / total).collect()
        } else {
            self.initial.clone()
        }
    }
}

impl Predictor for MarkovPredictor {
    type State = usize;

    fn num_classes(&self) -> usize {
        self.names.len()
    }

    fn null_index(&self) -> usize {
        self.names.len() - 1
    }

    fn class_index(&self, page: &str) -> Option<usize> {
        self.names.iter().position(|n| n == page)
    }

    fn class_name(&self, index: usize) -> &str {
        self.names.get(index).map_or("", String::as_str)
    }

    fn start(&self, keywords: &str) -> Result<(usize, Vec<f64>)> {
        Ok((usize::MAX, self.first_distribution(keywords)))
    }

    fn observe(&self, state: &mut usize, page: &str) -> Result<Vec<f64>> {
        let i = self
            .class_index(page)
            .ok_or_else(|| Error::Argument(format!("page {page:?} is not a state of the chain")))?;
        *state = i;
        Ok(self.transitions[i].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// The exit page was sampled.
    Exit,
    /// `horizon` pages were sampled without an exit.
    Horizon,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedJourney {
    pub prefix: JourneyPrefix,
    /// Sampled pages; [`NULL_PAGE`] appears only as the last element.
    pub continuation: Vec<String>,
    pub termination: Termination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionEstimate {
    pub objective_id: String,
    pub probability: f64,
    pub std_err: f64,
    pub n_samples: usize,
    pub horizon: usize,
}

impl ConversionEstimate {
    fn from_hits(objective: &Objective, hits: usize, n: usize, horizon: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            objective_id: objective.id.clone(),
            probability: p,
            std_err: (p * (1.0 - p) / n as f64).sqrt(),
            n_samples: n,
            horizon,
        }
    }
}

/// Inverse-CDF categorical draw; never returns a zero-probability class.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Mixes a seed with stream coordinates (splitmix64 finaliser).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for rollout `index` under `seed`.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples up to `horizon` pages, stopping early at an exit or, when `stop`
/// is given, at the first class it marks. Returns the sampled classes.
fn continue_from<P: Predictor + ?Sized, R: Rng>(
    predictor: &P,
    mut state: P::State,
    mut dist: Vec<f64>,
    horizon: usize,
    stop: Option<&[bool]>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let null = predictor.null_index();
    let mut out = Vec::with_capacity(horizon.min(64));
    for t in 0..horizon {
        let s = sample_categorical(&dist, rng);
        out.push(s);
        if s == null || stop.is_some_and(|m| m[s]) {
            break;
        }
        if t + 1 < horizon {
            dist = predictor.advance(&mut state, s)?;
        }
    }
    Ok(out)
}

/// One sampled continuation of `prefix`.
pub fn rollout<P: Predictor + ?Sized, R: Rng>(
    predictor: &P,
    prefix: &JourneyPrefix,
    horizon: usize,
    rng: &mut R,
) -> Result<SimulatedJourney> {
    if horizon < 1 {
        return Err(Error::Argument("horizon must be at least 1".into()));
    }
    let (state, dist) = predictor.begin(prefix)?;
    let classes = continue_from(predictor, state, dist, horizon, None, rng)?;
    let termination =
        if classes.last() == Some(&predictor.null_index()) { Termination::Exit } else { Termination::Horizon };
    Ok(SimulatedJourney {
        prefix: prefix.clone(),
        continuation: classes.iter().map(|&c| predictor.class_name(c).to_string()).collect(),
        termination,
    })
}

/// Fraction of `n_samples` rollouts that visit an objective page, counting
/// pages already in the prefix.
pub fn estimate_conversion<P: Predictor + ?Sized>(
    predictor: &P,
    prefix: &JourneyPrefix,
    objective: &Objective,
    n_samples: usize,
    horizon: usize,
    seed: u64,
) -> Result<ConversionEstimate> {
    if n_samples < 1 {
        return Err(Error::Argument("n_samples must be at least 1".into()));
    }
    let mask = objective.resolve(predictor)?;
    if objective.hit_by_prefix(prefix) {
        return Ok(ConversionEstimate::from_hits(objective, n_samples, n_samples, horizon));
    }
    if horizon == 0 {
        return Ok(ConversionEstimate::from_hits(objective, 0, n_samples, horizon));
    }
    let (state, dist) = predictor.begin(prefix)?;
    let hits: Vec<bool> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rollout_rng(seed, i);
            let path = continue_from(predictor, state.clone(), dist.clone(), horizon, Some(&mask), &mut rng)?;
            Ok(path.last().is_some_and(|&c| mask[c]))
        })
        .collect::<Result<_>>()?;
    let n_hits = hits.iter().filter(|h| **h).count();
    Ok(ConversionEstimate::from_hits(objective, n_hits, n_samples, horizon))
}

/// Probability mass of continuations that reach the objective (`hit`) and
/// of those that do not (`miss`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathMass {
    pub hit: f64,
    pub miss: f64,
}

/// Exact enumeration of every continuation up to `horizon` pages.
pub fn exact_path_mass<P: Predictor + ?Sized>(
    predictor: &P,
    prefix: &JourneyPrefix,
    objective: &Objective,
    horizon: usize,
) -> Result<PathMass> {
    let mask = objective.resolve(predictor)?;
    if objective.hit_by_prefix(prefix) {
        return Ok(PathMass { hit: 1.0, miss: 0.0 });
    }
    if horizon == 0 {
        return Ok(PathMass { hit: 0.0, miss: 1.0 });
    }
    let (state, dist) = predictor.begin(prefix)?;
    let mut walk = Enumeration { predictor, mask: &mask, horizon, paths: 0, mass: PathMass { hit: 0.0, miss: 0.0 } };
    walk.visit(&state, &dist, 1, 1.0)?;
    Ok(walk.mass)
}

/// Probability that a journey continuing `prefix` reaches the objective
/// within `horizon` pages, by enumerating every path.
pub fn exact_conversion<P: Predictor + ?Sized>(
    predictor: &P,
    prefix: &JourneyPrefix,
    objective: &Objective,
    horizon: usize,
) -> Result<f64> {
    Ok(exact_path_mass(predictor, prefix, objective, horizon)?.hit)
}

struct Enumeration<'a, P: Predictor + ?Sized> {
    predictor: &'a P,
    mask: &'a [bool],
    horizon: usize,
    paths: u64,
    mass: PathMass,
}

impl<P: Predictor + ?Sized> Enumeration<'_, P> {
    fn leaf(&mut self, hit: bool, p: f64) -> Result<()> {
        self.paths += 1;
        if self.paths > MAX_ENUMERATED_PATHS {
            return Err(Error::Capacity(format!("more than {MAX_ENUMERATED_PATHS} paths at horizon {}", self.horizon)));
        }
        if hit {
            self.mass.hit += p;
        } else {
            self.mass.miss += p;
        }
        Ok(())
    }

    fn visit(&mut self, state: &P::State, dist: &[f64], depth: usize, p: f64) -> Result<()> {
        let null = self.predictor.null_index();
        for (c, &q) in dist.iter().enumerate() {
            if q <= 0.0 {
                continue;
            }
            let pc = p * q;
            if self.mask[c] {
                self.leaf(true, pc)?;
            } else if c == null || depth == self.horizon {
                self.leaf(false, pc)?;
            } else {
                let mut next = state.clone();
                let d = self.predictor.advance(&mut next, c)?;
                self.visit(&next, &d, depth + 1, pc)?;
            }
        }
        Ok(())
    }
}

/// Empirical distribution of the page at future step `t` (1-based).
/// Journeys that exited earlier count towards the exit class.
pub fn step_distribution<P: Predictor + ?Sized>(
    predictor: &P,
    prefix: &JourneyPrefix,
    t: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if t < 1 || n_samples < 1 {
        return Err(Error::Argument("step and sample count must be at least 1".into()));
    }
    let (state, dist) = predictor.begin(prefix)?;
    let finals: Vec<usize> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rollout_rng(seed, i);
            let path = continue_from(predictor, state.clone(), dist.clone(), t, None, &mut rng)?;
            Ok(*path.last().expect("horizon >= 1 gives at least one page"))
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; predictor.num_classes()];
    for c in finals {
        counts[c] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / n_samples as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub n_samples: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self { n_samples: DEFAULT_SAMPLES, horizon: DEFAULT_HORIZON, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub prefix_index: usize,
    pub estimate: ConversionEstimate,
}

/// Scores every (prefix, objective) pair, prefix-major. Pair `(p, o)` uses
/// the seed `derive_seed(params.seed, p, o)`.
pub fn score_batch<P: Predictor + ?Sized>(
    predictor: &P,
    prefixes: &[JourneyPrefix],
    objectives: &[Objective],
    params: &ScoreParams,
) -> Result<Vec<ScoreRow>> {
    if prefixes.is_empty() || objectives.is_empty() {
        return Err(Error::Argument("score_batch needs at least one prefix and one objective".into()));
    }
    let mut rows = Vec::with_capacity(prefixes.len() * objectives.len());
    for (pi, prefix) in prefixes.iter().enumerate() {
        for (oi, objective) in objectives.iter().enumerate() {
            let seed = derive_seed(params.seed, pi as u64, oi as u64);
            let estimate = estimate_conversion(predictor, prefix, objective, params.n_samples, params.horizon, seed)?;
            rows.push(ScoreRow { prefix_index: pi, estimate });
        }
    }
    Ok(rows)
}

/// CSV with columns `prefix_id,objective_id,probability,std_err,n_samples,horizon`.
pub fn write_score_csv<W: Write>(rows: &[ScoreRow], prefix_ids: &[String], mut out: W) -> Result<()> {
    writeln!(out, "prefix_id,objective_id,probability,std_err,n_samples,horizon")?;
    for r in rows {
        let id = prefix_ids
            .get(r.prefix_index)
            .ok_or_else(|| Error::Argument(format!("no id for prefix {}", r.prefix_index)))?;
        let e = &r.estimate;
        writeln!(out, "{},{},{},{},{},{}", id, e.objective_id, e.probability, e.std_err, e.n_samples, e.horizon)?;
    }
    out.flush()?;
    Ok(())
}
