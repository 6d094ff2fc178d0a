//! Mini-batch training, next-page evaluation and ensembles.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journeydata::{replicate_dwell, DwellRule, PageVocabulary, Session, UNKNOWN_PAGE};
use crate::numerics::{cross_entropy, PROB_FLOOR};
use crate::seqmodel::{Batch, LstmState, ModelConfig, SequenceModel};
use crate::simulator::{derive_seed, JourneyPrefix, Predictor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Batches per length-sorted window; 1 draws batches uniformly. Wider
    /// windows pad less but make each batch length-homogeneous.
    pub bucket_window: usize,
    /// Decay of the running squared-gradient average.
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub dwell: DwellRule,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            clip_norm: 5.0,
            bucket_window: 1,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            dwell: DwellRule::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Argument("dropout must be in [0, 1)".into()));
        }
        if self.bucket_window < 1 {
            return Err(Error::Argument("bucket window must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Argument("clip norm must be positive".into()));
        }
        if !(self.dwell.unit_seconds > 0.0) || self.dwell.cap < 1 {
            return Err(Error::Argument("dwell unit must be positive and cap at least 1".into()));
        }
        self.model.encoder.output_rows()?;
        Ok(())
    }
}

/// Pooled next-page accuracy and mean per-step loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-step training loss over the epoch, dropout active.
    pub train_loss: f64,
    pub eval: Option<EvalResult>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Evaluation before the first update.
    pub initial_eval: Option<EvalResult>,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// Equality of everything except wall-clock times.
    pub fn same_results(&self, other: &TrainReport) -> bool {
        self.initial_eval == other.initial_eval
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch && a.train_loss.to_bits() == b.train_loss.to_bits() && a.eval == b.eval
            })
    }

    /// `epoch,train_loss,eval_loss,eval_accuracy`; eval columns are empty
    /// when no evaluation set was given.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loss,eval_loss,eval_accuracy")?;
        if let Some(e) = &self.initial_eval {
            writeln!(out, "0,,{},{}", e.mean_loss, e.accuracy)?;
        }
        for s in &self.epochs {
            match &s.eval {
                Some(e) => writeln!(out, "{},{},{},{}", s.epoch, s.train_loss, e.mean_loss, e.accuracy)?,
                None => writeln!(out, "{},{},,", s.epoch, s.train_loss)?,
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// A session as model inputs and targets: inputs are the keywords followed
/// by every expanded page but the last; targets are the expanded pages
/// (ending with the exit class).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSession {
    pub inputs: Vec<String>,
    pub targets: Vec<usize>,
}

pub fn encode_session(session: &Session, vocab: &PageVocabulary, dwell: &DwellRule) -> EncodedSession {
    let expanded = replicate_dwell(session, dwell);
    let mut inputs = Vec::with_capacity(expanded.len());
    inputs.push(session.keywords.clone());
    inputs.extend(expanded[..expanded.len() - 1].iter().cloned());
    let targets = expanded.iter().map(|p| vocab.encode(p)).collect();
    EncodedSession { inputs, targets }
}

fn make_batch(sessions: &[&EncodedSession]) -> Batch {
    let mut phrase_index: HashMap<String, usize> = HashMap::new();
    let mut phrases = Vec::new();
    let mut intern = |p: &str| -> usize {
        *phrase_index.entry(p.to_string()).or_insert_with(|| {
            phrases.push(p.to_string());
            phrases.len() - 1
        })
    };
    let steps = sessions.iter().map(|s| s.inputs.len()).max().unwrap_or(0);
    let mut inputs = vec![Vec::with_capacity(sessions.len()); steps];
    let mut targets = vec![Vec::with_capacity(sessions.len()); steps];
    for s in sessions {
        for t in 0..steps {
            if t < s.inputs.len() {
                inputs[t].push(intern(&s.inputs[t]));
                targets[t].push(Some(s.targets[t]));
            } else {
                inputs[t].push(intern(""));
                targets[t].push(None);
            }
        }
    }
    Batch { phrases, inputs, targets }
}

/// Shuffles, sorts by length within windows of `bucket_window` batches,
/// then shuffles the batch order.
fn plan_batches(
    data: &[EncodedSession],
    batch_size: usize,
    bucket_window: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let window = batch_size * bucket_window;
    let mut batches = Vec::new();
    for chunk in order.chunks_mut(window) {
        chunk.sort_by_key(|&i| data[i].inputs.len());
        batches.extend(chunk.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

struct RmsProp {
    squares: Vec<Vec<f64>>,
}

impl RmsProp {
    fn new(model: &SequenceModel) -> Self {
        Self { squares: model.params().iter().map(|m| vec![0.0; m.len()]).collect() }
    }

    /// Scales accumulated gradients by `grad_scale`, clips them to
    /// `clip_norm` (global L2) and applies one step.
    fn step(&mut self, model: &mut SequenceModel, cfg: &TrainConfig, grad_scale: f64) {
        let mut params = model.params_mut();
        let norm_sq: f64 = params.iter().filter_map(|p| p.grad()).flatten().map(|g| g * g).sum();
        let norm = norm_sq.sqrt() * grad_scale;
        let scale = grad_scale * if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        for (p, sq) in params.iter_mut().zip(&mut self.squares) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            let data = p.data_mut();
            for k in 0..g.len() {
                let gk = g[k] * scale;
                sq[k] = cfg.rms_decay * sq[k] + (1.0 - cfg.rms_decay) * gk * gk;
                data[k] -= cfg.learning_rate * gk / (sq[k].sqrt() + cfg.rms_eps);
            }
            p.zero_grad();
        }
    }
}

/// Trains a fresh model on `sessions`, evaluating on `eval_sessions` (may be
/// empty) before training and after every epoch.
pub fn train(
    sessions: &[Session],
    eval_sessions: &[Session],
    config: &TrainConfig,
    vocab: &PageVocabulary,
) -> Result<(SequenceModel, TrainReport)> {
    let model = SequenceModel::new(config.model.clone(), vocab.clone(), config.seed)?;
    train_model(model, sessions, eval_sessions, config)
}

/// Continues training `model`.
pub fn train_model(
    mut model: SequenceModel,
    sessions: &[Session],
    eval_sessions: &[Session],
    config: &TrainConfig,
) -> Result<(SequenceModel, TrainReport)> {
    config.validate()?;
    if sessions.is_empty() {
        return Err(Error::Argument("no training sessions".into()));
    }
    if let Some(s) = sessions.iter().chain(eval_sessions).find(|s| s.events.is_empty()) {
        return Err(Error::Argument(format!("session {:?} has no page events", s.session_id)));
    }
    let vocab = model.vocab().clone();
    let data: Vec<EncodedSession> = sessions.iter().map(|s| encode_session(s, &vocab, &config.dwell)).collect();
    let evaluate_now = |m: &SequenceModel| -> Option<EvalResult> {
        (!eval_sessions.is_empty()).then(|| evaluate(m, eval_sessions, &config.dwell))
    };

    let mut report = TrainReport { initial_eval: evaluate_now(&model), epochs: Vec::new() };
    let mut optimizer = RmsProp::new(&model);
    for p in model.params_mut() {
        p.zero_grad();
    }
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, 0));
        let plan = plan_batches(&data, config.batch_size, config.bucket_window, &mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for (b, idx) in plan.iter().enumerate() {
            let batch = make_batch(&idx.iter().map(|&i| &data[i]).collect::<Vec<_>>());
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, b as u64 + 1));
            let loss = model.accumulate_batch_gradients(&batch, Some(&mut dropout_rng))?;
            let grads_finite = model.params().iter().all(|p| p.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
            if !loss.is_finite() || !grads_finite {
                return Err(Error::Training { epoch, batch: b, message: format!("loss {loss}") });
            }
            optimizer.step(&mut model, config, 1.0 / batch.target_count() as f64);
            total += loss;
            steps += batch.target_count();
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Training { epoch, batch: plan.len(), message: "non-finite weights".into() });
        }
        report.epochs.push(EpochStats {
            epoch,
            train_loss: total / steps.max(1) as f64,
            eval: evaluate_now(&model),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, report))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Per-step next-page accuracy and loss, pooled over all sessions. Pages
/// the predictor does not know map to its unknown class, or count as misses
/// when it has none.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, sessions: &[Session], dwell: &DwellRule) -> EvalResult {
    let per_session: Vec<Result<(usize, f64, usize)>> =
        sessions.par_iter().map(|s| score_session(predictor, s, dwell)).collect();
    let (mut correct, mut loss, mut steps) = (0usize, 0.0, 0usize);
    for r in per_session {
        match r {
            Ok((c, l, n)) => {
                correct += c;
                loss += l;
                steps += n;
            }
            Err(_) => loss = f64::NAN,
        }
    }
    let steps_f = steps.max(1) as f64;
    EvalResult { accuracy: correct as f64 / steps_f, mean_loss: loss / steps_f, steps }
}

fn score_session<P: Predictor + ?Sized>(
    predictor: &P,
    session: &Session,
    dwell: &DwellRule,
) -> Result<(usize, f64, usize)> {
    let expanded = replicate_dwell(session, dwell);
    let unknown = predictor.class_index(UNKNOWN_PAGE);
    let (mut state, mut dist) = predictor.start(&session.keywords)?;
    let (mut correct, mut loss) = (0usize, 0.0);
    for (t, page) in expanded.iter().enumerate() {
        match predictor.class_index(page).or(unknown) {
            Some(target) => {
                if argmax(&dist) == target {
                    correct += 1;
                }
                loss += cross_entropy(&dist, target)?;
            }
            None => loss -= PROB_FLOOR.ln(),
        }
        if t + 1 < expanded.len() {
            dist = predictor.observe(&mut state, page)?;
        }
    }
    Ok((correct, loss, expanded.len()))
}

/// Independently trained models sharing one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<SequenceModel>,
}

impl Ensemble {
    pub fn new(members: Vec<SequenceModel>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Argument("empty ensemble".into()))?;
        if members.iter().any(|m| m.vocab() != first.vocab()) {
            return Err(Error::Argument("ensemble members must share one vocabulary".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[SequenceModel] {
        &self.members
    }

    pub fn into_members(self) -> Vec<SequenceModel> {
        self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn vocab(&self) -> &PageVocabulary {
        self.members[0].vocab()
    }

    fn average(&self, dists: Vec<Vec<f64>>) -> Vec<f64> {
        let mut acc = vec![0.0; self.vocab().len()];
        for d in &dists {
            acc.iter_mut().zip(d).for_each(|(a, p)| *a += p);
        }
        let k = dists.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }
}

/// Arithmetic mean of the members' next-page distributions.
pub fn ensemble_predict(ensemble: &Ensemble, prefix: &JourneyPrefix) -> Result<Vec<f64>> {
    if ensemble.is_empty() {
        return Err(Error::Argument("empty ensemble".into()));
    }
    let dists = ensemble.members.iter().map(|m| m.predict_next(prefix)).collect::<Result<Vec<_>>>()?;
    Ok(ensemble.average(dists))
}

impl Predictor for Ensemble {
    type State = Vec<LstmState>;

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

    fn start(&self, keywords: &str) -> Result<(Vec<LstmState>, Vec<f64>)> {
        let (states, dists): (Vec<_>, Vec<_>) =
            self.members.iter().map(|m| m.start(keywords)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        Ok((states, self.average(dists)))
    }

    fn observe(&self, state: &mut Vec<LstmState>, page: &str) -> Result<Vec<f64>> {
        let dists =
            self.members.iter().zip(state.iter_mut()).map(|(m, s)| m.step(s, page)).collect::<Result<Vec<_>>>()?;
        Ok(self.average(dists))
    }
}

/// Trains `k` members with seeds `seed, seed + 1, ...`, in parallel.
pub fn train_ensemble(
    sessions: &[Session],
    eval_sessions: &[Session],
    config: &TrainConfig,
    vocab: &PageVocabulary,
    k: usize,
) -> Result<(Ensemble, Vec<TrainReport>)> {
    if k < 1 {
        return Err(Error::Argument("ensemble size must be at least 1".into()));
    }
    let trained: Vec<(SequenceModel, TrainReport)> = (0..k as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = TrainConfig { seed: config.seed.wrapping_add(i), ..config.clone() };
            train(sessions, eval_sessions, &cfg, vocab)
        })
        .collect::<Result<_>>()?;
    let (models, reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((Ensemble::new(models)?, reports))
}
