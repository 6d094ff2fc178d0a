//! Stacked-LSTM journey model.
//!
//! Each step consumes the CNN embedding of one phrase (the search keywords
//! first, then page names) and emits a distribution over the next page,
//! including the terminal class.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journeydata::PageVocabulary;
use crate::numerics::{cross_entropy, Matrix, Tape, Var};
use crate::simulator::JourneyPrefix;
use crate::textenc::{glorot_uniform, Alphabet, CnnEncoder, EncoderConfig};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), lstm_layers: 2, lstm_hidden: 128, fc_hidden: 256, dropout: 0.5 }
    }
}

/// One LSTM layer. Gate columns are ordered input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    /// `D x 4H`
    pub w_input: Matrix,
    /// `H x 4H`
    pub w_recurrent: Matrix,
    /// `1 x 4H`
    pub bias: Matrix,
}

impl LstmLayer {
    pub fn new<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Matrix::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        Self {
            w_input: glorot_uniform(input_dim, 4 * hidden, input_dim, hidden, rng),
            w_recurrent: glorot_uniform(hidden, 4 * hidden, hidden, hidden, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.rows()
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.w_input.cols() != 4 * h || self.w_recurrent.cols() != 4 * h || self.bias.shape() != (1, 4 * h) {
            return Err(Error::Shape(format!("inconsistent LSTM layer with hidden size {h}")));
        }
        Ok(())
    }
}

/// Parameter nodes of one layer on a tape.
#[derive(Clone, Copy, Debug)]
struct LayerVars {
    w_input: Var,
    w_recurrent: Var,
    bias: Var,
    hidden: usize,
}

/// Runs one cell update on `B`-row batches; returns `(h', c')`.
fn lstm_cell(tape: &mut Tape<'_>, layer: LayerVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hs = layer.hidden;
    let zx = tape.matmul(x, layer.w_input)?;
    let zh = tape.matmul(h, layer.w_recurrent)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, layer.bias)?;
    let i = tape.slice_cols(z, 0, hs)?;
    let i = tape.sigmoid(i);
    let f = tape.slice_cols(z, hs, 2 * hs)?;
    let f = tape.sigmoid(f);
    let o = tape.slice_cols(z, 2 * hs, 3 * hs)?;
    let o = tape.sigmoid(o);
    let g = tape.slice_cols(z, 3 * hs, 4 * hs)?;
    let g = tape.tanh(g);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Single-row LSTM step outside of any model: returns `(h', c')`.
pub fn lstm_step(layer: &LstmLayer, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    layer.validate()?;
    let hs = layer.hidden();
    if x.len() != layer.input_dim() || h.len() != hs || c.len() != hs {
        return Err(Error::Shape(format!(
            "LSTM step with input {} (expects {}), state {}/{} (expects {hs})",
            x.len(),
            layer.input_dim(),
            h.len(),
            c.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = LayerVars {
        w_input: tape.constant_ref(&layer.w_input),
        w_recurrent: tape.constant_ref(&layer.w_recurrent),
        bias: tape.constant_ref(&layer.bias),
        hidden: hs,
    };
    let xv = tape.constant(Matrix::row_vector(x.to_vec()));
    let hv = tape.constant(Matrix::row_vector(h.to_vec()));
    let cv = tape.constant(Matrix::row_vector(c.to_vec()));
    let (h2, c2) = lstm_cell(&mut tape, vars, xv, hv, cv)?;
    Ok((tape.value(h2).data().to_vec(), tape.value(c2).data().to_vec()))
}

/// Per-layer hidden and cell vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(layers: &[LstmLayer]) -> Self {
        Self {
            h: layers.iter().map(|l| vec![0.0; l.hidden()]).collect(),
            c: layers.iter().map(|l| vec![0.0; l.hidden()]).collect(),
        }
    }
}

/// Next-page distribution emitted after input step `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPrediction {
    pub step: usize,
    pub probs: Vec<f64>,
}

/// Training-time view of a batch: distinct phrases plus, per time step, the
/// phrase index and target class of every row (`None` on padding).
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub phrases: Vec<String>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Option<usize>>>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().filter(|t| t.is_some()).count()
    }
}

struct ModelVars {
    all: Vec<Var>,
    encoder: Vec<Var>,
    layers: Vec<LayerVars>,
    fc_weight: Var,
    fc_bias: Var,
    out_weight: Var,
    out_bias: Var,
}

impl ModelVars {
    fn from_slice(model: &SequenceModel, vars: &[Var]) -> Self {
        let n_enc = 2 * model.encoder.stages().len();
        let layers = (0..model.lstm.len())
            .map(|k| {
                let b = n_enc + 3 * k;
                LayerVars {
                    w_input: vars[b],
                    w_recurrent: vars[b + 1],
                    bias: vars[b + 2],
                    hidden: model.lstm[k].hidden(),
                }
            })
            .collect();
        let t = n_enc + 3 * model.lstm.len();
        ModelVars {
            all: vars.to_vec(),
            encoder: vars[..n_enc].to_vec(),
            layers,
            fc_weight: vars[t],
            fc_bias: vars[t + 1],
            out_weight: vars[t + 2],
            out_bias: vars[t + 3],
        }
    }
}

/// CNN encoder + stacked LSTM + ReLU projection + softmax over pages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceModel {
    config: ModelConfig,
    vocab: PageVocabulary,
    encoder: CnnEncoder,
    lstm: Vec<LstmLayer>,
    fc_weight: Matrix,
    fc_bias: Matrix,
    out_weight: Matrix,
    out_bias: Matrix,
    #[serde(skip)]
    page_embeddings: OnceLock<HashMap<String, Vec<f64>>>,
}

impl PartialEq for SequenceModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab == other.vocab && self.params() == other.params()
    }
}

impl SequenceModel {
    pub fn new(config: ModelConfig, vocab: PageVocabulary, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Argument(format!("dropout {} is not in [0, 1)", config.dropout)));
        }
        if config.lstm_layers == 0 || config.lstm_hidden == 0 || config.fc_hidden == 0 {
            return Err(Error::Argument("LSTM layers, hidden size and FC width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = CnnEncoder::new(Alphabet::default(), config.encoder.clone(), &mut rng)?;
        let mut lstm = Vec::with_capacity(config.lstm_layers);
        let mut dim = encoder.output_dim();
        for _ in 0..config.lstm_layers {
            lstm.push(LstmLayer::new(dim, config.lstm_hidden, &mut rng));
            dim = config.lstm_hidden;
        }
        let n = vocab.len();
        let (h, f) = (config.lstm_hidden, config.fc_hidden);
        Ok(Self {
            fc_weight: glorot_uniform(h, f, h, f, &mut rng),
            fc_bias: Matrix::zeros(1, f),
            out_weight: glorot_uniform(f, n, f, n, &mut rng),
            out_bias: Matrix::zeros(1, n),
            config,
            vocab,
            encoder,
            lstm,
            page_embeddings: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &PageVocabulary {
        &self.vocab
    }

    pub fn encoder(&self) -> &CnnEncoder {
        &self.encoder
    }

    pub fn layers(&self) -> &[LstmLayer] {
        &self.lstm
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    /// Every weight matrix, in a fixed order.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = self.encoder.params();
        for l in &self.lstm {
            out.extend([&l.w_input, &l.w_recurrent, &l.bias]);
        }
        out.extend([&self.fc_weight, &self.fc_bias, &self.out_weight, &self.out_bias]);
        out
    }

    /// Mutable access in [`SequenceModel::params`] order. Drops cached page
    /// embeddings.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.page_embeddings = OnceLock::new();
        let mut out = self.encoder.params_mut();
        for l in &mut self.lstm {
            out.extend([&mut l.w_input, &mut l.w_recurrent, &mut l.bias]);
        }
        out.extend([&mut self.fc_weight, &mut self.fc_bias, &mut self.out_weight, &mut self.out_bias]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Checks every shape and that all weights are finite.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.lstm.len() != self.config.lstm_layers || self.lstm.is_empty() {
            return Err(Error::Shape("LSTM layer count differs from config".into()));
        }
        let mut dim = self.encoder.output_dim();
        for l in &self.lstm {
            l.validate()?;
            if l.input_dim() != dim || l.hidden() != self.config.lstm_hidden {
                return Err(Error::Shape("LSTM layer dimensions differ from config".into()));
            }
            dim = l.hidden();
        }
        let (f, n) = (self.config.fc_hidden, self.vocab.len());
        if self.fc_weight.shape() != (dim, f)
            || self.fc_bias.shape() != (1, f)
            || self.out_weight.shape() != (f, n)
            || self.out_bias.shape() != (1, n)
        {
            return Err(Error::Shape("projection weights do not match config and vocabulary".into()));
        }
        if self.params().iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric("model has non-finite weights".into()));
        }
        Ok(())
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> ModelVars {
        let all: Vec<Var> =
            self.params().into_iter().map(|m| if trainable { tape.param(m) } else { tape.constant_ref(m) }).collect();
        ModelVars::from_slice(self, &all)
    }

    /// Hidden rows -> ReLU FC -> optional inverted dropout -> softmax.
    fn head<R: Rng>(&self, tape: &mut Tape<'_>, vars: &ModelVars, hidden: Var, dropout: Option<&mut R>) -> Result<Var> {
        let z = tape.matmul(hidden, vars.fc_weight)?;
        let z = tape.add_row(z, vars.fc_bias)?;
        let mut a = tape.relu(z);
        if let Some(rng) = dropout {
            let rate = self.config.dropout;
            if rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..tape.value(a).len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
                a = tape.mask(a, mask)?;
            }
        }
        let logits = tape.matmul(a, vars.out_weight)?;
        let logits = tape.add_row(logits, vars.out_bias)?;
        tape.softmax(logits)
    }

    /// Summed cross-entropy of a padded batch, with gradients accumulated
    /// into every parameter's gradient slot. Returns the loss.
    pub fn accumulate_batch_gradients<R: Rng>(&mut self, batch: &Batch, dropout: Option<&mut R>) -> Result<f64> {
        let (loss, grads) = {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, true);
            let loss = self.batch_loss(&mut tape, &vars, batch, dropout)?;
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = vars.all.iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec)).collect();
            (tape.value(loss).data()[0], grads)
        };
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            if let Some(g) = g {
                p.accumulate_grad(&g)?;
            }
        }
        Ok(loss)
    }

    fn batch_loss<R: Rng>(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        batch: &Batch,
        dropout: Option<&mut R>,
    ) -> Result<Var> {
        let b = batch.rows();
        if b == 0 || batch.inputs.len() != batch.targets.len() {
            return Err(Error::Argument("empty or inconsistent batch".into()));
        }
        let rows: Vec<Var> =
            batch.phrases.iter().map(|p| self.encoder.embed_on_tape(tape, &vars.encoder, p)).collect::<Result<_>>()?;
        let table = tape.concat_rows(&rows)?;
        let mut h: Vec<Var> = vars.layers.iter().map(|l| tape.constant(Matrix::zeros(b, l.hidden))).collect();
        let mut c = h.clone();
        let mut tops = Vec::with_capacity(batch.inputs.len());
        for idx in &batch.inputs {
            if idx.len() != b {
                return Err(Error::Argument("ragged batch".into()));
            }
            let mut x = tape.gather_rows(table, idx.clone())?;
            for (k, layer) in vars.layers.iter().enumerate() {
                let (h2, c2) = lstm_cell(tape, *layer, x, h[k], c[k])?;
                h[k] = h2;
                c[k] = c2;
                x = h2;
            }
            tops.push(x);
        }
        let hidden = tape.concat_rows(&tops)?;
        let probs = self.head(tape, vars, hidden, dropout)?;
        let targets = batch.targets.iter().flatten().copied().collect();
        tape.cross_entropy(probs, targets)
    }

    /// Embedding of `phrase`; vocabulary page names are cached.
    pub fn embed(&self, phrase: &str) -> Vec<f64> {
        let cache = self
            .page_embeddings
            .get_or_init(|| self.vocab.names().iter().map(|n| (n.clone(), self.encoder.embed_phrase(n))).collect());
        match cache.get(phrase) {
            Some(v) => v.clone(),
            None => self.encoder.embed_phrase(phrase),
        }
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState::zeros(&self.lstm)
    }

    /// Feeds one phrase, updating `state`; returns the next-page distribution.
    pub fn step(&self, state: &mut LstmState, phrase: &str) -> Result<Vec<f64>> {
        self.step_embedding(state, self.embed(phrase))
    }

    fn step_embedding(&self, state: &mut LstmState, embedding: Vec<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut x = tape.constant(Matrix::row_vector(embedding));
        for (k, layer) in vars.layers.iter().enumerate() {
            let h = tape.constant(Matrix::row_vector(std::mem::take(&mut state.h[k])));
            let c = tape.constant(Matrix::row_vector(std::mem::take(&mut state.c[k])));
            let (h2, c2) = lstm_cell(&mut tape, *layer, x, h, c)?;
            state.h[k] = tape.value(h2).data().to_vec();
            state.c[k] = tape.value(c2).data().to_vec();
            x = h2;
        }
        let probs = self.head::<ChaCha8Rng>(&mut tape, &vars, x, None)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// One prediction per input, threading state from zeros. Inputs are the
    /// keyword phrase (possibly empty) followed by page names.
    pub fn forward_session(&self, inputs: &[&str]) -> Result<Vec<StepPrediction>> {
        if inputs.is_empty() {
            return Err(Error::Argument("forward_session needs at least one input".into()));
        }
        let mut state = self.initial_state();
        inputs
            .iter()
            .enumerate()
            .map(|(step, p)| Ok(StepPrediction { step, probs: self.step(&mut state, p)? }))
            .collect()
    }

    /// Distribution over the page that follows `prefix`.
    pub fn predict_next(&self, prefix: &JourneyPrefix) -> Result<Vec<f64>> {
        let mut inputs: Vec<&str> = vec![&prefix.keywords];
        inputs.extend(prefix.pages.iter().map(String::as_str));
        let mut preds = self.forward_session(&inputs)?;
        Ok(preds.pop().expect("non-empty").probs)
    }
}

/// Sum over steps of `-ln ŷ_t[target_t]`.
pub fn session_loss(predictions: &[StepPrediction], targets: &[usize]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Argument(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    predictions.iter().zip(targets).map(|(p, &t)| cross_entropy(&p.probs, t)).sum()
}
