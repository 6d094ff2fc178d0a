//! Character-level phrase encoder: one-hot quantization followed by stacked
//! (convolution, ReLU, max-pool) stages, flattened to a fixed-length vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Default symbol set: letters, digits and the punctuation that shows up in
/// search phrases and URL-style page names.
pub const DEFAULT_SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 -_/.'";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Argument(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn lookup(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::new(DEFAULT_SYMBOLS).expect("default alphabet has unique symbols")
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.symbols()
    }
}

/// Lowercases, then keeps the first `max_len` characters.
pub fn canonical_phrase(phrase: &str, max_len: usize) -> String {
    phrase.chars().flat_map(char::to_lowercase).take(max_len).collect()
}

/// `max_len x |alphabet|` one-hot rows; padding and unknown characters give
/// zero rows.
pub fn quantize(phrase: &str, alphabet: &Alphabet, max_len: usize) -> Matrix {
    let mut m = Matrix::zeros(max_len, alphabet.len());
    for (row, c) in canonical_phrase(phrase, max_len).chars().enumerate() {
        if let Some(col) = alphabet.lookup(c) {
            m.set(row, col, 1.0);
        }
    }
    m
}

/// Uniform initialisation in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub max_len: usize,
    pub stages: usize,
    pub filters: usize,
    pub kernel_width: usize,
    pub pool: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { max_len: 64, stages: 2, filters: 64, kernel_width: 3, pool: 4 }
    }
}

impl EncoderConfig {
    /// Rows left after every stage, or an error if a stage would see fewer
    /// rows than its kernel width.
    pub fn output_rows(&self) -> Result<usize> {
        if self.stages == 0 || self.filters == 0 || self.kernel_width == 0 || self.pool == 0 {
            return Err(Error::Argument("encoder stages, filters, kernel width and pool must be positive".into()));
        }
        let mut len = self.max_len;
        for stage in 0..self.stages {
            if len < self.kernel_width {
                return Err(Error::Argument(format!(
                    "encoder stage {stage} sees {len} rows, fewer than kernel width {}",
                    self.kernel_width
                )));
            }
            len = (len - self.kernel_width + 1).div_ceil(self.pool);
        }
        Ok(len)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.output_rows()? * self.filters)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStage {
    /// `(width * C_in) x F`; row `i * C_in + c` is offset `i`, channel `c`.
    pub kernel: Matrix,
    pub bias: Matrix,
    pub width: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnEncoder {
    alphabet: Alphabet,
    config: EncoderConfig,
    stages: Vec<ConvStage>,
}

impl CnnEncoder {
    pub fn new<R: Rng>(alphabet: Alphabet, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.output_rows()?;
        if alphabet.is_empty() {
            return Err(Error::Argument("empty alphabet".into()));
        }
        let mut stages = Vec::with_capacity(config.stages);
        let mut channels = alphabet.len();
        for _ in 0..config.stages {
            let w = config.kernel_width;
            let kernel = glorot_uniform(w * channels, config.filters, w * channels, w * config.filters, rng);
            stages.push(ConvStage { kernel, bias: Matrix::zeros(1, config.filters), width: w, pool: config.pool });
            channels = config.filters;
        }
        Ok(Self { alphabet, config, stages })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn stages(&self) -> &[ConvStage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [ConvStage] {
        &mut self.stages
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim().expect("validated at construction")
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.stages.iter().flat_map(|s| [&s.kernel, &s.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.stages.iter_mut().flat_map(|s| [&mut s.kernel, &mut s.bias]).collect()
    }

    /// Checks that stored weights agree with the alphabet and config.
    pub(crate) fn validate(&self) -> Result<()> {
        self.config.output_rows()?;
        if self.stages.len() != self.config.stages {
            return Err(Error::Shape("encoder stage count differs from config".into()));
        }
        let mut channels = self.alphabet.len();
        for s in &self.stages {
            if s.kernel.shape() != (s.width * channels, self.config.filters)
                || s.bias.shape() != (1, self.config.filters)
                || s.width != self.config.kernel_width
                || s.pool != self.config.pool
            {
                return Err(Error::Shape("encoder stage weights do not match config".into()));
            }
            channels = self.config.filters;
        }
        Ok(())
    }

    /// Encodes `phrase` on `tape` using parameter nodes laid out as
    /// [`CnnEncoder::params`]. Returns a `1 x output_dim` node.
    pub fn embed_on_tape(&self, tape: &mut Tape, params: &[Var], phrase: &str) -> Result<Var> {
        if params.len() != 2 * self.stages.len() {
            return Err(Error::Argument("encoder parameter list has the wrong length".into()));
        }
        let mut x = tape.constant(quantize(phrase, &self.alphabet, self.config.max_len));
        for (stage, p) in self.stages.iter().zip(params.chunks(2)) {
            let conv = tape.conv1d(x, p[0], p[1], stage.width)?;
            x = tape.max_pool(conv, stage.pool)?;
        }
        Ok(tape.flatten(x))
    }

    /// Fixed-length embedding of `phrase`.
    pub fn embed_phrase(&self, phrase: &str) -> Vec<f64> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params().into_iter().map(|m| tape.constant(m.clone())).collect();
        let v = self.embed_on_tape(&mut tape, &params, phrase).expect("encoder validated at construction");
        tape.value(v).data().to_vec()
    }
}
