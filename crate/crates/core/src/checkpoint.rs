//! Versioned JSON checkpoints holding one model or an ensemble.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::SequenceModel;
use crate::training::{Ensemble, TrainConfig};

pub const FORMAT: &str = "journey-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub train_config: TrainConfig,
    pub models: Vec<SequenceModel>,
}

impl Checkpoint {
    pub fn new(train_config: TrainConfig, models: Vec<SequenceModel>) -> Result<Self> {
        let c = Self { format: FORMAT.into(), version: VERSION, train_config, models };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unrecognised format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let first = self.models.first().ok_or_else(|| Error::Checkpoint("no models".into()))?;
        for m in &self.models {
            m.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
            if m.vocab() != first.vocab() {
                return Err(Error::Checkpoint("models disagree on the vocabulary".into()));
            }
        }
        Ok(())
    }

    pub fn ensemble(&self) -> Result<Ensemble> {
        Ensemble::new(self.models.clone())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        self.validate()?;
        let mut out = BufWriter::new(out);
        serde_json::to_writer(&mut out, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_reader(BufReader::new(input)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}
