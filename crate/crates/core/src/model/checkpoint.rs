use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, EmaTeacher, ParamSet, ParamSlice};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`; JSON numbers cannot carry it losslessly.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Serde(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Serialized model state. Written as JSON with shortest round-trip floats,
/// so save-then-load reproduces every parameter bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub config: ClassifierConfig,
    pub layout: Vec<ParamSlice>,
    pub params: Vec<f64>,
    pub teacher: Option<Vec<f64>>,
    pub mu: Option<f64>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(
        epoch: usize,
        student: &ParamSet,
        teacher: Option<&EmaTeacher>,
        rng: Option<&ChaCha8Rng>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            epoch,
            config: student.config().clone(),
            layout: student.layout().to_vec(),
            params: student.values().to_vec(),
            teacher: teacher.map(|t| t.params().values().to_vec()),
            mu: teacher.map(|t| t.mu()),
            rng: rng.map(RngState::capture),
        }
    }

    pub fn student(&self) -> Result<ParamSet> {
        let p = ParamSet::from_values(self.config.clone(), self.params.clone())?;
        if p.layout() != self.layout.as_slice() {
            return Err(Error::Layout("checkpoint layout does not match its config".into()));
        }
        Ok(p)
    }

    pub fn teacher(&self) -> Result<Option<EmaTeacher>> {
        match (&self.teacher, self.mu) {
            (Some(values), Some(mu)) => {
                let p = ParamSet::from_values(self.config.clone(), values.clone())?;
                Ok(Some(EmaTeacher::new(p, mu)?))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Serde("teacher parameters and EMA factor must appear together".into())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
