//! `MR2C` checkpoints: architecture, parameters, margins, and class statistics.
//!
//! ```text
//! "MR2C" | version u32
//! input_dim u32 | hidden_dim u32 | feature_dim u32 | num_classes u32 | encoder u8 | head u8 | activation u8
//! num_params u64 | params [f64]
//! gamma [f64; K]
//! class-statistics section ("MR2S" ...)
//! ```

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::feature_stats::ClassStats;
use crate::margin_schedule::MarginVector;
use crate::model::{Activation, Architecture, EncoderKind, HeadKind, ModelParams};

const MAGIC: &[u8; 4] = b"MR2C";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub gamma: MarginVector,
    pub stats: ClassStats,
}

impl Checkpoint {
    pub fn new(model: ModelParams, gamma: MarginVector, stats: ClassStats) -> Result<Self> {
        let a = model.arch();
        if gamma.len() != a.num_classes || stats.num_classes() != a.num_classes || stats.feature_dim() != a.feature_dim {
            return Err(Error::Input("checkpoint parts disagree on K or feature_dim".into()));
        }
        Ok(Self { model, gamma, stats })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = self.model.arch();
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for v in [a.input_dim, a.hidden_dim, a.feature_dim, a.num_classes] {
            w.u32(v as u32);
        }
        w.u8(a.encoder.code());
        w.u8(a.head.code());
        w.u8(a.activation.code());
        w.u64(self.model.num_params() as u64);
        w.f64s(self.model.as_flat());
        w.f64s(self.gamma.gamma());
        self.stats.write_section(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let input_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let arch = Architecture {
            input_dim,
            hidden_dim,
            feature_dim,
            num_classes,
            encoder: EncoderKind::from_code(r.u8()?)?,
            head: HeadKind::from_code(r.u8()?)?,
            activation: Activation::from_code(r.u8()?)?,
        };
        arch.validate().map_err(|e| Error::Format(format!("architecture: {e}")))?;
        let n = r.u64()? as usize;
        if n != arch.num_params() {
            return Err(Error::Format(format!("architecture needs {} parameters, file declares {n}", arch.num_params())));
        }
        let model = ModelParams::from_flat(arch, r.f64s(n)?).map_err(|e| Error::Format(e.to_string()))?;
        let gamma = MarginVector::from_values(r.f64s(num_classes)?).map_err(|e| Error::Format(format!("margins: {e}")))?;
        let stats = ClassStats::read_section(&mut r)?;
        r.finish()?;
        Self::new(model, gamma, stats).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
