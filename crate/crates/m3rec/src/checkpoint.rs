//! Trained networks on disk (compact JSON, exact float round-trip).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use m3rec_core::config::Ablations;
use m3rec_core::orchestrate::Networks;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const CHECKPOINT_FORMAT: &str = "m3rec-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub ablations: Ablations,
    pub networks: Networks,
}

impl Checkpoint {
    pub fn new(seed: u64, ablations: Ablations, networks: Networks) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            seed,
            ablations,
            networks,
        }
    }

    pub fn use_context(&self) -> bool {
        !self.ablations.no_context
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(io(path))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Io {
            path: path.into(),
            source: e.into(),
        })?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(io(path))?;
        let c: Self = serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if c.format != CHECKPOINT_FORMAT || c.version != 1 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("unsupported checkpoint {:?} version {}", c.format, c.version),
            });
        }
        Ok(c)
    }
}
