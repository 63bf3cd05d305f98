//! Binary checkpoint: magic, format version, the model spec as a canonical
//! `key=value` block, the vocabulary fingerprint and texts, the run
//! configuration echo, training metadata, then named little-endian f64
//! tensors.

use std::path::Path;

use crate::codec::{parse_kv, Reader, Writer};
use crate::ehr::{DrugComboVocab, IcdVocab, MeasurementVocab, Vocabularies};
use crate::error::{Error, Result};
use crate::numerics::HasParams;

use super::{Model, ModelSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEDPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance recorded by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// 1-based epoch whose weights were kept; 0 for an untrained model.
    pub best_epoch: usize,
}

impl TrainMeta {
    fn to_kv(self) -> String {
        format!(
            "seed={}\nepochs_run={}\nbest_epoch={}\n",
            self.seed, self.epochs_run, self.best_epoch
        )
    }

    fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| -> Result<u64> {
            kv.iter()
                .find(|(key, _)| key == k)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("training metadata lacks {k}")))
        };
        Ok(Self {
            seed: get("seed")?,
            epochs_run: get("epochs_run")? as usize,
            best_epoch: get("best_epoch")? as usize,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocabs: Vocabularies,
    /// Effective run configuration, echoed verbatim.
    pub run_config: String,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.vocabs.fingerprint()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.model.spec.to_kv())?;
        w.str(&self.vocabs.fingerprint())?;
        w.len_u32(self.vocabs.icd.capacity())?;
        w.str(&self.vocabs.icd.to_text())?;
        w.str(&self.vocabs.meas.to_text())?;
        w.str(&self.vocabs.combos.to_text())?;
        w.str(&self.run_config)?;
        w.str(&self.meta.to_kv())?;
        let tensors = self.model.params();
        w.len_u32(tensors.len())?;
        for p in tensors {
            w.str(&p.name)?;
            let (r, c) = p.value.shape();
            w.len_u32(r)?;
            w.len_u32(c)?;
            for &v in p.value.data() {
                w.f64(v);
            }
        }
        Ok(w.finish())
    }

    /// Parses a checkpoint and checks its internal consistency.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let spec = ModelSpec::from_kv(&r.str()?)?;
        let stored_fp = r.str()?;
        let capacity = r.len_u32()?;
        let vocabs = Vocabularies {
            icd: IcdVocab::from_text(capacity, &r.str()?)?,
            meas: MeasurementVocab::from_text(&r.str()?)?,
            combos: DrugComboVocab::from_text(&r.str()?)?,
        };
        let found = vocabs.fingerprint();
        if found != stored_fp {
            return Err(Error::Fingerprint {
                expected: stored_fp,
                found,
            });
        }
        spec.check_vocabs(&vocabs)?;
        let run_config = r.str()?;
        let meta = TrainMeta::from_kv(&r.str()?)?;
        let mut model = Model::zeros(spec)?;
        let count = r.len_u32()?;
        let mut params = model.params_mut();
        if count != params.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, model has {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let name = r.str()?;
            let rows = r.len_u32()?;
            let cols = r.len_u32()?;
            if name != p.name || (rows, cols) != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {rows}x{cols} does not match {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            for v in p.value.data_mut() {
                *v = r.f64()?;
            }
        }
        drop(params);
        r.expect_end()?;
        Ok(Self {
            model,
            vocabs,
            run_config,
            meta,
        })
    }

    /// Like [`Checkpoint::from_bytes`] but refuses vocabularies other than
    /// the expected ones.
    pub fn from_bytes_expecting(bytes: &[u8], expected_fingerprint: &str) -> Result<Self> {
        let ckpt = Self::from_bytes(bytes)?;
        let found = ckpt.fingerprint();
        if found != expected_fingerprint {
            return Err(Error::Fingerprint {
                expected: expected_fingerprint.to_string(),
                found,
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
