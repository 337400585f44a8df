//! Binary model checkpoints.
//!
//! Layout: magic `PMMN1\n`, a `u64` length and UTF-8 `key=value` header,
//! the `N x N` normalized adjacency, every parameter (name, shape, value,
//! Adam moments), then batch-norm running statistics. All numbers are
//! little-endian; floats are stored bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelConfig};
use crate::numcore::Tensor;
use crate::patterns::PatternSet;
use crate::train::data::ZScore;
use crate::train::fit::TrainProgress;

const MAGIC: &[u8] = b"PMMN1\n";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ForecastModel,
    /// Hash of the pattern bank the model was trained against.
    pub bank_hash: [u8; 32],
    pub progress: TrainProgress,
}

impl Checkpoint {
    pub fn new(model: ForecastModel, patterns: &PatternSet, progress: TrainProgress) -> Self {
        Checkpoint {
            model,
            bank_hash: patterns.hash(),
            progress,
        }
    }

    pub fn bank_hash_hex(&self) -> String {
        hex::encode(self.bank_hash)
    }

    /// Errors with [`Error::BankMismatch`] unless `patterns` is the bank
    /// this checkpoint was trained with.
    pub fn check_bank(&self, patterns: &PatternSet) -> Result<()> {
        if patterns.hash() != self.bank_hash {
            return Err(Error::BankMismatch {
                checkpoint: self.bank_hash_hex(),
                bank: patterns.hash_hex(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.model;
        let p = &self.progress;
        let mut header: Vec<(String, String)> = m
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let bits = |v: f64| format!("{:016x}", v.to_bits());
        header.extend([
            ("nodes".into(), m.num_nodes.to_string()),
            ("zscore_mean".into(), bits(m.zscore.mean)),
            ("zscore_std".into(), bits(m.zscore.std)),
            ("bank_hash".into(), self.bank_hash_hex()),
            ("adam_step".into(), m.store.step_count().to_string()),
            ("epoch".into(), p.epoch.to_string()),
            ("best_val".into(), bits(p.best_val)),
            ("best_epoch".into(), p.best_epoch.to_string()),
            ("stale_epochs".into(), p.stale_epochs.to_string()),
        ]);
        let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_f64s(&mut out, m.a_norm.data());
        let params = m.store.params();
        put_u64(&mut out, params.len() as u64);
        for param in params {
            put_u64(&mut out, param.name.len() as u64);
            out.extend_from_slice(param.name.as_bytes());
            put_u64(&mut out, param.value.rows() as u64);
            put_u64(&mut out, param.value.cols() as u64);
            put_f64s(&mut out, param.value.data());
            put_f64s(&mut out, param.m.data());
            put_f64s(&mut out, param.v.data());
        }
        put_u64(&mut out, m.bn.len() as u64);
        for s in &m.bn {
            put_f64s(&mut out, &s.mean);
            put_f64s(&mut out, &s.var);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(path, "not a model checkpoint (bad magic)"));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "header is not UTF-8"))?;

        let mut config = ModelConfig::default();
        let mut extra = std::collections::HashMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad header line {line:?}")))?;
            if !config.set(k, v)? {
                extra.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| -> Result<&String> {
            extra.get(k).ok_or_else(|| Error::format(path, format!("header lacks {k}")))
        };
        let int = |k: &str| -> Result<u64> {
            field(k)?.parse().map_err(|_| Error::format(path, format!("bad {k}")))
        };
        let float = |k: &str| -> Result<f64> {
            u64::from_str_radix(field(k)?, 16)
                .map(f64::from_bits)
                .map_err(|_| Error::format(path, format!("bad {k}")))
        };
        let n = int("nodes")? as usize;
        let zscore = ZScore::new(float("zscore_mean")?, float("zscore_std")?)?;
        let hash_vec = hex::decode(field("bank_hash")?).map_err(|_| Error::format(path, "bad bank_hash"))?;
        let bank_hash: [u8; 32] = hash_vec
            .try_into()
            .map_err(|_| Error::format(path, "bank_hash must be 32 bytes"))?;
        let progress = TrainProgress {
            epoch: int("epoch")? as usize,
            best_val: float("best_val")?,
            best_epoch: int("best_epoch")? as usize,
            stale_epochs: int("stale_epochs")? as usize,
        };

        let a_norm = Tensor::new(vec![n, n], r.f64s(n * n)?)?;
        let mut model = ForecastModel::new(config, a_norm, zscore)?;
        let count = r.u64()? as usize;
        if count != model.store.len() {
            return Err(Error::format(
                path,
                format!("{count} parameters stored, configuration builds {}", model.store.len()),
            ));
        }
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
            let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
            let param = model.store.get_mut(id);
            if param.value.shape() != [rows, cols] {
                return Err(Error::format(
                    path,
                    format!("{name}: stored {rows}x{cols}, expected {:?}", param.value.shape()),
                ));
            }
            let len = rows * cols;
            param.value = Tensor::new(vec![rows, cols], r.f64s(len)?)?;
            param.m = Tensor::new(vec![rows, cols], r.f64s(len)?)?;
            param.v = Tensor::new(vec![rows, cols], r.f64s(len)?)?;
        }
        model.store.set_step_count(int("adam_step")?);
        let bn_count = r.u64()? as usize;
        if bn_count != model.bn.len() {
            return Err(Error::format(path, "batch-norm layer count mismatch"));
        }
        let d = model.config.d_h;
        for s in &mut model.bn {
            s.mean = r.f64s(d)?;
            s.var = r.f64s(d)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            model,
            bank_hash,
            progress,
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
