//! Versioned model checkpoints.
//!
//! Layout (little-endian): magic, `u32` version, network config as
//! `key=value` text, training state, optional prompt table, named parameter
//! tensors, named norm statistics.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{put_f64, put_string, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};
use crate::net::{DynamicNet, NetworkConfig};
use crate::ops::NormStats;
use crate::params::ParamStore;
use crate::prompt::PromptBank;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DYNGCKPT";
pub const VERSION: u32 = 1;

/// Where training stood when the checkpoint was taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    /// 0-based epoch that produced these weights.
    pub epoch: usize,
    pub p: f64,
    pub val_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub state: TrainState,
    pub prompts: PromptBank,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(net: &DynamicNet, state: TrainState, prompts: &PromptBank) -> Self {
        Self {
            config: net.config().clone(),
            state,
            prompts: prompts.clone(),
            params: net.params().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let text: String = self
            .config
            .to_entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_string(&mut out, &text);
        put_u64(&mut out, self.state.epoch as u64);
        put_f64(&mut out, self.state.p);
        put_f64(&mut out, self.state.val_accuracy);
        put_u64(&mut out, self.state.seed);

        let pb = &self.prompts;
        put_u32(&mut out, pb.dim as u32);
        put_u32(&mut out, pb.tokens as u32);
        put_u64(&mut out, pb.seed);
        out.push(pb.strict as u8);
        match &pb.table {
            None => put_u32(&mut out, u32::MAX),
            Some(t) => {
                put_u32(&mut out, t.len() as u32);
                for (name, e) in t {
                    put_string(&mut out, name);
                    e.write_to(&mut out);
                }
            }
        }

        let p = &self.params;
        put_u32(&mut out, p.len() as u32);
        for (name, t) in p.names().iter().zip(p.values()) {
            put_string(&mut out, name);
            t.write_to(&mut out);
        }
        put_u32(&mut out, p.norms().len() as u32);
        for (name, s) in p.norm_names().iter().zip(p.norms()) {
            put_string(&mut out, name);
            put_u32(&mut out, s.mean.len() as u32);
            for &v in s.mean.iter().chain(&s.var) {
                put_f64(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(0, "not a checkpoint file (bad magic)"));
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                at,
                format!("checkpoint version {version} unsupported (expected {VERSION})"),
            ));
        }
        let at = r.offset();
        let text = r.string("config header")?;
        let mut config = NetworkConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("bad config line '{line}'")))?;
            config
                .set(k.trim(), v)
                .map_err(|e| Error::format(at, format!("config header: {e}")))?;
        }
        config
            .validate()
            .map_err(|e| Error::format(at, format!("config header: {e}")))?;
        let state = TrainState {
            epoch: r.u64("epoch")? as usize,
            p: r.f64("annealing factor")?,
            val_accuracy: r.f64("validation accuracy")?,
            seed: r.u64("seed")?,
        };

        let dim = r.u32("prompt dim")? as usize;
        let tokens = r.u32("prompt tokens")? as usize;
        let seed = r.u64("prompt seed")?;
        let strict = r.u8("prompt strict flag")? != 0;
        let count = r.u32("prompt table size")?;
        let table = if count == u32::MAX {
            None
        } else {
            let mut t = BTreeMap::new();
            for _ in 0..count {
                let name = r.string("prompt name")?;
                t.insert(name, Tensor::read_from(&mut r)?);
            }
            Some(t)
        };
        let prompts = PromptBank {
            dim,
            tokens,
            seed,
            table,
            strict,
        };

        let n = r.u32("parameter count")? as usize;
        let mut entries = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string("parameter name")?;
            entries.push((name, Tensor::read_from(&mut r)?));
        }
        let n = r.u32("norm count")? as usize;
        let mut norms = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string("norm name")?;
            let c = r.u32("norm width")? as usize;
            let mean = r.f64_vec(c, "running mean")?;
            let var = r.f64_vec(c, "running variance")?;
            norms.push((name, NormStats { mean, var }));
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes after checkpoint"));
        }
        Ok(Self {
            config,
            state,
            prompts,
            params: ParamStore::from_parts(entries, norms),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the network; the parameter table must match the config's layout.
    pub fn network(&self) -> Result<DynamicNet> {
        DynamicNet::from_parts(self.config.clone(), &self.params)
            .map_err(|e| Error::format(0, format!("checkpoint parameters: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Variant;

    fn small() -> NetworkConfig {
        NetworkConfig {
            widths: vec![4, 8],
            input: [3, 8, 8],
            text_dim: 8,
            text_tokens: 2,
            variant: Variant::SlotAttention,
            ..Default::default()
        }
    }

    fn sample() -> Checkpoint {
        let net = DynamicNet::new(small(), 3, 0.7).unwrap();
        let state = TrainState {
            epoch: 4,
            p: 0.8,
            val_accuracy: 0.5,
            seed: 3,
        };
        Checkpoint::new(&net, state, &PromptBank::hashed(8, 2, 11))
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let d = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(d.config, c.config);
        assert_eq!(d.state, c.state);
        assert_eq!(d.params, c.params);
        assert_eq!(d.prompts.seed, 11);
        let net = d.network().unwrap();
        assert_eq!(net.params(), &c.params);
    }

    #[test]
    fn version_mismatch_is_named() {
        let mut b = sample().to_bytes();
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(e.contains("version 7") && e.contains("expected 1"), "{e}");
    }

    #[test]
    fn corruption_is_a_format_error() {
        let b = sample().to_bytes();
        for cut in [0, 5, 20, b.len() / 2, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Format { .. })));
        }
        let mut junk = b.clone();
        junk[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&junk), Err(Error::Format { offset: 0, .. })));
    }
}
