//! Versioned checkpoint container: magic, version, JSON header, raw little-endian
//! `f64` payload and a trailing CRC-32 over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::derive_seed;
use super::trainer::{TrainConfig, TrainState, STREAM_INIT_D, STREAM_INIT_G};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::nn::VarMap;
use crate::processor::ProcessorConfig;

const MAGIC: &[u8; 4] = b"VSCK";
pub const VERSION: u32 = 1;

type Entries = Vec<(String, Vec<usize>, Vec<f64>)>;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    seed: u64,
    step: u64,
    g_adam_t: u64,
    d_adam_t: u64,
    entries: Vec<Entry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub g_adam_t: u64,
    pub d_adam_t: u64,
    pub generator: Entries,
    pub discriminator: Entries,
    pub ema: Entries,
    pub g_adam_m: Entries,
    pub g_adam_v: Entries,
    pub d_adam_m: Entries,
    pub d_adam_v: Entries,
}

fn adam_entries(vm: &VarMap, state: &[Vec<f64>]) -> Entries {
    vm.params().iter().zip(state).map(|(p, s)| (p.name().to_string(), p.shape(), s.clone())).collect()
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            config,
            seed: state.seed,
            step: state.step,
            g_adam_t: state.g_opt.t,
            d_adam_t: state.d_opt.t,
            generator: state.gvars.snapshot(),
            discriminator: state.dvars.snapshot(),
            ema: state.ema.shadow.snapshot(),
            g_adam_m: adam_entries(&state.gvars, &state.g_opt.m),
            g_adam_v: adam_entries(&state.gvars, &state.g_opt.v),
            d_adam_m: adam_entries(&state.dvars, &state.d_opt.m),
            d_adam_v: adam_entries(&state.dvars, &state.d_opt.v),
        }
    }

    fn groups(&self) -> [(&'static str, &Entries); 7] {
        [
            ("generator", &self.generator),
            ("discriminator", &self.discriminator),
            ("ema", &self.ema),
            ("g_adam_m", &self.g_adam_m),
            ("g_adam_v", &self.g_adam_v),
            ("d_adam_m", &self.d_adam_m),
            ("d_adam_v", &self.d_adam_v),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (group, list) in self.groups() {
            for (name, shape, data) in list {
                entries.push(Entry { group: group.into(), name: name.clone(), shape: shape.clone() });
                for v in data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            g_adam_t: self.g_adam_t,
            d_adam_t: self.d_adam_t,
            entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic or truncated)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(bad("checksum mismatch (corrupt or truncated file)".into()));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        let mut payload = &body[16 + hlen..];
        let mut ck = Checkpoint {
            config: header.config,
            seed: header.seed,
            step: header.step,
            g_adam_t: header.g_adam_t,
            d_adam_t: header.d_adam_t,
            generator: vec![],
            discriminator: vec![],
            ema: vec![],
            g_adam_m: vec![],
            g_adam_v: vec![],
            d_adam_m: vec![],
            d_adam_v: vec![],
        };
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(bad(format!("payload truncated at {}", e.name)));
            }
            let data = payload[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            payload = &payload[n * 8..];
            let list = match e.group.as_str() {
                "generator" => &mut ck.generator,
                "discriminator" => &mut ck.discriminator,
                "ema" => &mut ck.ema,
                "g_adam_m" => &mut ck.g_adam_m,
                "g_adam_v" => &mut ck.g_adam_v,
                "d_adam_m" => &mut ck.d_adam_m,
                "d_adam_v" => &mut ck.d_adam_v,
                other => return Err(bad(format!("unknown group {other}"))),
            };
            list.push((e.name, e.shape, data));
        }
        if !payload.is_empty() {
            return Err(bad("trailing payload bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the full train state; every model parameter must be present.
    pub fn restore(
        &self,
        gcfg: &GeneratorConfig,
        pcfg: &ProcessorConfig,
        dcfg: &DiscriminatorConfig,
        tcfg: &TrainConfig,
    ) -> Result<TrainState> {
        // compare against a freshly built model first so a foreign architecture is an
        // error rather than a shape clash inside the layer constructors
        let fresh = TrainState::new(self.seed, gcfg, pcfg, dcfg, tcfg)?;
        let layout = |e: &Entries| e.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect::<Vec<_>>();
        if layout(&fresh.gvars.snapshot()) != layout(&self.generator) || layout(&fresh.dvars.snapshot()) != layout(&self.discriminator) {
            return Err(Error::Checkpoint("checkpoint does not match the configured architecture".into()));
        }
        let gvars = VarMap::new(derive_seed(self.seed, STREAM_INIT_G, 0));
        gvars.load(&self.generator)?;
        let dvars = VarMap::new(derive_seed(self.seed, STREAM_INIT_D, 0));
        dvars.load(&self.discriminator)?;
        let (gn, dn) = (gvars.params().len(), dvars.params().len());
        let mut state = TrainState::from_vars(self.seed, self.step, gvars, dvars, gcfg, pcfg, dcfg, tcfg)?;
        if state.gvars.params().len() != gn || state.dvars.params().len() != dn {
            return Err(Error::Checkpoint("checkpoint does not match the configured architecture".into()));
        }
        state.ema.shadow.load(&self.ema)?;
        let fill = |vm: &VarMap, entries: &Entries| -> Result<Vec<Vec<f64>>> {
            if entries.len() != vm.params().len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            vm.params()
                .iter()
                .zip(entries)
                .map(|(p, (name, shape, data))| {
                    if p.name() != name || p.shape() != *shape {
                        Err(Error::Checkpoint(format!("optimizer entry {name} does not match {}", p.name())))
                    } else {
                        Ok(data.clone())
                    }
                })
                .collect()
        };
        state.g_opt.m = fill(&state.gvars, &self.g_adam_m)?;
        state.g_opt.v = fill(&state.gvars, &self.g_adam_v)?;
        state.d_opt.m = fill(&state.dvars, &self.d_adam_m)?;
        state.d_opt.v = fill(&state.dvars, &self.d_adam_v)?;
        state.g_opt.t = self.g_adam_t;
        state.d_opt.t = self.d_adam_t;
        Ok(state)
    }

    /// Loads only the EMA weights into a fresh map.
    pub fn ema_vars(&self) -> Result<VarMap> {
        let vm = VarMap::new(0);
        vm.load(&self.ema)?;
        Ok(vm)
    }
}
