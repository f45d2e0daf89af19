//! Checkpoint archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMBCKPT\0"                     8 bytes
//! format version                  u32
//! manifest length, manifest JSON  u32, bytes
//! entry count                     u32
//! per entry: name length, name,   u16, bytes
//!            payload length, .ten u64, bytes
//! SHA-256 of everything above     32 bytes
//! ```
//!
//! Entry names are `param/<name>`, `bn_mean/<prefix>`, `bn_var/<prefix>` and,
//! when optimizer state is saved, `opt_m/<name>`, `opt_v/<name>`,
//! `opt_slow/<name>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::RunningStats;
use crate::error::{CheckpointError, Error, Result};
use crate::net::{audit_store, Architecture, NetConfig, Network};
use crate::optim::{OptimConfig, OptimState};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{decode_ten, encode_ten, AnyTensor, Tensor};

pub const MAGIC: &[u8; 8] = b"MMBCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEntry {
    pub prefix: String,
    pub channels: usize,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimEntry {
    pub config: OptimConfig,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: NetConfig,
    pub seed: u64,
    /// Completed training steps.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub norms: Vec<NormEntry>,
    pub optimizer: Option<OptimEntry>,
    /// Free-form run metadata (e.g. the training configuration).
    #[serde(default)]
    pub run: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub optim: Option<OptimState<f32>>,
    pub step: u64,
    pub run: Option<serde_json::Value>,
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    let bytes = encode_ten(t);
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&bytes);
}

fn vec_tensor(v: &[f32]) -> Tensor<f32> {
    Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty")
}

/// Serializes to bytes; see the module docs for the layout.
pub fn encode_checkpoint(
    net: &Network<f32>,
    optim: Option<&OptimState<f32>>,
    step: u64,
    run: Option<serde_json::Value>,
) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: net.config().clone(),
        seed: net.seed,
        step,
        tensors: net
            .store
            .iter()
            .map(|(n, p)| TensorEntry {
                name: n.to_string(),
                kind: p.kind,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        norms: net
            .store
            .bn_iter()
            .map(|(p, s)| NormEntry {
                prefix: p.to_string(),
                channels: s.mean.len(),
                updates: s.updates,
            })
            .collect(),
        optimizer: optim.map(|o| OptimEntry {
            config: o.config.clone(),
            t: o.t,
        }),
        run,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut body = Vec::new();
    let mut count = 0u32;
    for (n, p) in net.store.iter() {
        put_entry(&mut body, &format!("param/{n}"), &p.value);
        count += 1;
    }
    for (prefix, s) in net.store.bn_iter() {
        put_entry(&mut body, &format!("bn_mean/{prefix}"), &vec_tensor(&s.mean));
        put_entry(&mut body, &format!("bn_var/{prefix}"), &vec_tensor(&s.var));
        count += 2;
    }
    if let Some(o) = optim {
        for (tag, map) in [("opt_m", &o.m), ("opt_v", &o.v), ("opt_slow", &o.slow)] {
            for (n, t) in map {
                put_entry(&mut body, &format!("{tag}/{n}"), t);
                count += 1;
            }
        }
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(
    path: &Path,
    net: &Network<f32>,
    optim: Option<&OptimState<f32>>,
    step: u64,
    run: Option<serde_json::Value>,
) -> Result<()> {
    let bytes = encode_checkpoint(net, optim, step, run)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::path(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::path(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!("reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates an archive. Checks run in order: magic, version,
/// length, checksum, manifest, tensors against the manifest's config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    if bytes.len() < r.pos + 32 {
        return Err(CheckpointError::Truncated("missing checksum".into()).into());
    }
    let (content, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(content).as_slice() != digest {
        return Err(CheckpointError::Checksum.into());
    }
    let mut r = Reader { buf: content, pos: r.pos };
    let mlen = r.u32("manifest length")? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen, "manifest")?)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let count = r.u32("entry count")?;
    let mut entries: HashMap<String, Tensor<f32>> = HashMap::new();
    for _ in 0..count {
        let nlen = r.u16("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "entry name")?)
            .map_err(|_| CheckpointError::Manifest("entry name is not UTF-8".into()))?
            .to_string();
        let plen = r.u64("entry length")? as usize;
        let t = match decode_ten(r.take(plen, &name)?)? {
            AnyTensor::F32(t) => t,
            other => {
                return Err(CheckpointError::Manifest(format!(
                    "entry `{name}` has dtype {}",
                    other.dtype_name()
                ))
                .into())
            }
        };
        entries.insert(name, t);
    }
    if r.pos != content.len() {
        return Err(CheckpointError::Manifest("trailing bytes after the last entry".into()).into());
    }

    let arch = Architecture::new(&manifest.config)?;
    let mut take = |name: String| -> Result<Tensor<f32>> {
        entries
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name).into())
    };
    let mut store = ParamStore::new();
    for (name, shape, kind) in arch.param_shapes() {
        let t = take(format!("param/{name}")).map_err(|_| CheckpointError::MissingTensor(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::TensorShape {
                name,
                expected: shape,
                found: t.shape().to_vec(),
            }
            .into());
        }
        store.insert(name, t, kind);
    }
    let updates: HashMap<&str, u64> = manifest.norms.iter().map(|n| (n.prefix.as_str(), n.updates)).collect();
    for (prefix, c) in arch.norm_shapes() {
        let mut stats = RunningStats::<f32>::new(c);
        for (tag, dst) in [("bn_mean", &mut stats.mean), ("bn_var", &mut stats.var)] {
            let name = format!("{tag}/{prefix}");
            let t = take(name.clone())?;
            if t.shape() != [c] {
                return Err(CheckpointError::TensorShape {
                    name,
                    expected: vec![c],
                    found: t.shape().to_vec(),
                }
                .into());
            }
            *dst = t.into_data();
        }
        stats.updates = *updates
            .get(prefix.as_str())
            .ok_or_else(|| CheckpointError::Manifest(format!("no norm entry for `{prefix}`")))?;
        store.insert_bn_stats(prefix, stats);
    }
    audit_store(&arch, &store)?;
    let optim = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut maps: [IndexMap<String, Tensor<f32>>; 3] = Default::default();
            for (tag, map) in ["opt_m", "opt_v", "opt_slow"].iter().zip(maps.iter_mut()) {
                for (name, p) in store.iter() {
                    let full = format!("{tag}/{name}");
                    let t = take(full.clone())?;
                    if t.shape() != p.value.shape() {
                        return Err(CheckpointError::TensorShape {
                            name: full,
                            expected: p.value.shape().to_vec(),
                            found: t.shape().to_vec(),
                        }
                        .into());
                    }
                    map.insert(name.to_string(), t);
                }
            }
            let [m, v, slow] = maps;
            Some(OptimState {
                config: o.config.clone(),
                t: o.t,
                m,
                v,
                slow,
            })
        }
    };
    if let Some(extra) = entries.keys().next() {
        return Err(CheckpointError::Manifest(format!("unexpected entry `{extra}`")).into());
    }
    Ok(Checkpoint {
        net: Network {
            arch,
            seed: manifest.seed,
            store,
        },
        optim,
        step: manifest.step,
        run: manifest.run,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    decode_checkpoint(&bytes)
}
