//! Checkpoints as tar archives: `metadata.json` plus `params.bin`, a flat
//! little-endian dump of every parameter tensor.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::heads::TaskKind;
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamKey, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RSTPARM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Seed the model was constructed with.
    pub seed: u64,
    /// Last completed stage (`pretrain`, `stage1`, ...).
    pub stage: String,
    /// Steps completed within `stage`.
    pub step: u64,
    pub tasks: Vec<(String, TaskKind)>,
    pub group_digests: BTreeMap<String, String>,
}

pub struct Checkpoint {
    pub meta: Metadata,
    pub store: ParamStore,
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let all: Vec<(&str, &String, &Tensor)> =
        store.groups().flat_map(|(g, grp)| grp.params().iter().map(move |(n, t)| (g, n, t))).collect();
    out.extend((all.len() as u64).to_le_bytes());
    for (g, n, t) in all {
        for s in [g, n.as_str()] {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        }
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn decode_params(buf: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let count = c.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let (g, n) = (c.string()?, c.string()?);
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        store.insert(&ParamKey { group: g, name: n }, Tensor::new(&shape, data));
    }
    if c.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - c.pos));
    }
    Ok(store)
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, stage: &str, step: u64) -> Self {
        Checkpoint {
            meta: Metadata {
                format_version: FORMAT_VERSION,
                config: model.config.clone(),
                seed,
                stage: stage.to_string(),
                step,
                tasks: model.tasks().to_vec(),
                group_digests: model.store.digests(),
            },
            store: model.store.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec_pretty(&self.meta).expect("metadata serializes");
        let params = encode_params(&self.store);
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut tar = tar::Builder::new(file);
        for (name, bytes) in [("metadata.json", &meta), ("params.bin", &params)] {
            let mut h = tar::Header::new_gnu();
            h.set_size(bytes.len() as u64);
            h.set_mode(0o644);
            h.set_mtime(0);
            h.set_cksum();
            tar.append_data(&mut h, name, bytes.as_slice()).map_err(|e| Error::io(path, e))?;
        }
        tar.into_inner().and_then(|mut f| f.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tar = tar::Archive::new(file);
        let (mut meta, mut params) = (None, None);
        for entry in tar.entries().map_err(|e| Error::io(path, e))? {
            let mut entry = entry.map_err(|e| Error::io(path, e))?;
            let name = entry.path().map_err(|e| Error::io(path, e))?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
            match name.as_str() {
                "metadata.json" => meta = Some(buf),
                "params.bin" => params = Some(buf),
                _ => {}
            }
        }
        let (Some(meta), Some(params)) = (meta, params) else {
            return Err(Error::format(path, "checkpoint needs metadata.json and params.bin"));
        };
        let meta: Metadata = serde_json::from_slice(&meta).map_err(|e| Error::format(path, e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported format version {}", meta.format_version)));
        }
        let store = decode_params(&params).map_err(|e| Error::format(path, e))?;
        if store.digests() != meta.group_digests {
            return Err(Error::format(path, "parameter digests do not match metadata"));
        }
        Ok(Checkpoint { meta, store })
    }

    /// Rebuilds the model: constructs it from the stored config and seed,
    /// re-registers tasks in order, then overwrites every group.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.meta.config.clone(), self.meta.seed)?;
        for (t, k) in &self.meta.tasks {
            model.add_task(t, *k)?;
        }
        let mine = model.store.group_names();
        if mine != self.store.group_names() {
            bail!(State, "checkpoint groups {:?} do not match the model's {:?}", self.store.group_names(), mine);
        }
        model.load_groups(&self.store, &mine)?;
        Ok(model)
    }

    /// SHA-256 over the metadata and parameter bytes; stable across runs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.meta).expect("metadata serializes"));
        h.update(encode_params(&self.store));
        hex::encode(h.finalize())
    }
}
