//! `GNN1` weight files.
//!
//! Layout, all little-endian: the 4 magic bytes `GNN1`, a `u32` array count,
//! then per array a `u32` rank, `rank` `u32` dimensions and the `f64` values.
//! Arrays follow layer order: parameters, then batch-norm running statistics.
//! A JSON manifest next to the weights (same stem, `.json`) holds the network
//! spec, the array list and caller-defined extras.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec, NnError};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GNN1";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub layer: usize,
    pub kind: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub weights_file: String,
    pub network: NetworkSpec,
    pub arrays: Vec<ArrayInfo>,
    #[serde(default)]
    pub extras: serde_json::Value,
}

fn array_infos(net: &Network) -> Vec<ArrayInfo> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let info = |name: &str, shape: Vec<usize>| ArrayInfo {
            layer: i,
            kind: layer.kind().into(),
            name: name.into(),
            shape,
        };
        out.extend(layer.params().into_iter().map(|p| info(p.name, p.shape.clone())));
        out.extend(layer.buffers().into_iter().map(|(n, b)| info(n, vec![b.len()])));
    }
    out
}

/// Serializes every parameter and buffer of `net`.
pub fn write_weights(net: &Network) -> Vec<u8> {
    let infos = array_infos(net);
    let state = net.state();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (info, values) in infos.iter().zip(&state) {
        out.extend_from_slice(&(info.shape.len() as u32).to_le_bytes());
        for &d in &info.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NnError::CorruptModel(format!("truncated at byte {} of {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Rebuilds a network of architecture `spec` from `GNN1` bytes.
pub fn read_weights(bytes: &[u8], spec: &NetworkSpec) -> Result<Network, NnError> {
    let mut net = Network::new(spec, 0)?;
    let infos = array_infos(&net);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(NnError::CorruptModel("missing GNN1 magic bytes".into()));
    }
    let count = r.u32()?;
    if count != infos.len() {
        return Err(NnError::CorruptModel(format!(
            "file holds {count} arrays, the network needs {}",
            infos.len()
        )));
    }
    let mut state = Vec::with_capacity(count);
    for info in &infos {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if shape != info.shape {
            return Err(NnError::CorruptModel(format!(
                "layer {} {} has shape {shape:?}, expected {:?}",
                info.layer, info.name, info.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| NnError::CorruptModel("array too large".into()))?)?;
        state.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    if r.pos != bytes.len() {
        return Err(NnError::CorruptModel(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    net.set_state(&state)?;
    Ok(net)
}

/// `model.gnn` -> `model.json`.
pub fn manifest_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NnError + '_ {
    move |source| NnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the weights to `path` and the manifest next to it.
pub fn save_model(net: &Network, path: &Path, extras: serde_json::Value) -> Result<ModelManifest, NnError> {
    let manifest = ModelManifest {
        format: "GNN1".into(),
        version: MANIFEST_VERSION,
        weights_file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        network: net.spec().clone(),
        arrays: array_infos(net),
        extras,
    };
    fs::write(path, write_weights(net)).map_err(io_err(path))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// Reads a model written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(Network, ModelManifest), NnError> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: ModelManifest =
        serde_json::from_str(&text).map_err(|e| NnError::CorruptModel(format!("{}: {e}", mpath.display())))?;
    if manifest.format != "GNN1" || manifest.version != MANIFEST_VERSION {
        return Err(NnError::CorruptModel(format!(
            "unsupported model format {} version {}",
            manifest.format, manifest.version
        )));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let net = read_weights(&bytes, &manifest.network)?;
    Ok((net, manifest))
}
