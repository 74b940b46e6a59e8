//! Checkpoint format.
//!
//! Each component file holds an 8-byte little-endian header length, a JSON
//! header listing (name, shape) in serialization order, then the raw
//! little-endian f64 parameter values in that same order. A checkpoint
//! directory holds one file per component plus `manifest.json` mapping
//! component names to files and carrying the config hash and the full
//! canonical config text.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::param::{ParamId, ParamStore};

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub components: BTreeMap<String, String>,
    pub config_hash: String,
    pub config_text: String,
    pub step: usize,
}

pub fn save_component(
    store: &ParamStore,
    ids: &[ParamId],
    path: &Path,
) -> Result<(), Error> {
    let header: Vec<HeaderEntry> = ids
        .iter()
        .map(|&id| {
            let p = store.get(id);
            HeaderEntry { name: p.name.clone(), shape: p.value.shape.clone() }
        })
        .collect();
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Runtime(format!("checkpoint header encode: {e}")))?;
    let mut file = fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for &id in ids {
        for v in &store.value(id).data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads values into already-registered parameters; names and shapes must
/// match the file header exactly.
pub fn load_component(
    store: &mut ParamStore,
    ids: &[ParamId],
    path: &Path,
) -> Result<(), Error> {
    let mut file = fs::File::open(path)
        .map_err(|e| Error::Runtime(format!("cannot open checkpoint '{}': {e}", path.display())))?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Vec<HeaderEntry> = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Runtime(format!("checkpoint header decode: {e}")))?;
    if header.len() != ids.len() {
        return Err(Error::Runtime(format!(
            "checkpoint '{}' holds {} parameters, expected {}",
            path.display(),
            header.len(),
            ids.len()
        )));
    }
    for (entry, &id) in header.iter().zip(ids) {
        let p = store.get(id);
        if entry.name != p.name || entry.shape != p.value.shape {
            return Err(Error::Runtime(format!(
                "checkpoint mismatch: file has '{}' {:?}, model expects '{}' {:?}",
                entry.name, entry.shape, p.name, p.value.shape
            )));
        }
    }
    for &id in ids {
        let n = store.value(id).numel();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf)?;
        let data = &mut store.value_mut(id).data;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(())
}

/// Component name -> parameter-name prefix. Serialization order within a
/// component is store creation order.
pub fn component_map() -> Vec<(&'static str, &'static str)> {
    vec![
        ("query_encoder", "enc_q."),
        ("key_encoder", "enc_k."),
        ("decoder", "dec."),
        ("action_embedder", "act."),
        ("similarity", "sim."),
    ]
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    config_hash: &str,
    config_text: &str,
    step: usize,
) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut components = BTreeMap::new();
    for (component, prefix) in component_map() {
        let ids = store.ids_with_prefix(prefix);
        if ids.is_empty() {
            continue;
        }
        let filename = format!("{component}.bin");
        save_component(store, &ids, &dir.join(&filename))?;
        components.insert(component.to_string(), filename);
    }
    let manifest = Manifest {
        components,
        config_hash: config_hash.to_string(),
        config_text: config_text.to_string(),
        step,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Runtime(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, Error> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Runtime(format!("cannot read '{}': {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Runtime(format!("manifest decode: {e}")))
}

/// Loads every component listed in the manifest into the store.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<Manifest, Error> {
    let manifest = read_manifest(dir)?;
    for (component, prefix) in component_map() {
        if let Some(filename) = manifest.components.get(component) {
            let ids = store.ids_with_prefix(prefix);
            load_component(store, &ids, &dir.join(filename))?;
        }
    }
    Ok(manifest)
}

pub fn checkpoint_path(out_dir: &Path, label: &str) -> PathBuf {
    out_dir.join(format!("checkpoint_{label}"))
}
