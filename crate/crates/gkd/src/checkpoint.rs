//! Per-phase checkpoint directories.
//!
//! `{out}/{P1..P4}/manifest.json` lists tensor names, shapes and the phase
//! tag together with the config and network hashes; tensors live under
//! `tensors/`, and `losses.csv` holds the per-step loss log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gkd_core::trainer::{Checkpoint, LossRow, Phase, Pipeline};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, GkdError, Result};
use crate::hash::ConfigHash;
use crate::tensorfile;

pub const MANIFEST: &str = "manifest.json";
pub const LOSSES: &str = "losses.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub phase: String,
    pub seed: u64,
    pub config_hash: String,
    pub net_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn phase_dir(out: &Path, phase: Phase) -> PathBuf {
    out.join(phase.tag())
}

pub fn exists(out: &Path, phase: Phase) -> bool {
    phase_dir(out, phase).join(MANIFEST).is_file()
}

pub fn save(out: &Path, ckpt: &Checkpoint, rows: &[LossRow], hash: &ConfigHash, net_hash: &ConfigHash) -> Result<PathBuf> {
    let dir = phase_dir(out, ckpt.phase);
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
    let mut tensors = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        let file = format!("tensors/{name}.bin");
        tensorfile::write(&dir.join(&file), t, hash)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let m = CheckpointManifest {
        phase: ckpt.phase.tag().to_string(),
        seed: ckpt.seed,
        config_hash: hash.to_hex(),
        net_hash: net_hash.to_hex(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&m).expect("manifest serializes")).map_err(io_err(&path))?;
    write_losses(&dir.join(LOSSES), rows, hash)?;
    Ok(dir)
}

pub fn write_losses(path: &Path, rows: &[LossRow], hash: &ConfigHash) -> Result<()> {
    let mut buf = format!("# config_hash {hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e: csv::Error| format_err(path, e.to_string());
        w.write_record(["phase", "epoch", "step", "ce", "intra", "inter", "dicd", "total"]).map_err(csv_err)?;
        for r in rows {
            w.write_record([
                r.phase.to_string(),
                r.epoch.to_string(),
                r.step.to_string(),
                r.ce.to_string(),
                r.intra.to_string(),
                r.inter.to_string(),
                r.dicd.to_string(),
                r.total.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// A checkpoint read from disk with the hashes it was written under.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub config_hash: ConfigHash,
    pub net_hash: ConfigHash,
}

pub fn load(out: &Path, phase: Phase) -> Result<Loaded> {
    let dir = phase_dir(out, phase);
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    if m.phase != phase.tag() {
        return Err(format_err(&path, format!("manifest is tagged {} but lives under {}", m.phase, phase.tag())));
    }
    let hex = |s: &str| ConfigHash::from_hex(s).ok_or_else(|| format_err(&path, format!("bad hash `{s}`")));
    let config_hash = hex(&m.config_hash)?;
    let net_hash = hex(&m.net_hash)?;
    let mut tensors = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        let tpath = dir.join(&e.file);
        let (t, h) = tensorfile::read(&tpath)?;
        if t.shape() != e.shape.as_slice() {
            return Err(format_err(
                &tpath,
                format!("tensor `{}` has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape),
            ));
        }
        if h != config_hash {
            return Err(format_err(&tpath, format!("tensor `{}` carries a different config hash", e.name)));
        }
        tensors.push((e.name.clone(), t));
    }
    Ok(Loaded {
        checkpoint: Checkpoint {
            phase,
            seed: m.seed,
            tensors,
        },
        config_hash,
        net_hash,
    })
}

/// Loads a checkpoint into `pipe`. Shapes are checked tensor by tensor first,
/// then the recorded network hash must match `net_hash`.
pub fn restore(pipe: &mut Pipeline, loaded: &Loaded, net_hash: &ConfigHash) -> Result<()> {
    let store = &pipe.models.store;
    for (name, t) in &loaded.checkpoint.tensors {
        let id = store
            .find(name)
            .ok_or_else(|| gkd_core::Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let want = store.get(id).value.shape();
        if want != t.shape() {
            return Err(gkd_core::Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, network expects {:?}",
                t.shape(),
                want
            ))
            .into());
        }
    }
    if loaded.net_hash != *net_hash {
        return Err(GkdError::Config(format!(
            "checkpoint {} was written for network {}, requested {}",
            loaded.checkpoint.phase.tag(),
            loaded.net_hash,
            net_hash
        )));
    }
    pipe.restore(&loaded.checkpoint)?;
    Ok(())
}
