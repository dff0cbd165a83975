//! Dataset export and import: one tensor file per image and mask plus a
//! JSON manifest listing sample id, domain, split and seed.

use std::fs;
use std::path::Path;

use gkd_core::synthdata::{Dataset, DomainId, SegSample, Split, SplitName};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Result};
use crate::hash::ConfigHash;
use crate::tensorfile;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub domain: String,
    pub split: String,
    pub seed: u64,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub samples: Vec<SampleEntry>,
}

const SPLITS: [SplitName; 3] = [SplitName::TrainA, SplitName::TestA, SplitName::TestB];

pub fn export(ds: &Dataset, dir: &Path, hash: &ConfigHash) -> Result<DatasetManifest> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
    let mut samples = Vec::new();
    for name in SPLITS {
        for (i, s) in ds.split(name).samples_untracked().iter().enumerate() {
            let id = format!("{}_{i:05}", name.as_str());
            let image = format!("tensors/{id}_image.bin");
            let mask = format!("tensors/{id}_mask.bin");
            tensorfile::write(&dir.join(&image), &s.image, hash)?;
            tensorfile::write(&dir.join(&mask), &s.mask, hash)?;
            samples.push(SampleEntry {
                id,
                domain: s.domain.to_string(),
                split: name.as_str().to_string(),
                seed: s.seed,
                image,
                mask,
            });
        }
    }
    let manifest = DatasetManifest {
        config_hash: hash.to_hex(),
        samples,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads a dataset back; every tensor must carry the manifest's hash.
pub fn import(dir: &Path) -> Result<(Dataset, ConfigHash)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    let hash = ConfigHash::from_hex(&m.config_hash).ok_or_else(|| format_err(&path, "bad config_hash"))?;
    let mut buckets: [Vec<SegSample>; 3] = Default::default();
    for e in &m.samples {
        let split: SplitName = e.split.parse().map_err(|_| format_err(&path, format!("unknown split `{}`", e.split)))?;
        let domain = match e.domain.as_str() {
            "A" => DomainId::A,
            "B" => DomainId::B,
            d => return Err(format_err(&path, format!("unknown domain `{d}`"))),
        };
        let read = |rel: &str| -> Result<_> {
            let p = dir.join(rel);
            let (t, h) = tensorfile::read(&p)?;
            if h != hash {
                return Err(format_err(&p, "config hash differs from the manifest"));
            }
            Ok(t)
        };
        let image = read(&e.image)?;
        let mask = read(&e.mask)?;
        if image.shape() != mask.shape() {
            return Err(format_err(&path, format!("sample {}: image and mask shapes differ", e.id)));
        }
        let slot = SPLITS.iter().position(|&s| s == split).expect("known split");
        buckets[slot].push(SegSample {
            image,
            mask,
            domain,
            seed: e.seed,
        });
    }
    let [train_a, test_a, test_b] = buckets;
    let ds = Dataset {
        train_a: Split::new(SplitName::TrainA, train_a),
        test_a: Split::new(SplitName::TestA, test_a),
        test_b: Split::new(SplitName::TestB, test_b),
    };
    Ok((ds, hash))
}
