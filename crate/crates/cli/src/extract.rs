//! Feature extraction with a content-addressed on-disk cache.
//!
//! Each subject gets one cache entry holding its nine max-pooled maps.
//! The entry key hashes the extraction settings, the subject id and the
//! bytes of every input file, so a hit never needs to be revalidated and
//! a rerun only reads.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use vox2p1d::cv::{Branch, FeatureBank, SubjectInfo};
use vox2p1d::decomposition::View;
use vox2p1d::extraction::{branch_features, feature_file_name, import_feature_group, maxpool8, StubExtractor};
use vox2p1d::tensor::{tensor_read, tensor_write};
use vox2p1d::volume::{DatasetManifest, Metric, SubjectEntry};
use vox2p1d::{Error, Result, Tensor};

use crate::config::{hash_json, ExtractorSource, PipelineConfig};

pub const CACHE_ENV: &str = "VOX2P1D_CACHE";

/// `$VOX2P1D_CACHE` when set, otherwise `{out}/cache`.
pub fn cache_root(out: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => out.join("cache"),
    }
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub bank: FeatureBank,
    pub hits: usize,
    pub misses: usize,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn input_files(cfg: &PipelineConfig, manifest: &DatasetManifest, s: &SubjectEntry) -> Vec<PathBuf> {
    match &cfg.extractor {
        ExtractorSource::Stub { .. } => Metric::ALL.iter().map(|&m| manifest.resolve(s, m)).collect(),
        ExtractorSource::Import { .. } => {
            let dir = cfg.import_dir().expect("import source");
            let mut files = Vec::with_capacity(72);
            for m in Metric::ALL {
                for v in View::ALL {
                    files.extend((0..8).map(|k| dir.join(feature_file_name(&s.id, m, v, k))));
                }
            }
            files
        }
    }
}

fn entry_key(cfg: &PipelineConfig, manifest: &DatasetManifest, s: &SubjectEntry) -> Result<String> {
    let digests = input_files(cfg, manifest, s)
        .iter()
        .map(|p| if p.is_file() { file_digest(p) } else { Ok(String::from("missing")) })
        .collect::<Result<Vec<_>>>()?;
    Ok(hash_json(&("extract", cfg.extraction_hash(), &s.id, digests)))
}

fn entry_file(entry: &Path, b: Branch) -> PathBuf {
    entry.join(format!("{}_{}.v21t", b.metric, b.view))
}

fn compute_subject(cfg: &PipelineConfig, manifest: &DatasetManifest, s: &SubjectEntry) -> Result<Vec<Tensor>> {
    let branches = Branch::all();
    match &cfg.extractor {
        ExtractorSource::Stub { seed, descriptor } => {
            let stub = StubExtractor::new(descriptor.clone(), *seed)?;
            let mut out = Vec::with_capacity(branches.len());
            for metric in Metric::ALL {
                let volume = manifest.load_volume(s, metric)?;
                for view in View::ALL {
                    let f = branch_features(&volume, view, &stub, cfg.ablation.skip_decomposition)
                        .map_err(|e| e.context(format!("extracting {metric}/{view}")))?;
                    out.push(f.maps);
                }
            }
            Ok(out)
        }
        ExtractorSource::Import { out_dims, .. } => {
            let dir = cfg.import_dir().expect("import source");
            branches
                .iter()
                .map(|b| Ok(maxpool8(&import_feature_group(&dir, &s.id, b.metric, b.view, *out_dims)?)?.maps))
                .collect()
        }
    }
}

fn store(entry: &Path, maps: &[Tensor]) -> Result<()> {
    let parent = entry.parent().expect("entry has a parent");
    let staging = parent.join(format!(
        ".{}.tmp{}",
        entry.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
        std::process::id()
    ));
    let io = |e: std::io::Error| Error::io(entry, e);
    fs::create_dir_all(&staging).map_err(io)?;
    for (b, t) in Branch::all().into_iter().zip(maps) {
        tensor_write(t, entry_file(&staging, b))?;
    }
    match fs::rename(&staging, entry) {
        Ok(()) => Ok(()),
        // Another process finished the same entry first; contents are identical.
        Err(_) if entry.is_dir() => fs::remove_dir_all(&staging).map_err(io),
        Err(e) => Err(io(e)),
    }
}

fn load(entry: &Path) -> Result<Vec<Tensor>> {
    Branch::all().into_iter().map(|b| tensor_read(entry_file(entry, b))).collect()
}

/// Produces the feature bank for every subject of the manifest, reading
/// cached entries and computing (then storing) the rest.
pub fn extract_features(cfg: &PipelineConfig, cache: &Path) -> Result<Extraction> {
    let manifest = DatasetManifest::load(cfg.manifest_path())?;
    manifest.validate()?;
    let stage_dir = cache.join("extract");
    fs::create_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;
    let per_subject = manifest
        .subjects
        .par_iter()
        .map(|s| {
            let entry = stage_dir.join(entry_key(cfg, &manifest, s)?);
            if entry.is_dir() {
                return Ok((load(&entry)?, true));
            }
            let maps = compute_subject(cfg, &manifest, s)?;
            store(&entry, &maps)?;
            Ok((maps, false))
        })
        .zip(&manifest.subjects)
        .map(|(r, s): (Result<_>, _)| r.map_err(|e| e.context(format!("subject {}", s.id))))
        .collect::<Result<Vec<_>>>()?;

    let hits = per_subject.iter().filter(|(_, hit)| *hit).count();
    let misses = per_subject.len() - hits;
    let branches = Branch::all();
    let mut maps: Vec<Vec<Tensor>> = vec![Vec::with_capacity(per_subject.len()); branches.len()];
    for (subject_maps, _) in per_subject {
        for (b, t) in subject_maps.into_iter().enumerate() {
            maps[b].push(t);
        }
    }
    let subjects = manifest.subjects.iter().map(|s| SubjectInfo { id: s.id.clone(), label: s.label }).collect();
    Ok(Extraction { bank: FeatureBank::new(subjects, branches, maps)?, hits, misses })
}
