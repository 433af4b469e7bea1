//! End-to-end glue: audio to feature images, the on-disk feature cache, and
//! training/evaluation runs that produce self-describing checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::audio::{decode_wav_named, loop_to_duration, trim_silence, AudioClip, CANONICAL_SAMPLE_RATE};
use crate::config::RunConfig;
use crate::dataset::{resolve_path, Manifest, Split};
use crate::error::{Error, Result};
use crate::features::{load_feature, mel_spectrogram, save_feature, to_feature_tensor, FeatureTensor};
use crate::identification::{enroll, evaluate, identify_cosine, EnrollmentDB, EvalReport};
use crate::nn::{Checkpoint, Model, Tensor};
use crate::training::{embed_examples, head_for, train, Examples, TrainOutcome};

pub const INDEX_FILE: &str = "index.tsv";
pub const INDEX_HEADER: &str = "utterance\tsource_sha256\tfingerprint\tfeature_file";
/// Largest tolerated fraction of utterances that fail preprocessing.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

const META_SPEAKERS: &str = "speakers";
const META_CONFIG_PREFIX: &str = "config.";
pub const CENTROIDS_TENSOR: &str = "enroll.centroids";

/// trim -> loop to the configured duration -> log-mel -> normalized image.
pub fn preprocess_clip(clip: &AudioClip, cfg: &RunConfig) -> Result<FeatureTensor> {
    if clip.sample_rate() != CANONICAL_SAMPLE_RATE {
        return Err(Error::Unsupported(format!(
            "{} is sampled at {} Hz; resample to {CANONICAL_SAMPLE_RATE} Hz first",
            clip.source_id(),
            clip.sample_rate()
        )));
    }
    let trimmed = trim_silence(clip, &cfg.trim)?;
    let looped = loop_to_duration(&trimmed, cfg.duration_s)?;
    let spec = mel_spectrogram(&looped, &cfg.stft, &cfg.mel)?;
    to_feature_tensor(&spec, cfg.geometry)
}

pub fn preprocess_wav(bytes: &[u8], source_id: &str, cfg: &RunConfig) -> Result<FeatureTensor> {
    preprocess_clip(&decode_wav_named(bytes, source_id)?, cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub source_sha256: String,
    pub fingerprint: String,
    /// File name inside the cache directory.
    pub file: String,
}

/// Maps manifest utterance paths to cached feature files.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CacheIndex {
    pub entries: BTreeMap<String, CacheEntry>,
}

impl CacheIndex {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{INDEX_HEADER}\n");
        for (utt, e) in &self.entries {
            out.push_str(&format!("{utt}\t{}\t{}\t{}\n", e.source_sha256, e.fingerprint, e.file));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(Error::Parse("feature cache index has a bad header".into()));
        }
        let mut entries = BTreeMap::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("bad cache index row {line:?}")));
            }
            entries.insert(
                f[0].to_string(),
                CacheEntry {
                    source_sha256: f[1].to_string(),
                    fingerprint: f[2].to_string(),
                    file: f[3].to_string(),
                },
            );
        }
        Ok(Self { entries })
    }

    /// Reads `cache_dir/index.tsv`; a missing index is a configuration error.
    pub fn load(cache_dir: &Path) -> Result<Self> {
        let path = cache_dir.join(INDEX_FILE);
        if !path.is_file() {
            return Err(Error::Config(format!(
                "no feature cache at {} (run `loopvox preprocess` first)",
                cache_dir.display()
            )));
        }
        Self::from_tsv(&fs::read_to_string(path)?)
    }

    pub fn save(&self, cache_dir: &Path) -> Result<()> {
        fs::write(cache_dir.join(INDEX_FILE), self.to_tsv())?;
        Ok(())
    }
}

fn feature_file_name(utterance: &str) -> String {
    let stem = utterance.strip_suffix(".wav").unwrap_or(utterance);
    format!("{}.vpft", stem.replace(['/', '\\'], "__"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessSummary {
    pub written: usize,
    pub fresh: usize,
    /// Utterance path and reason.
    pub skipped: Vec<(String, String)>,
}

enum Outcome {
    Written(String, CacheEntry),
    Fresh(String, CacheEntry),
    Skipped(String, String),
}

/// Builds or refreshes the feature cache for every manifest entry. Entries whose
/// source hash and feature settings match the index are left alone.
pub fn preprocess_manifest(manifest: &Manifest, manifest_path: &Path, cache_dir: &Path, cfg: &RunConfig) -> Result<PreprocessSummary> {
    cfg.validate()?;
    fs::create_dir_all(cache_dir)?;
    let old = if cache_dir.join(INDEX_FILE).is_file() {
        CacheIndex::load(cache_dir)?
    } else {
        CacheIndex::default()
    };
    let fingerprint = cfg.feature_fingerprint();
    let outcomes = manifest
        .entries()
        .par_iter()
        .map(|entry| -> Result<Outcome> {
            let src = resolve_path(manifest_path, entry);
            let bytes = match fs::read(&src) {
                Ok(b) => b,
                Err(e) => return Ok(Outcome::Skipped(entry.path.clone(), format!("unreadable: {e}"))),
            };
            let sha = sha256_hex(&bytes);
            let file = feature_file_name(&entry.path);
            let cached = CacheEntry {
                source_sha256: sha,
                fingerprint: fingerprint.clone(),
                file,
            };
            if old.entries.get(&entry.path) == Some(&cached) && cache_dir.join(&cached.file).is_file() {
                return Ok(Outcome::Fresh(entry.path.clone(), cached));
            }
            match preprocess_wav(&bytes, &entry.path, cfg) {
                Ok(t) => {
                    save_feature(&cache_dir.join(&cached.file), &t)?;
                    Ok(Outcome::Written(entry.path.clone(), cached))
                }
                Err(e @ (Error::AllSilent | Error::Format(_) | Error::Unsupported(_) | Error::EmptyAudio | Error::TooShort { .. })) => {
                    Ok(Outcome::Skipped(entry.path.clone(), e.to_string()))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut index = CacheIndex::default();
    let mut summary = PreprocessSummary::default();
    for o in outcomes {
        match o {
            Outcome::Written(p, e) => {
                summary.written += 1;
                index.entries.insert(p, e);
            }
            Outcome::Fresh(p, e) => {
                summary.fresh += 1;
                index.entries.insert(p, e);
            }
            Outcome::Skipped(p, why) => {
                log::warn!("skipping {p}: {why}");
                summary.skipped.push((p, why));
            }
        }
    }
    index.save(cache_dir)?;
    let limit = (manifest.len() as f64 * MAX_SKIP_FRACTION).floor() as usize;
    if summary.skipped.len() > limit {
        return Err(Error::Config(format!(
            "{} of {} utterances could not be preprocessed (more than {}%)",
            summary.skipped.len(),
            manifest.len(),
            MAX_SKIP_FRACTION * 100.0
        )));
    }
    Ok(summary)
}

/// Cached features of one split, labelled by position in `speakers`. Utterances
/// excluded during preprocessing are left out.
pub fn load_examples(manifest: &Manifest, cache_dir: &Path, split: Split, speakers: &[String]) -> Result<Examples> {
    let index = CacheIndex::load(cache_dir)?;
    let label_of: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for e in manifest.split(split) {
        let Some(c) = index.entries.get(&e.path) else {
            continue;
        };
        let y = *label_of
            .get(e.speaker_id.as_str())
            .ok_or_else(|| Error::ClosedSet(format!("speaker {} was not enrolled", e.speaker_id)))?;
        features.push(load_feature(&cache_dir.join(&c.file))?);
        labels.push(y);
    }
    Examples::new(features, labels)
}

/// Trains per `cfg`, then enrolls training-split centroids into the checkpoint
/// together with the speaker list and the resolved config.
pub fn train_run(cfg: &RunConfig, speakers: &[String], train_set: &Examples, val_set: &Examples) -> Result<(TrainOutcome, Checkpoint)> {
    cfg.validate()?;
    if let Some(g) = train_set.geometry() {
        if g != cfg.geometry {
            return Err(Error::Config(format!("cached features are {g}, config asks for {}", cfg.geometry)));
        }
    }
    let k = speakers.len();
    let model = Model::<f32>::init(cfg.network(k)?, head_for(cfg.loss), cfg.init_seed())?;
    let outcome = train(model, &cfg.loss_config(k), &cfg.train, train_set, val_set)?;
    let db = enroll(&outcome.best, speakers, train_set, cfg.train.batch_size)?;
    let mut ck = outcome.checkpoint();
    ck.metadata.insert(META_SPEAKERS.into(), speakers.join("\t"));
    for (key, value) in cfg.as_map() {
        ck.metadata.insert(format!("{META_CONFIG_PREFIX}{key}"), value);
    }
    let centroids: Vec<f32> = speakers
        .iter()
        .flat_map(|s| {
            let i = db.speakers().iter().position(|x| x == s).expect("enrolled");
            db.centroids()[i].iter().map(|&v| v as f32).collect::<Vec<_>>()
        })
        .collect();
    ck.set_tensor(CENTROIDS_TENSOR, Tensor::new(&[k, db.dim()], centroids)?);
    Ok((outcome, ck))
}

pub fn checkpoint_speakers(ck: &Checkpoint) -> Result<Vec<String>> {
    let s = ck
        .metadata
        .get(META_SPEAKERS)
        .ok_or_else(|| Error::Parse("checkpoint does not list its speakers".into()))?;
    Ok(s.split('\t').map(str::to_string).collect())
}

pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    let text: String = ck
        .metadata
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(META_CONFIG_PREFIX).map(|k| format!("{k}={v}\n")))
        .collect();
    if text.is_empty() {
        return Err(Error::Parse("checkpoint carries no run configuration".into()));
    }
    RunConfig::from_text(&text)
}

pub fn checkpoint_enrollment(ck: &Checkpoint) -> Result<EnrollmentDB> {
    let speakers = checkpoint_speakers(ck)?;
    let t = ck
        .tensor(CENTROIDS_TENSOR)
        .ok_or_else(|| Error::Parse("checkpoint has no enrollment centroids".into()))?;
    let (k, d) = t.dims2()?;
    if k != speakers.len() {
        return Err(Error::Parse("centroid count does not match the speaker list".into()));
    }
    let rows = (0..k).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect();
    let db = EnrollmentDB::from_centroids(speakers, rows)?;
    debug_assert_eq!(db.dim(), d);
    Ok(db)
}

/// Scores a test split with a trained checkpoint.
pub fn evaluate_checkpoint(ck: &Checkpoint, test: &Examples) -> Result<EvalReport> {
    let cfg = checkpoint_config(ck)?;
    let model: Model<f32> = ck.to_model()?;
    evaluate(
        &model,
        &checkpoint_speakers(ck)?,
        &checkpoint_enrollment(ck)?,
        test,
        cfg.loss,
        cfg.duration_s,
        cfg.train.batch_size,
    )
}

/// Runs one clip through the training pipeline and matches it by cosine.
pub fn identify_clip(ck: &Checkpoint, clip: &AudioClip) -> Result<(String, f64)> {
    let cfg = checkpoint_config(ck)?;
    let feature = preprocess_clip(clip, &cfg)?;
    let model: Model<f32> = ck.to_model()?;
    let ex = Examples::new(vec![feature], vec![0])?;
    let emb = embed_examples(&model, &ex, 1)?;
    let probe: Vec<f64> = emb.row(0).iter().map(|&v| v as f64).collect();
    identify_cosine(&checkpoint_enrollment(ck)?, &probe)
}

/// Paths written into a run directory.
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
}

impl RunPaths {
    pub fn new(run_dir: &Path) -> Self {
        Self {
            checkpoint: run_dir.join("checkpoint.vpck"),
            log: run_dir.join("train_log.tsv"),
            config: run_dir.join("config.txt"),
        }
    }
}
