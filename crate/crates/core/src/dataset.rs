//! Utterance manifests with stratified train/val/test splits, and a seeded
//! generator of synthetic harmonic "speakers".

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::audio::{encode_wav, AudioClip, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "speaker_id\tpath\tsplit\tduration_s";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// SplitMix64 finalizer folded over `parts`; derives independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub speaker_id: String,
    /// Relative to the directory holding the manifest file.
    pub path: String,
    pub split: Split,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Checks that paths are unique, fields are tab-free and every speaker has a
    /// training entry.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut paths = BTreeSet::new();
        for e in &entries {
            if [&e.speaker_id, &e.path].iter().any(|s| s.is_empty() || s.contains(['\t', '\n', '\r'])) {
                return Err(Error::Config(format!("manifest field {:?}/{:?} is empty or has tabs", e.speaker_id, e.path)));
            }
            if !(e.duration_s >= 0.0 && e.duration_s.is_finite()) {
                return Err(Error::Config(format!("bad duration for {}", e.path)));
            }
            if !paths.insert(e.path.as_str()) {
                return Err(Error::Config(format!("duplicate utterance path {}", e.path)));
            }
        }
        let m = Self { entries };
        let with_train: BTreeSet<&str> = m.split(Split::Train).map(|e| e.speaker_id.as_str()).collect();
        if let Some(s) = m.speakers().into_iter().find(|s| !with_train.contains(s.as_str())) {
            return Err(Error::Config(format!("speaker {s} has no training utterance")));
        }
        Ok(m)
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Sorted distinct speaker ids; a speaker's position is its class label.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.speaker_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.speaker_id, e.path, e.split, e.duration_s));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Parse(format!("manifest must start with the header {MANIFEST_HEADER:?}")));
        }
        let entries = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split('\t').collect();
                let err = || Error::Parse(format!("bad manifest row {line:?}"));
                if f.len() != 4 {
                    return Err(err());
                }
                Ok(ManifestEntry {
                    speaker_id: f[0].to_string(),
                    path: f[1].to_string(),
                    split: f[2].parse()?,
                    duration_s: f[3].parse().map_err(|_| err())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

/// Absolute location of an entry given the manifest file's path.
pub fn resolve_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(&entry.path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || self.train <= 0.0 || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split ratios {}/{}/{} must be in [0, 1], sum to 1, and give train a positive share",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `n` utterances: val and test are floored,
    /// train takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val + 1e-9).floor() as usize;
        let test = (n as f64 * self.test + 1e-9).floor() as usize;
        let (val, test) = if val + test >= n { (0, 0) } else { (val, test) };
        (n - val - test, val, test)
    }
}

/// Seeded per-speaker split of `(speaker_id, path, duration_s)` items.
pub fn stratified_split(items: Vec<(String, String, f64)>, ratios: &SplitRatios, seed: u64) -> Result<Manifest> {
    ratios.validate()?;
    let mut by_speaker: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (spk, path, dur) in items {
        by_speaker.entry(spk).or_default().push((path, dur));
    }
    let mut entries = Vec::new();
    for (spk, mut files) in by_speaker {
        files.sort_by(|a, b| a.0.cmp(&b.0));
        let (_, n_val, n_test) = ratios.counts(files.len());
        let mut order: Vec<usize> = (0..files.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv(&spk)])));
        let mut split = vec![Split::Train; files.len()];
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_val {
                split[i] = Split::Val;
            } else if rank < n_val + n_test {
                split[i] = Split::Test;
            }
        }
        for ((path, dur), split) in files.into_iter().zip(split) {
            entries.push(ManifestEntry {
                speaker_id: spk.clone(),
                path,
                split,
                duration_s: dur,
            });
        }
    }
    Manifest::new(entries)
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Scans `root/<speaker_id>/*.wav` and splits each speaker's files.
pub fn build_manifest(root: &Path, ratios: &SplitRatios, seed: u64) -> Result<Manifest> {
    let mut items = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let spk = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let mut wavs: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        wavs.sort();
        if wavs.is_empty() {
            log::warn!("speaker directory {} has no WAV files; skipped", dir.display());
            continue;
        }
        for wav in wavs {
            let reader = hound::WavReader::open(&wav)
                .map_err(|e| Error::Format(format!("{}: {e}", wav.display())))?;
            let spec = reader.spec();
            let duration = reader.duration() as f64 / spec.sample_rate as f64;
            let rel = wav.strip_prefix(root).expect("file lies under root");
            let rel = rel.to_str().ok_or_else(|| Error::Argument(format!("non-UTF-8 path {}", wav.display())))?;
            items.push((spk.clone(), rel.replace('\\', "/"), duration));
        }
    }
    if items.is_empty() {
        return Err(Error::Config(format!("no speaker directories with WAV files under {}", root.display())));
    }
    stratified_split(items, ratios, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_range_s: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_speakers: 8,
            utterances_per_speaker: 40,
            duration_range_s: (1.5, 6.0),
            seed: 0,
        }
    }
}

pub const F0_MIN_HZ: f64 = 90.0;
pub const F0_MAX_HZ: f64 = 260.0;
pub const F0_STEP_HZ: f64 = 2.0;
pub const HARMONICS: usize = 8;
pub const SNR_DB: f64 = 20.0;

fn f0_grid() -> Vec<f64> {
    let n = ((F0_MAX_HZ - F0_MIN_HZ) / F0_STEP_HZ).round() as usize + 1;
    (0..n).map(|i| F0_MIN_HZ + F0_STEP_HZ * i as f64).collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::Config(format!(
                "num_speakers must be at least 2 (got {})",
                self.num_speakers
            )));
        }
        let grid = f0_grid().len();
        if self.num_speakers > grid {
            return Err(Error::Config(format!("at most {grid} distinct synthetic speakers are available")));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::Config("utterances_per_speaker must be at least 1".into()));
        }
        let (lo, hi) = self.duration_range_s;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("duration range ({lo}, {hi}) must satisfy 0 < min <= max")));
        }
        Ok(())
    }
}

/// Identity of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: String,
    pub f0_hz: f64,
    /// Amplitude of harmonics 1..=8.
    pub harmonic_amps: [f64; HARMONICS],
}

pub fn speaker_profiles(spec: &SynthSpec) -> Result<Vec<SpeakerProfile>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x5eed]));
    let f0s: Vec<f64> = f0_grid().choose_multiple(&mut rng, spec.num_speakers).copied().collect();
    let width = (spec.num_speakers - 1).to_string().len().max(2);
    Ok(f0s
        .into_iter()
        .enumerate()
        .map(|(i, f0)| {
            let centre: f64 = rng.random_range(400.0..2500.0);
            let bandwidth: f64 = rng.random_range(300.0..900.0);
            let tilt: f64 = rng.random_range(0.3..1.2);
            let mut amps = [0.0; HARMONICS];
            for (h, a) in amps.iter_mut().enumerate() {
                let k = (h + 1) as f64;
                let formant = (-((k * f0 - centre) / bandwidth).powi(2)).exp();
                *a = rng.random_range(0.3..1.0) * k.powf(-tilt) * (0.25 + formant);
            }
            SpeakerProfile {
                id: format!("spk{i:0width$}"),
                f0_hz: f0,
                harmonic_amps: amps,
            }
        })
        .collect())
}

/// One utterance: zero-padded edges around a jittered harmonic tone with white
/// noise at the configured SNR, peak-normalized to 0.5.
pub fn synthesize_utterance(profile: &SpeakerProfile, range_s: (f64, f64), seed: u64) -> Result<AudioClip> {
    let sr = CANONICAL_SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dur = if range_s.1 > range_s.0 {
        rng.random_range(range_s.0..=range_s.1)
    } else {
        range_s.0
    };
    let n = ((dur * sr).round() as usize).max(1);
    let lead = ((rng.random_range(0.05..0.25) * sr) as usize).min(n / 4);
    let trail = ((rng.random_range(0.05..0.25) * sr) as usize).min(n / 4);
    let voiced = n - lead - trail;

    let gains: Vec<f64> = profile.harmonic_amps.iter().map(|a| a * rng.random_range(0.9..1.1)).collect();
    let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mod_rate = rng.random_range(2.0..6.0);
    let mod_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mod_depth = rng.random_range(0.1..0.4);
    let fade = ((0.01 * sr) as usize).min(voiced / 2).max(1);

    let mut signal: Vec<f64> = (0..voiced)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = gains
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (g, p))| g * (std::f64::consts::TAU * (h + 1) as f64 * profile.f0_hz * t + p).sin())
                .sum();
            let env = 1.0 + mod_depth * (std::f64::consts::TAU * mod_rate * t + mod_phase).sin();
            let ramp = (i.min(voiced - 1 - i) as f64 / fade as f64).min(1.0);
            tone * env * ramp
        })
        .collect();
    let power = signal.iter().map(|v| v * v).sum::<f64>() / voiced as f64;
    let noise_sd = (power / 10f64.powf(SNR_DB / 10.0)).sqrt();
    for v in &mut signal {
        *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    let mut samples = vec![0.0f32; n];
    for (dst, v) in samples[lead..lead + voiced].iter_mut().zip(&signal) {
        *dst = (v * scale) as f32;
    }
    AudioClip::new(samples, CANONICAL_SAMPLE_RATE, profile.id.clone())
}

/// Writes `out_dir/<speaker>/<speaker>_<nnn>.wav` for every utterance plus
/// `out_dir/manifest.tsv`, and returns the manifest.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    let profiles = speaker_profiles(spec)?;
    fs::create_dir_all(out_dir)?;
    for p in &profiles {
        fs::create_dir_all(out_dir.join(&p.id))?;
    }
    let width = (spec.utterances_per_speaker - 1).to_string().len().max(3);
    let jobs: Vec<(usize, usize)> = (0..profiles.len())
        .flat_map(|s| (0..spec.utterances_per_speaker).map(move |u| (s, u)))
        .collect();
    let items = jobs
        .par_iter()
        .map(|&(s, u)| {
            let p = &profiles[s];
            let clip = synthesize_utterance(p, spec.duration_range_s, mix_seed(&[spec.seed, s as u64, u as u64]))?;
            let rel = format!("{}/{}_{u:0width$}.wav", p.id, p.id);
            fs::write(out_dir.join(&rel), encode_wav(&clip)?)?;
            Ok((p.id.clone(), rel, clip.duration_s()))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = stratified_split(items, &SplitRatios::default(), spec.seed)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(spk: &str, n: usize) -> Vec<(String, String, f64)> {
        (0..n).map(|i| (spk.to_string(), format!("{spk}/{i:03}.wav"), 1.0)).collect()
    }

    #[test]
    fn split_counts() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(20), (14, 3, 3));
        assert_eq!(r.counts(40), (28, 6, 6));
        assert_eq!(r.counts(1), (1, 0, 0));
        assert_eq!(r.counts(6), (6, 0, 0));
        assert_eq!(r.counts(7), (5, 1, 1));
    }

    #[test]
    fn single_file_speaker_trains() {
        let mut all = items("a", 20);
        all.extend(items("b", 1));
        let m = stratified_split(all, &SplitRatios::default(), 3).unwrap();
        let b: Vec<_> = m.entries().iter().filter(|e| e.speaker_id == "b").collect();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].split, Split::Train);
        let count = |s| m.entries().iter().filter(|e| e.speaker_id == "a" && e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (14, 3, 3));
        assert_eq!(stratified_split(items("a", 20), &SplitRatios::default(), 3).unwrap().entries()[..20], m.entries()[..20]);
    }

    #[test]
    fn manifest_validation_and_tsv() {
        let m = stratified_split(items("x", 10), &SplitRatios::default(), 1).unwrap();
        let text = m.to_tsv();
        assert!(text.starts_with(MANIFEST_HEADER));
        assert_eq!(Manifest::from_tsv(&text).unwrap(), m);
        let dup = vec![m.entries()[0].clone(), m.entries()[0].clone()];
        assert!(Manifest::new(dup).is_err());
        let no_train = vec![ManifestEntry {
            speaker_id: "q".into(),
            path: "q.wav".into(),
            split: Split::Test,
            duration_s: 1.0,
        }];
        assert!(Manifest::new(no_train).is_err());
        assert!(Manifest::from_tsv("speaker\tpath\n").is_err());
    }

    #[test]
    fn synth_spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let one = SynthSpec { num_speakers: 1, ..SynthSpec::default() };
        assert!(one.validate().unwrap_err().to_string().contains("num_speakers"));
        assert!(SynthSpec { duration_range_s: (2.0, 1.0), ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { num_speakers: 500, ..SynthSpec::default() }.validate().is_err());
    }

    #[test]
    fn profiles_have_distinct_fundamentals_on_the_grid() {
        let ps = speaker_profiles(&SynthSpec { num_speakers: 30, ..SynthSpec::default() }).unwrap();
        let f0s: BTreeSet<u64> = ps.iter().map(|p| p.f0_hz.to_bits()).collect();
        assert_eq!(f0s.len(), 30);
        for p in &ps {
            assert!((F0_MIN_HZ..=F0_MAX_HZ).contains(&p.f0_hz));
            assert_eq!(((p.f0_hz - F0_MIN_HZ) / F0_STEP_HZ).fract(), 0.0);
        }
        assert_eq!(ps[0].id, "spk00");
    }

    #[test]
    fn utterance_is_deterministic_and_in_range() {
        let p = &speaker_profiles(&SynthSpec::default()).unwrap()[3];
        let a = synthesize_utterance(p, (1.5, 6.0), 42).unwrap();
        let b = synthesize_utterance(p, (1.5, 6.0), 42).unwrap();
        assert_eq!(a, b);
        assert!((1.5..=6.0 + 1e-4).contains(&a.duration_s()));
        assert_eq!(a.samples()[0], 0.0);
        assert_eq!(*a.samples().last().unwrap(), 0.0);
        let peak = a.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn splits_partition_every_speaker(sizes in prop::collection::vec(1usize..60, 1..6), seed in any::<u64>()) {
            let mut all = Vec::new();
            for (i, &n) in sizes.iter().enumerate() {
                all.extend(items(&format!("s{i}"), n));
            }
            let total = all.len();
            let m = stratified_split(all, &SplitRatios::default(), seed).unwrap();
            prop_assert_eq!(m.len(), total);
            for (i, &n) in sizes.iter().enumerate() {
                let id = format!("s{i}");
                let count = |s| m.entries().iter().filter(|e| e.speaker_id == id && e.split == s).count();
                let (t, v, te) = SplitRatios::default().counts(n);
                prop_assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (t, v, te));
            }
            let back = Manifest::from_tsv(&m.to_tsv()).unwrap();
            prop_assert_eq!(back.to_tsv(), m.to_tsv());
        }
    }
}
