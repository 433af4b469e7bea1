//! Run configuration as flat `key=value` text. Unknown keys are rejected;
//! missing keys take their defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::audio::{TrimPolicy, CANONICAL_SAMPLE_RATE};
use crate::dataset::mix_seed;
use crate::error::{Error, Result};
use crate::features::{Geometry, MelConfig, StftConfig};
use crate::losses::{LossConfig, LossFamily};
use crate::nn::NetworkConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: Geometry,
    pub duration_s: f64,
    pub loss: LossFamily,
    pub scale: f64,
    pub margin: f64,
    pub net_preset: String,
    pub seed: u64,
    pub train: TrainConfig,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub trim: TrimPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::Wide432x288,
            duration_s: 10.0,
            loss: LossFamily::CosFace,
            scale: 22.0,
            margin: 0.2,
            net_preset: "vgg16m".into(),
            seed: 0,
            train: TrainConfig::default(),
            stft: StftConfig::default(),
            mel: MelConfig::default(),
            trim: TrimPolicy::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 27] = [
        "geometry",
        "duration_s",
        "loss",
        "scale",
        "margin",
        "net_preset",
        "seed",
        "lr0",
        "momentum",
        "weight_decay",
        "plateau_factor",
        "plateau_patience",
        "plateau_threshold",
        "early_stop_patience",
        "min_epochs",
        "max_epochs",
        "batch_size",
        "stft.window_ms",
        "stft.hop_ms",
        "stft.fft_size",
        "mel.n_mels",
        "mel.f_min",
        "mel.f_max",
        "trim.frame_ms",
        "trim.hop_ms",
        "trim.threshold_db",
        "trim.min_voiced_frames",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "geometry" => self.geometry.to_string(),
            "duration_s" => self.duration_s.to_string(),
            "loss" => self.loss.to_string(),
            "scale" => self.scale.to_string(),
            "margin" => self.margin.to_string(),
            "net_preset" => self.net_preset.clone(),
            "seed" => self.seed.to_string(),
            "lr0" => t.lr0.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "plateau_factor" => t.plateau_factor.to_string(),
            "plateau_patience" => t.plateau_patience.to_string(),
            "plateau_threshold" => t.plateau_threshold.to_string(),
            "early_stop_patience" => t.early_stop_patience.to_string(),
            "min_epochs" => t.min_epochs.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "stft.window_ms" => self.stft.window_ms.to_string(),
            "stft.hop_ms" => self.stft.hop_ms.to_string(),
            "stft.fft_size" => self.stft.fft_size.to_string(),
            "mel.n_mels" => self.mel.n_mels.to_string(),
            "mel.f_min" => self.mel.f_min.to_string(),
            "mel.f_max" => self.mel.f_max.to_string(),
            "trim.frame_ms" => self.trim.frame_ms.to_string(),
            "trim.hop_ms" => self.trim.hop_ms.to_string(),
            "trim.threshold_db" => self.trim.threshold_db.to_string(),
            "trim.min_voiced_frames" => self.trim.min_voiced_frames.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "geometry" => self.geometry = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "duration_s" => self.duration_s = parse(key, value)?,
            "loss" => self.loss = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "scale" => self.scale = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "net_preset" => self.net_preset = value.trim().to_string(),
            "seed" => self.seed = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "plateau_factor" => t.plateau_factor = parse(key, value)?,
            "plateau_patience" => t.plateau_patience = parse(key, value)?,
            "plateau_threshold" => t.plateau_threshold = parse(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
            "min_epochs" => t.min_epochs = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "stft.window_ms" => self.stft.window_ms = parse(key, value)?,
            "stft.hop_ms" => self.stft.hop_ms = parse(key, value)?,
            "stft.fft_size" => self.stft.fft_size = parse(key, value)?,
            "mel.n_mels" => self.mel.n_mels = parse(key, value)?,
            "mel.f_min" => self.mel.f_min = parse(key, value)?,
            "mel.f_max" => self.mel.f_max = parse(key, value)?,
            "trim.frame_ms" => self.trim.frame_ms = parse(key, value)?,
            "trim.hop_ms" => self.trim.hop_ms = parse(key, value)?,
            "trim.threshold_db" => self.trim.threshold_db = parse(key, value)?,
            "trim.min_voiced_frames" => self.trim.min_voiced_frames = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        self.train.seed = self.seed;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            writeln!(out, "{k}={}", self.get(k).expect("listed key")).unwrap();
        }
        out
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {} is not key=value: {line:?}", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn as_map(&self) -> BTreeMap<String, String> {
        Self::KEYS.iter().map(|k| (k.to_string(), self.get(k).unwrap())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!("duration_s must be positive (got {})", self.duration_s)));
        }
        if self.train.seed != self.seed {
            return Err(Error::Config("train seed must equal the run seed".into()));
        }
        self.train.validate()?;
        self.stft.validate(CANONICAL_SAMPLE_RATE)?;
        self.mel.validate(CANONICAL_SAMPLE_RATE)?;
        self.trim.validate()?;
        self.loss_config(2).validate()?;
        NetworkConfig::preset(&self.net_preset, 2)?;
        Ok(())
    }

    pub fn loss_config(&self, num_classes: usize) -> LossConfig {
        LossConfig {
            family: self.loss,
            s: self.scale,
            m: self.margin,
            num_classes,
        }
    }

    pub fn network(&self, num_classes: usize) -> Result<NetworkConfig> {
        NetworkConfig::preset(&self.net_preset, num_classes)
    }

    /// Seed for weight initialization, distinct from the shuffling stream.
    pub fn init_seed(&self) -> u64 {
        mix_seed(&[self.seed, 0x1417])
    }

    /// Everything that determines a feature file's contents besides the audio.
    pub fn feature_fingerprint(&self) -> String {
        ["geometry", "duration_s", "stft.window_ms", "stft.hop_ms", "stft.fft_size", "mel.n_mels", "mel.f_min", "mel.f_max"]
            .iter()
            .chain(&["trim.frame_ms", "trim.hop_ms", "trim.threshold_db", "trim.min_voiced_frames"])
            .map(|k| format!("{k}={}", self.get(k).unwrap()))
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!((c.scale, c.margin), (22.0, 0.2));
        let text = c.to_text();
        assert_eq!(RunConfig::from_text(&text).unwrap(), c);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::from_text("# desk\nloss=arcface\ngeometry=224x224x3\nduration_s=3\nseed=9\n").unwrap();
        assert_eq!(c.loss, LossFamily::ArcFace);
        assert_eq!(c.geometry, Geometry::Square224);
        assert_eq!(c.train.seed, 9);
        assert!(RunConfig::from_text("bogus=1").is_err());
        assert!(RunConfig::from_text("lr0").is_err());
        assert!(RunConfig::from_text("duration_s=0").is_err());
        assert!(RunConfig::from_text("loss=cosface\nmargin=1.5").is_err());
        assert!(RunConfig::from_text("net_preset=resnet").is_err());
        let lc = RunConfig::from_text("loss=cosface\nmargin=0.2\nscale=22").unwrap().loss_config(8);
        assert_eq!((lc.s, lc.m, lc.family), (22.0, 0.2, LossFamily::CosFace));
    }

    proptest! {
        #[test]
        fn random_configs_round_trip(
            dur in 0.1f64..30.0,
            lr in 1e-5f64..1.0,
            seed in any::<u64>(),
            geo in 0usize..3,
            loss in 0usize..3,
            batch in 1usize..64,
            m in 0.0f64..0.9,
        ) {
            let mut c = RunConfig {
                geometry: Geometry::ALL[geo],
                duration_s: dur,
                loss: LossFamily::ALL[loss],
                margin: m,
                seed,
                ..RunConfig::default()
            };
            c.train.lr0 = lr;
            c.train.batch_size = batch;
            c.train.seed = seed;
            let text = c.to_text();
            let back = RunConfig::from_text(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
