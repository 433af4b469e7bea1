//! Audio clips: WAV decoding, leading/trailing silence trimming and loop extension
//! to an exact duration.

use std::io::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sample rate every clip entering the feature pipeline must have.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Frame RMS at or below this level counts as digital silence regardless of the
/// relative threshold (about -120 dBFS).
const ABSOLUTE_SILENCE_RMS: f64 = 1e-6;

/// Mono PCM audio with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    fn with_samples(&self, samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
            source_id: self.source_id.clone(),
        }
    }
}

/// Decodes a RIFF/WAVE container holding 16-bit integer or 32-bit float PCM.
/// Multichannel input is averaged down to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    decode_wav_named(bytes, "")
}

pub fn decode_wav_named(bytes: &[u8], source_id: &str) -> Result<AudioClip> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound_error)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("zero channels".into()));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound_error)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound_error)?,
        (format, bits) => {
            return Err(Error::Unsupported(format!(
                "{bits}-bit {format:?} samples (only 16-bit PCM and 32-bit float are accepted)"
            )))
        }
    };

    if interleaved.len() < channels {
        return Err(Error::EmptyAudio);
    }
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().sum::<f64>() / channels as f64) as f32)
        .collect();
    AudioClip::new(mono, spec.sample_rate, source_id)
}

fn map_hound_error(err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => Error::Unsupported("codec not supported".into()),
        hound::Error::FormatError(msg) => Error::Format(msg.to_string()),
        hound::Error::TooWide => Error::Unsupported("sample width too large".into()),
        hound::Error::UnfinishedSample => Error::Format("truncated sample data".into()),
        hound::Error::InvalidSampleFormat => Error::Unsupported("invalid sample format".into()),
        hound::Error::IoError(e) => Error::Format(format!("truncated or unreadable data: {e}")),
    }
}

/// Encodes a clip as mono 16-bit PCM WAV.
pub fn encode_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::with_capacity(44 + clip.len() * 2));
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).map_err(map_hound_error)?;
        let mut w16 = writer.get_i16_writer(clip.len() as u32);
        for &s in &clip.samples {
            w16.write_sample(quantize_i16(s));
        }
        w16.flush().map_err(map_hound_error)?;
        writer.finalize().map_err(map_hound_error)?;
    }
    Ok(cursor.into_inner())
}

pub(crate) fn quantize_i16(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Parameters of the energy-based silence trimmer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrimPolicy {
    pub frame_ms: u32,
    pub hop_ms: u32,
    /// Threshold in dB relative to the loudest frame; must be negative.
    pub threshold_db: f64,
    /// Runs of voiced frames shorter than this are treated as clicks and ignored.
    pub min_voiced_frames: usize,
}

impl Default for TrimPolicy {
    fn default() -> Self {
        Self {
            frame_ms: 25,
            hop_ms: 10,
            threshold_db: -40.0,
            min_voiced_frames: 3,
        }
    }
}

impl TrimPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.hop_ms == 0 || self.frame_ms < self.hop_ms {
            return Err(Error::Config(format!(
                "trim policy requires frame_ms >= hop_ms > 0 (got frame_ms={}, hop_ms={})",
                self.frame_ms, self.hop_ms
            )));
        }
        if !(self.threshold_db < 0.0) {
            return Err(Error::Config(format!(
                "trim threshold_db must be negative (got {})",
                self.threshold_db
            )));
        }
        Ok(())
    }
}

fn mean_square(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// Window start positions on a hop grid, plus one window flush with the end when
/// the grid leaves a tail uncovered.
fn frame_starts(len: usize, frame: usize, hop: usize) -> Vec<usize> {
    if len <= frame {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|t| t * hop).take_while(|&s| s + frame <= len).collect();
    let last = *starts.last().expect("at least one full frame");
    if last + frame < len {
        starts.push(len - frame);
    }
    starts
}

/// One trimming pass. Returns the retained half-open sample range.
fn trim_pass(samples: &[f32], frame: usize, hop: usize, policy: &TrimPolicy) -> Result<(usize, usize)> {
    let len = samples.len();
    let starts = frame_starts(len, frame, hop);
    let bounds: Vec<(usize, usize)> = starts.iter().map(|&s| (s, (s + frame).min(len))).collect();
    let energies: Vec<f64> = bounds.iter().map(|&(a, b)| mean_square(&samples[a..b])).collect();

    let peak = energies.iter().cloned().fold(0.0f64, f64::max);
    if peak.sqrt() <= ABSOLUTE_SILENCE_RMS {
        return Err(Error::AllSilent);
    }
    // compare mean squares to avoid square roots per frame
    let thr_rms = peak.sqrt() * 10f64.powf(policy.threshold_db / 20.0);
    let thr = thr_rms * thr_rms;

    let needed = policy.min_voiced_frames.clamp(1, energies.len());
    let mut first = None;
    let mut last = None;
    let mut run_start = None;
    for (i, &e) in energies.iter().chain(std::iter::once(&0.0)).enumerate() {
        let voiced = i < energies.len() && e > thr;
        match (voiced, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if i - s >= needed {
                    first.get_or_insert(s);
                    last = Some(i - 1);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let (first, last) = match (first, last) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::AllSilent),
    };

    // Refine the edges to hop-sized blocks inside the boundary frames.
    let (fs, fe) = bounds[first];
    let start = (fs..fe)
        .step_by(hop)
        .find(|&a| mean_square(&samples[a..(a + hop).min(fe)]) > thr)
        .unwrap_or(fs);
    let (ls, le) = bounds[last];
    let end = (0..)
        .map(|k| le - (k * hop).min(le - ls))
        .take_while(|&b| b > ls)
        .find(|&b| mean_square(&samples[b.saturating_sub(hop).max(ls)..b]) > thr)
        .unwrap_or(le);

    if start < end {
        Ok((start, end))
    } else {
        Ok((fs, le))
    }
}

/// Removes leading and trailing silence; interior pauses are kept.
///
/// A frame is voiced when its RMS exceeds the loudest frame's RMS by more than
/// `threshold_db`. The retained span runs from the first to the last voiced run
/// of at least `min_voiced_frames` frames, with edges refined to hop resolution.
/// The pass is repeated until the span stops shrinking, so the result is a fixed
/// point: trimming it again returns it unchanged.
pub fn trim_silence(clip: &AudioClip, policy: &TrimPolicy) -> Result<AudioClip> {
    policy.validate()?;
    let sr = clip.sample_rate as usize;
    let frame = (policy.frame_ms as usize * sr / 1000).max(1);
    let hop = (policy.hop_ms as usize * sr / 1000).max(1);

    let (mut lo, mut hi) = (0usize, clip.len());
    loop {
        let (a, b) = trim_pass(&clip.samples[lo..hi], frame, hop, policy)?;
        if b - a == hi - lo {
            break;
        }
        hi = lo + b;
        lo += a;
    }
    Ok(clip.with_samples(clip.samples[lo..hi].to_vec()))
}

/// Number of samples for a duration, rounding half up.
pub fn target_len(target_s: f64, sample_rate: u32) -> Result<usize> {
    if !(target_s > 0.0) || !target_s.is_finite() {
        return Err(Error::Argument(format!(
            "target duration must be a positive number of seconds (got {target_s})"
        )));
    }
    let n = (target_s * sample_rate as f64 + 0.5).floor();
    if n < 1.0 {
        return Err(Error::Argument(format!(
            "target duration {target_s} s is shorter than one sample"
        )));
    }
    Ok(n as usize)
}

/// Where an over-length clip is cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropOffset {
    #[default]
    Leading,
    /// Uniform random offset drawn from a generator seeded with this value.
    Random(u64),
}

/// Extends a clip to exactly `target_s` seconds by repeating it end to end, or cuts
/// the leading `target_s` seconds when it is already long enough.
pub fn loop_to_duration(clip: &AudioClip, target_s: f64) -> Result<AudioClip> {
    loop_to_duration_with(clip, target_s, CropOffset::Leading)
}

pub fn loop_to_duration_with(clip: &AudioClip, target_s: f64, crop: CropOffset) -> Result<AudioClip> {
    let target = target_len(target_s, clip.sample_rate)?;
    let len = clip.len();
    if len >= target {
        let offset = match crop {
            CropOffset::Leading => 0,
            CropOffset::Random(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..=len - target),
        };
        return Ok(clip.with_samples(clip.samples[offset..offset + target].to_vec()));
    }
    let looped: Vec<f32> = clip.samples.iter().copied().cycle().take(target).collect();
    Ok(clip.with_samples(looped))
}
