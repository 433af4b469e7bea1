//! Log-mel spectrogram features and the fixed-geometry image tensors fed to the
//! network.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Power floor applied before taking decibels.
pub const POWER_FLOOR: f64 = 1e-10;

/// Standard deviations below this are clamped during per-image normalization.
pub const MIN_STD: f64 = 1e-8;

/// Short-time Fourier transform settings. The window is always periodic Hann.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_ms: u32,
    pub hop_ms: u32,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 25,
            hop_ms: 10,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        self.window_ms as usize * sample_rate as usize / 1000
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        self.hop_ms as usize * sample_rate as usize / 1000
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let win = self.window_len(sample_rate);
        let hop = self.hop_len(sample_rate);
        if win == 0 || hop == 0 {
            return Err(Error::Config("STFT window and hop must be at least one sample".into()));
        }
        if self.hop_ms > self.window_ms {
            return Err(Error::Config(format!(
                "STFT hop ({} ms) exceeds window ({} ms)",
                self.hop_ms, self.window_ms
            )));
        }
        if self.fft_size < win {
            return Err(Error::Config(format!(
                "fft_size {} is smaller than the {win}-sample window",
                self.fft_size
            )));
        }
        Ok(())
    }

    /// Frame count for a clip of `len` samples, or `None` if it is shorter than a window.
    pub fn frame_count(&self, len: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_len(sample_rate);
        let hop = self.hop_len(sample_rate);
        (len >= win).then(|| 1 + (len - win) / hop)
    }
}

/// Mel filterbank settings (HTK mel scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.n_mels < 2 {
            return Err(Error::Config(format!("n_mels must be at least 2 (got {})", self.n_mels)));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "mel band limits must satisfy 0 <= f_min < f_max <= {nyquist} (got {}..{})",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrogram `[frames x (fft_size/2 + 1)]`.
pub fn stft_power(clip: &AudioClip, cfg: &StftConfig) -> Result<Array2<f64>> {
    let sr = clip.sample_rate();
    cfg.validate(sr)?;
    let win = cfg.window_len(sr);
    let hop = cfg.hop_len(sr);
    let frames = cfg
        .frame_count(clip.len(), sr)
        .ok_or(Error::TooShort { len: clip.len(), needed: win })?;

    let window = hann_window(win);
    let n_bins = cfg.n_bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Array2::<f64>::zeros((frames, n_bins));
    let samples = clip.samples();

    for t in 0..frames {
        let frame = &samples[t * hop..t * hop + win];
        for (slot, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(x as f64 * w, 0.0);
        }
        for slot in &mut buf[win..] {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, c) in buf[..n_bins].iter().enumerate() {
            out[[t, k]] = c.norm_sqr();
        }
    }
    Ok(out)
}

/// Triangular mel filters `[n_mels x (fft_size/2 + 1)]`, peaks equally spaced on
/// the mel axis. Triangles are evaluated at the exact bin frequencies.
pub fn mel_filterbank(cfg: &MelConfig, fft_size: usize, sample_rate: u32) -> Result<Array2<f64>> {
    cfg.validate(sample_rate)?;
    if fft_size < 2 {
        return Err(Error::Config("fft_size must be at least 2".into()));
    }
    let n_bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;

    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0);
        }
        if fb.row(m).iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "{} mel bands are too many for a {fft_size}-point FFT: band {m} ({left:.1}-{right:.1} Hz) covers no bin",
                cfg.n_mels
            )));
        }
    }
    Ok(fb)
}

/// Peak (center) frequency of each mel filter in Hz.
pub fn mel_peak_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Log-mel spectrogram `[n_mels x frames]` in dB.
pub fn mel_spectrogram(clip: &AudioClip, stft: &StftConfig, mel: &MelConfig) -> Result<Array2<f64>> {
    let power = stft_power(clip, stft)?;
    let fb = mel_filterbank(mel, stft.fft_size, clip.sample_rate())?;
    let energies = fb.dot(&power.t());
    Ok(energies.mapv(|e| 10.0 * e.max(POWER_FLOOR).log10()))
}

/// Bilinear resize with pixel-center alignment (source coordinate
/// `(dst + 0.5) * src/dst - 0.5`, clamped to the edge).
pub fn resize_bilinear(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let taps = |dst: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = src_len as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let rows = taps(height, sh);
    let cols = taps(width, sw);
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// The three input image geometries, written `width x height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Geometry {
    Square224,
    Square448,
    Wide432x288,
}

impl Geometry {
    pub const ALL: [Geometry; 3] = [Geometry::Square224, Geometry::Square448, Geometry::Wide432x288];

    pub fn width(self) -> usize {
        match self {
            Geometry::Square224 => 224,
            Geometry::Square448 => 448,
            Geometry::Wide432x288 => 432,
        }
    }

    pub fn height(self) -> usize {
        match self {
            Geometry::Square224 => 224,
            Geometry::Square448 => 448,
            Geometry::Wide432x288 => 288,
        }
    }

    pub fn from_dims(height: usize, width: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.height() == height && g.width() == width)
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width(), self.height())
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_end_matches("x3");
        Self::ALL
            .into_iter()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown geometry {s:?} (expected 224x224, 448x448 or 432x288)")))
    }
}

/// Number of identical channels in every feature image.
pub const CHANNELS: usize = 3;

/// A `height x width x 3` image with identical channels, stored row-major (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    geometry: Geometry,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn from_hwc(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        let expected = geometry.height() * geometry.width() * CHANNELS;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "feature data has {} values, geometry {geometry} needs {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature tensor".into()));
        }
        Ok(Self { geometry, data })
    }

    /// Builds a tensor by replicating one `height x width` plane across the channels.
    pub fn from_plane(geometry: Geometry, plane: &[f32]) -> Result<Self> {
        let data = plane.iter().flat_map(|&v| [v; CHANNELS]).collect();
        Self::from_hwc(geometry, data)
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn height(&self) -> usize {
        self.geometry.height()
    }

    pub fn width(&self) -> usize {
        self.geometry.width()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width() + x) * CHANNELS + c]
    }

    /// Channel 0 as a `height x width` plane.
    pub fn plane(&self) -> Vec<f32> {
        self.data.iter().step_by(CHANNELS).copied().collect()
    }

    /// Channel-major copy (`3 x height x width`) for the network.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height() * self.width();
        let mut out = vec![0.0; hw * CHANNELS];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = v;
            }
        }
        out
    }

    fn map_values(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v as f64) as f32;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.data.len() * 4);
        write_feature(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_feature(&mut &bytes[..])
    }
}

/// Resizes a mel matrix to the geometry, normalizes it to zero mean and unit
/// variance, and replicates it across three channels.
pub fn to_feature_tensor(spec: &Array2<f64>, geometry: Geometry) -> Result<FeatureTensor> {
    if spec.is_empty() {
        return Err(Error::Shape("empty spectrogram".into()));
    }
    let resized = resize_bilinear(spec, geometry.height(), geometry.width());
    let n = resized.len() as f64;
    let mean = resized.sum() / n;
    let var = resized.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(MIN_STD);
    let plane: Vec<f32> = resized.iter().map(|v| ((v - mean) / sd) as f32).collect();
    FeatureTensor::from_plane(geometry, &plane)
}

/// Normalizes each speaker's tensors by that speaker's pooled scalar mean and
/// standard deviation. Groups are independent of each other.
pub fn normalize_per_speaker(groups: &mut BTreeMap<String, Vec<FeatureTensor>>) -> Result<()> {
    for (speaker, tensors) in groups.iter_mut() {
        if tensors.is_empty() {
            return Err(Error::Normalization(format!("speaker {speaker:?} has no tensors")));
        }
        let count: usize = tensors.iter().map(|t| t.data.len()).sum();
        let mean = tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&v| v as f64)
            .sum::<f64>()
            / count as f64;
        let var = tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        if !(var > 0.0) {
            return Err(Error::Normalization(format!("speaker {speaker:?} has zero variance")));
        }
        let sd = var.sqrt();
        for t in tensors.iter_mut() {
            t.map_values(|v| (v - mean) / sd);
        }
    }
    Ok(())
}

const FEATURE_MAGIC: &[u8; 4] = b"VPFT";
const FEATURE_VERSION: u16 = 1;

/// Writes a feature cache record: magic, version, height, width, channels, then
/// little-endian f32 values in HWC order.
pub fn write_feature<W: Write>(w: &mut W, t: &FeatureTensor) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    for dim in [t.height(), t.width(), CHANNELS] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_feature<R: Read>(r: &mut R) -> Result<FeatureTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Parse("not a feature cache file (bad magic)".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != FEATURE_VERSION {
        return Err(Error::Parse(format!("unsupported feature cache version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [height, width, channels] = dims;
    if channels != CHANNELS {
        return Err(Error::Parse(format!("feature cache has {channels} channels, expected {CHANNELS}")));
    }
    let geometry = Geometry::from_dims(height, width)
        .ok_or_else(|| Error::Parse(format!("feature cache has unsupported size {width}x{height}")))?;
    let mut raw = vec![0u8; height * width * channels * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureTensor::from_hwc(geometry, data)
}

pub fn save_feature(path: &Path, t: &FeatureTensor) -> Result<()> {
    std::fs::write(path, t.to_bytes())?;
    Ok(())
}

pub fn load_feature(path: &Path) -> Result<FeatureTensor> {
    FeatureTensor::from_bytes(&std::fs::read(path)?)
}
