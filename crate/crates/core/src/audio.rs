//! Audio front-end: WAV loading and log-Mel spectrograms.
//!
//! Pipeline: fit the waveform to the target duration (center crop or zero
//! pad at the end), pad `(win - hop) / 2` zeros on both sides so that the
//! frame count is exactly `target_frames`, Hann-window each frame, take the
//! magnitude spectrum, apply a triangular Mel filterbank spanning 0 Hz to
//! Nyquist, take `ln(x + floor)` and finally standardize the whole
//! spectrogram to zero mean and unit variance.

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const SPECTROGRAM_MAGIC: &[u8; 4] = b"HSPC";

/// Mono audio samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples in `[start_s, start_s + len_s)`, zero-filled past the end.
    pub fn segment(&self, start_s: f64, len_s: f64) -> Waveform {
        let start = (start_s * self.sample_rate as f64).round().max(0.0) as usize;
        let len = (len_s * self.sample_rate as f64).round() as usize;
        let samples = (start..start + len).map(|i| self.samples.get(i).copied().unwrap_or(0.0)).collect();
        Waveform { samples, sample_rate: self.sample_rate }
    }
}

/// `frames x bins` log-Mel features, row-major (one row per time frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || bins == 0 || frames * bins != data.len() {
            bail!(Argument, "spectrogram {frames}x{bins} cannot hold {} values", data.len());
        }
        Ok(Self { frames, bins, data })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, data: vec![0.0; frames * bins] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    /// Writes the raw dump: magic `HSPC`, u32 frames, u32 bins, u32 reserved
    /// (zero), then `frames * bins` little-endian f32 values, row-major.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        out.write_all(SPECTROGRAM_MAGIC)?;
        out.write_all(&(self.frames as u32).to_le_bytes())?;
        out.write_all(&(self.bins as u32).to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        for &v in &self.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != SPECTROGRAM_MAGIC {
            bail!(Format, "not a spectrogram dump");
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (frames, bins) = (word(4), word(8));
        let body = &bytes[16..];
        if body.len() != frames * bins * 4 {
            bail!(Format, "spectrogram dump body has {} bytes, expected {}", body.len(), frames * bins * 4);
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Self::new(frames, bins, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    Htk,
    Slaney,
}

impl std::str::FromStr for MelScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "htk" => Ok(MelScale::Htk),
            "slaney" => Ok(MelScale::Slaney),
            _ => Err(Error::Argument(format!("unknown mel scale {s:?} (htk|slaney)"))),
        }
    }
}

impl MelScale {
    pub fn hz_to_mel(self, hz: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
            MelScale::Slaney => {
                let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if hz >= min_log_hz {
                    min_log_mel + (hz / min_log_hz).ln() / logstep
                } else {
                    hz / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, mel: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
            MelScale::Slaney => {
                let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if mel >= min_log_mel {
                    min_log_hz * (logstep * (mel - min_log_mel)).exp()
                } else {
                    mel * f_sp
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// FFT length; frames are zero-padded from the window length up to this.
    pub n_fft: usize,
    pub target_frames: usize,
    pub log_floor: f64,
    pub mel_scale: MelScale,
    pub standardize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 128,
            n_fft: 2048,
            target_frames: 256,
            log_floor: 1e-6,
            mel_scale: MelScale::Htk,
            standardize: true,
        }
    }
}

impl FrontendConfig {
    pub fn win_len(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Samples consumed by one spectrogram: `target_frames * hop`.
    pub fn target_samples(&self) -> usize {
        self.target_frames * self.hop_len()
    }

    pub fn target_seconds(&self) -> f64 {
        self.target_samples() as f64 / self.sample_rate as f64
    }

    /// Triangular filters, `n_mels` rows over `n_fft / 2 + 1` frequency bins.
    pub fn mel_filterbank(&self) -> Vec<Vec<f64>> {
        let n_bins = self.n_fft / 2 + 1;
        let nyquist = self.sample_rate as f64 / 2.0;
        let (lo, hi) = (self.mel_scale.hz_to_mel(0.0), self.mel_scale.hz_to_mel(nyquist));
        let edges: Vec<f64> = (0..self.n_mels + 2)
            .map(|i| self.mel_scale.mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * self.sample_rate as f64 / self.n_fft as f64;
        (0..self.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = bin_hz(k);
                        let up = (f - left) / (center - left);
                        let down = (right - f) / (right - center);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let (win, hop) = (self.win_len(), self.hop_len());
        if win == 0 || hop == 0 || hop > win {
            bail!(Argument, "window {win} and hop {hop} samples are inconsistent");
        }
        if self.n_fft < win {
            bail!(Argument, "n_fft {} shorter than the window ({win} samples)", self.n_fft);
        }
        if self.n_mels == 0 || self.target_frames == 0 {
            bail!(Argument, "n_mels and target_frames must be positive");
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()).collect()
}

/// Center-crop or zero-pad to exactly `target` samples.
fn fit_length(samples: &[f32], target: usize) -> Vec<f64> {
    if samples.len() >= target {
        let start = (samples.len() - target) / 2;
        samples[start..start + target].iter().map(|&v| v as f64).collect()
    } else {
        let mut out: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
        out.resize(target, 0.0);
        out
    }
}

/// Converts a waveform into a `target_frames x n_mels` log-Mel spectrogram.
pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.samples.is_empty() {
        bail!(Argument, "empty waveform");
    }
    if w.sample_rate != cfg.sample_rate {
        bail!(Argument, "sample rate {} Hz, expected {} Hz (no resampling is performed)", w.sample_rate, cfg.sample_rate);
    }
    let (win, hop) = (cfg.win_len(), cfg.hop_len());
    let fitted = fit_length(&w.samples, cfg.target_samples());
    let left = (win - hop) / 2;
    let mut padded = vec![0.0; left];
    padded.extend_from_slice(&fitted);
    padded.resize(left + fitted.len() + (win - hop - left), 0.0);
    let n_frames = (padded.len() - win) / hop + 1;
    debug_assert_eq!(n_frames, cfg.target_frames);

    let window = hann_window(win);
    let bank = cfg.mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut mags = vec![0.0; n_bins];
    let mut data = Vec::with_capacity(n_frames * cfg.n_mels);
    for t in 0..n_frames {
        let frame = &padded[t * hop..t * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if i < win { frame[i] * window[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (m, b) in mags.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for filter in &bank {
            let energy: f64 = filter.iter().zip(&mags).map(|(w, m)| w * m).sum();
            data.push((energy + cfg.log_floor).ln());
        }
    }
    if cfg.standardize {
        standardize(&mut data);
    }
    Spectrogram::new(n_frames, cfg.n_mels, data)
}

/// Per-instance standardization to zero mean and unit variance; a constant
/// input maps to all zeros.
pub fn standardize(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in data.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
    }
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Input(io.to_string()),
        other => Error::Format(format!("wav: {other}")),
    }
}

/// Loads PCM (8/16/24/32-bit integer or 32-bit float) WAV audio, averaging
/// channels down to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path.as_ref()).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        bail!(Format, "wav declares zero channels");
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<std::result::Result<_, _>>().map_err(wav_err)?
        }
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (fmt, bits) => bail!(Format, "unsupported wav encoding {fmt:?} with {bits} bits"),
    };
    if interleaved.len() % channels != 0 {
        bail!(Format, "wav data is truncated mid-frame");
    }
    let samples = interleaved.chunks(channels).map(|c| c.iter().sum::<f32>() / channels as f32).collect();
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
