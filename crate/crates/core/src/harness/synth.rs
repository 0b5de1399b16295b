//! Synthetic paired audio-visual clips with a shared latent class.
//!
//! Video: a Gaussian blob drifting across a noisy background in a
//! class-dependent direction. Audio: a class-dependent tone in noise whose
//! amplitude modulation rate follows the blob's speed, so the two streams
//! share both the class and a per-clip latent.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{write_wav, Waveform};
use crate::error::{bail, Result};
use crate::masking::sample_seed;
use crate::tokenizer::CHANNELS;

use super::data::{write_hvid, Frames, Manifest, ManifestRow};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub clips: usize,
    pub classes: usize,
    pub seed: u64,
    /// Raw video length; must cover a sampled clip for distinct crops.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sample_rate: u32,
    pub fps: f64,
    /// Every `test_every`-th round of classes goes to the test split; 0
    /// keeps everything in train.
    pub test_every: usize,
}

impl SynthConfig {
    pub fn new(clips: usize, classes: usize, seed: u64) -> Self {
        Self { clips, classes, seed, frames: 64, height: 32, width: 32, sample_rate: 16_000, fps: 25.0, test_every: 4 }
    }

    pub fn class_of(&self, clip: usize) -> usize {
        clip % self.classes
    }

    pub fn split_of(&self, clip: usize) -> &'static str {
        if self.test_every > 0 && (clip / self.classes) % self.test_every == self.test_every - 1 {
            "test"
        } else {
            "train"
        }
    }

    /// Tone frequency of a class.
    pub fn tone_hz(&self, class: usize) -> f64 {
        300.0 + 5000.0 * class as f64 / self.classes as f64
    }
}

fn render_video(cfg: &SynthConfig, class: usize, speed: f64, rng: &mut ChaCha8Rng) -> Frames {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let angle = 2.0 * PI * class as f64 / cfg.classes as f64;
    let (dx, dy) = (angle.cos() * speed, angle.sin() * speed);
    let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let sigma2 = 2.0 * 2.5f64.powi(2);
    let mut data = Vec::with_capacity(cfg.frames * cfg.height * cfg.width * CHANNELS);
    for t in 0..cfg.frames {
        let (cx, cy) = ((x0 + dx * t as f64).rem_euclid(w), (y0 + dy * t as f64).rem_euclid(h));
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                // toroidal distance so the blob wraps at the borders
                let ddx = ((x as f64 - cx).abs()).min(w - (x as f64 - cx).abs());
                let ddy = ((y as f64 - cy).abs()).min(h - (y as f64 - cy).abs());
                let blob = 0.7 * (-(ddx * ddx + ddy * ddy) / sigma2).exp();
                for _ in 0..CHANNELS {
                    data.push((0.15 + blob + noise.sample(rng)).clamp(0.0, 1.0));
                }
            }
        }
    }
    Frames { count: cfg.frames, height: cfg.height, width: cfg.width, data }
}

fn render_audio(cfg: &SynthConfig, class: usize, speed: f64, rng: &mut ChaCha8Rng) -> Waveform {
    let rate = cfg.sample_rate as f64;
    let n = (cfg.frames as f64 / cfg.fps * rate).round() as usize;
    let (tone, am) = (cfg.tone_hz(class), 2.0 * speed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let env = 0.4 * (1.0 + 0.5 * (2.0 * PI * am * t).sin());
            (env * (2.0 * PI * tone * t + phase).sin() + noise.sample(rng)) as f32
        })
        .collect();
    Waveform::new(samples, cfg.sample_rate)
}

/// Writes `clips` WAV and packed-video pairs plus `manifest.csv` into `dir`
/// and returns the manifest. Labels cycle through the classes, so class
/// counts differ by at most one.
pub fn synth_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Manifest> {
    let dir = dir.as_ref();
    if cfg.classes == 0 || cfg.clips < cfg.classes {
        bail!(Argument, "need at least one class and one clip per class, got {} clips for {} classes", cfg.clips, cfg.classes);
    }
    if cfg.frames == 0 || cfg.height == 0 || cfg.width == 0 || cfg.sample_rate == 0 || !(cfg.fps > 0.0) {
        bail!(Argument, "synthetic clip geometry must be positive");
    }
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let class = cfg.class_of(i);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 0, i as u64, 0));
        let speed = rng.random_range(0.5..1.5);
        let id = format!("clip{i:04}");
        let (audio, video) = (PathBuf::from(format!("{id}.wav")), PathBuf::from(format!("{id}.hvid")));
        let frames = render_video(cfg, class, speed, &mut rng);
        let wave = render_audio(cfg, class, speed, &mut rng);
        let mut bytes = Vec::new();
        write_hvid(&mut bytes, &frames)?;
        fs::write(dir.join(&video), bytes)?;
        write_wav(dir.join(&audio), &wave)?;
        rows.push(ManifestRow { id, audio, video, label: class.to_string(), split: cfg.split_of(i).to_string() });
    }
    let manifest = Manifest { rows, root: dir.to_path_buf() };
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{load_wav, log_mel, FrontendConfig};
    use crate::harness::data::read_video;

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig::new(8, 2, 7);
        synth_dataset(a.path(), &cfg).unwrap();
        synth_dataset(b.path(), &cfg).unwrap();
        let (fa, fb) = (files(a.path()), files(b.path()));
        assert_eq!(fa.len(), 17);
        assert_eq!(fa, fb);

        let c = tempfile::tempdir().unwrap();
        synth_dataset(c.path(), &SynthConfig::new(8, 2, 8)).unwrap();
        assert_ne!(files(c.path()), fa);
    }

    #[test]
    fn labels_balanced_and_splits_disjoint() {
        for (n, k) in [(9, 2), (10, 3), (7, 7), (25, 4)] {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = SynthConfig::new(n, k, 1);
            cfg.frames = 4;
            let m = synth_dataset(dir.path(), &cfg).unwrap();
            let mut counts = vec![0usize; k];
            for r in &m.rows {
                counts[r.label.parse::<usize>().unwrap()] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
            let loaded = Manifest::load(dir.path().join("manifest.csv")).unwrap();
            assert_eq!(loaded.rows, m.rows);
        }
        assert!(synth_dataset(tempfile::tempdir().unwrap().path(), &SynthConfig::new(1, 2, 0)).is_err());
    }

    #[test]
    fn eight_by_two_split_layout() {
        let cfg = SynthConfig::new(8, 2, 7);
        let splits: Vec<_> = (0..8).map(|i| cfg.split_of(i)).collect();
        assert_eq!(splits, ["train", "train", "train", "train", "train", "train", "test", "test"]);
    }

    #[test]
    fn class_mean_spectrograms_separate() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(12, 2, 3);
        cfg.frames = 8;
        let m = synth_dataset(dir.path(), &cfg).unwrap();
        let front = FrontendConfig { n_mels: 32, target_frames: 64, ..FrontendConfig::default() };
        let specs: Vec<(usize, Vec<f64>)> = m
            .rows
            .iter()
            .map(|r| {
                let s = log_mel(&load_wav(m.resolve(&r.audio)).unwrap(), &front).unwrap();
                (r.label.parse().unwrap(), s.data().to_vec())
            })
            .collect();
        let len = specs[0].1.len();
        let stats = |class: usize| {
            let members: Vec<&Vec<f64>> = specs.iter().filter(|s| s.0 == class).map(|s| &s.1).collect();
            let n = members.len() as f64;
            let mean: Vec<f64> = (0..len).map(|j| members.iter().map(|v| v[j]).sum::<f64>() / n).collect();
            let var = (0..len).map(|j| members.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / n).sum::<f64>() / len as f64;
            (mean, var.sqrt() / n.sqrt())
        };
        let ((m0, e0), (m1, e1)) = (stats(0), stats(1));
        let gap = (m0.iter().zip(&m1).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / len as f64).sqrt();
        let floor = (e0 * e0 + e1 * e1).sqrt();
        assert!(gap > 5.0 * floor, "gap {gap} vs noise floor {floor}");
    }

    #[test]
    fn blob_moves_in_class_direction() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(2, 2, 5);
        cfg.frames = 2;
        let m = synth_dataset(dir.path(), &cfg).unwrap();
        // Centre of mass shift along x between the two frames: class 0
        // moves right, class 1 left (modulo wrap, which is ignored by
        // picking the brightest column).
        let brightest_col = |f: &Frames, t: usize| {
            let col = |x: usize| (0..f.height).map(|y| f.frame(t)[(y * f.width + x) * 3]).sum::<f64>();
            (0..f.width).max_by(|&a, &b| col(a).total_cmp(&col(b))).unwrap() as i64
        };
        for (row, sign) in m.rows.iter().zip([1i64, -1]) {
            let f = read_video(&m.resolve(&row.video)).unwrap();
            let shift = (brightest_col(&f, 1) - brightest_col(&f, 0) + 48).rem_euclid(32) - 16;
            assert!(shift * sign >= 0, "clip {} shift {shift}", row.id);
        }
    }
}
