//! Dataset manifests, media readers, clip sampling and lazy loading.
//!
//! A manifest is a CSV file with header `id,audio,video,label,split`. Paths
//! are relative to the manifest's directory. Audio is a PCM WAV file or a
//! `HSPC` spectrogram dump; video is a packed `HVID` file or a directory of
//! PNG frames sorted by file name.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, log_mel, FrontendConfig, Spectrogram};
use crate::error::{bail, Error, Result};
use crate::finetune::Task;
use crate::model::ModelConfig;
use crate::tokenizer::{VideoClip, CHANNELS};

pub const VIDEO_MAGIC: &[u8; 4] = b"HVID";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub audio: PathBuf,
    pub video: PathBuf,
    pub label: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    /// Reads and validates a manifest: ids are unique (so splits are
    /// disjoint) and every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root)?;
        manifest.check_paths()?;
        Ok(manifest)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Format(format!("manifest: {e}")))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "audio", "video", "label", "split"] {
            bail!(Format, "manifest header must be id,audio,video,label,split, got {}", headers.iter().collect::<Vec<_>>().join(","));
        }
        let mut rows = Vec::new();
        for record in reader.deserialize() {
            let row: ManifestRow = record.map_err(|e| Error::Format(format!("manifest: {e}")))?;
            if row.id.is_empty() {
                bail!(Format, "manifest row {} has an empty id", rows.len() + 1);
            }
            rows.push(row);
        }
        let mut seen = HashSet::new();
        for row in &rows {
            if !seen.insert(row.id.as_str()) {
                bail!(Format, "clip id {:?} appears more than once; splits must be disjoint", row.id);
            }
        }
        Ok(Self { rows, root })
    }

    fn check_paths(&self) -> Result<()> {
        for row in &self.rows {
            for p in [&row.audio, &row.video] {
                let full = self.resolve(p);
                if !full.exists() {
                    bail!(Input, "clip {}: {} does not exist", row.id, full.display());
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("manifest: {e}")))?;
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Row indices of a split, or of every row for `None`.
    pub fn indices(&self, split: Option<&str>) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| split.is_none_or(|s| self.rows[i].split == s)).collect()
    }

    /// Class names in index order. Integer labels map to themselves;
    /// anything else is sorted by name.
    pub fn class_names(&self) -> Vec<String> {
        let labels: BTreeSet<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        if labels.iter().all(|l| l.parse::<usize>().is_ok()) {
            let max = labels.iter().map(|l| l.parse::<usize>().unwrap()).max().unwrap_or(0);
            return (0..=max).map(|i| i.to_string()).collect();
        }
        labels.into_iter().map(str::to_string).collect()
    }

    /// Parses every label for `task`: a class (index or name) or
    /// `;`-separated values.
    pub fn targets(&self, task: Task) -> Result<Vec<Target>> {
        match task {
            Task::Classify(k) => {
                let names = self.class_names();
                if names.len() > k {
                    bail!(Input, "manifest has {} classes, model has {k}", names.len());
                }
                let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
                Ok(self.rows.iter().map(|r| Target::Class(index[r.label.as_str()])).collect())
            }
            Task::Regress(d) => self
                .rows
                .iter()
                .map(|r| {
                    let values = r
                        .label
                        .split(';')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Input(format!("clip {}: label {:?}: {e}", r.id, r.label)))?;
                    if values.len() != d || values.iter().any(|v| !v.is_finite()) {
                        bail!(Input, "clip {}: expected {d} finite values, got {:?}", r.id, r.label);
                    }
                    Ok(Target::Values(values))
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

/// Decoded video of any length, `T x H x W x 3` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frames {
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width * CHANNELS;
        &self.data[t * n..(t + 1) * n]
    }
}

/// Writes a packed video: magic, u32 T, H, W, channels, then f32 values.
pub fn write_hvid(mut out: impl Write, frames: &Frames) -> Result<()> {
    out.write_all(VIDEO_MAGIC)?;
    for v in [frames.count, frames.height, frames.width, CHANNELS] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for &v in &frames.data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a packed video; one channel is replicated to three.
pub fn read_hvid(bytes: &[u8]) -> Result<Frames> {
    if bytes.len() < 20 || &bytes[..4] != VIDEO_MAGIC {
        bail!(Format, "not a packed video file");
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (count, height, width, ch) = (word(4), word(8), word(12), word(16));
    if count == 0 || height == 0 || width == 0 {
        bail!(Format, "packed video has an empty extent {count}x{height}x{width}");
    }
    if ch != 1 && ch != 3 {
        bail!(Format, "packed video has {ch} channels, expected 1 or 3");
    }
    let body = &bytes[20..];
    let expected = count.checked_mul(height * width * ch * 4).unwrap_or(usize::MAX);
    if body.len() != expected {
        bail!(Format, "packed video body has {} bytes, expected {expected}", body.len());
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let data = if ch == 3 { values.collect() } else { values.flat_map(|v| [v; 3]).collect() };
    Ok(Frames { count, height, width, data })
}

fn read_png_dir(dir: &Path) -> Result<Frames> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Input, "{} holds no PNG frames", dir.display());
    }
    let mut data = Vec::new();
    let (mut height, mut width) = (0, 0);
    for (i, f) in files.iter().enumerate() {
        let img = image::open(f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?.to_rgb8();
        if i == 0 {
            (width, height) = (img.width() as usize, img.height() as usize);
        } else if (img.width() as usize, img.height() as usize) != (width, height) {
            bail!(Format, "{}: frame size differs from the first frame", f.display());
        }
        data.extend(img.as_raw().iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Frames { count: files.len(), height, width, data })
}

/// Reads a frame directory or a packed video file.
pub fn read_video(path: &Path) -> Result<Frames> {
    if path.is_dir() {
        return read_png_dir(path);
    }
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    read_hvid(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads WAV audio through the front end, or a spectrogram dump as is.
pub fn read_audio(path: &Path, front: &FrontendConfig) -> Result<Spectrogram> {
    let is_wav = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"));
    if is_wav {
        return log_mel(&load_wav(path)?, front);
    }
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Spectrogram::read_dump(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Frame indices of a clip of `frames` frames at `stride`, starting at
/// `start`; indices past the end repeat the last frame.
pub fn clip_indices(total: usize, frames: usize, stride: usize, start: usize) -> Vec<usize> {
    (0..frames).map(|i| (start + i * stride).min(total - 1)).collect()
}

/// Frames covered by one clip.
pub fn clip_span(frames: usize, stride: usize) -> usize {
    (frames - 1) * stride + 1
}

/// Uniform training start in `[0, total - span]`.
pub fn train_start(total: usize, span: usize, seed: u64) -> usize {
    let room = total.saturating_sub(span);
    if room == 0 {
        0
    } else {
        (crate::masking::sample_seed(seed, 0, 0, 0) % (room as u64 + 1)) as usize
    }
}

/// Starts of the two inference clips, centred in the two halves of the
/// available range. A video too short for two distinct clips yields the
/// same clip twice.
pub fn inference_starts(total: usize, span: usize) -> [usize; 2] {
    let room = total.saturating_sub(span);
    [room / 4, (3 * room) / 4]
}

/// Which clip of a video to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipChoice {
    /// Random start drawn from the seed.
    Train(u64),
    /// One of the two fixed inference clips.
    Inference(usize),
}

/// Lazily loads and caches decoded clips of a manifest.
pub struct Dataset {
    pub manifest: Manifest,
    front: FrontendConfig,
    frames: usize,
    height: usize,
    width: usize,
    stride: usize,
    mean: [f64; 3],
    std: [f64; 3],
    cache: RefCell<HashMap<usize, Rc<(Spectrogram, Frames)>>>,
}

impl Dataset {
    pub fn new(manifest: Manifest, model: &ModelConfig, stride: usize, mean: [f64; 3], std: [f64; 3]) -> Self {
        let front = FrontendConfig { n_mels: model.audio_bins, target_frames: model.audio_frames, ..FrontendConfig::default() };
        Self {
            manifest,
            front,
            frames: model.video_frames,
            height: model.video_height,
            width: model.video_width,
            stride,
            mean,
            std,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.manifest.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.rows.is_empty()
    }

    pub fn frontend(&self) -> &FrontendConfig {
        &self.front
    }

    fn decoded(&self, index: usize) -> Result<Rc<(Spectrogram, Frames)>> {
        if let Some(hit) = self.cache.borrow().get(&index) {
            return Ok(hit.clone());
        }
        let Some(row) = self.manifest.rows.get(index) else {
            bail!(Argument, "clip index {index} out of range");
        };
        let spec = read_audio(&self.manifest.resolve(&row.audio), &self.front)?;
        if (spec.frames(), spec.bins()) != (self.front.target_frames, self.front.n_mels) {
            bail!(Input, "clip {}: spectrogram is {}x{}, expected {}x{}", row.id, spec.frames(), spec.bins(), self.front.target_frames, self.front.n_mels);
        }
        let video = read_video(&self.manifest.resolve(&row.video))?;
        if (video.height, video.width) != (self.height, self.width) {
            bail!(Input, "clip {}: frames are {}x{}, model expects {}x{}", row.id, video.height, video.width, self.height, self.width);
        }
        let entry = Rc::new((spec, video));
        self.cache.borrow_mut().insert(index, entry.clone());
        Ok(entry)
    }

    /// Spectrogram and standardized clip of row `index`. The spectrogram is
    /// the centred audio window whichever clip is chosen.
    pub fn load(&self, index: usize, choice: ClipChoice) -> Result<(Spectrogram, VideoClip)> {
        let entry = self.decoded(index)?;
        let (spec, video) = (&entry.0, &entry.1);
        let span = clip_span(self.frames, self.stride);
        let start = match choice {
            ClipChoice::Train(seed) => train_start(video.count, span, seed),
            ClipChoice::Inference(i) => inference_starts(video.count, span)[i.min(1)],
        };
        let mut data = Vec::with_capacity(self.frames * self.height * self.width * CHANNELS);
        for t in clip_indices(video.count, self.frames, self.stride, start) {
            data.extend_from_slice(video.frame(t));
        }
        let clip = VideoClip::new(self.frames, self.height, self.width, data)?.standardized(self.mean, self.std);
        Ok((spec.clone(), clip))
    }
}

/// Counts data failures and aborts once more than `max` occurred.
#[derive(Clone, Debug)]
pub struct FailureBudget {
    pub max: usize,
    pub count: usize,
}

impl FailureBudget {
    pub fn new(max: usize) -> Self {
        Self { max, count: 0 }
    }

    /// Logs a skipped sample; fails once the budget is exhausted.
    pub fn record(&mut self, id: &str, err: &Error) -> Result<()> {
        self.count += 1;
        log::warn!("skipping clip {id}: {err}");
        if self.count > self.max {
            bail!(Input, "aborting after {} data failures (last: clip {id}: {err})", self.count);
        }
        Ok(())
    }
}
