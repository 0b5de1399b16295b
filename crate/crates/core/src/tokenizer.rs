//! Video cube and spectrogram patch tokenizers plus fixed sinusoidal
//! positions.
//!
//! Token order is time-major, then row, then column. A video token covers a
//! `2 x 16 x 16 x 3` cube whose values are laid out `(dt, y, x, channel)`;
//! an audio token covers a `16 x 16` (time, frequency) patch in row-major
//! order.

use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{bail, Result};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

pub const PATCH: usize = 16;
pub const TUBELET: usize = 2;
pub const CHANNELS: usize = 3;
/// Values per video cube, `2 * 16 * 16 * 3`.
pub const CUBE_DIM: usize = TUBELET * PATCH * PATCH * CHANNELS;
/// Values per audio patch, `16 * 16`.
pub const AUDIO_PATCH_DIM: usize = PATCH * PATCH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "audio" | "a" => Ok(Modality::Audio),
            "video" | "v" => Ok(Modality::Video),
            _ => bail!(Argument, "unknown modality {s:?}"),
        }
    }
}

/// Token grid geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grid {
    /// `(T_v / 2, H / 16, W / 16)`
    Video { t: usize, h: usize, w: usize },
    /// `(T_a / 16, F / 16)`
    Audio { t: usize, f: usize },
}

impl Grid {
    pub fn len(&self) -> usize {
        match *self {
            Grid::Video { t, h, w } => t * h * w,
            Grid::Audio { t, f } => t * f,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self) -> Modality {
        match self {
            Grid::Video { .. } => Modality::Video,
            Grid::Audio { .. } => Modality::Audio,
        }
    }

    pub fn video(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || frames % TUBELET != 0 || height == 0 || height % PATCH != 0 || width == 0 || width % PATCH != 0 {
            bail!(Argument, "video {frames}x{height}x{width} is not divisible into 2x16x16 cubes");
        }
        Ok(Grid::Video { t: frames / TUBELET, h: height / PATCH, w: width / PATCH })
    }

    pub fn audio(frames: usize, bins: usize) -> Result<Self> {
        if frames == 0 || frames % PATCH != 0 || bins == 0 || bins % PATCH != 0 {
            bail!(Argument, "spectrogram {frames}x{bins} is not divisible into 16x16 patches");
        }
        Ok(Grid::Audio { t: frames / PATCH, f: bins / PATCH })
    }
}

/// `T x H x W x 3` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Grid::video(frames, height, width)?;
        if data.len() != frames * height * width * CHANNELS {
            bail!(Argument, "clip {frames}x{height}x{width}x3 cannot hold {} values", data.len());
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(frames, height, width, vec![0.0; frames * height * width * CHANNELS])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grid(&self) -> Grid {
        Grid::Video { t: self.frames / TUBELET, h: self.height / PATCH, w: self.width / PATCH }
    }

    fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * CHANNELS + c
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(t, y, x, c)]
    }

    /// Per-channel `(x - mean) / std`.
    pub fn standardized(&self, mean: [f64; 3], std: [f64; 3]) -> Self {
        let data = self.data.iter().enumerate().map(|(i, &v)| (v - mean[i % 3]) / std[i % 3]).collect();
        Self { data, ..*self }
    }

    /// Cube values, one row of `CUBE_DIM` per token.
    pub fn patchify<T: Real>(&self) -> Tensor<T> {
        self.patchify_with(|clip, t, y, x, c| clip.at(t, y, x, c))
    }

    /// Per-cube motion: the difference frame `frame1 - frame0`, written into
    /// both temporal slots so that it shares the appearance layout.
    pub fn frame_difference<T: Real>(&self) -> Tensor<T> {
        self.patchify_with(|clip, t, y, x, c| {
            let t0 = t - t % TUBELET;
            clip.at(t0 + 1, y, x, c) - clip.at(t0, y, x, c)
        })
    }

    fn patchify_with<T: Real>(&self, value: impl Fn(&Self, usize, usize, usize, usize) -> f64) -> Tensor<T> {
        let Grid::Video { t: gt, h: gh, w: gw } = self.grid() else { unreachable!() };
        let mut out = Vec::with_capacity(gt * gh * gw * CUBE_DIM);
        for ct in 0..gt {
            for cy in 0..gh {
                for cx in 0..gw {
                    for dt in 0..TUBELET {
                        for y in 0..PATCH {
                            for x in 0..PATCH {
                                for c in 0..CHANNELS {
                                    let v =
                                        value(self, ct * TUBELET + dt, cy * PATCH + y, cx * PATCH + x, c);
                                    out.push(T::c(v));
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![gt * gh * gw, CUBE_DIM], out)
    }
}

/// Patch values of a spectrogram, one row of `AUDIO_PATCH_DIM` per token.
pub fn patchify_spectrogram<T: Real>(spec: &Spectrogram) -> Result<Tensor<T>> {
    let Grid::Audio { t: gt, f: gf } = Grid::audio(spec.frames(), spec.bins())? else { unreachable!() };
    let mut out = Vec::with_capacity(gt * gf * AUDIO_PATCH_DIM);
    for pt in 0..gt {
        for pf in 0..gf {
            for t in 0..PATCH {
                for f in 0..PATCH {
                    out.push(T::c(spec.at(pt * PATCH + t, pf * PATCH + f)));
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gt * gf, AUDIO_PATCH_DIM], out))
}

/// Embedded tokens (`N x C`) with their grid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Tensor<T>,
    pub grid: Grid,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(tokens: Tensor<T>, grid: Grid) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != grid.len() {
            bail!(Argument, "token matrix {:?} does not match grid {grid:?} ({} tokens)", tokens.shape(), grid.len());
        }
        Ok(Self { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn modality(&self) -> Modality {
        self.grid.modality()
    }
}

/// Fixed sinusoidal table: `pe[p, 2i] = sin(p / 10000^(2i/C))`,
/// `pe[p, 2i+1] = cos(p / 10000^(2i/C))`.
pub fn sinusoid_table<T: Real>(positions: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(&[positions, width], |k| {
        let (p, j) = (k / width, k % width);
        let angle = p as f64 / 10000f64.powf((2 * (j / 2)) as f64 / width as f64);
        T::c(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Adds the fixed positional table indexed by flattened grid position.
pub fn add_positional<T: Real>(grid: &TokenGrid<T>) -> TokenGrid<T> {
    let table = sinusoid_table::<T>(grid.len(), grid.width());
    TokenGrid { tokens: grid.tokens.zip_map(&table, |a, b| a + b), grid: grid.grid }
}

/// Learnable linear map from raw patch values to `C`-wide tokens.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub modality: Modality,
    pub weight: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl PatchEmbedding {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, modality: Modality, width: usize) -> Self {
        let input = match modality {
            Modality::Audio => AUDIO_PATCH_DIM,
            Modality::Video => CUBE_DIM,
        };
        Self {
            modality,
            weight: store.declare(format!("{prefix}.weight"), &[input, width], Init::Xavier),
            bias: store.declare(format!("{prefix}.bias"), &[width], Init::Zeros),
            width,
        }
    }

    /// Embeds patch rows already on the tape.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, patches: Var) -> Var {
        g.linear(patches, g.param(self.weight), g.param(self.bias))
    }

    fn embed<T: Real>(&self, store: &ParamStore<T>, patches: Tensor<T>, grid: Grid) -> Result<TokenGrid<T>> {
        let g = Graph::new(store);
        let x = g.constant(patches);
        let out = self.forward(&g, x);
        let tokens = g.value(out).clone();
        TokenGrid::new(tokens, grid)
    }
}

/// Embeds a clip into `(T/2)(H/16)(W/16)` tokens.
pub fn cube_embed<T: Real>(emb: &PatchEmbedding, store: &ParamStore<T>, clip: &VideoClip) -> Result<TokenGrid<T>> {
    if emb.modality != Modality::Video {
        bail!(Argument, "cube_embed needs a video embedding");
    }
    emb.embed(store, clip.patchify(), clip.grid())
}

/// Embeds a spectrogram into `(T_a/16)(F/16)` tokens.
pub fn patch_embed<T: Real>(emb: &PatchEmbedding, store: &ParamStore<T>, spec: &Spectrogram) -> Result<TokenGrid<T>> {
    if emb.modality != Modality::Audio {
        bail!(Argument, "patch_embed needs an audio embedding");
    }
    let grid = Grid::audio(spec.frames(), spec.bins())?;
    emb.embed(store, patchify_spectrogram(spec)?, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedding(m: Modality, c: usize) -> (PatchEmbedding, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let e = PatchEmbedding::declare(&mut store, "embed", m, c);
        store.initialize(5);
        (e, store)
    }

    #[test]
    fn video_token_counts() {
        assert_eq!(Grid::video(16, 160, 160).unwrap().len(), 800);
        let (e, store) = embedding(Modality::Video, 8);
        let clip = VideoClip::zeros(16, 32, 32).unwrap();
        let g = cube_embed(&e, &store, &clip).unwrap();
        assert_eq!(g.len(), 32);
        assert_eq!(g.grid, Grid::Video { t: 8, h: 2, w: 2 });
        // zero input with zero bias gives zero tokens
        assert!(g.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn audio_token_counts() {
        assert_eq!(Grid::audio(256, 128).unwrap().len(), 128);
        let (e, store) = embedding(Modality::Audio, 8);
        let g = patch_embed(&e, &store, &Spectrogram::zeros(64, 32)).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_divisible_extents_rejected() {
        assert!(VideoClip::zeros(15, 32, 32).is_err());
        assert!(VideoClip::zeros(16, 30, 32).is_err());
        let (e, store) = embedding(Modality::Audio, 4);
        assert!(patch_embed(&e, &store, &Spectrogram::zeros(60, 32)).is_err());
    }

    #[test]
    fn embedding_is_affine() {
        let (e, mut store) = embedding(Modality::Audio, 6);
        store.set(e.bias, Tensor::from_fn(&[6], |i| i as f64 * 0.1 - 0.2)).unwrap();
        let data: Vec<f64> = (0..64 * 32).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.4).collect();
        let spec = Spectrogram::new(64, 32, data.clone()).unwrap();
        let scaled = Spectrogram::new(64, 32, data.iter().map(|v| v * 2.5).collect()).unwrap();
        let a = patch_embed(&e, &store, &spec).unwrap();
        let b = patch_embed(&e, &store, &scaled).unwrap();
        let bias = store.get(e.bias).data().to_vec();
        for i in 0..a.tokens.len() {
            let j = i % 6;
            let expected = 2.5 * (a.tokens.data()[i] - bias[j]) + bias[j];
            assert!((b.tokens.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_layouts() {
        // token index is time-major; values inside a cube are (dt, y, x, c)
        let mut clip = VideoClip::zeros(4, 32, 32).unwrap();
        let i = clip.index(3, 17, 5, 2);
        clip.data_mut()[i] = 1.0;
        let p = clip.patchify::<f64>();
        // slice 1, row 1, col 0 on a 2x2 spatial grid
        let token = 4 + 2;
        let offset = ((1 * PATCH + 1) * PATCH + 5) * CHANNELS + 2;
        assert_eq!(p.at(token, offset), 1.0);
        assert_eq!(p.sum(), 1.0);

        let mut spec = Spectrogram::zeros(32, 32);
        spec.data_mut()[20 * 32 + 3] = 1.0;
        let p = patchify_spectrogram::<f64>(&spec).unwrap();
        assert_eq!(p.at(2, 4 * PATCH + 3), 1.0);
    }

    #[test]
    fn frame_difference_targets() {
        let clip = VideoClip::new(4, 16, 16, (0..4 * 16 * 16 * 3).map(|_| 0.3).collect()).unwrap();
        assert!(clip.frame_difference::<f64>().data().iter().all(|&v| v == 0.0));

        let per_frame = 16 * 16 * 3;
        let alt: Vec<f64> = (0..4 * per_frame).map(|i| ((i / per_frame) % 2) as f64).collect();
        let clip = VideoClip::new(4, 16, 16, alt).unwrap();
        let d = clip.frame_difference::<f64>();
        assert_eq!(d.shape(), &[2, CUBE_DIM]);
        assert!(d.data().iter().all(|&v| v == 1.0));

        let scaled = VideoClip::new(4, 16, 16, clip.data().iter().map(|v| v * -1.5).collect()).unwrap();
        let ds = scaled.frame_difference::<f64>();
        assert!(ds.data().iter().zip(d.data()).all(|(a, b)| *a == -1.5 * b));
    }

    #[test]
    fn positional_table() {
        let t = sinusoid_table::<f64>(10, 8);
        for j in (0..8).step_by(2) {
            assert_eq!(t.at(0, j), 0.0);
            assert_eq!(t.at(0, j + 1), 1.0);
        }
        assert_eq!(t, sinusoid_table::<f64>(10, 8));
        let grid = TokenGrid::new(Tensor::from_fn(&[10, 8], |i| i as f64), Grid::Audio { t: 5, f: 2 }).unwrap();
        let once = add_positional(&grid);
        let twice = add_positional(&once);
        for k in 0..80 {
            let step = once.tokens.data()[k] - grid.tokens.data()[k];
            assert!((twice.tokens.data()[k] - once.tokens.data()[k] - step).abs() < 1e-12);
            assert!((step - t.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn standardization_defaults() {
        let clip = VideoClip::new(2, 16, 16, vec![1.0; 2 * 16 * 16 * 3]).unwrap();
        let s = clip.standardized([0.5; 3], [0.5; 3]);
        assert!(s.data().iter().all(|&v| v == 1.0));
    }
}
