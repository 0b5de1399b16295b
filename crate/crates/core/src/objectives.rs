//! Pre-training losses: masked reconstruction, cross-modal InfoNCE summed
//! over selected encoder layers, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::encoders::LayerTrace;
use crate::error::{bail, Result};
use crate::numerics::{Graph, Real, Tape, Tensor, Var};
use crate::tokenizer::VideoClip;

/// Norm floor applied before cosine similarities.
pub const NORM_FLOOR: f64 = 1e-8;

/// Ground truth and masked positions for one sample of one modality.
#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub predicted: Tensor<T>,
    pub target: Tensor<T>,
    pub masked: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLossConfig {
    pub lambda: f64,
    pub temperature: f64,
    /// Encoder layers (1-based) entering the contrastive sum.
    pub layers: Vec<usize>,
}

impl Default for PretrainLossConfig {
    fn default() -> Self {
        Self { lambda: 0.0025, temperature: 0.07, layers: vec![4, 7, 10] }
    }
}

impl PretrainLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            bail!(Config, "lambda must be a finite non-negative number, got {}", self.lambda);
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            bail!(Config, "temperature must be positive, got {}", self.temperature);
        }
        Ok(())
    }
}

/// Loss components of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLossReport {
    pub mae_audio: f64,
    pub mae_video: f64,
    pub mae: f64,
    /// One entry per contrastive layer, in configuration order.
    pub infonce: Vec<f64>,
    pub hcmcl: f64,
    pub total: f64,
}

/// Per-cube appearance values followed by per-cube frame differences.
pub fn video_targets<T: Real>(clip: &VideoClip) -> Tensor<T> {
    let appearance = clip.patchify::<T>();
    let motion = frame_diff_target::<T>(clip);
    let (n, d) = (appearance.rows(), appearance.cols());
    Tensor::from_fn(&[n, 2 * d], |k| {
        let (i, j) = (k / (2 * d), k % (2 * d));
        if j < d {
            appearance.at(i, j)
        } else {
            motion.at(i, j - d)
        }
    })
}

/// `frame1 - frame0` of every cube, laid out like the appearance patches.
pub fn frame_diff_target<T: Real>(clip: &VideoClip) -> Tensor<T> {
    clip.frame_difference()
}

/// Standardizes each target row; offered as an alternative to raw targets.
pub fn normalize_patches<T: Real>(targets: &Tensor<T>) -> Tensor<T> {
    let ones = vec![T::one(); targets.cols()];
    let zeros = vec![T::zero(); targets.cols()];
    targets.layer_norm(&ones, &zeros, T::c(1e-6))
}

/// Mean squared error over the masked rows of `predicted` only.
pub fn masked_mse<T: Real>(g: &Tape<T>, predicted: Var, target: &Tensor<T>, masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        bail!(Argument, "reconstruction loss needs at least one masked token");
    }
    if g.shape(predicted) != target.shape() {
        bail!(Argument, "prediction shape {:?} differs from target {:?}", g.shape(predicted), target.shape());
    }
    let rows = g.gather_rows(predicted, masked);
    let truth = masked.iter().flat_map(|&i| target.row(i).iter().copied()).collect();
    let truth = g.constant(Tensor::new(&[masked.len(), target.cols()], truth)?);
    Ok(g.mean(g.square(g.sub(rows, truth))))
}

/// Returns `(L_MAE, L^a, L^v)`.
pub fn mae_loss<T: Real>(audio: &Reconstruction<T>, video: &Reconstruction<T>) -> Result<(T, T, T)> {
    let tape = Tape::new();
    let one = |r: &Reconstruction<T>| -> Result<T> {
        let p = tape.constant(r.predicted.clone());
        Ok(tape.scalar(masked_mse(&tape, p, &r.target, &r.masked)?))
    };
    let (la, lv) = (one(audio)?, one(video)?);
    Ok((la + lv, la, lv))
}

/// Symmetric InfoNCE over `N` paired rows: the mean of the audio-to-video
/// and video-to-audio cross-entropies of cosine similarities scaled by
/// `1/tau`, with row `i` of each side as the positive of the other.
pub fn infonce_tape<T: Real>(g: &Tape<T>, audio: Var, video: Var, tau: f64) -> Var {
    let n = g.shape(audio)[0];
    let a = g.row_normalize(audio, T::c(NORM_FLOOR));
    let v = g.row_normalize(video, T::c(NORM_FLOOR));
    let sim = g.scale(g.matmul(a, g.transpose(v)), T::c(1.0 / tau));
    let diag: Vec<usize> = (0..n).collect();
    let direction = |s: Var| g.mean(g.select_per_row(g.log_softmax(s), &diag));
    let both = g.add(direction(sim), direction(g.transpose(sim)));
    g.scale(both, T::c(-0.5))
}

/// Tensor-level InfoNCE. Zero-norm rows are rejected.
pub fn infonce<T: Real>(audio: &Tensor<T>, video: &Tensor<T>, tau: f64) -> Result<T> {
    if audio.shape() != video.shape() || audio.shape().len() != 2 || audio.rows() == 0 {
        bail!(Argument, "paired features must share an N x C shape, got {:?} and {:?}", audio.shape(), video.shape());
    }
    for t in [audio, video] {
        for i in 0..t.rows() {
            let norm = t.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm.as_f64() >= NORM_FLOOR) {
                bail!(Numeric, "feature row {i} has norm {norm}, below {NORM_FLOOR}");
            }
        }
    }
    let g = Tape::new();
    let (a, v) = (g.constant(audio.clone()), g.constant(video.clone()));
    Ok(g.scalar(infonce_tape(&g, a, v, tau)))
}

/// Per-sample average over tokens, stacked into `N x C`.
pub fn pool_batch<T: Real>(g: &Tape<T>, tokens: &[Var]) -> Var {
    let pooled: Vec<Var> = tokens.iter().map(|&t| g.mean_rows(t)).collect();
    if pooled.len() == 1 {
        pooled[0]
    } else {
        g.concat_rows(&pooled)
    }
}

/// Sum of InfoNCE over `layers`, pooling each sample's trace entry over its
/// (visible) tokens. Returns the sum and the per-layer terms.
pub fn hcmcl<T: Real>(
    g: &Graph<'_, T>,
    audio: &[LayerTrace],
    video: &[LayerTrace],
    layers: &[usize],
    tau: f64,
) -> Result<(Var, Vec<Var>)> {
    if audio.len() != video.len() || audio.is_empty() {
        bail!(Argument, "contrastive batch needs equal non-empty sides, got {} and {}", audio.len(), video.len());
    }
    let pick = |traces: &[LayerTrace], j: usize| -> Result<Vec<Var>> {
        traces
            .iter()
            .map(|t| match t.layer(j) {
                Some(v) if j > 0 => Ok(v),
                _ => bail!(Config, "contrastive layer {j} is not in the encoder trace"),
            })
            .collect()
    };
    let mut terms = Vec::with_capacity(layers.len());
    for &j in layers {
        let a = pool_batch(g, &pick(audio, j)?);
        let v = pool_batch(g, &pick(video, j)?);
        terms.push(infonce_tape(g, a, v, tau));
    }
    let total = terms.iter().copied().reduce(|x, y| g.add(x, y)).unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())));
    Ok((total, terms))
}

pub fn total_loss<T: Real>(g: &Tape<T>, mae: Var, hcmcl: Var, lambda: f64) -> Var {
    g.add(mae, g.scale(hcmcl, T::c(lambda)))
}

/// `L_MAE + lambda * L_HCMCL` on plain numbers.
pub fn combine(mae: f64, hcmcl: f64, lambda: f64) -> f64 {
    mae + lambda * hcmcl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Coords, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct evaluation of the two cross-entropies with explicit loops.
    fn brute_force_infonce(a: &Tensor<f64>, v: &Tensor<f64>, tau: f64) -> f64 {
        let n = a.rows();
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let ce = |p: &Tensor<f64>, q: &Tensor<f64>| {
            (0..n)
                .map(|i| {
                    let denom: f64 = (0..n).map(|k| (cos(p.row(i), q.row(k)) / tau).exp()).sum();
                    -((cos(p.row(i), q.row(i)) / tau).exp() / denom).ln()
                })
                .sum::<f64>()
                / n as f64
        };
        0.5 * (ce(a, v) + ce(v, a))
    }

    #[test]
    fn infonce_closed_forms() {
        let single = random(&[1, 4], 1);
        assert_eq!(infonce(&single, &random(&[1, 4], 2), 0.07).unwrap(), 0.0);

        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        let loss = infonce(&a, &a, 1.0).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.31326).abs() < 1e-5);
        assert!((brute_force_infonce(&a, &a, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn infonce_matches_brute_force() {
        for seed in 0..5 {
            let (a, v) = (random(&[5, 6], seed), random(&[5, 6], seed + 50));
            let got = infonce(&a, &v, 0.07).unwrap();
            assert!((got - brute_force_infonce(&a, &v, 0.07)).abs() < 1e-9);
        }
    }

    #[test]
    fn infonce_rejects_zero_rows() {
        let a = Tensor::from_f64(&[2, 2], &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(infonce(&a, &a, 0.07), Err(crate::Error::Numeric(_))));
        assert!(infonce(&a, &random(&[3, 2], 0), 0.07).is_err());
    }

    #[test]
    fn infonce_gradients() {
        let point = [random(&[4, 5], 3), random(&[4, 5], 4)];
        let report =
            grad_check(&|t: &Tape<f64>, v: &[Var]| infonce_tape(t, v[0], v[1], 0.5), &point, 1e-5, Coords::All)
                .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn rotation(dim: usize, seed: u64) -> Tensor<f64> {
        // Gram-Schmidt on a random matrix
        let m = random(&[dim, dim], seed);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..dim {
            let mut v = m.row(i).to_vec();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            q.push(v.into_iter().map(|a| a / n).collect());
        }
        Tensor::new(&[dim, dim], q.concat()).unwrap()
    }

    proptest! {
        #[test]
        fn infonce_invariances(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let (a, v) = (random(&[4, 6], seed), random(&[4, 6], seed ^ 0xABC));
            let base = infonce(&a, &v, 0.07).unwrap();
            let scaled = infonce(&a.map(|x| x * 3.7), &v, 0.07).unwrap();
            prop_assert!((base - scaled).abs() < 1e-6);
            let per_row = Tensor::from_fn(&[4, 6], |k| a.data()[k] * (scale + (k / 6) as f64));
            prop_assert!((base - infonce(&per_row, &v, 0.07).unwrap()).abs() < 1e-6);
            let r = rotation(6, seed);
            let rotated = infonce(&a.matmul(&r).unwrap(), &v.matmul(&r).unwrap(), 0.07).unwrap();
            prop_assert!((base - rotated).abs() < 1e-9);
        }

        #[test]
        fn infonce_nonnegative_when_positives_dominate(seed in 0u64..1000) {
            // rows equal up to positive scale: positive similarity is 1,
            // the maximum possible
            let a = random(&[4, 3], seed);
            let v = a.map(|x| 2.0 * x);
            prop_assert!(infonce(&a, &v, 0.07).unwrap() >= 0.0);
        }
    }

    fn recon(predicted: Tensor<f64>, target: Tensor<f64>, masked: Vec<usize>) -> Reconstruction<f64> {
        Reconstruction { predicted, target, masked }
    }

    #[test]
    fn mae_examples() {
        let ta = random(&[8, 256], 1);
        let tv = random(&[4, 3072], 2);
        let a = recon(ta.clone(), ta.clone(), vec![1, 5, 6]);
        let v = recon(tv.clone(), tv.clone(), vec![0, 3]);
        assert_eq!(mae_loss(&a, &v).unwrap(), (0.0, 0.0, 0.0));

        let a = recon(ta.map(|x| x + 1.0), ta.clone(), vec![1, 5, 6]);
        let v = recon(tv.map(|x| x + 1.0), tv.clone(), vec![0, 3]);
        let (l, la, lv) = mae_loss(&a, &v).unwrap();
        assert!((la - 1.0).abs() < 1e-12 && (lv - 1.0).abs() < 1e-12 && (l - 2.0).abs() < 1e-12);

        let empty = recon(ta.clone(), ta.clone(), vec![]);
        assert!(mae_loss(&empty, &v).is_err());
        let wrong = recon(random(&[8, 255], 0), ta, vec![1]);
        assert!(mae_loss(&wrong, &v).is_err());
    }

    proptest! {
        #[test]
        fn mae_ignores_visible_rows(seed in 0u64..500) {
            let target = random(&[10, 16], seed);
            let predicted = random(&[10, 16], seed + 1);
            let masked = vec![0, 2, 3, 7];
            let mut perturbed = predicted.clone();
            for i in [1, 4, 5, 6, 8, 9] {
                for c in 0..16 {
                    perturbed.data_mut()[i * 16 + c] += 1000.0 * (c as f64 - 7.5);
                }
            }
            let a = recon(predicted, target.clone(), masked.clone());
            let b = recon(perturbed, target, masked);
            let (l1, _, _) = mae_loss(&a, &a).unwrap();
            let (l2, _, _) = mae_loss(&b, &b).unwrap();
            prop_assert_eq!(l1.to_bits(), l2.to_bits());
        }
    }

    #[test]
    fn video_target_layout() {
        let mut clip = VideoClip::zeros(4, 16, 16).unwrap();
        for (k, v) in clip.data_mut().iter_mut().enumerate() {
            // frames alternate 0, 1
            *v = ((k / (16 * 16 * 3)) % 2) as f64;
        }
        let t = video_targets::<f64>(&clip);
        assert_eq!(t.shape(), &[2, 3072]);
        assert_eq!(&t.row(0)[..1536], clip.patchify::<f64>().row(0));
        assert!(t.row(1)[1536..].iter().all(|&v| v == 1.0));

        let diff = frame_diff_target::<f64>(&clip);
        let scaled = VideoClip::new(4, 16, 16, clip.data().iter().map(|v| v * 2.5).collect()).unwrap();
        assert_eq!(frame_diff_target::<f64>(&scaled), diff.map(|v| v * 2.5));
    }

    #[test]
    fn normalized_patch_rows() {
        let t = normalize_patches(&random(&[3, 16], 4));
        for i in 0..3 {
            let mean = t.row(i).iter().sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    fn traces(g: &Graph<'_, f64>, depth: usize, batch: usize, seed: u64) -> Vec<LayerTrace> {
        (0..batch)
            .map(|b| LayerTrace {
                input: g.constant(random(&[3, 4], seed + 1000 * b as u64)),
                per_layer: (1..=depth).map(|j| g.constant(random(&[3, 4], seed + 1000 * b as u64 + j as u64))).collect(),
            })
            .collect()
    }

    #[test]
    fn hcmcl_sums_layers() {
        let store = ParamStore::<f64>::new();
        let g = Graph::new(&store);
        let a = traces(&g, 10, 3, 1);
        let v = traces(&g, 10, 3, 2);
        let (total, terms) = hcmcl(&g, &a, &v, &[4, 7, 10], 0.07).unwrap();
        let sum: f64 = terms.iter().map(|&t| g.scalar(t)).sum();
        assert!((g.scalar(total) - sum).abs() < 1e-12);

        // identical per-layer losses: three times the single term
        let (same, _) = hcmcl(&g, &a, &v, &[4, 4, 4], 0.07).unwrap();
        let (one, _) = hcmcl(&g, &a, &v, &[4], 0.07).unwrap();
        assert!((g.scalar(same) - 3.0 * g.scalar(one)).abs() < 1e-12);

        let (none, terms) = hcmcl(&g, &a, &v, &[], 0.07).unwrap();
        assert!(terms.is_empty() && g.scalar(none) == 0.0);
        assert!(matches!(hcmcl(&g, &a, &v, &[11], 0.07), Err(crate::Error::Config(_))));
        assert!(matches!(hcmcl(&g, &a, &v, &[0], 0.07), Err(crate::Error::Config(_))));
    }

    #[test]
    fn hcmcl_ignores_unselected_layers() {
        let store = ParamStore::<f64>::new();
        let g = Graph::new(&store);
        let a = traces(&g, 10, 3, 1);
        let v = traces(&g, 10, 3, 2);
        let (base, _) = hcmcl(&g, &a, &v, &[4, 7, 10], 0.07).unwrap();
        let mut a5 = a.clone();
        for t in &mut a5 {
            t.per_layer[4] = g.constant(random(&[3, 4], 77));
        }
        let (moved, _) = hcmcl(&g, &a5, &v, &[4, 7, 10], 0.07).unwrap();
        assert_eq!(g.scalar(base), g.scalar(moved));
        let mut a4 = a.clone();
        a4[0].per_layer[3] = g.constant(random(&[3, 4], 77));
        let (moved, _) = hcmcl(&g, &a4, &v, &[4, 7, 10], 0.07).unwrap();
        assert_ne!(g.scalar(base), g.scalar(moved));
    }

    #[test]
    fn total_loss_examples() {
        assert!((combine(2.0, 4.0, 0.0025) - 2.01).abs() < 1e-12);
        assert_eq!(combine(2.0, 4.0, 0.0), 2.0);
        assert!(combine(2.0, 4.1, 0.0025) > combine(2.0, 4.0, 0.0025));
        let g = Tape::<f64>::new();
        let l = total_loss(&g, g.constant(Tensor::scalar(2.0)), g.constant(Tensor::scalar(4.0)), 0.0025);
        assert!((g.scalar(l) - 2.01).abs() < 1e-12);
        assert!(PretrainLossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(PretrainLossConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
    }
}
