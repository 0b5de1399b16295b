//! Deterministic token masking: tube masking for video, random masking for
//! audio. The masked count is `floor(ratio * N)` (per temporal slice for
//! tubes).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{Real, Tensor};
use crate::tokenizer::{Grid, TokenGrid};

/// Visible/masked partition of one token grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
    pub grid: Grid,
}

impl MaskPlan {
    /// A plan that keeps every token visible.
    pub fn unmasked(grid: Grid) -> Self {
        Self { visible: (0..grid.len()).collect(), masked: Vec::new(), ratio: 0.0, seed: 0, grid }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// `true` at masked positions.
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.len()];
        for &i in &self.masked {
            flags[i] = true;
        }
        flags
    }

    /// For the concatenation `[visible..., masked...]`, the row that lands at
    /// each original position.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.len()];
        for (row, &pos) in self.visible.iter().chain(&self.masked).enumerate() {
            order[pos] = row;
        }
        order
    }

    fn from_masked(mut masked: Vec<usize>, ratio: f64, seed: u64, grid: Grid) -> Self {
        masked.sort_unstable();
        let flags = {
            let mut f = vec![false; grid.len()];
            masked.iter().for_each(|&i| f[i] = true);
            f
        };
        let visible = (0..grid.len()).filter(|&i| !flags[i]).collect();
        Self { visible, masked, ratio, seed, grid }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        bail!(Argument, "masking ratio must lie in [0, 1), got {ratio}");
    }
    Ok(())
}

/// `floor(ratio * n)` guarded against representation error just below an
/// integer.
fn masked_count(ratio: f64, n: usize) -> usize {
    let raw = ratio * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.floor() as usize
    }
}

/// One spatial pattern of `floor(ratio * S)` cells, replicated across every
/// temporal slice.
pub fn tube_mask(grid: Grid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let Grid::Video { t, h, w } = grid else {
        bail!(Argument, "tube masking needs a video grid, got {grid:?}");
    };
    let spatial = h * w;
    let k = masked_count(ratio, spatial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = sample(&mut rng, spatial, k).into_vec();
    let masked = (0..t).flat_map(|slice| cells.iter().map(move |&c| slice * spatial + c)).collect();
    Ok(MaskPlan::from_masked(masked, ratio, seed, grid))
}

/// `floor(ratio * N)` tokens sampled uniformly without replacement.
pub fn random_mask(grid: Grid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let n = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = sample(&mut rng, n, masked_count(ratio, n)).into_vec();
    Ok(MaskPlan::from_masked(masked, ratio, seed, grid))
}

/// Tube masking for video grids, random masking for audio grids.
pub fn plan_for(grid: Grid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    match grid {
        Grid::Video { .. } => tube_mask(grid, ratio, seed),
        Grid::Audio { .. } => random_mask(grid, ratio, seed),
    }
}

/// Rows at `plan.visible`, in ascending index order.
pub fn gather_visible<T: Real>(tokens: &TokenGrid<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
    if tokens.grid != plan.grid {
        bail!(Argument, "mask plan grid {:?} does not match tokens {:?}", plan.grid, tokens.grid);
    }
    let c = tokens.width();
    let mut out = Vec::with_capacity(plan.visible.len() * c);
    for &i in &plan.visible {
        out.extend_from_slice(tokens.tokens.row(i));
    }
    Tensor::new(&[plan.visible.len(), c], out)
}

/// Inverse of [`gather_visible`]: visible rows back at their positions,
/// `fill` everywhere else.
pub fn scatter_visible<T: Real>(visible: &Tensor<T>, plan: &MaskPlan, fill: &[T]) -> Result<Tensor<T>> {
    let c = visible.cols();
    if visible.rows() != plan.visible.len() || fill.len() != c {
        bail!(Argument, "scatter needs {} rows of width {}, got {:?}", plan.visible.len(), fill.len(), visible.shape());
    }
    let mut out: Vec<T> = fill.iter().copied().cycle().take(plan.len() * c).collect();
    for (row, &pos) in plan.visible.iter().enumerate() {
        out[pos * c..(pos + 1) * c].copy_from_slice(visible.row(row));
    }
    Tensor::new(&[plan.len(), c], out)
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed from `(global_seed, epoch, sample_index, stream)`. Each
/// component passes through splitmix64 in turn, so the result depends only
/// on the sample's identity and not on where it falls in the data order.
pub fn sample_seed(global: u64, epoch: u64, sample: u64, stream: u64) -> u64 {
    mix64(mix64(mix64(mix64(global) ^ epoch) ^ sample) ^ stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const VIDEO: Grid = Grid::Video { t: 8, h: 10, w: 10 };
    const AUDIO: Grid = Grid::Audio { t: 16, f: 8 };

    fn partition_ok(p: &MaskPlan) -> bool {
        let mut all: Vec<usize> = p.visible.iter().chain(&p.masked).copied().collect();
        all.sort_unstable();
        all == (0..p.len()).collect::<Vec<_>>()
            && p.visible.windows(2).all(|w| w[0] < w[1])
            && p.masked.windows(2).all(|w| w[0] < w[1])
    }

    #[test]
    fn default_video_plan() {
        let p = tube_mask(VIDEO, 0.9, 1).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (720, 80));
        let first: Vec<usize> = p.masked.iter().filter(|&&i| i < 100).copied().collect();
        assert_eq!(first.len(), 90);
        for slice in 0..8 {
            let cells: Vec<usize> =
                p.masked.iter().filter(|&&i| i / 100 == slice).map(|&i| i % 100).collect();
            assert_eq!(cells, first);
        }
        assert_eq!(tube_mask(VIDEO, 0.0, 1).unwrap().visible.len(), 800);
    }

    #[test]
    fn default_audio_plan() {
        let p = random_mask(AUDIO, 0.8, 3).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (102, 26));
        assert!(random_mask(AUDIO, 0.0, 3).unwrap().masked.is_empty());
    }

    #[test]
    fn ratio_bounds() {
        for r in [-0.1, 1.0, 1.5, f64::NAN] {
            assert!(random_mask(AUDIO, r, 0).is_err());
            assert!(tube_mask(VIDEO, r, 0).is_err());
        }
        assert!(tube_mask(AUDIO, 0.5, 0).is_err());
    }

    #[test]
    fn seeds_control_plans() {
        assert_eq!(tube_mask(VIDEO, 0.9, 42).unwrap(), tube_mask(VIDEO, 0.9, 42).unwrap());
        let base = random_mask(AUDIO, 0.8, 0).unwrap();
        assert!((1..10).any(|s| random_mask(AUDIO, 0.8, s).unwrap().masked != base.masked));
    }

    #[test]
    fn random_mask_is_uniform() {
        // Without-replacement sampling masks each index with probability
        // floor(0.8 * 128) / 128 = 102 / 128 = 0.797.
        let mut counts = vec![0usize; 128];
        let trials = 10_000;
        for s in 0..trials {
            for i in random_mask(AUDIO, 0.8, s).unwrap().masked {
                counts[i] += 1;
            }
        }
        let expected = 102.0 / 128.0;
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - expected).abs() < 0.02, "index {i}: {freq}");
        }
    }

    #[test]
    fn gather_and_scatter() {
        let tokens = TokenGrid::new(Tensor::<f64>::from_fn(&[128, 3], |i| i as f64), AUDIO).unwrap();
        let p = random_mask(AUDIO, 0.8, 9).unwrap();
        let vis = gather_visible(&tokens, &p).unwrap();
        assert_eq!(vis.shape(), &[26, 3]);
        let back = scatter_visible(&vis, &p, &[-1.0; 3]).unwrap();
        for i in 0..128 {
            if p.visible.contains(&i) {
                assert_eq!(back.row(i), tokens.tokens.row(i));
            } else {
                assert_eq!(back.row(i), &[-1.0; 3]);
            }
        }
        let identity = gather_visible(&tokens, &random_mask(AUDIO, 0.0, 0).unwrap()).unwrap();
        assert_eq!(identity, tokens.tokens);
        assert!(gather_visible(&tokens, &tube_mask(VIDEO, 0.9, 0).unwrap()).is_err());

        let video = TokenGrid::new(Tensor::<f64>::zeros(&[800, 2]), VIDEO).unwrap();
        assert_eq!(gather_visible(&video, &tube_mask(VIDEO, 0.9, 0).unwrap()).unwrap().rows(), 80);
    }

    #[test]
    fn restore_order_inverts_concatenation() {
        let p = random_mask(AUDIO, 0.8, 5).unwrap();
        let order = p.restore_order();
        let concat: Vec<usize> = p.visible.iter().chain(&p.masked).copied().collect();
        for (pos, &row) in order.iter().enumerate() {
            assert_eq!(concat[row], pos);
        }
    }

    #[test]
    fn sample_seed_mixes_every_component() {
        let base = sample_seed(1, 2, 3, 0);
        assert_ne!(base, sample_seed(1, 2, 4, 0));
        assert_ne!(base, sample_seed(1, 3, 3, 0));
        assert_ne!(base, sample_seed(2, 2, 3, 0));
        assert_ne!(base, sample_seed(1, 2, 3, 1));
        assert_eq!(base, sample_seed(1, 2, 3, 0));
    }

    proptest! {
        #[test]
        fn partition_and_cardinality(t in 1usize..6, h in 1usize..6, w in 1usize..6, ratio in 0.0f64..0.99, seed: u64) {
            let grid = Grid::Video { t, h, w };
            let p = tube_mask(grid, ratio, seed).unwrap();
            prop_assert!(partition_ok(&p));
            prop_assert_eq!(p.masked.len(), t * masked_count(ratio, h * w));
            let s = h * w;
            let first: Vec<usize> = p.masked.iter().filter(|&&i| i < s).copied().collect();
            for slice in 0..t {
                let cells: Vec<usize> = p.masked.iter().filter(|&&i| i / s == slice).map(|&i| i % s).collect();
                prop_assert_eq!(&cells, &first);
            }

            let a = Grid::Audio { t, f: h };
            let p = random_mask(a, ratio, seed).unwrap();
            prop_assert!(partition_ok(&p));
            prop_assert_eq!(p.masked.len(), (ratio * (t * h) as f64 + 1e-9).floor() as usize);
        }
    }
}
