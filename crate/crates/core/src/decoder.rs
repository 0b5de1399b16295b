//! Lightweight per-modality decoders: mask-token padding, fixed positions,
//! cross-attention skips from selected encoder layers, and the linear
//! reconstruction heads.

use serde::{Deserialize, Serialize};

use crate::encoders::{CrossBlock, LayerNorm, LayerTrace, Linear, ModelSize, TransformerLayer};
use crate::error::{bail, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Var};
use crate::tokenizer::{sinusoid_table, Modality, AUDIO_PATCH_DIM, CUBE_DIM};

/// Width of one reconstructed token: audio patches, or video appearance
/// followed by motion.
pub fn target_dim(modality: Modality) -> usize {
    match modality {
        Modality::Audio => AUDIO_PATCH_DIM,
        Modality::Video => 2 * CUBE_DIM,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    /// Depth `N_d`.
    pub depth: usize,
    pub heads: usize,
    /// `(encoder layer, decoder layer)` pairs, both 1-based. Several skips may
    /// target the same decoder layer; they are applied in list order.
    pub skips: Vec<(usize, usize)>,
}

impl DecoderConfig {
    pub fn for_size(size: ModelSize) -> Self {
        let encoder_width = crate::encoders::EncoderConfig::for_size(size).width;
        let width = encoder_width / 2;
        match size {
            ModelSize::Micro => Self { width, depth: 2, heads: 2, skips: vec![(2, 2), (4, 2)] },
            _ => Self { width, depth: 4, heads: (width / 64).max(2), skips: default_skips() },
        }
    }

    /// Encoder layers feeding the skips, in list order.
    pub fn skip_sources(&self) -> Vec<usize> {
        self.skips.iter().map(|&(q, _)| q).collect()
    }

    pub fn validate(&self, encoder_depth: usize) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            bail!(Config, "{} decoder heads do not divide width {}", self.heads, self.width);
        }
        for &(q, k) in &self.skips {
            if q == 0 || q > encoder_depth {
                bail!(Config, "skip source {q} outside encoder layers 1..={encoder_depth}");
            }
            if k < 2 || k > self.depth {
                bail!(Config, "skip target {k} outside decoder layers 2..={}", self.depth);
            }
        }
        Ok(())
    }
}

pub fn default_skips() -> Vec<(usize, usize)> {
    vec![(4, 2), (7, 3), (10, 4)]
}

/// Parses `enc:dec` pairs separated by commas; the empty string is no skips.
pub fn parse_skip_map(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let parsed = pair.split_once(':').and_then(|(q, k)| Some((q.trim().parse().ok()?, k.trim().parse().ok()?)));
            parsed.ok_or_else(|| crate::Error::Config(format!("bad skip pair {pair:?}, expected enc:dec")))
        })
        .collect()
}

pub fn format_skip_map(skips: &[(usize, usize)]) -> String {
    skips.iter().map(|(q, k)| format!("{q}:{k}")).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug)]
pub struct SkipConnection {
    pub source: usize,
    pub target: usize,
    pub proj: Linear,
    pub cross: CrossBlock,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub modality: Modality,
    pub width: usize,
    pub input_proj: Linear,
    pub mask_token: ParamId,
    pub skips: Vec<SkipConnection>,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Decoder {
    pub fn declare<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        modality: Modality,
        encoder_width: usize,
        cfg: &DecoderConfig,
    ) -> Self {
        let w = cfg.width;
        Self {
            modality,
            width: w,
            input_proj: Linear::declare(store, &format!("{prefix}.input_proj"), encoder_width, w),
            mask_token: store.declare(format!("{prefix}.mask_token"), &[w], Init::Normal(0.02)),
            skips: cfg
                .skips
                .iter()
                .enumerate()
                .map(|(i, &(source, target))| SkipConnection {
                    source,
                    target,
                    proj: Linear::declare(store, &format!("{prefix}.skips.{i}.proj"), encoder_width, w),
                    cross: CrossBlock::declare(store, &format!("{prefix}.skips.{i}.cross"), w, cfg.heads),
                })
                .collect(),
            layers: (0..cfg.depth)
                .map(|i| TransformerLayer::declare(store, &format!("{prefix}.layers.{i}"), w, cfg.heads))
                .collect(),
            norm: LayerNorm::declare(store, &format!("{prefix}.norm"), w),
            head: Linear::declare(store, &format!("{prefix}.head"), w, target_dim(modality)),
        }
    }

    /// Projects the fused visible tokens, scatters them to their original
    /// positions, fills the rest with the mask token and adds positions.
    pub fn pad_and_position<T: Real>(&self, g: &Graph<'_, T>, fused_visible: Var, plan: &MaskPlan) -> Result<Var> {
        let rows = g.shape(fused_visible)[0];
        if rows != plan.visible.len() {
            bail!(Argument, "{rows} visible tokens for a plan with {} visible", plan.visible.len());
        }
        let visible = self.input_proj.forward(g, fused_visible);
        let full = if plan.masked.is_empty() {
            visible
        } else {
            let token = g.reshape(g.param(self.mask_token), &[1, self.width]);
            let masks = g.gather_rows(token, &vec![0; plan.masked.len()]);
            g.gather_rows(g.concat_rows(&[visible, masks]), &plan.restore_order())
        };
        Ok(g.add(full, g.constant(sinusoid_table(plan.len(), self.width))))
    }

    /// Runs the decoder stack. With `hsp` off the skip blocks are bypassed.
    pub fn decode_with_skips<T: Real>(&self, g: &Graph<'_, T>, state: Var, trace: &LayerTrace, hsp: bool) -> Result<Var> {
        let mut x = state;
        for (k, layer) in self.layers.iter().enumerate() {
            if hsp {
                for skip in self.skips.iter().filter(|s| s.target == k + 1) {
                    let Some(src) = trace.layer(skip.source).filter(|_| skip.source > 0) else {
                        bail!(Config, "encoder trace has no layer {}", skip.source);
                    };
                    x = skip.cross.forward(g, x, skip.proj.forward(g, src));
                }
            }
            x = layer.forward(g, x);
        }
        Ok(self.norm.forward(g, x))
    }

    /// Per-token predictions in target space.
    pub fn reconstruct<T: Real>(&self, g: &Graph<'_, T>, decoded: Var) -> Var {
        self.head.forward(g, decoded)
    }

    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        fused_visible: Var,
        plan: &MaskPlan,
        trace: &LayerTrace,
        hsp: bool,
    ) -> Result<Var> {
        let state = self.pad_and_position(g, fused_visible, plan)?;
        let decoded = self.decode_with_skips(g, state, trace, hsp)?;
        Ok(self.reconstruct(g, decoded))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::masking::{random_mask, tube_mask};
    use crate::numerics::Tensor;
    use crate::tokenizer::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn zero(store: &mut ParamStore<f64>, id: ParamId) {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }

    fn decoder(modality: Modality, c: usize, cfg: &DecoderConfig, seed: u64) -> (Decoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let d = Decoder::declare(&mut store, "dec", modality, c, cfg);
        store.initialize(seed);
        (d, store)
    }

    fn small_cfg() -> DecoderConfig {
        DecoderConfig { width: 8, depth: 4, heads: 2, skips: default_skips() }
    }

    /// Trace of `depth` random layers over `rows` visible tokens.
    fn trace_tensors(depth: usize, rows: usize, c: usize) -> Vec<Tensor<f64>> {
        (0..=depth).map(|j| random(&[rows, c], 100 + j as u64)).collect()
    }

    fn bind(g: &Graph<'_, f64>, layers: &[Tensor<f64>]) -> LayerTrace {
        LayerTrace { input: g.constant(layers[0].clone()), per_layer: layers[1..].iter().map(|t| g.constant(t.clone())).collect() }
    }

    #[test]
    fn padding_counts_and_scatter() {
        let grid = Grid::Video { t: 8, h: 10, w: 10 };
        let plan = tube_mask(grid, 0.9, 3).unwrap();
        let (d, mut store) = decoder(Modality::Video, 16, &small_cfg(), 1);
        {
            let g = Graph::new(&store);
            let state = d.pad_and_position(&g, g.constant(random(&[80, 16], 2)), &plan).unwrap();
            assert_eq!(g.shape(state), vec![800, 8]);
            assert!(d.pad_and_position(&g, g.constant(random(&[81, 16], 2)), &plan).is_err());
        }

        // scatter: visible rows are the projected tokens, others the mask token
        let x = random(&[80, 16], 2);
        let g = Graph::new(&store);
        let state = g.value(d.pad_and_position(&g, g.constant(x.clone()), &plan).unwrap()).clone();
        let proj = g.value(d.input_proj.forward(&g, g.constant(x.clone()))).clone();
        let pe = sinusoid_table::<f64>(800, 8);
        let mask = store.get(d.mask_token).clone();
        let flags = plan.mask_flags();
        for i in 0..800 {
            let expected: &[f64] = if flags[i] {
                mask.data()
            } else {
                proj.row(plan.visible.iter().position(|&v| v == i).unwrap())
            };
            for c in 0..8 {
                assert!((state.at(i, c) - pe.at(i, c) - expected[c]).abs() < 1e-12);
            }
        }
        drop(g);

        // zero mask token: masked rows are exactly the positional table, and
        // with PE removed they are exactly zero
        zero(&mut store, d.mask_token);
        let g = Graph::new(&store);
        let state = g.value(d.pad_and_position(&g, g.constant(x), &plan).unwrap()).clone();
        for &i in &plan.masked {
            let row: Vec<f64> = state.row(i).iter().zip(pe.row(i)).map(|(s, p)| s - p).collect();
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unmasked_plan_adds_positions_only() {
        let grid = Grid::Audio { t: 4, f: 2 };
        let plan = random_mask(grid, 0.0, 0).unwrap();
        let (d, store) = decoder(Modality::Audio, 16, &small_cfg(), 1);
        let x = random(&[8, 16], 3);
        let g = Graph::new(&store);
        let xv = g.constant(x);
        let state = g.value(d.pad_and_position(&g, xv, &plan).unwrap()).clone();
        let proj = g.value(d.input_proj.forward(&g, xv)).clone();
        let pe = sinusoid_table::<f64>(8, 8);
        assert_eq!(state, proj.zip_map(&pe, |a, b| a + b));
    }

    #[test]
    fn reconstruction_shapes() {
        let (a, sa) = decoder(Modality::Audio, 16, &small_cfg(), 1);
        let (v, sv) = decoder(Modality::Video, 16, &small_cfg(), 1);
        let ga = Graph::new(&sa);
        assert_eq!(ga.shape(a.reconstruct(&ga, ga.constant(Tensor::zeros(&[128, 8])))), vec![128, 256]);
        let zero_out = a.reconstruct(&ga, ga.constant(Tensor::zeros(&[128, 8])));
        assert!(ga.value(zero_out).data().iter().all(|&x| x == 0.0));
        let gv = Graph::new(&sv);
        assert_eq!(gv.shape(v.reconstruct(&gv, gv.constant(Tensor::zeros(&[800, 8])))), vec![800, 3072]);
    }

    fn decode(d: &Decoder, store: &ParamStore<f64>, plan: &MaskPlan, fused: &Tensor<f64>, trace: &[Tensor<f64>], hsp: bool) -> Tensor<f64> {
        let g = Graph::new(store);
        let t = bind(&g, trace);
        let out = d.forward(&g, g.constant(fused.clone()), plan, &t, hsp).unwrap();
        let v = g.value(out).clone();
        v
    }

    #[test]
    fn skip_sensitivity_follows_wiring() {
        let cfg = small_cfg();
        let (d, store) = decoder(Modality::Audio, 16, &cfg, 4);
        assert_eq!(d.skips.iter().map(|s| (s.source, s.target)).collect::<Vec<_>>(), vec![(4, 2), (7, 3), (10, 4)]);
        let plan = random_mask(Grid::Audio { t: 4, f: 2 }, 0.5, 1).unwrap();
        let fused = random(&[4, 16], 5);
        let trace = trace_tensors(10, 4, 16);
        let base = decode(&d, &store, &plan, &fused, &trace, true);
        for j in 0..=10 {
            let mut perturbed = trace.clone();
            perturbed[j] = perturbed[j].map(|v| v + 0.5);
            let changed = decode(&d, &store, &plan, &fused, &perturbed, true) != base;
            assert_eq!(changed, [4, 7, 10].contains(&j), "layer {j}");
        }
    }

    #[test]
    fn zeroed_skips_match_skip_free_path() {
        let cfg = small_cfg();
        let (d, mut store) = decoder(Modality::Video, 16, &cfg, 4);
        let plan = tube_mask(Grid::Video { t: 2, h: 2, w: 2 }, 0.5, 1).unwrap();
        let fused = random(&[4, 16], 5);
        let trace = trace_tensors(10, 4, 16);
        let with = decode(&d, &store, &plan, &fused, &trace, true);
        let without = decode(&d, &store, &plan, &fused, &trace, false);
        assert_ne!(with, without);
        for s in &d.skips {
            zero(&mut store, s.cross.attn.out.weight);
            zero(&mut store, s.cross.attn.out.bias);
        }
        assert_eq!(decode(&d, &store, &plan, &fused, &trace, true), without);
    }

    #[test]
    fn missing_trace_layer() {
        let (d, store) = decoder(Modality::Audio, 16, &small_cfg(), 4);
        let plan = random_mask(Grid::Audio { t: 4, f: 2 }, 0.5, 1).unwrap();
        let trace = trace_tensors(5, 4, 16);
        let g = Graph::new(&store);
        let t = bind(&g, &trace);
        let err = d.forward(&g, g.constant(random(&[4, 16], 5)), &plan, &t, true).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn configs() {
        for (size, w, h) in [(ModelSize::Tiny, 128, 2), (ModelSize::Small, 192, 3), (ModelSize::Base, 256, 4)] {
            let cfg = DecoderConfig::for_size(size);
            assert_eq!((cfg.width, cfg.depth, cfg.heads), (w, 4, h));
            cfg.validate(10).unwrap();
        }
        DecoderConfig::for_size(ModelSize::Micro).validate(4).unwrap();
        let bad = DecoderConfig { skips: vec![(4, 1)], ..small_cfg() };
        assert!(bad.validate(10).is_err());
        let bad = DecoderConfig { skips: vec![(11, 2)], ..small_cfg() };
        assert!(bad.validate(10).is_err());
        assert_eq!(parse_skip_map("4:2, 7:3,10:4").unwrap(), default_skips());
        assert_eq!(format_skip_map(&default_skips()), "4:2,7:3,10:4");
        assert!(parse_skip_map("").unwrap().is_empty());
        assert!(parse_skip_map("4-2").is_err());
    }

    #[test]
    fn decoder_lighter_than_encoder() {
        for size in [ModelSize::Tiny, ModelSize::Small, ModelSize::Base] {
            let enc = EncoderConfig::for_size(size);
            let mut store = ParamStore::<f32>::new();
            crate::encoders::ModalityEncoder::declare(&mut store, "enc", &enc);
            let encoder = store.num_params();
            for m in [Modality::Audio, Modality::Video] {
                let mut s = ParamStore::<f32>::new();
                Decoder::declare(&mut s, "dec", m, enc.width, &DecoderConfig::for_size(size));
                assert!(s.num_params() < encoder, "{size:?} {m:?}");
            }
        }
    }
}
