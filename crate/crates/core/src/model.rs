//! Whole-model assembly: the pre-training network (embeddings, encoders,
//! fusion, decoders and losses) and the fine-tuning network (embeddings,
//! encoders, fusion, hierarchical fusion weights and a linear head).
//!
//! Both declare the shared parts under the same parameter names, so a
//! pre-training checkpoint initializes a fine-tuning model by name.

use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoders::{EncoderConfig, FusionEncoder, FusionFlow, LayerTrace, Linear, ModalityEncoder, ModelSize};
use crate::error::{bail, Result};
use crate::finetune::{hierarchical_fuse, weighted_layers, FusionWeights, Modalities, Task};
use crate::masking::{plan_for, MaskPlan};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::objectives::{hcmcl, masked_mse, normalize_patches, total_loss, video_targets, PretrainLossReport};
use crate::tokenizer::{patchify_spectrogram, sinusoid_table, Grid, Modality, PatchEmbedding, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub size: ModelSize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub video_frames: usize,
    pub video_height: usize,
    pub video_width: usize,
    pub audio_frames: usize,
    pub audio_bins: usize,
    pub flow: FusionFlow,
    /// Hierarchical skip connections in the decoders.
    pub hsp: bool,
    /// Contrastive term over the skip-source layers.
    pub hcmcl: bool,
    /// Learnable layer weights in fine-tuning (otherwise top layer only).
    pub hff: bool,
    pub lambda: f64,
    pub temperature: f64,
    pub mask_ratio_audio: f64,
    pub mask_ratio_video: f64,
    /// Standardize each reconstruction target row.
    pub norm_targets: bool,
    /// Add fixed sinusoidal positions to encoder tokens.
    pub encoder_positions: bool,
}

impl ModelConfig {
    pub fn new(size: ModelSize) -> Self {
        let (video, audio) = match size {
            ModelSize::Micro => ((16, 32, 32), (64, 32)),
            _ => ((16, 160, 160), (256, 128)),
        };
        Self {
            size,
            encoder: EncoderConfig::for_size(size),
            decoder: DecoderConfig::for_size(size),
            video_frames: video.0,
            video_height: video.1,
            video_width: video.2,
            audio_frames: audio.0,
            audio_bins: audio.1,
            flow: FusionFlow::Default,
            hsp: true,
            hcmcl: true,
            hff: true,
            lambda: 0.0025,
            temperature: 0.07,
            mask_ratio_audio: 0.8,
            mask_ratio_video: 0.9,
            norm_targets: false,
            encoder_positions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.depth)?;
        if self.encoder.fusion_depth == 0 {
            bail!(Config, "fusion depth must be at least 1");
        }
        self.video_grid()?;
        self.audio_grid()?;
        for (name, r) in [("audio", self.mask_ratio_audio), ("video", self.mask_ratio_video)] {
            if !(0.0..1.0).contains(&r) {
                bail!(Config, "{name} mask ratio must lie in [0, 1), got {r}");
            }
        }
        crate::objectives::PretrainLossConfig { lambda: self.lambda, temperature: self.temperature, layers: vec![] }
            .validate()
    }

    pub fn video_grid(&self) -> Result<Grid> {
        Grid::video(self.video_frames, self.video_height, self.video_width)
    }

    pub fn audio_grid(&self) -> Result<Grid> {
        Grid::audio(self.audio_frames, self.audio_bins)
    }

    /// Encoder layers entering the contrastive sum: the skip sources, in
    /// order and without repeats, or none with the term switched off.
    pub fn contrastive_layers(&self) -> Vec<usize> {
        if !self.hcmcl {
            return Vec::new();
        }
        let mut layers = Vec::new();
        for q in self.decoder.skip_sources() {
            if !layers.contains(&q) {
                layers.push(q);
            }
        }
        layers
    }
}

/// Patch rows of one clip, before embedding.
#[derive(Clone, Debug)]
pub struct ClipInputs<T> {
    pub audio: Tensor<T>,
    pub video: Tensor<T>,
}

impl<T: Real> ClipInputs<T> {
    pub fn new(spec: &Spectrogram, clip: &VideoClip, cfg: &ModelConfig) -> Result<Self> {
        if (spec.frames(), spec.bins()) != (cfg.audio_frames, cfg.audio_bins) {
            bail!(Input, "spectrogram is {}x{}, model expects {}x{}", spec.frames(), spec.bins(), cfg.audio_frames, cfg.audio_bins);
        }
        if (clip.frames(), clip.height(), clip.width()) != (cfg.video_frames, cfg.video_height, cfg.video_width) {
            bail!(
                Input,
                "clip is {}x{}x{}, model expects {}x{}x{}",
                clip.frames(),
                clip.height(),
                clip.width(),
                cfg.video_frames,
                cfg.video_height,
                cfg.video_width
            );
        }
        Ok(Self { audio: patchify_spectrogram(spec)?, video: clip.patchify() })
    }
}

/// One pre-training example: inputs, reconstruction targets and masks.
#[derive(Clone, Debug)]
pub struct PretrainSample<T> {
    pub inputs: ClipInputs<T>,
    pub audio_target: Tensor<T>,
    pub video_target: Tensor<T>,
    pub audio_plan: MaskPlan,
    pub video_plan: MaskPlan,
}

impl<T: Real> PretrainSample<T> {
    pub fn new(spec: &Spectrogram, clip: &VideoClip, cfg: &ModelConfig, audio_seed: u64, video_seed: u64) -> Result<Self> {
        let inputs = ClipInputs::new(spec, clip, cfg)?;
        let mut audio_target = inputs.audio.clone();
        let mut video_target = video_targets(clip);
        if cfg.norm_targets {
            audio_target = normalize_patches(&audio_target);
            video_target = normalize_patches(&video_target);
        }
        Ok(Self {
            inputs,
            audio_target,
            video_target,
            audio_plan: plan_for(cfg.audio_grid()?, cfg.mask_ratio_audio, audio_seed)?,
            video_plan: plan_for(cfg.video_grid()?, cfg.mask_ratio_video, video_seed)?,
        })
    }
}

/// Embeds the selected patch rows, adds their positions, and runs the
/// encoder. Returns the trace and the normalized encoder output.
fn encode_rows<T: Real>(
    g: &Graph<'_, T>,
    embed: &PatchEmbedding,
    encoder: &ModalityEncoder,
    patches: &Tensor<T>,
    rows: Option<&[usize]>,
    positions: bool,
) -> (LayerTrace, Var) {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..patches.rows()).collect();
            &all
        }
    };
    let pick = |t: &Tensor<T>| {
        let data = rows.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        Tensor::new(&[rows.len(), t.cols()], data).expect("row selection")
    };
    let mut tokens = embed.forward(g, g.constant(pick(patches)));
    if positions {
        tokens = g.add(tokens, g.constant(pick(&sinusoid_table(patches.rows(), encoder.width))));
    }
    let trace = encoder.forward(g, tokens);
    let out = encoder.output(g, &trace);
    (trace, out)
}

/// Tape handles of one batch's loss terms.
#[derive(Clone, Debug)]
pub struct PretrainLoss {
    pub total: Var,
    pub mae: Var,
    pub mae_audio: Var,
    pub mae_video: Var,
    pub infonce: Vec<Var>,
    pub hcmcl: Var,
}

impl PretrainLoss {
    pub fn report<T: Real>(&self, g: &Graph<'_, T>) -> PretrainLossReport {
        let s = |v: Var| g.scalar(v).as_f64();
        PretrainLossReport {
            mae_audio: s(self.mae_audio),
            mae_video: s(self.mae_video),
            mae: s(self.mae),
            infonce: self.infonce.iter().map(|&v| s(v)).collect(),
            hcmcl: s(self.hcmcl),
            total: s(self.total),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub cfg: ModelConfig,
    pub audio_embed: PatchEmbedding,
    pub video_embed: PatchEmbedding,
    pub audio_encoder: ModalityEncoder,
    pub video_encoder: ModalityEncoder,
    pub fusion: FusionEncoder,
    pub audio_decoder: Decoder,
    pub video_decoder: Decoder,
}

impl PretrainModel {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.encoder.width;
        Ok(Self {
            cfg: cfg.clone(),
            audio_embed: PatchEmbedding::declare(store, "audio.embed", Modality::Audio, c),
            video_embed: PatchEmbedding::declare(store, "video.embed", Modality::Video, c),
            audio_encoder: ModalityEncoder::declare(store, "audio.encoder", &cfg.encoder),
            video_encoder: ModalityEncoder::declare(store, "video.encoder", &cfg.encoder),
            fusion: FusionEncoder::declare(store, "fusion", &cfg.encoder),
            audio_decoder: Decoder::declare(store, "audio.decoder", Modality::Audio, c, &cfg.decoder),
            video_decoder: Decoder::declare(store, "video.decoder", Modality::Video, c, &cfg.decoder),
        })
    }

    /// Combined loss over a batch; reconstruction terms are batch means.
    pub fn loss<T: Real>(&self, g: &Graph<'_, T>, batch: &[PretrainSample<T>]) -> Result<PretrainLoss> {
        if batch.is_empty() {
            bail!(Argument, "empty pre-training batch");
        }
        let cfg = &self.cfg;
        let (mut traces_a, mut traces_v) = (Vec::new(), Vec::new());
        let (mut mae_a, mut mae_v) = (Vec::new(), Vec::new());
        for s in batch {
            let (trace_a, out_a) = encode_rows(
                g,
                &self.audio_embed,
                &self.audio_encoder,
                &s.inputs.audio,
                Some(&s.audio_plan.visible),
                cfg.encoder_positions,
            );
            let (trace_v, out_v) = encode_rows(
                g,
                &self.video_embed,
                &self.video_encoder,
                &s.inputs.video,
                Some(&s.video_plan.visible),
                cfg.encoder_positions,
            );
            let fused = self.fusion.forward(g, out_a, out_v, cfg.flow);
            let last_v2a = *fused.v2a.last().expect("fusion depth >= 1");
            let last_a2v = *fused.a2v.last().expect("fusion depth >= 1");
            let pred_a = self.audio_decoder.forward(g, last_v2a, &s.audio_plan, &trace_a, cfg.hsp)?;
            let pred_v = self.video_decoder.forward(g, last_a2v, &s.video_plan, &trace_v, cfg.hsp)?;
            mae_a.push(masked_mse(g, pred_a, &s.audio_target, &s.audio_plan.masked)?);
            mae_v.push(masked_mse(g, pred_v, &s.video_target, &s.video_plan.masked)?);
            traces_a.push(trace_a);
            traces_v.push(trace_v);
        }
        let mean = |terms: &[Var]| {
            let sum = terms.iter().copied().reduce(|a, b| g.add(a, b)).expect("non-empty batch");
            g.scale(sum, T::c(1.0 / terms.len() as f64))
        };
        let (mae_audio, mae_video) = (mean(&mae_a), mean(&mae_v));
        let (contrast, infonce) = hcmcl(g, &traces_a, &traces_v, &cfg.contrastive_layers(), cfg.temperature)?;
        let mae = g.add(mae_audio, mae_video);
        let total = total_loss(g, mae, contrast, cfg.lambda);
        Ok(PretrainLoss { total, mae, mae_audio, mae_video, infonce, hcmcl: contrast })
    }
}

/// Encoders, fusion and head used for downstream tasks.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub cfg: ModelConfig,
    pub modalities: Modalities,
    pub task: Task,
    pub audio: Option<(PatchEmbedding, ModalityEncoder, FusionWeights)>,
    pub video: Option<(PatchEmbedding, ModalityEncoder, FusionWeights)>,
    pub fusion: Option<FusionEncoder>,
    pub head: Linear,
}

impl FinetuneModel {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, modalities: Modalities, task: Task) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        let c = cfg.encoder.width;
        let branch = |store: &mut ParamStore<T>, m: Modality| {
            let name = m.name();
            (
                PatchEmbedding::declare(store, &format!("{name}.embed"), m, c),
                ModalityEncoder::declare(store, &format!("{name}.encoder"), &cfg.encoder),
                FusionWeights::declare(store, &format!("{name}.alpha"), cfg.encoder.depth),
            )
        };
        let audio = modalities.has_audio().then(|| branch(store, Modality::Audio));
        let video = modalities.has_video().then(|| branch(store, Modality::Video));
        let fusion = (modalities == Modalities::AudioVisual).then(|| FusionEncoder::declare(store, "fusion", &cfg.encoder));
        let features = if fusion.is_some() { 4 * c } else { c };
        let head = Linear::declare(store, "head", features, task.outputs());
        if cfg.encoder.depth == 0 {
            bail!(Config, "fine-tuning needs at least one encoder layer");
        }
        Ok(Self { cfg: cfg.clone(), modalities, task, audio, video, fusion, head })
    }

    /// Width of the pooled feature fed to the head.
    pub fn feature_width(&self) -> usize {
        if self.fusion.is_some() {
            4 * self.cfg.encoder.width
        } else {
            self.cfg.encoder.width
        }
    }

    /// `1 x F` feature of one unmasked clip.
    pub fn features<T: Real>(&self, g: &Graph<'_, T>, inputs: &ClipInputs<T>) -> Result<Var> {
        let pos = self.cfg.encoder_positions;
        let run = |branch: &(PatchEmbedding, ModalityEncoder, FusionWeights), patches: &Tensor<T>| {
            encode_rows(g, &branch.0, &branch.1, patches, None, pos)
        };
        match (&self.audio, &self.video, &self.fusion) {
            (Some(a), Some(v), Some(fusion)) => {
                let (ta, oa) = run(a, &inputs.audio);
                let (tv, ov) = run(v, &inputs.video);
                let ft = fusion.forward(g, oa, ov, self.cfg.flow);
                hierarchical_fuse(g, &ta, &tv, &ft, &a.2, &v.2, self.cfg.hff)
            }
            (Some(a), None, _) => {
                let (t, _) = run(a, &inputs.audio);
                weighted_layers(g, &t, &a.2, self.cfg.hff)
            }
            (None, Some(v), _) => {
                let (t, _) = run(v, &inputs.video);
                weighted_layers(g, &t, &v.2, self.cfg.hff)
            }
            _ => bail!(Config, "fine-tuning model has no branches"),
        }
    }

    /// `B x outputs` head outputs.
    pub fn outputs<T: Real>(&self, g: &Graph<'_, T>, batch: &[&ClipInputs<T>]) -> Result<Var> {
        let feats = batch.iter().map(|x| self.features(g, x)).collect::<Result<Vec<_>>>()?;
        let stacked = match feats.len() {
            0 => bail!(Argument, "empty batch"),
            1 => feats[0],
            _ => g.concat_rows(&feats),
        };
        Ok(self.head.forward(g, stacked))
    }
}

/// Trainable parameters of the fine-tuning model (decoders excluded).
pub fn param_count(size: ModelSize, modalities: Modalities, task: Task) -> Result<usize> {
    let mut store = ParamStore::<f32>::new();
    FinetuneModel::declare(&mut store, &ModelConfig::new(size), modalities, task)?;
    Ok(store.num_params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, Coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_inputs(cfg: &ModelConfig, seed: u64) -> (Spectrogram, VideoClip) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Spectrogram::zeros(cfg.audio_frames, cfg.audio_bins);
        spec.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut clip = VideoClip::zeros(cfg.video_frames, cfg.video_height, cfg.video_width).unwrap();
        clip.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        (spec, clip)
    }

    #[test]
    fn micro_shapes() {
        let cfg = ModelConfig::new(ModelSize::Micro);
        assert_eq!(cfg.video_grid().unwrap().len(), 32);
        assert_eq!(cfg.audio_grid().unwrap().len(), 8);
        assert_eq!(cfg.contrastive_layers(), vec![2, 4]);
        let (spec, clip) = toy_inputs(&cfg, 1);
        let s = PretrainSample::<f64>::new(&spec, &clip, &cfg, 1, 2).unwrap();
        assert_eq!((s.audio_plan.visible.len(), s.video_plan.visible.len()), (2, 8));
        assert_eq!(s.video_target.shape(), &[32, 3072]);
        assert_eq!(s.audio_target.shape(), &[8, 256]);
    }

    #[test]
    fn pretrain_loss_is_finite_and_decomposes() {
        let cfg = ModelConfig::new(ModelSize::Micro);
        let mut store = ParamStore::<f64>::new();
        let model = PretrainModel::declare(&mut store, &cfg).unwrap();
        store.initialize(3);
        let batch: Vec<_> = (0..3)
            .map(|i| {
                let (spec, clip) = toy_inputs(&cfg, i);
                PretrainSample::new(&spec, &clip, &cfg, i, i + 10).unwrap()
            })
            .collect();
        let g = Graph::new(&store);
        let loss = model.loss(&g, &batch).unwrap();
        let r = loss.report(&g);
        assert!(r.total.is_finite());
        assert_eq!(r.infonce.len(), 2);
        assert!((r.hcmcl - r.infonce.iter().sum::<f64>()).abs() < 1e-12);
        assert!((r.total - (r.mae + cfg.lambda * r.hcmcl)).abs() < 1e-12);
    }

    #[test]
    fn pretrain_gradients_on_a_slice() {
        let mut cfg = ModelConfig::new(ModelSize::Micro);
        cfg.encoder = EncoderConfig { width: 8, depth: 2, fusion_depth: 1, heads: 2 };
        cfg.decoder = DecoderConfig { width: 4, depth: 2, heads: 2, skips: vec![(1, 2), (2, 2)] };
        cfg.lambda = 0.5;
        let mut store = ParamStore::<f64>::new();
        let model = PretrainModel::declare(&mut store, &cfg).unwrap();
        store.initialize(1);
        let batch: Vec<_> = (0..2)
            .map(|i| {
                let (spec, clip) = toy_inputs(&cfg, i);
                PretrainSample::new(&spec, &clip, &cfg, i, i + 10).unwrap()
            })
            .collect();
        let report = grad_check_params(
            &mut store,
            |s| {
                let g = Graph::new(s);
                let l = model.loss(&g, &batch)?;
                Ok((g.scalar(l.total), g.backward_params(l.total)?))
            },
            |s| {
                let g = Graph::new(s);
                Ok(g.terms(model.loss(&g, &batch)?.total))
            },
            1e-5,
            Coords::Sample { per_tensor: 3, seed: 5 },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn finetune_feature_widths() {
        let cfg = ModelConfig::new(ModelSize::Micro);
        let (spec, clip) = toy_inputs(&cfg, 1);
        let inputs = ClipInputs::<f64>::new(&spec, &clip, &cfg).unwrap();
        for (m, width) in [(Modalities::AudioVisual, 256), (Modalities::Audio, 64), (Modalities::Video, 64)] {
            let mut store = ParamStore::<f64>::new();
            let model = FinetuneModel::declare(&mut store, &cfg, m, Task::Classify(3)).unwrap();
            store.initialize(0);
            let g = Graph::new(&store);
            assert_eq!(g.shape(model.features(&g, &inputs).unwrap()), vec![1, width]);
            assert_eq!(g.shape(model.outputs(&g, &[&inputs, &inputs]).unwrap()), vec![2, 3]);
        }
    }

    #[test]
    fn shared_parameter_names() {
        let cfg = ModelConfig::new(ModelSize::Micro);
        let mut pre = ParamStore::<f32>::new();
        PretrainModel::declare(&mut pre, &cfg).unwrap();
        let mut fine = ParamStore::<f32>::new();
        FinetuneModel::declare(&mut fine, &cfg, Modalities::AudioVisual, Task::Classify(2)).unwrap();
        let shared = fine.specs().iter().filter(|s| pre.id(&s.name).is_some()).count();
        // everything but the two weight vectors and the head
        assert_eq!(shared, fine.len() - 4);
    }

    #[test]
    fn rejects_wrong_geometry() {
        let cfg = ModelConfig::new(ModelSize::Micro);
        let spec = Spectrogram::zeros(32, 32);
        let clip = VideoClip::zeros(16, 32, 32).unwrap();
        assert!(matches!(ClipInputs::<f64>::new(&spec, &clip, &cfg), Err(crate::Error::Input(_))));
    }
}
