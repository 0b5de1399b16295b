//! Hierarchical feature fusion, task heads and losses, and two-clip
//! averaging for downstream tasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{FusionTrace, LayerTrace};
use crate::error::{bail, Error, Result};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "outputs")]
pub enum Task {
    Classify(usize),
    Regress(usize),
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Self::Classify(k) | Self::Regress(k) => k,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Self::Classify(k) if k < 2 => bail!(Config, "classification needs at least 2 classes, got {k}"),
            Self::Regress(0) => bail!(Config, "regression needs at least 1 output dimension"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modalities {
    Audio,
    Video,
    #[default]
    AudioVisual,
}

impl Modalities {
    pub fn has_audio(self) -> bool {
        self != Self::Video
    }

    pub fn has_video(self) -> bool {
        self != Self::Audio
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Audio => "a",
            Self::Video => "v",
            Self::AudioVisual => "av",
        }
    }
}

impl FromStr for Modalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "a" | "audio" => Self::Audio,
            "v" | "video" => Self::Video,
            "av" | "a+v" | "audio-visual" | "audiovisual" => Self::AudioVisual,
            _ => bail!(Config, "unknown modality set {s:?} (a, v, av)"),
        })
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learnable per-layer logits; the effective weights are their softmax.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub logits: ParamId,
    pub layers: usize,
}

impl FusionWeights {
    /// Zero logits, i.e. uniform weights.
    pub fn declare<T: Real>(store: &mut ParamStore<T>, name: &str, layers: usize) -> Self {
        Self { logits: store.declare(name, &[layers], Init::Zeros), layers }
    }

    /// `1 x N_s` weights. With `hff` off the weights are one-hot at the top
    /// layer and the logits are unused.
    pub fn alphas<T: Real>(&self, g: &Graph<'_, T>, hff: bool) -> Var {
        if hff {
            g.softmax(g.reshape(g.param(self.logits), &[1, self.layers]))
        } else {
            let mut onehot = Tensor::zeros(&[1, self.layers]);
            onehot.data_mut()[self.layers - 1] = T::one();
            g.constant(onehot)
        }
    }

    pub fn values<T: Real>(&self, store: &ParamStore<T>) -> Vec<f64> {
        let t = store.get(self.logits).reshape(&[1, self.layers]).expect("logit shape");
        t.softmax(1).expect("valid axis").data().iter().map(|v| v.as_f64()).collect()
    }
}

/// `sum_j alpha_j * avgpool(E^j)` as a `1 x C` row.
pub fn weighted_layers<T: Real>(g: &Graph<'_, T>, trace: &LayerTrace, weights: &FusionWeights, hff: bool) -> Result<Var> {
    if trace.len() != weights.layers || trace.is_empty() {
        bail!(Config, "fusion weights cover {} layers but the trace has {}", weights.layers, trace.len());
    }
    let pooled: Vec<Var> = trace.per_layer.iter().map(|&e| g.mean_rows(e)).collect();
    let stacked = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled) };
    Ok(g.matmul(weights.alphas(g, hff), stacked))
}

/// `[avgpool(E_a2v) | avgpool(E_v2a) | sum_j a_j pool(E^j_a) | sum_j v_j pool(E^j_v)]`,
/// using the last fusion layer. Width `4C`.
pub fn hierarchical_fuse<T: Real>(
    g: &Graph<'_, T>,
    audio: &LayerTrace,
    video: &LayerTrace,
    fusion: &FusionTrace,
    weights_a: &FusionWeights,
    weights_v: &FusionWeights,
    hff: bool,
) -> Result<Var> {
    let (Some(&a2v), Some(&v2a)) = (fusion.a2v.last(), fusion.v2a.last()) else {
        bail!(Config, "fusion trace is empty");
    };
    let ea = weighted_layers(g, audio, weights_a, hff)?;
    let ev = weighted_layers(g, video, weights_v, hff)?;
    Ok(g.concat_cols(&[g.mean_rows(a2v), g.mean_rows(v2a), ea, ev]))
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn classify_loss<T: Real>(g: &Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        bail!(Argument, "{} labels for logits of shape {shape:?}", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        bail!(Argument, "class index {bad} out of range for {} classes", shape[1]);
    }
    let picked = g.select_per_row(g.log_softmax(logits), labels);
    Ok(g.scale(g.mean(picked), T::c(-1.0)))
}

/// Mean over batch and dimensions of the squared error.
pub fn regress_loss<T: Real>(g: &Tape<T>, predicted: Var, targets: &Tensor<T>) -> Result<Var> {
    if g.shape(predicted) != targets.shape() {
        bail!(Argument, "prediction shape {:?} differs from targets {:?}", g.shape(predicted), targets.shape());
    }
    Ok(g.mean(g.square(g.sub(predicted, g.constant(targets.clone())))))
}

/// Tensor-level cross entropy.
pub fn cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let g = Tape::new();
    let l = g.constant(logits.clone());
    Ok(g.scalar(classify_loss(&g, l, labels)?))
}

/// Tensor-level mean squared error.
pub fn mean_squared_error(predicted: &Tensor<f64>, targets: &Tensor<f64>) -> Result<f64> {
    let g = Tape::new();
    let p = g.constant(predicted.clone());
    Ok(g.scalar(regress_loss(&g, p, targets)?))
}

/// Output scores of one sample: class probabilities or regression values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scores: Vec<f64>,
}

impl Prediction {
    /// Softmax of raw classifier outputs.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        Self { scores: e.into_iter().map(|v| v / z).collect() }
    }

    /// Index of the largest score (first on ties).
    pub fn argmax(&self) -> usize {
        self.scores.iter().enumerate().fold(0, |best, (i, &s)| if s > self.scores[best] { i } else { best })
    }

    pub fn mean(predictions: &[Prediction]) -> Result<Self> {
        let Some(first) = predictions.first() else {
            bail!(Argument, "cannot average zero predictions");
        };
        if predictions.iter().any(|p| p.scores.len() != first.scores.len()) {
            bail!(Argument, "predictions disagree in length");
        }
        let n = predictions.len() as f64;
        let scores =
            (0..first.scores.len()).map(|k| predictions.iter().map(|p| p.scores[k]).sum::<f64>() / n).collect();
        Ok(Self { scores })
    }
}

/// Scores each of the two clips and averages them.
pub fn infer_two_clip<C>(clips: [&C; 2], mut score: impl FnMut(&C) -> Result<Prediction>) -> Result<Prediction> {
    let first = score(clips[0])?;
    let second = score(clips[1])?;
    Prediction::mean(&[first, second])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::FusionFlow;
    use crate::numerics::{grad_check, Coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn trace(g: &Graph<'_, f64>, layers: usize, rows: usize, c: usize, seed: u64) -> LayerTrace {
        LayerTrace {
            input: g.constant(random(&[rows, c], seed)),
            per_layer: (1..=layers).map(|j| g.constant(random(&[rows, c], seed + j as u64))).collect(),
        }
    }

    #[test]
    fn fused_feature_layout() {
        let mut store = ParamStore::<f64>::new();
        let wa = FusionWeights::declare(&mut store, "alpha_a", 3);
        let wv = FusionWeights::declare(&mut store, "alpha_v", 3);
        store.initialize(0);
        assert!(wa.values(&store).iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));

        let g = Graph::new(&store);
        let (a, v) = (trace(&g, 3, 4, 6, 1), trace(&g, 3, 5, 6, 20));
        let fusion = FusionTrace {
            a2v: vec![g.constant(random(&[5, 6], 40))],
            v2a: vec![g.constant(random(&[4, 6], 41))],
            flow: FusionFlow::Default,
        };
        let e = g.value(hierarchical_fuse(&g, &a, &v, &fusion, &wa, &wv, true).unwrap()).clone();
        assert_eq!(e.shape(), &[1, 24]);
        let pool = |v: Var| g.value(g.mean_rows(v)).clone();
        assert_eq!(&e.data()[..6], pool(fusion.a2v[0]).data());
        assert_eq!(&e.data()[6..12], pool(fusion.v2a[0]).data());
        for c in 0..6 {
            let uniform: f64 = a.per_layer.iter().map(|&l| pool(l).data()[c]).sum::<f64>() / 3.0;
            assert!((e.data()[12 + c] - uniform).abs() < 1e-12);
        }

        // hff off: top-layer pooled features
        let top = g.value(hierarchical_fuse(&g, &a, &v, &fusion, &wa, &wv, false).unwrap()).clone();
        assert_eq!(&top.data()[12..18], pool(a.last()).data());
        assert_eq!(&top.data()[18..], pool(v.last()).data());

        let short = trace(&g, 2, 4, 6, 1);
        assert!(hierarchical_fuse(&g, &short, &v, &fusion, &wa, &wv, true).is_err());
    }

    #[test]
    fn weights_stay_on_simplex() {
        let mut store = ParamStore::<f64>::new();
        let w = FusionWeights::declare(&mut store, "alpha", 10);
        store.initialize(0);
        store.set(w.logits, random(&[10], 3).map(|x| 30.0 * x)).unwrap();
        let s: f64 = w.values(&store).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_examples() {
        let uniform = Tensor::zeros(&[1, 4]);
        assert!((cross_entropy(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let confident = Tensor::from_f64(&[1, 3], &[20.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-3);
        assert!(cross_entropy(&uniform, &[4]).is_err());

        let batch = random(&[3, 4], 1);
        let labels = [0, 3, 1];
        let per: f64 = (0..3)
            .map(|i| cross_entropy(&Tensor::new(&[1, 4], batch.row(i).to_vec()).unwrap(), &[labels[i]]).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((cross_entropy(&batch, &labels).unwrap() - per).abs() < 1e-12);
    }

    #[test]
    fn regression_loss_examples() {
        let y = Tensor::from_f64(&[1, 2], &[0.3, -0.2]).unwrap();
        assert_eq!(mean_squared_error(&y, &y).unwrap(), 0.0);
        let shifted = y.map(|v| v + 1.0);
        assert!((mean_squared_error(&shifted, &y).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (random(&[3, 2], 1), random(&[3, 2], 2));
        assert_eq!(mean_squared_error(&a, &b).unwrap(), mean_squared_error(&b, &a).unwrap());
        assert!(mean_squared_error(&a, &random(&[3, 3], 2)).is_err());
    }

    #[test]
    fn head_loss_gradients() {
        let point = [random(&[3, 4], 5)];
        let r = grad_check(&|g: &Tape<f64>, v: &[Var]| classify_loss(g, v[0], &[1, 0, 3]).unwrap(), &point, 1e-5, Coords::All)
            .unwrap();
        assert!(r.max_rel_error < 1e-4);
        let target = random(&[3, 4], 6);
        let r = grad_check(&|g: &Tape<f64>, v: &[Var]| regress_loss(g, v[0], &target).unwrap(), &point, 1e-5, Coords::All)
            .unwrap();
        assert!(r.max_rel_error < 1e-4);
    }

    #[test]
    fn two_clip_averaging() {
        let p = Prediction { scores: vec![0.2, 0.8] };
        let same = infer_two_clip([&p, &p], |c| Ok(c.clone())).unwrap();
        assert_eq!(same, p);

        let a = Prediction { scores: vec![0.6, 0.4] };
        let b = Prediction { scores: vec![0.1, 0.9] };
        let m = infer_two_clip([&a, &b], |c| Ok(c.clone())).unwrap();
        assert!((m.scores[0] - 0.35).abs() < 1e-12 && (m.scores[1] - 0.65).abs() < 1e-12);
        assert_eq!((a.argmax(), b.argmax(), m.argmax()), (0, 1, 1));

        let probs = Prediction::from_logits(&[1.0, 2.0, 3.0]);
        assert!((probs.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(Prediction::mean(&[]).is_err());
    }

    #[test]
    fn task_and_modalities() {
        assert!(Task::Classify(1).validate().is_err());
        assert!(Task::Regress(0).validate().is_err());
        Task::Classify(7).validate().unwrap();
        assert_eq!("a+v".parse::<Modalities>().unwrap(), Modalities::AudioVisual);
        assert!("x".parse::<Modalities>().is_err());
    }
}
