//! A small multi-scale segmentation network.
//!
//! Three branches see the image at full, half and quarter resolution, each
//! through a short conv/ReLU stack; branch outputs are fused by
//! upsample-and-add, classified by a 1x1 conv and upsampled back to input
//! resolution. The image-level classifier head is the spatial mean of the
//! segmentation logits, so classification-style attacks and segmentation
//! attacks share one model.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::types::{clip_quantize, Image, LabelMask};

const MAGIC: &[u8; 8] = b"SEGADV01";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Data(String),
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: Tensor, // k x k x Cin x Cout
    pub bias: Tensor,   // Cout
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn he_init(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize, stride: usize, padding: usize) -> Self {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        let data = (0..k * k * cin * cout).map(|_| std * standard_normal(rng)).collect();
        ConvLayer {
            kernel: Tensor::new(vec![k, k, cin, cout], data),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps us independent of distribution-crate version churn.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-pixel class scores: raw logits and softmax probabilities, H x W x N.
#[derive(Clone, Debug)]
pub struct ScoreVolume {
    pub logits: Tensor,
    pub probs: Tensor,
}

impl ScoreVolume {
    fn from_logits(logits: Tensor) -> Self {
        let shape = logits.shape().to_vec();
        let n = shape[2];
        let mut probs = vec![0.0; logits.numel()];
        for p in 0..shape[0] * shape[1] {
            let row = &logits.data()[p * n..(p + 1) * n];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for s in 0..n {
                let e = (row[s] - m).exp();
                probs[p * n + s] = e;
                z += e;
            }
            for s in 0..n {
                probs[p * n + s] /= z;
            }
        }
        ScoreVolume { logits, probs: Tensor::new(shape, probs) }
    }

    pub fn n_classes(&self) -> usize {
        self.logits.shape()[2]
    }
}

/// Post-ReLU activations of every branch layer, in architecture order.
pub type FeatureTaps = Vec<Tensor>;

/// Loss selector for [`SegModel::input_gradient`].
pub enum LossSpec<'a> {
    Segmentation { target: &'a LabelMask, weights: Option<&'a [f64]> },
    Classification { target: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// One labelled training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMask,
}

/// Multi-scale segmentation model. Parameters are immutable during
/// inference; training mutates them and is exclusive.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    // declaration order: full(2), half(2), quarter(3), classifier(1)
    layers: Vec<ConvLayer>,
}

const N_LAYERS: usize = 8;
const FULL0: usize = 0;
const HALF0: usize = 2;
const QUARTER0: usize = 4;
const CLASSIFIER: usize = 7;
const FUSED_CHANNELS: usize = 24;

pub(crate) struct ForwardVars {
    pub logits: Var,
    pub taps: Vec<Var>,
    pub params: Vec<(Var, Var)>, // (kernel, bias) per layer, declaration order
}

impl SegModel {
    /// Seeded He initialization of the fixed topology.
    pub fn new(height: usize, width: usize, n_classes: usize, seed: u64) -> Self {
        assert!(height % 8 == 0 && width % 8 == 0, "dimensions must be divisible by 8");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FUSED_CHANNELS;
        let layers = vec![
            // full-resolution branch
            ConvLayer::he_init(&mut rng, 3, 3, 12, 2, 1),
            ConvLayer::he_init(&mut rng, 3, 12, f, 1, 1),
            // half-resolution branch
            ConvLayer::he_init(&mut rng, 3, 3, f, 2, 1),
            ConvLayer::he_init(&mut rng, 3, f, f, 1, 1),
            // quarter-resolution branch
            ConvLayer::he_init(&mut rng, 3, 3, f, 2, 1),
            ConvLayer::he_init(&mut rng, 3, f, f, 1, 1),
            ConvLayer::he_init(&mut rng, 3, f, f, 1, 1),
            // 1x1 classifier
            ConvLayer::he_init(&mut rng, 1, f, n_classes, 1, 0),
        ];
        SegModel { height, width, n_classes, layers }
    }

    /// Zero all parameters (test hook: zero logits everywhere).
    pub fn zero_parameters(&mut self) {
        for layer in &mut self.layers {
            layer.kernel = Tensor::zeros(layer.kernel.shape().to_vec());
            layer.bias = Tensor::zeros(layer.bias.shape().to_vec());
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.numel() + l.bias.numel()).sum()
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    fn check_image(&self, image: &Tensor) -> Result<(), ModelError> {
        if image.shape() != [self.height, self.width, 3] {
            return Err(ModelError::Data(format!(
                "expected {}x{}x3 image, got {:?}",
                self.height, self.width,
                image.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_on_tape(&self, tape: &mut Tape, image: Var) -> Result<ForwardVars, ModelError> {
        self.check_image(tape.value(image))?;
        let params: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.kernel.clone()), tape.leaf(l.bias.clone())))
            .collect();
        let mut taps = Vec::new();
        let branch = |tape: &mut Tape, input: Var, range: std::ops::Range<usize>, taps: &mut Vec<Var>| -> Result<Var, ModelError> {
            let mut v = input;
            for li in range {
                let (kv, bv) = params[li];
                let layer = &self.layers[li];
                v = tape.conv2d(v, kv, bv, layer.stride, layer.padding)?;
                v = tape.relu(v);
                taps.push(v);
            }
            Ok(v)
        };

        // map gray values into [-1, 1] so He-initialized activations stay O(1)
        let offset = tape.leaf(Tensor::full(tape.value(image).shape().to_vec(), -128.0));
        let centered = tape.add(image, offset)?;
        let normed = tape.scale(centered, 1.0 / 128.0);

        let half_in = tape.bilinear_resize(normed, self.height / 2, self.width / 2)?;
        let quarter_in = tape.bilinear_resize(normed, self.height / 4, self.width / 4)?;

        let full = branch(tape, normed, FULL0..FULL0 + 2, &mut taps)?;
        let half = branch(tape, half_in, HALF0..HALF0 + 2, &mut taps)?;
        let quarter = branch(tape, quarter_in, QUARTER0..QUARTER0 + 3, &mut taps)?;

        // fuse by upsample-and-add, coarse to fine
        let q_up = tape.bilinear_resize(quarter, self.height / 4, self.width / 4)?;
        let mid = tape.add(q_up, half)?;
        let mid_up = tape.bilinear_resize(mid, self.height / 2, self.width / 2)?;
        let fused = tape.add(mid_up, full)?;

        let (ck, cb) = params[CLASSIFIER];
        let cls = &self.layers[CLASSIFIER];
        let low_logits = tape.conv2d(fused, ck, cb, cls.stride, cls.padding)?;
        let logits = tape.bilinear_resize(low_logits, self.height, self.width)?;
        Ok(ForwardVars { logits, taps, params })
    }

    /// Class scores and feature taps for a real-valued working image.
    pub fn forward_scores_real(&self, image: &Tensor) -> Result<(ScoreVolume, FeatureTaps), ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let fwd = self.forward_on_tape(&mut tape, x)?;
        let taps = fwd.taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((ScoreVolume::from_logits(tape.value(fwd.logits).clone()), taps))
    }

    pub fn forward_scores(&self, image: &Image) -> Result<(ScoreVolume, FeatureTaps), ModelError> {
        self.forward_scores_real(&image.to_real())
    }

    /// Image-level prediction: spatial mean of segmentation logits, argmax
    /// with smallest-index tie-break.
    pub fn classify_real(&self, image: &Tensor) -> Result<(usize, Vec<f64>), ModelError> {
        let (scores, _) = self.forward_scores_real(image)?;
        let logits = mean_logits(&scores.logits);
        Ok((argmax(&logits), logits))
    }

    pub fn classify(&self, image: &Image) -> Result<(usize, Vec<f64>), ModelError> {
        self.classify_real(&image.to_real())
    }

    /// Gradient of the selected loss with respect to the input image.
    pub fn input_gradient(&self, image: &Tensor, loss: &LossSpec) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let fwd = self.forward_on_tape(&mut tape, x)?;
        let loss_var = match loss {
            LossSpec::Segmentation { target, weights } => {
                if target.height != self.height || target.width != self.width {
                    return Err(ModelError::Data("target mask dimensions mismatch".into()));
                }
                let classes: Vec<usize> = target.classes().iter().map(|&c| c as usize).collect();
                tape.softmax_cross_entropy(fwd.logits, &classes, *weights)?
            }
            LossSpec::Classification { target } => {
                let mean = tape.spatial_mean(fwd.logits)?;
                tape.cross_entropy_1d(mean, *target)?
            }
        };
        Ok(tape.backward(loss_var)?.wrt(x))
    }

    /// Scalar loss value for the same specs as [`Self::input_gradient`].
    pub fn loss(&self, image: &Tensor, loss: &LossSpec) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let fwd = self.forward_on_tape(&mut tape, x)?;
        let loss_var = match loss {
            LossSpec::Segmentation { target, weights } => {
                let classes: Vec<usize> = target.classes().iter().map(|&c| c as usize).collect();
                tape.softmax_cross_entropy(fwd.logits, &classes, *weights)?
            }
            LossSpec::Classification { target } => {
                let mean = tape.spatial_mean(fwd.logits)?;
                tape.cross_entropy_1d(mean, *target)?
            }
        };
        Ok(tape.value(loss_var).item())
    }

    /// Plain SGD; deterministic given the seed. Returns per-epoch mean loss.
    pub fn train(&mut self, dataset: &[Sample], cfg: &TrainConfig) -> Result<Vec<f64>, ModelError> {
        self.train_impl(dataset, cfg, None)
    }

    /// Like [`Self::train`] but each batch carries `mix_ratio` adversarial
    /// examples generated by single-step signed-gradient ascent with step
    /// `fgsm_lambda` against the current parameters.
    pub fn adversarial_train(
        &mut self,
        dataset: &[Sample],
        cfg: &TrainConfig,
        fgsm_lambda: f64,
        mix_ratio: f64,
    ) -> Result<Vec<f64>, ModelError> {
        if !(0.0..=1.0).contains(&mix_ratio) {
            return Err(ModelError::Data("mix_ratio must be in [0, 1]".into()));
        }
        self.train_impl(dataset, cfg, Some((fgsm_lambda, mix_ratio)))
    }

    fn train_impl(
        &mut self,
        dataset: &[Sample],
        cfg: &TrainConfig,
        adversarial: Option<(f64, f64)>,
    ) -> Result<Vec<f64>, ModelError> {
        if dataset.is_empty() {
            return Err(ModelError::Data("empty training dataset".into()));
        }
        for s in dataset {
            if s.labels.max_class() as usize >= self.n_classes {
                return Err(ModelError::Data("label out of class range".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let adv_count = adversarial
                    .map(|(_, mix)| ((batch.len() as f64) * mix).round() as usize)
                    .unwrap_or(0);
                let model = &*self;
                // per-sample losses/gradients in parallel; summed in batch
                // order below so results stay deterministic
                let per_sample: Vec<(f64, Vec<(Tensor, Tensor)>)> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(bi, &idx)| -> Result<_, ModelError> {
                        let sample = &dataset[idx];
                        let image = if bi < adv_count {
                            let (lambda, _) = adversarial.unwrap();
                            model.fgsm_example(&sample.image, lambda)?.to_real()
                        } else {
                            sample.image.to_real()
                        };
                        let mut tape = Tape::new();
                        let x = tape.leaf(image);
                        let fwd = model.forward_on_tape(&mut tape, x)?;
                        let classes: Vec<usize> =
                            sample.labels.classes().iter().map(|&c| c as usize).collect();
                        let loss = tape.softmax_cross_entropy(fwd.logits, &classes, None)?;
                        let value = tape.value(loss).item();
                        let g = tape.backward(loss)?;
                        let grads = fwd
                            .params
                            .iter()
                            .map(|(kv, bv)| (g.wrt(*kv), g.wrt(*bv)))
                            .collect();
                        Ok((value, grads))
                    })
                    .collect::<Result<_, _>>()?;
                let mut grads: Vec<(Tensor, Tensor)> = self
                    .layers
                    .iter()
                    .map(|l| {
                        (Tensor::zeros(l.kernel.shape().to_vec()), Tensor::zeros(l.bias.shape().to_vec()))
                    })
                    .collect();
                let mut batch_loss = 0.0;
                for (value, sample_grads) in &per_sample {
                    batch_loss += value;
                    for (li, (gk, gb)) in sample_grads.iter().enumerate() {
                        for (a, b) in grads[li].0.data_mut().iter_mut().zip(gk.data()) {
                            *a += b;
                        }
                        for (a, b) in grads[li].1.data_mut().iter_mut().zip(gb.data()) {
                            *a += b;
                        }
                    }
                }
                let scale = cfg.learning_rate / batch.len() as f64;
                for (layer, (gk, gb)) in self.layers.iter_mut().zip(&grads) {
                    for (p, g) in layer.kernel.data_mut().iter_mut().zip(gk.data()) {
                        *p -= scale * g;
                    }
                    for (p, g) in layer.bias.data_mut().iter_mut().zip(gb.data()) {
                        *p -= scale * g;
                    }
                }
                epoch_loss += batch_loss / batch.len() as f64;
                batches += 1;
            }
            trace.push(epoch_loss / batches as f64);
        }
        Ok(trace)
    }

    /// Single signed-gradient ascent step on the loss toward the model's own
    /// prediction, quantized back to a valid image.
    fn fgsm_example(&self, image: &Image, lambda: f64) -> Result<Image, ModelError> {
        let real = image.to_real();
        let (scores, _) = self.forward_scores_real(&real)?;
        let target = predict_mask(&scores);
        let grad = self.input_gradient(&real, &LossSpec::Segmentation { target: &target, weights: None })?;
        let data: Vec<f64> = real
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| x + lambda * sign(g))
            .collect();
        Ok(clip_quantize(&Tensor::new(real.shape().to_vec(), data)))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = File::create(path)?;
        f.write_all(MAGIC)?;
        let mut header: Vec<u32> = vec![
            self.height as u32,
            self.width as u32,
            self.n_classes as u32,
            self.layers.len() as u32,
        ];
        for l in &self.layers {
            let s = l.kernel.shape();
            header.extend_from_slice(&[s[0] as u32, s[2] as u32, s[3] as u32, l.stride as u32, l.padding as u32]);
        }
        for v in header {
            f.write_all(&v.to_le_bytes())?;
        }
        for l in &self.layers {
            for &v in l.kernel.data() {
                f.write_all(&v.to_le_bytes())?;
            }
            for &v in l.bias.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SegModel, ModelError> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Format("bad magic bytes".into()));
        }
        let read_u32 = |f: &mut File| -> Result<u32, ModelError> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let height = read_u32(&mut f)? as usize;
        let width = read_u32(&mut f)? as usize;
        let n_classes = read_u32(&mut f)? as usize;
        let n_layers = read_u32(&mut f)? as usize;
        if n_layers != N_LAYERS {
            return Err(ModelError::Format(format!("expected {N_LAYERS} layers, got {n_layers}")));
        }
        let mut descr = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let k = read_u32(&mut f)? as usize;
            let cin = read_u32(&mut f)? as usize;
            let cout = read_u32(&mut f)? as usize;
            let stride = read_u32(&mut f)? as usize;
            let padding = read_u32(&mut f)? as usize;
            descr.push((k, cin, cout, stride, padding));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (k, cin, cout, stride, padding) in descr {
            let mut read_f64s = |count: usize| -> Result<Vec<f64>, ModelError> {
                let mut buf = vec![0u8; count * 8];
                f.read_exact(&mut buf)?;
                Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            };
            let kernel = Tensor::new(vec![k, k, cin, cout], read_f64s(k * k * cin * cout)?);
            let bias = Tensor::new(vec![cout], read_f64s(cout)?);
            layers.push(ConvLayer { kernel, bias, stride, padding });
        }
        Ok(SegModel { height, width, n_classes, layers })
    }
}

/// Per-pixel argmax decode; ties go to the smallest class index.
pub fn predict_mask(scores: &ScoreVolume) -> LabelMask {
    let shape = scores.probs.shape();
    let (h, w, n) = (shape[0], shape[1], shape[2]);
    let mut classes = vec![0u8; h * w];
    for p in 0..h * w {
        classes[p] = argmax(&scores.probs.data()[p * n..(p + 1) * n]) as u8;
    }
    LabelMask::new(h, w, classes)
}

pub(crate) fn mean_logits(logits: &Tensor) -> Vec<f64> {
    let shape = logits.shape();
    let (h, w, n) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; n];
    for p in 0..h * w {
        for s in 0..n {
            out[s] += logits.data()[p * n + s];
        }
    }
    let inv = 1.0 / (h * w) as f64;
    for v in &mut out {
        *v *= inv;
    }
    out
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> SegModel {
        SegModel::new(16, 24, 4, seed)
    }

    fn ramp_image(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| (i * 7 % 251) as u8).collect();
        Image::new(h, w, 3, data)
    }

    #[test]
    fn parameter_budget() {
        let m = SegModel::new(64, 128, 8, 0);
        assert!(m.param_count() <= 100_000, "params = {}", m.param_count());
    }

    #[test]
    fn probs_normalize_and_logits_full_resolution() {
        let m = tiny_model(1);
        let (scores, taps) = m.forward_scores(&ramp_image(16, 24)).unwrap();
        assert_eq!(scores.logits.shape(), &[16, 24, 4]);
        assert!(!taps.is_empty());
        let n = 4;
        for p in 0..16 * 24 {
            let s: f64 = scores.probs.data()[p * n..(p + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(scores.probs.data()[p * n..(p + 1) * n].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(scores.logits.all_finite());
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut m = tiny_model(2);
        m.zero_parameters();
        let (scores, _) = m.forward_scores(&ramp_image(16, 24)).unwrap();
        assert!(scores.probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        // uniform probs decode to class 0 by the tie rule
        let mask = predict_mask(&scores);
        assert!(mask.classes().iter().all(|&c| c == 0));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny_model(3);
        let img = ramp_image(16, 24);
        let (a, _) = m.forward_scores(&img).unwrap();
        let (b, _) = m.forward_scores(&img).unwrap();
        assert!(a
            .logits
            .data()
            .iter()
            .zip(b.logits.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = tiny_model(4);
        assert!(m.forward_scores(&ramp_image(8, 24)).is_err());
    }

    #[test]
    fn predict_mask_argmax_and_ties() {
        let logits = Tensor::new(vec![1, 2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.5, 0.0]);
        let mask = predict_mask(&ScoreVolume::from_logits(logits));
        assert_eq!(mask.get(0, 0), 1);
        assert_eq!(mask.get(0, 1), 0); // tie -> smallest index
    }

    #[test]
    fn mask_invariant_under_monotone_logit_transform() {
        let m = tiny_model(5);
        let img = ramp_image(16, 24);
        let (scores, _) = m.forward_scores(&img).unwrap();
        let base = predict_mask(&scores);
        for (a, b) in [(2.0, 0.0), (0.5, 3.0), (10.0, -7.0)] {
            let warped = Tensor::new(
                scores.logits.shape().to_vec(),
                scores.logits.data().iter().map(|&v| a * v + b).collect(),
            );
            assert_eq!(predict_mask(&ScoreVolume::from_logits(warped)), base);
        }
    }

    #[test]
    fn classify_matches_mean_oracle() {
        let m = tiny_model(6);
        let img = ramp_image(16, 24);
        let (scores, _) = m.forward_scores(&img).unwrap();
        let (_, logits) = m.classify(&img).unwrap();
        // brute-force mean over all pixels
        let n = 4;
        for s in 0..n {
            let mut acc = 0.0;
            for p in 0..16 * 24 {
                acc += scores.logits.data()[p * n + s];
            }
            assert!((logits[s] - acc / (16.0 * 24.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_spatial_logits_classify_to_that_vector() {
        let logits = Tensor::new(
            vec![2, 2, 3],
            vec![1.0, -2.0, 0.5].repeat(4),
        );
        let m = mean_logits(&logits);
        assert_eq!(m, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_weight_gradient_is_zero() {
        let m = tiny_model(7);
        let img = ramp_image(16, 24).to_real();
        let target = LabelMask::filled(16, 24, 1);
        let weights = vec![0.0; 16 * 24];
        let g = m
            .input_gradient(&img, &LossSpec::Segmentation { target: &target, weights: Some(&weights) })
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_scales_linearly_with_loss() {
        let m = tiny_model(8);
        let img = ramp_image(16, 24).to_real();
        let target = LabelMask::filled(16, 24, 2);
        let w1 = vec![1.0; 16 * 24];
        let w2 = vec![2.0; 16 * 24];
        let g1 = m
            .input_gradient(&img, &LossSpec::Segmentation { target: &target, weights: Some(&w1) })
            .unwrap();
        let g2 = m
            .input_gradient(&img, &LossSpec::Segmentation { target: &target, weights: Some(&w2) })
            .unwrap();
        // uniform weights normalize out: weighting is a mean, so doubling all
        // weights leaves the gradient unchanged...
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // ...while doubling the loss itself doubles the gradient.
        let mut tape = Tape::new();
        let x = tape.leaf(img.clone());
        let fwd = m.forward_on_tape(&mut tape, x).unwrap();
        let classes: Vec<usize> = target.classes().iter().map(|&c| c as usize).collect();
        let loss = tape.softmax_cross_entropy(fwd.logits, &classes, None).unwrap();
        let doubled = tape.scale(loss, 2.0);
        let gd = tape.backward(doubled).unwrap().wrt(x);
        for (a, b) in g1.data().iter().zip(gd.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_classification_target_rejected() {
        let m = tiny_model(9);
        let img = ramp_image(16, 24).to_real();
        assert!(m.input_gradient(&img, &LossSpec::Classification { target: 9 }).is_err());
    }

    fn toy_samples() -> Vec<Sample> {
        // two-color scenes: class = brightness band
        let mut out = Vec::new();
        for s in 0..6u8 {
            let mut img = Image::zeros(16, 24, 3);
            let mut lbl = LabelMask::filled(16, 24, 0);
            for y in 0..16 {
                for x in 0..24 {
                    let c = ((y / 4 + s as usize) % 4) as u8;
                    lbl.set(y, x, c);
                    for ch in 0..3 {
                        img.set(y, x, ch, 40 + c * 50 + (x % 3) as u8);
                    }
                }
            }
            out.push(Sample { image: img, labels: lbl });
        }
        out
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let cfg = TrainConfig { epochs: 3, batch_size: 4, learning_rate: 0.05, seed: 7 };
        let mut m1 = tiny_model(10);
        let trace1 = m1.train(&toy_samples(), &cfg).unwrap();
        assert!(trace1[1] < trace1[0] && trace1[2] < trace1[1], "trace: {trace1:?}");
        let mut m2 = tiny_model(10);
        let trace2 = m2.train(&toy_samples(), &cfg).unwrap();
        assert_eq!(trace1, trace2);
        for (a, b) in m1.layers.iter().zip(&m2.layers) {
            assert_eq!(a.kernel.data(), b.kernel.data());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 0.0, seed: 3 };
        let mut m = tiny_model(11);
        let before: Vec<Vec<f64>> = m.layers.iter().map(|l| l.kernel.data().to_vec()).collect();
        m.train(&toy_samples(), &cfg).unwrap();
        for (l, b) in m.layers.iter().zip(&before) {
            assert!(l.kernel.data().iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = TrainConfig { epochs: 1, batch_size: 1, learning_rate: 0.1, seed: 0 };
        assert!(tiny_model(12).train(&[], &cfg).is_err());
    }

    #[test]
    fn adversarial_train_mix_zero_matches_plain_train() {
        let cfg = TrainConfig { epochs: 2, batch_size: 3, learning_rate: 0.05, seed: 5 };
        let mut plain = tiny_model(13);
        plain.train(&toy_samples(), &cfg).unwrap();
        let mut adv = tiny_model(13);
        adv.adversarial_train(&toy_samples(), &cfg, 4.0, 0.0).unwrap();
        for (a, b) in plain.layers.iter().zip(&adv.layers) {
            assert!(a.kernel.data().iter().zip(b.kernel.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn adversarial_train_zero_epsilon_matches_plain_train() {
        let cfg = TrainConfig { epochs: 2, batch_size: 3, learning_rate: 0.05, seed: 5 };
        let mut plain = tiny_model(14);
        plain.train(&toy_samples(), &cfg).unwrap();
        let mut adv = tiny_model(14);
        adv.adversarial_train(&toy_samples(), &cfg, 0.0, 1.0).unwrap();
        for (a, b) in plain.layers.iter().zip(&adv.layers) {
            assert!(a.kernel.data().iter().zip(b.kernel.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.segadv");
        let m = tiny_model(15);
        m.save(&path).unwrap();
        let loaded = SegModel::load(&path).unwrap();
        assert_eq!(loaded.height, m.height);
        assert_eq!(loaded.n_classes, m.n_classes);
        for (a, b) in m.layers.iter().zip(&loaded.layers) {
            assert!(a.kernel.data().iter().zip(b.kernel.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.bias.data().iter().zip(b.bias.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.segadv");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(SegModel::load(&path), Err(ModelError::Format(_))));
    }
}
