//! Segmentation quality and attack-strength measurement.

use thiserror::Error;

use crate::segnet::{ModelError, SegModel};
use crate::tensor::Tensor;
use crate::types::{clip_quantize, Image, LabelMask};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class id {0} out of range")]
    InvalidClass(usize),
    #[error("mIoU undefined: no pixels accumulated")]
    Empty,
    #[error("clean mIoU must be positive")]
    ZeroCleanMiou,
    #[error("empty image set")]
    EmptyImageSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Row = ground-truth class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-pixel tally; pixels whose truth equals `ignore_class` are skipped.
    pub fn accumulate(
        &mut self,
        pred: &LabelMask,
        truth: &LabelMask,
        ignore_class: Option<u8>,
    ) -> Result<(), MetricError> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(MetricError::ShapeMismatch(format!(
                "pred {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        for (&p, &t) in pred.classes().iter().zip(truth.classes()) {
            if Some(t) == ignore_class {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.n_classes {
                return Err(MetricError::InvalidClass(p));
            }
            if t >= self.n_classes {
                return Err(MetricError::InvalidClass(t));
            }
            self.counts[t * self.n_classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; merging per-image matrices is associative and
    /// commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n_classes, other.n_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Mean over classes of TP/(TP+FP+FN). Classes absent from both truth
    /// and prediction are excluded from the mean.
    pub fn miou(&self) -> Result<f64, MetricError> {
        if self.total() == 0 {
            return Err(MetricError::Empty);
        }
        let n = self.n_classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for s in 0..n {
            let tp = self.count(s, s);
            let fp: u64 = (0..n).map(|t| self.count(t, s)).sum::<u64>() - tp;
            let fn_: u64 = (0..n).map(|p| self.count(s, p)).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            if denom == 0 {
                continue;
            }
            sum += tp as f64 / denom as f64;
            present += 1;
        }
        Ok(sum / present as f64)
    }
}

/// Q = mIoU_adv / mIoU_clean.
pub fn miou_ratio(miou_adv: f64, miou_clean: f64) -> Result<f64, MetricError> {
    if miou_clean <= 0.0 {
        return Err(MetricError::ZeroCleanMiou);
    }
    Ok(miou_adv / miou_clean)
}

/// Fraction of images whose image-level prediction changes when the
/// perturbation is added (and the result clipped/quantized back to a valid
/// image).
pub fn fooling_rate(
    model: &SegModel,
    images: &[Image],
    perturbation: &Tensor,
) -> Result<f64, MetricError> {
    if images.is_empty() {
        return Err(MetricError::EmptyImageSet);
    }
    let mut fooled = 0usize;
    for img in images {
        let (clean, _) = model.classify(img)?;
        let real = img.to_real();
        let perturbed: Vec<f64> = real
            .data()
            .iter()
            .zip(perturbation.data())
            .map(|(a, b)| a + b)
            .collect();
        let adv = clip_quantize(&Tensor::new(real.shape().to_vec(), perturbed));
        let (advc, _) = model.classify(&adv)?;
        if advc != clean {
            fooled += 1;
        }
    }
    Ok(fooled as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, classes: &[u8]) -> LabelMask {
        LabelMask::new(h, w, classes.to_vec())
    }

    #[test]
    fn accumulate_diagonal() {
        let mut cm = ConfusionMatrix::new(5);
        let m = LabelMask::filled(2, 4, 3);
        cm.accumulate(&m, &m, None).unwrap();
        assert_eq!(cm.count(3, 3), 8);
        assert_eq!(cm.total(), 8);
    }

    #[test]
    fn all_ignored_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        let truth = LabelMask::filled(2, 2, 1);
        let pred = LabelMask::filled(2, 2, 2);
        cm.accumulate(&pred, &truth, Some(1)).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn accumulate_matches_brute_force_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = 4usize;
            let (h, w) = (5, 7);
            let truth: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..n as u8)).collect();
            let pred: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..n as u8)).collect();
            let mut cm = ConfusionMatrix::new(n);
            cm.accumulate(&mask(h, w, &pred), &mask(h, w, &truth), None).unwrap();
            let mut tally = vec![0u64; n * n];
            for i in 0..h * w {
                tally[truth[i] as usize * n + pred[i] as usize] += 1;
            }
            for t in 0..n {
                for p in 0..n {
                    assert_eq!(cm.count(t, p), tally[t * n + p]);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        let a = LabelMask::filled(2, 2, 0);
        let b = LabelMask::filled(2, 3, 0);
        assert!(matches!(cm.accumulate(&a, &b, None), Err(MetricError::ShapeMismatch(_))));
    }

    #[test]
    fn perfect_prediction_is_one() {
        let mut cm = ConfusionMatrix::new(4);
        let m = mask(2, 2, &[0, 1, 2, 3]);
        cm.accumulate(&m, &m, None).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn hand_example_is_seven_twelfths() {
        let mut cm = ConfusionMatrix::new(2);
        let truth = mask(1, 4, &[0, 0, 1, 1]);
        let pred = mask(1, 4, &[0, 1, 1, 1]);
        cm.accumulate(&pred, &truth, None).unwrap();
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_prediction_is_zero() {
        let mut cm = ConfusionMatrix::new(2);
        let truth = mask(1, 4, &[0, 0, 0, 0]);
        let pred = mask(1, 4, &[1, 1, 1, 1]);
        cm.accumulate(&pred, &truth, None).unwrap();
        assert_eq!(cm.miou().unwrap(), 0.0);
    }

    #[test]
    fn empty_matrix_is_undefined() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(cm.miou(), Err(MetricError::Empty)));
    }

    #[test]
    fn ratio_examples() {
        assert!((miou_ratio(0.046, 0.673).unwrap() - 0.0683).abs() < 5e-4);
        assert!((miou_ratio(0.576, 0.673).unwrap() - 0.8559).abs() < 5e-4);
        assert_eq!(miou_ratio(0.5, 0.5).unwrap(), 1.0);
        assert!(miou_ratio(0.5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn miou_permutation_equivariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4usize;
            let (h, w) = (4, 6);
            let truth: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..n as u8)).collect();
            let pred: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..n as u8)).collect();
            let mut perm: Vec<u8> = (0..n as u8).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let mut cm = ConfusionMatrix::new(n);
            cm.accumulate(&mask(h, w, &pred), &mask(h, w, &truth), None).unwrap();
            let relabel = |v: &[u8]| -> Vec<u8> { v.iter().map(|&c| perm[c as usize]).collect() };
            let mut cm2 = ConfusionMatrix::new(n);
            cm2.accumulate(&mask(h, w, &relabel(&pred)), &mask(h, w, &relabel(&truth)), None).unwrap();
            let (a, b) = (cm.miou().unwrap(), cm2.miou().unwrap());
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn accumulate_is_additive(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3usize;
            let (h, w) = (3, 5);
            let gen = |rng: &mut ChaCha8Rng| -> Vec<u8> { (0..h * w).map(|_| rng.gen_range(0..n as u8)).collect() };
            let (t1, p1, t2, p2) = (gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let mut joint = ConfusionMatrix::new(n);
            joint.accumulate(&mask(h, w, &p1), &mask(h, w, &t1), None).unwrap();
            joint.accumulate(&mask(h, w, &p2), &mask(h, w, &t2), None).unwrap();
            let mut a = ConfusionMatrix::new(n);
            a.accumulate(&mask(h, w, &p1), &mask(h, w, &t1), None).unwrap();
            let mut b = ConfusionMatrix::new(n);
            b.accumulate(&mask(h, w, &p2), &mask(h, w, &t2), None).unwrap();
            a.merge(&b);
            prop_assert_eq!(joint, a);
        }
    }

    #[test]
    fn zero_perturbation_fools_nobody() {
        let model = SegModel::new(16, 24, 4, 21);
        let images: Vec<Image> = (0..3)
            .map(|k| {
                Image::new(16, 24, 3, (0..16 * 24 * 3).map(|i| ((i + k * 31) % 256) as u8).collect())
            })
            .collect();
        let zero = Tensor::zeros(vec![16, 24, 3]);
        assert_eq!(fooling_rate(&model, &images, &zero).unwrap(), 0.0);
        assert!(fooling_rate(&model, &[], &zero).is_err());
    }

    #[test]
    fn fooling_rate_matches_direct_loop() {
        let model = SegModel::new(16, 24, 4, 22);
        let images: Vec<Image> = (0..4)
            .map(|k| {
                Image::new(16, 24, 3, (0..16 * 24 * 3).map(|i| ((i * 3 + k * 57) % 256) as u8).collect())
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pert = Tensor::new(
            vec![16, 24, 3],
            (0..16 * 24 * 3).map(|_| rng.gen_range(-60.0..60.0)).collect(),
        );
        let rate = fooling_rate(&model, &images, &pert).unwrap();
        let mut fooled = 0;
        for img in &images {
            let real = img.to_real();
            let adv: Vec<f64> = real.data().iter().zip(pert.data()).map(|(a, b)| a + b).collect();
            let adv = clip_quantize(&Tensor::new(vec![16, 24, 3], adv));
            if model.classify(&adv).unwrap().0 != model.classify(img).unwrap().0 {
                fooled += 1;
            }
        }
        assert_eq!(rate, fooled as f64 / images.len() as f64);
    }
}
