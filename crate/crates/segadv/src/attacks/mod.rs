//! Adversarial example and universal perturbation crafting.

mod geometry;
mod perturbation;
mod targets;
mod universal;

pub use geometry::{
    cw_attack, minimal_perturbation, Classifier, CwResult, DeepFoolResult, LinearClassifier,
    SegClassifier,
};
pub use perturbation::{NormP, Perturbation};
pub use targets::{build_dnnm_target, least_likely_targets};
pub use universal::{craft_uap, fff_uap, FffConfig, FffResult, UapConfig, UapResult};

use std::io;

use thiserror::Error;

use crate::segnet::{predict_mask, sign, LossSpec, ModelError, SegModel};
use crate::tensor::{Tensor, TensorError};
use crate::types::{clip_quantize, Image, LabelMask};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("step size {0} exceeds the gray-value range")]
    DegenerateStep(f64),
    #[error("perturbation norm {norm} exceeds budget {epsilon}")]
    BudgetViolation { norm: f64, epsilon: f64 },
    #[error("mask consists entirely of objective class {0}; no donor class exists")]
    NoDonorClass(u8),
    #[error("all feature norms are zero at initialization; network is dead")]
    DeadNetwork,
    #[error("bad file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Direction of the gradient step: ascend increases the loss (untargeted),
/// descend decreases it toward an explicit target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

/// Step size, budget and schedule of a gradient-sign attack. Units are gray
/// values.
#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub norm_p: NormP,
    pub iterations: Option<usize>,
    pub direction: Direction,
    pub seed: u64,
}

impl AttackConfig {
    pub fn ascend(lambda: f64, epsilon: f64) -> Self {
        AttackConfig { lambda, epsilon, norm_p: NormP::Linf, iterations: None, direction: Direction::Ascend, seed: 0 }
    }

    pub fn descend(lambda: f64, epsilon: f64) -> Self {
        AttackConfig { lambda, epsilon, norm_p: NormP::Linf, iterations: None, direction: Direction::Descend, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.lambda <= 0.0 {
            return Err(AttackError::Config("lambda must be positive".into()));
        }
        if self.lambda > 255.0 {
            return Err(AttackError::DegenerateStep(self.lambda));
        }
        if self.norm_p == NormP::Linf && self.epsilon < self.lambda {
            return Err(AttackError::Config("epsilon must be >= lambda for the l-inf budget".into()));
        }
        if self.iterations == Some(0) {
            return Err(AttackError::Config("iterations must be >= 1 when given".into()));
        }
        Ok(())
    }

    /// Default iteration count: floor(min(epsilon + 4, 1.25 * epsilon)).
    pub fn iteration_budget(&self) -> usize {
        self.iterations
            .unwrap_or_else(|| ((self.epsilon + 4.0).min(1.25 * self.epsilon)).floor() as usize)
    }
}

/// Target selector for [`iterative_attack`].
pub enum IterTarget<'a> {
    /// Ascend on the loss toward the model's own clean prediction.
    OwnPrediction,
    /// Descend toward the least-likely mask of the clean image, fixed once.
    LeastLikely,
    /// Descend toward an explicit mask.
    Mask(&'a LabelMask),
}

/// Single signed-gradient ascent step on the training loss, with the model's
/// own prediction as the label source.
pub fn fgsm(model: &SegModel, image: &Image, cfg: &AttackConfig) -> Result<(Image, Perturbation), AttackError> {
    cfg.validate()?;
    if cfg.direction != Direction::Ascend {
        return Err(AttackError::Config("fgsm is untargeted; direction must be ascend".into()));
    }
    let real = image.to_real();
    let (scores, _) = model.forward_scores_real(&real)?;
    let target = predict_mask(&scores);
    let grad = model.input_gradient(&real, &LossSpec::Segmentation { target: &target, weights: None })?;
    let stepped: Vec<f64> = real
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| x + cfg.lambda * sign(g))
        .collect();
    let adv = clip_quantize(&Tensor::new(real.shape().to_vec(), stepped));
    let diff: Vec<f64> = adv
        .to_real()
        .data()
        .iter()
        .zip(real.data())
        .map(|(a, b)| a - b)
        .collect();
    let pert = Perturbation::new(
        Tensor::new(real.shape().to_vec(), diff),
        NormP::Linf,
        cfg.lambda.max(cfg.epsilon),
    )?;
    Ok((adv, pert))
}

/// Iterated signed-gradient steps with an l-inf ball projection around the
/// clean image after every step. Works on a real-valued image; quantization
/// to integer gray values happens once at the end. Returns the adversarial
/// image and the per-iteration loss trace (entry 0 is the clean loss).
pub fn iterative_attack(
    model: &SegModel,
    image: &Image,
    cfg: &AttackConfig,
    target: IterTarget,
) -> Result<(Image, Vec<f64>), AttackError> {
    cfg.validate()?;
    let clean = image.to_real();
    let target_mask: LabelMask;
    let loss_target = match (&target, cfg.direction) {
        (IterTarget::OwnPrediction, Direction::Ascend) => {
            let (scores, _) = model.forward_scores_real(&clean)?;
            target_mask = predict_mask(&scores);
            &target_mask
        }
        (IterTarget::LeastLikely, Direction::Descend) => {
            let (scores, _) = model.forward_scores_real(&clean)?;
            target_mask = least_likely_targets(&scores);
            &target_mask
        }
        (IterTarget::Mask(m), Direction::Descend) => {
            if m.height != model.height || m.width != model.width {
                return Err(AttackError::Config("target mask dimensions mismatch".into()));
            }
            *m
        }
        (IterTarget::OwnPrediction, Direction::Descend) => {
            return Err(AttackError::Config(
                "descending toward the own prediction is a no-op; pass an explicit target".into(),
            ))
        }
        (_, Direction::Ascend) => {
            return Err(AttackError::Config("ascend uses the model's own prediction".into()))
        }
    };

    let step_sign = match cfg.direction {
        Direction::Ascend => 1.0,
        Direction::Descend => -1.0,
    };
    let spec = LossSpec::Segmentation { target: loss_target, weights: None };
    let mut working = clean.clone();
    let mut trace = Vec::with_capacity(cfg.iteration_budget() + 1);
    trace.push(model.loss(&working, &spec)?);
    for _ in 0..cfg.iteration_budget() {
        let grad = model.input_gradient(&working, &spec)?;
        let stepped: Vec<f64> = working
            .data()
            .iter()
            .zip(grad.data())
            .zip(clean.data())
            .map(|((&x, &g), &orig)| {
                // step, then project to the epsilon ball and the gray range
                (x + step_sign * cfg.lambda * sign(g))
                    .clamp(orig - cfg.epsilon, orig + cfg.epsilon)
                    .clamp(0.0, 255.0)
            })
            .collect();
        working = Tensor::new(working.shape().to_vec(), stepped);
        trace.push(model.loss(&working, &spec)?);
    }
    Ok((clip_quantize(&working), trace))
}

/// Targeted descent toward a fixed fake mask taken from another scene.
pub fn ssmm_attack(
    model: &SegModel,
    image: &Image,
    fake_mask: &LabelMask,
    cfg: &AttackConfig,
) -> Result<Image, AttackError> {
    if cfg.direction != Direction::Descend {
        return Err(AttackError::Config("ssmm is targeted; direction must be descend".into()));
    }
    let (adv, _) = iterative_attack(model, image, cfg, IterTarget::Mask(fake_mask))?;
    Ok(adv)
}

/// Removes one objective class from the scene: builds the nearest-neighbor
/// target from the model's clean prediction, then descends toward it.
pub fn dnnm_attack(
    model: &SegModel,
    image: &Image,
    objective_class: u8,
    cfg: &AttackConfig,
) -> Result<(Image, LabelMask), AttackError> {
    let (scores, _) = model.forward_scores(image)?;
    let clean_pred = predict_mask(&scores);
    if clean_pred.classes().iter().all(|&c| c != objective_class) {
        return Ok((image.clone(), clean_pred));
    }
    let target = build_dnnm_target(&clean_pred, objective_class)?;
    let adv = ssmm_attack(model, image, &target, cfg)?;
    Ok((adv, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegModel;

    fn model() -> SegModel {
        SegModel::new(16, 24, 4, 31)
    }

    fn test_image(seed: usize) -> Image {
        Image::new(16, 24, 3, (0..16 * 24 * 3).map(|i| ((i * 5 + seed * 13) % 256) as u8).collect())
    }

    #[test]
    fn iteration_budget_footnote_values() {
        for (eps, expect) in [(4.0, 5), (8.0, 10), (16.0, 20)] {
            let cfg = AttackConfig::ascend(1.0, eps);
            assert_eq!(cfg.iteration_budget(), expect);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::ascend(0.0, 8.0).validate().is_err());
        assert!(matches!(
            AttackConfig::ascend(300.0, 300.0).validate(),
            Err(AttackError::DegenerateStep(_))
        ));
        assert!(AttackConfig::ascend(4.0, 2.0).validate().is_err());
        let mut cfg = AttackConfig::ascend(1.0, 8.0);
        cfg.iterations = Some(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fgsm_step_changes_channels_by_lambda() {
        let m = model();
        let img = test_image(0);
        let cfg = AttackConfig::ascend(1.0, 1.0);
        let (adv, pert) = fgsm(&m, &img, &cfg).unwrap();
        assert!(adv.linf_distance(&img) <= 1);
        // every non-clipped nonzero change is exactly +-1
        for (&a, &b) in adv.data().iter().zip(img.data()) {
            assert!((a as i16 - b as i16).abs() <= 1);
        }
        assert!(pert.check_budget().is_ok());
    }

    #[test]
    fn fgsm_zero_gradient_is_identity() {
        let mut m = model();
        m.zero_parameters();
        let img = test_image(1);
        let cfg = AttackConfig::ascend(4.0, 4.0);
        let (adv, _) = fgsm(&m, &img, &cfg).unwrap();
        assert_eq!(adv, img); // sign(0) = 0
    }

    #[test]
    fn fgsm_is_deterministic() {
        let m = model();
        let img = test_image(2);
        let cfg = AttackConfig::ascend(2.0, 2.0);
        let (a, _) = fgsm(&m, &img, &cfg).unwrap();
        let (b, _) = fgsm(&m, &img, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iterative_budget_enforced_exactly() {
        let m = model();
        let img = test_image(3);
        let cfg = AttackConfig::ascend(1.0, 8.0);
        let (adv, trace) = iterative_attack(&m, &img, &cfg, IterTarget::OwnPrediction).unwrap();
        assert!(adv.linf_distance(&img) <= 8);
        assert_eq!(trace.len(), 11);
    }

    #[test]
    fn iterative_llcm_descends_loss() {
        let m = model();
        let img = test_image(4);
        let cfg = AttackConfig::descend(1.0, 8.0);
        let (_, trace) = iterative_attack(&m, &img, &cfg, IterTarget::LeastLikely).unwrap();
        assert!(trace.last().unwrap() < trace.first().unwrap());
    }

    #[test]
    fn small_step_trace_is_monotone() {
        let m = model();
        let cfg = AttackConfig { lambda: 0.25, epsilon: 8.0, iterations: Some(10), ..AttackConfig::descend(0.25, 8.0) };
        for seed in 0..10 {
            let img = test_image(seed);
            let (_, trace) =
                iterative_attack(&m, &img, &cfg, IterTarget::LeastLikely).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "trace not monotone: {trace:?}");
            }
        }
    }

    #[test]
    fn ssmm_self_target_is_objective_noop() {
        let m = model();
        let img = test_image(5);
        let (scores, _) = m.forward_scores(&img).unwrap();
        let own = predict_mask(&scores);
        let cfg = AttackConfig::descend(1.0, 10.0);
        let adv = ssmm_attack(&m, &img, &own, &cfg).unwrap();
        let (adv_scores, _) = m.forward_scores(&adv).unwrap();
        let self_agreement = predict_mask(&adv_scores).agreement(&own);
        // a random-target run cannot agree with `own` better than self-targeting
        let random_target = LabelMask::new(16, 24, (0..16 * 24).map(|i| (i % 4) as u8).collect());
        let adv_rand = ssmm_attack(&m, &img, &random_target, &cfg).unwrap();
        let (rand_scores, _) = m.forward_scores(&adv_rand).unwrap();
        let rand_agreement = predict_mask(&rand_scores).agreement(&own);
        assert!(self_agreement >= rand_agreement);
        assert!(adv.linf_distance(&img) <= 10);
    }

    #[test]
    fn dnnm_absent_class_returns_clean() {
        let m = model();
        let img = test_image(6);
        let (scores, _) = m.forward_scores(&img).unwrap();
        let pred = predict_mask(&scores);
        // find a class id absent from the prediction
        let absent = (0..4u8).find(|c| pred.classes().iter().all(|p| p != c));
        if let Some(absent) = absent {
            let cfg = AttackConfig::descend(1.0, 10.0);
            let (adv, target) = dnnm_attack(&m, &img, absent, &cfg).unwrap();
            assert_eq!(adv, img);
            assert_eq!(target, pred);
        }
    }

    #[test]
    fn dnnm_target_preserves_non_objective_pixels() {
        // find a seed whose clean prediction contains at least two classes,
        // so a donor exists for the objective
        let (m, img, pred) = (0..100u64)
            .find_map(|s| {
                let m = SegModel::new(16, 24, 4, s);
                let img = test_image(s as usize);
                let (scores, _) = m.forward_scores(&img).unwrap();
                let pred = predict_mask(&scores);
                let first = pred.classes()[0];
                pred.classes().iter().any(|&c| c != first).then_some((m, img, pred))
            })
            .expect("no multi-class prediction found");
        let objective = pred.classes()[0];
        let (scores, _) = m.forward_scores(&img).unwrap();
        assert_eq!(predict_mask(&scores), pred);
        let cfg = AttackConfig::descend(1.0, 10.0);
        let (adv, target) = dnnm_attack(&m, &img, objective, &cfg).unwrap();
        for (i, (&t, &p)) in target.classes().iter().zip(pred.classes()).enumerate() {
            if p != objective {
                assert_eq!(t, p, "pixel {i}");
            } else {
                assert_ne!(t, objective);
            }
        }
        assert!(adv.linf_distance(&img) <= 10);
    }
}
