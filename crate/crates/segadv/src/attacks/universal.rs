//! Image-agnostic perturbations: accumulation of minimal per-image steps
//! over a training set, and data-free crafting by feature-norm suppression.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::segnet::SegModel;
use crate::tensor::{Tape, Tensor};
use crate::types::Image;

use super::geometry::{minimal_perturbation, Classifier, SegClassifier};
use super::perturbation::{NormP, Perturbation};
use super::AttackError;

#[derive(Clone, Copy, Debug)]
pub struct UapConfig {
    pub epsilon: f64,
    pub norm_p: NormP,
    /// Full sweeps over the training images.
    pub max_passes: usize,
    /// Iteration cap of each inner minimal-perturbation search.
    pub deepfool_iters: usize,
    pub overshoot: f64,
    /// Stop early once this fraction of training images is fooled.
    pub target_fooled: f64,
}

impl Default for UapConfig {
    fn default() -> Self {
        UapConfig {
            epsilon: 10.0,
            norm_p: NormP::Linf,
            max_passes: 5,
            deepfool_iters: 10,
            overshoot: 0.02,
            target_fooled: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UapResult {
    pub perturbation: Perturbation,
    pub fooled_fraction_train: f64,
    pub fooled_fraction_holdout: f64,
    pub passes: usize,
}

fn fooled_fraction(
    clf: &SegClassifier,
    images: &[Image],
    clean: &[usize],
    r: &Tensor,
) -> Result<f64, AttackError> {
    let mut fooled = 0usize;
    for (img, &cl) in images.iter().zip(clean) {
        let x: Vec<f64> = img.to_real().data().iter().zip(r.data()).map(|(a, b)| a + b).collect();
        if clf.predict(&x)? != cl {
            fooled += 1;
        }
    }
    Ok(fooled as f64 / images.len() as f64)
}

/// Craft a single perturbation that flips the image-level prediction of as
/// many training images as possible: sweep the images, run a minimal
/// perturbation search on each not-yet-fooled one, accumulate the step and
/// project back into the budget ball. The holdout set measures
/// generalization and must be disjoint from the training set.
pub fn craft_uap(
    model: &SegModel,
    train: &[Image],
    holdout: &[Image],
    cfg: &UapConfig,
) -> Result<UapResult, AttackError> {
    if train.is_empty() {
        return Err(AttackError::Config("training set is empty".into()));
    }
    if cfg.epsilon <= 0.0 {
        return Err(AttackError::Config("epsilon must be positive".into()));
    }
    if train.iter().any(|t| holdout.contains(t)) {
        return Err(AttackError::Config("training and holdout sets overlap".into()));
    }
    let clf = SegClassifier { model };
    let clean_train: Vec<usize> = train
        .iter()
        .map(|img| clf.predict(img.to_real().data()))
        .collect::<Result<_, _>>()?;
    let clean_holdout: Vec<usize> = holdout
        .iter()
        .map(|img| clf.predict(img.to_real().data()))
        .collect::<Result<_, _>>()?;

    let shape = vec![model.height, model.width, 3];
    let mut r = Perturbation {
        values: Tensor::zeros(shape.clone()),
        norm_p: cfg.norm_p,
        epsilon: cfg.epsilon,
    };
    let mut passes = 0;
    let mut train_frac = fooled_fraction(&clf, train, &clean_train, &r.values)?;
    while passes < cfg.max_passes && train_frac < cfg.target_fooled {
        passes += 1;
        for (img, &cl) in train.iter().zip(&clean_train) {
            let x: Vec<f64> =
                img.to_real().data().iter().zip(r.values.data()).map(|(a, b)| a + b).collect();
            if clf.predict(&x)? != cl {
                continue;
            }
            let step = minimal_perturbation(&clf, &x, cfg.deepfool_iters, cfg.overshoot)?;
            if !step.success {
                continue;
            }
            for (v, d) in r.values.data_mut().iter_mut().zip(&step.perturbation) {
                *v += d;
            }
            r.project();
        }
        train_frac = fooled_fraction(&clf, train, &clean_train, &r.values)?;
    }
    let holdout_frac = if holdout.is_empty() {
        0.0
    } else {
        fooled_fraction(&clf, holdout, &clean_holdout, &r.values)?
    };
    r.check_budget()?;
    Ok(UapResult {
        perturbation: r,
        fooled_fraction_train: train_frac,
        fooled_fraction_holdout: holdout_frac,
        passes,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct FffConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for FffConfig {
    fn default() -> Self {
        FffConfig { epsilon: 10.0, steps: 40, step_size: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct FffResult {
    pub perturbation: Perturbation,
    /// Objective value per iteration, entry 0 is the initial value.
    pub loss_trace: Vec<f64>,
}

/// Data-free crafting: descend on J(r) = -sum_l ln ||f_l(128 + r)||_2, the
/// summed negative log norms of all post-activation feature maps, keeping r
/// inside the l-inf ball by clamping after every signed-gradient step of
/// constant size. Signed steps match the l-inf geometry and drive r toward
/// a coherent corner of the ball instead of leaving it at its noise
/// initialization. The mid-gray base image stands in for unavailable data.
pub fn fff_uap(model: &SegModel, cfg: &FffConfig) -> Result<FffResult, AttackError> {
    if cfg.epsilon <= 0.0 {
        return Err(AttackError::Config("epsilon must be positive".into()));
    }
    if cfg.steps == 0 || cfg.step_size <= 0.0 {
        return Err(AttackError::Config("steps and step size must be positive".into()));
    }
    let shape = vec![model.height, model.width, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // small seed-dependent jitter; the signed steps dominate it quickly
    let jitter = cfg.epsilon / 10.0;
    let init: Vec<f64> =
        (0..shape.iter().product()).map(|_| rng.gen_range(-jitter..=jitter)).collect();
    let mut r = Tensor::new(shape.clone(), init);
    let base = Tensor::full(shape.clone(), 128.0);

    let evaluate = |r: &Tensor, need_grad: bool| -> Result<(f64, Option<Tensor>, bool), AttackError> {
        let mut tape = Tape::new();
        let rv = tape.leaf(r.clone());
        let bv = tape.leaf(base.clone());
        let x = tape.add(rv, bv)?;
        let fwd = model.forward_on_tape(&mut tape, x)?;
        let all_dead = fwd.taps.iter().all(|&t| tape.value(t).l2_norm() == 0.0);
        let mut total = None;
        for &tap in &fwd.taps {
            let term = tape.neg_log_l2(tap);
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let loss = total.expect("network has feature taps");
        let value = tape.value(loss).item();
        let grad = if need_grad { Some(tape.backward(loss)?.wrt(rv)) } else { None };
        Ok((value, grad, all_dead))
    };

    let (first, _, all_dead) = evaluate(&r, false)?;
    if all_dead {
        return Err(AttackError::DeadNetwork);
    }
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(first);
    for _ in 0..cfg.steps {
        let (_, grad, _) = evaluate(&r, true)?;
        let grad = grad.unwrap();
        for (v, g) in r.data_mut().iter_mut().zip(grad.data()) {
            let s = if *g > 0.0 { 1.0 } else if *g < 0.0 { -1.0 } else { 0.0 };
            *v = (*v - cfg.step_size * s).clamp(-cfg.epsilon, cfg.epsilon);
        }
        let (value, _, _) = evaluate(&r, false)?;
        trace.push(value);
    }
    let perturbation = Perturbation::new(r, NormP::Linf, cfg.epsilon)?;
    Ok(FffResult { perturbation, loss_trace: trace })
}
