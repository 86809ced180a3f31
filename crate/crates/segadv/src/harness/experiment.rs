//! Experiment orchestration: epsilon sweeps of one attack over a split,
//! optional defense pipelines, per-image and aggregate measurement.

use std::time::Instant;

use rayon::prelude::*;

use crate::attacks::{
    dnnm_attack, fgsm, iterative_attack, AttackConfig, IterTarget, Perturbation,
};
use crate::defenses::{defend, NlmConfig, PatchDatabase, Stage};
use crate::metrics::ConfusionMatrix;
use crate::segnet::{predict_mask, Sample, SegModel};
use crate::tensor::Tensor;
use crate::types::{clip_quantize, Image, LabelMask};

use super::dataset::render_mask;
use super::report::{self, concat_panels, ResultTable, Row};
use super::HarnessError;

/// Which attack the sweep runs.
#[derive(Clone, Debug)]
pub enum AttackKind {
    Fgsm,
    /// Least-likely-class descent; single-step when `iterations` is 1.
    Llcm,
    /// Descent toward the label mask of another scene in the split.
    Ssmm,
    /// Removal of one objective class.
    Dnnm(u8),
    /// A precomputed universal perturbation applied additively.
    Universal { name: String, perturbation: Perturbation },
}

impl AttackKind {
    pub fn name(&self) -> &str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Llcm => "llcm",
            AttackKind::Ssmm => "ssmm",
            AttackKind::Dnnm(_) => "dnnm",
            AttackKind::Universal { name, .. } => name,
        }
    }
}

/// Step-size policy across the sweep.
#[derive(Clone, Copy, Debug)]
pub enum LambdaPolicy {
    /// Non-iterative convention: lambda = epsilon.
    EqualsEpsilon,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub split_name: String,
    pub attack: AttackKind,
    pub epsilons: Vec<f64>,
    pub lambda: LambdaPolicy,
    pub iterations: Option<usize>,
    pub pipelines: Vec<Vec<Stage>>,
    pub nlm: NlmConfig,
    pub quilt_db: Option<PatchDatabase>,
    /// When false, wallclock_ms is written as 0 so reruns are byte-identical.
    pub record_timing: bool,
    /// Number of leading images to render as mask panels per epsilon.
    pub panel_count: usize,
}

impl ExperimentConfig {
    pub fn new(split_name: &str, attack: AttackKind, epsilons: Vec<f64>) -> Self {
        ExperimentConfig {
            split_name: split_name.to_string(),
            attack,
            epsilons,
            lambda: LambdaPolicy::EqualsEpsilon,
            iterations: None,
            pipelines: Vec::new(),
            nlm: NlmConfig::default(),
            quilt_db: None,
            record_timing: false,
            panel_count: 0,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.epsilons.is_empty() {
            return Err(HarnessError::Config("epsilon sweep is empty".into()));
        }
        if self.epsilons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(HarnessError::Config("epsilon sweep must be strictly increasing".into()));
        }
        if self.pipelines.iter().any(|p| p.contains(&Stage::Quilt)) && self.quilt_db.is_none() {
            return Err(HarnessError::Config("quilt pipeline requires a patch database".into()));
        }
        if let AttackKind::Universal { perturbation, .. } = &self.attack {
            if self.epsilons != [perturbation.epsilon] {
                return Err(HarnessError::Config(
                    "universal attack sweep must equal the perturbation's epsilon".into(),
                ));
            }
        }
        Ok(())
    }

    fn lambda_for(&self, epsilon: f64) -> f64 {
        match self.lambda {
            LambdaPolicy::EqualsEpsilon => epsilon,
            LambdaPolicy::Fixed(l) => l,
        }
    }
}

pub fn pipeline_name(stages: &[Stage]) -> String {
    stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+")
}

fn per_image_miou(
    pred: &LabelMask,
    truth: &LabelMask,
    n_classes: usize,
) -> Result<(f64, ConfusionMatrix), HarnessError> {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.accumulate(pred, truth, None)?;
    Ok((cm.miou()?, cm))
}

/// Craft the adversarial counterpart of one split image (also used by the
/// CLI attack subcommand).
pub fn craft_one(
    model: &SegModel,
    samples: &[Sample],
    index: usize,
    cfg: &ExperimentConfig,
    epsilon: f64,
) -> Result<Image, HarnessError> {
    craft_adversarial(model, samples, index, cfg, epsilon)
}

struct ImageOutcome {
    adv_pred: LabelMask,
    miou_adv: f64,
    cm_adv: ConfusionMatrix,
    defended: Vec<(f64, ConfusionMatrix, LabelMask)>, // one per pipeline
    wallclock_ms: u64,
}

fn craft_adversarial(
    model: &SegModel,
    samples: &[Sample],
    index: usize,
    cfg: &ExperimentConfig,
    epsilon: f64,
) -> Result<Image, HarnessError> {
    let image = &samples[index].image;
    if epsilon == 0.0 {
        return Ok(image.clone());
    }
    let lambda = cfg.lambda_for(epsilon);
    let adv = match &cfg.attack {
        AttackKind::Fgsm => {
            let mut ac = AttackConfig::ascend(lambda, epsilon);
            ac.iterations = cfg.iterations;
            fgsm(model, image, &ac)?.0
        }
        AttackKind::Llcm => {
            let mut ac = AttackConfig::descend(lambda, epsilon);
            ac.iterations = cfg.iterations;
            iterative_attack(model, image, &ac, IterTarget::LeastLikely)?.0
        }
        AttackKind::Ssmm => {
            let donor = &samples[(index + 1) % samples.len()].labels;
            let mut ac = AttackConfig::descend(lambda, epsilon);
            ac.iterations = cfg.iterations;
            iterative_attack(model, image, &ac, IterTarget::Mask(donor))?.0
        }
        AttackKind::Dnnm(objective) => {
            let mut ac = AttackConfig::descend(lambda, epsilon);
            ac.iterations = cfg.iterations;
            dnnm_attack(model, image, *objective, &ac)?.0
        }
        AttackKind::Universal { perturbation, .. } => {
            let real = image.to_real();
            let sum: Vec<f64> = real
                .data()
                .iter()
                .zip(perturbation.values.data())
                .map(|(a, b)| a + b)
                .collect();
            clip_quantize(&Tensor::new(real.shape().to_vec(), sum))
        }
    };
    Ok(adv)
}

/// Run the epsilon sweep over the split: clean evaluation once, attack and
/// optional defenses per image, per-image rows plus merged-confusion
/// aggregates, and palette mask panels for the first images.
pub fn run_experiment(
    model: &SegModel,
    samples: &[Sample],
    cfg: &ExperimentConfig,
) -> Result<ResultTable, HarnessError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(HarnessError::Data("empty evaluation split".into()));
    }
    let n = model.n_classes;

    // clean evaluation cache: computed exactly once per (model, split)
    let clean: Vec<(LabelMask, f64, ConfusionMatrix)> = samples
        .par_iter()
        .map(|s| -> Result<_, HarnessError> {
            let (scores, _) = model.forward_scores(&s.image)?;
            let pred = predict_mask(&scores);
            let (miou, cm) = per_image_miou(&pred, &s.labels, n)?;
            Ok((pred, miou, cm))
        })
        .collect::<Result<_, _>>()?;
    let mut clean_merged = ConfusionMatrix::new(n);
    for (_, _, cm) in &clean {
        clean_merged.merge(cm);
    }
    let clean_agg = clean_merged.miou()?;

    let mut table = ResultTable::default();
    for &epsilon in &cfg.epsilons {
        let outcomes: Vec<ImageOutcome> = (0..samples.len())
            .into_par_iter()
            .map(|i| -> Result<ImageOutcome, HarnessError> {
                let start = Instant::now();
                let adv = craft_adversarial(model, samples, i, cfg, epsilon)
                    .map_err(|e| HarnessError::Stage {
                        image_id: format!("{i:04}"),
                        stage: cfg.attack.name().to_string(),
                        message: e.to_string(),
                    })?;
                let wallclock_ms =
                    if cfg.record_timing { start.elapsed().as_millis() as u64 } else { 0 };
                let (scores, _) = model.forward_scores(&adv)?;
                let adv_pred = predict_mask(&scores);
                let (miou_adv, cm_adv) = per_image_miou(&adv_pred, &samples[i].labels, n)?;
                let mut defended = Vec::with_capacity(cfg.pipelines.len());
                for pipeline in &cfg.pipelines {
                    let def = defend(&adv, pipeline, &cfg.nlm, cfg.quilt_db.as_ref()).map_err(
                        |e| HarnessError::Stage {
                            image_id: format!("{i:04}"),
                            stage: pipeline_name(pipeline),
                            message: e.to_string(),
                        },
                    )?;
                    let (scores, _) = model.forward_scores(&def)?;
                    let pred = predict_mask(&scores);
                    let (miou, cm) = per_image_miou(&pred, &samples[i].labels, n)?;
                    defended.push((miou, cm, pred));
                }
                Ok(ImageOutcome { adv_pred, miou_adv, cm_adv, defended, wallclock_ms })
            })
            .collect::<Result<_, _>>()?;

        // per-image rows, dataset order
        for (i, out) in outcomes.iter().enumerate() {
            let miou_clean = clean[i].1;
            let q = (miou_clean > 0.0).then(|| out.miou_adv / miou_clean);
            let base = Row {
                split: cfg.split_name.clone(),
                image_id: format!("{i:04}"),
                attack: cfg.attack.name().to_string(),
                epsilon,
                lambda: cfg.lambda_for(epsilon),
                defense: "none".into(),
                miou_clean,
                miou_adv: out.miou_adv,
                miou_def: None,
                q,
                wallclock_ms: out.wallclock_ms,
            };
            table.rows.push(base.clone());
            for (p, (miou_def, _, _)) in out.defended.iter().enumerate() {
                table.rows.push(Row {
                    defense: pipeline_name(&cfg.pipelines[p]),
                    miou_def: Some(*miou_def),
                    ..base.clone()
                });
            }
        }

        // merged-confusion aggregates
        let mut adv_merged = ConfusionMatrix::new(n);
        for out in &outcomes {
            adv_merged.merge(&out.cm_adv);
        }
        let adv_agg = adv_merged.miou()?;
        table.aggregates.push(report::Aggregate {
            attack: cfg.attack.name().to_string(),
            epsilon,
            defense: "none".into(),
            miou_clean: clean_agg,
            miou_adv: adv_agg,
            miou_def: None,
        });
        for (p, pipeline) in cfg.pipelines.iter().enumerate() {
            let mut def_merged = ConfusionMatrix::new(n);
            for out in &outcomes {
                def_merged.merge(&out.defended[p].1);
            }
            table.aggregates.push(report::Aggregate {
                attack: cfg.attack.name().to_string(),
                epsilon,
                defense: pipeline_name(pipeline),
                miou_clean: clean_agg,
                miou_adv: adv_agg,
                miou_def: Some(def_merged.miou()?),
            });
        }

        // mask panels: clean / adversarial / defended predictions
        for (i, out) in outcomes.iter().take(cfg.panel_count).enumerate() {
            let clean_img = render_mask(&clean[i].0);
            let adv_img = render_mask(&out.adv_pred);
            let mut parts = vec![&clean_img, &adv_img];
            let def_img = out.defended.first().map(|(_, _, p)| render_mask(p));
            if let Some(d) = &def_img {
                parts.push(d);
            }
            let panel = concat_panels(&parts, 2);
            table.panels.push((format!("{:04}_eps{}", i, epsilon), panel));
        }
    }
    Ok(table)
}
