//! Optimisation loops for multi-expert training and new-expert fine-tuning,
//! the polynomial learning-rate schedule and model evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, center_crop_case, AugmentConfig};
use crate::data::{AnnotatedCase, BinaryMask, ExpertCombination, ExpertId, ImageGrid, MultiExpertDataset, Spacing};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, MetricTriple};
use crate::model::{CinUnet, Gradients, ReinitMode};
use crate::objectives::{multi_task_loss, DEFAULT_SMOOTH};
use crate::rng::{derive_seed, keyed_rng};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const STREAM_TRAIN: u64 = 1;
const STREAM_FINETUNE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    RectifiedAdam,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    /// Shared parameters and the new branch.
    All,
    /// The new branch only; shared parameters stay frozen.
    ExpertOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub train_steps: usize,
    pub finetune_steps: usize,
    pub lr0: f64,
    pub power: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub crop: [usize; 2],
    pub finetune_scope: FinetuneScope,
    pub finetune_init: ReinitMode,
    pub augment: Option<AugmentConfig>,
    pub finetune_augment: bool,
    pub smooth: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 16,
            train_steps: 5000,
            finetune_steps: 1000,
            lr0: 0.001,
            power: 0.9,
            optimizer: OptimizerKind::RectifiedAdam,
            seed: 0,
            crop: [192, 192],
            finetune_scope: FinetuneScope::All,
            finetune_init: ReinitMode::Identity,
            augment: Some(AugmentConfig::default()),
            finetune_augment: true,
            smooth: DEFAULT_SMOOTH,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            train_steps: 600,
            finetune_steps: 200,
            lr0: 0.01,
            finetune_init: ReinitMode::Average,
            crop: [64, 64],
            augment: Some(AugmentConfig::default().with_crop([64, 64])),
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.train_steps == 0 || self.finetune_steps == 0 {
            return Err(Error::Config("step counts must be at least 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be finite and non-negative".into()));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::Config("power must be positive".into()));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::Config("smooth must be positive".into()));
        }
        if let Some(aug) = &self.augment {
            aug.validate()?;
            if aug.crop != self.crop {
                return Err(Error::Config(format!(
                    "augmentation crop {:?} differs from crop {:?}",
                    aug.crop, self.crop
                )));
            }
        }
        Ok(())
    }
}

/// `lr0 * (1 - step / total)^power`, zero from `total` on.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    cfg.lr0 * (1.0 - step as f64 / total_steps as f64).powf(cfg.power)
}

/// Case positions (0-based) drawn uniformly with replacement for one step.
pub fn batch_indices(seed: u64, stream: u64, step: usize, batch_size: usize, n_cases: usize) -> Vec<usize> {
    let mut rng = keyed_rng(&[seed, stream, step as u64]);
    (0..batch_size).map(|_| rng.random_range(0..n_cases)).collect()
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Moments {
    fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Adam and rectified Adam with per-tensor first/second moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    shared: Vec<Moments>,
    experts: std::collections::BTreeMap<ExpertId, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &CinUnet) -> Self {
        Optimizer {
            kind,
            t: 0,
            shared: model.shared_params().iter().map(|p| Moments::zeros(p.len())).collect(),
            experts: Default::default(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Shared parameters move only when `update_shared`;
    /// each branch in `experts` moves by its gradient (zero when absent).
    pub fn step(
        &mut self,
        model: &mut CinUnet,
        grads: &Gradients,
        lr: f64,
        update_shared: bool,
        experts: &[ExpertId],
    ) -> Result<()> {
        self.t += 1;
        let coef = self.coefficients(lr);
        if update_shared {
            for ((p, g), st) in model.shared_params_mut().iter_mut().zip(&grads.shared).zip(&mut self.shared) {
                update(p, g, st, coef);
            }
        }
        let len = model.expert_param_len();
        let zero = vec![0.0; len];
        for &e in experts {
            let g = grads.expert(e).unwrap_or(&zero);
            let st = self.experts.entry(e).or_insert_with(|| Moments::zeros(len));
            update(model.expert_params_mut(e)?, g, st, coef);
        }
        Ok(())
    }

    fn coefficients(&self, lr: f64) -> Coef {
        let t = self.t as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        match self.kind {
            OptimizerKind::Adam => Coef::Adaptive {
                step: lr / bc1,
                bc2_sqrt: bc2.sqrt(),
            },
            OptimizerKind::RectifiedAdam => {
                let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
                let rho_t = rho_inf - 2.0 * t * BETA2.powf(t) / bc2;
                if rho_t > 5.0 {
                    let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
                    Coef::Adaptive {
                        step: lr * r / bc1,
                        bc2_sqrt: bc2.sqrt(),
                    }
                } else {
                    Coef::Momentum { step: lr / bc1 }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Coef {
    Adaptive { step: f64, bc2_sqrt: f64 },
    Momentum { step: f64 },
}

fn update(p: &mut [f32], g: &[f32], st: &mut Moments, coef: Coef) {
    let (b1, b2) = (BETA1 as f32, BETA2 as f32);
    for i in 0..p.len() {
        let gi = g[i];
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
        let delta = match coef {
            Coef::Adaptive { step, bc2_sqrt } => {
                step * st.m[i] as f64 / ((st.v[i] as f64).sqrt() / bc2_sqrt + ADAM_EPS)
            }
            Coef::Momentum { step } => step * st.m[i] as f64,
        };
        p[i] -= delta as f32;
    }
}

/// One line of the scalar training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.normalized)
    }
}

struct LoopSpec<'a> {
    cases: &'a [AnnotatedCase],
    experts: &'a [ExpertId],
    steps: usize,
    stream: u64,
    update_shared: bool,
    augment: Option<&'a AugmentConfig>,
}

fn run_loop(model: &mut CinUnet, cfg: &TrainConfig, spec: LoopSpec<'_>) -> Result<TrainOutcome> {
    let (h, w) = model.config().input_size;
    if cfg.crop != [h, w] {
        return Err(Error::Config(format!(
            "crop {:?} does not match the model input {h}x{w}",
            cfg.crop
        )));
    }
    let combo = ExpertCombination::new(spec.experts.to_vec())?;
    let prepared: Vec<AnnotatedCase> = spec
        .cases
        .iter()
        .map(|c| center_crop_case(c, cfg.crop))
        .collect::<Result<_>>()?;
    let mut opt = Optimizer::new(cfg.optimizer, model);
    let mut log = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let lr = lr_schedule(step, cfg, spec.steps);
        let picks = batch_indices(cfg.seed, spec.stream, step, cfg.batch_size, spec.cases.len());
        let batch: Vec<AnnotatedCase> = picks
            .iter()
            .enumerate()
            .map(|(slot, &i)| match spec.augment {
                Some(aug) => {
                    let key = derive_seed(&[cfg.seed, spec.stream, step as u64, slot as u64]);
                    augment_sample(&spec.cases[i], aug, key)
                }
                None => Ok(prepared[i].clone()),
            })
            .collect::<Result<_>>()?;
        let mut grads = model.zero_grads();
        let loss = multi_task_loss(model, &batch, &combo, cfg.smooth, Some(&mut grads))?;
        let terms = (batch.len() * combo.len()) as f64;
        let normalized = loss / terms;
        if !normalized.is_finite() || !grads.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {step} (loss {loss})"
            )));
        }
        grads.scale((1.0 / terms) as f32);
        opt.step(model, &grads, lr, spec.update_shared, spec.experts)?;
        log.push(LossRecord {
            step,
            lr,
            loss,
            normalized,
        });
    }
    Ok(TrainOutcome { log })
}

/// Trains `model` on `dataset` with every expert in `combo` for
/// `cfg.train_steps` steps. On a numerical failure the model holds the
/// parameters from just before the failing step.
pub fn train(
    model: &mut CinUnet,
    dataset: &MultiExpertDataset,
    combo: &ExpertCombination,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for &e in combo.members() {
        if !dataset.roster().contains(&e) {
            return Err(Error::Data(format!("training set has no annotations from {e}")));
        }
        if !model.has_expert(e) {
            return Err(Error::UnknownExpert(e.0));
        }
    }
    run_loop(
        model,
        cfg,
        LoopSpec {
            cases: dataset.cases(),
            experts: combo.members(),
            steps: cfg.train_steps,
            stream: STREAM_TRAIN,
            update_shared: true,
            augment: cfg.augment.as_ref(),
        },
    )
}

/// Adapts `model` to `new_expert` from a few annotated samples. The branch is
/// created with `cfg.finetune_init` when missing; other branches are untouched.
pub fn finetune(
    model: &mut CinUnet,
    new_data: &[(ImageGrid, BinaryMask)],
    new_expert: ExpertId,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if new_data.is_empty() {
        return Err(Error::Data("fine-tuning needs at least one sample".into()));
    }
    if !model.has_expert(new_expert) {
        model.reinit_expert_branch(new_expert, cfg.finetune_init, false)?;
    }
    let cases: Vec<AnnotatedCase> = new_data
        .iter()
        .enumerate()
        .map(|(i, (x, y))| {
            AnnotatedCase::new(i + 1, x.clone(), [(new_expert, y.clone())].into_iter().collect())
        })
        .collect::<Result<_>>()?;
    run_loop(
        model,
        cfg,
        LoopSpec {
            cases: &cases,
            experts: &[new_expert],
            steps: cfg.finetune_steps,
            stream: STREAM_FINETUNE,
            update_shared: cfg.finetune_scope == FinetuneScope::All,
            augment: cfg.augment.as_ref().filter(|_| cfg.finetune_augment),
        },
    )
}

/// (image, mask) pairs of `expert` for the given dataset positions.
pub fn expert_samples(dataset: &MultiExpertDataset, expert: ExpertId, positions: &[usize]) -> Result<Vec<(ImageGrid, BinaryMask)>> {
    positions
        .iter()
        .map(|&p| {
            let case = dataset.nth(p)?;
            Ok((case.image().clone(), case.mask(expert)?.clone()))
        })
        .collect()
}

/// Mean metrics over a test set; distance means skip undefined cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dice: f64,
    pub assd: f64,
    pub hd95: f64,
    pub n_cases: usize,
    pub n_undefined: usize,
}

/// Predicts with `branch` and scores against `ref_expert`'s masks after the
/// test-time center crop.
pub fn evaluate_model(
    model: &CinUnet,
    test_set: &MultiExpertDataset,
    branch: ExpertId,
    ref_expert: ExpertId,
) -> Result<EvalSummary> {
    let (h, w) = model.config().input_size;
    let cells = per_case_metrics(model, test_set, branch, ref_expert, test_set.spacing(), [h, w])?;
    summarize(&cells)
}

fn per_case_metrics(
    model: &CinUnet,
    test_set: &MultiExpertDataset,
    branch: ExpertId,
    ref_expert: ExpertId,
    spacing: Spacing,
    crop: [usize; 2],
) -> Result<Vec<MetricTriple>> {
    if test_set.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    test_set
        .cases()
        .iter()
        .map(|case| {
            case.mask(ref_expert)?;
            let cropped = center_crop_case(case, crop)?;
            let pred = model.predict_mask(cropped.image(), branch, 0.5)?;
            evaluate_case(&pred, cropped.mask(ref_expert)?, spacing)
        })
        .collect()
}

pub fn summarize(cells: &[MetricTriple]) -> Result<EvalSummary> {
    let defined: Vec<&MetricTriple> = cells.iter().filter(|c| c.is_complete()).collect();
    if defined.is_empty() {
        return Err(Error::Undefined("every test case has undefined surface distances".into()));
    }
    let n = cells.len() as f64;
    let k = defined.len() as f64;
    Ok(EvalSummary {
        dice: cells.iter().map(|c| c.dice).sum::<f64>() / n,
        assd: defined.iter().map(|c| c.assd.unwrap_or(0.0)).sum::<f64>() / k,
        hd95: defined.iter().map(|c| c.hd95.unwrap_or(0.0)).sum::<f64>() / k,
        n_cases: cells.len(),
        n_undefined: cells.len() - defined.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Scope};
    use crate::synth::{default_reference_styles, generate_dataset, SynthConfig};

    fn tiny() -> (CinUnet, MultiExpertDataset, TrainConfig) {
        let mut mcfg = ModelConfig::desk(3);
        mcfg.input_size = (32, 32);
        let model = CinUnet::build(&mcfg, 1).unwrap();
        let styles = default_reference_styles()[..3].to_vec();
        let mut scfg = SynthConfig::new(4, 32, 32, styles, 9);
        for s in &mut scfg.styles {
            s.bias_radius = s.bias_radius.clamp(-3, 3);
            s.wobble_amplitude = s.wobble_amplitude.min(1.0);
        }
        let ds = generate_dataset(&scfg).unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.crop = [32, 32];
        cfg.augment = Some(AugmentConfig::default().with_crop([32, 32]));
        cfg.batch_size = 2;
        cfg.train_steps = 3;
        cfg.finetune_steps = 3;
        (model, ds, cfg)
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_schedule(0, &cfg, 5000), 0.001);
        assert_eq!(lr_schedule(5000, &cfg, 5000), 0.0);
        assert_eq!(lr_schedule(6000, &cfg, 5000), 0.0);
        assert!((lr_schedule(2500, &cfg, 5000) - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn sampler_visits_uniformly() {
        let mut counts = vec![0usize; 34];
        for step in 0..5000 {
            for i in batch_indices(3, STREAM_TRAIN, step, 16, 34) {
                counts[i] += 1;
            }
        }
        let expected = 5000.0 * 16.0 / 34.0;
        assert_eq!(counts.iter().sum::<usize>(), 80000);
        assert!(counts.iter().all(|&c| (c as f64 - expected).abs() < 0.1 * expected));
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (mut model, ds, mut cfg) = tiny();
        cfg.lr0 = 0.0;
        cfg.train_steps = 1;
        let before = model.clone();
        let combo = ExpertCombination::from_ids(&[1, 2]).unwrap();
        train(&mut model, &ds, &combo, &cfg).unwrap();
        assert_eq!(model.shared_params(), before.shared_params());
        assert_eq!(model.expert_params(ExpertId(1)).unwrap(), before.expert_params(ExpertId(1)).unwrap());
    }

    #[test]
    fn training_only_touches_combo_branches() {
        let (mut model, ds, cfg) = tiny();
        let before = model.clone();
        let combo = ExpertCombination::from_ids(&[1, 3]).unwrap();
        let out = train(&mut model, &ds, &combo, &cfg).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(model.expert_params(ExpertId(2)).unwrap(), before.expert_params(ExpertId(2)).unwrap());
        assert_ne!(model.expert_params(ExpertId(1)).unwrap(), before.expert_params(ExpertId(1)).unwrap());
        assert_ne!(model.shared_params(), before.shared_params());
    }

    #[test]
    fn finetune_scopes() {
        let (mut model, ds, mut cfg) = tiny();
        model.retain_experts(&[ExpertId(1), ExpertId(2)]);
        let samples = expert_samples(&ds, ExpertId(3), &[1, 2]).unwrap();
        cfg.finetune_scope = FinetuneScope::ExpertOnly;
        let mut frozen = model.clone();
        finetune(&mut frozen, &samples, ExpertId(3), &cfg).unwrap();
        assert_eq!(frozen.shared_params(), model.shared_params());
        assert!(frozen.has_expert(ExpertId(3)));
        assert_eq!(
            frozen.trainable_parameters(Scope::ExpertOnly(ExpertId(3))).unwrap().size,
            model.expert_param_len()
        );

        cfg.finetune_scope = FinetuneScope::All;
        let mut full = model.clone();
        finetune(&mut full, &samples, ExpertId(3), &cfg).unwrap();
        assert_ne!(full.shared_params(), model.shared_params());
        for e in [1, 2] {
            assert_eq!(full.expert_params(ExpertId(e)).unwrap(), model.expert_params(ExpertId(e)).unwrap());
        }
        assert!(finetune(&mut full, &[], ExpertId(3), &cfg).is_err());
    }

    #[test]
    fn deterministic_loss_log() {
        let (model, ds, cfg) = tiny();
        let combo = ExpertCombination::from_ids(&[2]).unwrap();
        let mut a = model.clone();
        let mut b = model;
        let la = train(&mut a, &ds, &combo, &cfg).unwrap();
        let lb = train(&mut b, &ds, &combo, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.shared_params(), b.shared_params());
    }

    #[test]
    fn evaluate_reports_means() {
        let (model, ds, _) = tiny();
        let s = evaluate_model(&model, &ds, ExpertId(1), ExpertId(1));
        match s {
            Ok(s) => {
                assert_eq!(s.n_cases, 4);
                assert!((0.0..=1.0).contains(&s.dice));
            }
            Err(Error::Undefined(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn optimizer_warmup_uses_momentum() {
        let (mut model, _, _) = tiny();
        let mut opt = Optimizer::new(OptimizerKind::RectifiedAdam, &model);
        let mut grads = model.zero_grads();
        grads.shared[0].fill(1.0);
        let before = model.shared_params()[0][0];
        opt.step(&mut model, &grads, 0.1, true, &[]).unwrap();
        // first step: bias-corrected momentum equals the gradient
        assert!((model.shared_params()[0][0] - (before - 0.1)).abs() < 1e-6);
    }
}
