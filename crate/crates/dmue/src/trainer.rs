//! The end-to-end training loop: class-covering batches, per-branch
//! routing, latent distribution mining, confidence estimation, the ramped
//! combined objective, and one Adam step over every parameter per
//! iteration. Deterministic given the config seed.

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::datagen::{sample_batch, Batch, DataError, Dataset, Sample};
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::losses::{
    aux_ce, msp_loss, sharpen, similarity_matrix, soft_l2, total_loss, weighted_ce,
    LatentDistribution, LossError, RampSchedule,
};
use crate::model::{
    branch_forward, estimate_confidence, head_forward, predict_latent_distribution,
    strip_for_deployment, trunk_forward, BranchSet, DeployModel, LayerSizes, UncertaintyModule,
};
use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {component} at epoch {epoch}, iteration {iteration}")]
    NonFinite { component: &'static str, epoch: usize, iteration: usize },
    #[error("cannot evaluate an empty split")]
    EmptySplit,
}

/// Step-decay learning rate: `initial * factor^k` where k counts the decay
/// epochs already reached.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 1e-3, decay_epochs: vec![10, 20], factor: 0.1 }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let hits = self.decay_epochs.iter().filter(|d| epoch >= **d).count() as i32;
        self.initial * self.factor.powi(hits)
    }
}

/// Which framework components participate in the objective. With every
/// switch off, training degenerates to plain cross-entropy on the target
/// branch alone (the ablation baseline). Any switch on keeps the auxiliary
/// scaffold (branch cross-entropy plus the epoch ramps) active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSwitches {
    pub latent_distribution: bool,
    pub similarity_preserving: bool,
    pub confidence: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches { latent_distribution: true, similarity_preserving: true, confidence: true }
    }
}

impl AblationSwitches {
    pub const OFF: AblationSwitches = AblationSwitches {
        latent_distribution: false,
        similarity_preserving: false,
        confidence: false,
    };

    pub fn any(&self) -> bool {
        self.latent_distribution || self.similarity_preserving || self.confidence
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Sharpen temperature T.
    pub sharpen_t: f64,
    /// Weight of the soft L2 term.
    pub omega: f64,
    /// Weight of the similarity preserving term.
    pub gamma: f64,
    /// Ramp threshold epoch.
    pub beta: usize,
    pub max_epoch: usize,
    /// Defaults to ceil(train size / batch size).
    pub iters_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    /// Decoupled weight decay subtracts lr*wd*p directly; the default folds
    /// wd*p into the gradient before the Adam moments.
    pub decoupled_weight_decay: bool,
    pub weight_decay_on_uncertainty: bool,
    pub seed: u64,
    pub checked: bool,
    pub switches: AblationSwitches,
    /// Cut the gradient from the weighted CE into the confidence scores
    /// (ablation; default lets it flow into the features).
    pub detach_confidence: bool,
    /// Epochs that run with unit confidence before the uncertainty module
    /// engages. Judging samples before the class structure exists lets a
    /// slightly-behind class spiral into permanent suppression (its scores
    /// sink, so it stops getting gradient, so its scores sink further); the
    /// warmup anchors every class first. Defaults to the ramp threshold.
    pub confidence_warmup_epochs: usize,
    /// Compare latents against renormalized negative-class mass instead of
    /// raw softmax entries (ablation).
    pub renormalize_soft: bool,
    pub sizes: LayerSizes,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sharpen_t: 1.2,
            omega: 0.5,
            gamma: 1e3,
            beta: 6,
            max_epoch: 30,
            iters_per_epoch: None,
            batch_size: 72,
            lr: LrSchedule::default(),
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            weight_decay_on_uncertainty: true,
            seed: 0,
            checked: false,
            switches: AblationSwitches::default(),
            detach_confidence: false,
            confidence_warmup_epochs: 6,
            renormalize_soft: false,
            sizes: LayerSizes::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.sharpen_t > 0.0) {
            return Err(TrainError::InvalidConfig(format!("sharpen_t {} must be > 0", self.sharpen_t)));
        }
        if self.beta < 1 {
            return Err(TrainError::InvalidConfig("beta must be >= 1".into()));
        }
        if self.max_epoch < 1 {
            return Err(TrainError::InvalidConfig("max_epoch must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// One log record per training iteration. Accuracy-style fields are
/// refreshed at epoch boundaries (and once before training) and carried
/// between refreshes; loss fields are per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub l_wce: f64,
    pub l_soft: f64,
    pub l_sp: f64,
    pub l_aux: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_alpha: f64,
    pub flip_recovery: f64,
}

impl MetricRecord {
    /// Machine-parseable `key=value` line.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} iter={} l_wce={} l_soft={} l_sp={} l_aux={} total={} train_acc={} test_acc={} mean_alpha={} flip_recovery={}",
            self.epoch,
            self.iteration,
            self.l_wce,
            self.l_soft,
            self.l_sp,
            self.l_aux,
            self.total,
            self.train_acc,
            self.test_acc,
            self.mean_alpha,
            self.flip_recovery
        )
    }
}

pub struct TrainOutput {
    pub model: BranchSet,
    pub uncertainty: UncertaintyModule,
    pub log: Vec<MetricRecord>,
}

// ── Adam ────────────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            t: 0,
            m: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            v: sizes.iter().map(|s| vec![0.0; *s]).collect(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter tensor in place. `wd` is this parameter's
    /// weight decay (zero to exempt it).
    fn update(&mut self, index: usize, lr: f64, wd: f64, decoupled: bool, param: &mut Tensor, grad: &[f64]) {
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        let m = &mut self.m[index];
        let v = &mut self.v[index];
        for (k, p) in param.data_mut().iter_mut().enumerate() {
            let mut g = grad[k];
            if !decoupled {
                g += wd * *p;
            }
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            let mut update = lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if decoupled {
                update += lr * wd * *p;
            }
            *p -= update;
        }
    }
}

// ── Training ────────────────────────────────────────────────────────────

struct LossNodes {
    wce: NodeId,
    soft: NodeId,
    sp: NodeId,
    aux: Option<NodeId>,
    total: NodeId,
    alpha: Option<NodeId>,
}

/// Builds the full forward pass and objective for one batch on `g`.
#[allow(clippy::too_many_arguments)]
fn build_objective(
    g: &mut Graph,
    model: &BranchSet,
    uncertainty: &UncertaintyModule,
    batch: &Batch,
    config: &TrainConfig,
    schedule: &RampSchedule,
    epoch: usize,
) -> Result<(LossNodes, Vec<NodeId>), TrainError> {
    let c = model.num_classes;
    let sw = config.switches;
    let aux_active = sw.any();

    let bound = if aux_active { model.bind(g) } else { model.bind_trunk_target(g) };
    let mut param_ids = bound_param_ids(&bound);
    let confidence_engaged = sw.confidence && epoch > config.confidence_warmup_epochs;
    let bound_um = if confidence_engaged {
        let b = uncertainty.bind(g);
        param_ids.extend([b.w1, b.b1, b.slope, b.w2, b.b2]);
        Some(b)
    } else {
        None
    };

    let x = g.constant(&batch.features);
    let trunk = trunk_forward(g, &bound, x);
    let (target_feats, target_logits) = head_forward(g, &bound.target, trunk);

    let aux_logits: Vec<NodeId> = if aux_active {
        (1..=c).map(|j| branch_forward(g, &bound, j, trunk)).collect()
    } else {
        Vec::new()
    };

    let l_aux = if aux_active { Some(aux_ce(g, &aux_logits, &batch.annotations)) } else { None };

    let l_soft = if sw.latent_distribution {
        let latents = predict_latent_distribution(g, &aux_logits, &batch.annotations);
        let sharpened: Result<Vec<LatentDistribution>, LossError> =
            latents.iter().map(|l| sharpen(l, config.sharpen_t)).collect();
        let sharpened = sharpened?;
        let target_probs = g.row_softmax(target_logits);
        soft_l2(g, target_probs, &sharpened, &batch.annotations, config.renormalize_soft)
    } else {
        g.scalar(0.0)
    };

    let l_sp = if sw.similarity_preserving {
        let a_target = similarity_matrix(g, target_feats);
        let a_aux: Vec<NodeId> = (1..=c)
            .map(|j| {
                let (feats, _) = head_forward(g, &bound.aux[j - 1], trunk);
                similarity_matrix(g, feats)
            })
            .collect();
        msp_loss(g, a_target, &a_aux, &batch.annotations)?
    } else {
        g.scalar(0.0)
    };

    let alpha = if let Some(um) = &bound_um {
        Some(estimate_confidence(
            g,
            target_feats,
            &batch.annotations,
            c,
            um,
            config.detach_confidence,
        ))
    } else {
        None
    };
    let alpha_node = match alpha {
        Some(a) => a,
        None => g.constant(&Tensor::filled(batch.len(), 1, 1.0)),
    };
    let l_wce = weighted_ce(g, target_logits, alpha_node, &batch.annotations);

    let total = if aux_active {
        total_loss(
            g,
            l_wce,
            l_soft,
            l_sp,
            l_aux.expect("aux loss exists when the scaffold is active"),
            epoch,
            schedule,
            config.omega,
            config.gamma,
        )
    } else {
        l_wce
    };

    Ok((
        LossNodes { wce: l_wce, soft: l_soft, sp: l_sp, aux: l_aux, total, alpha },
        param_ids,
    ))
}

fn bound_param_ids(bound: &crate::model::BoundBranchSet) -> Vec<NodeId> {
    let mut ids = vec![bound.trunk_w, bound.trunk_b];
    let mut push_head = |h: &crate::model::BoundHead| {
        ids.extend([h.hidden_w, h.hidden_b, h.out_w, h.out_b]);
    };
    push_head(&bound.target);
    for h in &bound.aux {
        push_head(h);
    }
    ids
}

/// Runs the mini-batch training loop of the framework and returns the
/// trained parameters with one metric record per iteration.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let c = dataset.num_classes;
    if config.batch_size < c {
        return Err(TrainError::Data(DataError::BatchTooSmall { n: config.batch_size, c }));
    }
    let schedule = RampSchedule::new(config.beta)?;

    let mut init_rng = rng::stream(config.seed, streams::INIT);
    let mut model = BranchSet::init(c, dataset.feature_dim, config.sizes, &mut init_rng);
    let mut uncertainty = UncertaintyModule::init(c, &mut init_rng);
    let mut batch_rng = rng::stream(config.seed, streams::BATCH);

    let iters = config
        .iters_per_epoch
        .unwrap_or_else(|| dataset.train.len().div_ceil(config.batch_size))
        .max(1);

    // Adam state covers exactly the parameters of the active architecture:
    // aux heads only when the scaffold runs, the uncertainty module only
    // when confidence weighting is on. Inactive parts stay bit-identical to
    // their initialization.
    let aux_active = config.switches.any();
    let in_scope = |name: &str| aux_active || !name.starts_with("aux");
    let mut param_sizes: Vec<usize> = Vec::new();
    let mut decay: Vec<f64> = Vec::new();
    model.visit_params(&mut |name, t| {
        if in_scope(&name) {
            param_sizes.push(t.numel());
            decay.push(config.weight_decay);
        }
    });
    if config.switches.confidence {
        uncertainty.visit_params(&mut |_, t| {
            param_sizes.push(t.numel());
            decay.push(if config.weight_decay_on_uncertainty { config.weight_decay } else { 0.0 });
        });
    }
    let mut adam = Adam::new(&param_sizes);

    let mut log = Vec::with_capacity(config.max_epoch * iters);
    let mut train_acc = evaluate_model(&model, &dataset.train, EvalTarget::Annotation)?;
    let mut test_acc = evaluate_model(&model, &dataset.test, EvalTarget::TrueClass).unwrap_or(0.0);
    let mut flip_recovery = flipped_recovery(&model, dataset).unwrap_or(0.0);

    for epoch in 1..=config.max_epoch {
        let lr = config.lr.at(epoch);
        for iteration in 1..=iters {
            let batch = sample_batch(dataset, config.batch_size, &mut batch_rng)?;
            let mut g = if config.checked { Graph::new_checked() } else { Graph::new() };
            let (nodes, param_ids) =
                build_objective(&mut g, &model, &uncertainty, &batch, config, &schedule, epoch)?;

            let check = |value: f64, component: &'static str| -> Result<f64, TrainError> {
                if value.is_finite() {
                    Ok(value)
                } else {
                    Err(TrainError::NonFinite { component, epoch, iteration })
                }
            };
            let l_wce = check(g.scalar_value(nodes.wce), "weighted cross-entropy")?;
            let l_soft = check(g.scalar_value(nodes.soft), "soft L2")?;
            let l_sp = check(g.scalar_value(nodes.sp), "similarity preserving")?;
            let l_aux = match nodes.aux {
                Some(id) => check(g.scalar_value(id), "auxiliary cross-entropy")?,
                None => 0.0,
            };
            let total = check(g.scalar_value(nodes.total), "total loss")?;
            let mean_alpha = match nodes.alpha {
                Some(id) => {
                    let v = g.values(id);
                    v.iter().sum::<f64>() / v.len() as f64
                }
                None => 1.0,
            };

            g.backward(nodes.total);
            // param_ids covers the bound parameters in visit order; during
            // the confidence warmup the uncertainty module is not bound and
            // its trailing slots get zero gradients.
            let grads: Vec<Vec<f64>> = (0..param_sizes.len())
                .map(|i| {
                    param_ids
                        .get(i)
                        .and_then(|id| g.grad(*id))
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; param_sizes[i]])
                })
                .collect();

            adam.begin_step();
            let mut index = 0;
            let mut apply = |name: String, t: &mut Tensor| {
                if !in_scope(&name) {
                    return;
                }
                adam.update(index, lr, decay[index], config.decoupled_weight_decay, t, &grads[index]);
                index += 1;
            };
            model.visit_params_mut(&mut apply);
            if config.switches.confidence && epoch > config.confidence_warmup_epochs {
                uncertainty.visit_params_mut(&mut apply);
            }

            if iteration == iters {
                train_acc = evaluate_model(&model, &dataset.train, EvalTarget::Annotation)?;
                test_acc =
                    evaluate_model(&model, &dataset.test, EvalTarget::TrueClass).unwrap_or(0.0);
                flip_recovery = flipped_recovery(&model, dataset).unwrap_or(0.0);
            }
            log.push(MetricRecord {
                epoch,
                iteration,
                l_wce,
                l_soft,
                l_sp,
                l_aux,
                total,
                train_acc,
                test_acc,
                mean_alpha,
                flip_recovery,
            });
        }
    }

    Ok(TrainOutput { model, uncertainty, log })
}

/// Which label a prediction is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Annotation,
    TrueClass,
}

/// Fraction of samples whose target-branch argmax (ties to the lowest
/// class) matches the chosen label.
pub fn evaluate(model: &DeployModel, samples: &[Sample], target: EvalTarget) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let d = samples[0].features.len();
    let mut data = Vec::with_capacity(samples.len() * d);
    for s in samples {
        data.extend_from_slice(&s.features);
    }
    let x = Tensor::new(samples.len(), d, data);
    let predictions = model.predict(&x);
    let correct = predictions
        .iter()
        .zip(samples.iter())
        .filter(|(p, s)| {
            **p == match target {
                EvalTarget::Annotation => s.annotation,
                EvalTarget::TrueClass => s.true_class,
            }
        })
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Evaluates a full model by stripping it on the fly.
pub fn evaluate_model(
    model: &BranchSet,
    samples: &[Sample],
    target: EvalTarget,
) -> Result<f64, TrainError> {
    evaluate(&strip_for_deployment(model), samples, target)
}

/// Latent distributions mined for a set of samples by their own-class
/// auxiliary branches (raw softmax, no sharpening).
pub fn mine_latents(model: &BranchSet, samples: &[Sample]) -> Vec<LatentDistribution> {
    let d = model.feature_dim;
    let mut data = Vec::with_capacity(samples.len() * d);
    let mut annotations = Vec::with_capacity(samples.len());
    for s in samples {
        data.extend_from_slice(&s.features);
        annotations.push(s.annotation);
    }
    let mut g = Graph::new();
    let bound = model.bind_constant(&mut g);
    let x = g.constant(&Tensor::new(samples.len(), d, data));
    let trunk = trunk_forward(&mut g, &bound, x);
    let aux_logits: Vec<NodeId> =
        (1..=model.num_classes).map(|j| branch_forward(&mut g, &bound, j, trunk)).collect();
    predict_latent_distribution(&mut g, &aux_logits, &annotations)
}

/// Fraction of flipped training samples whose mined latent argmax recovers
/// the hidden true class. `None` when nothing is flipped.
pub fn flipped_recovery(model: &BranchSet, dataset: &Dataset) -> Option<f64> {
    let flipped: Vec<Sample> = dataset.train.iter().filter(|s| s.flipped).cloned().collect();
    if flipped.is_empty() {
        return None;
    }
    let latents = mine_latents(model, &flipped);
    let recovered = latents
        .iter()
        .zip(flipped.iter())
        .filter(|(l, s)| l.argmax_class() == s.true_class)
        .count();
    Some(recovered as f64 / flipped.len() as f64)
}

/// Confidence scores for a set of samples under a trained model, evaluated
/// in one batch (every class present is required).
pub fn confidence_scores(
    model: &BranchSet,
    uncertainty: &UncertaintyModule,
    samples: &[Sample],
) -> Vec<f64> {
    let d = model.feature_dim;
    let mut data = Vec::with_capacity(samples.len() * d);
    let mut annotations = Vec::with_capacity(samples.len());
    for s in samples {
        data.extend_from_slice(&s.features);
        annotations.push(s.annotation);
    }
    let mut g = Graph::new();
    let bound = model.bind_constant(&mut g);
    let x = g.constant(&Tensor::new(samples.len(), d, data));
    let trunk = trunk_forward(&mut g, &bound, x);
    let (feats, _) = head_forward(&mut g, &bound.target, trunk);
    let bound_um = uncertainty.bind(&mut g);
    let alpha = estimate_confidence(&mut g, feats, &annotations, model.num_classes, &bound_um, true);
    g.values(alpha).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, inject_noise, SyntheticSpec};

    fn small_dataset(seed: u64) -> Dataset {
        let spec = SyntheticSpec::confusable_pairs(4, 8, 2, 3.0, 1.2, 1.0, 30, 10, seed).unwrap();
        inject_noise(generate(&spec).unwrap(), 0.3, seed + 1).unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epoch: 2,
            iters_per_epoch: Some(3),
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let ds = small_dataset(1);
        let mut config = tiny_config(2);
        config.max_epoch = 1;
        config.iters_per_epoch = Some(1);
        config.lr = LrSchedule { initial: 0.0, decay_epochs: vec![], factor: 0.1 };
        let out = train(&ds, &config).unwrap();

        let mut fresh_rng = rng::stream(config.seed, streams::INIT);
        let fresh = BranchSet::init(4, 8, config.sizes, &mut fresh_rng);
        let fresh_um = UncertaintyModule::init(4, &mut fresh_rng);
        assert_eq!(out.model, fresh);
        assert_eq!(out.uncertainty, fresh_um);
    }

    #[test]
    fn same_seed_gives_identical_logs_and_models() {
        let ds = small_dataset(3);
        let config = tiny_config(4);
        let a = train(&ds, &config).unwrap();
        let b = train(&ds, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.uncertainty, b.uncertainty);
        let lines_a: Vec<String> = a.log.iter().map(MetricRecord::log_line).collect();
        let lines_b: Vec<String> = b.log.iter().map(MetricRecord::log_line).collect();
        assert_eq!(lines_a, lines_b);
    }

    #[test]
    fn all_off_matches_a_plain_ce_target_only_loop() {
        // with every switch off the loop must reduce to plain CE on the
        // target branch: auxiliary heads and the uncertainty module keep
        // their initial parameters
        let ds = small_dataset(5);
        let mut config = tiny_config(6);
        config.switches = AblationSwitches::OFF;
        let out = train(&ds, &config).unwrap();

        let mut fresh_rng = rng::stream(config.seed, streams::INIT);
        let fresh = BranchSet::init(4, 8, config.sizes, &mut fresh_rng);
        let fresh_um = UncertaintyModule::init(4, &mut fresh_rng);
        assert_eq!(out.model.aux, fresh.aux, "auxiliary heads must not train");
        assert_eq!(out.uncertainty, fresh_um, "uncertainty module must not train");
        assert_ne!(out.model.target, fresh.target, "target head must train");
        for r in &out.log {
            assert_eq!(r.l_soft, 0.0);
            assert_eq!(r.l_sp, 0.0);
            assert_eq!(r.l_aux, 0.0);
            assert_eq!(r.mean_alpha, 1.0);
            assert_eq!(r.total, r.l_wce);
        }
    }

    #[test]
    fn latent_switch_off_still_trains_aux_heads() {
        let ds = small_dataset(7);
        let mut config = tiny_config(8);
        config.switches = AblationSwitches {
            latent_distribution: false,
            similarity_preserving: true,
            confidence: true,
        };
        let out = train(&ds, &config).unwrap();
        let mut fresh_rng = rng::stream(config.seed, streams::INIT);
        let fresh = BranchSet::init(4, 8, config.sizes, &mut fresh_rng);
        assert_ne!(out.model.aux, fresh.aux, "aux heads keep training through their CE");
        for r in &out.log {
            assert_eq!(r.l_soft, 0.0, "latent term must contribute exactly zero");
            assert!(r.l_aux > 0.0);
        }
    }

    #[test]
    fn optimizer_never_changes_parameter_shapes() {
        let ds = small_dataset(9);
        let config = tiny_config(10);
        let out = train(&ds, &config).unwrap();
        let mut fresh_rng = rng::stream(config.seed, streams::INIT);
        let fresh = BranchSet::init(4, 8, config.sizes, &mut fresh_rng);
        let mut shapes_out = Vec::new();
        out.model.visit_params(&mut |name, t| shapes_out.push((name, t.shape())));
        let mut shapes_fresh = Vec::new();
        fresh.visit_params(&mut |name, t| shapes_fresh.push((name, t.shape())));
        assert_eq!(shapes_out, shapes_fresh);
    }

    #[test]
    fn training_loss_stays_finite() {
        let ds = small_dataset(11);
        let config = tiny_config(12);
        let out = train(&ds, &config).unwrap();
        for r in &out.log {
            for v in [r.l_wce, r.l_soft, r.l_sp, r.l_aux, r.total, r.mean_alpha] {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn evaluate_counts_matches() {
        let ds = small_dataset(13);
        let mut rng = rng::stream(1, streams::INIT);
        let model = BranchSet::init(4, 8, LayerSizes::default(), &mut rng);
        let deploy = strip_for_deployment(&model);
        // build a fake split where the model is right on exactly 3 of 4
        let x = Tensor::new(4, 8, (0..32).map(|i| (i as f64 * 0.37).sin()).collect());
        let preds = deploy.predict(&x);
        let mut samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                features: x.row(i).to_vec(),
                annotation: preds[i],
                true_class: preds[i],
                true_posterior: vec![0.25; 4],
                flipped: false,
            })
            .collect();
        samples[3].annotation = if preds[3] == 1 { 2 } else { 1 };
        let acc = evaluate(&deploy, &samples, EvalTarget::Annotation).unwrap();
        assert_eq!(acc, 0.75);
        let acc_true = evaluate(&deploy, &samples, EvalTarget::TrueClass).unwrap();
        assert_eq!(acc_true, 1.0);
        assert!(matches!(
            evaluate(&deploy, &[], EvalTarget::Annotation),
            Err(TrainError::EmptySplit)
        ));
        let _ = ds;
    }

    #[test]
    fn untrained_accuracy_is_near_chance_over_seeds() {
        // pooled over inits, a random model on a balanced test split sits at
        // 1/C within 3 binomial sigmas
        let spec = SyntheticSpec::confusable_pairs(4, 8, 2, 3.0, 1.2, 1.0, 2, 50, 77).unwrap();
        let ds = generate(&spec).unwrap();
        let seeds = 30u64;
        let mut correct_total = 0.0;
        for seed in 0..seeds {
            let mut rng = rng::stream(seed, streams::INIT);
            let model = BranchSet::init(4, 8, LayerSizes::default(), &mut rng);
            let acc = evaluate_model(&model, &ds.test, EvalTarget::TrueClass).unwrap();
            correct_total += acc * ds.test.len() as f64;
        }
        let n = (seeds as f64) * ds.test.len() as f64;
        let p = 0.25;
        let sigma = (p * (1.0 - p) / n).sqrt();
        let pooled = correct_total / n;
        assert!(
            (pooled - p).abs() <= 3.0 * sigma,
            "pooled accuracy {pooled} vs chance {p} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn lr_schedule_steps_down_at_decay_epochs() {
        let lr = LrSchedule::default();
        assert_eq!(lr.at(1), 1e-3);
        assert_eq!(lr.at(9), 1e-3);
        assert!((lr.at(10) - 1e-4).abs() < 1e-18);
        assert!((lr.at(20) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn checkpoint_round_trip_through_training() {
        let ds = small_dataset(15);
        let config = tiny_config(16);
        let out = train(&ds, &config).unwrap();
        let dir = std::env::temp_dir().join("dmue-trainer-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trained.ckpt");
        crate::checkpoint::save_full(&out.model, &out.uncertainty, &path).unwrap();
        let (loaded, loaded_um) = crate::checkpoint::load_full(&path).unwrap();
        assert_eq!(out.model, loaded);
        assert_eq!(out.uncertainty, loaded_um);
    }
}
