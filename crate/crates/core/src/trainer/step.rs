use rand::Rng as _;
use serde::Serialize;

use crate::augment::{photometric_augment, strong_augment, weak_augment, Augmented, GroupLayout};
use crate::bbox::Annotation;
use crate::detector::{decode_detections, forward, loss_and_grad, loss_only, LossConfig, LossTerms, ToyDetArch};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Rng};
use crate::teacher::{decay_schedule, ema_update, filter_pseudo_labels, ModelState, PseudoLabel};
use crate::tensor::{Scalar, Tensor4};

use super::config::{TrainConfig, UnsupNormalizer};
use super::dataset::{stack_images, Dataset};

// Random stream tags. Each purpose owns a stream derived from (seed, tag, step),
// so switching a branch off never shifts the draws of another.
pub(crate) const STREAM_INIT: u64 = 10;
pub(crate) const STREAM_DATA: u64 = 11;
pub(crate) const STREAM_EVAL: u64 = 12;
const STREAM_SAMPLE_LABELED: u64 = 20;
const STREAM_SAMPLE_UNLABELED: u64 = 21;
const STREAM_AUG_LABELED: u64 = 22;
const STREAM_AUG_UNLABELED: u64 = 23;
const STREAM_MUM: u64 = 24;

/// Student, teacher and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar = f32> {
    /// Number of completed steps.
    pub step: u64,
    pub student: ModelState<T>,
    pub teacher: ModelState<T>,
    pub velocity: Vec<T>,
}

impl TrainState<f32> {
    /// Fresh student from the seeded initializer; the teacher starts as a copy.
    pub fn init(arch: &ToyDetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = arch.init_params(&mut derive_rng(seed, &[STREAM_INIT]));
        Self::from_params(arch, params)
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn from_params(arch: &ToyDetArch, params: Vec<T>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::invalid(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                arch.param_count()
            )));
        }
        let velocity = vec![T::zero(); params.len()];
        let student = ModelState::new(params, arch.arch_id())?;
        Ok(Self {
            step: 0,
            teacher: student.clone(),
            student,
            velocity,
        })
    }

    pub fn cast<U: Scalar>(&self) -> TrainState<U> {
        TrainState {
            step: self.step,
            student: self.student.cast(),
            teacher: self.teacher.cast(),
            velocity: self.velocity.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Labeled images with their ground truth.
#[derive(Debug, Clone)]
pub struct LabeledBatch<T: Scalar = f32> {
    pub images: Tensor4<T>,
    pub targets: Vec<Vec<Annotation>>,
}

/// Draws the labeled batch (and the unlabeled one unless training supervised-only) for `step`.
pub fn sample_batches(data: &Dataset, cfg: &TrainConfig, step: u64) -> Result<(LabeledBatch, Option<Tensor4<f32>>)> {
    if data.labeled.is_empty() {
        return Err(Error::invalid("no labeled scenes to sample from"));
    }
    let mut rng = derive_rng(cfg.seed, &[STREAM_SAMPLE_LABELED, step]);
    let picks: Vec<usize> = (0..cfg.batch_labeled).map(|_| rng.gen_range(0..data.labeled.len())).collect();
    let labeled = LabeledBatch {
        images: stack_images(picks.iter().map(|&i| data.labeled[i].pixels.as_slice()), cfg.image_size)?,
        targets: picks.iter().map(|&i| data.labeled[i].annotations.clone()).collect(),
    };
    if cfg.supervised_only {
        return Ok((labeled, None));
    }
    if data.unlabeled.is_empty() {
        return Err(Error::invalid("no unlabeled scenes to sample from"));
    }
    let mut rng = derive_rng(cfg.seed, &[STREAM_SAMPLE_UNLABELED, step]);
    let picks: Vec<usize> = (0..cfg.batch_unlabeled).map(|_| rng.gen_range(0..data.unlabeled.len())).collect();
    let unlabeled = stack_images(picks.iter().map(|&i| data.unlabeled[i].pixels.as_slice()), cfg.image_size)?;
    Ok((labeled, Some(unlabeled)))
}

/// Runtime switches that are not part of the experiment configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepOptions {
    /// Replace drawn masks with identity masks whenever MUM fires.
    pub force_identity_masks: bool,
}

/// Student-side unlabeled input: the strong view, teacher pseudo labels, and the masks if MUM fired.
#[derive(Debug, Clone)]
pub struct UnsupervisedBatch<T: Scalar = f32> {
    pub images: Tensor4<T>,
    pub pseudo_labels: Vec<Vec<PseudoLabel>>,
    pub layout: Option<GroupLayout>,
}

impl<T: Scalar> UnsupervisedBatch<T> {
    pub fn targets(&self) -> Vec<Vec<Annotation>> {
        self.pseudo_labels
            .iter()
            .map(|ps| ps.iter().map(|&p| Annotation::from(p)).collect())
            .collect()
    }

    pub fn n_pseudo(&self) -> usize {
        self.pseudo_labels.iter().map(Vec::len).sum()
    }
}

/// Everything random about one step, drawn up front. Given these, the step's
/// objective is a deterministic function of the student parameters.
#[derive(Debug, Clone)]
pub struct PreparedStep<T: Scalar = f32> {
    pub step: u64,
    /// Weak and strong views of the labeled batch, concatenated.
    pub supervised: LabeledBatch<T>,
    pub unsupervised: Option<UnsupervisedBatch<T>>,
    pub lambda_u: f64,
    pub unsup_reg: bool,
    pub unsup_normalizer: UnsupNormalizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub supervised: LossTerms,
    pub unsupervised: Option<LossTerms>,
    /// `l_s + lambda_u * l_u`
    pub total: f64,
}

fn flip_targets(targets: &[Vec<Annotation>], aug: &Augmented<impl Scalar>, width: f32) -> Vec<Vec<Annotation>> {
    targets
        .iter()
        .zip(&aug.flipped)
        .map(|(ts, &flip)| {
            ts.iter()
                .map(|a| Annotation {
                    class_id: a.class_id,
                    bbox: if flip { a.bbox.flip_horizontal(width) } else { a.bbox },
                })
                .collect()
        })
        .collect()
}

fn augment_stream(cfg: &TrainConfig, tag: u64, step: u64) -> Rng {
    derive_rng(cfg.seed, &[tag, step])
}

/// Augments the batches, runs the teacher on the weak unlabeled view, and draws the MUM masks.
pub fn prepare_step<T: Scalar>(
    state: &TrainState<T>,
    arch: &ToyDetArch,
    labeled: &LabeledBatch<T>,
    unlabeled: Option<&Tensor4<T>>,
    cfg: &TrainConfig,
    opts: &StepOptions,
) -> Result<PreparedStep<T>> {
    let aug_cfg = cfg.augment();
    let width = labeled.images.width() as f32;
    if labeled.targets.len() != labeled.images.batch() {
        return Err(Error::invalid(format!(
            "{} target lists for {} labeled images",
            labeled.targets.len(),
            labeled.images.batch()
        )));
    }

    let mut rng = augment_stream(cfg, STREAM_AUG_LABELED, state.step);
    let weak = weak_augment(&labeled.images, &mut rng, &aug_cfg)?;
    let strong = strong_augment(&labeled.images, &mut rng, &aug_cfg)?;
    let mut targets = flip_targets(&labeled.targets, &weak, width);
    targets.extend(flip_targets(&labeled.targets, &strong, width));
    let supervised = LabeledBatch {
        images: Tensor4::concat(&[&weak.images, &strong.images])?,
        targets,
    };

    let unsupervised = match unlabeled {
        None => None,
        Some(x) => {
            let mut rng = augment_stream(cfg, STREAM_AUG_UNLABELED, state.step);
            let weak = weak_augment(x, &mut rng, &aug_cfg)?;
            // The strong view shares the weak view's flip so pseudo boxes line up.
            let strong = photometric_augment(&weak.images, &mut rng, &aug_cfg)?;
            let teacher_pred = forward(arch, &state.teacher.params, &weak.images, None)?.pred;
            let pseudo_labels = decode_detections(&teacher_pred, cfg.teacher_score_floor as f32, cfg.nms_iou as f32)
                .iter()
                .map(|d| filter_pseudo_labels(d, cfg.tau as f32))
                .collect();

            let mut rng = augment_stream(cfg, STREAM_MUM, state.step);
            let u: f64 = rng.gen();
            let drawn = GroupLayout::random(&mut rng, x.batch(), cfg.group_size, cfg.tiles_per_axis)?;
            let layout = if u < cfg.mum_probability {
                Some(if opts.force_identity_masks {
                    GroupLayout::identity(x.batch(), cfg.group_size, cfg.tiles_per_axis)?
                } else {
                    drawn
                })
            } else {
                None
            };
            Some(UnsupervisedBatch {
                images: strong,
                pseudo_labels,
                layout,
            })
        }
    };

    Ok(PreparedStep {
        step: state.step,
        supervised,
        unsupervised,
        lambda_u: if state.step < cfg.burn_in_steps { 0.0 } else { cfg.lambda_u },
        unsup_reg: cfg.unsup_reg,
        unsup_normalizer: cfg.unsup_normalizer,
    })
}

impl<T: Scalar> PreparedStep<T> {
    fn reg_weight(&self) -> f64 {
        if self.unsup_reg {
            1.0
        } else {
            0.0
        }
    }

    fn unsup_value(&self, terms: &LossTerms) -> f64 {
        terms.l_cls + self.reg_weight() * terms.l_reg
    }

    fn unsup_config(&self, supervised: &LossTerms) -> LossConfig {
        let fixed_normalizer = match self.unsup_normalizer {
            UnsupNormalizer::Pseudo => None,
            UnsupNormalizer::Supervised => Some(supervised.n_pos.max(1) as f64),
        };
        LossConfig {
            fixed_normalizer,
            ..LossConfig::default()
        }
    }

    /// Total step loss at `params`.
    pub fn loss(&self, arch: &ToyDetArch, params: &[T]) -> Result<StepLosses> {
        let cfg = LossConfig::default();
        let supervised = loss_only(arch, params, &self.supervised.images, &self.supervised.targets, None, &cfg)?;
        let ucfg = self.unsup_config(&supervised);
        let unsupervised = match &self.unsupervised {
            Some(u) => Some(loss_only(arch, params, &u.images, &u.targets(), u.layout.as_ref(), &ucfg)?),
            None => None,
        };
        let total = supervised.total() + unsupervised.map_or(0.0, |t| self.lambda_u * self.unsup_value(&t));
        Ok(StepLosses {
            supervised,
            unsupervised,
            total,
        })
    }

    /// Total step loss and its gradient with respect to `params`.
    pub fn loss_and_grad(&self, arch: &ToyDetArch, params: &[T]) -> Result<(StepLosses, Vec<T>)> {
        let cfg = LossConfig::default();
        let (supervised, mut grad) = loss_and_grad(
            arch,
            params,
            &self.supervised.images,
            &self.supervised.targets,
            None,
            &cfg,
            1.0,
            1.0,
        )?;
        let ucfg = self.unsup_config(&supervised);
        let unsupervised = match &self.unsupervised {
            None => None,
            Some(u) if self.lambda_u == 0.0 => {
                Some(loss_only(arch, params, &u.images, &u.targets(), u.layout.as_ref(), &ucfg)?)
            }
            Some(u) => {
                let (terms, g) = loss_and_grad(
                    arch,
                    params,
                    &u.images,
                    &u.targets(),
                    u.layout.as_ref(),
                    &ucfg,
                    self.lambda_u,
                    self.lambda_u * self.reg_weight(),
                )?;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
                Some(terms)
            }
        };
        let total = supervised.total() + unsupervised.map_or(0.0, |t| self.lambda_u * self.unsup_value(&t));
        Ok((
            StepLosses {
                supervised,
                unsupervised,
                total,
            },
            grad,
        ))
    }
}

/// One line of the per-step training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub l_s: f64,
    pub l_s_cls: f64,
    pub l_s_reg: f64,
    /// Unsupervised loss as it enters the total (before `lambda_u`); 0 when supervised-only.
    pub l_u: f64,
    pub l_u_cls: f64,
    pub l_u_reg: f64,
    pub total: f64,
    pub delta: f64,
    pub n_pseudo: usize,
    pub mum_applied: bool,
}

/// SGD with momentum and L2 weight decay: `v = mu * v + g + wd * theta; theta -= lr * v`.
pub fn sgd_update<T: Scalar>(params: &mut [T], velocity: &mut [T], grad: &[T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

/// Applies a prepared step: student SGD update on the total loss, then the EMA teacher update.
pub fn apply_step<T: Scalar>(
    state: &TrainState<T>,
    arch: &ToyDetArch,
    prepared: &PreparedStep<T>,
    cfg: &TrainConfig,
) -> Result<(TrainState<T>, StepLog)> {
    let (losses, grad) = prepared.loss_and_grad(arch, &state.student.params)?;
    if !losses.total.is_finite() {
        return Err(Error::Validation(format!("non-finite loss at step {}", state.step + 1)));
    }
    let mut params = state.student.params.clone();
    let mut velocity = state.velocity.clone();
    sgd_update(&mut params, &mut velocity, &grad, cfg.lr, cfg.momentum, cfg.weight_decay);
    let student = ModelState::new(params, state.student.arch_id.clone())
        .map_err(|e| Error::Validation(format!("step {}: {e}", state.step + 1)))?;
    let delta = decay_schedule(state.step, cfg.ramp_end_step, cfg.delta_init, cfg.delta_final)?;
    let teacher = ema_update(&state.teacher, &student, delta)?;

    let u = losses.unsupervised.unwrap_or_default();
    let log = StepLog {
        step: state.step + 1,
        l_s: losses.supervised.total(),
        l_s_cls: losses.supervised.l_cls,
        l_s_reg: losses.supervised.l_reg,
        l_u: prepared.unsup_value(&u),
        l_u_cls: u.l_cls,
        l_u_reg: u.l_reg,
        total: losses.total,
        delta,
        n_pseudo: prepared.unsupervised.as_ref().map_or(0, |b| b.n_pseudo()),
        mum_applied: prepared.unsupervised.as_ref().is_some_and(|b| b.layout.is_some()),
    };
    Ok((
        TrainState {
            step: state.step + 1,
            student,
            teacher,
            velocity,
        },
        log,
    ))
}

/// Prepares and applies one step.
pub fn train_step<T: Scalar>(
    state: &TrainState<T>,
    arch: &ToyDetArch,
    labeled: &LabeledBatch<T>,
    unlabeled: Option<&Tensor4<T>>,
    cfg: &TrainConfig,
    opts: &StepOptions,
) -> Result<(TrainState<T>, StepLog)> {
    let prepared = prepare_step(state, arch, labeled, unlabeled, cfg, opts)?;
    apply_step(state, arch, &prepared, cfg)
}
