use std::path::Path;

use serde::Serialize;

use crate::bbox::Annotation;
use crate::detector::{decode_detections, forward, ToyDetArch};
use crate::error::{Error, Result};
use crate::metrics::{ap50, EvalResult};
use crate::rng::derive_rng;

use super::config::TrainConfig;
use super::dataset::{generate_dataset, generate_eval_set, stack_images, Dataset, SyntheticScene, NUM_CLASSES};
use super::step::{
    apply_step, prepare_step, sample_batches, PreparedStep, StepLog, StepOptions, TrainState, STREAM_DATA, STREAM_EVAL,
};

const EVAL_CHUNK: usize = 50;

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: u64,
    pub l_s: f64,
    pub l_u: f64,
    pub delta: f64,
    pub n_pseudo: usize,
    pub ap50_teacher: f64,
    pub ap50_student: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
    pub logs: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> Option<&HistoryRow> {
        self.history.last()
    }
}

/// Training and held-out data for a config; a pure function of its seed and sizes.
pub fn build_data(cfg: &TrainConfig) -> Result<(Dataset, Vec<SyntheticScene>)> {
    let data = generate_dataset(
        &mut derive_rng(cfg.seed, &[STREAM_DATA]),
        cfg.n_labeled,
        cfg.n_unlabeled,
        cfg.image_size,
    )?;
    let eval = generate_eval_set(&mut derive_rng(cfg.seed, &[STREAM_EVAL]), cfg.n_eval, cfg.image_size)?;
    Ok((data, eval))
}

/// AP50 of `params` on `scenes`.
pub fn evaluate(arch: &ToyDetArch, params: &[f32], scenes: &[SyntheticScene], score_floor: f32, nms_iou: f32) -> Result<EvalResult> {
    let mut preds = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let batch = stack_images(chunk.iter().map(|s| s.pixels.as_slice()), arch.input_size)?;
        let pass = forward(arch, params, &batch, None)?;
        preds.extend(decode_detections(&pass.pred, score_floor, nms_iou));
    }
    let gts: Vec<Vec<Annotation>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    ap50(&preds, &gts, NUM_CLASSES)
}

pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training_with(cfg, &StepOptions::default(), |_, _| {})
}

/// The full loop. `on_step` sees every prepared step and its log, after the update.
pub fn run_training_with(
    cfg: &TrainConfig,
    opts: &StepOptions,
    mut on_step: impl FnMut(&PreparedStep, &StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = cfg.arch();
    let mut state = TrainState::init(&arch, cfg.seed)?;
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome {
            state,
            history: Vec::new(),
            logs: Vec::new(),
        });
    }
    let (data, eval) = build_data(cfg)?;
    let eval_at = |step: u64| step == cfg.total_steps || (cfg.eval_interval > 0 && step.is_multiple_of(cfg.eval_interval));
    let measure = |params: &[f32]| -> Result<f64> {
        if eval.is_empty() {
            return Ok(0.0);
        }
        Ok(evaluate(&arch, params, &eval, cfg.eval_score_floor as f32, cfg.nms_iou as f32)?.mean_ap50)
    };

    let mut history = Vec::new();
    let mut logs = Vec::with_capacity(cfg.total_steps as usize);
    while state.step < cfg.total_steps {
        let (labeled, unlabeled) = sample_batches(&data, cfg, state.step)?;
        let prepared = prepare_step(&state, &arch, &labeled, unlabeled.as_ref(), cfg, opts)?;
        let (next, log) = apply_step(&state, &arch, &prepared, cfg)?;
        if !(log.l_s.is_finite() && log.l_u.is_finite()) {
            return Err(Error::Validation(format!("losses diverged at step {}", log.step)));
        }
        state = next;
        on_step(&prepared, &log);
        if eval_at(log.step) {
            history.push(HistoryRow {
                step: log.step,
                l_s: log.l_s,
                l_u: log.l_u,
                delta: log.delta,
                n_pseudo: log.n_pseudo,
                ap50_teacher: measure(&state.teacher.params)?,
                ap50_student: measure(&state.student.params)?,
            });
        }
        logs.push(log);
    }
    Ok(TrainOutcome { state, history, logs })
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
