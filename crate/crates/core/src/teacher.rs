//! Student/teacher parameter pair, the EMA teacher update and pseudo-label filtering.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::metrics::iou;
use crate::tensor::Scalar;

/// Flat parameter vector plus the architecture it parameterizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    pub params: Vec<T>,
    pub arch_id: String,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(params: Vec<T>, arch_id: impl Into<String>) -> Result<Self> {
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            params,
            arch_id: arch_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            params: self.params.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            arch_id: self.arch_id.clone(),
        }
    }
}

/// `teacher * decay + student * (1 - decay)`, elementwise.
pub fn ema_update<T: Scalar>(teacher: &ModelState<T>, student: &ModelState<T>, decay: f64) -> Result<ModelState<T>> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("decay {decay} not in [0, 1]")));
    }
    if teacher.arch_id != student.arch_id {
        return Err(Error::invalid(format!(
            "teacher arch {:?} differs from student arch {:?}",
            teacher.arch_id, student.arch_id
        )));
    }
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "teacher has {} parameters, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    let d = T::from_f64_lossy(decay);
    let rest = T::from_f64_lossy(1.0 - decay);
    let params = teacher
        .params
        .iter()
        .zip(&student.params)
        .map(|(&t, &s)| t * d + s * rest)
        .collect();
    Ok(ModelState {
        params,
        arch_id: teacher.arch_id.clone(),
    })
}

/// Linear ramp of the EMA decay from `d_init` at step 0 to `d_final` at `ramp_end_step`, flat afterwards.
pub fn decay_schedule(step: u64, ramp_end_step: u64, d_init: f64, d_final: f64) -> Result<f64> {
    if ramp_end_step == 0 {
        return Err(Error::invalid("ramp_end_step must be positive"));
    }
    if d_init > d_final {
        return Err(Error::invalid(format!(
            "initial decay {d_init} exceeds final decay {d_final}"
        )));
    }
    if !(0.0..=1.0).contains(&d_init) || !(0.0..=1.0).contains(&d_final) {
        return Err(Error::invalid("decay rates must lie in [0, 1]"));
    }
    if step >= ramp_end_step {
        return Ok(d_final);
    }
    let frac = step as f64 / ramp_end_step as f64;
    Ok(d_init + (d_final - d_init) * frac)
}

/// A scored, classified box; the teacher's output and the student's unsupervised target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class_id: usize,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl PseudoLabel {
    pub fn new(class_id: usize, score: f32, bbox: BBox) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score {score} not in [0, 1]")));
        }
        bbox.validate()?;
        Ok(Self { class_id, score, bbox })
    }
}

/// Keeps labels with `score >= tau`, in input order.
pub fn filter_pseudo_labels(dets: &[PseudoLabel], tau: f32) -> Vec<PseudoLabel> {
    dets.iter().copied().filter(|d| d.score >= tau).collect()
}

/// Greedy class-wise non-maximum suppression.
///
/// Boxes are visited by descending score, ties by input position; a box is
/// dropped when its IoU with an already kept box of the same class exceeds
/// `iou_threshold`. Survivors come back in visiting order.
pub fn nms(dets: &[PseudoLabel], iou_threshold: f32) -> Vec<PseudoLabel> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<PseudoLabel> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold as f64);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub arch_id: String,
    pub length: usize,
    pub step: u64,
    pub decay: f64,
}

fn checkpoint_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut bin = prefix.as_os_str().to_owned();
    bin.push(".bin");
    let mut json = prefix.as_os_str().to_owned();
    json.push(".json");
    (bin.into(), json.into())
}

/// Writes `<prefix>.bin` (little-endian f32) and `<prefix>.json` (manifest).
pub fn save_checkpoint(prefix: &Path, state: &ModelState<f32>, step: u64, decay: f64) -> Result<()> {
    let (bin, json) = checkpoint_paths(prefix);
    let bytes: Vec<u8> = state.params.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(bin, bytes)?;
    let manifest = CheckpointManifest {
        arch_id: state.arch_id.clone(),
        length: state.len(),
        step,
        decay,
    };
    std::fs::write(json, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(prefix: &Path) -> Result<(ModelState<f32>, CheckpointManifest)> {
    let (bin, json) = checkpoint_paths(prefix);
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(json)?)?;
    let bytes = std::fs::read(bin)?;
    if bytes.len() != manifest.length * 4 {
        return Err(Error::Format(format!(
            "checkpoint holds {} bytes, manifest declares {} floats",
            bytes.len(),
            manifest.length
        )));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let state = ModelState::new(params, manifest.arch_id.clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((state, manifest))
}
