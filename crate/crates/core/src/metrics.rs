//! Segmentation quality measures: per-mask IoU, F-beta from pixel counts,
//! and whole-split evaluation reports.
//!
//! A report's `miou` is the mean of per-frame IoU values; its `fscore` comes
//! from TP/FP/FN counts accumulated over every frame of the split, so large
//! and small objects weigh by their pixel counts rather than per frame.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Clip;
use crate::flow::{farneback_flow, FarnebackParams, FlowError};
use crate::model::{predict, ModelError, ModelParams};
use crate::tensor::Tensor;

/// F-beta weighting, beta squared. Emphasizes precision slightly.
pub const DEFAULT_BETA_SQ: f64 = 0.3;
/// Probability at or above this becomes a foreground pixel.
pub const DEFAULT_BINARIZE_THRESHOLD: f32 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("{0}")]
    InvalidInput(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("flow error: {0}")]
    Flow(#[from] FlowError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn fg(x: f32) -> bool {
    x >= 0.5
}

/// Intersection-over-union of two binary masks; two empty masks count as a
/// perfect match (1.0).
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::Shape(
            pred.shape().to_vec(),
            gt.shape().to_vec(),
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (fg(p), fg(g));
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Pixel confusion counts of binary masks, mergeable across frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl PixelCounts {
    pub fn from_masks(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(MetricError::Shape(
                pred.shape().to_vec(),
                gt.shape().to_vec(),
            ));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (fg(p), fg(g)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// `(1+b) * P * R / (b*P + R)`, 0 when the denominator vanishes.
    pub fn fbeta(&self, beta_sq: f64) -> f64 {
        let p = self.precision();
        let r = self.recall();
        let denom = beta_sq * p + r;
        if denom == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * p * r / denom
        }
    }
}

/// Single-pair F-beta; split-level scores should accumulate [`PixelCounts`]
/// instead of averaging this.
pub fn fscore(pred: &Tensor, gt: &Tensor, beta_sq: f64) -> Result<f64> {
    Ok(PixelCounts::from_masks(pred, gt)?.fbeta(beta_sq))
}

/// Where evaluation gets its motion input from. `Zero` serves the ablations
/// that withhold the flow cue.
#[derive(Debug, Clone)]
pub enum FlowSource {
    Farneback(FarnebackParams),
    Zero,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub binarize_threshold: f32,
    pub beta_sq: f64,
    pub flow: FlowSource,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
            beta_sq: DEFAULT_BETA_SQ,
            flow: FlowSource::Farneback(FarnebackParams::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    pub frames: usize,
    pub miou: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub fscore: f64,
    pub frames: usize,
    pub counts: PixelCounts,
    pub per_clip: Vec<ClipReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per clip plus an aggregate row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "clip_id,frames,miou,fscore")?;
        for c in &self.per_clip {
            writeln!(f, "{},{},{:.6},{:.6}", c.clip_id, c.frames, c.miou, c.fscore)?;
        }
        writeln!(f, "ALL,{},{:.6},{:.6}", self.frames, self.miou, self.fscore)?;
        Ok(())
    }
}

/// Motion input for every frame of every clip, `[2,H,W]` each.
pub fn clip_flows(clips: &[Clip], source: &FlowSource) -> Result<Vec<Vec<Tensor>>> {
    match source {
        FlowSource::Zero => Ok(clips
            .iter()
            .map(|clip| {
                clip.frames
                    .iter()
                    .map(|f| {
                        let s = f.shape();
                        Tensor::zeros(&[2, s[1], s[2]])
                    })
                    .collect()
            })
            .collect()),
        FlowSource::Farneback(params) => {
            let jobs: Vec<(usize, usize)> = clips
                .iter()
                .enumerate()
                .flat_map(|(ci, c)| (0..c.frames.len()).map(move |fi| (ci, fi)))
                .collect();
            let flows: std::result::Result<Vec<Tensor>, FlowError> = jobs
                .par_iter()
                .map(|&(ci, fi)| {
                    let clip = &clips[ci];
                    Ok(farneback_flow(&clip.frames[fi], &clip.neighbor_frames[fi], params)?
                        .to_tensor())
                })
                .collect();
            let mut flows = flows?.into_iter();
            Ok(clips
                .iter()
                .map(|c| (0..c.frames.len()).map(|_| flows.next().expect("one per job")).collect())
                .collect())
        }
    }
}

fn require_ground_truth(clips: &[Clip]) -> Result<()> {
    if clips.is_empty() {
        return Err(MetricError::InvalidInput("empty split".into()));
    }
    for clip in clips {
        for fi in 0..clip.frames.len() {
            if !clip.labeled_indices.contains(&fi) {
                return Err(MetricError::InvalidInput(format!(
                    "clip {} lacks ground truth for frame {fi}; evaluation needs a fully labeled split",
                    clip.clip_id
                )));
            }
        }
    }
    Ok(())
}

/// Scores per-frame probability maps against the clips' ground truth.
/// `preds[ci][fi]` must be `[H,W]` probabilities aligned with the clips.
pub fn report_from_predictions(
    clips: &[Clip],
    preds: &[Vec<Tensor>],
    threshold: f32,
    beta_sq: f64,
) -> Result<EvalReport> {
    require_ground_truth(clips)?;
    if preds.len() != clips.len()
        || preds
            .iter()
            .zip(clips)
            .any(|(p, c)| p.len() != c.frames.len())
    {
        return Err(MetricError::InvalidInput(
            "predictions are not aligned with the split".into(),
        ));
    }
    let mut per_clip = Vec::with_capacity(clips.len());
    let mut total = PixelCounts::default();
    let mut iou_sum = 0.0f64;
    let mut frames = 0usize;
    for (clip, clip_preds) in clips.iter().zip(preds) {
        let mut clip_counts = PixelCounts::default();
        let mut clip_iou = 0.0f64;
        for (pred, gt) in clip_preds.iter().zip(&clip.masks) {
            let bin: Vec<f32> = pred
                .data()
                .iter()
                .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
                .collect();
            let bin = Tensor::new(pred.shape().to_vec(), bin).expect("shape preserved");
            clip_iou += iou(&bin, gt)?;
            clip_counts.merge(&PixelCounts::from_masks(&bin, gt)?);
        }
        let n = clip_preds.len();
        iou_sum += clip_iou;
        frames += n;
        total.merge(&clip_counts);
        per_clip.push(ClipReport {
            clip_id: clip.clip_id.clone(),
            frames: n,
            miou: clip_iou / n as f64,
            fscore: clip_counts.fbeta(beta_sq),
        });
    }
    Ok(EvalReport {
        miou: iou_sum / frames as f64,
        fscore: total.fbeta(beta_sq),
        frames,
        counts: total,
        per_clip,
    })
}

/// Runs the model over a fully labeled split with precomputed flows.
pub fn evaluate_with_flows(
    params: &ModelParams,
    clips: &[Clip],
    flows: &[Vec<Tensor>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    require_ground_truth(clips)?;
    if flows.len() != clips.len() {
        return Err(MetricError::InvalidInput(
            "flow cache is not aligned with the split".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = clips
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.frames.len()).map(move |fi| (ci, fi)))
        .collect();
    let preds: std::result::Result<Vec<Tensor>, ModelError> = jobs
        .par_iter()
        .map(|&(ci, fi)| {
            let clip = &clips[ci];
            predict(params, &clip.frames[fi], &flows[ci][fi], &clip.audio[fi])
        })
        .collect();
    let mut preds = preds?.into_iter();
    let preds: Vec<Vec<Tensor>> = clips
        .iter()
        .map(|c| (0..c.frames.len()).map(|_| preds.next().expect("one per job")).collect())
        .collect();
    report_from_predictions(clips, &preds, opts.binarize_threshold, opts.beta_sq)
}

/// Convenience wrapper that computes flows and evaluates in one call.
pub fn evaluate(params: &ModelParams, clips: &[Clip], opts: &EvalOptions) -> Result<EvalReport> {
    let flows = clip_flows(clips, &opts.flow)?;
    evaluate_with_flows(params, clips, &flows, opts)
}
