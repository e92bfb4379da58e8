//! Training loop: a supervised burn-in phase, then joint iterations where a
//! shared-weights teacher predicts on weakly augmented views without gradient
//! recording and the student learns on strong views against the teacher's
//! hard pseudo-labels. Includes the optimizer, run logging, and resumable
//! checkpoints.
//!
//! Determinism contract: every random decision of a run flows through the
//! single `ChaCha8Rng` carried in [`TrainState`], consumed in a fixed order
//! (labeled weak views, then per unlabeled item its weak view, then its
//! strong view). Flow tensors are cached per dataset item and are pure
//! functions of the clip, so cache warmth never changes results.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{strong_augment, weak_augment, AugmentError};
use crate::dataset::{
    distant_frame_indices, sample_training_batch_from_pool, Clip, DataError, Dataset, LabeledItem,
    UnlabeledItem,
};
use crate::flow::{farneback_flow, FarnebackParams, FlowError};
use crate::losses::{self, LossConfig, LossError};
use crate::metrics::{self, EvalOptions, EvalReport, FlowSource, MetricError};
use crate::model::{build_params, forward, predict, ModelConfig, ModelError, ModelParams};
use crate::rng::rng_from;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}; batch items: {}", items.join(", "))]
    NonFinite {
        iteration: usize,
        items: Vec<String>,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("loss error: {0}")]
    Loss(#[from] LossError),
    #[error("augment error: {0}")]
    Augment(#[from] AugmentError),
    #[error("flow error: {0}")]
    Flow(#[from] FlowError),
    #[error("metric error: {0}")]
    Metric(#[from] MetricError),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which unlabeled-frame cues a run exploits. `NfOnly` keeps the motion
/// input but trains supervised-only; `DfOnly` keeps the consistency loss but
/// zeroes the motion input; `Baseline` drops both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "nf-only")]
    NfOnly,
    #[serde(rename = "df-only")]
    DfOnly,
    #[serde(rename = "baseline")]
    Baseline,
}

impl TrainMode {
    pub fn uses_flow(self) -> bool {
        matches!(self, TrainMode::Full | TrainMode::NfOnly)
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, TrainMode::Full | TrainMode::DfOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::NfOnly => "nf-only",
            TrainMode::DfOnly => "df-only",
            TrainMode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(TrainMode::Full),
            "nf-only" => Ok(TrainMode::NfOnly),
            "df-only" => Ok(TrainMode::DfOnly),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(format!(
                "unknown mode {other:?}; expected full, nf-only, df-only, or baseline"
            )),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps N.
    pub max_iterations: usize,
    /// Supervised-only steps k before the consistency loss activates.
    pub burn_in_iterations: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,
    pub eval_every: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    /// Fraction of train clips whose mask may be used; the rest contribute
    /// only unlabeled frames.
    pub labeled_fraction: f32,
    pub mode: TrainMode,
    pub loss: LossConfig,
    pub flow: FarnebackParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 600,
            burn_in_iterations: 50,
            batch_labeled: 8,
            batch_unlabeled: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 100,
            checkpoint_every: 200,
            labeled_fraction: 0.1,
            mode: TrainMode::Full,
            loss: LossConfig::default(),
            flow: FarnebackParams::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in_iterations > self.max_iterations {
            return Err(TrainError::Config(format!(
                "burn_in_iterations {} exceeds max_iterations {}",
                self.burn_in_iterations, self.max_iterations
            )));
        }
        if self.batch_labeled < 1 {
            return Err(TrainError::Config("batch_labeled must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!(
                    "{name} must lie in [0,1), got {b}"
                )));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(TrainError::Config("adam_eps must be finite and > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be >= 1".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "labeled_fraction must lie in (0,1], got {}",
                self.labeled_fraction
            )));
        }
        self.loss.validate().map_err(TrainError::Loss)?;
        self.model.validate().map_err(TrainError::Model)?;
        Ok(())
    }

    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Motion source implied by the mode.
    pub fn flow_source(&self) -> FlowSource {
        if self.mode.uses_flow() {
            FlowSource::Farneback(self.flow.clone())
        } else {
            FlowSource::Zero
        }
    }
}

/// First and second gradient moments, aligned with `ModelParams::tensors`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.model, cfg.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            params,
            adam,
            iteration: 0,
            rng: rng_from(cfg.seed, 4),
        })
    }
}

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_total: f64,
}

/// One line of the run log, written at every evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLogRecord {
    pub iteration: usize,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_total: f64,
    pub miou: f64,
    pub fscore: f64,
    pub wall_ms: u64,
}

/// Owns the per-run caches (labeled pool, flow cache) over one train split.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    clips: &'a [Clip],
    labeled_pool: Vec<usize>,
    flow_cache: Vec<Vec<Option<Tensor>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, clips: &'a [Clip]) -> Result<Self> {
        cfg.validate()?;
        if clips.is_empty() {
            return Err(TrainError::Config("empty train split".into()));
        }
        // Deterministic labeled subset: a seeded shuffle, independent of any
        // other random decision so every mode sees the same pool.
        let n = clips.len();
        let m = ((cfg.labeled_fraction as f64 * n as f64).ceil() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = rng_from(cfg.seed, 5);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let mut labeled_pool = idx[..m].to_vec();
        labeled_pool.sort_unstable();
        let flow_cache = clips.iter().map(|c| vec![None; c.frames.len()]).collect();
        Ok(Self {
            cfg,
            clips,
            labeled_pool,
            flow_cache,
        })
    }

    pub fn labeled_pool(&self) -> &[usize] {
        &self.labeled_pool
    }

    /// Draws one training batch; `b_u` is the unlabeled size for this phase.
    pub fn sample_batch(
        &self,
        b_u: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<LabeledItem>, Vec<UnlabeledItem>)> {
        Ok(sample_training_batch_from_pool(
            self.clips,
            &self.labeled_pool,
            (self.cfg.batch_labeled, b_u),
            rng,
        )?)
    }

    /// Motion input for one dataset item: cached Farneback flow against the
    /// item's neighboring frame, or zeros when the mode withholds motion.
    fn flow_for(&mut self, ci: usize, fi: usize) -> Result<Tensor> {
        let clip = &self.clips[ci];
        if !self.cfg.mode.uses_flow() {
            let s = clip.frames[fi].shape();
            return Ok(Tensor::zeros(&[2, s[1], s[2]]));
        }
        if self.flow_cache[ci][fi].is_none() {
            let field = farneback_flow(&clip.frames[fi], &clip.neighbor_frames[fi], &self.cfg.flow)?;
            self.flow_cache[ci][fi] = Some(field.to_tensor());
        }
        Ok(self.flow_cache[ci][fi].clone().expect("just filled"))
    }

    /// Supervised-only update; the consistency weight is never consulted.
    pub fn burn_in_step(
        &mut self,
        state: &mut TrainState,
        labeled: &[LabeledItem],
    ) -> Result<StepStats> {
        self.step_impl(state, labeled, &[], None)
    }

    /// Joint update with the teacher sharing the student's current weights.
    pub fn joint_step(
        &mut self,
        state: &mut TrainState,
        labeled: &[LabeledItem],
        unlabeled: &[UnlabeledItem],
    ) -> Result<StepStats> {
        self.step_impl(state, labeled, unlabeled, None)
    }

    /// Joint update with explicit teacher weights. Training always passes the
    /// student's own weights; this seam exists so the stop-gradient contract
    /// can be checked against a detached copy.
    pub fn joint_step_with_teacher(
        &mut self,
        state: &mut TrainState,
        labeled: &[LabeledItem],
        unlabeled: &[UnlabeledItem],
        teacher: &ModelParams,
    ) -> Result<StepStats> {
        self.step_impl(state, labeled, unlabeled, Some(teacher))
    }

    fn step_impl(
        &mut self,
        state: &mut TrainState,
        labeled: &[LabeledItem],
        unlabeled: &[UnlabeledItem],
        teacher_override: Option<&ModelParams>,
    ) -> Result<StepStats> {
        if labeled.is_empty() {
            return Err(TrainError::Config("step needs a labeled batch".into()));
        }
        // Divergence shows up as non-finite parameters at the next step;
        // catch it here so the caller gets a structured abort instead of a
        // poisoned graph.
        if !state.params.all_finite() {
            return Err(TrainError::NonFinite {
                iteration: state.iteration,
                items: self.batch_ids(labeled, unlabeled),
            });
        }
        let mut g = Graph::new();
        let vars = build_params(&mut g, &state.params, true);

        let mut sup_terms = Vec::with_capacity(labeled.len());
        for item in labeled {
            let flow = self.flow_for(item.clip_index, item.frame_index)?;
            let (view, _) = weak_augment(&item.image, &flow, Some(&item.mask), &mut state.rng)?;
            let iv = g.constant(view.image);
            let fv = g.constant(view.flow);
            let av = g.constant(item.audio.clone());
            let pred = forward(&mut g, &vars, &self.cfg.model, iv, fv, av)?;
            let mask = view.mask.expect("mask passed through weak_augment");
            sup_terms.push(losses::sup_loss(&mut g, pred, &mask, &self.cfg.loss)?);
        }
        let mut l_sup = sup_terms[0];
        for &t in &sup_terms[1..] {
            l_sup = g.add(l_sup, t)?;
        }
        if sup_terms.len() > 1 {
            let inv = g.constant(Tensor::scalar(1.0 / sup_terms.len() as f32));
            l_sup = g.mul(inv, l_sup)?;
        }

        let l_unsup = if unlabeled.is_empty() {
            None
        } else {
            let teacher = teacher_override.unwrap_or(&state.params);
            let mut weak_views = Vec::with_capacity(unlabeled.len());
            let mut teacher_probs = Vec::with_capacity(unlabeled.len());
            for item in unlabeled {
                let flow = self.flow_for(item.clip_index, item.frame_index)?;
                let (view, _) = weak_augment(&item.image, &flow, None, &mut state.rng)?;
                // No-gradient teacher forward; its output enters the loss as
                // a plain tensor, so nothing can flow back through it.
                let p_w = predict(teacher, &view.image, &view.flow, &item.audio)?;
                weak_views.push(view);
                teacher_probs.push(p_w);
            }
            let mut mixed_probs = Vec::with_capacity(unlabeled.len());
            let mut student_preds = Vec::with_capacity(unlabeled.len());
            for (i, item) in unlabeled.iter().enumerate() {
                let j = (i + 1) % unlabeled.len();
                // The teacher's probability map rides along as the label
                // plane; thresholding after the paste equals pasting
                // thresholded planes, and it keeps confidence intact.
                let (strong, mixed_pw, _) = strong_augment(
                    &weak_views[i],
                    &teacher_probs[i],
                    &weak_views[j],
                    &teacher_probs[j],
                    j,
                    &mut state.rng,
                )?;
                let iv = g.constant(strong.image);
                let fv = g.constant(strong.flow);
                let av = g.constant(item.audio.clone());
                student_preds.push(forward(&mut g, &vars, &self.cfg.model, iv, fv, av)?);
                mixed_probs.push(mixed_pw);
            }
            Some(losses::unsup_loss(
                &mut g,
                &mixed_probs,
                &student_preds,
                &self.cfg.loss,
            )?)
        };

        let total = match l_unsup {
            Some(lu) => losses::total_loss(&mut g, l_sup, lu, self.cfg.loss.lambda)?,
            None => l_sup,
        };
        let stats = StepStats {
            l_sup: g.value(l_sup).item()? as f64,
            l_unsup: match l_unsup {
                Some(lu) => g.value(lu).item()? as f64,
                None => 0.0,
            },
            l_total: g.value(total).item()? as f64,
        };
        if !stats.l_total.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: state.iteration,
                items: self.batch_ids(labeled, unlabeled),
            });
        }
        g.backward(total)?;
        let grads: Vec<Option<Tensor>> = vars.vars.iter().map(|(_, v)| g.grad_tensor(*v)).collect();
        drop(g);
        self.adam_step(state, &grads);
        state.iteration += 1;
        Ok(stats)
    }

    fn batch_ids(&self, labeled: &[LabeledItem], unlabeled: &[UnlabeledItem]) -> Vec<String> {
        labeled
            .iter()
            .map(|it| (it.clip_index, it.frame_index))
            .chain(unlabeled.iter().map(|it| (it.clip_index, it.frame_index)))
            .map(|(ci, fi)| format!("{}[{fi}]", self.clips[ci].clip_id))
            .collect()
    }

    /// Adaptive-moment update; parameters without a gradient this step decay
    /// their moments against a zero gradient.
    fn adam_step(&self, state: &mut TrainState, grads: &[Option<Tensor>]) {
        let lr = self.cfg.learning_rate;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let eps = self.cfg.adam_eps;
        state.adam.t += 1;
        let bc1 = 1.0 - b1.powi(state.adam.t as i32);
        let bc2 = 1.0 - b2.powi(state.adam.t as i32);
        for (i, (_, p)) in state.params.tensors.iter_mut().enumerate() {
            let m = state.adam.m[i].data_mut();
            let v = state.adam.v[i].data_mut();
            let pd = p.data_mut();
            let gd = grads[i].as_ref().map(|t| t.data());
            for j in 0..pd.len() {
                let gj = gd.map_or(0.0, |d| d[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Result of a completed run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EvalLogRecord>,
    pub final_report: EvalReport,
    pub final_checkpoint: PathBuf,
}

/// Runs the full schedule: burn-in, joint phase, periodic evaluation and
/// checkpointing. `resume` continues a run from a saved state; the stored
/// config must hash-match `cfg`.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let effective_bu = if cfg.mode.uses_unlabeled() {
        cfg.batch_unlabeled
    } else {
        0
    };
    if effective_bu > 0 && distant_frame_indices(&data.train).is_empty() {
        return Err(TrainError::Config(
            "mode needs unlabeled distant frames but the dataset has none (frames_per_clip < 3)"
                .into(),
        ));
    }
    if data.val.is_empty() {
        return Err(TrainError::Config("empty validation split".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut trainer = Trainer::new(cfg, &data.train)?;
    let mut state = match resume {
        Some(path) => load_checkpoint(path, cfg)?,
        None => TrainState::new(cfg)?,
    };
    if state.iteration > cfg.max_iterations {
        return Err(TrainError::Config(format!(
            "checkpoint is at iteration {} but max_iterations is {}",
            state.iteration, cfg.max_iterations
        )));
    }

    let flow_source = cfg.flow_source();
    let val_flows = metrics::clip_flows(&data.val, &flow_source)?;
    let eval_opts = EvalOptions {
        flow: flow_source,
        ..EvalOptions::default()
    };

    let log_path = out_dir.join("log.jsonl");
    let mut log_file = BufWriter::new(if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    });

    let started = Instant::now();
    let mut log = Vec::new();
    let mut last_report: Option<EvalReport> = None;
    while state.iteration < cfg.max_iterations {
        let joint = state.iteration >= cfg.burn_in_iterations;
        let b_u = if joint { effective_bu } else { 0 };
        let (labeled, unlabeled) = trainer.sample_batch(b_u, &mut state.rng)?;
        let stats = if joint {
            trainer.joint_step(&mut state, &labeled, &unlabeled)?
        } else {
            trainer.burn_in_step(&mut state, &labeled)?
        };

        let done = state.iteration == cfg.max_iterations;
        if state.iteration % cfg.eval_every == 0 || done {
            let report = metrics::evaluate_with_flows(&state.params, &data.val, &val_flows, &eval_opts)?;
            let record = EvalLogRecord {
                iteration: state.iteration,
                l_sup: stats.l_sup,
                l_unsup: stats.l_unsup,
                l_total: stats.l_total,
                miou: report.miou,
                fscore: report.fscore,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            writeln!(log_file, "{}", serde_json::to_string(&record)?)?;
            log.push(record);
            last_report = Some(report);
        }
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 && !done {
            let path = out_dir.join(format!("ckpt-{:06}.bin", state.iteration));
            save_checkpoint(&state, cfg, &path)?;
        }
    }
    log_file.flush()?;

    let final_report = match last_report {
        Some(r) => r,
        None => metrics::evaluate_with_flows(&state.params, &data.val, &val_flows, &eval_opts)?,
    };
    let final_checkpoint = out_dir.join("ckpt-final.bin");
    save_checkpoint(&state, cfg, &final_checkpoint)?;
    std::fs::write(
        out_dir.join("eval-final.json"),
        final_report.to_json().as_bytes(),
    )?;
    Ok(TrainOutcome {
        state,
        log,
        final_report,
        final_checkpoint,
    })
}

// ---- checkpoints ----

const TRAIN_CKPT_MAGIC: &[u8; 4] = b"UFEC";
const TRAIN_CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngSnapshot {
    seed: Vec<u8>,
    word_pos_lo: u64,
    word_pos_hi: u64,
    stream: u64,
}

impl RngSnapshot {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed().to_vec(),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
            stream: rng.get_stream(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| TrainError::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos((self.word_pos_hi as u128) << 64 | self.word_pos_lo as u128);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainCheckpointHeader {
    version: u32,
    config: TrainConfig,
    config_sha256: String,
    iteration: usize,
    adam_t: u64,
    rng: RngSnapshot,
    /// Parameter names and shapes; the payload holds, in this order, every
    /// parameter, then every first moment, then every second moment.
    tensors: Vec<(String, Vec<usize>)>,
    payload_sha256: String,
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    for group in [
        state.params.tensors.iter().map(|(_, t)| t).collect::<Vec<_>>(),
        state.adam.m.iter().collect(),
        state.adam.v.iter().collect(),
    ] {
        for t in group {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let payload_sha256: String = Sha256::digest(&payload)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let header = TrainCheckpointHeader {
        version: TRAIN_CKPT_VERSION,
        config: cfg.clone(),
        config_sha256: cfg.sha256(),
        iteration: state.iteration,
        adam_t: state.adam.t,
        rng: RngSnapshot::capture(&state.rng),
        tensors: state
            .params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
        payload_sha256,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = File::create(path)?;
    f.write_all(TRAIN_CKPT_MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Loads a checkpoint verifying it against the caller's config; used when
/// resuming a run.
pub fn load_checkpoint(path: &Path, expected: &TrainConfig) -> Result<TrainState> {
    Ok(load_checkpoint_impl(path, Some(expected))?.0)
}

/// Loads a checkpoint on its own stored config; used by inference-side
/// consumers that only have the file.
pub fn load_checkpoint_any(path: &Path) -> Result<(TrainState, TrainConfig)> {
    load_checkpoint_impl(path, None)
}

fn load_checkpoint_impl(
    path: &Path,
    expected: Option<&TrainConfig>,
) -> Result<(TrainState, TrainConfig)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[0..4] != TRAIN_CKPT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(TrainError::Checkpoint("truncated header".into()));
    }
    let header: TrainCheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
    if header.version != TRAIN_CKPT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.config_sha256 != header.config.sha256() {
        return Err(TrainError::Checkpoint(
            "stored config does not match its hash".into(),
        ));
    }
    if let Some(expected) = expected {
        if header.config_sha256 != expected.sha256() {
            return Err(TrainError::Checkpoint(
                "checkpoint was written under a different train config; refusing to resume".into(),
            ));
        }
    }
    let payload = &bytes[8 + hlen..];
    let payload_sha256: String = Sha256::digest(payload)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    if payload_sha256 != header.payload_sha256 {
        return Err(TrainError::Checkpoint(
            "payload checksum mismatch; checkpoint is corrupted".into(),
        ));
    }

    let numel: usize = header
        .tensors
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if payload.len() != 3 * 4 * numel {
        return Err(TrainError::Checkpoint(format!(
            "payload holds {} bytes but the header describes {}",
            payload.len(),
            3 * 4 * numel
        )));
    }
    let mut offset = 0usize;
    let mut read_group = |tensors: &[(String, Vec<usize>)]| -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(tensors.len());
        for (name, shape) in tensors {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            out.push((
                name.clone(),
                Tensor::new(shape.clone(), data)
                    .map_err(|e| TrainError::Checkpoint(format!("tensor {name}: {e}")))?,
            ));
        }
        Ok(out)
    };
    let params = read_group(&header.tensors)?;
    let m = read_group(&header.tensors)?;
    let v = read_group(&header.tensors)?;
    let params = ModelParams {
        config: header.config.model.clone(),
        tensors: params,
    };
    if !params.all_finite() {
        return Err(TrainError::Checkpoint(
            "parameters contain non-finite values".into(),
        ));
    }
    let state = TrainState {
        params,
        adam: AdamState {
            t: header.adam_t,
            m: m.into_iter().map(|(_, t)| t).collect(),
            v: v.into_iter().map(|(_, t)| t).collect(),
        },
        iteration: header.iteration,
        rng: header.rng.restore()?,
    };
    Ok((state, header.config))
}
