//! Synthetic "moving sounding shapes" benchmark.
//!
//! Each clip shows textured shapes over a static value-noise background.
//! One shape is sounding: its class is encoded in the per-frame audio
//! embedding, the ground-truth mask is its exact rasterization, and it
//! travels across the canvas while silent distractors merely drift in
//! place; motion is therefore a real cue for which object sounds. Clips
//! provide T sampled frames plus the raw-rate successor of each, so optical
//! flow between a frame and its neighbor captures that motion. In the
//! training split only frame 0 carries a usable label, mirroring a
//! one-annotation-per-clip budget; evaluation splits expose every mask.

use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("bad blob {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("checksum mismatch for {path}")]
    Checksum { path: String },
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub fn index(self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i % NUM_CLASSES {
            0 => ShapeClass::Circle,
            1 => ShapeClass::Square,
            _ => ShapeClass::Triangle,
        }
    }
}

/// Position and orientation at one raw-rate time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub cx: f32,
    pub cy: f32,
    pub angle: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape_class: ShapeClass,
    pub sounding: bool,
    /// Circle radius; other classes derive their size from this too.
    pub scale: f32,
    /// One pose per raw frame, length (T-1)*raw_steps + 2.
    pub trajectory: Vec<Pose>,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub clip_id: String,
    /// T sampled frames, each [3,H,W] in [0,1].
    pub frames: Vec<Tensor>,
    /// Raw-rate successor of each sampled frame.
    pub neighbor_frames: Vec<Tensor>,
    /// T audio embeddings of dimension d.
    pub audio: Vec<Tensor>,
    /// T binary masks [H,W] of the sounding shape.
    pub masks: Vec<Tensor>,
    /// Which sampled frames expose their mask during training.
    pub labeled_indices: Vec<usize>,
    pub scene: Vec<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    /// T, the number of sampled frames per clip.
    pub frames_per_clip: usize,
    /// Raw frames between consecutive sampled frames.
    pub raw_steps: usize,
    pub audio_dim: usize,
    /// Displacement bound per raw step, in pixels.
    pub max_step: f32,
    /// Shapes per clip: one sounding plus distractors of other classes.
    pub num_shapes: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames_per_clip: 5,
            raw_steps: 8,
            audio_dim: 16,
            max_step: 2.0,
            num_shapes: 2,
            train_clips: 200,
            val_clips: 40,
            test_clips: 40,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height != self.width || ![32usize, 64, 128].contains(&self.height) {
            return Err(DataError::InvalidConfig(format!(
                "canvas must be square with side 32, 64 or 128, got {}x{}",
                self.height, self.width
            )));
        }
        if self.frames_per_clip < 2 {
            return Err(DataError::InvalidConfig(
                "frames_per_clip must be >= 2".into(),
            ));
        }
        if self.raw_steps < 1 {
            return Err(DataError::InvalidConfig("raw_steps must be >= 1".into()));
        }
        if self.num_shapes < 1 || self.num_shapes > NUM_CLASSES {
            return Err(DataError::InvalidConfig(format!(
                "num_shapes must be in 1..={NUM_CLASSES}, got {}",
                self.num_shapes
            )));
        }
        if self.audio_dim < NUM_CLASSES + 1 {
            return Err(DataError::InvalidConfig(format!(
                "audio_dim must be > {NUM_CLASSES}, got {}",
                self.audio_dim
            )));
        }
        if !(self.max_step > 0.0) {
            return Err(DataError::InvalidConfig("max_step must be > 0".into()));
        }
        if self.train_clips == 0 {
            return Err(DataError::InvalidConfig("train_clips must be >= 1".into()));
        }
        Ok(())
    }

    pub fn raw_frame_count(&self) -> usize {
        (self.frames_per_clip - 1) * self.raw_steps + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
}

// ---- procedural texture ----

fn lattice_value(seed: u64, ix: i64, iy: i64) -> f32 {
    let z = derive_seed(seed, (ix as u64) ^ (iy as u64).rotate_left(32));
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise on an infinite lattice: random values at integer cells of
/// size `cell`, smoothly interpolated. Output in [0,1).
fn value_noise_at(seed: u64, x: f32, y: f32, cell: f32) -> f32 {
    let gx = x / cell;
    let gy = y / cell;
    let ix = gx.floor();
    let iy = gy.floor();
    let fx = smoothstep(gx - ix);
    let fy = smoothstep(gy - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = lattice_value(seed, ix, iy);
    let v10 = lattice_value(seed, ix + 1, iy);
    let v01 = lattice_value(seed, ix, iy + 1);
    let v11 = lattice_value(seed, ix + 1, iy + 1);
    let top = v00 * (1.0 - fx) + v10 * fx;
    let bot = v01 * (1.0 - fx) + v11 * fx;
    top * (1.0 - fy) + bot * fy
}

/// Three-octave fractal value noise in [0,1): enough low-frequency content
/// to survive pyramid downscaling, enough high-frequency for local flow.
pub fn fractal_noise(seed: u64, x: f32, y: f32) -> f32 {
    0.5 * value_noise_at(seed, x, y, 16.0)
        + 0.3 * value_noise_at(seed.wrapping_add(1), x, y, 8.0)
        + 0.2 * value_noise_at(seed.wrapping_add(2), x, y, 4.0)
}

// ---- geometry ----

fn point_in_shape(spec: &SceneSpec, pose: &Pose, px: f32, py: f32) -> bool {
    let dx = px - pose.cx;
    let dy = py - pose.cy;
    match spec.shape_class {
        ShapeClass::Circle => dx * dx + dy * dy <= spec.scale * spec.scale,
        ShapeClass::Square => {
            // Rotate into the square's frame; half-side chosen so the area
            // is comparable to the circle's.
            let half = spec.scale * 0.9;
            let (s, c) = pose.angle.sin_cos();
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            lx.abs() <= half && ly.abs() <= half
        }
        ShapeClass::Triangle => {
            // Equilateral triangle of circumradius 1.55 * scale: inside iff
            // on the inner side of all three edges. The factor matches its
            // area to the circle's so no class is much thinner than others.
            let r = spec.scale * 1.55;
            let mut vx = [0.0f32; 3];
            let mut vy = [0.0f32; 3];
            for k in 0..3 {
                let a = pose.angle + std::f32::consts::FRAC_PI_2
                    + k as f32 * 2.0 * std::f32::consts::FRAC_PI_3;
                vx[k] = r * a.cos();
                vy[k] = r * a.sin();
            }
            let mut sign = 0.0f32;
            for k in 0..3 {
                let (x1, y1) = (vx[k], vy[k]);
                let (x2, y2) = (vx[(k + 1) % 3], vy[(k + 1) % 3]);
                let cross = (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
                if k == 0 {
                    sign = cross;
                } else if cross * sign < 0.0 {
                    return false;
                }
            }
            true
        }
    }
}

/// Largest distance from the center to any point of the shape, used to keep
/// trajectories inside the canvas.
fn shape_radius(spec: &SceneSpec) -> f32 {
    match spec.shape_class {
        ShapeClass::Circle => spec.scale,
        ShapeClass::Square => spec.scale * 0.9 * std::f32::consts::SQRT_2,
        ShapeClass::Triangle => spec.scale * 1.55,
    }
}

// ---- generation ----

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller transform over two uniform draws.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Random bounce-free-ish trajectory: a dominant drift toward a sampled
/// target plus per-step jitter, clamped to max_step per raw step and
/// reflected off the canvas walls. Retries until the first and last sampled
/// frames are at least a quarter of the canvas width apart.
fn sample_trajectory(
    rng: &mut ChaCha8Rng,
    config: &DatasetConfig,
    radius: f32,
) -> Result<Vec<Pose>> {
    let raw_frames = config.raw_frame_count();
    let span_steps = ((config.frames_per_clip - 1) * config.raw_steps) as f32;
    let (w, h) = (config.width as f32, config.height as f32);
    let lo = radius + 1.0;
    let (hi_x, hi_y) = (w - 1.0 - radius - 1.0, h - 1.0 - radius - 1.0);
    if lo >= hi_x || lo >= hi_y {
        return Err(DataError::InvalidConfig(format!(
            "shape radius {radius} does not fit the {w}x{h} canvas"
        )));
    }
    let min_disp = 0.25 * w;
    // Aimed distances leave headroom above the displacement floor so jitter
    // and wall bounces rarely break it; if even a straight max-speed run
    // cannot reach that, the motion budget is inconsistent with the canvas.
    let dist_lo = min_disp * 1.25;
    let dist_hi = (0.85 * w).min(span_steps * config.max_step);
    if dist_hi <= dist_lo {
        return Err(DataError::InvalidConfig(format!(
            "frames_per_clip/raw_steps/max_step allow at most {:.1}px of travel, \
             but the displacement floor needs {dist_lo:.1}px",
            span_steps * config.max_step
        )));
    }

    for _attempt in 0..200 {
        let start_x = rng.gen_range(lo..hi_x);
        let start_y = rng.gen_range(lo..hi_y);
        // Aim at a target whose distance already satisfies the displacement
        // requirement, if one fits; jitter and bounces may still break it,
        // hence the outer retry.
        let mut target = None;
        for _ in 0..50 {
            let dist = rng.gen_range(dist_lo..dist_hi);
            let theta = rng.gen_range(0.0..std::f32::consts::TAU);
            let tx = start_x + dist * theta.cos();
            let ty = start_y + dist * theta.sin();
            if tx > lo && tx < hi_x && ty > lo && ty < hi_y {
                target = Some((tx, ty));
                break;
            }
        }
        let Some((tx, ty)) = target else { continue };
        let base_vx = (tx - start_x) / span_steps;
        let base_vy = (ty - start_y) / span_steps;

        let angle0 = rng.gen_range(0.0..std::f32::consts::TAU);
        let spin = rng.gen_range(-0.03..0.03f32);

        let mut poses = Vec::with_capacity(raw_frames);
        let (mut x, mut y) = (start_x, start_y);
        let (mut vx, mut vy) = (base_vx, base_vy);
        poses.push(Pose {
            cx: x,
            cy: y,
            angle: angle0,
        });
        for k in 1..raw_frames {
            let mut dx = vx + rng.gen_range(-0.3..0.3f32);
            let mut dy = vy + rng.gen_range(-0.3..0.3f32);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag > config.max_step {
                dx *= config.max_step / mag;
                dy *= config.max_step / mag;
            }
            let (mut nx, mut ny) = (x + dx, y + dy);
            if nx < lo || nx > hi_x {
                vx = -vx;
                nx = nx.clamp(lo, hi_x);
            }
            if ny < lo || ny > hi_y {
                vy = -vy;
                ny = ny.clamp(lo, hi_y);
            }
            // The clamp never moves a point further than the step that got
            // it there, so the per-step bound still holds.
            x = nx;
            y = ny;
            poses.push(Pose {
                cx: x,
                cy: y,
                angle: angle0 + spin * k as f32,
            });
        }
        let last_sampled = (config.frames_per_clip - 1) * config.raw_steps;
        let ddx = poses[last_sampled].cx - poses[0].cx;
        let ddy = poses[last_sampled].cy - poses[0].cy;
        if (ddx * ddx + ddy * ddy).sqrt() >= min_disp {
            return Ok(poses);
        }
    }
    Err(DataError::Sampling(
        "could not sample a trajectory with enough displacement".into(),
    ))
}

/// Maximum distractor speed in pixels per raw step. Kept well below the
/// sounding shape's pace (0.6 to 2.0 px per step) so motion stays a faithful
/// cue for which object sounds, matching the regime the flow branch exploits.
const DISTRACTOR_MAX_STEP: f32 = 0.25;

/// Slow drift for silent shapes: visually alive but going nowhere. Same wall
/// handling as [`sample_trajectory`], no displacement floor.
fn sample_distractor_trajectory(
    rng: &mut ChaCha8Rng,
    config: &DatasetConfig,
    radius: f32,
) -> Result<Vec<Pose>> {
    let raw_frames = config.raw_frame_count();
    let (w, h) = (config.width as f32, config.height as f32);
    let lo = radius + 1.0;
    let (hi_x, hi_y) = (w - 1.0 - radius - 1.0, h - 1.0 - radius - 1.0);
    if lo >= hi_x || lo >= hi_y {
        return Err(DataError::InvalidConfig(format!(
            "shape radius {radius} does not fit the {w}x{h} canvas"
        )));
    }
    let speed = rng.gen_range(0.05..0.8 * DISTRACTOR_MAX_STEP);
    let heading = rng.gen_range(0.0..std::f32::consts::TAU);
    let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
    let angle0 = rng.gen_range(0.0..std::f32::consts::TAU);
    let spin = rng.gen_range(-0.01..0.01f32);

    let (mut x, mut y) = (rng.gen_range(lo..hi_x), rng.gen_range(lo..hi_y));
    let mut poses = Vec::with_capacity(raw_frames);
    poses.push(Pose {
        cx: x,
        cy: y,
        angle: angle0,
    });
    for k in 1..raw_frames {
        let mut dx = vx + rng.gen_range(-0.03..0.03f32);
        let mut dy = vy + rng.gen_range(-0.03..0.03f32);
        let mag = (dx * dx + dy * dy).sqrt();
        if mag > DISTRACTOR_MAX_STEP {
            dx *= DISTRACTOR_MAX_STEP / mag;
            dy *= DISTRACTOR_MAX_STEP / mag;
        }
        let (mut nx, mut ny) = (x + dx, y + dy);
        if nx < lo || nx > hi_x {
            vx = -vx;
            nx = nx.clamp(lo, hi_x);
        }
        if ny < lo || ny > hi_y {
            vy = -vy;
            ny = ny.clamp(lo, hi_y);
        }
        x = nx;
        y = ny;
        poses.push(Pose {
            cx: x,
            cy: y,
            angle: angle0 + spin * k as f32,
        });
    }
    Ok(poses)
}

/// Shade one pixel: static noise background unless a shape covers it; shapes
/// carry their own noise texture (moving with them) plus a faint class tint.
fn shade_pixel(
    scene: &[SceneSpec],
    raw_index: usize,
    bg_seed: u64,
    x: usize,
    y: usize,
) -> [f32; 3] {
    let (xf, yf) = (x as f32, y as f32);
    // Background texture is deliberately quieter than the shapes' so local
    // gradient energy, and with it the optical-flow evidence, concentrates
    // on the moving objects rather than the static backdrop.
    let mut lum = 0.35 + 0.3 * fractal_noise(bg_seed, xf, yf);
    let mut tint = [0.0f32; 3];
    // Distractors first, the sounding shape last so it is never occluded.
    for spec in scene.iter().rev() {
        let pose = &spec.trajectory[raw_index];
        if point_in_shape(spec, pose, xf, yf) {
            lum = 0.18 + 0.65 * fractal_noise(spec.texture_seed, xf - pose.cx, yf - pose.cy);
            tint = [-0.02; 3];
            tint[spec.shape_class.index()] = 0.10;
        }
    }
    [
        (lum + tint[0]).clamp(0.0, 1.0),
        (lum + tint[1]).clamp(0.0, 1.0),
        (lum + tint[2]).clamp(0.0, 1.0),
    ]
}

fn render_frame(scene: &[SceneSpec], raw_index: usize, bg_seed: u64, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let rgb = shade_pixel(scene, raw_index, bg_seed, x, y);
            for c in 0..3 {
                data[c * h * w + y * w + x] = rgb[c];
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("frame shape")
}

fn rasterize_mask(spec: &SceneSpec, raw_index: usize, h: usize, w: usize) -> Tensor {
    let pose = &spec.trajectory[raw_index];
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if point_in_shape(spec, pose, x as f32, y as f32) {
                data[y * w + x] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], data).expect("mask shape")
}

fn audio_embedding(rng: &mut ChaCha8Rng, class: ShapeClass, dim: usize) -> Tensor {
    let mut v = vec![0.0f32; dim];
    v[class.index()] = 1.0;
    for item in v.iter_mut() {
        *item += 0.05 * gaussian(rng);
    }
    // The noise is far too small to push the norm outside [0.5, 2.0], but
    // the invariant is contractual, so enforce it.
    let norm = v.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt() as f32;
    if norm < 0.5 || norm > 2.0 {
        let s = 1.0 / norm.max(1e-6);
        v.iter_mut().for_each(|x| *x *= s);
    }
    Tensor::new(vec![dim], v).expect("audio shape")
}

/// Deterministic clip generation: all randomness flows from `seed`. The
/// sounding shape is scene[0]; labeled_indices starts as {0} (the training
/// regime) and is widened by the dataset generator for eval splits.
pub fn generate_clip(seed: u64, config: &DatasetConfig) -> Result<Clip> {
    config.validate()?;
    let mut rng = rng_from(seed, 1);
    let (h, w) = (config.height, config.width);

    let sounding_class = ShapeClass::from_index(rng.gen_range(0..NUM_CLASSES));
    let mut classes = vec![sounding_class];
    let mut remaining: Vec<ShapeClass> = (0..NUM_CLASSES)
        .map(ShapeClass::from_index)
        .filter(|c| *c != sounding_class)
        .collect();
    for _ in 1..config.num_shapes {
        let pick = rng.gen_range(0..remaining.len());
        classes.push(remaining.remove(pick));
    }

    // Shape sizes leave a window-sized interior core so local flow has
    // support strictly inside the object, not just at its boundary.
    let scale_lo = 9.0 * h as f32 / 64.0;
    let scale_hi = 12.0 * h as f32 / 64.0;
    let mut scene = Vec::with_capacity(config.num_shapes);
    for (i, class) in classes.iter().enumerate() {
        let scale = rng.gen_range(scale_lo..scale_hi);
        let texture_seed = rng.gen::<u64>();
        let mut spec = SceneSpec {
            shape_class: *class,
            sounding: i == 0,
            scale,
            trajectory: Vec::new(),
            texture_seed,
        };
        spec.trajectory = if spec.sounding {
            sample_trajectory(&mut rng, config, shape_radius(&spec))?
        } else {
            sample_distractor_trajectory(&mut rng, config, shape_radius(&spec))?
        };
        scene.push(spec);
    }

    let bg_seed = rng.gen::<u64>();
    let t = config.frames_per_clip;
    let mut frames = Vec::with_capacity(t);
    let mut neighbors = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    let mut audio = Vec::with_capacity(t);
    for i in 0..t {
        let raw = i * config.raw_steps;
        frames.push(render_frame(&scene, raw, bg_seed, h, w));
        neighbors.push(render_frame(&scene, raw + 1, bg_seed, h, w));
        masks.push(rasterize_mask(&scene[0], raw, h, w));
        audio.push(audio_embedding(&mut rng, sounding_class, config.audio_dim));
    }

    Ok(Clip {
        clip_id: format!("clip-{seed:016x}"),
        frames,
        neighbor_frames: neighbors,
        audio,
        masks,
        labeled_indices: vec![0],
        scene,
    })
}

/// Generates train/val/test splits. Clip seeds derive from the base seed so
/// any clip can be regenerated independently; generation is parallel per
/// clip and the output order is fixed by index, not by thread timing.
pub fn generate_dataset(seed: u64, config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let gen_split = |split_no: u64, count: usize, tag: &str| -> Result<Vec<Clip>> {
        let split_seed = derive_seed(seed, split_no);
        let mut clips = (0..count)
            .into_par_iter()
            .map(|i| generate_clip(derive_seed(split_seed, i as u64), config))
            .collect::<Result<Vec<_>>>()?;
        for (i, clip) in clips.iter_mut().enumerate() {
            clip.clip_id = format!("{tag}-{i:04}");
            if split_no > 0 {
                clip.labeled_indices = (0..config.frames_per_clip).collect();
            }
        }
        Ok(clips)
    };
    Ok(Dataset {
        config: config.clone(),
        train: gen_split(0, config.train_clips, "train")?,
        val: gen_split(1, config.val_clips, "val")?,
        test: gen_split(2, config.test_clips, "test")?,
    })
}

// ---- batch sampling ----

#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub clip_index: usize,
    pub frame_index: usize,
    pub image: Tensor,
    pub neighbor: Tensor,
    pub audio: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct UnlabeledItem {
    pub clip_index: usize,
    pub frame_index: usize,
    pub image: Tensor,
    pub neighbor: Tensor,
    pub audio: Tensor,
}

/// Index of a distant frame eligible as unlabeled data: at least two sample
/// steps from the labeled frame 0.
pub fn distant_frame_indices(clips: &[Clip]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        for fi in 2..clip.frames.len() {
            out.push((ci, fi));
        }
    }
    out
}

/// Draws a labeled batch (frame 0 of uniformly chosen clips, with mask) and
/// an unlabeled batch (uniformly chosen distant frames, without masks).
pub fn sample_training_batch(
    clips: &[Clip],
    batch_sizes: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<LabeledItem>, Vec<UnlabeledItem>)> {
    let pool: Vec<usize> = (0..clips.len()).collect();
    sample_training_batch_from_pool(clips, &pool, batch_sizes, rng)
}

/// Like [`sample_training_batch`] but labeled draws come only from the given
/// clip indices; the unlabeled pool stays the whole split. This is how a
/// partially labeled regime is expressed: every clip contributes distant
/// frames, but only pool members expose their mask.
pub fn sample_training_batch_from_pool(
    clips: &[Clip],
    labeled_pool: &[usize],
    batch_sizes: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<LabeledItem>, Vec<UnlabeledItem>)> {
    let (b_l, b_u) = batch_sizes;
    if clips.is_empty() {
        return Err(DataError::Sampling("empty dataset".into()));
    }
    if b_l < 1 {
        return Err(DataError::Sampling("labeled batch size must be >= 1".into()));
    }
    if labeled_pool.is_empty() {
        return Err(DataError::Sampling("labeled pool is empty".into()));
    }
    if let Some(&bad) = labeled_pool.iter().find(|&&i| i >= clips.len()) {
        return Err(DataError::Sampling(format!(
            "labeled pool index {bad} out of range for {} clips",
            clips.len()
        )));
    }
    let mut labeled = Vec::with_capacity(b_l);
    for _ in 0..b_l {
        let ci = labeled_pool[rng.gen_range(0..labeled_pool.len())];
        let clip = &clips[ci];
        labeled.push(LabeledItem {
            clip_index: ci,
            frame_index: 0,
            image: clip.frames[0].clone(),
            neighbor: clip.neighbor_frames[0].clone(),
            audio: clip.audio[0].clone(),
            mask: clip.masks[0].clone(),
        });
    }
    let mut unlabeled = Vec::with_capacity(b_u);
    if b_u > 0 {
        let eligible = distant_frame_indices(clips);
        if eligible.is_empty() {
            return Err(DataError::Sampling(
                "unlabeled batch requested but clips have no distant frames (need frames_per_clip >= 3)"
                    .into(),
            ));
        }
        for _ in 0..b_u {
            let (ci, fi) = eligible[rng.gen_range(0..eligible.len())];
            let clip = &clips[ci];
            unlabeled.push(UnlabeledItem {
                clip_index: ci,
                frame_index: fi,
                image: clip.frames[fi].clone(),
                neighbor: clip.neighbor_frames[fi].clone(),
                audio: clip.audio[fi].clone(),
            });
        }
    }
    Ok((labeled, unlabeled))
}

// ---- serialization ----

const BLOB_MAGIC: &[u8; 4] = b"UFET";
const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobMeta {
    file: String,
    dims: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClipMeta {
    clip_id: String,
    labeled_indices: Vec<usize>,
    scene: Vec<SceneSpec>,
    frames: BlobMeta,
    neighbors: BlobMeta,
    audio: BlobMeta,
    masks: BlobMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: DatasetConfig,
    train: Vec<ClipMeta>,
    val: Vec<ClipMeta>,
    test: Vec<ClipMeta>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

enum Payload<'a> {
    F32(&'a [f32]),
    /// Binary masks travel as one byte per pixel.
    U8(Vec<u8>),
}

fn encode_blob(dims: &[usize], payload: Payload) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match payload {
        Payload::F32(values) => {
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::U8(values) => buf.extend_from_slice(&values),
    }
    buf
}

fn decode_blob(bytes: &[u8], path: &str, mask_u8: bool) -> Result<(Vec<usize>, Vec<f32>)> {
    let err = |reason: &str| DataError::Format {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 {
        return Err(err("truncated header"));
    }
    if &bytes[0..4] != BLOB_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 || bytes.len() < 12 + 4 * rank {
        return Err(err("bad rank"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 12 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = dims.iter().product();
    let body = &bytes[12 + 4 * rank..];
    let data = if mask_u8 {
        if body.len() != numel {
            return Err(err("payload length mismatch"));
        }
        body.iter()
            .map(|&b| match b {
                0 => Ok(0.0f32),
                1 => Ok(1.0f32),
                other => Err(err(&format!("mask byte {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<f32>>>()?
    } else {
        if body.len() != numel * 4 {
            return Err(err("payload length mismatch"));
        }
        body.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    Ok((dims, data))
}

/// Stacks per-frame tensors into one [T, ...] blob payload.
fn stack(tensors: &[Tensor]) -> (Vec<usize>, Vec<f32>) {
    let mut dims = vec![tensors.len()];
    dims.extend_from_slice(tensors[0].shape());
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].numel());
    for t in tensors {
        data.extend_from_slice(t.data());
    }
    (dims, data)
}

fn unstack(dims: &[usize], data: Vec<f32>, path: &str) -> Result<Vec<Tensor>> {
    if dims.len() < 2 {
        return Err(DataError::Format {
            path: path.to_string(),
            reason: "stacked blob needs rank >= 2".to_string(),
        });
    }
    let t = dims[0];
    let inner: Vec<usize> = dims[1..].to_vec();
    let step: usize = inner.iter().product();
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        out.push(
            Tensor::new(inner.clone(), data[i * step..(i + 1) * step].to_vec()).map_err(|e| {
                DataError::Format {
                    path: path.to_string(),
                    reason: e.to_string(),
                }
            })?,
        );
    }
    Ok(out)
}

fn write_blob(dir: &Path, file: &str, dims: &[usize], payload: Payload) -> Result<BlobMeta> {
    let bytes = encode_blob(dims, payload);
    let meta = BlobMeta {
        file: file.to_string(),
        dims: dims.to_vec(),
        sha256: sha256_hex(&bytes),
    };
    let mut f = std::fs::File::create(dir.join(file))?;
    f.write_all(&bytes)?;
    Ok(meta)
}

fn read_blob(dir: &Path, meta: &BlobMeta, mask_u8: bool) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = dir.join(&meta.file);
    let mut bytes = Vec::new();
    std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
    if sha256_hex(&bytes) != meta.sha256 {
        return Err(DataError::Checksum {
            path: meta.file.clone(),
        });
    }
    let (dims, data) = decode_blob(&bytes, &meta.file, mask_u8)?;
    if dims != meta.dims {
        return Err(DataError::Format {
            path: meta.file.clone(),
            reason: format!("dims {dims:?} disagree with manifest {:?}", meta.dims),
        });
    }
    Ok((dims, data))
}

fn write_clip(dir: &Path, clip: &Clip) -> Result<ClipMeta> {
    let (fd, ff) = stack(&clip.frames);
    let (nd, nf) = stack(&clip.neighbor_frames);
    let (ad, af) = stack(&clip.audio);
    let (md, mf) = stack(&clip.masks);
    let mask_bytes: Vec<u8> = mf.iter().map(|&v| if v != 0.0 { 1u8 } else { 0u8 }).collect();
    Ok(ClipMeta {
        clip_id: clip.clip_id.clone(),
        labeled_indices: clip.labeled_indices.clone(),
        scene: clip.scene.clone(),
        frames: write_blob(dir, &format!("{}.frames.bin", clip.clip_id), &fd, Payload::F32(&ff))?,
        neighbors: write_blob(
            dir,
            &format!("{}.neighbors.bin", clip.clip_id),
            &nd,
            Payload::F32(&nf),
        )?,
        audio: write_blob(dir, &format!("{}.audio.bin", clip.clip_id), &ad, Payload::F32(&af))?,
        masks: write_blob(
            dir,
            &format!("{}.masks.bin", clip.clip_id),
            &md,
            Payload::U8(mask_bytes),
        )?,
    })
}

fn read_clip(dir: &Path, meta: &ClipMeta) -> Result<Clip> {
    let (fd, ff) = read_blob(dir, &meta.frames, false)?;
    let (nd, nf) = read_blob(dir, &meta.neighbors, false)?;
    let (ad, af) = read_blob(dir, &meta.audio, false)?;
    let (md, mf) = read_blob(dir, &meta.masks, true)?;
    Ok(Clip {
        clip_id: meta.clip_id.clone(),
        frames: unstack(&fd, ff, &meta.frames.file)?,
        neighbor_frames: unstack(&nd, nf, &meta.neighbors.file)?,
        audio: unstack(&ad, af, &meta.audio.file)?,
        masks: unstack(&md, mf, &meta.masks.file)?,
        labeled_indices: meta.labeled_indices.clone(),
        scene: meta.scene.clone(),
    })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let blob_dir = path.join("clips");
    std::fs::create_dir_all(&blob_dir)?;
    let write_split = |clips: &[Clip]| -> Result<Vec<ClipMeta>> {
        clips.iter().map(|c| write_clip(&blob_dir, c)).collect()
    };
    let manifest = Manifest {
        version: BLOB_VERSION,
        config: dataset.config.clone(),
        train: write_split(&dataset.train)?,
        val: write_split(&dataset.val)?,
        test: write_split(&dataset.test)?,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let json = std::fs::read_to_string(path.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.version != BLOB_VERSION {
        return Err(DataError::Format {
            path: "manifest.json".into(),
            reason: format!("unsupported version {}", manifest.version),
        });
    }
    let blob_dir = path.join("clips");
    let read_split = |metas: &[ClipMeta]| -> Result<Vec<Clip>> {
        metas.iter().map(|m| read_clip(&blob_dir, m)).collect()
    };
    Ok(Dataset {
        config: manifest.config.clone(),
        train: read_split(&manifest.train)?,
        val: read_split(&manifest.val)?,
        test: read_split(&manifest.test)?,
    })
}

// ---- human inspection ----

pub fn frame_to_rgb8(frame: &Tensor) -> Vec<u8> {
    let s = frame.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = frame.data()[c * h * w + y * w + x];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Writes `<clip_id>_f<i>.png` and `<clip_id>_m<i>.png` for every sampled
/// frame of the clip.
pub fn export_clip_pngs(clip: &Clip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in clip.frames.iter().enumerate() {
        let s = frame.shape();
        let img = image::RgbImage::from_raw(s[2] as u32, s[1] as u32, frame_to_rgb8(frame))
            .expect("frame buffer size");
        img.save(dir.join(format!("{}_f{i}.png", clip.clip_id)))?;
        let mask = &clip.masks[i];
        let ms = mask.shape();
        let gray: Vec<u8> = mask
            .data()
            .iter()
            .map(|&v| if v != 0.0 { 255u8 } else { 0u8 })
            .collect();
        let mimg = image::GrayImage::from_raw(ms[1] as u32, ms[0] as u32, gray)
            .expect("mask buffer size");
        mimg.save(dir.join(format!("{}_m{i}.png", clip.clip_id)))?;
    }
    Ok(())
}
