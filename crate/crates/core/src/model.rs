//! Segmentation network: a four-stage image encoder, a three-stage flow
//! encoder whose refined features are added into the image pyramid, an
//! audio projector that modulates the two deepest scales, and a top-down
//! mask decoder. The flow-refine and audio-modulation branches are
//! zero-initialized, so a fresh model ignores flow and audio entirely and
//! learns to use them; that also makes branch-ablation tests exact.

use crate::rng::rng_from;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of the four image-encoder stages, at strides
    /// /4, /8, /16, /32.
    pub image_widths: [usize; 4],
    /// Channel widths of the three flow-encoder stages, at /4, /8, /16.
    pub flow_widths: [usize; 3],
    /// Input audio embedding dimension.
    pub audio_dim: usize,
    /// Audio feature width C_a.
    pub audio_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_widths: [16, 32, 64, 96],
            flow_widths: [8, 16, 32],
            audio_dim: 16,
            audio_channels: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_widths.iter().any(|&w| w == 0)
            || self.flow_widths.iter().any(|&w| w == 0)
            || self.audio_dim == 0
            || self.audio_channels == 0
        {
            return Err(ModelError::InvalidConfig("zero width".into()));
        }
        Ok(())
    }

    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Named parameter tensors in a fixed order; the order defines the
/// checkpoint payload layout and the optimizer state layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

fn conv_init<R: Rng>(name: &str, co: usize, ci: usize, k: usize, rng: &mut R, zero: bool) -> Vec<(String, Tensor)> {
    let bound = (1.0 / (ci * k * k) as f32).sqrt();
    let w = if zero {
        Tensor::zeros(&[co, ci, k, k])
    } else {
        Tensor::rand_uniform(&[co, ci, k, k], -bound, bound, rng)
    };
    vec![
        (format!("{name}.w"), w),
        (format!("{name}.b"), Tensor::zeros(&[co])),
    ]
}

fn linear_init<R: Rng>(name: &str, out: usize, inp: usize, rng: &mut R, zero: bool) -> Vec<(String, Tensor)> {
    let bound = (1.0 / inp as f32).sqrt();
    let w = if zero {
        Tensor::zeros(&[out, inp])
    } else {
        Tensor::rand_uniform(&[out, inp], -bound, bound, rng)
    };
    vec![
        (format!("{name}.w"), w),
        (format!("{name}.b"), Tensor::zeros(&[out])),
    ]
}

impl ModelParams {
    /// Fresh parameters: uniform +/-sqrt(1/fan_in) everywhere except the
    /// refine-final convs and the audio modulation projectors, which start
    /// at zero so those branches begin as identities.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed, 3);
        let mut tensors = Vec::new();
        let iw = config.image_widths;
        let fw = config.flow_widths;

        let mut ci = 3;
        for (s, &co) in iw.iter().enumerate() {
            tensors.extend(conv_init(&format!("img.s{}.conv1", s + 1), co, ci, 3, &mut rng, false));
            tensors.extend(conv_init(&format!("img.s{}.conv2", s + 1), co, co, 3, &mut rng, false));
            ci = co;
        }
        let mut ci = 2;
        for (s, &co) in fw.iter().enumerate() {
            tensors.extend(conv_init(&format!("flow.s{}.conv1", s + 1), co, ci, 3, &mut rng, false));
            tensors.extend(conv_init(&format!("flow.s{}.conv2", s + 1), co, co, 3, &mut rng, false));
            ci = co;
        }
        for s in 0..3 {
            tensors.extend(conv_init(&format!("refine.s{}.conv1", s + 1), iw[s], fw[s], 3, &mut rng, false));
            tensors.extend(conv_init(&format!("refine.s{}.conv2", s + 1), iw[s], iw[s], 3, &mut rng, true));
        }
        tensors.extend(linear_init("audio.fc1", config.audio_channels, config.audio_dim, &mut rng, false));
        tensors.extend(linear_init("audio.fc2", config.audio_channels, config.audio_channels, &mut rng, false));
        for (tag, c) in [("s3", iw[2]), ("s4", iw[3])] {
            tensors.extend(linear_init(&format!("film.{tag}.gamma"), c, config.audio_channels, &mut rng, true));
            tensors.extend(linear_init(&format!("film.{tag}.beta"), c, config.audio_channels, &mut rng, true));
        }
        tensors.extend(conv_init("dec.d3.conv", iw[2], iw[3] + iw[2], 3, &mut rng, false));
        tensors.extend(conv_init("dec.d2.conv", iw[1], iw[2] + iw[1], 3, &mut rng, false));
        tensors.extend(conv_init("dec.d1.conv", iw[0], iw[1] + iw[0], 3, &mut rng, false));
        tensors.extend(conv_init("dec.final", 1, iw[0], 1, &mut rng, false));

        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.all_finite())
    }
}

/// Graph handles for every parameter of one model instance.
pub struct ModelVars {
    pub vars: Vec<(String, Var)>,
    index: HashMap<String, Var>,
}

impl ModelVars {
    pub fn var(&self, name: &str) -> Var {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

/// Inserts every parameter tensor into the graph. With `trainable` false
/// the tensors become constants: the teacher path uses this to realize the
/// stop-gradient structurally rather than by masking gradients afterwards.
pub fn build_params(g: &mut Graph, params: &ModelParams, trainable: bool) -> ModelVars {
    let mut vars = Vec::with_capacity(params.tensors.len());
    let mut index = HashMap::new();
    for (name, tensor) in &params.tensors {
        let v = g.leaf(tensor.clone(), trainable);
        vars.push((name.clone(), v));
        index.insert(name.clone(), v);
    }
    ModelVars { vars, index }
}

/// One encoder stage. Downsampling happens in 2x2 mean pools rather than
/// conv strides: an odd-kernel stride-2 conv can never satisfy the exact
/// output-size contract on even inputs, and pooling keeps the convs at the
/// same resolutions a strided design would have used. `double_pool` gives
/// the first stage its /4 reduction.
fn conv_block(
    g: &mut Graph,
    m: &ModelVars,
    name: &str,
    input: Var,
    double_pool: bool,
) -> Result<Var> {
    let w1 = m.var(&format!("{name}.conv1.w"));
    let b1 = m.var(&format!("{name}.conv1.b"));
    let x = g.avg_pool2(input)?;
    let x = g.conv2d(x, w1, b1, 1, 1)?;
    let mut x = g.relu(x);
    if double_pool {
        x = g.avg_pool2(x)?;
    }
    let w2 = m.var(&format!("{name}.conv2.w"));
    let b2 = m.var(&format!("{name}.conv2.b"));
    let x = g.conv2d(x, w2, b2, 1, 1)?;
    Ok(g.relu(x))
}

/// Image pyramid at strides /4, /8, /16, /32.
pub fn encode_image(g: &mut Graph, m: &ModelVars, image: Var) -> Result<[Var; 4]> {
    let s = g.value(image).shape().to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(ModelError::Tensor(TensorError::Shape(format!(
            "image must be [3,H,W], got {s:?}"
        ))));
    }
    if s[1] % 32 != 0 || s[2] % 32 != 0 || s[1] == 0 || s[2] == 0 {
        return Err(ModelError::Tensor(TensorError::Shape(format!(
            "image sides must be divisible by 32, got {}x{}",
            s[1], s[2]
        ))));
    }
    let f1 = conv_block(g, m, "img.s1", image, true)?;
    let f2 = conv_block(g, m, "img.s2", f1, false)?;
    let f3 = conv_block(g, m, "img.s3", f2, false)?;
    let f4 = conv_block(g, m, "img.s4", f3, false)?;
    Ok([f1, f2, f3, f4])
}

/// Flow pyramid at strides /4, /8, /16.
pub fn encode_flow(g: &mut Graph, m: &ModelVars, flow: Var) -> Result<[Var; 3]> {
    let s = g.value(flow).shape().to_vec();
    if s.len() != 3 || s[0] != 2 {
        return Err(ModelError::Tensor(TensorError::Shape(format!(
            "flow must be [2,H,W], got {s:?}"
        ))));
    }
    if s[1] % 16 != 0 || s[2] % 16 != 0 || s[1] == 0 || s[2] == 0 {
        return Err(ModelError::Tensor(TensorError::Shape(format!(
            "flow sides must be divisible by 16, got {}x{}",
            s[1], s[2]
        ))));
    }
    let f1 = conv_block(g, m, "flow.s1", flow, true)?;
    let f2 = conv_block(g, m, "flow.s2", f1, false)?;
    let f3 = conv_block(g, m, "flow.s3", f2, false)?;
    Ok([f1, f2, f3])
}

/// Adds refined flow features into the three shallowest image scales:
/// out_i = F_vi + Upsample(Refine(F_fi)). The deepest scale passes through.
pub fn refine_fuse(
    g: &mut Graph,
    m: &ModelVars,
    image_pyr: &[Var; 4],
    flow_pyr: &[Var; 3],
) -> Result<[Var; 4]> {
    let mut out = *image_pyr;
    for i in 0..3 {
        let name = format!("refine.s{}", i + 1);
        let w1 = m.var(&format!("{name}.conv1.w"));
        let b1 = m.var(&format!("{name}.conv1.b"));
        let r = g.conv2d(flow_pyr[i], w1, b1, 1, 1)?;
        let r = g.relu(r);
        let w2 = m.var(&format!("{name}.conv2.w"));
        let b2 = m.var(&format!("{name}.conv2.b"));
        let r = g.conv2d(r, w2, b2, 1, 1)?;
        let (vh, fh) = (g.value(image_pyr[i]).shape()[1], g.value(r).shape()[1]);
        if vh % fh != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "refine scale {i}: cannot upsample {fh} to {vh}"
            )));
        }
        let r = g.upsample_bilinear(r, vh / fh)?;
        out[i] = g.add(image_pyr[i], r)?;
    }
    Ok(out)
}

/// Audio projector: linear -> relu -> linear, output length C_a.
pub fn encode_audio(g: &mut Graph, m: &ModelVars, audio: Var, config: &ModelConfig) -> Result<Var> {
    let s = g.value(audio).shape().to_vec();
    if s != [config.audio_dim] {
        return Err(ModelError::Tensor(TensorError::Shape(format!(
            "audio must be [{}], got {s:?}",
            config.audio_dim
        ))));
    }
    let w1 = m.var("audio.fc1.w");
    let b1 = m.var("audio.fc1.b");
    let x = g.linear(audio, w1, b1)?;
    let x = g.relu(x);
    let w2 = m.var("audio.fc2.w");
    let b2 = m.var("audio.fc2.b");
    Ok(g.linear(x, w2, b2)?)
}

/// Feature-wise modulation of the two deepest scales by the audio vector:
/// out = (1 + gamma(F_a)) * F + beta(F_a), channelwise.
pub fn fuse_audio(
    g: &mut Graph,
    m: &ModelVars,
    pyramid: &[Var; 4],
    audio_feat: Var,
) -> Result<[Var; 4]> {
    let mut out = *pyramid;
    for (i, tag) in [(2usize, "s3"), (3, "s4")] {
        let gw = m.var(&format!("film.{tag}.gamma.w"));
        let gb = m.var(&format!("film.{tag}.gamma.b"));
        let bw = m.var(&format!("film.{tag}.beta.w"));
        let bb = m.var(&format!("film.{tag}.beta.b"));
        let gamma = g.linear(audio_feat, gw, gb)?;
        let beta = g.linear(audio_feat, bw, bb)?;
        let shape = g.value(pyramid[i]).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let gamma = g.broadcast_channels(gamma, h, w)?;
        let beta = g.broadcast_channels(beta, h, w)?;
        let one = g.constant(Tensor::scalar(1.0));
        let scale = g.add(gamma, one)?;
        let x = g.mul(pyramid[i], scale)?;
        out[i] = g.add(x, beta)?;
    }
    Ok(out)
}

/// Top-down decoder to a full-resolution probability map [H,W].
pub fn decode_mask(g: &mut Graph, m: &ModelVars, pyramid: &[Var; 4]) -> Result<Var> {
    let mut x = pyramid[3];
    for (i, name) in [(2usize, "dec.d3"), (1, "dec.d2"), (0, "dec.d1")] {
        let up = g.upsample_bilinear(x, 2)?;
        let cat = g.concat_channels(up, pyramid[i])?;
        let w = m.var(&format!("{name}.conv.w"));
        let b = m.var(&format!("{name}.conv.b"));
        let c = g.conv2d(cat, w, b, 1, 1)?;
        x = g.relu(c);
    }
    let up = g.upsample_bilinear(x, 4)?;
    let w = m.var("dec.final.w");
    let b = m.var("dec.final.b");
    let logits = g.conv2d(up, w, b, 1, 0)?;
    // Output stays [1,H,W] in-graph; graph losses accept that layout and
    // `predict` squeezes the unit axis for plain-tensor consumers.
    Ok(g.sigmoid(logits))
}

/// Full forward pass: p = decode(fuse_audio(refine_fuse(enc_i, enc_f), enc_a)).
/// Output shape is [1,H,W] with values strictly inside (0,1).
pub fn forward(
    g: &mut Graph,
    m: &ModelVars,
    config: &ModelConfig,
    image: Var,
    flow: Var,
    audio: Var,
) -> Result<Var> {
    let img_s = g.value(image).shape().to_vec();
    let flow_s = g.value(flow).shape().to_vec();
    if img_s.len() == 3 && flow_s.len() == 3 && img_s[1..] != flow_s[1..] {
        return Err(ModelError::Tensor(TensorError::Shape(format!(
            "image {img_s:?} and flow {flow_s:?} disagree spatially"
        ))));
    }
    let image_pyr = encode_image(g, m, image)?;
    let flow_pyr = encode_flow(g, m, flow)?;
    let refined = refine_fuse(g, m, &image_pyr, &flow_pyr)?;
    let audio_feat = encode_audio(g, m, audio, config)?;
    let fused = fuse_audio(g, m, &refined, audio_feat)?;
    decode_mask(g, m, &fused)
}

/// Convenience no-grad forward returning a plain [H,W] tensor.
pub fn predict(params: &ModelParams, image: &Tensor, flow: &Tensor, audio: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let m = build_params(&mut g, params, false);
    let iv = g.constant(image.clone());
    let fv = g.constant(flow.clone());
    let av = g.constant(audio.clone());
    let p = forward(&mut g, &m, &params.config, iv, fv, av)?;
    let value = g.value(p).clone();
    let shape = value.shape().to_vec();
    Ok(value.reshaped(vec![shape[1], shape[2]])?)
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 4] = b"UFEM";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    config_sha256: String,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        config: params.config.clone(),
        config_sha256: params.config.sha256(),
        tensors: params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    let mut payload = Vec::new();
    for (_, t) in &params.tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[0..4] != CKPT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(ModelError::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
    if header.version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.config_sha256 != header.config.sha256() {
        return Err(ModelError::Checkpoint("config hash mismatch".into()));
    }
    let mut offset = 8 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, shape) in header.tensors {
        let numel: usize = shape.iter().product();
        let end = offset + 4 * numel;
        if bytes.len() < end {
            return Err(ModelError::Checkpoint(format!(
                "truncated payload at tensor {name}"
            )));
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| ModelError::Checkpoint(format!("tensor {name}: {e}")))?;
        if !t.all_finite() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} contains non-finite values"
            )));
        }
        tensors.push((name, t));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    let params = ModelParams {
        config: header.config,
        tensors,
    };
    params.config.validate()?;
    Ok(params)
}
