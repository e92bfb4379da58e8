//! Weak and strong view augmentation.
//!
//! Weak views apply one random resized crop plus an optional horizontal
//! flip, identically to image, flow, and mask, so a prediction made on the
//! view stays pixel-aligned with its transformed label. Strong views build
//! on a weak view with photometric jitter (image only) and cutmix, whose
//! patch is stamped onto image, flow, and pseudo-label alike. Every draw is
//! captured in an `AugmentRecord`, so the geometric part can be replayed
//! onto a mask that only becomes available later.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid record: {0}")]
    Record(String),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutmixSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    /// Batch index the patch content came from.
    pub partner: usize,
}

/// Full description of one augmentation draw; applying the same record
/// twice to the same inputs yields bit-identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    /// Source-image crop box; None means the transform keeps full frame.
    pub crop: Option<CropBox>,
    /// Output size (h, w) the crop is resized to.
    pub resize: (usize, usize),
    pub hflip: bool,
    pub photometric: Option<Photometric>,
    pub cutmix: Option<CutmixSpec>,
}

/// One augmented item: image [3,H,W], flow [2,H,W], optional mask [H,W].
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Tensor,
    pub flow: Tensor,
    pub mask: Option<Tensor>,
}

fn plane_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(AugmentError::Shape(format!(
            "{what} must be [C,H,W] or [H,W], got {:?}",
            t.shape()
        ))),
    }
}

/// Crop + resize + optional hflip on a [C,H,W] or [H,W] tensor. Bilinear
/// for continuous data, nearest for masks so labels stay exactly binary.
/// `flow_axis_scale` multiplies channel 0 by the horizontal zoom and
/// channel 1 by the vertical zoom (displacements stretch with the image),
/// and hflip negates channel 0.
fn warp_tensor(
    src: &Tensor,
    crop: &CropBox,
    out: (usize, usize),
    hflip: bool,
    nearest: bool,
    flow_axis_scale: bool,
) -> Result<Tensor> {
    let (c, h, w) = plane_dims(src, "input")?;
    if crop.w == 0 || crop.h == 0 || crop.x + crop.w > w || crop.y + crop.h > h {
        return Err(AugmentError::Record(format!(
            "crop {crop:?} does not fit a {h}x{w} source"
        )));
    }
    let (oh, ow) = out;
    let zoom_x = ow as f32 / crop.w as f32;
    let zoom_y = oh as f32 / crop.h as f32;
    let mut data = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
        let mut scale = 1.0f32;
        if flow_axis_scale {
            scale = if ch == 0 { zoom_x } else { zoom_y };
            if hflip && ch == 0 {
                scale = -scale;
            }
        }
        for oy in 0..oh {
            let sy = crop.y as f32 + (oy as f32 + 0.5) / zoom_y - 0.5;
            let sy = sy.clamp(crop.y as f32, (crop.y + crop.h - 1) as f32);
            for ox in 0..ow {
                let ix = if hflip { ow - 1 - ox } else { ox };
                let sx = crop.x as f32 + (ix as f32 + 0.5) / zoom_x - 0.5;
                let sx = sx.clamp(crop.x as f32, (crop.x + crop.w - 1) as f32);
                let v = if nearest {
                    plane[sy.round() as usize * w + sx.round() as usize]
                } else {
                    let x0 = sx.floor() as usize;
                    let y0 = sy.floor() as usize;
                    let x1 = (x0 + 1).min(crop.x + crop.w - 1);
                    let y1 = (y0 + 1).min(crop.y + crop.h - 1);
                    let fx = sx - x0 as f32;
                    let fy = sy - y0 as f32;
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    top * (1.0 - fy) + bot * fy
                };
                data[ch * oh * ow + oy * ow + ox] = v * scale;
            }
        }
    }
    let shape = if src.shape().len() == 2 {
        vec![oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Ok(Tensor::new(shape, data).expect("warp output shape"))
}

/// Applies the geometric part of a record to a full (image, flow, mask)
/// triple. Used by `weak_augment` after sampling and by tests that force
/// specific records.
pub fn apply_weak(
    record: &AugmentRecord,
    image: &Tensor,
    flow: &Tensor,
    mask: Option<&Tensor>,
) -> Result<View> {
    let (_, h, w) = plane_dims(image, "image")?;
    let crop = record.crop.unwrap_or(CropBox { x: 0, y: 0, w, h });
    let out = record.resize;
    Ok(View {
        image: warp_tensor(image, &crop, out, record.hflip, false, false)?,
        flow: warp_tensor(flow, &crop, out, record.hflip, false, true)?,
        mask: match mask {
            Some(m) => Some(warp_tensor(m, &crop, out, record.hflip, true, false)?),
            None => None,
        },
    })
}

/// One random resized crop (side scale in [0.7, 1.0]) plus horizontal flip
/// with probability 0.5, applied jointly so all planes stay aligned.
pub fn weak_augment(
    image: &Tensor,
    flow: &Tensor,
    mask: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<(View, AugmentRecord)> {
    let (ci, h, w) = plane_dims(image, "image")?;
    let (cf, fh, fw) = plane_dims(flow, "flow")?;
    if ci != 3 || cf != 2 || (fh, fw) != (h, w) {
        return Err(AugmentError::Shape(format!(
            "expected image [3,{h},{w}] and flow [2,{h},{w}], got {:?} and {:?}",
            image.shape(),
            flow.shape()
        )));
    }
    if let Some(m) = mask {
        let (cm, mh, mw) = plane_dims(m, "mask")?;
        if cm != 1 || (mh, mw) != (h, w) {
            return Err(AugmentError::Shape(format!(
                "mask {:?} does not match {h}x{w}",
                m.shape()
            )));
        }
    }
    let scale = rng.gen_range(0.7..=1.0f32);
    let ch = ((scale * h as f32).round() as usize).clamp(1, h);
    let cw = ((scale * w as f32).round() as usize).clamp(1, w);
    let record = AugmentRecord {
        crop: Some(CropBox {
            x: rng.gen_range(0..=w - cw),
            y: rng.gen_range(0..=h - ch),
            w: cw,
            h: ch,
        }),
        resize: (h, w),
        hflip: rng.gen_bool(0.5),
        photometric: None,
        cutmix: None,
    };
    let view = apply_weak(&record, image, flow, mask)?;
    Ok((view, record))
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn apply_photometric(image: &Tensor, p: &Photometric) -> Tensor {
    let (_, h, w) = plane_dims(image, "image").expect("checked");
    let n = h * w;
    let src = image.data();
    let mut out = vec![0.0f32; 3 * n];
    // Contrast pivots on the view's mean luma so the op is centered.
    let mean: f32 = (0..n).map(|i| luma(src[i], src[n + i], src[2 * n + i])).sum::<f32>() / n as f32;
    for i in 0..n {
        let mut rgb = [src[i], src[n + i], src[2 * n + i]];
        for v in rgb.iter_mut() {
            *v = (*v + p.brightness - mean) * p.contrast + mean;
        }
        let gray = luma(rgb[0], rgb[1], rgb[2]);
        for v in rgb.iter_mut() {
            *v = gray + (*v - gray) * p.saturation;
        }
        if p.grayscale {
            let g = luma(rgb[0], rgb[1], rgb[2]);
            rgb = [g, g, g];
        }
        for (c, v) in rgb.iter().enumerate() {
            out[c * n + i] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], out).expect("photometric shape")
}

/// Copies the cutmix box from `from` into `into` on a [C,H,W] or [H,W]
/// tensor; both must share shape.
fn paste_box(into: &mut Tensor, from: &Tensor, spec: &CutmixSpec) {
    let (c, h, w) = plane_dims(into, "cutmix target").expect("checked");
    let dst = into.data_mut();
    let src = from.data();
    for ch in 0..c {
        for y in spec.y..spec.y + spec.h {
            let row = ch * h * w + y * w;
            dst[row + spec.x..row + spec.x + spec.w]
                .copy_from_slice(&src[row + spec.x..row + spec.x + spec.w]);
        }
    }
}

/// Photometric jitter on the image (brightness/contrast/saturation each
/// within +/-0.4, grayscale with p=0.2), then with probability 0.5 a cutmix
/// patch (area fraction in [0.1, 0.4]) copied from `view_b` into `view_a`
/// identically on image, flow, and pseudo-label. `partner` is recorded so
/// the draw stays replayable against the batch.
pub fn strong_augment(
    view_a: &View,
    pseudo_a: &Tensor,
    view_b: &View,
    pseudo_b: &Tensor,
    partner: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(View, Tensor, AugmentRecord)> {
    let (_, h, w) = plane_dims(&view_a.image, "view_a image")?;
    for (t, what) in [
        (&view_b.image, "view_b image"),
        (&view_a.flow, "view_a flow"),
        (&view_b.flow, "view_b flow"),
    ] {
        let (_, th, tw) = plane_dims(t, what)?;
        if (th, tw) != (h, w) {
            return Err(AugmentError::Shape(format!(
                "{what} is {th}x{tw}, expected {h}x{w}"
            )));
        }
    }
    for (t, what) in [(pseudo_a, "pseudo_a"), (pseudo_b, "pseudo_b")] {
        if t.shape() != [h, w] {
            return Err(AugmentError::Shape(format!(
                "{what} must be [{h},{w}], got {:?}",
                t.shape()
            )));
        }
    }

    let photometric = Photometric {
        brightness: rng.gen_range(-0.4..=0.4),
        contrast: rng.gen_range(0.6..=1.4),
        saturation: rng.gen_range(0.6..=1.4),
        grayscale: rng.gen_bool(0.2),
    };
    let cutmix = if rng.gen_bool(0.5) {
        let area = rng.gen_range(0.1..=0.4f32);
        let aspect = rng.gen_range(0.5..=2.0f32);
        let bw = (((area * (h * w) as f32) * aspect).sqrt().round() as usize).clamp(1, w);
        let bh = (((area * (h * w) as f32) / aspect).sqrt().round() as usize).clamp(1, h);
        Some(CutmixSpec {
            x: rng.gen_range(0..=w - bw),
            y: rng.gen_range(0..=h - bh),
            w: bw,
            h: bh,
            partner,
        })
    } else {
        None
    };
    let record = AugmentRecord {
        crop: None,
        resize: (h, w),
        hflip: false,
        photometric: Some(photometric),
        cutmix,
    };

    let mut image = apply_photometric(&view_a.image, &photometric);
    let mut flow = view_a.flow.clone();
    let mut pseudo = pseudo_a.clone();
    if let Some(spec) = &record.cutmix {
        paste_box(&mut image, &view_b.image, spec);
        paste_box(&mut flow, &view_b.flow, spec);
        paste_box(&mut pseudo, pseudo_b, spec);
    }
    Ok((
        View {
            image,
            flow,
            mask: None,
        },
        pseudo,
        record,
    ))
}

/// Applies exactly the geometric part of a record to a standalone mask
/// (nearest-neighbor); photometric fields are a no-op. Cutmix needs the
/// partner's mask and cannot be replayed onto a single plane, so such
/// records are rejected; `paste_label` covers that case.
pub fn replay(record: &AugmentRecord, mask: &Tensor) -> Result<Tensor> {
    if record.cutmix.is_some() {
        return Err(AugmentError::Record(
            "cutmix records need the partner plane; use paste_label".into(),
        ));
    }
    let (_, h, w) = plane_dims(mask, "mask")?;
    let crop = record.crop.unwrap_or(CropBox { x: 0, y: 0, w, h });
    if record.resize.0 == 0 || record.resize.1 == 0 {
        return Err(AugmentError::Record("resize target is empty".into()));
    }
    warp_tensor(mask, &crop, record.resize, record.hflip, true, false)
}

/// Replays the cutmix part of a strong record onto a pair of label planes.
pub fn paste_label(record: &AugmentRecord, label_a: &Tensor, label_b: &Tensor) -> Result<Tensor> {
    if label_a.shape() != label_b.shape() {
        return Err(AugmentError::Shape(format!(
            "label shapes differ: {:?} vs {:?}",
            label_a.shape(),
            label_b.shape()
        )));
    }
    let mut out = label_a.clone();
    if let Some(spec) = &record.cutmix {
        paste_box(&mut out, label_b, spec);
    }
    Ok(out)
}
