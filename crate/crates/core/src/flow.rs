//! Dense two-frame motion estimation with the Farneback algorithm.
//!
//! Each grayscale frame is locally approximated by a quadratic polynomial
//! f(x) ~ x'Ax + b'x + c fit by weighted least squares under a Gaussian
//! applicability window. Comparing the coefficients of two frames gives a
//! per-pixel linear system for the displacement, solved coarse-to-fine over
//! a Gaussian pyramid. Flow direction is first frame -> second frame: the
//! content at pixel p of `frame_a` appears at p + d(p) in `frame_b`.

use crate::tensor::Tensor;
use nalgebra::{Matrix2, Matrix6, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encode error: {0}")]
    Png(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Per-pixel displacement field, same size as the source frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Horizontal displacement in pixels, row-major.
    pub dx: Vec<f32>,
    /// Vertical displacement in pixels, row-major.
    pub dy: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn mean_magnitude(&self) -> f32 {
        let n = self.dx.len().max(1);
        let total: f64 = self
            .dx
            .iter()
            .zip(&self.dy)
            .map(|(&x, &y)| ((x * x + y * y) as f64).sqrt())
            .sum();
        (total / n as f64) as f32
    }

    pub fn all_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    /// Packs the field into a `[2, H, W]` tensor (dx plane then dy plane).
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.dx.len());
        data.extend_from_slice(&self.dx);
        data.extend_from_slice(&self.dy);
        Tensor::new(vec![2, self.height, self.width], data).expect("flow tensor shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(FlowError::Shape(format!(
                "flow tensor must be [2,H,W], got {s:?}"
            )));
        }
        let (h, w) = (s[1], s[2]);
        Ok(Self {
            width: w,
            height: h,
            dx: t.data()[..h * w].to_vec(),
            dy: t.data()[h * w..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FarnebackParams {
    pub pyramid_scale: f32,
    pub levels: usize,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f32,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            pyramid_scale: 0.5,
            levels: 3,
            window_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(FlowError::InvalidParams(format!(
                "pyramid_scale must be in (0,1), got {}",
                self.pyramid_scale
            )));
        }
        if self.levels < 1 {
            return Err(FlowError::InvalidParams("levels must be >= 1".into()));
        }
        if self.window_size % 2 == 0 || self.window_size < 1 {
            return Err(FlowError::InvalidParams(format!(
                "window_size must be odd, got {}",
                self.window_size
            )));
        }
        if self.iterations < 1 {
            return Err(FlowError::InvalidParams("iterations must be >= 1".into()));
        }
        if self.poly_n % 2 == 0 || self.poly_n < 3 {
            return Err(FlowError::InvalidParams(format!(
                "poly_n must be odd and >= 3, got {}",
                self.poly_n
            )));
        }
        if !(self.poly_sigma > 0.0) {
            return Err(FlowError::InvalidParams(format!(
                "poly_sigma must be > 0, got {}",
                self.poly_sigma
            )));
        }
        Ok(())
    }
}

/// Rec. 601 luma: 0.299 R + 0.587 G + 0.114 B.
pub fn to_grayscale(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(FlowError::Shape(format!(
            "to_grayscale expects [3,H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let gray: Vec<f32> = (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect();
    Ok(Tensor::new(vec![1, h, w], gray).expect("gray shape"))
}

fn gaussian_kernel_1d(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|t| (-(t * t) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable correlation with border replication over one `[H,W]` plane.
fn correlate_separable(src: &[f32], h: usize, w: usize, kx: &[f32], ky: &[f32]) -> Vec<f32> {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ti, &kv) in kx.iter().enumerate() {
                let sx = (x as isize + ti as isize - rx).clamp(0, w as isize - 1) as usize;
                acc += kv * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ti, &kv) in ky.iter().enumerate() {
                let sy = (y as isize + ti as isize - ry).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Bilinear resize of a single `[H,W]` plane; the source coordinate of
/// output cell o is (o + 0.5) * in/out - 0.5, clamped (align-corners false).
pub fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f32)> {
        (0..out_len)
            .map(|o| {
                let src_pos = ((o as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5)
                    .clamp(0.0, in_len as f32 - 1.0);
                let i0 = src_pos.floor() as usize;
                (i0, (i0 + 1).min(in_len - 1), src_pos - i0 as f32)
            })
            .collect()
    };
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut out = vec![0.0f32; oh * ow];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        let r0 = &src[y0 * w..y0 * w + w];
        let r1 = &src[y1 * w..y1 * w + w];
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
            let bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
            out[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Bilinear resize of a `[C,H,W]` tensor.
pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(FlowError::Shape(format!(
            "resize_bilinear expects [C,H,W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        out.extend(resize_plane(&t.data()[ci * h * w..(ci + 1) * h * w], h, w, oh, ow));
    }
    Ok(Tensor::new(vec![c, oh, ow], out).expect("resize shape"))
}

/// Level 0 is the input; each next level is Gaussian-blurred then resampled
/// by `pyramid_scale`. Fails if the coarsest level would drop below 8x8.
pub fn gaussian_pyramid(gray: &Tensor, params: &FarnebackParams) -> Result<Vec<Tensor>> {
    params.validate()?;
    let s = gray.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(FlowError::Shape(format!(
            "gaussian_pyramid expects [1,H,W], got {s:?}"
        )));
    }
    // Antialias strength follows the downscale factor.
    let sigma = 2.0 / (6.0 * params.pyramid_scale);
    let kernel = gaussian_kernel_1d(sigma);
    let mut levels = vec![gray.clone()];
    for _ in 1..params.levels {
        let prev = levels.last().unwrap();
        let (h, w) = (prev.shape()[1], prev.shape()[2]);
        let nh = (h as f32 * params.pyramid_scale).round() as usize;
        let nw = (w as f32 * params.pyramid_scale).round() as usize;
        if nh < 8 || nw < 8 {
            return Err(FlowError::InvalidParams(format!(
                "pyramid level would be {nh}x{nw}; coarsest level must be at least 8x8"
            )));
        }
        let blurred = correlate_separable(prev.data(), h, w, &kernel, &kernel);
        let resized = resize_plane(&blurred, h, w, nh, nw);
        levels.push(Tensor::new(vec![1, nh, nw], resized).expect("pyramid shape"));
    }
    Ok(levels)
}

/// Per-pixel quadratic expansion coefficients, struct-of-arrays layout.
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub height: usize,
    pub width: usize,
    pub a_xx: Vec<f32>,
    pub a_xy: Vec<f32>,
    pub a_yy: Vec<f32>,
    pub b_x: Vec<f32>,
    pub b_y: Vec<f32>,
    pub c: Vec<f32>,
}

/// Weighted least-squares fit of f(p + d) ~ c + b'd + d'Ad at every pixel,
/// with Gaussian applicability of scale `poly_sigma` over a window of full
/// size `poly_n`. Implemented as separable correlations with the kernels
/// {g, t*g, t^2*g}; the normal-equation matrix is constant across pixels and
/// inverted once. Pixels within `poly_n` of the border inherit the nearest
/// interior coefficients.
pub fn poly_expansion(gray: &Tensor, poly_n: usize, poly_sigma: f32) -> Result<PolyExpansion> {
    let s = gray.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(FlowError::Shape(format!(
            "poly_expansion expects [1,H,W], got {s:?}"
        )));
    }
    if poly_n % 2 == 0 || poly_n < 3 {
        return Err(FlowError::InvalidParams(format!(
            "poly_n must be odd and >= 3, got {poly_n}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    if poly_n > h || poly_n > w {
        return Err(FlowError::InvalidParams(format!(
            "poly_n {poly_n} exceeds image side {h}x{w}"
        )));
    }
    let n = (poly_n / 2) as isize;
    let g: Vec<f32> = {
        let mut g: Vec<f32> = (-n..=n)
            .map(|t| (-(t * t) as f32 / (2.0 * poly_sigma * poly_sigma)).exp())
            .collect();
        let total: f32 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= total);
        g
    };
    let k1: Vec<f32> = g
        .iter()
        .enumerate()
        .map(|(i, &gv)| (i as isize - n) as f32 * gv)
        .collect();
    let k2: Vec<f32> = g
        .iter()
        .enumerate()
        .map(|(i, &gv)| ((i as isize - n) * (i as isize - n)) as f32 * gv)
        .collect();

    // Projections onto the basis [1, x, y, x^2, y^2, xy]; x runs along
    // columns. Horizontal pass first, then vertical.
    let src = gray.data();
    let h0 = correlate_rows(src, h, w, &g);
    let h1 = correlate_rows(src, h, w, &k1);
    let h2 = correlate_rows(src, h, w, &k2);
    let v_c = correlate_cols(&h0, h, w, &g);
    let v_y = correlate_cols(&h0, h, w, &k1);
    let v_yy = correlate_cols(&h0, h, w, &k2);
    let v_x = correlate_cols(&h1, h, w, &g);
    let v_xy = correlate_cols(&h1, h, w, &k1);
    let v_xx = correlate_cols(&h2, h, w, &g);

    let mut gmat = Matrix6::<f64>::zeros();
    for dy in -n..=n {
        for dx in -n..=n {
            let wgt = (g[(dx + n) as usize] * g[(dy + n) as usize]) as f64;
            let (xf, yf) = (dx as f64, dy as f64);
            let phi = Vector6::new(1.0, xf, yf, xf * xf, yf * yf, xf * yf);
            gmat += wgt * phi * phi.transpose();
        }
    }
    let ginv = gmat
        .try_inverse()
        .ok_or_else(|| FlowError::InvalidParams("singular normal-equation matrix".into()))?;

    let mut out = PolyExpansion {
        height: h,
        width: w,
        a_xx: vec![0.0; h * w],
        a_xy: vec![0.0; h * w],
        a_yy: vec![0.0; h * w],
        b_x: vec![0.0; h * w],
        b_y: vec![0.0; h * w],
        c: vec![0.0; h * w],
    };
    for i in 0..h * w {
        let v = Vector6::new(
            v_c[i] as f64,
            v_x[i] as f64,
            v_y[i] as f64,
            v_xx[i] as f64,
            v_yy[i] as f64,
            v_xy[i] as f64,
        );
        let r = ginv * v;
        out.c[i] = r[0] as f32;
        out.b_x[i] = r[1] as f32;
        out.b_y[i] = r[2] as f32;
        out.a_xx[i] = r[3] as f32;
        out.a_yy[i] = r[4] as f32;
        out.a_xy[i] = (r[5] / 2.0) as f32;
    }

    // Border band inherits the nearest interior pixel's fit. When the image
    // is too small to have an interior at this margin, fall back to the
    // center pixel.
    let margin = poly_n;
    let clamp_axis = |v: usize, size: usize| -> usize {
        if size > 2 * margin {
            v.clamp(margin, size - 1 - margin)
        } else {
            size / 2
        }
    };
    let needs_fix = |x: usize, y: usize| {
        x < margin || y < margin || x + margin >= w || y + margin >= h
    };
    for y in 0..h {
        for x in 0..w {
            if !needs_fix(x, y) {
                continue;
            }
            let sx = clamp_axis(x, w);
            let sy = clamp_axis(y, h);
            let (i, j) = (y * w + x, sy * w + sx);
            out.a_xx[i] = out.a_xx[j];
            out.a_xy[i] = out.a_xy[j];
            out.a_yy[i] = out.a_yy[j];
            out.b_x[i] = out.b_x[j];
            out.b_y[i] = out.b_y[j];
            out.c[i] = out.c[j];
        }
    }
    Ok(out)
}

fn correlate_rows(src: &[f32], h: usize, w: usize, k: &[f32]) -> Vec<f32> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let orow = &mut out[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ti, &kv) in k.iter().enumerate() {
                let sx = (x as isize + ti as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[sx];
            }
            orow[x] = acc;
        }
    }
    out
}

fn correlate_cols(src: &[f32], h: usize, w: usize, k: &[f32]) -> Vec<f32> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ti, &kv) in k.iter().enumerate() {
                let sy = (y as isize + ti as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * src[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Samples the five motion-relevant coefficient planes at a fractional
/// position with bilinear weights and border clamping.
fn sample_expansion(e: &PolyExpansion, fx: f32, fy: f32) -> (Matrix2<f64>, Vector2<f64>) {
    let (h, w) = (e.height, e.width);
    let cx = fx.clamp(0.0, w as f32 - 1.0);
    let cy = fy.clamp(0.0, h as f32 - 1.0);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (tx, ty) = (cx - x0 as f32, cy - y0 as f32);
    let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
    let wgt = [
        ((1.0 - tx) * (1.0 - ty)) as f64,
        (tx * (1.0 - ty)) as f64,
        ((1.0 - tx) * ty) as f64,
        (tx * ty) as f64,
    ];
    let mut axx = 0.0;
    let mut axy = 0.0;
    let mut ayy = 0.0;
    let mut bx = 0.0;
    let mut by = 0.0;
    for (&i, &wv) in idx.iter().zip(&wgt) {
        axx += wv * e.a_xx[i] as f64;
        axy += wv * e.a_xy[i] as f64;
        ayy += wv * e.a_yy[i] as f64;
        bx += wv * e.b_x[i] as f64;
        by += wv * e.b_y[i] as f64;
    }
    (
        Matrix2::new(axx, axy, axy, ayy),
        Vector2::new(bx, by),
    )
}

/// Uniform box filter with truncated (renormalized) windows at the borders,
/// applied to one plane. Separable, running-sum free for clarity; window
/// sizes are small relative to image sides at desk scale.
fn box_filter(src: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        // Horizontal prefix sums in f64 keep long windows exact enough.
        let mut prefix = Vec::with_capacity(w + 1);
        prefix.push(0.0f64);
        for &v in row {
            prefix.push(prefix.last().unwrap() + v as f64);
        }
        let orow = &mut tmp[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = (x as isize - r).max(0) as usize;
            let hi = ((x as isize + r) as usize).min(w - 1);
            orow[x] = ((prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64) as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for x in 0..w {
        let mut prefix = Vec::with_capacity(h + 1);
        prefix.push(0.0f64);
        for y in 0..h {
            prefix.push(prefix.last().unwrap() + tmp[y * w + x] as f64);
        }
        for y in 0..h {
            let lo = (y as isize - r).max(0) as usize;
            let hi = ((y as isize + r) as usize).min(h - 1);
            out[y * w + x] = ((prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64) as f32;
        }
    }
    out
}

/// One fixed-point update of the displacement field at a single pyramid
/// level. For each pixel, the two expansions are combined into the local
/// system A d = db with A = (A1(x) + A2(x + d~)) / 2 and
/// db = A d~ - (b2(x + d~) - b1(x)) / 2, then [A'A | A'db] is averaged over
/// the window and the 2x2 system solved. Near-singular systems leave the
/// pixel at zero displacement.
fn update_flow(
    e1: &PolyExpansion,
    e2: &PolyExpansion,
    flow: &mut FlowField,
    window_size: usize,
) {
    let (h, w) = (e1.height, e1.width);
    let mut m11 = vec![0.0f32; h * w];
    let mut m12 = vec![0.0f32; h * w];
    let mut m22 = vec![0.0f32; h * w];
    let mut h1 = vec![0.0f32; h * w];
    let mut h2 = vec![0.0f32; h * w];

    // Local systems near the border are built from inherited expansion
    // coefficients and would poison the window averages, so their weight
    // ramps down to near zero at the edge.
    const BORDER: usize = 5;
    const RAMP: [f64; BORDER] = [0.02, 0.02, 0.2, 0.45, 0.7];
    let axis_weight = |v: usize, size: usize| -> f64 {
        let dist = v.min(size - 1 - v);
        if dist < BORDER {
            RAMP[dist]
        } else {
            1.0
        }
    };

    for y in 0..h {
        let wy = axis_weight(y, h);
        for x in 0..w {
            let i = y * w + x;
            let d = Vector2::new(flow.dx[i] as f64, flow.dy[i] as f64);
            let a1 = Matrix2::new(
                e1.a_xx[i] as f64,
                e1.a_xy[i] as f64,
                e1.a_xy[i] as f64,
                e1.a_yy[i] as f64,
            );
            let b1 = Vector2::new(e1.b_x[i] as f64, e1.b_y[i] as f64);
            let (a2, b2) = sample_expansion(e2, x as f32 + flow.dx[i], y as f32 + flow.dy[i]);
            let a = (a1 + a2) * 0.5;
            let db = a * d - (b2 - b1) * 0.5;
            let wgt = wy * axis_weight(x, w);
            // A is symmetric, so A'A and A'db only need five channels.
            m11[i] = (wgt * (a[(0, 0)] * a[(0, 0)] + a[(0, 1)] * a[(0, 1)])) as f32;
            m12[i] = (wgt * (a[(0, 1)] * (a[(0, 0)] + a[(1, 1)]))) as f32;
            m22[i] = (wgt * (a[(1, 1)] * a[(1, 1)] + a[(0, 1)] * a[(0, 1)])) as f32;
            h1[i] = (wgt * (a[(0, 0)] * db[0] + a[(0, 1)] * db[1])) as f32;
            h2[i] = (wgt * (a[(0, 1)] * db[0] + a[(1, 1)] * db[1])) as f32;
        }
    }

    let radius = window_size / 2;
    let m11 = box_filter(&m11, h, w, radius);
    let m12 = box_filter(&m12, h, w, radius);
    let m22 = box_filter(&m22, h, w, radius);
    let h1 = box_filter(&h1, h, w, radius);
    let h2 = box_filter(&h2, h, w, radius);

    for i in 0..h * w {
        let det = m11[i] as f64 * m22[i] as f64 - m12[i] as f64 * m12[i] as f64;
        // Conditioning test, not a signal-strength test: det scales with the
        // fourth power of local contrast, so compare it against m11*m22
        // (same scaling) and only zero out genuinely degenerate systems
        // (textureless patches or pure aperture). An absolute floor here
        // would silently discard flow on low-contrast but well-posed scenes.
        let scale = m11[i] as f64 * m22[i] as f64;
        if det <= 1e-3 * scale || !(det > f64::MIN_POSITIVE) {
            flow.dx[i] = 0.0;
            flow.dy[i] = 0.0;
        } else {
            flow.dx[i] = ((m22[i] as f64 * h1[i] as f64 - m12[i] as f64 * h2[i] as f64) / det) as f32;
            flow.dy[i] = ((m11[i] as f64 * h2[i] as f64 - m12[i] as f64 * h1[i] as f64) / det) as f32;
        }
    }
}

/// Coarse-to-fine Farneback flow between two RGB frames of equal size.
pub fn farneback_flow(
    frame_a: &Tensor,
    frame_b: &Tensor,
    params: &FarnebackParams,
) -> Result<FlowField> {
    params.validate()?;
    if frame_a.shape() != frame_b.shape() {
        return Err(FlowError::Shape(format!(
            "frame shapes differ: {:?} vs {:?}",
            frame_a.shape(),
            frame_b.shape()
        )));
    }
    let s = frame_a.shape();
    if s.len() != 3 || s[0] != 3 || s[1] < 32 || s[2] < 32 {
        return Err(FlowError::Shape(format!(
            "frames must be [3,H,W] with H,W >= 32, got {s:?}"
        )));
    }
    let pyr_a = gaussian_pyramid(&to_grayscale(frame_a)?, params)?;
    let pyr_b = gaussian_pyramid(&to_grayscale(frame_b)?, params)?;

    let mut flow: Option<FlowField> = None;
    for level in (0..params.levels).rev() {
        let (h, w) = (pyr_a[level].shape()[1], pyr_a[level].shape()[2]);
        let mut cur = match flow.take() {
            None => FlowField::zeros(h, w),
            Some(prev) => {
                // Upscale the coarser estimate and rescale displacement
                // magnitudes by the per-axis size ratio.
                let sx = w as f32 / prev.width as f32;
                let sy = h as f32 / prev.height as f32;
                let mut dx = resize_plane(&prev.dx, prev.height, prev.width, h, w);
                let mut dy = resize_plane(&prev.dy, prev.height, prev.width, h, w);
                dx.iter_mut().for_each(|v| *v *= sx);
                dy.iter_mut().for_each(|v| *v *= sy);
                FlowField {
                    width: w,
                    height: h,
                    dx,
                    dy,
                }
            }
        };
        let e1 = poly_expansion(&pyr_a[level], params.poly_n, params.poly_sigma)?;
        let e2 = poly_expansion(&pyr_b[level], params.poly_n, params.poly_sigma)?;
        for _ in 0..params.iterations {
            update_flow(&e1, &e2, &mut cur, params.window_size);
        }
        flow = Some(cur);
    }
    let flow = flow.expect("levels >= 1");
    debug_assert!(flow.all_finite());
    Ok(flow)
}

/// Backward warping: out(p) = image(p + d(p)) with bilinear sampling and
/// border clamping. With flow a -> b, warping frame b reconstructs frame a.
pub fn warp(image: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] != flow.height || s[2] != flow.width {
        return Err(FlowError::Shape(format!(
            "warp size mismatch: image {s:?} vs flow {}x{}",
            flow.height, flow.width
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f32 + flow.dx[i]).clamp(0.0, w as f32 - 1.0);
            let sy = (y as f32 + flow.dy[i]).clamp(0.0, h as f32 - 1.0);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (tx, ty) = (sx - x0 as f32, sy - y0 as f32);
            for ci in 0..c {
                let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out[ci * h * w + i] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out).expect("warp shape"))
}

/// Standard flow color wheel: hue encodes direction, value encodes magnitude
/// normalized by the 95th percentile (saturation fixed at 1).
pub fn flow_to_rgb(flow: &FlowField) -> Vec<u8> {
    let n = flow.dx.len();
    let mut mags: Vec<f32> = flow
        .dx
        .iter()
        .zip(&flow.dy)
        .map(|(&x, &y)| (x * x + y * y).sqrt())
        .collect();
    let mut sorted = mags.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p95 = sorted[((n - 1) as f64 * 0.95).round() as usize].max(1e-6);

    let mut rgb = Vec::with_capacity(n * 3);
    for i in 0..n {
        let angle = flow.dy[i].atan2(flow.dx[i]);
        let hue = (angle.to_degrees() + 360.0) % 360.0;
        let value = (mags[i] / p95).min(1.0);
        let (r, g, b) = hsv_to_rgb(hue, 1.0, value);
        rgb.push((r * 255.0).round() as u8);
        rgb.push((g * 255.0).round() as u8);
        rgb.push((b * 255.0).round() as u8);
    }
    mags.clear();
    rgb
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

pub fn write_flow_png(flow: &FlowField, path: &std::path::Path) -> Result<()> {
    let rgb = flow_to_rgb(flow);
    let img = image::RgbImage::from_raw(flow.width as u32, flow.height as u32, rgb)
        .expect("buffer size matches dimensions");
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn rgb_tensor(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    /// Band-limited random texture: white noise smoothed at two scales so
    /// every pyramid level still carries gradient information.
    fn textured_noise(h: usize, w: usize, seed: u64) -> Vec<f32> {
        let mut rng = rng_from(seed, 31);
        let noise = Tensor::rand_uniform(&[h * w], 0.0, 1.0, &mut rng);
        let fine = correlate_separable(noise.data(), h, w, &gaussian_kernel_1d(1.2), &gaussian_kernel_1d(1.2));
        let coarse = correlate_separable(noise.data(), h, w, &gaussian_kernel_1d(5.0), &gaussian_kernel_1d(5.0));
        let mixed: Vec<f32> = fine
            .iter()
            .zip(&coarse)
            .map(|(&f, &c)| 0.6 * f + 0.4 * c)
            .collect();
        let lo = mixed.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = mixed.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        mixed.iter().map(|&v| (v - lo) / (hi - lo + 1e-6)).collect()
    }

    /// Two views of one larger texture, offset by (shift_x, shift_y), so the
    /// translation is exact and wrap-free.
    fn translated_pair(
        h: usize,
        w: usize,
        shift_x: i64,
        shift_y: i64,
        seed: u64,
    ) -> (Tensor, Tensor) {
        let margin = 8;
        let big_h = h + 2 * margin;
        let big_w = w + 2 * margin;
        let field = textured_noise(big_h, big_w, seed);
        let crop = |ox: i64, oy: i64| -> Tensor {
            let mut gray = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i64 + margin as i64 + oy) as usize;
                    let sx = (x as i64 + margin as i64 + ox) as usize;
                    gray.push(field[sy * big_w + sx]);
                }
            }
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(&gray);
            }
            Tensor::new(vec![3, h, w], data).unwrap()
        };
        // Content at p in frame_a sits at p + shift in frame_b, which means
        // frame_b's crop origin moves by -shift.
        (crop(0, 0), crop(-shift_x, -shift_y))
    }

    fn interior_epe(flow: &FlowField, want_x: f32, want_y: f32, margin: usize) -> f32 {
        let (h, w) = (flow.height, flow.width);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for y in margin..h - margin {
            for x in margin..w - margin {
                let i = y * w + x;
                let ex = flow.dx[i] - want_x;
                let ey = flow.dy[i] - want_y;
                total += ((ex * ex + ey * ey) as f64).sqrt();
                count += 1;
            }
        }
        (total / count as f64) as f32
    }

    #[test]
    fn grayscale_weights() {
        let white = rgb_tensor(4, 4, |_, _, _| 1.0);
        let g = to_grayscale(&white).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let red = rgb_tensor(4, 4, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let g = to_grayscale(&red).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.299).abs() < 1e-6));
    }

    #[test]
    fn grayscale_matches_pixel_oracle() {
        let mut rng = rng_from(42, 1);
        let img = Tensor::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        let g = to_grayscale(&img).unwrap();
        let d = img.data();
        for y in 0..5 {
            for x in 0..7 {
                let i = y * 7 + x;
                let want = 0.299 * d[i] + 0.587 * d[35 + i] + 0.114 * d[70 + i];
                assert_eq!(g.data()[i], want);
            }
        }
    }

    #[test]
    fn grayscale_rejects_wrong_channels() {
        let bad = Tensor::zeros(&[1, 4, 4]);
        assert!(to_grayscale(&bad).is_err());
    }

    #[test]
    fn pyramid_single_level_is_input() {
        let g = Tensor::full(&[1, 16, 16], 0.3);
        let params = FarnebackParams {
            levels: 1,
            ..Default::default()
        };
        let pyr = gaussian_pyramid(&g, &params).unwrap();
        assert_eq!(pyr.len(), 1);
        assert_eq!(pyr[0], g);
    }

    #[test]
    fn pyramid_preserves_constants() {
        let g = Tensor::full(&[1, 64, 64], 0.42);
        let pyr = gaussian_pyramid(&g, &FarnebackParams::default()).unwrap();
        for level in &pyr {
            assert!(level.data().iter().all(|&v| (v - 0.42).abs() < 1e-6));
        }
    }

    #[test]
    fn pyramid_geometry_64_32_16() {
        let g = Tensor::zeros(&[1, 64, 64]);
        let pyr = gaussian_pyramid(&g, &FarnebackParams::default()).unwrap();
        let sizes: Vec<usize> = pyr.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(sizes, vec![64, 32, 16]);
    }

    #[test]
    fn pyramid_rejects_too_small() {
        let g = Tensor::zeros(&[1, 16, 16]);
        let params = FarnebackParams {
            levels: 3,
            ..Default::default()
        };
        assert!(gaussian_pyramid(&g, &params).is_err());
    }

    #[test]
    fn expansion_constant_image() {
        let g = Tensor::full(&[1, 24, 24], 0.7);
        let e = poly_expansion(&g, 5, 1.1).unwrap();
        for y in 6..18 {
            for x in 6..18 {
                let i = y * 24 + x;
                assert!(e.a_xx[i].abs() < 1e-4, "a_xx {}", e.a_xx[i]);
                assert!(e.a_yy[i].abs() < 1e-4);
                assert!(e.a_xy[i].abs() < 1e-4);
                assert!(e.b_x[i].abs() < 1e-4);
                assert!(e.b_y[i].abs() < 1e-4);
                assert!((e.c[i] - 0.7).abs() < 1e-4, "c {}", e.c[i]);
            }
        }
    }

    #[test]
    fn expansion_linear_ramp() {
        // f(x,y) = 2x: gradient 2 along x, no curvature.
        let mut data = vec![0.0f32; 32 * 32];
        for y in 0..32 {
            for x in 0..32 {
                data[y * 32 + x] = 2.0 * x as f32;
            }
        }
        let g = Tensor::new(vec![1, 32, 32], data).unwrap();
        let e = poly_expansion(&g, 5, 1.1).unwrap();
        for y in 8..24 {
            for x in 8..24 {
                let i = y * 32 + x;
                assert!((e.b_x[i] - 2.0).abs() < 1e-2, "b_x {}", e.b_x[i]);
                assert!(e.b_y[i].abs() < 1e-2);
                assert!(e.a_xx[i].abs() < 1e-2);
            }
        }
    }

    #[test]
    fn expansion_pure_quadratic() {
        // f(x,y) = x^2 has constant second derivative: A_xx = 1 everywhere.
        let mut data = vec![0.0f32; 32 * 32];
        for y in 0..32 {
            for x in 0..32 {
                data[y * 32 + x] = (x as f32) * (x as f32);
            }
        }
        let g = Tensor::new(vec![1, 32, 32], data).unwrap();
        let e = poly_expansion(&g, 5, 1.1).unwrap();
        for y in 8..24 {
            for x in 8..24 {
                let i = y * 32 + x;
                assert!((e.a_xx[i] - 1.0).abs() < 5e-2, "a_xx {}", e.a_xx[i]);
            }
        }
    }

    #[test]
    fn expansion_rejects_oversized_window() {
        let g = Tensor::zeros(&[1, 4, 4]);
        assert!(poly_expansion(&g, 5, 1.1).is_err());
    }

    #[test]
    fn zero_motion_flow_is_tiny() {
        let (a, _) = translated_pair(64, 64, 0, 0, 5);
        let flow = farneback_flow(&a, &a, &FarnebackParams::default()).unwrap();
        assert!(flow.all_finite());
        assert!(
            flow.mean_magnitude() < 0.05,
            "mean magnitude {}",
            flow.mean_magnitude()
        );
    }

    #[test]
    fn recovers_translation_3_0() {
        let (a, b) = translated_pair(64, 64, 3, 0, 7);
        let flow = farneback_flow(&a, &b, &FarnebackParams::default()).unwrap();
        let epe = interior_epe(&flow, 3.0, 0.0, 10);
        assert!(epe < 0.5, "epe {epe}");
    }

    #[test]
    fn recovers_translation_neg2_1() {
        let (a, b) = translated_pair(64, 64, -2, 1, 9);
        let flow = farneback_flow(&a, &b, &FarnebackParams::default()).unwrap();
        let epe = interior_epe(&flow, -2.0, 1.0, 10);
        assert!(epe < 0.5, "epe {epe}");
    }

    #[test]
    fn flow_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[3, 64, 64]);
        let b = Tensor::zeros(&[3, 32, 64]);
        assert!(farneback_flow(&a, &b, &FarnebackParams::default()).is_err());
        let tiny = Tensor::zeros(&[3, 16, 16]);
        assert!(farneback_flow(&tiny, &tiny, &FarnebackParams::default()).is_err());
    }

    #[test]
    fn textureless_regions_stay_finite_and_zero() {
        // Uniform frames make every local system singular: the fallback
        // must produce zero displacement, not NaN.
        let a = rgb_tensor(64, 64, |_, _, _| 0.5);
        let flow = farneback_flow(&a, &a, &FarnebackParams::default()).unwrap();
        assert!(flow.all_finite());
        assert!(flow.mean_magnitude() < 1e-6);
    }

    #[test]
    fn resolution_equivariance_on_translation() {
        let (a, b) = translated_pair(96, 96, 4, 0, 11);
        let full = farneback_flow(&a, &b, &FarnebackParams::default()).unwrap();
        let a_half = resize_bilinear(&a, 48, 48).unwrap();
        let b_half = resize_bilinear(&b, 48, 48).unwrap();
        let half = farneback_flow(&a_half, &b_half, &FarnebackParams::default()).unwrap();

        // Half-resolution flow should be about half the downsampled
        // full-resolution flow.
        let full_dx_half = resize_plane(&full.dx, 96, 96, 48, 48);
        let full_dy_half = resize_plane(&full.dy, 96, 96, 48, 48);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for y in 8..40 {
            for x in 8..40 {
                let i = y * 48 + x;
                let ex = half.dx[i] - 0.5 * full_dx_half[i];
                let ey = half.dy[i] - 0.5 * full_dy_half[i];
                total += ((ex * ex + ey * ey) as f64).sqrt();
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean < 0.5, "discrepancy {mean}");
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let mut rng = rng_from(3, 3);
        let img = Tensor::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let out = warp(&img, &FlowField::zeros(8, 8)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn warp_integer_shift_on_ramp() {
        // Ramp image with flow (1,0): out(y,x) = in(y,x+1) on the interior.
        let img = rgb_tensor(8, 8, |_, _, x| x as f32);
        let mut flow = FlowField::zeros(8, 8);
        flow.dx.iter_mut().for_each(|v| *v = 1.0);
        let out = warp(&img, &flow).unwrap();
        for y in 0..8 {
            for x in 0..7 {
                assert_eq!(out.data()[y * 8 + x], (x + 1) as f32);
            }
        }
    }

    #[test]
    fn warp_rejects_size_mismatch() {
        let img = Tensor::zeros(&[3, 8, 8]);
        assert!(warp(&img, &FlowField::zeros(4, 8)).is_err());
    }

    #[test]
    fn photometric_consistency_beats_baseline() {
        let (a, b) = translated_pair(64, 64, 3, 0, 13);
        let flow = farneback_flow(&a, &b, &FarnebackParams::default()).unwrap();
        let warped = warp(&b, &flow).unwrap();
        let mae = |p: &Tensor, q: &Tensor| -> f64 {
            p.data()
                .iter()
                .zip(q.data())
                .map(|(&x, &y)| (x - y).abs() as f64)
                .sum::<f64>()
                / p.numel() as f64
        };
        let warped_err = mae(&warped, &a);
        let baseline = mae(&b, &a);
        assert!(
            warped_err < baseline,
            "warped {warped_err} vs baseline {baseline}"
        );
    }

    #[test]
    fn params_validation() {
        let mut p = FarnebackParams::default();
        assert!(p.validate().is_ok());
        p.pyramid_scale = 1.0;
        assert!(p.validate().is_err());
        p = FarnebackParams {
            window_size: 14,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        p = FarnebackParams {
            poly_n: 4,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        p = FarnebackParams {
            poly_sigma: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        p = FarnebackParams {
            iterations: 0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn flow_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut flow = FlowField::zeros(16, 16);
        for (i, v) in flow.dx.iter_mut().enumerate() {
            *v = (i % 5) as f32 - 2.0;
        }
        let path = dir.path().join("flow.png");
        write_flow_png(&flow, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (16, 16));
    }
}
