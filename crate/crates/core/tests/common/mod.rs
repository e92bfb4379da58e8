//! Independent reference implementations used as test oracles. Everything
//! here is written as plain nested loops against the mathematical definition,
//! deliberately sharing no code with the engine under test.

#![allow(dead_code)]

pub mod gradcheck_cases;

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-7;

/// Brute-force cross-correlation, f32 accumulation, one output element at a
/// time. Padding is handled by an explicit bounds test per tap.
pub fn conv2d_naive_f32(
    x: &[f32],
    (c_in, h, w): (usize, usize, usize),
    wt: &[f32],
    (c_out, k): (usize, usize),
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f32; c_out * h_out * w_out];
    for co in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((co * c_in + ci) * k + ky) * k + kx]
                                * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    out
}

pub fn conv2d_f64(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    wt: &[f64],
    (c_out, k): (usize, usize),
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f64; c_out * h_out * w_out];
    for co in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((co * c_in + ci) * k + ky) * k + kx]
                                * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    out
}

pub fn linear_f64(x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let d_out = bias.len();
    let d_in = x.len();
    (0..d_out)
        .map(|o| {
            let mut acc = bias[o];
            for i in 0..d_in {
                acc += wt[o * d_in + i] * x[i];
            }
            acc
        })
        .collect()
}

/// Bilinear upsampling with align-corners = false: the source coordinate of
/// output cell `o` is `(o + 0.5)/factor - 0.5`, clamped to the input range.
pub fn upsample_bilinear_f64(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    factor: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let coord = |o: usize, f: usize, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, n as f64 - 1.0);
        let i0 = src.floor() as usize;
        (i0, (i0 + 1).min(n - 1), src - i0 as f64)
    };
    let mut out = vec![0.0f64; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1, wy) = coord(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, wx) = coord(ox, factor, w);
                let top = x[(ci * h + y0) * w + x0] * (1.0 - wx) + x[(ci * h + y0) * w + x1] * wx;
                let bot = x[(ci * h + y1) * w + x0] * (1.0 - wx) + x[(ci * h + y1) * w + x1] * wx;
                out[(ci * oh + oy) * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// 2x2 mean pooling over each spatial block.
pub fn avg_pool2_f64(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f64; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ci * h + 2 * oy) * w + 2 * ox;
                out[(ci * oh + oy) * ow + ox] =
                    0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    out
}

pub fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary cross-entropy over the pixels where `valid` is nonzero
/// (all pixels when `valid` is `None`); 0 when nothing is valid.
pub fn bce_f64(pred: &[f64], target: &[f64], valid: Option<&[f64]>) -> f64 {
    let mut acc = 0.0;
    let mut count = 0.0;
    for i in 0..pred.len() {
        let v = valid.map_or(1.0, |m| m[i]);
        if v == 0.0 {
            continue;
        }
        let p = pred[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        acc += v * (target[i] * p.ln() + (1.0 - target[i]) * (1.0 - p).ln());
        count += v;
    }
    if count > 0.0 {
        -acc / count
    } else {
        0.0
    }
}

pub fn dice_f64(pred: &[f64], target: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(target).map(|(p, y)| p * y).sum();
    let psum: f64 = pred.iter().sum();
    let ysum: f64 = target.iter().sum();
    1.0 - 2.0 * inter / (psum + ysum + DICE_EPS)
}

/// Intersection-over-union of two binary masks; 1.0 when both are empty.
pub fn iou_naive(pred: &[f32], truth: &[f32]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p != 0.0, t != 0.0);
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
