//! Raw numeric kernels behind the tape ops.
//!
//! Everything here is a pure function over flat slices plus explicit
//! dimensions, so the same code serves the differentiable tape ops and the
//! value-level helpers (mask warping, hard cropping).

use super::tensor::Real;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(
        input + 2 * padding >= kernel,
        "conv kernel {} larger than padded input {}",
        kernel,
        input + 2 * padding
    );
    (input + 2 * padding - kernel) / stride + 1
}

/// Cross-correlation forward: input [n,cin,h,w], weight [cout,cin,kh,kw],
/// bias [cout] -> out [n,cout,oh,ow].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let mut out = vec![T::zero(); n * cout * oh * ow];

    for b in 0..n {
        for co in 0..cout {
            let out_base = (b * cout + co) * oh * ow;
            out[out_base..out_base + oh * ow].fill(bias[co]);
            for ci in 0..cin {
                let in_base = (b * cin + ci) * h * w;
                let w_base = (co * cin + ci) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = weight[w_base + ki * kw + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            // Contiguous inner loop over output x; input x
                            // advances by `stride`.
                            for ox in 0..ow {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[out_row + ox] =
                                    out[out_row + ox] + wv * input[in_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv2d_forward`]: accumulates into grad_input, grad_weight
/// and grad_bias (all pre-sized, zero-initialized by the caller).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_input: &mut [T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);

    for b in 0..n {
        for co in 0..cout {
            let out_base = (b * cout + co) * oh * ow;
            let mut gb = T::zero();
            for v in &grad_out[out_base..out_base + oh * ow] {
                gb = gb + *v;
            }
            grad_bias[co] = grad_bias[co] + gb;

            for ci in 0..cin {
                let in_base = (b * cin + ci) * h * w;
                let w_base = (co * cin + ci) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = weight[w_base + ki * kw + kj];
                        let mut gw = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let go = grad_out[out_row + ox];
                                gw = gw + go * input[in_row + ix as usize];
                                grad_input[in_row + ix as usize] =
                                    grad_input[in_row + ix as usize] + go * wv;
                            }
                        }
                        grad_weight[w_base + ki * kw + kj] =
                            grad_weight[w_base + ki * kw + kj] + gw;
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsample: [n,c,h,w] -> [n,c,2h,2w].
pub fn upsample2x_forward<T: Real>(input: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for y in 0..h {
            for x in 0..w {
                let v = input[in_base + y * w + x];
                let o = out_base + 2 * y * ow + 2 * x;
                out[o] = v;
                out[o + 1] = v;
                out[o + ow] = v;
                out[o + ow + 1] = v;
            }
        }
    }
    out
}

/// Backward of 2x upsample: each source cell receives the sum of its 2x2
/// replica gradients.
pub fn upsample2x_backward<T: Real>(
    grad_out: &[T],
    grad_input: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) {
    let (oh, ow) = (2 * h, 2 * w);
    let _ = oh;
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * (2 * h) * ow;
        for y in 0..h {
            for x in 0..w {
                let o = out_base + 2 * y * ow + 2 * x;
                let g = grad_out[o] + grad_out[o + 1] + grad_out[o + ow] + grad_out[o + ow + 1];
                grad_input[in_base + y * w + x] = grad_input[in_base + y * w + x] + g;
            }
        }
    }
}

/// Sampling grid from a 2x3 affine matrix, align-corners convention: the
/// output grid spans [-1,1]^2 with corner cells exactly at the corners.
/// theta is row-major [n,2,3]; out is [n,oh,ow,2] holding (x,y) pairs.
pub fn affine_grid_forward<T: Real>(theta: &[T], n: usize, oh: usize, ow: usize) -> Vec<T> {
    assert!(oh >= 2 && ow >= 2, "affine grid needs at least 2x2 output");
    let mut out = vec![T::zero(); n * oh * ow * 2];
    for b in 0..n {
        let t = &theta[b * 6..b * 6 + 6];
        for gy in 0..oh {
            let y = T::of(2.0 * gy as f64 / (oh - 1) as f64 - 1.0);
            for gx in 0..ow {
                let x = T::of(2.0 * gx as f64 / (ow - 1) as f64 - 1.0);
                let o = ((b * oh + gy) * ow + gx) * 2;
                out[o] = t[0] * x + t[1] * y + t[2];
                out[o + 1] = t[3] * x + t[4] * y + t[5];
            }
        }
    }
    out
}

/// Backward of [`affine_grid_forward`] w.r.t. theta.
pub fn affine_grid_backward<T: Real>(
    grad_out: &[T],
    grad_theta: &mut [T],
    n: usize,
    oh: usize,
    ow: usize,
) {
    for b in 0..n {
        let gt = &mut grad_theta[b * 6..b * 6 + 6];
        for gy in 0..oh {
            let y = T::of(2.0 * gy as f64 / (oh - 1) as f64 - 1.0);
            for gx in 0..ow {
                let x = T::of(2.0 * gx as f64 / (ow - 1) as f64 - 1.0);
                let o = ((b * oh + gy) * ow + gx) * 2;
                let gx_out = grad_out[o];
                let gy_out = grad_out[o + 1];
                gt[0] = gt[0] + gx_out * x;
                gt[1] = gt[1] + gx_out * y;
                gt[2] = gt[2] + gx_out;
                gt[3] = gt[3] + gy_out * x;
                gt[4] = gt[4] + gy_out * y;
                gt[5] = gt[5] + gy_out;
            }
        }
    }
}

#[inline]
fn tap<T: Real>(input: &[T], base: usize, w: usize, h: usize, ix: isize, iy: isize) -> T {
    if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
        T::zero()
    } else {
        input[base + iy as usize * w + ix as usize]
    }
}

/// Bilinear sampling with align-corners pixel mapping and zero padding
/// outside the image. input [n,c,h,w], grid [n,gh,gw,2] -> [n,c,gh,gw].
#[allow(clippy::too_many_arguments)]
pub fn grid_sample_forward<T: Real>(
    input: &[T],
    grid: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    gh: usize,
    gw: usize,
) -> Vec<T> {
    let half = T::of(0.5);
    let one = T::one();
    let sx = T::of((w - 1) as f64);
    let sy = T::of((h - 1) as f64);
    let mut out = vec![T::zero(); n * c * gh * gw];
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let g = ((b * gh + gy) * gw + gx) * 2;
                let px = (grid[g] + one) * half * sx;
                let py = (grid[g + 1] + one) * half * sy;
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let x0i = x0.as_f64() as isize;
                let y0i = y0.as_f64() as isize;
                for ch in 0..c {
                    let in_base = (b * c + ch) * h * w;
                    let v00 = tap(input, in_base, w, h, x0i, y0i);
                    let v01 = tap(input, in_base, w, h, x0i + 1, y0i);
                    let v10 = tap(input, in_base, w, h, x0i, y0i + 1);
                    let v11 = tap(input, in_base, w, h, x0i + 1, y0i + 1);
                    let top = v00 * (one - fx) + v01 * fx;
                    let bot = v10 * (one - fx) + v11 * fx;
                    out[((b * c + ch) * gh + gy) * gw + gx] = top * (one - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Backward of [`grid_sample_forward`] for both the image and the grid.
#[allow(clippy::too_many_arguments)]
pub fn grid_sample_backward<T: Real>(
    input: &[T],
    grid: &[T],
    grad_out: &[T],
    grad_input: &mut [T],
    grad_grid: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    gh: usize,
    gw: usize,
) {
    let half = T::of(0.5);
    let one = T::one();
    let sx = T::of((w - 1) as f64);
    let sy = T::of((h - 1) as f64);
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let g = ((b * gh + gy) * gw + gx) * 2;
                let px = (grid[g] + one) * half * sx;
                let py = (grid[g + 1] + one) * half * sy;
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let x0i = x0.as_f64() as isize;
                let y0i = y0.as_f64() as isize;

                let mut d_px = T::zero();
                let mut d_py = T::zero();
                for ch in 0..c {
                    let in_base = (b * c + ch) * h * w;
                    let go = grad_out[((b * c + ch) * gh + gy) * gw + gx];
                    if go == T::zero() {
                        continue;
                    }
                    let v00 = tap(input, in_base, w, h, x0i, y0i);
                    let v01 = tap(input, in_base, w, h, x0i + 1, y0i);
                    let v10 = tap(input, in_base, w, h, x0i, y0i + 1);
                    let v11 = tap(input, in_base, w, h, x0i + 1, y0i + 1);

                    // d out / d pixel coordinate
                    let top_dx = v01 - v00;
                    let bot_dx = v11 - v10;
                    d_px = d_px + go * (top_dx * (one - fy) + bot_dx * fy);
                    let left_dy = v10 - v00;
                    let right_dy = v11 - v01;
                    d_py = d_py + go * (left_dy * (one - fx) + right_dy * fx);

                    // d out / d input taps
                    let mut scatter = |ix: isize, iy: isize, wgt: T| {
                        if ix >= 0 && iy >= 0 && ix < w as isize && iy < h as isize {
                            let o = in_base + iy as usize * w + ix as usize;
                            grad_input[o] = grad_input[o] + go * wgt;
                        }
                    };
                    scatter(x0i, y0i, (one - fx) * (one - fy));
                    scatter(x0i + 1, y0i, fx * (one - fy));
                    scatter(x0i, y0i + 1, (one - fx) * fy);
                    scatter(x0i + 1, y0i + 1, fx * fy);
                }
                grad_grid[g] = grad_grid[g] + d_px * half * sx;
                grad_grid[g + 1] = grad_grid[g + 1] + d_py * half * sy;
            }
        }
    }
}

/// Bilinear resize of a [c,h,w] image to [c,oh,ow], align-corners.
pub fn bilinear_resize<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let one = T::one();
    let mut out = vec![T::zero(); c * oh * ow];
    let fy_step = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let fx_step = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    for oy in 0..oh {
        let py = T::of(oy as f64 * fy_step);
        let y0 = py.floor();
        let fy = py - y0;
        let y0i = (y0.as_f64() as usize).min(h - 1);
        let y1i = (y0i + 1).min(h - 1);
        for ox in 0..ow {
            let px = T::of(ox as f64 * fx_step);
            let x0 = px.floor();
            let fx = px - x0;
            let x0i = (x0.as_f64() as usize).min(w - 1);
            let x1i = (x0i + 1).min(w - 1);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = input[base + y0i * w + x0i];
                let v01 = input[base + y0i * w + x1i];
                let v10 = input[base + y1i * w + x0i];
                let v11 = input[base + y1i * w + x1i];
                let top = v00 * (one - fx) + v01 * fx;
                let bot = v10 * (one - fx) + v11 * fx;
                out[(ch * oh + oy) * ow + ox] = top * (one - fy) + bot * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_ones_3x3_pad1() {
        // all-ones 3x3 input and kernel, stride 1, pad 1: centre sees the
        // full 3x3 window (9), corners see a 2x2 window (4).
        let input = vec![1.0f64; 9];
        let weight = vec![1.0f64; 9];
        let bias = vec![0.0f64];
        let out = conv2d_forward(&input, &weight, &bias, 1, 1, 3, 3, 1, 3, 3, 1, 1);
        assert_eq!(out.len(), 9);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[2], 4.0);
        assert_eq!(out[6], 4.0);
        assert_eq!(out[8], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv_identity_1x1() {
        let input: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let out = conv2d_forward(&input, &[1.0], &[0.0], 1, 1, 3, 4, 1, 1, 1, 1, 0);
        assert_eq!(out, input);
    }

    #[test]
    fn upsample_blocks() {
        let out = upsample2x_forward(&[1.0f64, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        assert_eq!(
            out,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let mut gi = vec![0.0f64; 4];
        upsample2x_backward(&vec![1.0f64; 16], &mut gi, 1, 1, 2, 2);
        assert_eq!(gi, vec![4.0; 4]);
    }

    #[test]
    fn affine_grid_identity_2x2() {
        let theta = vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0];
        let g = affine_grid_forward(&theta, 1, 2, 2);
        // (x,y) pairs scanning y-major: (-1,-1) (1,-1) (-1,1) (1,1)
        assert_eq!(g, vec![-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn affine_grid_translation_shifts_x() {
        let theta = vec![1.0f64, 0.0, 0.5, 0.0, 1.0, 0.0];
        let g = affine_grid_forward(&theta, 1, 2, 2);
        assert_eq!(g[0], -0.5);
        assert_eq!(g[2], 1.5);
        assert_eq!(g[1], -1.0);
    }

    #[test]
    fn grid_sample_hand_points() {
        // input rows are y: [[0,1],[2,3]]
        let input = vec![0.0f64, 1.0, 2.0, 3.0];
        let sample = |x: f64, y: f64| -> f64 {
            grid_sample_forward(&input, &[x, y], 1, 1, 2, 2, 1, 1)[0]
        };
        assert!((sample(0.0, 0.0) - 1.5).abs() < 1e-12);
        assert!((sample(-1.0, -1.0) - 0.0).abs() < 1e-12);
        assert!((sample(0.0, -1.0) - 0.5).abs() < 1e-12);
        // outside [-1,1] reads the zero-padding region
        assert!(sample(-3.0, 0.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_resize_identity() {
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = bilinear_resize(&input, 1, 4, 4, 4, 4);
        assert_eq!(out, input);
    }
}
