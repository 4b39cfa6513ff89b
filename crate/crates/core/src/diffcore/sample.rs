//! Bilinear inverse-warp sampling shared by the graph op and the plain
//! geometry helpers.
//!
//! Coordinate convention: normalized coordinates address pixel centers, with
//! x growing rightward and y downward. Output pixel `(i, j)` (column, row)
//! sits at `x_n = (2i + 1)/W - 1`, `y_n = (2j + 1)/H - 1`; the 2x3 matrix maps
//! it to a source coordinate in the same normalized frame, which is then read
//! bilinearly with zero padding outside the source.
//!
//! The mapping is evaluated directly in pixel units so that the identity
//! matrix lands exactly on integer pixel positions.

/// Source pixel coordinate `(x, y)` for output column `i`, row `j`.
#[inline]
pub(crate) fn source_coord(theta: &[f64], w: usize, h: usize, i: usize, j: usize) -> (f64, f64) {
    let (wf, hf) = (w as f64, h as f64);
    let a = i as f64 + 0.5 - wf / 2.0;
    let b = j as f64 + 0.5 - hf / 2.0;
    let x = theta[0] * a + theta[1] * b * (wf / hf) + theta[2] * (wf / 2.0) + (wf / 2.0 - 0.5);
    let y = theta[3] * a * (hf / wf) + theta[4] * b + theta[5] * (hf / 2.0) + (hf / 2.0 - 0.5);
    (x, y)
}

#[inline]
fn read(plane: &[f64], w: usize, h: usize, x: i64, y: i64) -> f64 {
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Warps `channels` planes of `h x w` through `theta` into `out`.
pub(crate) fn warp_forward(src: &[f64], channels: usize, h: usize, w: usize, theta: &[f64], out: &mut [f64]) {
    let hw = h * w;
    for j in 0..h {
        for i in 0..w {
            let (x, y) = source_coord(theta, w, h, i, j);
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for c in 0..channels {
                let plane = &src[c * hw..(c + 1) * hw];
                out[c * hw + j * w + i] = w00 * read(plane, w, h, x0, y0)
                    + w01 * read(plane, w, h, x0 + 1, y0)
                    + w10 * read(plane, w, h, x0, y0 + 1)
                    + w11 * read(plane, w, h, x0 + 1, y0 + 1);
            }
        }
    }
}

/// Accumulates gradients of a warp into `grad_src` and/or `grad_theta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_backward(
    src: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    theta: &[f64],
    grad_out: &[f64],
    mut grad_src: Option<&mut [f64]>,
    mut grad_theta: Option<&mut [f64]>,
) {
    let hw = h * w;
    let (wf, hf) = (w as f64, h as f64);
    for j in 0..h {
        for i in 0..w {
            let (x, y) = source_coord(theta, w, h, i, j);
            let x0f = x.floor();
            let y0f = y.floor();
            let fx = x - x0f;
            let fy = y - y0f;
            let (x0, y0) = (x0f as i64, y0f as i64);
            let mut dx = 0.0;
            let mut dy = 0.0;
            for c in 0..channels {
                let g = grad_out[c * hw + j * w + i];
                if g == 0.0 {
                    continue;
                }
                let plane = &src[c * hw..(c + 1) * hw];
                if grad_theta.is_some() {
                    let v00 = read(plane, w, h, x0, y0);
                    let v01 = read(plane, w, h, x0 + 1, y0);
                    let v10 = read(plane, w, h, x0, y0 + 1);
                    let v11 = read(plane, w, h, x0 + 1, y0 + 1);
                    dx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                if let Some(gs) = grad_src.as_deref_mut() {
                    let plane = &mut gs[c * hw..(c + 1) * hw];
                    let corners = [
                        (x0, y0, (1.0 - fx) * (1.0 - fy)),
                        (x0 + 1, y0, fx * (1.0 - fy)),
                        (x0, y0 + 1, (1.0 - fx) * fy),
                        (x0 + 1, y0 + 1, fx * fy),
                    ];
                    for (cx, cy, wt) in corners {
                        if cx >= 0 && cy >= 0 && cx < w as i64 && cy < h as i64 {
                            plane[cy as usize * w + cx as usize] += g * wt;
                        }
                    }
                }
            }
            if let Some(gt) = grad_theta.as_deref_mut() {
                let a = i as f64 + 0.5 - wf / 2.0;
                let b = j as f64 + 0.5 - hf / 2.0;
                gt[0] += dx * a;
                gt[1] += dx * b * (wf / hf);
                gt[2] += dx * (wf / 2.0);
                gt[3] += dy * a * (hf / wf);
                gt[4] += dy * b;
                gt[5] += dy * (hf / 2.0);
            }
        }
    }
}
