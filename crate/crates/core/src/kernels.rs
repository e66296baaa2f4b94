//! Low-level forward/backward kernels shared by the pure layer API and the tape.
//!
//! All buffers are flat row-major f64: fields are `[c][y][x]`, conv weights are
//! `[out][in][ky][kx]`, bias is `[out]`. Backward kernels accumulate (`+=`)
//! into their gradient outputs.

use crate::field::ConvKind;

pub(crate) fn conv_fwd(
    kind: ConvKind,
    inp: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    wts: &[f64],
    bias: &[f64],
    out_c: usize,
    out: &mut [f64],
) {
    match kind {
        ConvKind::Conv1x1 => conv1x1_fwd(inp, in_c, h * w, wts, bias, out_c, out),
        ConvKind::Conv3x3 => conv3x3_fwd(inp, in_c, h, w, wts, bias, out_c, out),
        ConvKind::Deconv2x2 => deconv2_fwd(inp, in_c, h, w, wts, bias, out_c, out),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_bwd(
    kind: ConvKind,
    d_out: &[f64],
    inp: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    wts: &[f64],
    out_c: usize,
    d_inp: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    match kind {
        ConvKind::Conv1x1 => conv1x1_bwd(d_out, inp, in_c, h * w, wts, out_c, d_inp, d_w, d_b),
        ConvKind::Conv3x3 => conv3x3_bwd(d_out, inp, in_c, h, w, wts, out_c, d_inp, d_w, d_b),
        ConvKind::Deconv2x2 => deconv2_bwd(d_out, inp, in_c, h, w, wts, out_c, d_inp, d_w, d_b),
    }
}

fn conv1x1_fwd(inp: &[f64], in_c: usize, plane: usize, wts: &[f64], bias: &[f64], out_c: usize, out: &mut [f64]) {
    for o in 0..out_c {
        let orow = &mut out[o * plane..(o + 1) * plane];
        orow.fill(bias[o]);
        for i in 0..in_c {
            let wv = wts[o * in_c + i];
            let irow = &inp[i * plane..(i + 1) * plane];
            for (ov, iv) in orow.iter_mut().zip(irow) {
                *ov += wv * iv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1x1_bwd(
    d_out: &[f64],
    inp: &[f64],
    in_c: usize,
    plane: usize,
    wts: &[f64],
    out_c: usize,
    d_inp: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    for o in 0..out_c {
        let orow = &d_out[o * plane..(o + 1) * plane];
        d_b[o] += orow.iter().sum::<f64>();
        for i in 0..in_c {
            let wv = wts[o * in_c + i];
            let irow = &inp[i * plane..(i + 1) * plane];
            let drow = &mut d_inp[i * plane..(i + 1) * plane];
            let mut wacc = 0.0;
            for p in 0..plane {
                drow[p] += wv * orow[p];
                wacc += orow[p] * irow[p];
            }
            d_w[o * in_c + i] += wacc;
        }
    }
}

fn conv3x3_fwd(inp: &[f64], in_c: usize, h: usize, w: usize, wts: &[f64], bias: &[f64], out_c: usize, out: &mut [f64]) {
    let plane = h * w;
    for o in 0..out_c {
        out[o * plane..(o + 1) * plane].fill(bias[o]);
        for i in 0..in_c {
            let wbase = (o * in_c + i) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wv = wts[wbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y_lo..y_hi {
                        let iy = (y as isize + dy) as usize;
                        let orow = o * plane + y * w;
                        let irow = i * plane + iy * w;
                        for x in x_lo..x_hi {
                            let ix = (x as isize + dx) as usize;
                            out[orow + x] += wv * inp[irow + ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_bwd(
    d_out: &[f64],
    inp: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    wts: &[f64],
    out_c: usize,
    d_inp: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    let plane = h * w;
    for o in 0..out_c {
        d_b[o] += d_out[o * plane..(o + 1) * plane].iter().sum::<f64>();
        for i in 0..in_c {
            let wbase = (o * in_c + i) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wv = wts[wbase + ky * 3 + kx];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    let mut wacc = 0.0;
                    for y in y_lo..y_hi {
                        let iy = (y as isize + dy) as usize;
                        let orow = o * plane + y * w;
                        let irow = i * plane + iy * w;
                        for x in x_lo..x_hi {
                            let ix = (x as isize + dx) as usize;
                            let g = d_out[orow + x];
                            d_inp[irow + ix] += wv * g;
                            wacc += g * inp[irow + ix];
                        }
                    }
                    d_w[wbase + ky * 3 + kx] += wacc;
                }
            }
        }
    }
}

fn deconv2_fwd(inp: &[f64], in_c: usize, h: usize, w: usize, wts: &[f64], bias: &[f64], out_c: usize, out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    let iplane = h * w;
    let oplane = oh * ow;
    for o in 0..out_c {
        out[o * oplane..(o + 1) * oplane].fill(bias[o]);
        for i in 0..in_c {
            let wbase = (o * in_c + i) * 4;
            for ky in 0..2usize {
                for kx in 0..2usize {
                    let wv = wts[wbase + ky * 2 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let irow = i * iplane + y * w;
                        let orow = o * oplane + (2 * y + ky) * ow;
                        for x in 0..w {
                            out[orow + 2 * x + kx] += wv * inp[irow + x];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn deconv2_bwd(
    d_out: &[f64],
    inp: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    wts: &[f64],
    out_c: usize,
    d_inp: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    let (oh, ow) = (2 * h, 2 * w);
    let iplane = h * w;
    let oplane = oh * ow;
    for o in 0..out_c {
        d_b[o] += d_out[o * oplane..(o + 1) * oplane].iter().sum::<f64>();
        for i in 0..in_c {
            let wbase = (o * in_c + i) * 4;
            for ky in 0..2usize {
                for kx in 0..2usize {
                    let wv = wts[wbase + ky * 2 + kx];
                    let mut wacc = 0.0;
                    for y in 0..h {
                        let irow = i * iplane + y * w;
                        let orow = o * oplane + (2 * y + ky) * ow;
                        for x in 0..w {
                            let g = d_out[orow + 2 * x + kx];
                            d_inp[irow + x] += wv * g;
                            wacc += g * inp[irow + x];
                        }
                    }
                    d_w[wbase + ky * 2 + kx] += wacc;
                }
            }
        }
    }
}

pub(crate) fn relu_fwd(buf: &mut [f64]) {
    for v in buf.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub(crate) fn relu_bwd(d_out: &[f64], inp: &[f64], d_inp: &mut [f64]) {
    for ((d, g), &x) in d_inp.iter_mut().zip(d_out).zip(inp) {
        if x > 0.0 {
            *d += g;
        }
    }
}

pub(crate) fn avg_pool2_fwd(inp: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..oh {
            let r0 = (ch * h + 2 * y) * w;
            let r1 = r0 + w;
            let orow = (ch * oh + y) * ow;
            for x in 0..ow {
                out[orow + x] = 0.25 * (inp[r0 + 2 * x] + inp[r0 + 2 * x + 1] + inp[r1 + 2 * x] + inp[r1 + 2 * x + 1]);
            }
        }
    }
}

pub(crate) fn avg_pool2_bwd(d_out: &[f64], c: usize, h: usize, w: usize, d_inp: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..oh {
            let r0 = (ch * h + 2 * y) * w;
            let r1 = r0 + w;
            let orow = (ch * oh + y) * ow;
            for x in 0..ow {
                let g = 0.25 * d_out[orow + x];
                d_inp[r0 + 2 * x] += g;
                d_inp[r0 + 2 * x + 1] += g;
                d_inp[r1 + 2 * x] += g;
                d_inp[r1 + 2 * x + 1] += g;
            }
        }
    }
}

/// Bilinear warp forward. `dx`/`dy` are per-pixel displacements in pixels;
/// output position `(y, x)` samples the input at `(y + dy, x + dx)`. Samples
/// outside the grid contribute zero. An exactly integral sample position is a
/// plain copy, so a zero flow reproduces the input bitwise.
pub(crate) fn warp_fwd(inp: &[f64], c: usize, h: usize, w: usize, dx: &[f64], dy: &[f64], out: &mut [f64]) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = x as f64 + dx[p];
            let py = y as f64 + dy[p];
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let x0 = x0 as isize;
            let y0 = y0 as isize;
            if fx == 0.0 && fy == 0.0 {
                let inside = x0 >= 0 && x0 < w as isize && y0 >= 0 && y0 < h as isize;
                for ch in 0..c {
                    out[ch * plane + p] = if inside { inp[ch * plane + (y0 as usize) * w + x0 as usize] } else { 0.0 };
                }
                continue;
            }
            // Saturate: an extreme flow lands the cast on isize::MAX, which
            // must stay out of bounds instead of wrapping.
            let (x1, y1) = (x0.saturating_add(1), y0.saturating_add(1));
            let in_x0 = x0 >= 0 && x0 < w as isize;
            let in_x1 = x1 >= 0 && x1 < w as isize;
            let in_y0 = y0 >= 0 && y0 < h as isize;
            let in_y1 = y1 >= 0 && y1 < h as isize;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w10 = fx * (1.0 - fy);
            let w01 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for ch in 0..c {
                let base = ch * plane;
                let mut acc = 0.0;
                if in_y0 {
                    let row = base + (y0 as usize) * w;
                    if in_x0 {
                        acc += w00 * inp[row + x0 as usize];
                    }
                    if in_x1 {
                        acc += w10 * inp[row + x1 as usize];
                    }
                }
                if in_y1 {
                    let row = base + (y1 as usize) * w;
                    if in_x0 {
                        acc += w01 * inp[row + x0 as usize];
                    }
                    if in_x1 {
                        acc += w11 * inp[row + x1 as usize];
                    }
                }
                out[base + p] = acc;
            }
        }
    }
}

/// Bilinear warp backward wrt both the input values and the flow components.
/// Out-of-grid neighbors contribute zero value and receive zero gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_bwd(
    d_out: &[f64],
    inp: &[f64],
    c: usize,
    h: usize,
    w: usize,
    dx: &[f64],
    dy: &[f64],
    d_inp: &mut [f64],
    d_dx: &mut [f64],
    d_dy: &mut [f64],
) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = x as f64 + dx[p];
            let py = y as f64 + dy[p];
            let x0f = px.floor();
            let y0f = py.floor();
            let fx = px - x0f;
            let fy = py - y0f;
            let x0 = x0f as isize;
            let y0 = y0f as isize;
            let (x1, y1) = (x0.saturating_add(1), y0.saturating_add(1));
            let in_x0 = x0 >= 0 && x0 < w as isize;
            let in_x1 = x1 >= 0 && x1 < w as isize;
            let in_y0 = y0 >= 0 && y0 < h as isize;
            let in_y1 = y1 >= 0 && y1 < h as isize;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w10 = fx * (1.0 - fy);
            let w01 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let base = ch * plane;
                let g = d_out[base + p];
                if g == 0.0 {
                    continue;
                }
                let mut v00 = 0.0;
                let mut v10 = 0.0;
                let mut v01 = 0.0;
                let mut v11 = 0.0;
                if in_y0 {
                    let row = base + (y0 as usize) * w;
                    if in_x0 {
                        v00 = inp[row + x0 as usize];
                        d_inp[row + x0 as usize] += g * w00;
                    }
                    if in_x1 {
                        v10 = inp[row + x1 as usize];
                        d_inp[row + x1 as usize] += g * w10;
                    }
                }
                if in_y1 {
                    let row = base + (y1 as usize) * w;
                    if in_x0 {
                        v01 = inp[row + x0 as usize];
                        d_inp[row + x0 as usize] += g * w01;
                    }
                    if in_x1 {
                        v11 = inp[row + x1 as usize];
                        d_inp[row + x1 as usize] += g * w11;
                    }
                }
                gx += g * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                gy += g * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
            }
            d_dx[p] += gx;
            d_dy[p] += gy;
        }
    }
}
