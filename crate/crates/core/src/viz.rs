//! Raster visualizations: flow fields as color wheels and feature fields as
//! PCA projections.
//!
//! Flows are rendered with the usual optical-flow convention — hue encodes
//! direction, saturation encodes magnitude relative to the largest vector in
//! the field. Feature fields are reduced to three channels by projecting
//! each pixel's channel vector onto the leading principal components of the
//! channel covariance, computed by deterministic power iteration.

use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::warp::FlowField;

/// HSV (all in [0,1]) to RGB bytes.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let to_u8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [to_u8(r), to_u8(g), to_u8(b)]
}

/// Render a flow field as RGB: hue from the vector angle, saturation from
/// the magnitude scaled by the field's maximum (a zero field is all white).
pub fn flow_to_rgb(flow: &FlowField) -> (usize, usize, Vec<u8>) {
    let (h, w) = (flow.height(), flow.width());
    let max_mag = flow
        .dx()
        .iter()
        .zip(flow.dy())
        .map(|(x, y)| (x * x + y * y).sqrt())
        .fold(0.0_f64, f64::max);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (dx, dy) in flow.dx().iter().zip(flow.dy()) {
        let mag = (dx * dx + dy * dy).sqrt();
        let sat = if max_mag > 0.0 { mag / max_mag } else { 0.0 };
        let hue = dy.atan2(*dx) / (2.0 * std::f64::consts::PI);
        rgb.extend_from_slice(&hsv_to_rgb(hue, sat, 1.0));
    }
    (h, w, rgb)
}

/// Integer nearest-neighbor upscale of an RGB raster.
pub fn upscale_rgb(h: usize, w: usize, rgb: &[u8], factor: usize) -> Result<(usize, usize, Vec<u8>)> {
    if rgb.len() != h * w * 3 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rgb bytes", h * w * 3),
            got: format!("{}", rgb.len()),
        });
    }
    if factor == 0 {
        return Err(Error::Config("upscale factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0u8; oh * ow * 3];
    for y in 0..oh {
        for x in 0..ow {
            let src = ((y / factor) * w + x / factor) * 3;
            let dst = (y * ow + x) * 3;
            out[dst..dst + 3].copy_from_slice(&rgb[src..src + 3]);
        }
    }
    Ok((oh, ow, out))
}

/// One principal component of a channel covariance.
#[derive(Clone, Debug)]
pub struct Component {
    /// Unit direction in channel space.
    pub direction: Vec<f64>,
    /// Variance captured (the eigenvalue).
    pub variance: f64,
}

const POWER_ITERATIONS: usize = 300;

/// Fix the sign so the largest-magnitude coordinate is positive, making the
/// eigenvector unique and runs reproducible.
fn canonical_sign(v: &mut [f64]) {
    let lead = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    if v[lead] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Leading principal components of the channel covariance by power
/// iteration with deflation. Deterministic: fixed start vector, fixed
/// iteration count, canonical sign.
pub fn pca_components(field: &FeatureField, n_components: usize) -> Result<Vec<Component>> {
    let (c, h, w) = field.shape();
    let n = h * w;
    if n_components == 0 || n_components > c {
        return Err(Error::Config(format!(
            "n_components must be in 1..={c}, got {n_components}"
        )));
    }
    if !field.all_finite() {
        return Err(Error::NonFinite("feature field for PCA".into()));
    }

    // Channel means, then covariance S = X X^T / n over centered pixels.
    let means: Vec<f64> = (0..c)
        .map(|ch| field.values()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let (a, b) = (&field.values()[i * n..(i + 1) * n], &field.values()[j * n..(j + 1) * n]);
            let s: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - means[i]) * (y - means[j]))
                .sum();
            cov[i * c + j] = s / n as f64;
            cov[j * c + i] = s / n as f64;
        }
    }

    let mut components = Vec::with_capacity(n_components);
    for k in 0..n_components {
        // Fixed, slightly asymmetric start so no eigenvector is orthogonal
        // to it by accident of symmetry.
        let mut v: Vec<f64> = (0..c).map(|i| 1.0 + (i + k) as f64 * 0.01).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let mut sv = vec![0.0; c];
            for i in 0..c {
                sv[i] = (0..c).map(|j| cov[i * c + j] * v[j]).sum();
            }
            lambda = normalize(&mut sv);
            if lambda == 0.0 {
                // Nothing left: the covariance is (numerically) zero on the
                // remaining subspace. Keep the current direction.
                lambda = 0.0;
                break;
            }
            v = sv;
        }
        canonical_sign(&mut v);
        // Deflate: remove the found component from the covariance.
        for i in 0..c {
            for j in 0..c {
                cov[i * c + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(Component { direction: v, variance: lambda.max(0.0) });
    }
    Ok(components)
}

/// Project every pixel's (centered) channel vector onto the leading
/// components; output has one channel per component.
pub fn pca_project(field: &FeatureField, n_components: usize) -> Result<FeatureField> {
    let (c, h, w) = field.shape();
    let n = h * w;
    let comps = pca_components(field, n_components)?;
    let means: Vec<f64> = (0..c)
        .map(|ch| field.values()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let mut out = FeatureField::zeros(n_components, h, w);
    for (k, comp) in comps.iter().enumerate() {
        for p in 0..n {
            let score: f64 = (0..c)
                .map(|ch| (field.values()[ch * n + p] - means[ch]) * comp.direction[ch])
                .sum();
            out.values_mut()[k * n + p] = score;
        }
    }
    Ok(out)
}

/// Three-component PCA projection rendered as RGB, each channel min-max
/// normalized independently (a constant channel renders mid-gray).
pub fn pca_to_rgb(field: &FeatureField) -> Result<(usize, usize, Vec<u8>)> {
    let proj = pca_project(field, 3.min(field.channels()))?;
    let (pc, h, w) = proj.shape();
    let n = h * w;
    let mut rgb = vec![0u8; n * 3];
    for k in 0..3 {
        // Fewer than three channels: repeat the last component.
        let src = k.min(pc - 1);
        let vals = &proj.values()[src * n..(src + 1) * n];
        let (lo, hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        for p in 0..n {
            let byte = if hi > lo {
                (((vals[p] - lo) / (hi - lo)) * 255.0).round() as u8
            } else {
                128
            };
            rgb[p * 3 + k] = byte;
        }
    }
    Ok((h, w, rgb))
}
