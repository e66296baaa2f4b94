//! Synthetic single-object scenes: shape outlines in normalized coordinates,
//! pixel-center rasterization, and textured rendering with optional
//! look-alike distractor patches that make the object boundary ambiguous.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::morphology::BinaryMask;

/// Geometry of one object, in normalized [0,1] coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse { center: [f64; 2], radii: [f64; 2], rotation: f64 },
    ConvexPolygon { vertices: Vec<[f64; 2]> },
    StarPolygon { center: [f64; 2], points: usize, r_outer: f64, r_inner: f64, rotation: f64 },
    UnionOfTwo { first: Box<ShapeKind>, second: Box<ShapeKind> },
}

/// A shape plus its rendering texture.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Mean intensity inside the object.
    pub fg_level: f64,
    /// Mean intensity of the background.
    pub bg_level: f64,
    /// Per-pixel Gaussian noise sigma.
    pub noise_sigma: f64,
    /// Optional background patch with near-foreground intensity.
    pub distractor: Option<Distractor>,
}

/// An elliptical background patch rendered at its own intensity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Distractor {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub level: f64,
}

/// Even-odd rasterization of a polygon given in pixel coordinates: a pixel is
/// set iff its center (x+0.5, y+0.5) is inside the outline.
pub fn rasterize_polygon(vertices: &[[f64; 2]], grid: usize) -> Result<BinaryMask> {
    rasterize_outline(vertices, grid, grid)
}

/// [`rasterize_polygon`] for a non-square raster.
pub fn rasterize_outline(vertices: &[[f64; 2]], height: usize, width: usize) -> Result<BinaryMask> {
    if vertices.len() < 3 {
        return Err(Error::DegeneratePolygon(format!("{} vertices", vertices.len())));
    }
    // Shoelace area; an outline with zero area selects nothing.
    let mut area = 0.0;
    for i in 0..vertices.len() {
        let [x0, y0] = vertices[i];
        let [x1, y1] = vertices[(i + 1) % vertices.len()];
        area += x0 * y1 - x1 * y0;
    }
    if area.abs() < 1e-12 {
        return Err(Error::DegeneratePolygon("zero area".into()));
    }
    Ok(BinaryMask::from_fn(height, width, |y, x| {
        point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, vertices)
    }))
}

// Even-odd crossing test.
fn point_in_polygon(px: f64, py: f64, vertices: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = vertices.len() - 1;
    for i in 0..vertices.len() {
        let [xi, yi] = vertices[i];
        let [xj, yj] = vertices[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn ellipse_mask(grid: usize, center: [f64; 2], radii: [f64; 2], rotation: f64) -> BinaryMask {
    let g = grid as f64;
    let (s, c) = rotation.sin_cos();
    BinaryMask::from_fn(grid, grid, |y, x| {
        let px = (x as f64 + 0.5) / g - center[0];
        let py = (y as f64 + 0.5) / g - center[1];
        let u = (c * px + s * py) / radii[0];
        let v = (-s * px + c * py) / radii[1];
        u * u + v * v <= 1.0
    })
}

fn star_vertices(center: [f64; 2], points: usize, r_outer: f64, r_inner: f64, rotation: f64) -> Vec<[f64; 2]> {
    let mut verts = Vec::with_capacity(2 * points);
    for i in 0..2 * points {
        let r = if i % 2 == 0 { r_outer } else { r_inner };
        let a = rotation + std::f64::consts::PI * i as f64 / points as f64;
        verts.push([center[0] + r * a.cos(), center[1] + r * a.sin()]);
    }
    verts
}

fn scale_to_pixels(vertices: &[[f64; 2]], grid: usize) -> Vec<[f64; 2]> {
    let g = grid as f64;
    vertices.iter().map(|&[x, y]| [x * g, y * g]).collect()
}

/// Rasterize a shape onto a grid.
pub fn shape_mask(kind: &ShapeKind, grid: usize) -> Result<BinaryMask> {
    match kind {
        ShapeKind::Ellipse { center, radii, rotation } => Ok(ellipse_mask(grid, *center, *radii, *rotation)),
        ShapeKind::ConvexPolygon { vertices } => rasterize_polygon(&scale_to_pixels(vertices, grid), grid),
        ShapeKind::StarPolygon { center, points, r_outer, r_inner, rotation } => {
            let verts = star_vertices(*center, *points, *r_outer, *r_inner, *rotation);
            rasterize_polygon(&scale_to_pixels(&verts, grid), grid)
        }
        ShapeKind::UnionOfTwo { first, second } => {
            Ok(shape_mask(first, grid)?.union(&shape_mask(second, grid)?))
        }
    }
}

/// Render the image for a spec: two intensity levels, then the distractor
/// patch over the background, then Gaussian noise. With zero noise and no
/// distractor the image is exactly two-level on the mask support.
pub fn render(spec: &ShapeSpec, grid: usize, rng: &mut impl Rng) -> Result<(FeatureField, BinaryMask)> {
    let mask = shape_mask(&spec.kind, grid)?;
    let mut values: Vec<f64> = mask.bits().iter().map(|&b| if b != 0 { spec.fg_level } else { spec.bg_level }).collect();
    if let Some(d) = &spec.distractor {
        let patch = ellipse_mask(grid, d.center, d.radii, 0.0);
        for (i, (&m, &p)) in mask.bits().iter().zip(patch.bits()).enumerate() {
            if m == 0 && p != 0 {
                values[i] = d.level;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
        for v in values.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok((FeatureField::from_vec(1, grid, grid, values)?, mask))
}

/// Draw a random shape spec for one sample.
pub fn sample_spec(rng: &mut impl Rng, cfg: &super::DataConfig) -> ShapeSpec {
    let kind = sample_kind(rng);
    let distractor = if rng.gen_bool(cfg.distractor_prob) {
        // A small patch near one corner area, close to foreground intensity.
        let center = [rng.gen_range(0.12..0.88), rng.gen_range(0.12..0.88)];
        let radii = [rng.gen_range(0.05..0.11), rng.gen_range(0.05..0.11)];
        let level = cfg.fg_level + rng.gen_range(-0.06..0.06);
        Some(Distractor { center, radii, level })
    } else {
        None
    };
    ShapeSpec {
        kind,
        fg_level: cfg.fg_level,
        bg_level: cfg.bg_level,
        noise_sigma: cfg.noise_sigma,
        distractor,
    }
}

fn sample_kind(rng: &mut impl Rng) -> ShapeKind {
    match rng.gen_range(0..4) {
        0 => sample_ellipse(rng, 0.14, 0.30),
        1 => sample_convex(rng),
        2 => sample_star(rng),
        _ => {
            // Two overlapping blobs offset around a shared center.
            let first = sample_ellipse(rng, 0.10, 0.22);
            let second = sample_ellipse(rng, 0.10, 0.22);
            ShapeKind::UnionOfTwo { first: Box::new(first), second: Box::new(second) }
        }
    }
}

fn sample_ellipse(rng: &mut impl Rng, r_lo: f64, r_hi: f64) -> ShapeKind {
    ShapeKind::Ellipse {
        center: [rng.gen_range(0.34..0.66), rng.gen_range(0.34..0.66)],
        radii: [rng.gen_range(r_lo..r_hi), rng.gen_range(r_lo..r_hi)],
        rotation: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

fn sample_convex(rng: &mut impl Rng) -> ShapeKind {
    let center = [rng.gen_range(0.36..0.64), rng.gen_range(0.36..0.64)];
    let n = rng.gen_range(5..=8);
    let base = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut vertices = Vec::with_capacity(n);
    for i in 0..n {
        // Sorted angles keep the polygon simple and near-convex.
        let a = base + std::f64::consts::TAU * (i as f64 + rng.gen_range(0.0..0.6)) / n as f64;
        let r = rng.gen_range(0.14..0.30);
        vertices.push([center[0] + r * a.cos(), center[1] + r * a.sin()]);
    }
    ShapeKind::ConvexPolygon { vertices }
}

fn sample_star(rng: &mut impl Rng) -> ShapeKind {
    ShapeKind::StarPolygon {
        center: [rng.gen_range(0.38..0.62), rng.gen_range(0.38..0.62)],
        points: rng.gen_range(5..=7),
        r_outer: rng.gen_range(0.22..0.32),
        r_inner: rng.gen_range(0.36..0.60) * 0.32,
        rotation: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}
