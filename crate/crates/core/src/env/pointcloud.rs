use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::Shape;
use crate::error::{ensure, Result};

/// Greedy farthest-point subset of size `p`. A random seed point picks the
/// first selection (the point farthest from it); every later selection is
/// the point farthest from those already chosen. Inputs with at most `p`
/// points are returned unchanged.
pub fn farthest_point_sample<R: Rng + ?Sized>(
    points: &[Vector3<f64>],
    p: usize,
    rng: &mut R,
) -> Result<Vec<Vector3<f64>>> {
    ensure!(!points.is_empty(), "farthest point sampling needs at least one point");
    if points.len() <= p {
        return Ok(points.to_vec());
    }
    let mut selected = Vec::with_capacity(p);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let seed = points[rng.random_range(0..points.len())];
    let mut next = farthest_from(points, &seed);
    for _ in 0..p {
        let s = points[next];
        selected.push(s);
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, q) in points.iter().enumerate() {
            let d = (q - s).norm_squared();
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        next = best.1;
    }
    Ok(selected)
}

fn farthest_from(points: &[Vector3<f64>], s: &Vector3<f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, q) in points.iter().enumerate() {
        let d = (q - s).norm_squared();
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn surface_area(shape: &Shape) -> f64 {
    match *shape {
        Shape::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
        Shape::Box { half_extents: h } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
    }
}

/// Noisy surface samples of the given solids, `total` points split by area.
/// The noise is Gaussian per coordinate, redrawn when its norm exceeds
/// three standard deviations.
pub(crate) fn sample_surfaces<R: Rng + ?Sized>(
    solids: &[(Shape, Vector3<f64>)],
    total: usize,
    noise_std: f64,
    rng: &mut R,
) -> Vec<Vector3<f64>> {
    let areas: Vec<f64> = solids.iter().map(|(s, _)| surface_area(s)).collect();
    let sum: f64 = areas.iter().sum();
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite noise scale");
    let mut out = Vec::with_capacity(total + 8 * solids.len());
    for ((shape, center), a) in solids.iter().zip(&areas) {
        let n = ((total as f64 * a / sum).round() as usize).max(8);
        for _ in 0..n {
            let mut p = shape.sample_surface(center, rng);
            if noise_std > 0.0 {
                let e = loop {
                    let e = Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                    if e.norm() <= 3.0 * noise_std {
                        break e;
                    }
                };
                p += e;
            }
            out.push(p);
        }
    }
    out
}

/// Resolution of stored point coordinates (0.1 mm).
pub const POINT_QUANTUM: f64 = 1e-4;

pub fn quantize(v: f64) -> i32 {
    (v / POINT_QUANTUM).round() as i32
}

pub fn dequantize(q: i32) -> f64 {
    q as f64 * POINT_QUANTUM
}
