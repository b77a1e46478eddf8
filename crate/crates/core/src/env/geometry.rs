//! Capsules, spheres and axis-aligned boxes with analytic distances.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box.
    Box { half_extents: [f64; 3] },
}

impl Shape {
    /// Distance from `p` to the solid placed at `center` (0 inside).
    pub fn distance(&self, center: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Sphere { radius } => ((p - center).norm() - radius).max(0.0),
            Shape::Box { half_extents } => {
                let d = p - center;
                let mut sq = 0.0;
                for i in 0..3 {
                    let excess = d[i].abs() - half_extents[i];
                    if excess > 0.0 {
                        sq += excess * excess;
                    }
                }
                sq.sqrt()
            }
        }
    }

    pub fn contains(&self, center: &Vector3<f64>, p: &Vector3<f64>) -> bool {
        match *self {
            Shape::Sphere { radius } => (p - center).norm() <= radius,
            Shape::Box { half_extents } => (0..3).all(|i| (p[i] - center[i]).abs() <= half_extents[i]),
        }
    }

    /// Uniform sample on the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, center: &Vector3<f64>, rng: &mut R) -> Vector3<f64> {
        match *self {
            Shape::Sphere { radius } => {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let n = v.norm();
                if n < 1e-12 {
                    center + Vector3::new(radius, 0.0, 0.0)
                } else {
                    center + v * (radius / n)
                }
            }
            Shape::Box { half_extents: h } => {
                // Pick a face with probability proportional to its area.
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total = 2.0 * (areas[0] + areas[1] + areas[2]);
                let mut u = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if u < 2.0 * a {
                        axis = i;
                        break;
                    }
                    u -= 2.0 * a;
                }
                let mut p = Vector3::zeros();
                for i in 0..3 {
                    p[i] = if i == axis {
                        if rng.random::<bool>() {
                            h[i]
                        } else {
                            -h[i]
                        }
                    } else {
                        rng.random_range(-h[i]..=h[i])
                    };
                }
                center + p
            }
        }
    }
}

/// A segment swept by a ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

pub fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 < 1e-24 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    };
    (p - (a + ab * t)).norm()
}

impl Capsule {
    /// Separation between the capsule surface and a shape (negative or zero
    /// when they touch).
    pub fn clearance(&self, shape: &Shape, center: &Vector3<f64>) -> f64 {
        let axis = match *shape {
            Shape::Sphere { radius } => point_segment_distance(center, &self.a, &self.b) - radius,
            Shape::Box { .. } => segment_box_distance(&self.a, &self.b, shape, center),
        };
        axis - self.radius
    }

    pub fn intersects(&self, shape: &Shape, center: &Vector3<f64>) -> bool {
        self.clearance(shape, center) <= 0.0
    }
}

/// Distance from a segment to a box. The distance to a convex set is
/// convex along the segment, so a golden-section search over the segment
/// parameter converges to the minimum.
fn segment_box_distance(a: &Vector3<f64>, b: &Vector3<f64>, shape: &Shape, center: &Vector3<f64>) -> f64 {
    let f = |t: f64| shape.distance(center, &(a + (b - a) * t));
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
        if f1 == 0.0 || f2 == 0.0 {
            return 0.0;
        }
    }
    f(0.0).min(f(1.0)).min(f1).min(f2)
}
