use serde::{Deserialize, Serialize};

use super::FieldQuery;
use crate::autodiff::{Graph, Tensor, Var};
use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Sphere {
    /// Closed ball: boundary points are inside.
    pub fn contains(&self, x: Vec3) -> bool {
        (x - self.center).norm() <= self.radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticShape {
    Empty,
    /// Infinite slab `z_min <= z <= z_max`.
    UniformSlab {
        z_min: f64,
        z_max: f64,
    },
    SolidSphere {
        sphere: Sphere,
    },
    /// The second sphere is painted `second_color`.
    TwoSphere {
        first: Sphere,
        second: Sphere,
        second_color: [f64; 3],
    },
    /// Spherical shell `|‖x - center‖ - radius| <= thickness / 2`.
    Shell {
        center: Vec3,
        radius: f64,
        thickness: f64,
    },
}

/// Piecewise-constant field with exact indicator evaluation: density is
/// either 0 or `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticField {
    pub shape: AnalyticShape,
    pub sigma: f64,
    pub color: [f64; 3],
}

impl AnalyticField {
    pub fn empty() -> Self {
        Self {
            shape: AnalyticShape::Empty,
            sigma: 0.0,
            color: [0.0; 3],
        }
    }

    pub fn sphere(center: Vec3, radius: f64, sigma: f64, color: [f64; 3]) -> Self {
        Self {
            shape: AnalyticShape::SolidSphere {
                sphere: Sphere { center, radius },
            },
            sigma,
            color,
        }
    }

    /// Two disjoint spheres of different size and color, placed off center.
    pub fn two_sphere(sigma: f64, color: [f64; 3], second_color: [f64; 3]) -> Self {
        Self {
            shape: AnalyticShape::TwoSphere {
                first: Sphere {
                    center: Vec3::new(-0.5, 0.0, 0.0),
                    radius: 0.5,
                },
                second: Sphere {
                    center: Vec3::new(0.5, 0.3, 0.2),
                    radius: 0.4,
                },
                second_color,
            },
            sigma,
            color,
        }
    }

    pub fn slab(z_min: f64, z_max: f64, sigma: f64, color: [f64; 3]) -> Self {
        Self {
            shape: AnalyticShape::UniformSlab { z_min, z_max },
            sigma,
            color,
        }
    }

    pub fn eval(&self, x: Vec3) -> (f64, [f64; 3]) {
        let inside = |hit: bool| if hit { self.sigma } else { 0.0 };
        match self.shape {
            AnalyticShape::Empty => (0.0, self.color),
            AnalyticShape::UniformSlab { z_min, z_max } => {
                (inside(x.z() >= z_min && x.z() <= z_max), self.color)
            }
            AnalyticShape::SolidSphere { sphere } => (inside(sphere.contains(x)), self.color),
            AnalyticShape::TwoSphere {
                first,
                second,
                second_color,
            } => {
                if first.contains(x) {
                    (self.sigma, self.color)
                } else if second.contains(x) {
                    (self.sigma, second_color)
                } else {
                    (0.0, self.color)
                }
            }
            AnalyticShape::Shell {
                center,
                radius,
                thickness,
            } => {
                let r = (x - center).norm();
                (inside((r - radius).abs() <= 0.5 * thickness), self.color)
            }
        }
    }
}

impl FieldQuery for AnalyticField {
    fn query(&self, g: &mut Graph, positions: Var, _directions: Var) -> (Var, Var) {
        let pts = g.value(positions).clone();
        let n = pts.shape()[0];
        let mut sigma = Vec::with_capacity(n);
        let mut rgb = Vec::with_capacity(3 * n);
        for i in 0..n {
            let r = pts.row(i);
            let (s, c) = self.eval(Vec3([r[0], r[1], r[2]]));
            sigma.push(s);
            rgb.extend_from_slice(&c);
        }
        (
            g.constant(Tensor::new([n], sigma)),
            g.constant(Tensor::new([n, 3], rgb)),
        )
    }
}
