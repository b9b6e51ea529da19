//! Analytic primitives with rigid trajectories, procedural albedo, and ray intersection.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rgb;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane through the primitive's origin. Points behind the normal are solid.
    Plane {
        normal: [f64; 3],
        u_axis: [f64; 3],
    },
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box given by half extents.
    Box {
        half_extents: [f64; 3],
    },
}

/// Rigid motion: translation linear in time plus spin about the world y axis
/// through the primitive origin. Units are meters and radians per frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub velocity: [f64; 3],
    pub spin: f64,
}

impl Trajectory {
    pub fn is_static(&self) -> bool {
        self.velocity == [0.0; 3] && self.spin == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    /// Position at t = 0.
    pub origin: [f64; 3],
    pub trajectory: Trajectory,
    /// Index into [`TEXTURES`].
    pub texture: usize,
    /// Checker phase offset in periods, drawn from the scene seed.
    pub phase: [f64; 2],
}

/// Procedural albedo: soft checkerboard between two colors plus a linear gradient.
#[derive(Clone, Copy, Debug)]
pub struct Texture {
    pub a: Rgb,
    pub b: Rgb,
    /// Checker period in meters (one light and one dark square).
    pub period: f64,
    /// Color added per meter along the first texture axis.
    pub gradient: Rgb,
}

pub const TEXTURES: [Texture; 4] = [
    Texture {
        a: [0.92, 0.78, 0.52],
        b: [0.20, 0.32, 0.62],
        period: 1.0,
        gradient: [0.04, -0.03, 0.02],
    },
    Texture {
        a: [0.85, 0.30, 0.25],
        b: [0.95, 0.90, 0.35],
        period: 0.5,
        gradient: [-0.05, 0.05, 0.05],
    },
    Texture {
        a: [0.25, 0.70, 0.40],
        b: [0.85, 0.55, 0.80],
        period: 0.4,
        gradient: [0.06, 0.0, -0.06],
    },
    Texture {
        a: [0.80, 0.80, 0.82],
        b: [0.35, 0.30, 0.28],
        period: 0.8,
        gradient: [0.02, 0.03, 0.04],
    },
];

/// Soft checker sharpness; lower values blur square edges.
const CHECKER_SHARPNESS: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct Hit {
    pub prim: usize,
    /// Ray parameter; equals camera-space depth for rays from [`super::Camera::ray`].
    pub depth: f64,
    pub point: Vector3<f64>,
    /// Point in the primitive's body frame.
    pub local: Vector3<f64>,
    pub normal: Vector3<f64>,
}

const RAY_EPS: f64 = 1e-9;

impl Primitive {
    pub fn validate(&self, idx: usize) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidSpec(format!("primitive {idx}: {reason}")));
        if self.texture >= TEXTURES.len() {
            return bad(format!("unknown texture id {}", self.texture));
        }
        let finite = self
            .origin
            .iter()
            .chain(&self.trajectory.velocity)
            .all(|v| v.is_finite())
            && self.trajectory.spin.is_finite();
        if !finite {
            return bad("non-finite origin or trajectory".into());
        }
        match &self.shape {
            Shape::Sphere { radius } => {
                if !(*radius > 0.0) {
                    return bad(format!("degenerate sphere radius {radius}"));
                }
            }
            Shape::Box { half_extents } => {
                if !half_extents.iter().all(|h| *h > 0.0) {
                    return bad(format!("degenerate box extents {half_extents:?}"));
                }
                if self.trajectory.spin != 0.0 {
                    return bad("boxes stay axis-aligned and cannot spin".into());
                }
            }
            Shape::Plane { normal, u_axis } => {
                let n = Vector3::from(*normal);
                let u = Vector3::from(*u_axis);
                if !((n.norm() - 1.0).abs() < 1e-9
                    && (u.norm() - 1.0).abs() < 1e-9
                    && n.dot(&u).abs() < 1e-9)
                {
                    return bad("plane needs a unit normal and an orthogonal unit u axis".into());
                }
                if self.trajectory.spin != 0.0 {
                    return bad("planes cannot spin".into());
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn position(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.origin) + Vector3::from(self.trajectory.velocity) * t
    }

    #[inline]
    fn rotation(&self, t: f64) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::y_axis(), self.trajectory.spin * t)
    }

    /// Body-frame coordinates of world point `p` at time `t`.
    #[inline]
    pub fn to_local(&self, p: &Vector3<f64>, t: f64) -> Vector3<f64> {
        let d = p - self.position(t);
        if self.trajectory.spin == 0.0 {
            d
        } else {
            self.rotation(t).inverse() * d
        }
    }

    /// World position at time `t` of a body-frame point.
    #[inline]
    pub fn to_world(&self, local: &Vector3<f64>, t: f64) -> Vector3<f64> {
        if self.trajectory.spin == 0.0 {
            self.position(t) + local
        } else {
            self.position(t) + self.rotation(t) * local
        }
    }

    /// Nearest intersection parameter `s > 0` of `origin + s * dir` with this primitive at time `t`.
    pub fn intersect(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t: f64,
    ) -> Option<(f64, Vector3<f64>)> {
        let c = self.position(t);
        match &self.shape {
            Shape::Plane { normal, .. } => {
                let n = Vector3::from(*normal);
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = n.dot(&(c - origin)) / denom;
                (s > RAY_EPS).then_some((s, n))
            }
            Shape::Sphere { radius } => {
                let oc = origin - c;
                let a = dir.dot(dir);
                let b = oc.dot(dir);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // Stable root pair.
                let q = if b > 0.0 { -(b + sq) } else { -b + sq };
                if q == 0.0 {
                    return None;
                }
                let (r0, r1) = (q / a, cc / q);
                let (lo, hi) = if r0 < r1 { (r0, r1) } else { (r1, r0) };
                let s = if lo > RAY_EPS {
                    lo
                } else if hi > RAY_EPS {
                    hi
                } else {
                    return None;
                };
                let p = origin + dir * s;
                Some((s, (p - c) / *radius))
            }
            Shape::Box { half_extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                let mut axis_far = 0;
                for k in 0..3 {
                    let lo = c[k] - half_extents[k];
                    let hi = c[k] + half_extents[k];
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < lo || origin[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (lo - origin[k]) / dir[k];
                    let mut t1 = (hi - origin[k]) / dir[k];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis_near = k;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        axis_far = k;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (s, axis) = if t_near > RAY_EPS {
                    (t_near, axis_near)
                } else if t_far > RAY_EPS {
                    (t_far, axis_far)
                } else {
                    return None;
                };
                let p = origin + dir * s;
                let mut n = Vector3::zeros();
                n[axis] = (p[axis] - c[axis]).signum();
                Some((s, n))
            }
        }
    }

    /// Signed distance at time `t` (negative inside).
    pub fn sdf(&self, p: &Vector3<f64>, t: f64) -> f64 {
        let d = p - self.position(t);
        match &self.shape {
            Shape::Plane { normal, .. } => Vector3::from(*normal).dot(&d),
            Shape::Sphere { radius } => d.norm() - radius,
            Shape::Box { half_extents } => {
                let q = d.abs() - Vector3::from(*half_extents);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
        }
    }

    /// Albedo at a body-frame point.
    pub fn albedo(&self, local: &Vector3<f64>) -> Rgb {
        let tex = &TEXTURES[self.texture];
        // (u, v) texture coordinates in meters; the gradient runs along the last one.
        let (u, v, g) = match &self.shape {
            Shape::Plane { normal, u_axis } => {
                let n = Vector3::from(*normal);
                let ua = Vector3::from(*u_axis);
                let va = n.cross(&ua);
                let u = local.dot(&ua);
                (u, local.dot(&va), u)
            }
            Shape::Sphere { radius } => {
                // Whole number of periods around the equator keeps the seam invisible.
                let circumference = 2.0 * PI * radius;
                let periods = (circumference / tex.period).round().max(1.0);
                let lon = local.z.atan2(local.x);
                let lat = (local.y / radius).clamp(-1.0, 1.0).asin() * radius;
                (
                    lon * radius * tex.period * periods / circumference,
                    lat,
                    lat,
                )
            }
            Shape::Box { half_extents } => {
                let h = Vector3::from(*half_extents);
                let rel = local.component_div(&h).abs();
                if rel.x >= rel.y && rel.x >= rel.z {
                    (local.z, local.y, local.y)
                } else if rel.y >= rel.z {
                    (local.x, local.z, local.x)
                } else {
                    (local.x, local.y, local.y)
                }
            }
        };
        let cu = u / tex.period * 2.0 + self.phase[0];
        let cv = v / tex.period * 2.0 + self.phase[1];
        let s = (PI * cu).sin() * (PI * cv).sin();
        let m = 0.5 + 0.5 * (CHECKER_SHARPNESS * s).tanh();
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = (tex.a[k] * (1.0 - m) + tex.b[k] * m + tex.gradient[k] * g).clamp(0.0, 1.0);
        }
        out
    }
}

/// Direction toward the single directional light.
pub fn light_dir() -> Vector3<f64> {
    Vector3::new(0.4, 0.8, 0.6).normalize()
}

pub const AMBIENT: f64 = 0.6;
pub const DIFFUSE: f64 = 0.4;

pub fn shade(albedo: Rgb, normal: &Vector3<f64>) -> Rgb {
    let lambert = normal.dot(&light_dir()).max(0.0);
    albedo.map(|a| (a * (AMBIENT + DIFFUSE * lambert)).clamp(0.0, 1.0))
}

/// Nearest hit over all primitives at time `t`. Ties resolve to the lowest index.
pub fn raycast(
    prims: &[Primitive],
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t: f64,
) -> Option<Hit> {
    let mut best: Option<(usize, f64, Vector3<f64>)> = None;
    for (i, p) in prims.iter().enumerate() {
        if let Some((s, n)) = p.intersect(origin, dir, t) {
            if best.as_ref().is_none_or(|b| s < b.1) {
                best = Some((i, s, n));
            }
        }
    }
    best.map(|(i, s, mut n)| {
        let point = origin + dir * s;
        // Two-sided planes: face the viewer.
        if n.dot(dir) > 0.0 {
            if let Shape::Plane { .. } = prims[i].shape {
                n = -n;
            }
        }
        Hit {
            prim: i,
            depth: s,
            point,
            local: prims[i].to_local(&point, t),
            normal: n,
        }
    })
}
