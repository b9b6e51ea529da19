//! Synthetic 4D scenes: a rig of fixed pinhole cameras observing rigidly moving
//! textured primitives, rendered with exact depth and exact optical flow.

mod camera;
mod io;
mod primitive;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use camera::Camera;
pub(crate) use io::frame_name;
pub use io::{load_scene, parse_manifest, save_scene, MANIFEST_FILE};
pub use primitive::{raycast, shade, Hit, Primitive, Shape, Texture, Trajectory, TEXTURES};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::raster::{DepthMap, Image, Raster, Rgb};

pub const MANIFEST_VERSION: &str = "p4d-scene/1";

/// Depth agreement required for a point to count as visible in analytic flow.
pub const OCCLUSION_TOL: f64 = 1e-4;
/// Upper bound on projected per-frame motion of any primitive.
pub const MAX_MOTION_PX: f64 = 6.0;

pub const SKY: Rgb = [0.62, 0.74, 0.90];

/// A rendered sample of the scene at one (view, time).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: Image,
    pub depth: DepthMap,
    pub view_id: usize,
    pub time_index: usize,
}

/// Primitive description without seed-derived state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveSpec {
    #[serde(flatten)]
    pub shape: Shape,
    pub origin: [f64; 3],
    #[serde(default)]
    pub trajectory: Trajectory,
    #[serde(default)]
    pub texture: usize,
}

/// Cameras evenly spaced on a horizontal arc around `target`, all looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub radius: f64,
    pub arc_deg: f64,
    pub elevation: f64,
    pub fov_deg: f64,
    pub target: [f64; 3],
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            radius: 4.0,
            arc_deg: 60.0,
            elevation: 0.6,
            fov_deg: 55.0,
            target: [0.0, -0.2, -0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub views: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub primitives: Vec<PrimitiveSpec>,
    #[serde(default)]
    pub rig: RigSpec,
    pub seed: u64,
}

fn wall() -> PrimitiveSpec {
    PrimitiveSpec {
        shape: Shape::Plane {
            normal: [0.0, 0.0, 1.0],
            u_axis: [1.0, 0.0, 0.0],
        },
        origin: [0.0, 0.0, -1.5],
        trajectory: Trajectory::default(),
        texture: 0,
    }
}

fn floor() -> PrimitiveSpec {
    PrimitiveSpec {
        shape: Shape::Plane {
            normal: [0.0, 1.0, 0.0],
            u_axis: [1.0, 0.0, 0.0],
        },
        origin: [0.0, -0.8, 0.0],
        trajectory: Trajectory::default(),
        texture: 3,
    }
}

fn moving_sphere() -> PrimitiveSpec {
    PrimitiveSpec {
        shape: Shape::Sphere { radius: 0.45 },
        origin: [-0.9, -0.1, 0.3],
        trajectory: Trajectory {
            velocity: [0.036, 0.0, 0.0],
            spin: 0.04,
        },
        texture: 1,
    }
}

fn still_box() -> PrimitiveSpec {
    PrimitiveSpec {
        shape: Shape::Box {
            half_extents: [0.3, 0.3, 0.3],
        },
        origin: [0.6, -0.5, -0.6],
        trajectory: Trajectory::default(),
        texture: 2,
    }
}

impl SceneSpec {
    /// Five cameras, 51 frames at 64×64: textured wall and floor, a static box,
    /// and a spinning sphere translating across it.
    pub fn default_scene() -> Self {
        Self {
            views: 5,
            frames: 51,
            width: 64,
            height: 64,
            primitives: vec![wall(), floor(), still_box(), moving_sphere()],
            rig: RigSpec::default(),
            seed: 3,
        }
    }

    /// Same layout as [`default_scene`](Self::default_scene) with custom size.
    pub fn with_size(views: usize, frames: usize, width: usize, height: usize, seed: u64) -> Self {
        Self {
            views,
            frames,
            width,
            height,
            seed,
            ..Self::default_scene()
        }
    }

    /// A single textured wall; nothing moves.
    pub fn static_plane(
        views: usize,
        frames: usize,
        width: usize,
        height: usize,
        seed: u64,
    ) -> Self {
        Self {
            views,
            frames,
            width,
            height,
            primitives: vec![wall()],
            rig: RigSpec::default(),
            seed,
        }
    }

    /// Wall, floor and box with no motion.
    pub fn static_scene(
        views: usize,
        frames: usize,
        width: usize,
        height: usize,
        seed: u64,
    ) -> Self {
        Self {
            views,
            frames,
            width,
            height,
            primitives: vec![wall(), floor(), still_box()],
            rig: RigSpec::default(),
            seed,
        }
    }

    /// Wall plus a sphere translating along +x without spin.
    pub fn translating_sphere(
        views: usize,
        frames: usize,
        width: usize,
        height: usize,
        seed: u64,
    ) -> Self {
        let mut s = moving_sphere();
        s.trajectory.spin = 0.0;
        Self {
            views,
            frames,
            width,
            height,
            primitives: vec![wall(), s],
            rig: RigSpec::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::InvalidSpec("need at least one view".into()));
        }
        if self.frames < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least two frames, got {}",
                self.frames
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidSpec(format!(
                "resolution {}x{} below 16x16",
                self.width, self.height
            )));
        }
        if self.primitives.is_empty() {
            return Err(Error::InvalidSpec("scene has no primitives".into()));
        }
        let r = &self.rig;
        if !(r.radius > 0.0 && r.fov_deg > 0.0 && r.fov_deg < 180.0 && r.arc_deg >= 0.0) {
            return Err(Error::InvalidSpec("degenerate camera rig".into()));
        }
        Ok(())
    }

    fn cameras(&self) -> Vec<Camera> {
        let target = Vector3::from(self.rig.target);
        (0..self.views)
            .map(|i| {
                let a = if self.views == 1 {
                    0.0
                } else {
                    (-self.rig.arc_deg / 2.0
                        + self.rig.arc_deg * i as f64 / (self.views - 1) as f64)
                        .to_radians()
                };
                let eye = target
                    + Vector3::new(
                        self.rig.radius * a.sin(),
                        self.rig.elevation,
                        self.rig.radius * a.cos(),
                    );
                Camera::look_at(eye, target, self.rig.fov_deg, self.width, self.height)
            })
            .collect()
    }

    /// Resolves cameras and seed-dependent texture phases into a manifest.
    pub fn to_manifest(&self) -> Result<SceneManifest> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let primitives = self
            .primitives
            .iter()
            .map(|p| Primitive {
                shape: p.shape.clone(),
                origin: p.origin,
                trajectory: p.trajectory.clone(),
                texture: p.texture,
                phase: [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)],
            })
            .collect();
        let manifest = SceneManifest {
            version: MANIFEST_VERSION.to_string(),
            width: self.width,
            height: self.height,
            frames: self.frames,
            seed: self.seed,
            sky: SKY,
            cameras: self.cameras(),
            primitives,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Everything needed to regenerate a scene bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub sky: Rgb,
    pub cameras: Vec<Camera>,
    pub primitives: Vec<Primitive>,
}

impl SceneManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation {
                what: "manifest".into(),
                reason: format!("unsupported version `{}`", self.version),
            });
        }
        if self.cameras.is_empty() {
            return Err(Error::InvalidSpec("need at least one view".into()));
        }
        if self.frames < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least two frames, got {}",
                self.frames
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidSpec(format!(
                "resolution {}x{} below 16x16",
                self.width, self.height
            )));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            let name = format!("camera {i}");
            cam.validate(&name)?;
            if cam.width != self.width || cam.height != self.height {
                return Err(Error::Validation {
                    what: name,
                    reason: "image size differs from scene".into(),
                });
            }
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(i)?;
        }
        self.check_motion()
    }

    /// Rejects trajectories whose projected per-frame motion exceeds [`MAX_MOTION_PX`].
    fn check_motion(&self) -> Result<()> {
        for (pi, prim) in self.primitives.iter().enumerate() {
            let moving =
                prim.trajectory.velocity.iter().any(|v| *v != 0.0) || prim.trajectory.spin != 0.0;
            if !moving {
                continue;
            }
            let extent = match &prim.shape {
                Shape::Sphere { radius } => *radius,
                Shape::Box { half_extents } => Vector3::from(*half_extents).norm(),
                Shape::Plane { .. } => 0.0,
            };
            let mut probes = vec![Vector3::zeros()];
            for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
                probes.push(axis * extent);
                probes.push(-axis * extent);
            }
            for cam in &self.cameras {
                for t in 0..self.frames - 1 {
                    for local in &probes {
                        let a = cam.project(&prim.to_world(local, t as f64));
                        let b = cam.project(&prim.to_world(local, (t + 1) as f64));
                        if let (Some((a, _)), Some((b, _))) = (a, b) {
                            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                            if d > MAX_MOTION_PX {
                                return Err(Error::InvalidSpec(format!(
                                    "primitive {pi} moves {d:.2} px between frames {t} and {} (limit {MAX_MOTION_PX})",
                                    t + 1
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// V pseudo-views × T frames rendered from a manifest. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene4D {
    manifest: SceneManifest,
    frames: Vec<Frame>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene4D> {
    Scene4D::from_manifest(spec.to_manifest()?)
}

impl Scene4D {
    pub fn from_manifest(manifest: SceneManifest) -> Result<Self> {
        manifest.validate()?;
        let v_count = manifest.cameras.len();
        let t_count = manifest.frames;
        let frames = (0..v_count * t_count)
            .into_par_iter()
            .map(|i| render_frame(&manifest, i / t_count, i % t_count))
            .collect();
        Ok(Self { manifest, frames })
    }

    pub fn manifest(&self) -> &SceneManifest {
        &self.manifest
    }

    pub fn views(&self) -> usize {
        self.manifest.cameras.len()
    }

    pub fn frames(&self) -> usize {
        self.manifest.frames
    }

    pub fn width(&self) -> usize {
        self.manifest.width
    }

    pub fn height(&self) -> usize {
        self.manifest.height
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.manifest.cameras
    }

    pub fn camera(&self, view: usize) -> &Camera {
        &self.manifest.cameras[view]
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.manifest.primitives
    }

    pub fn frame(&self, view: usize, t: usize) -> &Frame {
        &self.frames[view * self.manifest.frames + t]
    }

    /// All frames of one pseudo-view in time order.
    pub fn pseudo_view(&self, view: usize) -> &[Frame] {
        let t = self.manifest.frames;
        &self.frames[view * t..(view + 1) * t]
    }

    /// Original RGB images of one pseudo-view.
    pub fn view_images(&self, view: usize) -> Vec<Image> {
        self.pseudo_view(view)
            .iter()
            .map(|f| f.rgb.clone())
            .collect()
    }

    /// Exact surface hit behind continuous pixel `(x, y)` of `view` at time `t`.
    pub fn hit(&self, view: usize, t: f64, x: f64, y: f64) -> Option<Hit> {
        let (o, d) = self.camera(view).ray(x, y);
        raycast(&self.manifest.primitives, &o, &d, t)
    }

    /// Exact correspondence field from frame `t_from` to frame `t_to` of one view.
    ///
    /// Each finite-depth pixel is followed along its primitive's rigid motion
    /// and reprojected; it is valid when it lands on-screen and is the visible
    /// surface there (depth agreement within [`OCCLUSION_TOL`]).
    pub fn correspondence(&self, view: usize, t_from: usize, t_to: usize) -> Result<FlowField> {
        let t_count = self.frames();
        if view >= self.views() || t_from >= t_count || t_to >= t_count {
            return Err(Error::OutOfRange(format!(
                "correspondence view {view} t {t_from}->{t_to} (V={}, T={t_count})",
                self.views()
            )));
        }
        let cam = self.camera(view);
        let (w, h) = (self.width(), self.height());
        let prims = &self.manifest.primitives;
        let rows: Vec<Vec<([f64; 2], bool)>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let Some(hit) = self.hit(view, t_from as f64, x as f64, y as f64) else {
                            return ([0.0, 0.0], false);
                        };
                        // Resting surfaces map onto themselves; skip the round trip so
                        // their flow is exactly zero.
                        let projected = if prims[hit.prim].trajectory.is_static() {
                            Some(([x as f64, y as f64], hit.depth))
                        } else {
                            cam.project(&prims[hit.prim].to_world(&hit.local, t_to as f64))
                        };
                        let Some((mut q, z)) = projected else {
                            return ([0.0, 0.0], false);
                        };
                        // Absorb round-off at the image border.
                        for (c, n) in q.iter_mut().zip([w, h]) {
                            if *c < 0.0 && *c > -1e-6 {
                                *c = 0.0;
                            }
                            let max = (n - 1) as f64;
                            if *c > max && *c < max + 1e-6 {
                                *c = max;
                            }
                        }
                        let vector = [q[0] - x as f64, q[1] - y as f64];
                        if !cam.in_bounds(q) {
                            return (vector, false);
                        }
                        let visible = self
                            .hit(view, t_to as f64, q[0], q[1])
                            .is_some_and(|h2| (h2.depth - z).abs() <= OCCLUSION_TOL);
                        (vector, visible)
                    })
                    .collect()
            })
            .collect();
        let cells: Vec<_> = rows.into_iter().flatten().collect();
        Ok(FlowField {
            vectors: Raster::from_vec(w, h, cells.iter().map(|c| c.0).collect())?,
            valid: Raster::from_vec(w, h, cells.iter().map(|c| c.1).collect())?,
        })
    }

    /// Exact forward flow from frame `t` to `t + 1`.
    pub fn analytic_flow(&self, view: usize, t: usize) -> Result<FlowField> {
        if t + 1 >= self.frames() {
            return Err(Error::OutOfRange(format!(
                "flow from t={t} needs t < {}",
                self.frames() - 1
            )));
        }
        self.correspondence(view, t, t + 1)
    }
}

fn render_frame(m: &SceneManifest, view: usize, t: usize) -> Frame {
    let cam = &m.cameras[view];
    let mut rgb = Raster::filled(m.width, m.height, m.sky);
    let mut depth = Raster::filled(m.width, m.height, f64::INFINITY);
    let (o, _) = cam.ray(0.0, 0.0);
    for y in 0..m.height {
        for x in 0..m.width {
            let (_, d) = cam.ray(x as f64, y as f64);
            if let Some(hit) = raycast(&m.primitives, &o, &d, t as f64) {
                let albedo = m.primitives[hit.prim].albedo(&hit.local);
                rgb.set(x, y, shade(albedo, &hit.normal));
                depth.set(x, y, hit.depth);
            }
        }
    }
    Frame {
        rgb,
        depth,
        view_id: view,
        time_index: t,
    }
}
