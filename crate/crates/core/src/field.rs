//! A dense space-time color grid rendered against fixed scene occupancy.
//!
//! Colors live on a `X×Y×Z` lattice of nodes per frame (one time slice per
//! scene frame) and are trilinearly interpolated in space and linearly in time.
//! Occupancy is not learned: it is the scene's solid geometry at time `t`,
//! so each ray's first surface crossing is one emission–absorption sample of
//! opacity `1 - exp(-opacity)`, composited over the background color.
//!
//! Because occupancy is fixed, a render is affine in the colors and the
//! weighted L2 fitting loss is quadratic. [`FitProblem`] assembles its normal
//! equations once per dataset; each fitting step is then a diagonally
//! preconditioned gradient step followed by projection onto `[0, 1]`.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataset::EditDataset;
use crate::error::{json_error, Error, Result};
use crate::metrics::psnr_from_mse;
use crate::raster::{Image, Raster, Rgb};
use crate::rawio::RawArray;
use crate::scene::{raycast, Camera, Primitive, Scene4D};

pub const FIELD_VERSION: &str = "p4d-field/1";
const HEADER_FILE: &str = "field.json";
const COLORS_FILE: &str = "colors.p4df";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Lattice nodes along x, y, z.
    pub resolution: [usize; 3],
    /// Optical depth `sigma * delta` of the surface sample.
    pub opacity: f64,
    /// Initial color of every node.
    pub init_color: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            resolution: [32; 3],
            opacity: 16.0,
            init_color: 0.5,
        }
    }
}

/// Where a ray meets the occupancy: the lower lattice node of its cell and
/// the fractional offsets inside it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub base: u32,
    pub frac: [f32; 3],
}

impl RaySample {
    /// The 8 corner nodes (offsets relative to `base`) with trilinear weights.
    #[inline]
    fn corners(&self, dims: [usize; 3]) -> [(usize, [i32; 3], f64); 8] {
        let [fx, fy, fz] = self.frac.map(f64::from);
        let base = self.base as usize;
        std::array::from_fn(|c| {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let w = (if dx == 1 { fx } else { 1.0 - fx })
                * (if dy == 1 { fy } else { 1.0 - fy })
                * (if dz == 1 { fz } else { 1.0 - fz });
            (
                base + dx + dims[0] * (dy + dims[1] * dz),
                [dx as i32, dy as i32, dz as i32],
                w,
            )
        })
    }
}

/// Precomputed samples for every pixel of every (view, frame) of a rig.
#[derive(Clone, Debug)]
pub struct RayTable {
    views: usize,
    frames: usize,
    width: usize,
    height: usize,
    samples: Vec<Option<RaySample>>,
}

impl RayTable {
    /// Samples of every pixel of view `v` at frame `t`, row-major.
    pub fn rays(&self, v: usize, t: usize) -> &[Option<RaySample>] {
        assert!(
            v < self.views && t < self.frames,
            "rays ({v}, {t}) out of range"
        );
        let n = self.width * self.height;
        let i = (v * self.frames + t) * n;
        &self.samples[i..i + n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: String,
    config: FieldConfig,
    bounds_min: [f64; 3],
    bounds_max: [f64; 3],
    frames: usize,
    background: Rgb,
    occupancy: Vec<Primitive>,
}

/// Time-sliced color lattice plus the occupancy it is rendered against.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField4D {
    header: Header,
    /// `[t][z][y][x][rgb]`.
    colors: Vec<f32>,
}

impl GridField4D {
    /// An untrained field spanning every visible surface point of `scene`.
    pub fn for_scene(scene: &Scene4D, config: FieldConfig) -> Result<Self> {
        if config.resolution.iter().any(|n| *n < 2)
            || !(config.opacity >= 0.0 && config.opacity.is_finite())
            || !(0.0..=1.0).contains(&config.init_color)
        {
            return Err(Error::Config(format!("invalid field config {config:?}")));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in 0..scene.views() {
            let cam = scene.camera(v);
            for t in 0..scene.frames() {
                for (x, y, d) in scene.frame(v, t).depth.indexed() {
                    if d.is_finite() {
                        let p = cam.unproject(x as f64, y as f64, *d);
                        for k in 0..3 {
                            lo[k] = lo[k].min(p[k]);
                            hi[k] = hi[k].max(p[k]);
                        }
                    }
                }
            }
        }
        if lo[0] > hi[0] {
            return Err(Error::InvalidRequest(
                "scene has no visible surface to fit".into(),
            ));
        }
        for k in 0..3 {
            let pad = 0.01 * (hi[k] - lo[k]).max(1e-3);
            lo[k] -= pad;
            hi[k] += pad;
        }
        let header = Header {
            version: FIELD_VERSION.into(),
            bounds_min: lo,
            bounds_max: hi,
            frames: scene.frames(),
            background: scene.manifest().sky,
            occupancy: scene.primitives().to_vec(),
            config,
        };
        let n = header.nodes_per_slice() * header.frames * 3;
        let colors = vec![header.config.init_color as f32; n];
        Ok(Self { header, colors })
    }

    pub fn frames(&self) -> usize {
        self.header.frames
    }

    pub fn config(&self) -> &FieldConfig {
        &self.header.config
    }

    pub fn background(&self) -> Rgb {
        self.header.background
    }

    pub fn parameter_count(&self) -> usize {
        self.colors.len()
    }

    /// Flat color parameters, `[t][z][y][x][rgb]`.
    pub fn colors(&self) -> &[f32] {
        &self.colors
    }

    pub fn colors_mut(&mut self) -> &mut [f32] {
        &mut self.colors
    }

    /// Opacity of the surface sample.
    pub fn alpha(&self) -> f64 {
        1.0 - (-self.header.config.opacity).exp()
    }

    /// Surface sample of the ray through pixel `(x, y)` at time `t`.
    pub fn trace(&self, cam: &Camera, x: f64, y: f64, t: f64) -> Option<RaySample> {
        let (o, d) = cam.ray(x, y);
        let hit = raycast(&self.header.occupancy, &o, &d, t)?;
        Some(self.header.locate(&hit.point))
    }

    /// Color of a traced ray at integer frame `t`.
    #[inline]
    fn shade(&self, sample: Option<RaySample>, t: usize) -> Rgb {
        let bg = self.header.background;
        let Some(s) = sample else { return bg };
        let alpha = self.alpha();
        let c = self.lookup(&s, t);
        std::array::from_fn(|k| alpha * c[k] + (1.0 - alpha) * bg[k])
    }

    fn lookup(&self, s: &RaySample, t: usize) -> Rgb {
        let slice = &self.colors[t * self.header.nodes_per_slice() * 3..];
        let mut c = [0.0; 3];
        for (node, _, w) in s.corners(self.header.config.resolution) {
            for k in 0..3 {
                c[k] += w * f64::from(slice[node * 3 + k]);
            }
        }
        c
    }

    /// Renders `camera` at time `t`, interpolating linearly between frame slices.
    pub fn render(&self, cam: &Camera, t: f64) -> Result<Image> {
        let last = (self.frames() - 1) as f64;
        if !(0.0..=last).contains(&t) {
            return Err(Error::OutOfRange(format!(
                "render time {t} outside [0, {last}]"
            )));
        }
        let t0 = t.floor() as usize;
        let f = t - t0 as f64;
        Ok(Raster::from_fn(cam.width, cam.height, |x, y| {
            let s = self.trace(cam, x as f64, y as f64, t);
            let a = self.shade(s, t0);
            if f == 0.0 {
                a
            } else {
                let b = self.shade(s, t0 + 1);
                std::array::from_fn(|k| (1.0 - f) * a[k] + f * b[k])
            }
        }))
    }

    /// Samples for every training pixel of `scene`'s rig.
    pub fn ray_table(&self, scene: &Scene4D) -> Result<RayTable> {
        if scene.frames() != self.frames() {
            return Err(Error::Shape(format!(
                "field has {} frames, scene {}",
                self.frames(),
                scene.frames()
            )));
        }
        let (w, h) = (scene.width(), scene.height());
        let mut samples = Vec::with_capacity(scene.views() * scene.frames() * w * h);
        for v in 0..scene.views() {
            let cam = scene.camera(v);
            for t in 0..scene.frames() {
                for y in 0..h {
                    for x in 0..w {
                        samples.push(self.trace(cam, x as f64, y as f64, t as f64));
                    }
                }
            }
        }
        Ok(RayTable {
            views: scene.views(),
            frames: scene.frames(),
            width: w,
            height: h,
            samples,
        })
    }

    /// Render of training view `v` at frame `t`; equal to [`render`](Self::render) with that camera.
    pub fn render_view(&self, table: &RayTable, v: usize, t: usize) -> Image {
        let slot = table.rays(v, t);
        Raster::from_fn(table.width, table.height, |x, y| {
            self.shade(slot[y * table.width + x], t)
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(HEADER_FILE);
        fs::write(
            &path,
            serde_json::to_string_pretty(&self.header).expect("header serializes"),
        )
        .map_err(|e| Error::io(&path, e))?;
        let [nx, ny, nz] = self.header.config.resolution;
        RawArray {
            height: (self.frames() * nz * ny) as u32,
            width: nx as u32,
            channels: 3,
            data: self.colors.clone(),
        }
        .write(&dir.join(COLORS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: Header =
            serde_json::from_str(&text).map_err(|e| json_error(&path, &text, &e))?;
        if header.version != FIELD_VERSION {
            return Err(Error::Validation {
                what: "field checkpoint".into(),
                reason: format!("version {}", header.version),
            });
        }
        let raw = RawArray::read(&dir.join(COLORS_FILE))?;
        if raw.data.len() != header.nodes_per_slice() * header.frames * 3 || raw.channels != 3 {
            return Err(Error::Shape("field colors do not match header".into()));
        }
        Ok(Self {
            header,
            colors: raw.data,
        })
    }
}

impl Header {
    fn nodes_per_slice(&self) -> usize {
        self.config.resolution.iter().product()
    }

    /// Lattice cell and offsets of a world point, clamped into the bounds.
    fn locate(&self, p: &Vector3<f64>) -> RaySample {
        let res = self.config.resolution;
        let mut base = [0usize; 3];
        let mut frac = [0f32; 3];
        for k in 0..3 {
            let cells = (res[k] - 1) as f64;
            let u = ((p[k] - self.bounds_min[k]) / (self.bounds_max[k] - self.bounds_min[k])
                * cells)
                .clamp(0.0, cells);
            let i = (u.floor() as usize).min(res[k] - 2);
            base[k] = i;
            frac[k] = (u - i as f64) as f32;
        }
        RaySample {
            base: (base[0] + res[0] * (base[1] + res[1] * base[2])) as u32,
            frac,
        }
    }
}

/// One supervised image: the rays of a training view at frame `t`.
pub struct Supervision<'a> {
    pub t: usize,
    pub rays: &'a [Option<RaySample>],
    pub image: &'a Image,
    pub weights: &'a Raster<f64>,
}

/// Normal equations of one frame slice over its observed nodes.
#[derive(Clone, Debug, Default)]
struct SliceSystem {
    /// Observed lattice nodes, ascending.
    nodes: Vec<u32>,
    /// `N[j][o]`, `o` indexing the 27 neighbor offsets of node `j`.
    n: Vec<[f64; 27]>,
    b: Vec<[f64; 3]>,
    /// Row sums of `|N|`, the step preconditioner.
    row_abs: Vec<f64>,
}

#[inline]
fn offset_index(d: [i32; 3]) -> usize {
    ((d[2] + 1) * 9 + (d[1] + 1) * 3 + (d[0] + 1)) as usize
}

/// Weighted least-squares fitting problem for a fixed dataset:
/// `L(C) = Σ w (render(C) - y)² / Σ w`, summed over channels.
#[derive(Clone, Debug)]
pub struct FitProblem {
    slices: Vec<SliceSystem>,
    offsets: [isize; 27],
    c0: f64,
    total_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub final_loss: f64,
    /// PSNR of the renders against the dataset, per view, over all frames.
    pub view_psnr: Vec<f64>,
}

impl FitProblem {
    pub fn new(field: &GridField4D, data: &[Supervision]) -> Result<Self> {
        let res = field.header.config.resolution;
        let per_slice = field.header.nodes_per_slice();
        let alpha = field.alpha();
        let bg = field.header.background;
        let mut offsets = [0isize; 27];
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    offsets[offset_index([dx, dy, dz])] = dx as isize
                        + res[0] as isize * (dy as isize + res[1] as isize * dz as isize);
                }
            }
        }
        let mut by_slice: Vec<Vec<&Supervision>> =
            (0..field.frames()).map(|_| Vec::new()).collect();
        for s in data {
            if s.t >= field.frames() {
                return Err(Error::OutOfRange(format!(
                    "supervision at frame {} of {}",
                    s.t,
                    field.frames()
                )));
            }
            if s.rays.len() != s.image.len() || !s.image.same_dims(s.weights) {
                return Err(Error::Shape(
                    "supervision rays, image and weights differ in size".into(),
                ));
            }
            if s.image.as_slice().iter().flatten().any(|v| !v.is_finite())
                || s.weights
                    .as_slice()
                    .iter()
                    .any(|w| !w.is_finite() || *w < 0.0)
            {
                return Err(Error::Validation {
                    what: format!("supervision at frame {}", s.t),
                    reason: "non-finite color or invalid weight".into(),
                });
            }
            by_slice[s.t].push(s);
        }
        let mut c0 = 0.0;
        let mut total_weight = 0.0;
        let mut slices = Vec::with_capacity(field.frames());
        let mut local = vec![u32::MAX; per_slice];
        for group in by_slice {
            let mut sys = SliceSystem::default();
            let active = |s: &Supervision, i: usize| s.weights.as_slice()[i] > 0.0;
            for s in &group {
                for (i, ray) in s.rays.iter().enumerate() {
                    if let (true, Some(r)) = (active(s, i), ray) {
                        for (node, _, _) in r.corners(res) {
                            local[node] = 0;
                        }
                    }
                }
            }
            for (node, slot) in local.iter_mut().enumerate() {
                if *slot == 0 {
                    *slot = sys.nodes.len() as u32;
                    sys.nodes.push(node as u32);
                }
            }
            sys.n = vec![[0.0; 27]; sys.nodes.len()];
            sys.b = vec![[0.0; 3]; sys.nodes.len()];
            for s in &group {
                for (i, ray) in s.rays.iter().enumerate() {
                    let w = s.weights.as_slice()[i];
                    if !(w > 0.0) {
                        continue;
                    }
                    let y = s.image.as_slice()[i];
                    total_weight += w;
                    let Some(r) = ray else {
                        c0 += w * (0..3).map(|k| (bg[k] - y[k]).powi(2)).sum::<f64>();
                        continue;
                    };
                    let target: Rgb = std::array::from_fn(|k| y[k] - (1.0 - alpha) * bg[k]);
                    c0 += w * target.iter().map(|v| v * v).sum::<f64>();
                    let corners = r.corners(res);
                    for (nj, dj, wj) in corners {
                        let j = local[nj] as usize;
                        let aj = alpha * wj;
                        for k in 0..3 {
                            sys.b[j][k] += w * aj * target[k];
                        }
                        for (_, dk, wk) in corners {
                            let d = [dk[0] - dj[0], dk[1] - dj[1], dk[2] - dj[2]];
                            sys.n[j][offset_index(d)] += w * aj * alpha * wk;
                        }
                    }
                }
            }
            sys.row_abs = sys
                .n
                .iter()
                .map(|row| row.iter().map(|v| v.abs()).sum())
                .collect();
            for &node in &sys.nodes {
                local[node as usize] = u32::MAX;
            }
            slices.push(sys);
        }
        if !(total_weight > 0.0) {
            return Err(Error::InvalidRequest(
                "dataset has no positively weighted pixel".into(),
            ));
        }
        Ok(Self {
            slices,
            offsets,
            c0,
            total_weight,
        })
    }

    /// Supervision from every (view, frame) of `dataset`, using `table`'s rays.
    pub fn from_dataset(
        field: &GridField4D,
        table: &RayTable,
        dataset: &EditDataset,
    ) -> Result<Self> {
        if (dataset.views(), dataset.frames()) != (table.views, table.frames)
            || dataset.dims() != (table.width, table.height)
        {
            return Err(Error::Shape("dataset does not match the ray table".into()));
        }
        let data: Vec<Supervision> = (0..dataset.views())
            .flat_map(|v| (0..dataset.frames()).map(move |t| (v, t)))
            .map(|(v, t)| Supervision {
                t,
                rays: table.rays(v, t),
                image: dataset.image(v, t),
                weights: dataset.weight(v, t),
            })
            .collect();
        Self::new(field, &data)
    }

    /// `(N C)_j` for every observed node of slice `t`, per channel.
    fn apply(&self, colors: &[f32], t: usize, per_slice: usize) -> Vec<[f64; 3]> {
        let sys = &self.slices[t];
        let slice = &colors[t * per_slice * 3..(t + 1) * per_slice * 3];
        sys.nodes
            .iter()
            .zip(&sys.n)
            .map(|(&node, row)| {
                let mut acc = [0.0; 3];
                for (o, &nv) in row.iter().enumerate() {
                    if nv != 0.0 {
                        let k = (node as isize + self.offsets[o]) as usize;
                        for c in 0..3 {
                            acc[c] += nv * f64::from(slice[k * 3 + c]);
                        }
                    }
                }
                acc
            })
            .collect()
    }

    pub fn loss(&self, field: &GridField4D) -> f64 {
        let per_slice = field.header.nodes_per_slice();
        let mut quad = 0.0;
        for (t, sys) in self.slices.iter().enumerate() {
            let nc = self.apply(&field.colors, t, per_slice);
            for (j, &node) in sys.nodes.iter().enumerate() {
                for c in 0..3 {
                    let x = f64::from(field.colors[(t * per_slice + node as usize) * 3 + c]);
                    quad += x * nc[j][c] - 2.0 * x * sys.b[j][c];
                }
            }
        }
        ((quad + self.c0) / self.total_weight).max(0.0)
    }

    /// `∂L/∂colors`, flat like [`GridField4D::colors`].
    pub fn gradient(&self, field: &GridField4D) -> Vec<f64> {
        let per_slice = field.header.nodes_per_slice();
        let mut g = vec![0.0; field.colors.len()];
        for (t, sys) in self.slices.iter().enumerate() {
            let nc = self.apply(&field.colors, t, per_slice);
            for (j, &node) in sys.nodes.iter().enumerate() {
                for c in 0..3 {
                    g[(t * per_slice + node as usize) * 3 + c] =
                        2.0 * (nc[j][c] - sys.b[j][c]) / self.total_weight;
                }
            }
        }
        g
    }

    /// One preconditioned, projected gradient step:
    /// `C_j ← clamp(C_j - lr (N C - b)_j / Σ_k |N_jk|, 0, 1)`.
    ///
    /// The row-sum preconditioner majorizes `N`, so `lr <= 1` never increases the loss.
    pub fn step(&self, field: &mut GridField4D, lr: f64) -> Result<()> {
        let mut next = field.colors.clone();
        self.step_into(&field.colors, &mut next, lr, field.header.nodes_per_slice())?;
        field.colors = next;
        Ok(())
    }

    /// Writes the stepped observed entries of `src` into `dst`; entries of
    /// unobserved nodes are left untouched.
    fn step_into(&self, src: &[f32], dst: &mut [f32], lr: f64, per_slice: usize) -> Result<()> {
        for (t, sys) in self.slices.iter().enumerate() {
            let nc = self.apply(src, t, per_slice);
            for (j, &node) in sys.nodes.iter().enumerate() {
                if sys.row_abs[j] == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let i = (t * per_slice + node as usize) * 3 + c;
                    let x = f64::from(src[i]) - lr * (nc[j][c] - sys.b[j][c]) / sys.row_abs[j];
                    if !x.is_finite() {
                        return Err(Error::Divergence { step: 0, loss: x });
                    }
                    dst[i] = x.clamp(0.0, 1.0) as f32;
                }
            }
        }
        Ok(())
    }

    /// Runs `cfg.steps` steps and returns the final loss. On a non-finite
    /// update the field keeps its last finite state and divergence is reported.
    pub fn run(&self, field: &mut GridField4D, cfg: &FitConfig) -> Result<f64> {
        let per_slice = field.header.nodes_per_slice();
        let mut next = field.colors.clone();
        for step in 0..cfg.steps {
            if let Err(Error::Divergence { loss, .. }) =
                self.step_into(&field.colors, &mut next, cfg.lr, per_slice)
            {
                return Err(Error::Divergence { step, loss });
            }
            std::mem::swap(&mut field.colors, &mut next);
        }
        let loss = self.loss(field);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: cfg.steps,
                loss,
            });
        }
        Ok(loss)
    }
}

/// Fits `field` to `dataset` and reports per-view PSNR of the result.
pub fn fit(
    field: &mut GridField4D,
    table: &RayTable,
    dataset: &EditDataset,
    cfg: &FitConfig,
) -> Result<FitReport> {
    let problem = FitProblem::from_dataset(field, table, dataset)?;
    let final_loss = problem.run(field, cfg)?;
    Ok(FitReport {
        iterations: cfg.steps,
        final_loss,
        view_psnr: view_psnr(field, table, dataset),
    })
}

pub fn view_psnr(field: &GridField4D, table: &RayTable, dataset: &EditDataset) -> Vec<f64> {
    (0..dataset.views())
        .map(|v| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for t in 0..dataset.frames() {
                let r = field.render_view(table, v, t);
                for (a, b) in r.as_slice().iter().zip(dataset.image(v, t).as_slice()) {
                    sum += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
                    n += 3;
                }
            }
            psnr_from_mse(sum / n as f64)
        })
        .collect()
}
