use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{blend, Anchor, EditRequest, FrameEditor, Instruction, InstructionRegistry};
use crate::error::Result;
use crate::raster::{Image, Raster, Rgb};

/// Deterministic per-instruction affine color map:
/// `edit = (1 - s) * init + s * clamp(M * original + b)`.
#[derive(Clone, Debug, Default)]
pub struct PaletteEditor {
    registry: InstructionRegistry,
}

impl PaletteEditor {
    pub fn new(registry: InstructionRegistry) -> Self {
        Self { registry }
    }
}

fn stylize(init: &Image, original: &Image, s: f64, target: impl Fn(&Rgb) -> Rgb) -> Image {
    Raster::from_fn(init.width(), init.height(), |x, y| {
        blend(init.get(x, y), &target(original.get(x, y)), s)
    })
}

impl FrameEditor for PaletteEditor {
    fn name(&self) -> &'static str {
        "palette"
    }

    fn edit_batch(&self, req: &EditRequest) -> Result<Vec<Image>> {
        req.validate()?;
        let ins = self.registry.get(&req.instruction)?;
        let s = req.effective_strength();
        Ok(req
            .batch
            .iter()
            .zip(&req.originals)
            .map(|(i, o)| stylize(i, o, s, |c| ins.apply(c)))
            .collect())
    }
}

/// Rotation of RGB space by `angle` radians about the gray axis.
pub fn hue_rotation(angle: f64) -> Matrix3<f64> {
    let k = Vector3::new(1.0, 1.0, 1.0).normalize();
    let kx = k.cross_matrix();
    Matrix3::identity() * angle.cos() + kx * angle.sin() + k * k.transpose() * (1.0 - angle.cos())
}

fn rotate(m: &Matrix3<f64>, c: &Rgb) -> Rgb {
    let v = m * Vector3::from(*c);
    [v.x, v.y, v.z]
}

/// Palette stylization followed by a hue rotation drawn per call.
///
/// The rotation angle is `jitter * strength * u` with `u ~ U(-1, 1)` seeded by
/// `(seed, call_index)`, so repeated generation disagrees the way independent
/// diffusion samples do. With an anchor, the editor recovers the anchor's hue
/// rotation and keeps only `anchor_residual` of the fresh draw on top of it.
#[derive(Clone, Debug)]
pub struct JitterEditor {
    registry: InstructionRegistry,
    /// Fraction of fresh jitter that survives when an anchor is given.
    pub anchor_residual: f64,
    /// Overrides the instruction's jitter amplitude when set.
    pub amplitude: Option<f64>,
}

impl JitterEditor {
    pub fn new(registry: InstructionRegistry) -> Self {
        Self {
            registry,
            anchor_residual: 0.1,
            amplitude: None,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = Some(amplitude);
        self
    }

    fn fresh_angle(&self, ins: &Instruction, req: &EditRequest) -> f64 {
        let seed = req.seed ^ req.call_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: f64 = rng.gen_range(-1.0..1.0);
        self.amplitude.unwrap_or(ins.jitter) * req.strength * u
    }
}

/// Least-squares hue angle taking the stylized anchor original to the edited anchor,
/// measured in the chroma plane orthogonal to gray.
fn anchor_angle(ins: &Instruction, anchor: &Anchor) -> f64 {
    let k = Vector3::new(1.0, 1.0, 1.0).normalize();
    let (mut dot, mut cross) = (0.0, 0.0);
    for (o, e) in anchor
        .original
        .as_slice()
        .iter()
        .zip(anchor.edited.as_slice())
    {
        let a = Vector3::from(ins.apply_unclamped(o));
        let b = Vector3::from(*e);
        let ca = a - k * k.dot(&a);
        let cb = b - k * k.dot(&b);
        dot += ca.dot(&cb);
        cross += k.dot(&ca.cross(&cb));
    }
    if dot == 0.0 && cross == 0.0 {
        0.0
    } else {
        cross.atan2(dot)
    }
}

impl FrameEditor for JitterEditor {
    fn name(&self) -> &'static str {
        "jitter"
    }

    fn edit_batch(&self, req: &EditRequest) -> Result<Vec<Image>> {
        req.validate()?;
        let ins = self.registry.get(&req.instruction)?;
        let fresh = self.fresh_angle(ins, req);
        let angle = match &req.anchor {
            Some(anchor) => anchor_angle(ins, anchor) + self.anchor_residual * fresh,
            None => fresh,
        };
        let rot = hue_rotation(angle);
        let s = req.effective_strength();
        Ok(req
            .batch
            .iter()
            .zip(&req.originals)
            .map(|(i, o)| {
                stylize(i, o, s, |c| {
                    rotate(&rot, &ins.apply_unclamped(c)).map(|v| v.clamp(0.0, 1.0))
                })
            })
            .collect())
    }
}
