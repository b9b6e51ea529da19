//! The frame-editor contract and its implementations.
//!
//! An editor receives a batch of initialization images together with the
//! unedited originals and returns one edited image per entry. `strength`
//! controls how much of the initialization is regenerated; `steps` is the
//! number of refinement steps, folded into an effective strength
//! `1 - (1 - strength)^steps`.

mod attention;
mod conv;
mod palette;
mod toy;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use attention::anchor_attention;
pub use conv::{conv2d, conv2d_weight_grad, conv3d, conv3d_weight_grad, inflate_conv2d_to_3d};
pub use palette::{hue_rotation, JitterEditor, PaletteEditor};
pub use toy::{ToyAttentionEditor, ToyConfig};

use crate::error::{json_error, Error, Result};
use crate::raster::{Image, Rgb};

/// Classifier-free guidance weights for the instruction text and the source image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub text: f64,
    pub image: f64,
}

impl Guidance {
    /// Object-focused edits.
    pub const OBJECT: Guidance = Guidance {
        text: 7.5,
        image: 1.5,
    };
    /// Style transfer.
    pub const STYLE: Guidance = Guidance {
        text: 9.5,
        image: 1.5,
    };
}

impl Default for Guidance {
    fn default() -> Self {
        Guidance::OBJECT
    }
}

/// A reference pair whose editing style later batches should follow.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub original: Image,
    pub edited: Image,
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    /// Initialization images (fused warps, renders, or originals).
    pub batch: Vec<Image>,
    /// Unedited frames matching `batch` one to one.
    pub originals: Vec<Image>,
    pub anchor: Option<Anchor>,
    pub instruction: String,
    pub strength: f64,
    pub steps: u32,
    pub guidance: Guidance,
    /// Largest batch the editor accepts (the window width).
    pub max_batch: usize,
    pub seed: u64,
    /// Identifies this call within a run; editors with randomness derive it from `(seed, call_index)`.
    pub call_index: u64,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRequest(m));
        if self.batch.is_empty() {
            return bad("empty batch".into());
        }
        if self.batch.len() > self.max_batch {
            return bad(format!(
                "batch of {} exceeds limit {}",
                self.batch.len(),
                self.max_batch
            ));
        }
        if self.originals.len() != self.batch.len() {
            return bad(format!(
                "{} originals for {} batch entries",
                self.originals.len(),
                self.batch.len()
            ));
        }
        let dims = self.batch[0].dims();
        let all_same = self
            .batch
            .iter()
            .chain(&self.originals)
            .all(|i| i.dims() == dims)
            && self.anchor.as_ref().is_none_or(|a| {
                a.original.dims() == dims && a.edited.dims() == dims
            });
        if !all_same {
            return bad("images in request differ in resolution".into());
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return bad(format!("strength {} outside [0, 1]", self.strength));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        Ok(())
    }

    pub fn effective_strength(&self) -> f64 {
        effective_strength(self.strength, self.steps)
    }
}

/// Strength after `steps` refinement steps: `1 - (1 - strength)^steps`.
pub fn effective_strength(strength: f64, steps: u32) -> f64 {
    1.0 - (1.0 - strength).powi(steps as i32)
}

pub trait FrameEditor: Send + Sync {
    fn name(&self) -> &'static str;

    /// One edited frame per batch entry.
    fn edit_batch(&self, req: &EditRequest) -> Result<Vec<Image>>;
}

/// Affine color map applied by an instruction, plus its hue-jitter amplitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instruction {
    /// Row-major 3×3 color matrix.
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
    /// Jitter amplitude in radians of hue rotation at strength 1.
    #[serde(default)]
    pub jitter: f64,
}

impl Instruction {
    /// `clamp(M c + b)`.
    pub fn apply(&self, c: &Rgb) -> Rgb {
        self.apply_unclamped(c).map(|v| v.clamp(0.0, 1.0))
    }

    pub fn apply_unclamped(&self, c: &Rgb) -> Rgb {
        let m = &self.matrix;
        std::array::from_fn(|i| m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2] + self.offset[i])
    }
}

/// Instruction id → color map. Serialized as a JSON object keyed by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionRegistry {
    entries: BTreeMap<String, Instruction>,
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl InstructionRegistry {
    pub fn builtin() -> Self {
        let mut entries = BTreeMap::new();
        let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        entries.insert(
            "identity".into(),
            Instruction {
                matrix: identity,
                offset: [0.0; 3],
                jitter: 0.0,
            },
        );
        entries.insert(
            "grayscale".into(),
            Instruction {
                matrix: [LUMA; 3],
                offset: [0.0; 3],
                jitter: 0.3,
            },
        );
        entries.insert(
            "sepia".into(),
            Instruction {
                matrix: [
                    [0.393, 0.769, 0.189],
                    [0.349, 0.686, 0.168],
                    [0.272, 0.534, 0.131],
                ],
                offset: [0.0; 3],
                jitter: 0.5,
            },
        );
        entries.insert(
            "invert".into(),
            Instruction {
                matrix: [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
                offset: [1.0; 3],
                jitter: 0.5,
            },
        );
        // Boost saturation around luma and push toward a warm/blue split.
        let sat = 1.6;
        let van_gogh: [[f64; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|j| (1.0 - sat) * LUMA[j] + if i == j { sat } else { 0.0 })
        });
        entries.insert(
            "van-gogh".into(),
            Instruction {
                matrix: van_gogh,
                offset: [0.04, 0.0, -0.06],
                jitter: 0.8,
            },
        );
        Self { entries }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| json_error(path, text, &e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn get(&self, id: &str) -> Result<&Instruction> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::UnknownInstruction(id.to_string()))
    }

    pub fn insert(&mut self, id: impl Into<String>, instruction: Instruction) {
        self.entries.insert(id.into(), instruction);
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl Default for InstructionRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// `(1 - s) * init + s * target`, per channel.
#[inline]
pub(crate) fn blend(init: &Rgb, target: &Rgb, s: f64) -> Rgb {
    std::array::from_fn(|k| (1.0 - s) * init[k] + s * target[k])
}

/// Editor choice as named on the command line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    Palette,
    #[default]
    Jitter,
    Attention,
}

impl EditorKind {
    pub fn build(self, registry: InstructionRegistry) -> Box<dyn FrameEditor> {
        match self {
            EditorKind::Palette => Box::new(PaletteEditor::new(registry)),
            EditorKind::Jitter => Box::new(JitterEditor::new(registry)),
            EditorKind::Attention => {
                Box::new(ToyAttentionEditor::new(registry, ToyConfig::default()))
            }
        }
    }
}
