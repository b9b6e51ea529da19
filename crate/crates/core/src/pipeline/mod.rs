//! The outer editing loop: each iteration picks random key pseudo-views,
//! edits their first frames and then their videos, propagates the edits into
//! every other view, and refits the field on the regenerated dataset.

mod run;
mod snapshot;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EditDataset;
use crate::editor::{EditRequest, FrameEditor, Guidance};
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::flow::{FlowCache, FlowEstimator, FB_TOLERANCE};
use crate::propagate::{
    edit_first_frames, propagate_all, FirstFrameParams, KeySet, PropagateConfig,
};
use crate::raster::Image;
use crate::scene::Scene4D;
use crate::window::{edit_pseudo_view, window_calls, WindowParams};

pub use run::{
    run_parallel, run_sequential, IterationRecord, RunResult, SequentialRun, FIELD_DIR, LOG_FILE,
};
pub use snapshot::{RenderSet, Snapshot, SnapshotCell};

/// Guidance weights by edit kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GuidancePreset {
    Object,
    #[default]
    Style,
}

impl GuidancePreset {
    pub fn weights(self) -> Guidance {
        match self {
            GuidancePreset::Object => Guidance::OBJECT,
            GuidancePreset::Style => Guidance::STYLE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Dataset regenerations `N_it`.
    pub iterations: usize,
    /// Strength range of the first-frame phase, annealed from hi to lo.
    pub strength_hi: f64,
    pub strength_lo: f64,
    pub anchor_steps: u32,
    /// Strength and steps of the window inpaint/repaint calls.
    pub inpaint_strength: f64,
    pub inpaint_steps: u32,
    pub guidance: GuidancePreset,
    /// Window width `B`, also the editor's batch limit.
    pub window: usize,
    /// Key views per iteration `n`.
    pub keys: usize,
    /// Fit steps per published dataset.
    pub fit_steps: usize,
    pub fit_lr: f64,
    /// Trainer steps between render-buffer publications in parallel runs.
    pub render_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 4,
            strength_hi: 0.98,
            strength_lo: 0.7,
            anchor_steps: 20,
            inpaint_strength: 0.6,
            inpaint_steps: 3,
            guidance: GuidancePreset::Style,
            window: 8,
            keys: 5,
            fit_steps: 2000,
            fit_lr: 1.0,
            render_every: 100,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::Validation {
                what: "schedule".into(),
                reason,
            })
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.strength_lo)
            && unit(self.strength_hi)
            && self.strength_lo <= self.strength_hi)
        {
            return bad(format!(
                "need 0 <= strength_lo <= strength_hi <= 1, got {} and {}",
                self.strength_lo, self.strength_hi
            ));
        }
        if !unit(self.inpaint_strength) {
            return bad(format!(
                "inpaint_strength {} outside [0, 1]",
                self.inpaint_strength
            ));
        }
        for (name, v) in [
            ("anchor_steps", self.anchor_steps as usize),
            ("inpaint_steps", self.inpaint_steps as usize),
            ("window", self.window),
            ("keys", self.keys),
            ("fit_steps", self.fit_steps),
            ("render_every", self.render_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.fit_lr > 0.0 && self.fit_lr.is_finite()) {
            return bad(format!("fit_lr {} must be positive", self.fit_lr));
        }
        Ok(())
    }
}

/// Cosine decay from `strength_hi` at `i = 0` to `strength_lo` at `i = n - 1`.
pub fn anneal_strength(i: usize, n: usize, schedule: &Schedule) -> Result<f64> {
    if i >= n {
        return Err(Error::OutOfRange(format!("iteration {i} of {n}")));
    }
    let (hi, lo) = (schedule.strength_hi, schedule.strength_lo);
    if n == 1 {
        return Ok(hi);
    }
    Ok(lo + (hi - lo) * (1.0 + (PI * i as f64 / (n - 1) as f64).cos()) / 2.0)
}

/// `n` distinct views drawn uniformly from `0..views`, seeded by `(seed, iter)`.
/// The first drawn view leads the first-frame edits.
pub fn select_keys(views: usize, n: usize, seed: u64, iter: usize) -> Result<KeySet> {
    if n == 0 || n > views {
        return Err(Error::InvalidRequest(format!(
            "cannot pick {n} key views out of {views}"
        )));
    }
    let derived = seed ^ (iter as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut rng = ChaCha8Rng::seed_from_u64(derived);
    KeySet::new(
        rand::seq::index::sample(&mut rng, views, n).into_vec(),
        derived,
    )
}

/// Editor-call upper bound of one key-view iteration: `⌈n/B⌉ + 1 + n·⌈(T−1)/B⌉`.
pub fn iteration_call_bound(keys: usize, frames: usize, window: usize) -> usize {
    keys.div_ceil(window) + 1 + keys * window_calls(frames, window)
}

/// Which dataset generator an iteration uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Flow-guided windows, key-view propagation, iterative regeneration.
    #[default]
    Full,
    /// Windows start from the inputs instead of flow-carried edits, so they
    /// are regenerated at first-frame strength.
    NoFlow,
    /// A single dataset generation.
    OneShotPropagation,
    /// Every frame of every view edited alone, without an anchor.
    FrameIndependent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schedule: Schedule,
    pub mode: Mode,
    pub instruction: String,
    /// Root seed of key selection and editor calls.
    pub seed: u64,
    pub flow: FlowEstimator,
    pub propagate: PropagateConfig,
    pub field: FieldConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            mode: Mode::Full,
            instruction: "van-gogh".into(),
            seed: 0,
            flow: FlowEstimator::Analytic,
            propagate: PropagateConfig::default(),
            field: FieldConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.propagate.validate()?;
        if self.instruction.is_empty() {
            return Err(Error::Validation {
                what: "instruction".into(),
                reason: "empty id".into(),
            });
        }
        Ok(())
    }

    /// Dataset generations this mode performs.
    pub fn iterations(&self) -> usize {
        match self.mode {
            Mode::OneShotPropagation => self.schedule.iterations.min(1),
            _ => self.schedule.iterations,
        }
    }
}

/// One regenerated dataset and how it was made.
#[derive(Clone, Debug)]
pub struct Iteration {
    pub index: usize,
    pub keys: Vec<usize>,
    pub strength: f64,
    pub editor_calls: usize,
    pub call_bound: usize,
    pub dataset: EditDataset,
}

/// Scene, editor and settings shared by every iteration of a run.
pub struct Engine<'a> {
    pub scene: &'a Scene4D,
    pub editor: &'a dyn FrameEditor,
    pub config: PipelineConfig,
    pub flows: FlowCache,
    /// Dump fused window inputs and edits here when set.
    pub debug_dir: Option<PathBuf>,
}

/// Frames the editor starts from: originals, or the current renders.
struct Inputs<'r> {
    scene: &'r Scene4D,
    renders: Option<&'r RenderSet>,
}

impl Inputs<'_> {
    fn get(&self, v: usize, t: usize) -> &Image {
        match self.renders {
            Some(r) => r.get(v, t),
            None => &self.scene.frame(v, t).rgb,
        }
    }
}

/// Editor call indexes: iteration in the top bits, then the stage.
fn call_base(iter: usize, stage: usize) -> u64 {
    ((iter as u64) << 40) | ((stage as u64) << 20)
}

impl<'a> Engine<'a> {
    pub fn new(
        scene: &'a Scene4D,
        editor: &'a dyn FrameEditor,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.mode != Mode::FrameIndependent && config.schedule.keys > scene.views() {
            return Err(Error::Config(format!(
                "{} key views requested but the scene has {}",
                config.schedule.keys,
                scene.views()
            )));
        }
        let flows = FlowCache::new(config.flow.source(), FB_TOLERANCE);
        Ok(Self {
            scene,
            editor,
            config,
            flows,
            debug_dir: None,
        })
    }

    /// Regenerates the dataset. Iteration 0 edits the originals; later ones
    /// edit `renders`, the current field's images.
    pub fn run_iteration(&self, iter: usize, renders: &RenderSet) -> Result<Iteration> {
        let n_it = self.config.iterations();
        let strength = anneal_strength(iter, n_it, &self.config.schedule)?;
        let scene = self.scene;
        if iter > 0 && (renders.views() != scene.views() || renders.frames() != scene.frames()) {
            return Err(Error::Shape(
                "render buffer does not cover the scene".into(),
            ));
        }
        let input = Inputs {
            scene,
            renders: (iter > 0).then_some(renders),
        };
        let it = match self.config.mode {
            Mode::FrameIndependent => self.frame_independent(iter, strength, &input)?,
            _ => self.key_view_iteration(iter, strength, &input)?,
        };
        if it.editor_calls > it.call_bound {
            return Err(Error::BudgetExceeded {
                calls: it.editor_calls,
                bound: it.call_bound,
            });
        }
        Ok(it)
    }

    fn key_view_iteration(&self, iter: usize, strength: f64, input: &Inputs) -> Result<Iteration> {
        let (scene, cfg, s) = (self.scene, &self.config, &self.config.schedule);
        let guidance = s.guidance.weights();
        let keys = select_keys(scene.views(), s.keys, cfg.seed, iter)?;
        let first_inputs: BTreeMap<usize, Image> = keys
            .views
            .iter()
            .map(|&v| (v, input.get(v, 0).clone()))
            .collect();
        let first = edit_first_frames(
            scene,
            &keys,
            &first_inputs,
            self.editor,
            &FirstFrameParams {
                strength,
                steps: s.anchor_steps,
                instruction: cfg.instruction.clone(),
                guidance,
                seed: cfg.seed,
                call_base: call_base(iter, 0),
                max_batch: s.window,
            },
        )?;
        let use_flow = cfg.mode != Mode::NoFlow;
        let (w_strength, w_steps) = if use_flow {
            (s.inpaint_strength, s.inpaint_steps)
        } else {
            (strength, s.anchor_steps)
        };
        let edited: Vec<(usize, crate::window::ViewEdit)> = keys
            .views
            .par_iter()
            .map(|&v| {
                let inputs: Vec<Image> = (0..scene.frames())
                    .map(|t| input.get(v, t).clone())
                    .collect();
                let params = WindowParams {
                    width: s.window,
                    strength: w_strength,
                    steps: w_steps,
                    instruction: cfg.instruction.clone(),
                    guidance,
                    seed: cfg.seed,
                    call_base: call_base(iter, 1 + v),
                    use_flow,
                };
                let debug = self
                    .debug_dir
                    .as_ref()
                    .map(|d| d.join(format!("iter_{}", iter + 1)));
                edit_pseudo_view(
                    scene,
                    v,
                    &inputs,
                    &first.edits[&v],
                    self.editor,
                    &self.flows,
                    &params,
                    debug.as_deref(),
                )
                .map(|e| (v, e))
            })
            .collect::<Result<_>>()?;
        let editor_calls =
            first.editor_calls + edited.iter().map(|(_, e)| e.editor_calls).sum::<usize>();
        let key_views: BTreeMap<usize, Vec<Image>> =
            edited.into_iter().map(|(v, e)| (v, e.frames)).collect();
        let dataset = propagate_all(
            scene,
            &key_views,
            &self.flows,
            &cfg.propagate,
            iter as u64 + 1,
        )?;
        Ok(Iteration {
            index: iter,
            keys: keys.views,
            strength,
            editor_calls,
            call_bound: iteration_call_bound(s.keys, scene.frames(), s.window),
            dataset,
        })
    }

    fn frame_independent(&self, iter: usize, strength: f64, input: &Inputs) -> Result<Iteration> {
        let (scene, cfg, s) = (self.scene, &self.config, &self.config.schedule);
        let images: Vec<Vec<Image>> = (0..scene.views())
            .into_par_iter()
            .map(|v| {
                (0..scene.frames())
                    .map(|t| {
                        let req = EditRequest {
                            batch: vec![input.get(v, t).clone()],
                            originals: vec![scene.frame(v, t).rgb.clone()],
                            anchor: None,
                            instruction: cfg.instruction.clone(),
                            strength,
                            steps: s.anchor_steps,
                            guidance: s.guidance.weights(),
                            max_batch: 1,
                            seed: cfg.seed,
                            call_index: call_base(iter, 1 + v) + t as u64,
                        };
                        let mut out =
                            self.editor
                                .edit_batch(&req)
                                .map_err(|e| Error::EditorFailed {
                                    context: format!("view {v}, frame {t}"),
                                    source: Box::new(e),
                                })?;
                        out.pop().ok_or_else(|| {
                            Error::InvalidRequest("editor returned no frames".into())
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let calls = scene.views() * scene.frames();
        let dataset =
            EditDataset::from_images(images, (0..scene.views()).collect(), iter as u64 + 1)?;
        Ok(Iteration {
            index: iter,
            keys: (0..scene.views()).collect(),
            strength,
            editor_calls: calls,
            call_bound: calls,
            dataset,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let s = Schedule::default();
        assert_eq!(anneal_strength(0, 5, &s).unwrap(), 0.98);
        assert!((anneal_strength(4, 5, &s).unwrap() - 0.70).abs() < 1e-15);
        assert!((anneal_strength(2, 5, &s).unwrap() - 0.84).abs() < 1e-15);
        assert_eq!(anneal_strength(0, 1, &s).unwrap(), 0.98);
        assert!(anneal_strength(5, 5, &s).is_err());
    }

    #[test]
    fn keys_are_seeded_and_distinct() {
        let a = select_keys(20, 5, 9, 3).unwrap();
        assert_eq!(a, select_keys(20, 5, 9, 3).unwrap());
        assert_ne!(a.views, select_keys(20, 5, 9, 4).unwrap().views);
        let mut all = select_keys(6, 6, 1, 0).unwrap().views;
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert_eq!(select_keys(1, 1, 5, 0).unwrap().views, vec![0]);
        assert!(select_keys(3, 4, 0, 0).is_err());
    }

    #[test]
    fn call_bound_arithmetic() {
        assert_eq!(iteration_call_bound(5, 51, 10), 27);
        assert_eq!(iteration_call_bound(1, 1, 1), 2);
    }

    #[test]
    fn schedule_validation() {
        Schedule::default().validate().unwrap();
        let bad = [
            Schedule {
                strength_lo: 0.99,
                ..Schedule::default()
            },
            Schedule {
                window: 0,
                ..Schedule::default()
            },
            Schedule {
                inpaint_strength: 1.5,
                ..Schedule::default()
            },
            Schedule {
                fit_lr: f64::NAN,
                ..Schedule::default()
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }
}
