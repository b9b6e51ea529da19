//! Cross-view propagation: consistent first frames for the key pseudo-views,
//! and per-timestep aggregation of temporal and spatial warps into every other
//! pseudo-view.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EditDataset;
use crate::editor::{Anchor, EditRequest, FrameEditor, Guidance};
use crate::error::{Error, Result};
use crate::flow::FlowCache;
use crate::geom::{warp_spatial, WarpResult, DEPTH_TOLERANCE};
use crate::raster::{Image, Mask, Raster};
use crate::scene::Scene4D;

/// Ordered key pseudo-views for one iteration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySet {
    pub views: Vec<usize>,
    pub seed: u64,
}

impl KeySet {
    pub fn new(views: Vec<usize>, seed: u64) -> Result<Self> {
        let mut sorted = views.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if views.is_empty() || sorted.len() != views.len() {
            return Err(Error::InvalidRequest(format!(
                "key views {views:?} must be nonempty and distinct"
            )));
        }
        Ok(Self { views, seed })
    }

    pub fn contains(&self, v: usize) -> bool {
        self.views.contains(&v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagateConfig {
    /// Base weight of the temporal (previous frame, same view) source.
    pub w_temporal: f64,
    /// Base weight of each spatial (key view, same frame) source.
    pub w_spatial: f64,
    /// Forward-backward residual scale (px) of the temporal confidence.
    pub tau_temporal: f64,
    /// Depth residual scale (m) of the spatial confidence.
    pub tau_spatial: f64,
    /// Depth-consistency threshold of spatial warps.
    pub tau_d: f64,
    /// Use only the `k` key views whose cameras are closest to the target view.
    pub top_k: Option<usize>,
    /// Supervision weight of pixels that no source reached.
    pub fallback_weight: f64,
}

impl Default for PropagateConfig {
    fn default() -> Self {
        Self {
            w_temporal: 0.5,
            w_spatial: 1.0,
            tau_temporal: 1.0,
            tau_spatial: DEPTH_TOLERANCE,
            tau_d: DEPTH_TOLERANCE,
            top_k: None,
            fallback_weight: 0.05,
        }
    }
}

impl PropagateConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_temporal >= 0.0
            && self.w_spatial > 0.0
            && self.tau_temporal > 0.0
            && self.tau_spatial > 0.0
            && self.tau_d > 0.0
            && (0.0..=1.0).contains(&self.fallback_weight)
            && self.top_k != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid propagation settings {self:?}"
            )))
        }
    }
}

/// Editor settings for the first-frame phase.
#[derive(Clone, Debug)]
pub struct FirstFrameParams {
    pub strength: f64,
    pub steps: u32,
    pub instruction: String,
    pub guidance: Guidance,
    pub seed: u64,
    pub call_base: u64,
    /// Batch limit `B`.
    pub max_batch: usize,
}

#[derive(Clone, Debug)]
pub struct FirstFrames {
    pub edits: BTreeMap<usize, Image>,
    pub editor_calls: usize,
}

/// Edits frame 0 of every key view: `keys[0]` alone without an anchor, the
/// rest in batches of at most `B` anchored on `keys[0]`'s pair.
///
/// `inputs[v]` initializes view `v` (original or current render of frame 0).
pub fn edit_first_frames(
    scene: &Scene4D,
    keys: &KeySet,
    inputs: &BTreeMap<usize, Image>,
    editor: &dyn FrameEditor,
    params: &FirstFrameParams,
) -> Result<FirstFrames> {
    if params.max_batch == 0 {
        return Err(Error::InvalidRequest("batch limit must be positive".into()));
    }
    let input = |v: usize| {
        inputs
            .get(&v)
            .cloned()
            .ok_or_else(|| Error::InvalidRequest(format!("no first-frame input for view {v}")))
    };
    let original = |v: usize| scene.frame(v, 0).rgb.clone();
    let mut calls = 0u64;
    let mut call =
        |batch: Vec<Image>, originals: Vec<Image>, anchor: Option<Anchor>, label: String| {
            let req = EditRequest {
                batch,
                originals,
                anchor,
                instruction: params.instruction.clone(),
                strength: params.strength,
                steps: params.steps,
                guidance: params.guidance,
                max_batch: params.max_batch,
                seed: params.seed,
                call_index: params.call_base + calls,
            };
            calls += 1;
            editor.edit_batch(&req).map_err(|e| Error::EditorFailed {
                context: label,
                source: Box::new(e),
            })
        };

    let lead = keys.views[0];
    let lead_edit = call(
        vec![input(lead)?],
        vec![original(lead)],
        None,
        format!("first frame of view {lead}"),
    )?
    .pop()
    .ok_or_else(|| Error::InvalidRequest("editor returned no frames".into()))?;
    let anchor = Anchor {
        original: original(lead),
        edited: lead_edit.clone(),
    };
    let mut edits = BTreeMap::from([(lead, lead_edit)]);
    for chunk in keys.views[1..].chunks(params.max_batch) {
        let batch = chunk
            .iter()
            .map(|&v| input(v))
            .collect::<Result<Vec<_>>>()?;
        let originals = chunk.iter().map(|&v| original(v)).collect();
        let out = call(
            batch,
            originals,
            Some(anchor.clone()),
            format!("first frames of views {chunk:?}"),
        )?;
        if out.len() != chunk.len() {
            return Err(Error::InvalidRequest(format!(
                "editor returned {} of {} frames",
                out.len(),
                chunk.len()
            )));
        }
        edits.extend(chunk.iter().copied().zip(out));
    }
    Ok(FirstFrames {
        edits,
        editor_calls: calls as usize,
    })
}

/// Result of aggregating all sources for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagated {
    pub image: Image,
    /// Total source weight per pixel; 0 where flagged.
    pub weight: Raster<f64>,
    /// Pixels no source reached; they hold the original frame.
    pub flagged: Mask,
}

/// Weighted running mean over sources; `mean += (w / W) (c - mean)`, which is
/// exact for a single source.
struct Aggregate {
    sum_w: Raster<f64>,
    mean: Image,
}

impl Aggregate {
    fn new(w: usize, h: usize) -> Self {
        Self {
            sum_w: Raster::filled(w, h, 0.0),
            mean: Raster::filled(w, h, [0.0; 3]),
        }
    }

    fn add(&mut self, warp: &WarpResult, base: f64, tau: f64) {
        for (i, valid) in warp.mask.as_slice().iter().enumerate() {
            if !*valid {
                continue;
            }
            let w = base * (-warp.residual.as_slice()[i] / tau).exp();
            if !(w > 0.0) {
                continue;
            }
            let total = &mut self.sum_w.as_mut_slice()[i];
            *total += w;
            let f = w / *total;
            let c = warp.image.as_slice()[i];
            let m = &mut self.mean.as_mut_slice()[i];
            for k in 0..3 {
                m[k] += f * (c[k] - m[k]);
            }
        }
    }
}

/// Key views used as spatial sources for `view`, in ascending id order.
fn spatial_sources(
    scene: &Scene4D,
    view: usize,
    keys: impl Iterator<Item = usize>,
    top_k: Option<usize>,
) -> Vec<usize> {
    let mut keys: Vec<usize> = keys.collect();
    keys.sort_unstable();
    if let Some(k) = top_k {
        let center = scene.camera(view).center();
        let dist = |v: usize| (scene.camera(v).center() - center).norm();
        keys.sort_by(|a, b| dist(*a).total_cmp(&dist(*b)).then(a.cmp(b)));
        keys.truncate(k);
        keys.sort_unstable();
    }
    keys
}

/// Aggregates the temporal warp of `edited_prev` (the edit of `(view, t-1)`)
/// and the spatial warps of the key edits at `t` into frame `(view, t)`.
pub fn propagate_frame(
    scene: &Scene4D,
    view: usize,
    t: usize,
    edited_prev: Option<&Image>,
    key_edits: &BTreeMap<usize, &Image>,
    flows: &FlowCache,
    cfg: &PropagateConfig,
) -> Result<Propagated> {
    if key_edits.is_empty() {
        return Err(Error::InvalidRequest(format!(
            "no key edits to propagate into view {view} at t={t}"
        )));
    }
    let (w, h) = (scene.width(), scene.height());
    let mut agg = Aggregate::new(w, h);
    if let Some(prev) = edited_prev {
        if t == 0 {
            return Err(Error::InvalidRequest(
                "frame 0 has no previous frame".into(),
            ));
        }
        let warp = flows.link(scene, view, t)?.warp(prev)?;
        agg.add(&warp, cfg.w_temporal, cfg.tau_temporal);
    }
    let dst = scene.frame(view, t);
    for k in spatial_sources(scene, view, key_edits.keys().copied(), cfg.top_k) {
        let src = scene.frame(k, t);
        let warp = warp_spatial(
            key_edits[&k],
            &src.depth,
            scene.camera(k),
            scene.camera(view),
            &dst.depth,
            cfg.tau_d,
        )?;
        agg.add(&warp, cfg.w_spatial, cfg.tau_spatial);
    }
    let flagged = agg.sum_w.map(|s| *s <= 0.0);
    let image = Raster::from_fn(w, h, |x, y| {
        if *flagged.get(x, y) {
            *dst.rgb.get(x, y)
        } else {
            *agg.mean.get(x, y)
        }
    });
    Ok(Propagated {
        image,
        weight: agg.sum_w,
        flagged,
    })
}

/// Propagates fully edited key pseudo-views into every other view, one
/// timestep at a time, and assembles the dataset.
///
/// Key views get unit weights; other views get `min(total weight, 1)`, or
/// `fallback_weight` on flagged pixels.
pub fn propagate_all(
    scene: &Scene4D,
    key_views: &BTreeMap<usize, Vec<Image>>,
    flows: &FlowCache,
    cfg: &PropagateConfig,
    version: u64,
) -> Result<EditDataset> {
    cfg.validate()?;
    let (v_count, t_count) = (scene.views(), scene.frames());
    if key_views.is_empty() {
        return Err(Error::InvalidRequest("no key views to propagate".into()));
    }
    for (&k, frames) in key_views {
        if k >= v_count || frames.len() != t_count {
            return Err(Error::Shape(format!(
                "key view {k} has {} of {t_count} frames",
                frames.len()
            )));
        }
    }
    let others: Vec<usize> = (0..v_count)
        .filter(|v| !key_views.contains_key(v))
        .collect();
    let mut results: BTreeMap<usize, Vec<Propagated>> = others
        .iter()
        .map(|&v| (v, Vec::with_capacity(t_count)))
        .collect();
    for t in 0..t_count {
        let keys_t: BTreeMap<usize, &Image> = key_views.iter().map(|(&k, f)| (k, &f[t])).collect();
        let step: Vec<Propagated> = others
            .par_iter()
            .map(|&v| {
                let prev = (t > 0).then(|| &results[&v][t - 1].image);
                let p = propagate_frame(scene, v, t, prev, &keys_t, flows, cfg)?;
                let any_finite = scene
                    .frame(v, t)
                    .depth
                    .as_slice()
                    .iter()
                    .any(|d| d.is_finite());
                if any_finite && p.flagged.as_slice().iter().all(|f| *f) {
                    return Err(Error::ZeroCoverage { view: v, time: t });
                }
                Ok(p)
            })
            .collect::<Result<_>>()?;
        for (v, p) in others.iter().zip(step) {
            results.get_mut(v).expect("entry per view").push(p);
        }
    }
    let images: Vec<Vec<Image>> = (0..v_count)
        .map(|v| match key_views.get(&v) {
            Some(frames) => frames.clone(),
            None => results[&v].iter().map(|p| p.image.clone()).collect(),
        })
        .collect();
    let mut ds = EditDataset::from_images(images, key_views.keys().copied().collect(), version)?;
    for (v, frames) in results {
        for (t, p) in frames.into_iter().enumerate() {
            let weight = Raster::from_fn(p.weight.width(), p.weight.height(), |x, y| {
                if *p.flagged.get(x, y) {
                    cfg.fallback_weight
                } else {
                    p.weight.get(x, y).min(1.0)
                }
            });
            ds.set(v, t, p.image, weight, p.flagged)?;
        }
    }
    Ok(ds)
}
