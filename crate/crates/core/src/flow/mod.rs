//! Temporal correspondence within one pseudo-view: flow fields, forward–backward
//! filtering, flow-guided warping, and the interchangeable flow estimators.

mod blockmatch;
mod cache;

pub use blockmatch::{estimate_flow_blockmatch, BlockMatchConfig};
pub use cache::{FlowCache, TemporalLink};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::WarpResult;
use crate::raster::{sample_rgb, sample_vec2, Image, Mask, Raster, Taps};
use crate::scene::Scene4D;

/// Default forward–backward consistency threshold in pixels.
pub const FB_TOLERANCE: f64 = 1.0;

/// Per-pixel displacement from one frame to another, plus validity.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub vectors: Raster<[f64; 2]>,
    pub valid: Mask,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            vectors: Raster::filled(width, height, [0.0; 2]),
            valid: Raster::filled(width, height, true),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vectors.dims()
    }
}

/// `|fwd(p) + bwd(p + fwd(p))|` per pixel; `+inf` where `fwd` is invalid, the
/// endpoint leaves the image, or any contributing `bwd` tap is invalid.
pub fn fb_residual(fwd: &FlowField, bwd: &FlowField) -> Result<Raster<f64>> {
    fwd.vectors
        .ensure_same_dims(&bwd.vectors, "fb_consistency")?;
    let (w, h) = fwd.dims();
    Ok(Raster::from_fn(w, h, |x, y| {
        if !*fwd.valid.get(x, y) {
            return f64::INFINITY;
        }
        let f = fwd.vectors.get(x, y);
        let Some(taps) = Taps::new(x as f64 + f[0], y as f64 + f[1], w, h) else {
            return f64::INFINITY;
        };
        if taps.iter().any(|((tx, ty), _)| !*bwd.valid.get(tx, ty)) {
            return f64::INFINITY;
        }
        let b = sample_vec2(&bwd.vectors, &taps);
        ((f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2)).sqrt()
    }))
}

/// Pixels whose forward vector is undone by the backward vector at its endpoint.
pub fn fb_consistency_mask(fwd: &FlowField, bwd: &FlowField, tau_fb: f64) -> Result<Mask> {
    Ok(fb_residual(fwd, bwd)?.map(|r| *r <= tau_fb))
}

/// Warps the edit of frame `t-1` into frame `t`.
///
/// `backward` maps pixels of frame `t` to frame `t-1`; only pixels where `mask`
/// is set are sampled, everything else is left for inpainting.
pub fn warp_temporal(prev_edited: &Image, backward: &FlowField, mask: &Mask) -> Result<WarpResult> {
    prev_edited.ensure_same_dims(&backward.vectors, "warp_temporal image/flow")?;
    prev_edited.ensure_same_dims(mask, "warp_temporal image/mask")?;
    let (w, h) = prev_edited.dims();
    let mut out = WarpResult::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) {
                continue;
            }
            let b = backward.vectors.get(x, y);
            let src = [x as f64 + b[0], y as f64 + b[1]];
            let Some(taps) = Taps::new(src[0], src[1], w, h) else {
                continue;
            };
            out.image.set(x, y, sample_rgb(prev_edited, &taps));
            out.mask.set(x, y, true);
            out.src_coords.set(x, y, src);
            out.residual.set(x, y, 0.0);
        }
    }
    Ok(out)
}

/// A flow estimator over the frames of a scene. Implementations are
/// interchangeable everywhere flow is consumed.
pub trait FlowSource: Send + Sync {
    /// Flow from frame `from` to frame `to` of `view` (adjacent frames).
    fn flow(&self, scene: &Scene4D, view: usize, from: usize, to: usize) -> Result<FlowField>;

    fn name(&self) -> &'static str;
}

/// Exact flow derived from known scene motion.
#[derive(Clone, Copy, Debug, Default)]
pub struct AnalyticFlow;

impl FlowSource for AnalyticFlow {
    fn flow(&self, scene: &Scene4D, view: usize, from: usize, to: usize) -> Result<FlowField> {
        scene.correspondence(view, from, to)
    }

    fn name(&self) -> &'static str {
        "analytic"
    }
}

/// Block-matching estimate on the rendered RGB frames.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockMatchFlow(pub BlockMatchConfig);

impl FlowSource for BlockMatchFlow {
    fn flow(&self, scene: &Scene4D, view: usize, from: usize, to: usize) -> Result<FlowField> {
        if view >= scene.views() || from >= scene.frames() || to >= scene.frames() {
            return Err(Error::OutOfRange(format!(
                "block-match flow view {view} {from}->{to}"
            )));
        }
        estimate_flow_blockmatch(
            &scene.frame(view, from).rgb,
            &scene.frame(view, to).rgb,
            &self.0,
        )
    }

    fn name(&self) -> &'static str {
        "blockmatch"
    }
}

/// Serializable estimator choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowEstimator {
    #[default]
    Analytic,
    Blockmatch,
}

impl FlowEstimator {
    pub fn source(self) -> Box<dyn FlowSource> {
        match self {
            FlowEstimator::Analytic => Box::new(AnalyticFlow),
            FlowEstimator::Blockmatch => Box::new(BlockMatchFlow::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Raster::from_fn(w, h, |x, y| [x as f64 / w as f64, y as f64 / h as f64, 0.5])
    }

    #[test]
    fn zero_fields_fully_consistent() {
        let z = FlowField::zeros(8, 6);
        assert!(fb_consistency_mask(&z, &z, FB_TOLERANCE)
            .unwrap()
            .as_slice()
            .iter()
            .all(|m| *m));
    }

    #[test]
    fn off_screen_endpoint_is_inconsistent() {
        let mut f = FlowField::zeros(8, 8);
        f.vectors.set(7, 3, [2.0, 0.0]);
        let b = FlowField::zeros(8, 8);
        let m = fb_consistency_mask(&f, &b, FB_TOLERANCE).unwrap();
        assert!(!*m.get(7, 3));
        assert!(*m.get(6, 3));
    }

    #[test]
    fn consistent_translation_passes() {
        let mut f = FlowField::zeros(8, 8);
        let mut b = FlowField::zeros(8, 8);
        for v in f.vectors.as_mut_slice() {
            *v = [1.0, 0.0];
        }
        for v in b.vectors.as_mut_slice() {
            *v = [-1.0, 0.0];
        }
        let m = fb_consistency_mask(&f, &b, FB_TOLERANCE).unwrap();
        assert!(*m.get(3, 3));
        assert!(!*m.get(7, 3));
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let img = ramp(9, 7);
        let z = FlowField::zeros(9, 7);
        let r = warp_temporal(&img, &z, &z.valid).unwrap();
        assert_eq!(r.image, img);
        assert!(r.mask.as_slice().iter().all(|m| *m));
    }

    #[test]
    fn chained_static_warps_preserve_edit() {
        let img = ramp(9, 7);
        let z = FlowField::zeros(9, 7);
        let mut cur = img.clone();
        for _ in 0..5 {
            cur = warp_temporal(&cur, &z, &z.valid).unwrap().image;
        }
        assert_eq!(cur, img);
    }

    #[test]
    fn masked_pixels_left_empty() {
        let img = ramp(6, 6);
        let z = FlowField::zeros(6, 6);
        let mut m = z.valid.clone();
        m.set(2, 2, false);
        let r = warp_temporal(&img, &z, &m).unwrap();
        assert!(!*r.mask.get(2, 2));
        assert_eq!(*r.src_coords.get(2, 2), [-1.0, -1.0]);
    }

    #[test]
    fn warp_temporal_shape_mismatch() {
        let img = ramp(6, 6);
        let z = FlowField::zeros(5, 6);
        assert!(matches!(
            warp_temporal(&img, &z, &z.valid),
            Err(Error::Shape(_))
        ));
    }
}
