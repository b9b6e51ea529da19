//! Depth-based warping between views at the same timestep.

use crate::error::{Error, Result};
use crate::raster::{sample_rgb, DepthMap, Image, Mask, Raster, Taps};
use crate::scene::Camera;

/// Default depth-consistency threshold in meters.
pub const DEPTH_TOLERANCE: f64 = 1e-2;

/// A backward-warped image. Pixels with `mask == false` carry no information
/// (their `image` value is black and `src_coords` is `[-1, -1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    pub mask: Mask,
    pub src_coords: Raster<[f64; 2]>,
    /// Per-pixel disagreement of the warp's consistency check: depth residual in
    /// meters for spatial warps, forward-backward residual in pixels for temporal ones.
    pub residual: Raster<f64>,
}

impl WarpResult {
    pub(crate) fn empty(width: usize, height: usize) -> Self {
        Self {
            image: Raster::filled(width, height, [0.0; 3]),
            mask: Raster::filled(width, height, false),
            src_coords: Raster::filled(width, height, [-1.0; 2]),
            residual: Raster::filled(width, height, f64::INFINITY),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|m| **m).count()
    }
}

/// Maps pixel `p` at depth `depth` in `src` into `dst`.
///
/// Returns the destination pixel and its destination depth, or `None` when the
/// point is behind the destination camera or falls outside its image.
pub fn reproject_pixel(
    p: [f64; 2],
    depth: f64,
    src: &Camera,
    dst: &Camera,
) -> Result<Option<([f64; 2], f64)>> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::Domain(format!(
            "reprojection needs finite positive depth, got {depth}"
        )));
    }
    if src == dst {
        let inside = p[0] >= 0.0
            && p[1] >= 0.0
            && p[0] <= (dst.width - 1) as f64
            && p[1] <= (dst.height - 1) as f64;
        return Ok(inside.then_some((p, depth)));
    }
    let world = src.unproject(p[0], p[1], depth);
    Ok(dst.project(&world).filter(|(q, _)| dst.in_bounds(*q)))
}

/// Backward warp of `src` into the destination view.
///
/// Each finite-depth destination pixel is lifted with `depth_dst`, projected into
/// the source camera and bilinearly sampled. The pixel is masked out when the
/// projection leaves the source image, touches a sky tap, or the projected depth
/// disagrees with the interpolated source depth by more than `tau_d`.
pub fn warp_spatial(
    src_rgb: &Image,
    src_depth: &DepthMap,
    cam_src: &Camera,
    cam_dst: &Camera,
    depth_dst: &DepthMap,
    tau_d: f64,
) -> Result<WarpResult> {
    src_rgb.ensure_same_dims(src_depth, "warp_spatial source rgb/depth")?;
    if src_rgb.dims() != (cam_src.width, cam_src.height)
        || depth_dst.dims() != (cam_dst.width, cam_dst.height)
    {
        return Err(Error::Shape(
            "warp_spatial: image size does not match camera".into(),
        ));
    }
    let (w, h) = depth_dst.dims();
    let mut out = WarpResult::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = *depth_dst.get(x, y);
            if !d.is_finite() {
                continue;
            }
            let Some((q, z)) = reproject_pixel([x as f64, y as f64], d, cam_dst, cam_src)? else {
                continue;
            };
            let Some(taps) = Taps::new(q[0], q[1], src_rgb.width(), src_rgb.height()) else {
                continue;
            };
            if taps
                .iter()
                .any(|((sx, sy), _)| !src_depth.get(sx, sy).is_finite())
            {
                continue;
            }
            let src_z = crate::raster::sample_scalar(src_depth, &taps);
            let residual = (z - src_z).abs();
            out.residual.set(x, y, residual);
            if residual > tau_d {
                continue;
            }
            out.image.set(x, y, sample_rgb(src_rgb, &taps));
            out.mask.set(x, y, true);
            out.src_coords.set(x, y, q);
        }
    }
    Ok(out)
}
