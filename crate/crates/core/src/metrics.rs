//! Image quality and edit-consistency metrics.

use serde::{Deserialize, Serialize};

use crate::dataset::EditDataset;
use crate::error::{Error, Result};
use crate::flow::FlowCache;
use crate::geom::warp_spatial;
use crate::raster::{Image, Raster};
use crate::scene::Scene4D;

/// Reported in place of `+inf` for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR in dB for images in `[0, 1]`, over all channels.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b, "psnr")?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(psnr_from_mse(sum / (3 * a.len()) as f64))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Mean SSIM of the Rec.601 luma over every fully contained 11×11 Gaussian window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b, "ssim")?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (la, lb) = (a.luma(), b.luma());
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, gy) in g.iter().enumerate() {
                for (i, gx) in g.iter().enumerate() {
                    let wt = gy * gx;
                    let (p, q) = (*la.get(x0 + i, y0 + j), *lb.get(x0 + i, y0 + j));
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean squared disagreement between each frame's edit and the previous
    /// frame's edit carried forward by the flow, over forward–backward
    /// consistent pixels.
    pub temporal_var: f64,
    /// Mean absolute disagreement between each view's edit and every other
    /// view's edit warped into it, over co-visible pixels.
    pub spatial_err: f64,
    pub flagged_fraction: f64,
}

/// Scores how consistently `dataset` edits `scene`.
///
/// Both scores compare edit residuals (edit minus original): the warped residual
/// of the source frame against the residual of the target frame. Resampling
/// error of the scene itself therefore cancels, and an unedited dataset scores
/// zero up to interpolation of the residual.
pub fn consistency_report(
    dataset: &EditDataset,
    scene: &Scene4D,
    flows: &FlowCache,
    tau_d: f64,
) -> Result<ConsistencyReport> {
    if (dataset.views(), dataset.frames()) != (scene.views(), scene.frames())
        || dataset.dims() != (scene.width(), scene.height())
    {
        return Err(Error::Shape("dataset does not cover the scene".into()));
    }
    let residual = |v: usize, t: usize| -> Image {
        let (e, o) = (dataset.image(v, t), &scene.frame(v, t).rgb);
        Raster::from_fn(e.width(), e.height(), |x, y| {
            let (p, q) = (e.get(x, y), o.get(x, y));
            std::array::from_fn(|k| p[k] - q[k])
        })
    };
    let residuals: Vec<Vec<Image>> = (0..scene.views())
        .map(|v| (0..scene.frames()).map(|t| residual(v, t)).collect())
        .collect();
    let (mut t_sum, mut t_n) = (0.0, 0usize);
    for (v, res) in residuals.iter().enumerate() {
        for t in 1..scene.frames() {
            let warp = flows.link(scene, v, t)?.warp(&res[t - 1])?;
            accumulate(
                &warp.mask,
                &warp.image,
                &res[t],
                |d| d * d,
                &mut t_sum,
                &mut t_n,
            );
        }
    }
    let (mut s_sum, mut s_n) = (0.0, 0usize);
    for t in 0..scene.frames() {
        for a in 0..scene.views() {
            for b in 0..scene.views() {
                if a == b {
                    continue;
                }
                let (fa, fb) = (scene.frame(a, t), scene.frame(b, t));
                let warp = warp_spatial(
                    &residuals[a][t],
                    &fa.depth,
                    scene.camera(a),
                    scene.camera(b),
                    &fb.depth,
                    tau_d,
                )?;
                accumulate(
                    &warp.mask,
                    &warp.image,
                    &residuals[b][t],
                    f64::abs,
                    &mut s_sum,
                    &mut s_n,
                );
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(ConsistencyReport {
        temporal_var: mean(t_sum, t_n),
        spatial_err: mean(s_sum, s_n),
        flagged_fraction: dataset.flagged_fraction(),
    })
}

fn accumulate(
    mask: &Raster<bool>,
    warped: &Image,
    target: &Image,
    f: impl Fn(f64) -> f64,
    sum: &mut f64,
    n: &mut usize,
) {
    for ((m, p), q) in mask
        .as_slice()
        .iter()
        .zip(warped.as_slice())
        .zip(target.as_slice())
    {
        if *m {
            *sum += (0..3).map(|k| f(p[k] - q[k])).sum::<f64>();
            *n += 3;
        }
    }
}
