use serde::{Deserialize, Serialize};

use super::FlowField;
use crate::error::{Error, Result};
use crate::raster::{Image, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMatchConfig {
    /// Odd patch side length.
    pub patch: usize,
    /// Search radius in pixels along each axis.
    pub radius: usize,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self {
            patch: 7,
            radius: 8,
        }
    }
}

/// Sum over a `(2r+1)²` window with edge clamping, via two 1-D passes.
fn box_sum(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let ri = r as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horiz = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for o in -ri..=ri {
                s += src[y * w + clamp(x as isize + o, w)];
            }
            horiz[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for o in -ri..=ri {
                s += horiz[clamp(y as isize + o, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Sub-pixel offset of a parabola through three costs, in `[-0.5, 0.5]`.
fn parabola(minus: f64, center: f64, plus: f64) -> f64 {
    let denom = minus - 2.0 * center + plus;
    if denom > 0.0 {
        (0.5 * (minus - plus) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Dense flow from `a` to `b` by exhaustive SSD block matching.
///
/// For every pixel the integer displacement minimizing the RGB SSD over a
/// clamped patch is chosen (ties go to the shorter displacement), then each
/// axis is refined with a parabola through neighboring costs. The result is
/// marked valid everywhere; filtering is a separate step.
pub fn estimate_flow_blockmatch(a: &Image, b: &Image, cfg: &BlockMatchConfig) -> Result<FlowField> {
    a.ensure_same_dims(b, "block matching")?;
    let (w, h) = a.dims();
    if cfg.patch == 0 || cfg.patch.is_multiple_of(2) {
        return Err(Error::InvalidRequest(format!(
            "patch size {} must be odd",
            cfg.patch
        )));
    }
    if cfg.patch > w || cfg.patch > h {
        return Err(Error::InvalidRequest(format!(
            "patch {} larger than image {w}x{h}",
            cfg.patch
        )));
    }
    let r = cfg.radius as isize;
    let side = 2 * cfg.radius + 1;
    let half = cfg.patch / 2;
    // costs[d][pixel] for displacement index d = (dy + r) * side + (dx + r).
    let mut costs = Vec::with_capacity(side * side);
    let mut diff = vec![0.0; w * h];
    for dy in -r..=r {
        for dx in -r..=r {
            for y in 0..h {
                for x in 0..w {
                    let bx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let by = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let (p, q) = (a.get(x, y), b.get(bx, by));
                    diff[y * w + x] =
                        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                }
            }
            costs.push(box_sum(&diff, w, h, half));
        }
    }
    let cost =
        |dx: isize, dy: isize, i: usize| costs[((dy + r) as usize) * side + (dx + r) as usize][i];
    let vectors = Raster::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let mut best = (f64::INFINITY, 0isize, 0isize);
        for dy in -r..=r {
            let ty = y as isize + dy;
            if ty < 0 || ty >= h as isize {
                continue;
            }
            for dx in -r..=r {
                let tx = x as isize + dx;
                if tx < 0 || tx >= w as isize {
                    continue;
                }
                let c = cost(dx, dy, i);
                let closer = dx * dx + dy * dy < best.1 * best.1 + best.2 * best.2;
                if c < best.0 || (c == best.0 && closer) {
                    best = (c, dx, dy);
                }
            }
        }
        let (c0, dx, dy) = best;
        if c0 == 0.0 {
            return [dx as f64, dy as f64];
        }
        let sub_x = if dx > -r && dx < r && x as isize + dx > 0 && x as isize + dx < w as isize - 1
        {
            parabola(cost(dx - 1, dy, i), c0, cost(dx + 1, dy, i))
        } else {
            0.0
        };
        let sub_y = if dy > -r && dy < r && y as isize + dy > 0 && y as isize + dy < h as isize - 1
        {
            parabola(cost(dx, dy - 1, i), c0, cost(dx, dy + 1, i))
        } else {
            0.0
        };
        [dx as f64 + sub_x, dy as f64 + sub_y]
    });
    Ok(FlowField {
        vectors,
        valid: Raster::filled(w, h, true),
    })
}
