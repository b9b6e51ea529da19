//! Zero-padded "same" convolutions over channel-last tensors, and the
//! inflation of a 2-D kernel into a 3-D kernel that acts on each frame of a
//! video independently.
//!
//! Layouts: images `[H][W][Cin]`, videos `[T][H][W][Cin]`, 2-D kernels
//! `[Kh][Kw][Cin][Cout]`, 3-D kernels `[Kt][Kh][Kw][Cin][Cout]`. Kernel sides
//! must be odd.

use ndarray::{Array3, Array4, Array5, ArrayView3, ArrayView4, ArrayViewMut3, Axis};

use crate::error::{Error, Result};

fn check_odd(dims: &[usize], what: &str) -> Result<()> {
    if dims.iter().any(|d| d % 2 == 0) {
        return Err(Error::Shape(format!(
            "{what} kernel sides {dims:?} must be odd"
        )));
    }
    Ok(())
}

#[inline]
fn shifted(i: usize, k: usize, half: usize, n: usize) -> Option<usize> {
    let s = (i + k).checked_sub(half)?;
    (s < n).then_some(s)
}

/// Accumulates one frame of a 2-D convolution into `out`, adding onto existing values.
/// Every output element is summed in the order (ky, kx, ci), which the 3-D
/// path reproduces frame by frame.
fn accumulate_frame(input: ArrayView3<f64>, kernel: ArrayView4<f64>, mut out: ArrayViewMut3<f64>) {
    let (h, w, cin) = input.dim();
    let (kh, kw, _, cout) = kernel.dim();
    for y in 0..h {
        for x in 0..w {
            for co in 0..cout {
                let mut acc = out[[y, x, co]];
                for ky in 0..kh {
                    let Some(sy) = shifted(y, ky, kh / 2, h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(sx) = shifted(x, kx, kw / 2, w) else {
                            continue;
                        };
                        for ci in 0..cin {
                            acc += input[[sy, sx, ci]] * kernel[[ky, kx, ci, co]];
                        }
                    }
                }
                out[[y, x, co]] = acc;
            }
        }
    }
}

pub fn conv2d(input: &Array3<f64>, kernel: &Array4<f64>) -> Result<Array3<f64>> {
    let (h, w, cin) = input.dim();
    let (kh, kw, kc, cout) = kernel.dim();
    check_odd(&[kh, kw], "2-D")?;
    if kc != cin {
        return Err(Error::Shape(format!(
            "kernel expects {kc} input channels, got {cin}"
        )));
    }
    let mut out = Array3::zeros((h, w, cout));
    accumulate_frame(input.view(), kernel.view(), out.view_mut());
    Ok(out)
}

/// `∂L/∂kernel` given `∂L/∂output` for [`conv2d`].
pub fn conv2d_weight_grad(
    input: &Array3<f64>,
    grad_out: &Array3<f64>,
    kernel_dims: (usize, usize),
) -> Result<Array4<f64>> {
    let (h, w, cin) = input.dim();
    let (gh, gw, cout) = grad_out.dim();
    let (kh, kw) = kernel_dims;
    check_odd(&[kh, kw], "2-D")?;
    if (gh, gw) != (h, w) {
        return Err(Error::Shape(format!(
            "output grad {gh}x{gw} vs input {h}x{w}"
        )));
    }
    let mut g = Array4::zeros((kh, kw, cin, cout));
    for ky in 0..kh {
        for kx in 0..kw {
            for y in 0..h {
                let Some(sy) = shifted(y, ky, kh / 2, h) else {
                    continue;
                };
                for x in 0..w {
                    let Some(sx) = shifted(x, kx, kw / 2, w) else {
                        continue;
                    };
                    for ci in 0..cin {
                        let v = input[[sy, sx, ci]];
                        for co in 0..cout {
                            g[[ky, kx, ci, co]] += v * grad_out[[y, x, co]];
                        }
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Lifts a 3×3 kernel to a 1×3×3 kernel, so each frame is convolved exactly
/// as the 2-D kernel would.
pub fn inflate_conv2d_to_3d(kernel: &Array4<f64>) -> Result<Array5<f64>> {
    let (kh, kw, _, _) = kernel.dim();
    if (kh, kw) != (3, 3) {
        return Err(Error::Shape(format!(
            "inflation expects a 3x3 kernel, got {kh}x{kw}"
        )));
    }
    Ok(kernel.clone().insert_axis(Axis(0)))
}

pub fn conv3d(input: &Array4<f64>, kernel: &Array5<f64>) -> Result<Array4<f64>> {
    let (t, h, w, cin) = input.dim();
    let (kt, kh, kw, kc, cout) = kernel.dim();
    check_odd(&[kt, kh, kw], "3-D")?;
    if kc != cin {
        return Err(Error::Shape(format!(
            "kernel expects {kc} input channels, got {cin}"
        )));
    }
    let mut out = Array4::zeros((t, h, w, cout));
    for ti in 0..t {
        for dt in 0..kt {
            let Some(st) = shifted(ti, dt, kt / 2, t) else {
                continue;
            };
            accumulate_frame(
                input.index_axis(Axis(0), st),
                kernel.index_axis(Axis(0), dt),
                out.index_axis_mut(Axis(0), ti),
            );
        }
    }
    Ok(out)
}

/// `∂L/∂kernel` given `∂L/∂output` for [`conv3d`].
pub fn conv3d_weight_grad(
    input: &Array4<f64>,
    grad_out: &Array4<f64>,
    kernel_dims: (usize, usize, usize),
) -> Result<Array5<f64>> {
    let (t, h, w, cin) = input.dim();
    let (gt, gh, gw, cout) = grad_out.dim();
    let (kt, kh, kw) = kernel_dims;
    check_odd(&[kt, kh, kw], "3-D")?;
    if (gt, gh, gw) != (t, h, w) {
        return Err(Error::Shape(format!(
            "output grad {gt}x{gh}x{gw} vs input {t}x{h}x{w}"
        )));
    }
    let mut g = Array5::zeros((kt, kh, kw, cin, cout));
    for dt in 0..kt {
        let mut slice = g.index_axis_mut(Axis(0), dt);
        for ti in 0..t {
            let Some(st) = shifted(ti, dt, kt / 2, t) else {
                continue;
            };
            let frame = conv2d_weight_grad(
                &input.index_axis(Axis(0), st).to_owned(),
                &grad_out.index_axis(Axis(0), ti).to_owned(),
                (kh, kw),
            )?;
            slice += &frame;
        }
    }
    Ok(g)
}
