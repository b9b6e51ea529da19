use ndarray::{Array2, Array4, Array5, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    anchor_attention, blend, conv3d, inflate_conv2d_to_3d, EditRequest, FrameEditor,
    InstructionRegistry,
};
use crate::error::{Error, Result};
use crate::raster::{Image, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Latent channels.
    pub channels: usize,
    /// Pixels per latent cell along each axis.
    pub downsample: usize,
    /// Number of (inflated conv, anchor attention) blocks.
    pub blocks: usize,
    /// Seed for the fixed network weights.
    pub weight_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            downsample: 4,
            blocks: 2,
            weight_seed: 7,
        }
    }
}

/// A small stand-in for a latent diffusion editor: palette stylization in
/// pixel space, then a latent refinement through residual blocks of inflated
/// 3×3 convolutions and attention over `[anchor; current]` tokens. The latent
/// change is decoded and added back scaled by the guidance ratio.
pub struct ToyAttentionEditor {
    registry: InstructionRegistry,
    config: ToyConfig,
    encoder: Array2<f64>,
    decoder: Array2<f64>,
    kernels: Vec<Array5<f64>>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
}

impl ToyAttentionEditor {
    pub fn new(registry: InstructionRegistry, config: ToyConfig) -> Self {
        let c = config.channels.max(3);
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let mut normal = |scale: f64, shape: (usize, usize)| {
            Array2::from_shape_fn(shape, |_| {
                scale * (rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>() - 1.5)
            })
        };
        // 3×3 identity block keeps the encoder well conditioned.
        let mut encoder = normal(0.5, (c, 3));
        for i in 0..3 {
            encoder[[i, i]] += 1.0;
        }
        let decoder = pseudo_inverse(&encoder);
        let wq = normal(2.0, (c, c));
        let wk = normal(2.0, (c, c));
        let wv = Array2::eye(c);
        let kernels = (0..config.blocks)
            .map(|_| {
                let k = normal(0.05, (9 * c, c))
                    .into_shape_with_order((3, 3, c, c))
                    .expect("9c×c reshapes");
                inflate_conv2d_to_3d(&k).expect("3x3 kernel")
            })
            .collect();
        Self {
            registry,
            config: ToyConfig {
                channels: c,
                ..config
            },
            encoder,
            decoder,
            kernels,
            wq,
            wk,
            wv,
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn latent_dims(&self, img: &Image) -> (usize, usize) {
        let f = self.config.downsample.max(1);
        (img.height().div_ceil(f), img.width().div_ceil(f))
    }

    /// Average-pools each latent cell and maps its RGB into latent channels.
    fn encode(&self, img: &Image) -> Array2<f64> {
        let f = self.config.downsample.max(1);
        let (lh, lw) = self.latent_dims(img);
        let mut out = Array2::zeros((lh * lw, self.config.channels));
        for ly in 0..lh {
            for lx in 0..lw {
                let mut sum = [0.0; 3];
                let mut n = 0.0;
                for y in ly * f..((ly + 1) * f).min(img.height()) {
                    for x in lx * f..((lx + 1) * f).min(img.width()) {
                        let p = img.get(x, y);
                        for k in 0..3 {
                            sum[k] += p[k];
                        }
                        n += 1.0;
                    }
                }
                let rgb = ndarray::arr1(&sum.map(|s| s / n));
                out.row_mut(ly * lw + lx).assign(&self.encoder.dot(&rgb));
            }
        }
        out
    }
}

fn pseudo_inverse(e: &Array2<f64>) -> Array2<f64> {
    let m = nalgebra::DMatrix::from_fn(e.nrows(), e.ncols(), |i, j| e[[i, j]]);
    let p = m.pseudo_inverse(1e-12).expect("non-degenerate encoder");
    Array2::from_shape_fn((p.nrows(), p.ncols()), |(i, j)| p[(i, j)])
}

impl FrameEditor for ToyAttentionEditor {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn edit_batch(&self, req: &EditRequest) -> Result<Vec<Image>> {
        req.validate()?;
        let ins = self.registry.get(&req.instruction)?;
        let styled: Vec<Image> = req
            .originals
            .iter()
            .map(|o| o.map(|c| ins.apply(c)))
            .collect();
        let (lh, lw) = self.latent_dims(&styled[0]);
        let c = self.config.channels;
        let n = styled.len();

        let mut z = Array4::zeros((n, lh, lw, c));
        for (i, s) in styled.iter().enumerate() {
            let tokens = self
                .encode(s)
                .into_shape_with_order((lh, lw, c))
                .expect("token count matches grid");
            z.index_axis_mut(Axis(0), i).assign(&tokens);
        }
        let z_in = z.clone();
        let anchor = req.anchor.as_ref().map(|a| self.encode(&a.edited));
        for kernel in &self.kernels {
            z = &z + &conv3d(&z, kernel)?;
            for i in 0..n {
                let tokens = z
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((lh * lw, c))
                    .expect("grid");
                let attended =
                    anchor_attention(&tokens, anchor.as_ref(), &self.wq, &self.wk, &self.wv)?;
                z.index_axis_mut(Axis(0), i)
                    .assign(&attended.into_shape_with_order((lh, lw, c)).expect("grid"));
            }
        }
        let g = req.guidance.text / (req.guidance.text + req.guidance.image);
        if !g.is_finite() {
            return Err(Error::InvalidRequest(format!(
                "guidance {:?}",
                req.guidance
            )));
        }
        let s = req.effective_strength();
        let f = self.config.downsample.max(1);
        Ok((0..n)
            .map(|i| {
                let delta = &z.index_axis(Axis(0), i) - &z_in.index_axis(Axis(0), i);
                let init = &req.batch[i];
                Raster::from_fn(init.width(), init.height(), |x, y| {
                    let d = self
                        .decoder
                        .dot(&delta.slice(ndarray::s![y / f, x / f, ..]));
                    let st = styled[i].get(x, y);
                    let target = std::array::from_fn(|k| (st[k] + g * d[k]).clamp(0.0, 1.0));
                    blend(init.get(x, y), &target, s)
                })
            })
            .collect())
    }
}
