//! Independent reference implementations shared by the integration tests.

#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::Vector3;
use num::{BigRational, Signed, ToPrimitive, Zero};
use rand::Rng;

use p4d_core::raster::{Image, Mask, Raster};
use p4d_core::scene::{Camera, Primitive, Scene4D};

fn q(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// Exact rational projection into `dst` of the point at `depth` behind pixel `p`
/// of `src`, from the f64 camera parameters, rounded once at the end. `None`
/// only when the point is not in front of `dst`; no bounds check.
pub fn reproject_exact_unbounded(
    p: [f64; 2],
    depth: f64,
    src: &Camera,
    dst: &Camera,
) -> Option<([f64; 2], f64)> {
    let d = q(depth);
    let c = [
        (q(p[0]) - q(src.cx)) / q(src.fx) * &d,
        (q(p[1]) - q(src.cy)) / q(src.fy) * &d,
        d.clone(),
    ];
    let rel: Vec<BigRational> = (0..3).map(|j| &c[j] - q(src.translation[j])).collect();
    // world = Rᵀ (c - t)
    let world: Vec<BigRational> = (0..3)
        .map(|i| {
            (0..3).fold(BigRational::zero(), |acc, j| {
                acc + q(src.rotation[j][i]) * &rel[j]
            })
        })
        .collect();
    let cam: Vec<BigRational> = (0..3)
        .map(|i| {
            (0..3).fold(q(dst.translation[i]), |acc, j| {
                acc + q(dst.rotation[i][j]) * &world[j]
            })
        })
        .collect();
    if !cam[2].is_positive() {
        return None;
    }
    let u = q(dst.fx) * &cam[0] / &cam[2] + q(dst.cx);
    let v = q(dst.fy) * &cam[1] / &cam[2] + q(dst.cy);
    Some(([u.to_f64()?, v.to_f64()?], cam[2].to_f64()?))
}

/// How far an exact projection lies from the destination image rectangle
/// (negative inside).
pub fn outside_by(uv: [f64; 2], cam: &Camera) -> f64 {
    let (mx, my) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    [-uv[0], uv[0] - mx, -uv[1], uv[1] - my]
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Random 64×64 camera pair with a baseline of at most `baseline` meters.
pub fn random_rig(rng: &mut impl rand::Rng, baseline: f64) -> (Camera, Camera) {
    let eye = |rng: &mut dyn rand::RngCore| {
        let a: f64 = rng.gen_range(-1.2..1.2);
        let r: f64 = rng.gen_range(3.0..5.0);
        Vector3::new(r * a.sin(), rng.gen_range(0.2..2.0), r * a.cos())
    };
    let e1 = eye(rng);
    let offset = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let e2 = e1 + offset.normalize() * rng.gen_range(0.0..baseline);
    let target = |rng: &mut dyn rand::RngCore| {
        Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        )
    };
    let (t1, t2) = (target(rng), target(rng));
    let c1 = Camera::look_at(e1, t1, rng.gen_range(40.0..70.0), 64, 64);
    let c2 = Camera::look_at(e2, t2, rng.gen_range(40.0..70.0), 64, 64);
    (c1, c2)
}

fn scene_sdf(prims: &[Primitive], p: &Vector3<f64>, t: f64) -> f64 {
    prims
        .iter()
        .map(|s| s.sdf(p, t))
        .fold(f64::INFINITY, f64::min)
}

/// Sphere-traces the segment from `eye` to `target` at time `t`; true when
/// nothing is hit before coming within `reach` of the target.
pub fn unobstructed(
    prims: &[Primitive],
    eye: &Vector3<f64>,
    target: &Vector3<f64>,
    t: f64,
) -> bool {
    const HIT: f64 = 1e-6;
    const REACH: f64 = 2e-3;
    let len = (target - eye).norm();
    let dir = (target - eye) / len;
    let mut s = 0.0;
    for _ in 0..20_000 {
        if s >= len - REACH {
            return true;
        }
        let d = scene_sdf(prims, &(eye + dir * s), t);
        if d < HIT {
            return false;
        }
        s += d;
    }
    false
}

/// Which primitive surface a world point lies on at time `t`.
pub fn owner(prims: &[Primitive], p: &Vector3<f64>, t: f64) -> usize {
    (0..prims.len())
        .min_by(|&a, &b| {
            prims[a]
                .sdf(p, t)
                .abs()
                .total_cmp(&prims[b].sdf(p, t).abs())
        })
        .expect("primitives")
}

/// Labels of the visibility oracle for pixels of frame `to` traced back to `from`.
pub struct Visibility {
    /// The surface point seen at the pixel in frame `to` is also seen in frame `from`.
    pub covisible: Mask,
    /// Owning primitive per pixel (`usize::MAX` for sky).
    pub owner: Raster<usize>,
}

/// Two-frame visibility from the scene's known geometry and motion: lift each
/// pixel of frame `to` with its depth, move the point along its primitive's
/// motion to time `from`, and require it on-screen and unobstructed there.
pub fn visibility(scene: &Scene4D, view: usize, to: usize, from: usize) -> Visibility {
    let cam = scene.camera(view);
    let prims = scene.primitives();
    let depth = &scene.frame(view, to).depth;
    let (w, h) = depth.dims();
    let mut covisible = Raster::filled(w, h, false);
    let mut owners = Raster::filled(w, h, usize::MAX);
    for y in 0..h {
        for x in 0..w {
            let z = *depth.get(x, y);
            if !z.is_finite() {
                continue;
            }
            let p = cam.unproject(x as f64, y as f64, z);
            let k = owner(prims, &p, to as f64);
            owners.set(x, y, k);
            let moved = prims[k].to_world(&prims[k].to_local(&p, to as f64), from as f64);
            let Some((uv, _)) = cam.project(&moved) else {
                continue;
            };
            if cam.in_bounds(uv) && unobstructed(prims, &cam.center(), &moved, from as f64) {
                covisible.set(x, y, true);
            }
        }
    }
    Visibility {
        covisible,
        owner: owners,
    }
}

/// Pixels within one pixel (8-neighborhood) of a change in either oracle label.
pub fn boundary_band(vis: &Visibility) -> Mask {
    let (w, h) = vis.covisible.dims();
    Raster::from_fn(w, h, |x, y| {
        let (c, o) = (*vis.covisible.get(x, y), *vis.owner.get(x, y));
        (y.saturating_sub(1)..(y + 2).min(h)).any(|ny| {
            (x.saturating_sub(1)..(x + 2).min(w))
                .any(|nx| *vis.covisible.get(nx, ny) != c || *vis.owner.get(nx, ny) != o)
        })
    })
}

pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let n = (a.len() * 3) as f64;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]) * (p[k] - q[k])))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        99.0
    } else {
        -10.0 * mse.log10()
    }
}

/// Windowed SSIM with a 2-D Gaussian built directly and two-pass moments.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let luma = |c: &[f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    let (w, h) = a.dims();
    let mut kernel = [[0.0f64; 11]; 11];
    for (j, row) in kernel.iter_mut().enumerate() {
        for (i, k) in row.iter_mut().enumerate() {
            let (dx, dy) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(dx * dx + dy * dy) / 4.5).exp();
        }
    }
    let norm: f64 = kernel.iter().flatten().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut scores = Vec::new();
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let px = |img: &Image, i: usize, j: usize| luma(img.get(x0 + i, y0 + j));
            let mean = |img: &Image| {
                (0..11)
                    .flat_map(|j| (0..11).map(move |i| (i, j)))
                    .map(|(i, j)| kernel[j][i] * px(img, i, j))
                    .sum::<f64>()
                    / norm
            };
            let (ma, mb) = (mean(a), mean(b));
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let (da, db) = (px(a, i, j) - ma, px(b, i, j) - mb);
                    let k = kernel[j][i] / norm;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            scores.push(l * cs);
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Deterministic pseudo-random image in `[0, 1]`.
pub fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Raster::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

/// Forward–backward filter counts against the visibility oracle for the link
/// into frame `t` of `view`.
#[derive(Debug, Default, Clone, Copy)]
pub struct FilterCounts {
    pub masked: usize,
    /// Masked but not co-visible, outside the boundary band.
    pub false_pos: usize,
    /// Masked but not co-visible, inside the band.
    pub band_false_pos: usize,
    /// Co-visible outside the band but not masked.
    pub missed: usize,
    pub covisible: usize,
}

impl std::ops::AddAssign for FilterCounts {
    fn add_assign(&mut self, o: Self) {
        self.masked += o.masked;
        self.false_pos += o.false_pos;
        self.band_false_pos += o.band_false_pos;
        self.missed += o.missed;
        self.covisible += o.covisible;
    }
}

pub fn filter_counts(scene: &Scene4D, view: usize, t: usize) -> FilterCounts {
    use p4d_core::flow::{FlowCache, FlowEstimator, FB_TOLERANCE};
    let link = FlowCache::uncached(FlowEstimator::Analytic.source(), FB_TOLERANCE)
        .link(scene, view, t)
        .unwrap();
    let vis = visibility(scene, view, t, t - 1);
    let band = boundary_band(&vis);
    let mut c = FilterCounts::default();
    for (x, y, m) in link.mask.indexed() {
        let (cv, b) = (*vis.covisible.get(x, y), *band.get(x, y));
        c.masked += *m as usize;
        c.covisible += cv as usize;
        match (*m, cv, b) {
            (true, false, false) => c.false_pos += 1,
            (true, false, true) => c.band_false_pos += 1,
            (false, true, false) => c.missed += 1,
            _ => {}
        }
    }
    c
}

pub mod ops {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use ndarray::{Array, Array2, Dimension, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use p4d_core::editor::{
        anchor_attention, conv2d, conv3d, conv3d_weight_grad, inflate_conv2d_to_3d, EditRequest,
        FrameEditor, InstructionRegistry, PaletteEditor,
    };
    use p4d_core::raster::Image;

    pub fn random<D: Dimension>(rng: &mut ChaCha8Rng, shape: D) -> Array<f64, D> {
        Array::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    /// Max |anchor_attention(X, anchor = X) − self_attention(X)| on random inputs.
    pub fn duplication_gap(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, c, d) = (
            rng.gen_range(1..24),
            rng.gen_range(1..8),
            rng.gen_range(1..8),
        );
        let x = random(&mut rng, ndarray::Ix2(m, c));
        let (wq, wk, wv) = (
            random(&mut rng, ndarray::Ix2(c, d)),
            random(&mut rng, ndarray::Ix2(c, d)),
            random(&mut rng, ndarray::Ix2(c, d)),
        );
        let dup = anchor_attention(&x, Some(&x), &wq, &wk, &wv).unwrap();
        let own = anchor_attention(&x, None, &wq, &wk, &wv).unwrap();
        (&dup - &own).iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// The single-token example: identity weights, current [1], anchor [2].
    pub fn single_token() -> f64 {
        let one = ndarray::array![[1.0]];
        anchor_attention(&one, Some(&ndarray::array![[2.0]]), &one, &one, &one).unwrap()[[0, 0]]
    }

    /// Permuting anchor rows leaves the output bit-identical; permuting the
    /// current rows permutes the output rows bit-identically.
    pub fn permutation_exact(seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, a, c, d) = (
            rng.gen_range(1..12),
            rng.gen_range(1..12),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let x: Array2<f64> = random(&mut rng, ndarray::Ix2(m, c));
        let anc: Array2<f64> = random(&mut rng, ndarray::Ix2(a, c));
        let w: Vec<Array2<f64>> = (0..3)
            .map(|_| random(&mut rng, ndarray::Ix2(c, d)))
            .collect();
        let base = anchor_attention(&x, Some(&anc), &w[0], &w[1], &w[2]).unwrap();
        let shuffle = |n: usize, rng: &mut ChaCha8Rng| {
            let mut p: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(p.as_mut_slice(), rng);
            p
        };
        let pa = shuffle(a, &mut rng);
        let anc_p = anc.select(ndarray::Axis(0), &pa);
        let same = anchor_attention(&x, Some(&anc_p), &w[0], &w[1], &w[2]).unwrap() == base;
        let px = shuffle(m, &mut rng);
        let x_p = x.select(ndarray::Axis(0), &px);
        let rows = anchor_attention(&x_p, Some(&anc), &w[0], &w[1], &w[2]).unwrap()
            == base.select(ndarray::Axis(0), &px);
        same && rows
    }

    /// Every frame of the inflated 3-D convolution equals the 2-D convolution bit for bit.
    pub fn inflation_bit_equal(seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, h, w, ci, co) = (
            rng.gen_range(1..5),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let k = random(&mut rng, ndarray::Ix4(3, 3, ci, co));
        let video = random(&mut rng, ndarray::Ix4(t, h, w, ci));
        let out = conv3d(&video, &inflate_conv2d_to_3d(&k).unwrap()).unwrap();
        (0..t).all(|f| {
            let frame = video.index_axis(ndarray::Axis(0), f).to_owned();
            conv2d(&frame, &k).unwrap() == out.index_axis(ndarray::Axis(0), f)
        })
    }

    /// Worst relative error of `conv3d_weight_grad` against central differences
    /// of `L = Σ conv3d(x, K) ⊙ G`.
    pub fn conv_grad_rel_err(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kt, kh, kw) = (
            *[1usize, 3].get(rng.gen_range(0..2)).unwrap(),
            3,
            *[1usize, 3, 5].get(rng.gen_range(0..3)).unwrap(),
        );
        let (t, h, w, ci, co) = (
            rng.gen_range(1..5),
            rng.gen_range(2..7),
            rng.gen_range(2..7),
            rng.gen_range(1..3),
            rng.gen_range(1..3),
        );
        let x = random(&mut rng, ndarray::Ix4(t, h, w, ci));
        let g = random(&mut rng, ndarray::Ix4(t, h, w, co));
        let mut k = random(&mut rng, ndarray::Ix5(kt, kh, kw, ci, co));
        let grad = conv3d_weight_grad(&x, &g, (kt, kh, kw)).unwrap();
        let loss = |k: &ndarray::Array5<f64>| (&conv3d(&x, k).unwrap() * &g).sum();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        let idx: Vec<IxDyn> = k
            .indexed_iter()
            .map(|(i, _)| IxDyn(&[i.0, i.1, i.2, i.3, i.4]))
            .collect();
        for i in idx {
            let ix = (i[0], i[1], i[2], i[3], i[4]);
            let orig = k[ix];
            k[ix] = orig + eps;
            let up = loss(&k);
            k[ix] = orig - eps;
            let down = loss(&k);
            k[ix] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((grad[ix] - fd).abs() / fd.abs().max(grad[ix].abs()).max(1e-6));
        }
        worst
    }

    /// Palette editor that counts its calls.
    pub struct Counting {
        inner: PaletteEditor,
        pub calls: AtomicUsize,
    }

    impl Counting {
        pub fn new() -> Self {
            Self {
                inner: PaletteEditor::new(InstructionRegistry::builtin()),
                calls: AtomicUsize::new(0),
            }
        }

        pub fn count(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl FrameEditor for Counting {
        fn name(&self) -> &'static str {
            "counting"
        }

        fn edit_batch(&self, req: &EditRequest) -> p4d_core::Result<Vec<Image>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.edit_batch(req)
        }
    }

    pub fn ceil_div(a: usize, b: usize) -> usize {
        a.div_ceil(b)
    }
}

/// Reader loads racing a publisher that swaps uniformly filled render sets.
/// Returns (torn reads, distinct versions observed).
pub fn torn_read_trials(trials: usize) -> (usize, usize) {
    use p4d_core::pipeline::{RenderSet, SnapshotCell};
    use std::sync::atomic::{AtomicBool, Ordering};

    let make = |k: u64| {
        let v = k as f64;
        RenderSet::new(
            2,
            2,
            (0..4)
                .map(|i| Raster::filled(16, 16, [v, v + i as f64, v]))
                .collect(),
            k,
            k as usize,
        )
    };
    let cell = SnapshotCell::new(0, make(0));
    let done = AtomicBool::new(false);
    let mut torn = 0;
    let mut seen = std::collections::BTreeSet::new();
    std::thread::scope(|s| {
        s.spawn(|| {
            let mut k = 1;
            while !done.load(Ordering::Relaxed) {
                cell.publish(k, make(k));
                k += 1;
                std::thread::yield_now();
            }
        });
        let mut last = 0;
        for _ in 0..trials {
            let snap = cell.load();
            let r = &snap.value;
            let v = snap.version as f64;
            let whole = r.dataset_version == snap.version
                && r.fit_steps as u64 == snap.version
                && (0..2).all(|vv| {
                    (0..2).all(|t| {
                        r.get(vv, t)
                            .as_slice()
                            .iter()
                            .all(|c| *c == [v, v + (vv * 2 + t) as f64, v])
                    })
                });
            if !whole || snap.version < last {
                torn += 1;
            }
            last = snap.version;
            seen.insert(snap.version);
            std::thread::yield_now();
        }
        done.store(true, Ordering::Relaxed);
    });
    (torn, seen.len())
}

pub mod fieldcheck {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use p4d_core::dataset::EditDataset;
    use p4d_core::field::{FieldConfig, FitConfig, FitProblem, GridField4D, Supervision};
    use p4d_core::raster::Raster;
    use p4d_core::scene::{generate_scene, Scene4D, SceneSpec};

    pub fn scene() -> Scene4D {
        generate_scene(&SceneSpec::with_size(2, 4, 16, 16, 6)).unwrap()
    }

    pub fn coarse(scene: &Scene4D, opacity: f64) -> GridField4D {
        GridField4D::for_scene(
            scene,
            FieldConfig {
                resolution: [8; 3],
                opacity,
                ..FieldConfig::default()
            },
        )
        .unwrap()
    }

    /// Max deviation of fitted renders from `alpha * m + (1 - alpha) * bg` on
    /// surface pixels, where `m` is the 1:3 weighted mean of two random colors.
    pub fn weighted_mean_gap(seed: u64) -> f64 {
        let scene = scene();
        let mut f = coarse(&scene, 16.0);
        let table = f.ray_table(&scene).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ca, cb): ([f64; 3], [f64; 3]) = (rng.gen(), rng.gen());
        let (w, h) = (scene.width(), scene.height());
        let (a, b) = (Raster::filled(w, h, ca), Raster::filled(w, h, cb));
        let (wa, wb) = (Raster::filled(w, h, 1.0), Raster::filled(w, h, 3.0));
        let rays = table.rays(1, 2);
        let data = [
            Supervision {
                t: 2,
                rays,
                image: &a,
                weights: &wa,
            },
            Supervision {
                t: 2,
                rays,
                image: &b,
                weights: &wb,
            },
        ];
        FitProblem::new(&f, &data)
            .unwrap()
            .run(
                &mut f,
                &FitConfig {
                    steps: 4000,
                    lr: 1.0,
                },
            )
            .unwrap();
        let (alpha, bg) = (f.alpha(), f.background());
        let r = f.render_view(&table, 1, 2);
        let mut worst: f64 = 0.0;
        for (i, px) in r.as_slice().iter().enumerate() {
            if rays[i].is_some() {
                for k in 0..3 {
                    let want = alpha * (0.25 * ca[k] + 0.75 * cb[k]) + (1.0 - alpha) * bg[k];
                    worst = worst.max((px[k] - want).abs());
                }
            }
        }
        worst
    }

    /// Worst relative error of the analytic loss gradient against central
    /// differences on `samples` random active parameters.
    pub fn gradient_rel_err(seed: u64, samples: usize) -> f64 {
        let scene = scene();
        let mut f = coarse(&scene, 3.0);
        let table = f.ray_table(&scene).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in f.colors_mut() {
            *c = rng.gen_range(0.1..0.9);
        }
        let images = (0..2).map(|v| scene.view_images(v)).collect();
        let mut ds = EditDataset::from_images(images, vec![0], 1).unwrap();
        let weights = Raster::from_fn(16, 16, |x, y| 0.2 + ((x * 7 + y * 3) % 5) as f64 / 4.0);
        ds.set(
            0,
            1,
            scene.frame(0, 1).rgb.clone(),
            weights,
            Raster::filled(16, 16, false),
        )
        .unwrap();
        let p = FitProblem::from_dataset(&f, &table, &ds).unwrap();
        let g = p.gradient(&f);
        let active: Vec<usize> = (0..g.len()).filter(|i| g[*i].abs() > 1e-9).collect();
        assert!(active.len() >= samples);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let i = active[rng.gen_range(0..active.len())];
            let x0 = f.colors()[i];
            let eps = 1e-4f32;
            f.colors_mut()[i] = x0 + eps;
            let up = p.loss(&f);
            f.colors_mut()[i] = x0 - eps;
            let down = p.loss(&f);
            f.colors_mut()[i] = x0;
            let fd = (up - down) / (f64::from(x0 + eps) - f64::from(x0 - eps));
            worst = worst.max((fd - g[i]).abs() / g[i].abs());
        }
        worst
    }
}
