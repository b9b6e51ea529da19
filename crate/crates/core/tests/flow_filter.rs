mod common;

use common::{boundary_band, filter_counts, visibility, FilterCounts};
use p4d_core::flow::{fb_consistency_mask, FlowCache, FlowEstimator, FlowField, FB_TOLERANCE};
use p4d_core::raster::Raster;
use p4d_core::scene::{generate_scene, SceneSpec};

#[test]
fn fb_mask_is_sound_on_default_scene() {
    let scene = generate_scene(&SceneSpec::default_scene()).unwrap();
    let mut total = FilterCounts::default();
    for view in 0..scene.views() {
        for t in (1..scene.frames()).step_by(7) {
            total += filter_counts(&scene, view, t);
        }
    }
    eprintln!("{total:?}");
    assert!(total.masked > 10_000);
    assert!(
        (total.false_pos as f64) < 0.005 * total.masked as f64,
        "{total:?}"
    );
    assert!(
        (total.missed as f64) < 0.005 * total.covisible as f64,
        "{total:?}"
    );
}

#[test]
fn disoccluded_region_is_unmasked() {
    let scene = generate_scene(&SceneSpec::default_scene()).unwrap();
    let flows = FlowCache::new(FlowEstimator::Analytic.source(), FB_TOLERANCE);
    let mut revealed = 0;
    for v in 0..scene.views() {
        for t in (1..scene.frames()).step_by(5) {
            let link = flows.link(&scene, v, t).unwrap();
            let vis = visibility(&scene, v, t, t - 1);
            let band = boundary_band(&vis);
            for (x, y, cv) in vis.covisible.indexed() {
                let on_surface = *vis.owner.get(x, y) != usize::MAX;
                if on_surface && !cv {
                    revealed += 1;
                }
                if on_surface && !cv && !band.get(x, y) {
                    assert!(
                        !link.mask.get(x, y),
                        "revealed pixel ({x}, {y}) of view {v} at t={t} passed the filter"
                    );
                }
            }
        }
    }
    assert!(revealed > 0, "the moving sphere should reveal some surface");
}

#[test]
fn static_scene_links_are_identity() {
    let scene = generate_scene(&SceneSpec::static_scene(2, 3, 32, 32, 1)).unwrap();
    let flows = FlowCache::new(FlowEstimator::Analytic.source(), FB_TOLERANCE);
    for v in 0..2 {
        let link = flows.link(&scene, v, 2).unwrap();
        let prev = &scene.frame(v, 1).rgb;
        let warped = link.warp(prev).unwrap();
        for (x, y, m) in warped.mask.indexed() {
            let surface = scene.frame(v, 2).depth.get(x, y).is_finite();
            assert_eq!(*m, surface);
            if *m {
                assert_eq!(warped.image.get(x, y), prev.get(x, y));
            }
        }
    }
}

#[test]
fn fb_mask_rejects_inconsistent_vectors() {
    let mut fwd = FlowField::zeros(8, 8);
    let bwd = FlowField::zeros(8, 8);
    fwd.vectors.set(3, 3, [2.0, 0.0]);
    fwd.vectors.set(4, 4, [0.5, 0.0]);
    fwd.valid.set(5, 5, false);
    let mask = fb_consistency_mask(&fwd, &bwd, FB_TOLERANCE).unwrap();
    assert!(!mask.get(3, 3));
    assert!(mask.get(4, 4));
    assert!(!mask.get(5, 5));
    let far = FlowField {
        vectors: Raster::filled(8, 8, [20.0, 0.0]),
        valid: Raster::filled(8, 8, true),
    };
    assert!(fb_consistency_mask(&far, &bwd, FB_TOLERANCE)
        .unwrap()
        .as_slice()
        .iter()
        .all(|m| !m));
}
