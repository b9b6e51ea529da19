mod common;

use common::fieldcheck::{coarse, gradient_rel_err, scene, weighted_mean_gap};
use p4d_core::dataset::EditDataset;
use p4d_core::field::{FieldConfig, FitProblem, GridField4D};

#[test]
fn conflicting_supervision_averages() {
    for seed in 0..3 {
        let gap = weighted_mean_gap(seed);
        assert!(gap < 1e-3, "seed {seed}: {gap}");
    }
}

#[test]
fn gradient_matches_central_differences_on_random_parameters() {
    let err = gradient_rel_err(9, 100);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn loss_never_increases_at_reduced_rate() {
    let scene = scene();
    let mut f = coarse(&scene, 16.0);
    let table = f.ray_table(&scene).unwrap();
    let ds = EditDataset::from_images((0..2).map(|v| scene.view_images(v)).collect(), vec![], 1)
        .unwrap();
    let p = FitProblem::from_dataset(&f, &table, &ds).unwrap();
    let mut last = p.loss(&f);
    for _ in 0..100 {
        p.step(&mut f, 0.1).unwrap();
        let now = p.loss(&f);
        assert!(now <= last + 1e-12, "{now} > {last}");
        last = now;
    }
}

#[test]
fn zero_density_renders_background() {
    let scene = scene();
    let mut f = coarse(&scene, 0.0);
    let table = f.ray_table(&scene).unwrap();
    for c in f.colors_mut() {
        *c = 0.9;
    }
    let bg = f.background();
    for t in 0..scene.frames() {
        assert!(f
            .render_view(&table, 0, t)
            .as_slice()
            .iter()
            .all(|c| *c == bg));
    }
}

#[test]
fn uniform_opaque_field_shows_its_color() {
    let scene = scene();
    let mut f = coarse(&scene, 40.0);
    let table = f.ray_table(&scene).unwrap();
    for c in f.colors_mut() {
        *c = 0.25;
    }
    let img = f.render_view(&table, 1, 3);
    for (x, y, c) in img.indexed() {
        if scene.frame(1, 3).depth.get(x, y).is_finite() {
            assert!(
                c.iter().all(|v| (v - 0.25).abs() < 1e-9),
                "({x}, {y}) {c:?}"
            );
        }
    }
}

#[test]
fn checkpoint_round_trip_and_config_errors() {
    let scene = scene();
    let f = coarse(&scene, 16.0);
    let dir = tempfile::tempdir().unwrap();
    f.save(dir.path()).unwrap();
    assert_eq!(GridField4D::load(dir.path()).unwrap(), f);
    for cfg in [
        FieldConfig {
            resolution: [1, 8, 8],
            ..FieldConfig::default()
        },
        FieldConfig {
            opacity: -1.0,
            ..FieldConfig::default()
        },
        FieldConfig {
            init_color: 1.5,
            ..FieldConfig::default()
        },
    ] {
        assert!(GridField4D::for_scene(&scene, cfg).unwrap_err().is_config());
    }
}
