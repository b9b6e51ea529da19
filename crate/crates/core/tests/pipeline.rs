mod common;

use std::sync::atomic::{AtomicBool, Ordering};

use p4d_core::config::{execute, RunConfig, RUN_FILE};
use p4d_core::dataset::EditDataset;
use p4d_core::editor::{EditRequest, EditorKind, FrameEditor, InstructionRegistry, PaletteEditor};
use p4d_core::error::Error;
use p4d_core::field::{fit, FitConfig, GridField4D};
use p4d_core::pipeline::{
    run_parallel, run_sequential, Engine, Mode, PipelineConfig, RenderSet, SequentialRun,
    FIELD_DIR, LOG_FILE,
};
use p4d_core::raster::Image;
use p4d_core::scene::{generate_scene, save_scene, Scene4D, SceneSpec};

fn small_scene() -> Scene4D {
    generate_scene(&SceneSpec::with_size(3, 9, 24, 24, 5)).unwrap()
}

fn small_config(mode: Mode) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        mode,
        seed: 3,
        ..PipelineConfig::default()
    };
    cfg.schedule.iterations = 3;
    cfg.schedule.keys = 2;
    cfg.schedule.window = 4;
    cfg.schedule.fit_steps = 120;
    cfg.schedule.render_every = 40;
    cfg
}

/// Palette editor that fails, or panics, on request.
struct Faulty {
    inner: PaletteEditor,
    fail: AtomicBool,
    panic_at_iteration: Option<u64>,
}

impl Faulty {
    fn new() -> Self {
        Self {
            inner: PaletteEditor::new(InstructionRegistry::builtin()),
            fail: AtomicBool::new(false),
            panic_at_iteration: None,
        }
    }
}

impl FrameEditor for Faulty {
    fn name(&self) -> &'static str {
        "faulty"
    }

    fn edit_batch(&self, req: &EditRequest) -> p4d_core::Result<Vec<Image>> {
        if self.panic_at_iteration == Some(req.call_index >> 40) {
            panic!("injected editor panic");
        }
        if self.fail.load(Ordering::SeqCst) {
            return Err(Error::InvalidRequest("injected failure".into()));
        }
        self.inner.edit_batch(req)
    }
}

#[test]
fn failed_iteration_keeps_previous_state() {
    let scene = small_scene();
    let editor = Faulty::new();
    let engine = Engine::new(&scene, &editor, small_config(Mode::Full)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut run = SequentialRun::new(&engine, Some(dir.path())).unwrap();
    run.step().unwrap();
    let (field, dataset, renders) = (
        run.field().clone(),
        run.dataset().clone(),
        run.renders().clone(),
    );
    editor.fail.store(true, Ordering::SeqCst);
    let err = run.step().unwrap_err();
    assert!(matches!(err, Error::EditorFailed { .. }), "{err}");
    assert_eq!(run.field().colors(), field.colors());
    assert_eq!(run.dataset(), &dataset);
    assert_eq!(run.dataset().version, 1);
    assert_eq!(run.renders(), &renders);
    assert_eq!(run.log().len(), 1);
    assert!(!dir.path().join("iter_2").exists());
    // The run resumes once the editor recovers.
    editor.fail.store(false, Ordering::SeqCst);
    assert_eq!(run.step().unwrap().iteration, 2);
}

#[test]
fn zero_iterations_is_a_plain_fit() {
    let scene = small_scene();
    let editor = PaletteEditor::new(InstructionRegistry::builtin());
    let mut cfg = small_config(Mode::Full);
    cfg.schedule.iterations = 0;
    let engine = Engine::new(&scene, &editor, cfg.clone()).unwrap();
    let seq = run_sequential(&engine, None).unwrap();
    let par = run_parallel(&engine, None).unwrap();
    let mut plain = GridField4D::for_scene(&scene, cfg.field.clone()).unwrap();
    let table = plain.ray_table(&scene).unwrap();
    let originals = EditDataset::from_images(
        (0..3).map(|v| scene.view_images(v)).collect(),
        Vec::new(),
        0,
    )
    .unwrap();
    fit(
        &mut plain,
        &table,
        &originals,
        &FitConfig {
            steps: cfg.schedule.fit_steps,
            lr: cfg.schedule.fit_lr,
        },
    )
    .unwrap();
    assert_eq!(seq.field.colors(), plain.colors());
    assert_eq!(par.field.colors(), plain.colors());
    assert!(seq.log.is_empty() && par.log.is_empty());
    assert_eq!(seq.dataset, originals);
}

#[test]
fn palette_on_static_scene_reaches_a_fixed_point() {
    let scene = generate_scene(&SceneSpec::static_scene(2, 6, 24, 24, 1)).unwrap();
    let editor = PaletteEditor::new(InstructionRegistry::builtin());
    let mut cfg = small_config(Mode::Full);
    cfg.schedule.keys = 2;
    cfg.schedule.iterations = 3;
    let engine = Engine::new(&scene, &editor, cfg).unwrap();
    let mut run = SequentialRun::new(&engine, None).unwrap();
    let mut datasets = Vec::new();
    while run.remaining() > 0 {
        run.step().unwrap();
        datasets.push(run.dataset().clone());
    }
    for later in &datasets[2..] {
        let prev = &datasets[1];
        for v in 0..2 {
            for t in 0..6 {
                let gap = prev.image(v, t).mean_abs_diff(later.image(v, t)).unwrap();
                assert!(gap < 1e-9, "view {v} frame {t}: {gap:e}");
            }
        }
    }
}

#[test]
fn parallel_matches_sequential_with_deterministic_editor() {
    let scene = small_scene();
    let editor = PaletteEditor::new(InstructionRegistry::builtin());
    let engine = Engine::new(&scene, &editor, small_config(Mode::Full)).unwrap();
    let seq = run_sequential(&engine, None).unwrap();
    let par = run_parallel(&engine, None).unwrap();
    assert_eq!(par.log.len(), 3);
    assert_eq!(
        par.log.iter().map(|r| r.iteration).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
    let (a, b) = (seq.renders(&scene), par.renders(&scene));
    let mut total = 0.0;
    for v in 0..scene.views() {
        for t in 0..scene.frames() {
            total += a.get(v, t).mean_abs_diff(b.get(v, t)).unwrap();
        }
    }
    let mad = total / (scene.views() * scene.frames()) as f64;
    assert!(mad < 1.0 / 255.0, "mean abs diff {mad}");
}

#[test]
fn worker_panic_shuts_down_and_keeps_partial_log() {
    let scene = small_scene();
    let editor = Faulty {
        panic_at_iteration: Some(1),
        ..Faulty::new()
    };
    let engine = Engine::new(&scene, &editor, small_config(Mode::Full)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_parallel(&engine, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Worker(_)), "{err}");
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1, "{log}");
    assert!(dir.path().join("iter_1").is_dir());
    assert!(!dir.path().join(FIELD_DIR).exists());
}

#[test]
fn render_buffer_reads_are_never_torn() {
    let (torn, versions) = common::torn_read_trials(10_000);
    assert_eq!(torn, 0);
    assert!(versions > 1, "publisher never overlapped the reader");
}

#[test]
fn stale_render_buffer_is_rejected() {
    let scene = small_scene();
    let editor = PaletteEditor::new(InstructionRegistry::builtin());
    let engine = Engine::new(&scene, &editor, small_config(Mode::Full)).unwrap();
    assert!(engine.run_iteration(1, &RenderSet::empty()).is_err());
}

fn run_dir_config(scene_dir: &std::path::Path, out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig {
        scene: Some(scene_dir.to_path_buf()),
        editor: EditorKind::Jitter,
        seed: 11,
        out: Some(out.to_path_buf()),
        ..RunConfig::default()
    };
    cfg.schedule.iterations = 2;
    cfg.schedule.keys = 2;
    cfg.schedule.window = 4;
    cfg.schedule.fit_steps = 60;
    cfg
}

/// `log.jsonl` without the wall-clock field.
fn metric_lines(dir: &std::path::Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut()
                .unwrap()
                .remove("wall_time_s")
                .expect("wall time recorded");
            v
        })
        .collect()
}

#[test]
fn seeded_runs_are_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let scene_dir = root.path().join("scene");
    save_scene(&small_scene(), &scene_dir).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    execute(&run_dir_config(&scene_dir, &a)).unwrap();
    execute(&run_dir_config(&scene_dir, &b)).unwrap();
    assert_eq!(
        std::fs::read(a.join(RUN_FILE)).unwrap(),
        std::fs::read(b.join(RUN_FILE)).unwrap()
    );
    let (la, lb) = (metric_lines(&a), metric_lines(&b));
    assert_eq!(la.len(), 2);
    assert_eq!(la, lb);
    for k in 1..=2 {
        let (da, db) = (
            EditDataset::load(&a.join(format!("iter_{k}"))).unwrap(),
            EditDataset::load(&b.join(format!("iter_{k}"))).unwrap(),
        );
        assert_eq!(da, db);
    }
    let mut c = run_dir_config(&scene_dir, &root.path().join("c"));
    c.seed = 12;
    execute(&c).unwrap();
    assert_ne!(metric_lines(&root.path().join("c")), la);
}
