//! Running the loop: a single-threaded alternation of editing and fitting, or
//! two workers (trainer and editor) exchanging versioned snapshots.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::snapshot::{RenderSet, SnapshotCell};
use super::Engine;
use crate::dataset::EditDataset;
use crate::error::{Error, Result};
use crate::field::{fit, view_psnr, FitConfig, FitProblem, GridField4D, RayTable};
use crate::metrics::{consistency_report, ConsistencyReport};
use crate::scene::Scene4D;

pub const LOG_FILE: &str = "log.jsonl";
pub const FIELD_DIR: &str = "field_final";

/// One line of `log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based; also the version of the dataset it produced.
    pub iteration: usize,
    pub keys: Vec<usize>,
    pub strength: f64,
    pub editor_calls: usize,
    pub call_bound: usize,
    pub consistency: ConsistencyReport,
    pub fit_loss: f64,
    pub fit_psnr: Vec<f64>,
    /// Seconds spent generating the dataset. Not deterministic.
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct RunResult {
    pub field: GridField4D,
    pub table: RayTable,
    /// The last published dataset (the originals when no iteration ran).
    pub dataset: EditDataset,
    pub log: Vec<IterationRecord>,
}

impl RunResult {
    /// Renders of every training (view, frame).
    pub fn renders(&self, scene: &Scene4D) -> RenderSet {
        render_all(&self.field, &self.table, scene, self.dataset.version, 0)
    }
}

fn originals(scene: &Scene4D) -> Result<EditDataset> {
    EditDataset::from_images(
        (0..scene.views()).map(|v| scene.view_images(v)).collect(),
        Vec::new(),
        0,
    )
}

fn render_all(
    field: &GridField4D,
    table: &RayTable,
    scene: &Scene4D,
    dataset_version: u64,
    steps: usize,
) -> RenderSet {
    let (v, t) = (scene.views(), scene.frames());
    let images = (0..v * t)
        .into_par_iter()
        .map(|i| field.render_view(table, i / t, i % t))
        .collect();
    RenderSet::new(v, t, images, dataset_version, steps)
}

fn fit_config(engine: &Engine) -> FitConfig {
    FitConfig {
        steps: engine.config.schedule.fit_steps,
        lr: engine.config.schedule.fit_lr,
    }
}

struct LogWriter(Option<File>);

impl LogWriter {
    fn create(out: Option<&Path>) -> Result<Self> {
        let Some(dir) = out else {
            return Ok(Self(None));
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        File::create(&path)
            .map(|f| Self(Some(f)))
            .map_err(|e| Error::io(path, e))
    }

    fn append(&mut self, rec: &IterationRecord) -> Result<()> {
        if let Some(f) = &mut self.0 {
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(LOG_FILE, e))?;
        }
        Ok(())
    }
}

fn iter_dir(out: &Path, iteration: usize) -> PathBuf {
    out.join(format!("iter_{iteration}"))
}

/// Single-threaded run that alternates a dataset regeneration with a full fit.
///
/// A failed [`step`](Self::step) changes nothing: the field, dataset and
/// renders of the last successful iteration stay in place.
pub struct SequentialRun<'e, 'a> {
    engine: &'e Engine<'a>,
    field: GridField4D,
    table: RayTable,
    dataset: EditDataset,
    renders: RenderSet,
    log: Vec<IterationRecord>,
    writer: LogWriter,
    out: Option<PathBuf>,
}

impl<'e, 'a> SequentialRun<'e, 'a> {
    /// Fits a fresh field to the original scene.
    pub fn new(engine: &'e Engine<'a>, out: Option<&Path>) -> Result<Self> {
        let scene = engine.scene;
        let mut field = GridField4D::for_scene(scene, engine.config.field.clone())?;
        let table = field.ray_table(scene)?;
        let dataset = originals(scene)?;
        let cfg = fit_config(engine);
        fit(&mut field, &table, &dataset, &cfg)?;
        let renders = render_all(&field, &table, scene, 0, cfg.steps);
        Ok(Self {
            engine,
            field,
            table,
            dataset,
            renders,
            log: Vec::new(),
            writer: LogWriter::create(out)?,
            out: out.map(Path::to_path_buf),
        })
    }

    pub fn field(&self) -> &GridField4D {
        &self.field
    }

    pub fn dataset(&self) -> &EditDataset {
        &self.dataset
    }

    pub fn renders(&self) -> &RenderSet {
        &self.renders
    }

    pub fn log(&self) -> &[IterationRecord] {
        &self.log
    }

    /// Iterations still to run.
    pub fn remaining(&self) -> usize {
        self.engine.config.iterations() - self.log.len()
    }

    /// Regenerates the dataset from the current renders and refits the field.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let engine = self.engine;
        let scene = engine.scene;
        let i = self.log.len();
        let started = Instant::now();
        let it = engine.run_iteration(i, &self.renders)?;
        let wall_time_s = started.elapsed().as_secs_f64();
        let consistency = consistency_report(
            &it.dataset,
            scene,
            &engine.flows,
            engine.config.propagate.tau_d,
        )?;
        let mut field = self.field.clone();
        let cfg = fit_config(engine);
        let report = fit(&mut field, &self.table, &it.dataset, &cfg)?;
        if let Some(out) = &self.out {
            it.dataset.save(&iter_dir(out, i + 1))?;
        }
        let rec = IterationRecord {
            iteration: i + 1,
            keys: it.keys,
            strength: it.strength,
            editor_calls: it.editor_calls,
            call_bound: it.call_bound,
            consistency,
            fit_loss: report.final_loss,
            fit_psnr: report.view_psnr,
            wall_time_s,
        };
        self.writer.append(&rec)?;
        self.renders = render_all(&field, &self.table, scene, it.dataset.version, cfg.steps);
        self.field = field;
        self.dataset = it.dataset;
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Saves the final field checkpoint when writing a run directory.
    pub fn finish(self) -> Result<RunResult> {
        if let Some(out) = &self.out {
            self.field.save(&out.join(FIELD_DIR))?;
        }
        Ok(RunResult {
            field: self.field,
            table: self.table,
            dataset: self.dataset,
            log: self.log,
        })
    }
}

pub fn run_sequential(engine: &Engine, out: Option<&Path>) -> Result<RunResult> {
    let mut run = SequentialRun::new(engine, out)?;
    while run.remaining() > 0 {
        run.step()?;
    }
    run.finish()
}

enum Event {
    Edited {
        iteration: usize,
        keys: Vec<usize>,
        strength: f64,
        calls: usize,
        bound: usize,
        consistency: ConsistencyReport,
        wall: f64,
    },
    Fitted {
        version: u64,
        loss: f64,
        psnr: Vec<f64>,
    },
}

/// Sets the shared stop flag if its worker unwinds.
struct StopOnPanic<'a>(&'a AtomicBool);

impl Drop for StopOnPanic<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.0.store(true, Ordering::SeqCst);
        }
    }
}

/// Two-worker run. The trainer fits continuously on the latest dataset and
/// publishes renders every `render_every` steps; the editor regenerates
/// datasets from those renders. Each dataset is fit for at most `fit_steps`
/// steps, and the run ends once the last one has had all of them.
pub fn run_parallel(engine: &Engine, out: Option<&Path>) -> Result<RunResult> {
    let scene = engine.scene;
    let n_it = engine.config.iterations();
    let field = GridField4D::for_scene(scene, engine.config.field.clone())?;
    let table = field.ray_table(scene)?;
    let datasets = SnapshotCell::new(0, originals(scene)?);
    let buffer = SnapshotCell::new(0, RenderSet::empty());
    let stop = AtomicBool::new(false);
    let mut writer = LogWriter::create(out)?;
    let (tx, rx) = mpsc::channel();

    let (trained, edited, log) = std::thread::scope(|s| {
        let trainer = {
            let tx = tx.clone();
            let (datasets, buffer, stop, table) = (&datasets, &buffer, &stop, &table);
            s.spawn(move || {
                let _guard = StopOnPanic(stop);
                let r = train(
                    engine,
                    field,
                    table,
                    datasets,
                    buffer,
                    stop,
                    &tx,
                    n_it as u64,
                );
                if r.is_err() {
                    stop.store(true, Ordering::SeqCst);
                }
                r
            })
        };
        let editor = {
            let tx = tx.clone();
            let (datasets, buffer, stop) = (&datasets, &buffer, &stop);
            s.spawn(move || {
                let _guard = StopOnPanic(stop);
                let r = edit(engine, datasets, buffer, stop, &tx, n_it, out);
                if r.is_err() {
                    stop.store(true, Ordering::SeqCst);
                }
                r
            })
        };
        drop(tx);
        let mut log = Vec::new();
        let mut edits = BTreeMap::new();
        let mut fits = BTreeMap::new();
        let mut write_err = None;
        for ev in rx {
            match ev {
                Event::Edited { iteration, .. } => {
                    edits.insert(iteration, ev);
                }
                Event::Fitted {
                    version,
                    loss,
                    psnr,
                } => {
                    fits.insert(version as usize, (loss, psnr));
                }
            }
            // Records are written in order, once both halves of an iteration arrived.
            while edits.contains_key(&(log.len() + 1)) && fits.contains_key(&(log.len() + 1)) {
                let next = log.len() + 1;
                let Some(Event::Edited {
                    iteration,
                    keys,
                    strength,
                    calls,
                    bound,
                    consistency,
                    wall,
                }) = edits.remove(&next)
                else {
                    unreachable!("only edit events are queued as edits")
                };
                let (loss, psnr) = fits.remove(&next).expect("checked above");
                let rec = IterationRecord {
                    iteration,
                    keys,
                    strength,
                    editor_calls: calls,
                    call_bound: bound,
                    consistency,
                    fit_loss: loss,
                    fit_psnr: psnr,
                    wall_time_s: wall,
                };
                if let Err(e) = writer.append(&rec) {
                    write_err.get_or_insert(e);
                    stop.store(true, Ordering::SeqCst);
                }
                log.push(rec);
            }
        }
        let trained = joined(trainer.join(), "trainer");
        let edited = joined(editor.join(), "editor");
        (trained, write_err.map_or(edited, Err), log)
    });
    edited?;
    let field =
        trained?.ok_or_else(|| Error::Worker("trainer stopped before the final fit".into()))?;
    if let Some(out) = out {
        field.save(&out.join(FIELD_DIR))?;
    }
    let dataset = datasets.load().value.clone();
    Ok(RunResult {
        field,
        table,
        dataset,
        log,
    })
}

fn joined<T>(r: std::thread::Result<Result<T>>, who: &str) -> Result<T> {
    r.unwrap_or_else(|_| Err(Error::Worker(format!("{who} worker panicked"))))
}

#[allow(clippy::too_many_arguments)]
fn train(
    engine: &Engine,
    mut field: GridField4D,
    table: &RayTable,
    datasets: &SnapshotCell<EditDataset>,
    buffer: &SnapshotCell<RenderSet>,
    stop: &AtomicBool,
    tx: &mpsc::Sender<Event>,
    final_version: u64,
) -> Result<Option<GridField4D>> {
    let sched = &engine.config.schedule;
    let mut current = datasets.load();
    let mut problem = FitProblem::from_dataset(&field, table, &current.value)?;
    let mut steps_on = 0;
    let mut publications = 0;
    let fitted = |field: &GridField4D,
                  problem: &FitProblem,
                  ds: &Arc<super::Snapshot<EditDataset>>| Event::Fitted {
        version: ds.version,
        loss: problem.loss(field),
        psnr: view_psnr(field, table, &ds.value),
    };
    loop {
        if stop.load(Ordering::SeqCst) {
            // Report what the current dataset reached so the partial log keeps it.
            if current.version > 0 {
                let _ = tx.send(fitted(&field, &problem, &current));
            }
            return Ok(None);
        }
        let latest = datasets.load();
        if latest.version != current.version {
            if latest.version < current.version || latest.value.version != latest.version {
                return Err(Error::Worker(format!(
                    "dataset version {} after {}",
                    latest.version, current.version
                )));
            }
            if current.version > 0 {
                let _ = tx.send(fitted(&field, &problem, &current));
            }
            current = latest;
            problem = FitProblem::from_dataset(&field, table, &current.value)?;
            steps_on = 0;
        }
        if steps_on < sched.fit_steps {
            let k = sched.render_every.min(sched.fit_steps - steps_on);
            problem.run(
                &mut field,
                &FitConfig {
                    steps: k,
                    lr: sched.fit_lr,
                },
            )?;
            steps_on += k;
            publications += 1;
            buffer.publish(
                publications,
                render_all(&field, table, engine.scene, current.version, steps_on),
            );
        } else if current.version == final_version {
            if final_version > 0 {
                let _ = tx.send(fitted(&field, &problem, &current));
            }
            return Ok(Some(field));
        } else {
            let v = current.version;
            datasets.wait_for(|s| s.version != v, || stop.load(Ordering::SeqCst));
        }
    }
}

fn edit(
    engine: &Engine,
    datasets: &SnapshotCell<EditDataset>,
    buffer: &SnapshotCell<RenderSet>,
    stop: &AtomicBool,
    tx: &mpsc::Sender<Event>,
    n_it: usize,
    out: Option<&Path>,
) -> Result<()> {
    let sched = &engine.config.schedule;
    let first_publication = sched.render_every.min(sched.fit_steps);
    for i in 0..n_it {
        let renders = if i == 0 {
            Arc::new(super::Snapshot {
                version: 0,
                value: RenderSet::empty(),
            })
        } else {
            let want = i as u64;
            match buffer.wait_for(
                |s| s.value.dataset_version == want && s.value.fit_steps >= first_publication,
                || stop.load(Ordering::SeqCst),
            ) {
                Some(r) => r,
                None => return Ok(()),
            }
        };
        let started = Instant::now();
        let it = engine.run_iteration(i, &renders.value)?;
        let wall = started.elapsed().as_secs_f64();
        let consistency = consistency_report(
            &it.dataset,
            engine.scene,
            &engine.flows,
            engine.config.propagate.tau_d,
        )?;
        if let Some(out) = out {
            it.dataset.save(&iter_dir(out, i + 1))?;
        }
        let _ = tx.send(Event::Edited {
            iteration: i + 1,
            keys: it.keys,
            strength: it.strength,
            calls: it.editor_calls,
            bound: it.call_bound,
            consistency,
            wall,
        });
        datasets.publish(it.dataset.version, it.dataset);
    }
    Ok(())
}
