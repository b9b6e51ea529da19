//! The `p4d` command line: `gen`, `run`, `eval` and `dump`.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
//! Failures print one JSON object to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{execute, RunConfig, RUN_FILE};
use crate::dataset::EditDataset;
use crate::editor::EditorKind;
use crate::error::{Error, Result};
use crate::field::GridField4D;
use crate::flow::{FlowCache, FB_TOLERANCE};
use crate::metrics::{consistency_report, psnr, ssim, ConsistencyReport};
use crate::pipeline::{Mode, RunResult};
use crate::raster::Image;
use crate::scene::{generate_scene, save_scene, Scene4D, SceneSpec};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "p4d",
    version,
    about = "Instruction-guided editing of synthetic 4D scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory.
    Gen(GenArgs),
    /// Run the editing pipeline and write a run directory.
    Run(RunArgs),
    /// Score one run, or compare two.
    Eval(EvalArgs),
    /// Render one (view, time) of a field checkpoint to PNG.
    Dump(DumpArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene spec JSON; the default scene when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    iters: Option<usize>,
    /// Window width B.
    #[arg(long)]
    window: Option<usize>,
    /// Key views per iteration.
    #[arg(long)]
    keys: Option<usize>,
    #[arg(long, value_enum)]
    editor: Option<EditorKind>,
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    run: PathBuf,
    /// Second run to compare against.
    other: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct DumpArgs {
    /// Run directory (uses its scene and final field).
    #[arg(long, conflicts_with_all = ["field", "scene"])]
    run: Option<PathBuf>,
    /// Field checkpoint directory.
    #[arg(long, requires = "scene")]
    field: Option<PathBuf>,
    /// Scene whose cameras to render with.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    view: usize,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn report_error(kind: &str, message: String, code: i32) -> i32 {
    let line = serde_json::to_string(&ErrorReport {
        error: kind,
        message,
        exit_code: code,
    })
    .expect("error serializes");
    let _ = writeln!(std::io::stderr(), "{line}");
    code
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            return report_error("usage", e.to_string(), EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Dump(a) => cmd_dump(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            };
            report_error(e.kind(), e.to_string(), code)
        }
    }
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| crate::error::json_error(p, &text, &e))?
        }
        None => SceneSpec::default_scene(),
    };
    for (slot, flag) in [
        (&mut spec.views, a.views),
        (&mut spec.frames, a.frames),
        (&mut spec.width, a.width),
        (&mut spec.height, a.height),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let scene = generate_scene(&spec)?;
    save_scene(&scene, &a.out)?;
    println!(
        "wrote {} views x {} frames to {}",
        scene.views(),
        scene.frames(),
        a.out.display()
    );
    Ok(())
}

/// The config a `run` invocation resolves to: file values, then flags.
fn resolve_run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.scene.is_some() {
        cfg.scene = a.scene.clone();
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(n) = a.iters {
        cfg.schedule.iterations = n;
    }
    if let Some(b) = a.window {
        cfg.schedule.window = b;
    }
    if let Some(n) = a.keys {
        cfg.schedule.keys = n;
    }
    if let Some(e) = a.editor {
        cfg.editor = e;
    }
    if let Some(i) = &a.instruction {
        cfg.instruction = i.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.parallel |= a.parallel;
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    if cfg.out.is_none() {
        return Err(Error::Config("no output directory (--out)".into()));
    }
    Ok(cfg)
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = resolve_run_config(a)?;
    let result = execute(&cfg)?;
    print_run_table(&result);
    Ok(())
}

fn print_run_table(r: &RunResult) {
    println!(
        "{:>4}  {:<16} {:>11} {:>13} {:>12} {:>9}",
        "iter", "keys", "calls", "temporal_var", "spatial_err", "fit_psnr"
    );
    for rec in &r.log {
        let psnr = rec.fit_psnr.iter().sum::<f64>() / rec.fit_psnr.len().max(1) as f64;
        println!(
            "{:>4}  {:<16} {:>5}/{:<5} {:>13.4e} {:>12.4e} {:>9.2}",
            rec.iteration,
            format!("{:?}", rec.keys),
            rec.editor_calls,
            rec.call_bound,
            rec.consistency.temporal_var,
            rec.consistency.spatial_err,
            psnr
        );
    }
}

/// Artifacts of a finished run directory.
pub struct RunDir {
    pub config: RunConfig,
    pub scene: Scene4D,
    /// Last dataset written, or the originals when none was.
    pub dataset: EditDataset,
    pub field: GridField4D,
}

impl RunDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join(RUN_FILE))?;
        let scene = config.load_scene()?;
        let last = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| {
                e.ok()?
                    .file_name()
                    .to_str()?
                    .strip_prefix("iter_")?
                    .parse::<usize>()
                    .ok()
            })
            .max();
        let dataset = match last {
            Some(k) => EditDataset::load(&dir.join(format!("iter_{k}")))?,
            None => EditDataset::from_images(
                (0..scene.views()).map(|v| scene.view_images(v)).collect(),
                Vec::new(),
                0,
            )?,
        };
        let field = GridField4D::load(&dir.join(crate::pipeline::FIELD_DIR))?;
        Ok(Self {
            config,
            scene,
            dataset,
            field,
        })
    }

    fn renders(&self) -> Result<Vec<Image>> {
        let table = self.field.ray_table(&self.scene)?;
        let (v, t) = (self.scene.views(), self.scene.frames());
        Ok((0..v * t)
            .map(|i| self.field.render_view(&table, i / t, i % t))
            .collect())
    }

    fn dataset_images(&self) -> Vec<Image> {
        let (v, t) = (self.scene.views(), self.scene.frames());
        (0..v * t)
            .map(|i| self.dataset.image(i / t, i % t).clone())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PairScore {
    pub psnr: f64,
    pub ssim: f64,
}

fn pair_score(a: &[Image], b: &[Image]) -> Result<PairScore> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} images", a.len(), b.len())));
    }
    let n = a.len().max(1) as f64;
    let (mut p, mut s) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        p += psnr(x, y)?;
        s += ssim(x, y)?;
    }
    Ok(PairScore {
        psnr: p / n,
        ssim: s / n,
    })
}

#[derive(Debug, Serialize)]
pub struct RunEval {
    pub dir: PathBuf,
    pub mode: Mode,
    pub consistency: ConsistencyReport,
    /// Field renders against the run's final dataset.
    pub render_vs_dataset: PairScore,
    /// Field renders against the unedited scene.
    pub render_vs_original: PairScore,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub datasets: PairScore,
    pub renders: PairScore,
    /// Both consistency scores of the first run are lower.
    pub first_dominates: bool,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub runs: Vec<RunEval>,
    pub comparison: Option<Comparison>,
}

pub fn evaluate(first: &Path, second: Option<&Path>) -> Result<EvalReport> {
    let mut dirs = vec![first];
    dirs.extend(second);
    let mut runs = Vec::new();
    let mut loaded = Vec::new();
    for dir in dirs {
        let r = RunDir::load(dir)?;
        let flows = FlowCache::new(r.config.flow.source(), FB_TOLERANCE);
        let consistency =
            consistency_report(&r.dataset, &r.scene, &flows, r.config.propagate.tau_d)?;
        let renders = r.renders()?;
        let originals: Vec<Image> = (0..r.scene.views())
            .flat_map(|v| r.scene.view_images(v))
            .collect();
        runs.push(RunEval {
            dir: dir.to_path_buf(),
            mode: r.config.mode,
            consistency,
            render_vs_dataset: pair_score(&renders, &r.dataset_images())?,
            render_vs_original: pair_score(&renders, &originals)?,
        });
        loaded.push((r, renders));
    }
    let comparison = match loaded.as_slice() {
        [(a, ra), (b, rb)] => {
            let (ca, cb) = (&runs[0].consistency, &runs[1].consistency);
            Some(Comparison {
                datasets: pair_score(&a.dataset_images(), &b.dataset_images())?,
                renders: pair_score(ra, rb)?,
                first_dominates: ca.temporal_var < cb.temporal_var
                    && ca.spatial_err < cb.spatial_err,
            })
        }
        _ => None,
    };
    Ok(EvalReport { runs, comparison })
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = evaluate(&a.run, a.other.as_deref())?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
        return Ok(());
    }
    println!(
        "{:<28} {:<22} {:>13} {:>12} {:>9} {:>14} {:>14}",
        "run", "mode", "temporal_var", "spatial_err", "flagged", "psnr(dataset)", "psnr(original)"
    );
    for r in &report.runs {
        println!(
            "{:<28} {:<22} {:>13.4e} {:>12.4e} {:>9.4} {:>14.2} {:>14.2}",
            r.dir.display(),
            format!("{:?}", r.mode),
            r.consistency.temporal_var,
            r.consistency.spatial_err,
            r.consistency.flagged_fraction,
            r.render_vs_dataset.psnr,
            r.render_vs_original.psnr
        );
    }
    if let Some(c) = &report.comparison {
        println!(
            "datasets: psnr {:.2} ssim {:.4}   renders: psnr {:.2} ssim {:.4}   first dominates: {}",
            c.datasets.psnr, c.datasets.ssim, c.renders.psnr, c.renders.ssim, c.first_dominates
        );
    }
    Ok(())
}

fn cmd_dump(a: &DumpArgs) -> Result<()> {
    let (field, scene) = match (&a.run, &a.field, &a.scene) {
        (Some(run), _, _) => {
            let cfg = RunConfig::load(&run.join(RUN_FILE))?;
            (
                GridField4D::load(&run.join(crate::pipeline::FIELD_DIR))?,
                cfg.load_scene()?,
            )
        }
        (None, Some(field), Some(scene)) => {
            (GridField4D::load(field)?, crate::scene::load_scene(scene)?)
        }
        _ => {
            return Err(Error::Config(
                "dump needs --run, or --field with --scene".into(),
            ))
        }
    };
    if a.view >= scene.views() {
        return Err(Error::Config(format!(
            "view {} of {}",
            a.view,
            scene.views()
        )));
    }
    let last = (field.frames() - 1) as f64;
    if !(0.0..=last).contains(&a.t) {
        return Err(Error::Config(format!("time {} outside [0, {last}]", a.t)));
    }
    field.render(scene.camera(a.view), a.t)?.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_codes() {
        assert_eq!(main_with_args(["p4d", "--help"]), 0);
        assert_eq!(
            main_with_args(["p4d", "run", "--mode", "sideways", "--out", "x"]),
            EXIT_CONFIG
        );
        assert_eq!(main_with_args(["p4d", "frobnicate"]), EXIT_CONFIG);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"seed": 4, "mode": "no-flow", "schedule": {"window": 3}}"#,
        )
        .unwrap();
        let args = RunArgs {
            config: Some(path),
            scene: None,
            mode: None,
            iters: Some(2),
            window: None,
            keys: None,
            editor: None,
            instruction: None,
            seed: Some(9),
            parallel: false,
            out: Some(dir.path().join("run")),
        };
        let cfg = resolve_run_config(&args).unwrap();
        assert_eq!(
            (
                cfg.seed,
                cfg.mode,
                cfg.schedule.window,
                cfg.schedule.iterations
            ),
            (9, Mode::NoFlow, 3, 2)
        );
        let missing_out = RunArgs {
            out: None,
            config: None,
            ..args
        };
        assert!(resolve_run_config(&missing_out).unwrap_err().is_config());
    }
}
