//! Run configuration: everything a pipeline run depends on, as one JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editor::{EditorKind, InstructionRegistry};
use crate::error::{json_error, Error, Result};
use crate::field::FieldConfig;
use crate::flow::FlowEstimator;
use crate::pipeline::{
    run_parallel, run_sequential, Engine, Mode, PipelineConfig, RunResult, Schedule,
};
use crate::propagate::PropagateConfig;
use crate::scene::{generate_scene, load_scene, Scene4D, SceneSpec};

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scene directory or manifest file; the default scene when absent.
    pub scene: Option<PathBuf>,
    pub editor: EditorKind,
    /// Instruction registry file; the built-in registry when absent.
    pub instructions: Option<PathBuf>,
    pub instruction: String,
    pub mode: Mode,
    /// Root seed of every random choice in the run.
    pub seed: u64,
    pub parallel: bool,
    /// Run directory. Not recorded in `run.json`.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub schedule: Schedule,
    pub flow: FlowEstimator,
    pub propagate: PropagateConfig,
    pub field: FieldConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            scene: None,
            editor: EditorKind::default(),
            instructions: None,
            instruction: p.instruction,
            mode: p.mode,
            seed: p.seed,
            parallel: false,
            out: None,
            schedule: p.schedule,
            flow: p.flow,
            propagate: p.propagate,
            field: p.field,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| json_error(path, text, &e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// The effective config as recorded in `run.json`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            schedule: self.schedule.clone(),
            mode: self.mode,
            instruction: self.instruction.clone(),
            seed: self.seed,
            flow: self.flow,
            propagate: self.propagate.clone(),
            field: self.field.clone(),
        }
    }

    pub fn registry(&self) -> Result<InstructionRegistry> {
        let reg = match &self.instructions {
            Some(p) => InstructionRegistry::load(p)?,
            None => InstructionRegistry::builtin(),
        };
        reg.get(&self.instruction)?;
        Ok(reg)
    }

    pub fn load_scene(&self) -> Result<Scene4D> {
        match &self.scene {
            Some(p) => load_scene(p),
            None => generate_scene(&SceneSpec::default_scene()),
        }
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.registry()?;
        Ok(())
    }
}

/// Validates, loads the scene and editor, writes `run.json` when a run
/// directory is set, and runs the pipeline.
pub fn execute(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    execute_on(cfg, &cfg.load_scene()?)
}

/// As [`execute`], on an already loaded scene; `cfg.scene` is ignored.
pub fn execute_on(cfg: &RunConfig, scene: &Scene4D) -> Result<RunResult> {
    cfg.validate()?;
    let editor = cfg.editor.build(cfg.registry()?);
    let engine = Engine::new(scene, editor.as_ref(), cfg.pipeline())?;
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(RUN_FILE);
        fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    if cfg.parallel {
        run_parallel(&engine, cfg.out.as_deref())
    } else {
        run_sequential(&engine, cfg.out.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"mode": "full", "windw": 3}"#, Path::new("c.json"))
            .unwrap_err();
        assert!(err.is_config(), "{err}");
        let err = RunConfig::from_json(
            r#"{"schedule": {"keys": 2, "bogus": 1}}"#,
            Path::new("c.json"),
        )
        .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn round_trip_without_out() {
        let cfg = RunConfig {
            out: Some("somewhere".into()),
            mode: Mode::NoFlow,
            seed: 11,
            ..RunConfig::default()
        };
        let back = RunConfig::from_json(&cfg.to_json(), Path::new("run.json")).unwrap();
        assert_eq!(back, RunConfig { out: None, ..cfg });
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.schedule.strength_hi = 0.5;
        assert!(cfg.validate().unwrap_err().is_config());
        let cfg = RunConfig {
            instruction: "nope".into(),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::UnknownInstruction(_))));
    }
}
