//! Sliding-window editing of one pseudo-view.
//!
//! Frame 0 arrives pre-edited. Windows of width `B` start at frame 1; each
//! window frame is initialized by carrying the previous frame's edit forward
//! along the temporal flow (one frame at a time), fused with the input frame
//! where the flow is unreliable, and then the whole window is inpainted and
//! repainted in a single anchored editor call.

use std::fs;
use std::path::Path;

use crate::editor::{Anchor, EditRequest, FrameEditor, Guidance};
use crate::error::{Error, Result};
use crate::flow::FlowCache;
use crate::geom::WarpResult;
use crate::raster::{Image, Raster};
use crate::scene::Scene4D;

/// Editor settings for the windows of one pseudo-view.
#[derive(Clone, Debug)]
pub struct WindowParams {
    /// Window width `B` (the editor's batch limit).
    pub width: usize,
    pub strength: f64,
    pub steps: u32,
    pub instruction: String,
    pub guidance: Guidance,
    pub seed: u64,
    /// Call index of the first window; later windows count up from it.
    pub call_base: u64,
    /// When false, window frames are initialized from the inputs directly.
    pub use_flow: bool,
}

#[derive(Clone, Debug)]
pub struct ViewEdit {
    pub frames: Vec<Image>,
    pub editor_calls: usize,
}

/// Number of editor calls needed for a `frames`-long pseudo-view at width `width`.
pub fn window_calls(frames: usize, width: usize) -> usize {
    frames.saturating_sub(1).div_ceil(width.max(1))
}

/// Warped value where the warp is valid, the original pixel elsewhere.
pub fn fuse_init(original: &Image, warped: &WarpResult) -> Result<Image> {
    original.ensure_same_dims(&warped.image, "fuse_init")?;
    original.ensure_same_dims(&warped.mask, "fuse_init mask")?;
    let (w, h) = original.dims();
    Ok(Raster::from_fn(w, h, |x, y| {
        if *warped.mask.get(x, y) {
            *warped.image.get(x, y)
        } else {
            *original.get(x, y)
        }
    }))
}

/// Edits frames `1..T` of `view`.
///
/// `inputs` are the frames used where no warped edit is available (originals or
/// current field renders); the editor always sees the scene's originals as
/// conditioning. Every window uses `(original frame 0, first_edit)` as anchor.
#[allow(clippy::too_many_arguments)]
pub fn edit_pseudo_view(
    scene: &Scene4D,
    view: usize,
    inputs: &[Image],
    first_edit: &Image,
    editor: &dyn FrameEditor,
    flows: &FlowCache,
    params: &WindowParams,
    debug_dir: Option<&Path>,
) -> Result<ViewEdit> {
    let t_total = scene.frames();
    if view >= scene.views() {
        return Err(Error::OutOfRange(format!(
            "view {view} of {}",
            scene.views()
        )));
    }
    if inputs.len() != t_total {
        return Err(Error::Shape(format!(
            "{} input frames for a {t_total}-frame view",
            inputs.len()
        )));
    }
    if params.width == 0 {
        return Err(Error::InvalidRequest(
            "window width must be positive".into(),
        ));
    }
    let originals = scene.view_images(view);
    first_edit.ensure_same_dims(&originals[0], "first frame edit")?;
    let anchor = Anchor {
        original: originals[0].clone(),
        edited: first_edit.clone(),
    };

    let mut frames = Vec::with_capacity(t_total);
    frames.push(first_edit.clone());
    let mut calls = 0;
    let mut start = 1;
    while start < t_total {
        let end = (start + params.width).min(t_total);
        let mut fused = Vec::with_capacity(end - start);
        let mut prev = frames[start - 1].clone();
        for t in start..end {
            let init = if params.use_flow {
                let warped = flows.link(scene, view, t)?.warp(&prev)?;
                fuse_init(&inputs[t], &warped)?
            } else {
                inputs[t].clone()
            };
            prev = init.clone();
            fused.push(init);
        }
        let req = EditRequest {
            batch: fused,
            originals: originals[start..end].to_vec(),
            anchor: Some(anchor.clone()),
            instruction: params.instruction.clone(),
            strength: params.strength,
            steps: params.steps,
            guidance: params.guidance,
            max_batch: params.width,
            seed: params.seed,
            call_index: params.call_base + calls as u64,
        };
        let window = calls;
        let out = editor.edit_batch(&req).map_err(|e| Error::EditorFailed {
            context: format!("view {view}, window {window} (frames {start}..{end})"),
            source: Box::new(e),
        })?;
        calls += 1;
        if out.len() != end - start {
            return Err(Error::EditorFailed {
                context: format!("view {view}, window {window}"),
                source: Box::new(Error::InvalidRequest(format!(
                    "{} outputs for {} inputs",
                    out.len(),
                    end - start
                ))),
            });
        }
        if let Some(dir) = debug_dir {
            dump_window(dir, view, window, start, &req.batch, &out)?;
        }
        frames.extend(out);
        start = end;
    }
    debug_assert_eq!(calls, window_calls(t_total, params.width));
    Ok(ViewEdit {
        frames,
        editor_calls: calls,
    })
}

fn dump_window(
    dir: &Path,
    view: usize,
    window: usize,
    start: usize,
    fused: &[Image],
    out: &[Image],
) -> Result<()> {
    let dir = dir.join(format!("v{view:02}_w{window:03}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, (f, o)) in fused.iter().zip(out).enumerate() {
        f.save_png(&dir.join(format!("fused_t{:03}.png", start + i)))?;
        o.save_png(&dir.join(format!("edit_t{:03}.png", start + i)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::{InstructionRegistry, PaletteEditor};
    use crate::flow::{AnalyticFlow, FB_TOLERANCE};
    use crate::scene::{generate_scene, SceneSpec};

    fn params(width: usize) -> WindowParams {
        WindowParams {
            width,
            strength: 0.6,
            steps: 3,
            instruction: "sepia".into(),
            guidance: Guidance::OBJECT,
            seed: 1,
            call_base: 0,
            use_flow: true,
        }
    }

    #[test]
    fn call_count_formula() {
        assert_eq!(window_calls(1, 8), 0);
        assert_eq!(window_calls(51, 10), 5);
        assert_eq!(window_calls(9, 8), 1);
        assert_eq!(window_calls(10, 8), 2);
    }

    #[test]
    fn fuse_extremes() {
        let orig = Raster::filled(4, 3, [0.1, 0.2, 0.3]);
        let mut w = WarpResult::empty(4, 3);
        assert_eq!(fuse_init(&orig, &w).unwrap(), orig);
        w.image = Raster::filled(4, 3, [0.9; 3]);
        w.mask = Raster::filled(4, 3, true);
        assert_eq!(fuse_init(&orig, &w).unwrap(), w.image);
    }

    #[test]
    fn static_scene_keeps_first_edit() {
        let scene = generate_scene(&SceneSpec::static_scene(1, 7, 24, 24, 3)).unwrap();
        let flows = FlowCache::new(Box::new(AnalyticFlow), FB_TOLERANCE);
        let inputs = scene.view_images(0);
        let first = inputs[0].map(|c| [c[2], c[0], c[1]]);
        let mut p = params(3);
        p.strength = 0.0;
        let out = edit_pseudo_view(
            &scene,
            0,
            &inputs,
            &first,
            &PaletteEditor::new(InstructionRegistry::builtin()),
            &flows,
            &p,
            None,
        )
        .unwrap();
        assert_eq!(out.editor_calls, 2);
        let finite: Vec<bool> = scene
            .frame(0, 0)
            .depth
            .as_slice()
            .iter()
            .map(|d| d.is_finite())
            .collect();
        for f in &out.frames {
            for ((a, b), fin) in f.as_slice().iter().zip(first.as_slice()).zip(&finite) {
                if *fin {
                    assert_eq!(a, b);
                }
            }
        }
    }
}
