//! Scene directory layout:
//!
//! ```text
//! scene.json            manifest (regenerates every frame bit-exactly)
//! rgb/v{V}_t{T}.png     8-bit RGB renders
//! depth/v{V}_t{T}.p4df  float32 depth, +inf for sky
//! flow/v{V}_t{T}.p4df   float32 forward flow t -> t+1, NaN where invalid
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Scene4D, SceneManifest};
use crate::error::{json_error, Error, Result};
use crate::raster::Raster;

pub const MANIFEST_FILE: &str = "scene.json";

pub(crate) fn frame_name(view: usize, t: usize, ext: &str) -> String {
    format!("v{view:02}_t{t:03}.{ext}")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn save_scene(scene: &Scene4D, dir: &Path) -> Result<()> {
    for sub in ["rgb", "depth", "flow"] {
        mkdir(&dir.join(sub))?;
    }
    let text = serde_json::to_string_pretty(scene.manifest()).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for v in 0..scene.views() {
        for t in 0..scene.frames() {
            let f = scene.frame(v, t);
            f.rgb
                .save_png(&dir.join("rgb").join(frame_name(v, t, "png")))?;
            f.depth
                .to_raw()
                .write(&dir.join("depth").join(frame_name(v, t, "p4df")))?;
            if t + 1 < scene.frames() {
                let flow = scene.analytic_flow(v, t)?;
                let dump: Raster<[f64; 2]> =
                    Raster::from_fn(flow.vectors.width(), flow.vectors.height(), |x, y| {
                        if *flow.valid.get(x, y) {
                            *flow.vectors.get(x, y)
                        } else {
                            [f64::NAN; 2]
                        }
                    });
                dump.to_raw()
                    .write(&dir.join("flow").join(frame_name(v, t, "p4df")))?;
            }
        }
    }
    Ok(())
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<SceneManifest> {
    let manifest: SceneManifest =
        serde_json::from_str(text).map_err(|e| json_error(path, text, &e))?;
    manifest.validate()?;
    Ok(manifest)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a scene from a scene directory or a manifest file.
pub fn load_scene(path: &Path) -> Result<Scene4D> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Scene4D::from_manifest(parse_manifest(&text, &path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&SceneSpec::static_plane(1, 2, 16, 16, 7)).unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(loaded, scene);
        let dir2 = tempfile::tempdir().unwrap();
        save_scene(&loaded, dir2.path()).unwrap();
        assert_eq!(first, fs::read(dir2.path().join(MANIFEST_FILE)).unwrap());
        let png =
            crate::raster::Image::load_png(&dir.path().join("rgb").join(frame_name(0, 1, "png")))
                .unwrap();
        assert!(png.mean_abs_diff(&scene.frame(0, 1).rgb).unwrap() <= 0.5 / 255.0);
    }

    #[test]
    fn truncated_manifest_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&SceneSpec::static_plane(1, 2, 16, 16, 7)).unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() / 2]).unwrap();
        match load_scene(dir.path()) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0 && offset <= text.len() / 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_orthonormal_rotation_names_camera() {
        let mut m = SceneSpec::static_plane(3, 2, 16, 16, 7)
            .to_manifest()
            .unwrap();
        m.cameras[2].rotation[1][1] *= 1.01;
        let text = serde_json::to_string(&m).unwrap();
        let err = parse_manifest(&text, Path::new("m.json")).unwrap_err();
        match err {
            Error::Validation { what, .. } => assert_eq!(what, "camera 2"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
