//! The edited dataset the pipeline regenerates each iteration.
//!
//! Directory layout:
//!
//! ```text
//! index.json             shape, key views, version
//! rgb/v{V}_t{T}.png      edited frames
//! weight/v{V}_t{T}.p4df  per-pixel supervision weight (float32)
//! ```
//!
//! Flagged pixels (no propagation source reached them) are stored as weight
//! entries with the sign bit set, so a single raw file carries both.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{json_error, Error, Result};
use crate::raster::{Image, Mask, Raster};
use crate::rawio::RawArray;
use crate::scene::frame_name;

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq)]
pub struct EditDataset {
    views: usize,
    frames: usize,
    images: Vec<Image>,
    weights: Vec<Raster<f64>>,
    flagged: Vec<Mask>,
    /// Key views of the iteration that produced this dataset.
    pub keys: Vec<usize>,
    /// Generation counter; 0 is the unedited scene.
    pub version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    views: usize,
    frames: usize,
    width: usize,
    height: usize,
    keys: Vec<usize>,
    version: u64,
}

impl EditDataset {
    /// A dataset of `images[v][t]` with unit weights and nothing flagged.
    pub fn from_images(images: Vec<Vec<Image>>, keys: Vec<usize>, version: u64) -> Result<Self> {
        let views = images.len();
        let frames = images.first().map_or(0, Vec::len);
        if views == 0 || frames == 0 {
            return Err(Error::Shape("dataset needs at least one frame".into()));
        }
        if images.iter().any(|v| v.len() != frames) {
            return Err(Error::Shape("pseudo-views differ in frame count".into()));
        }
        let flat: Vec<Image> = images.into_iter().flatten().collect();
        let (w, h) = flat[0].dims();
        if flat.iter().any(|i| i.dims() != (w, h)) {
            return Err(Error::Shape("dataset images differ in resolution".into()));
        }
        let n = flat.len();
        Ok(Self {
            views,
            frames,
            images: flat,
            weights: vec![Raster::filled(w, h, 1.0); n],
            flagged: vec![Raster::filled(w, h, false); n],
            keys,
            version,
        })
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }

    fn slot(&self, v: usize, t: usize) -> usize {
        assert!(
            v < self.views && t < self.frames,
            "dataset slot ({v}, {t}) out of range"
        );
        v * self.frames + t
    }

    pub fn image(&self, v: usize, t: usize) -> &Image {
        &self.images[self.slot(v, t)]
    }

    pub fn weight(&self, v: usize, t: usize) -> &Raster<f64> {
        &self.weights[self.slot(v, t)]
    }

    pub fn flagged(&self, v: usize, t: usize) -> &Mask {
        &self.flagged[self.slot(v, t)]
    }

    pub fn set(
        &mut self,
        v: usize,
        t: usize,
        image: Image,
        weight: Raster<f64>,
        flagged: Mask,
    ) -> Result<()> {
        let dims = self.dims();
        if image.dims() != dims || weight.dims() != dims || flagged.dims() != dims {
            return Err(Error::Shape(format!("slot ({v}, {t}) resolution mismatch")));
        }
        let i = self.slot(v, t);
        self.images[i] = image;
        self.weights[i] = weight;
        self.flagged[i] = flagged;
        Ok(())
    }

    /// Edited frames of one pseudo-view.
    pub fn view_images(&self, v: usize) -> &[Image] {
        let i = self.slot(v, 0);
        &self.images[i..i + self.frames]
    }

    /// Fraction of all pixels that fell back to the original frame.
    pub fn flagged_fraction(&self) -> f64 {
        let total: usize = self.flagged.iter().map(Raster::len).sum();
        let hit: usize = self
            .flagged
            .iter()
            .map(|m| m.as_slice().iter().filter(|f| **f).count())
            .sum();
        hit as f64 / total as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["rgb", "weight"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let (width, height) = self.dims();
        let index = Index {
            views: self.views,
            frames: self.frames,
            width,
            height,
            keys: self.keys.clone(),
            version: self.version,
        };
        let path = dir.join(INDEX_FILE);
        fs::write(
            &path,
            serde_json::to_string_pretty(&index).expect("index serializes"),
        )
        .map_err(|e| Error::io(&path, e))?;
        for v in 0..self.views {
            for t in 0..self.frames {
                let i = self.slot(v, t);
                self.images[i].save_png(&dir.join("rgb").join(frame_name(v, t, "png")))?;
                let w = &self.weights[i];
                let signed = Raster::from_fn(w.width(), w.height(), |x, y| {
                    let m = w.get(x, y).abs();
                    if *self.flagged[i].get(x, y) {
                        -m
                    } else {
                        m
                    }
                });
                signed
                    .to_raw()
                    .write(&dir.join("weight").join(frame_name(v, t, "p4df")))?;
            }
        }
        Ok(())
    }

    /// Loads a saved dataset; images come back quantized to 8 bits.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| json_error(&path, &text, &e))?;
        let mut images = Vec::with_capacity(index.views);
        let mut weights = Vec::new();
        let mut flagged = Vec::new();
        for v in 0..index.views {
            let mut row = Vec::with_capacity(index.frames);
            for t in 0..index.frames {
                let img = Image::load_png(&dir.join("rgb").join(frame_name(v, t, "png")))?;
                let raw_path = dir.join("weight").join(frame_name(v, t, "p4df"));
                let signed: Raster<f64> = Raster::from_raw(&RawArray::read(&raw_path)?)?;
                if img.dims() != (index.width, index.height) || signed.dims() != img.dims() {
                    return Err(Error::Shape(format!(
                        "slot ({v}, {t}) does not match index resolution"
                    )));
                }
                flagged.push(signed.map(|w| w.is_sign_negative()));
                weights.push(signed.map(|w| w.abs()));
                row.push(img);
            }
            images.push(row);
        }
        let mut ds = Self::from_images(images, index.keys, index.version)?;
        ds.weights = weights;
        ds.flagged = flagged;
        Ok(ds)
    }
}
