use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use super::{fb_residual, warp_temporal, FlowField, FlowSource};
use crate::error::{Error, Result};
use crate::geom::WarpResult;
use crate::raster::{Image, Mask, Raster};
use crate::scene::Scene4D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Direction {
    Forward,
    Backward,
}

/// Everything needed to carry an edit from frame `t-1` into frame `t`.
#[derive(Clone, Debug)]
pub struct TemporalLink {
    /// Flow from `t` to `t-1`.
    pub backward: Arc<FlowField>,
    /// Forward–backward consistent pixels of frame `t`.
    pub mask: Mask,
    pub residual: Raster<f64>,
}

impl TemporalLink {
    pub fn warp(&self, prev_edited: &Image) -> Result<WarpResult> {
        let mut out = warp_temporal(prev_edited, &self.backward, &self.mask)?;
        for (r, (m, res)) in out
            .residual
            .as_mut_slice()
            .iter_mut()
            .zip(out.mask.as_slice().iter().zip(self.residual.as_slice()))
        {
            if *m {
                *r = *res;
            }
        }
        Ok(out)
    }
}

/// Lazily filled per-view cache of adjacent-frame flows for one scene.
///
/// Readers proceed concurrently; a miss computes outside the lock and the first
/// insert wins. Recomputation is deterministic, so a lost race only wastes work.
pub struct FlowCache {
    source: Box<dyn FlowSource>,
    tau_fb: f64,
    enabled: bool,
    flows: RwLock<HashMap<(usize, usize, Direction), Arc<FlowField>>>,
    links: RwLock<HashMap<(usize, usize), Arc<TemporalLink>>>,
    computed: AtomicUsize,
}

impl FlowCache {
    pub fn new(source: Box<dyn FlowSource>, tau_fb: f64) -> Self {
        Self {
            source,
            tau_fb,
            enabled: true,
            flows: RwLock::default(),
            links: RwLock::default(),
            computed: AtomicUsize::new(0),
        }
    }

    /// A cache that never stores anything; every request recomputes.
    pub fn uncached(source: Box<dyn FlowSource>, tau_fb: f64) -> Self {
        Self {
            enabled: false,
            ..Self::new(source, tau_fb)
        }
    }

    pub fn tau_fb(&self) -> f64 {
        self.tau_fb
    }

    pub fn source_name(&self) -> &'static str {
        self.source.name()
    }

    /// Number of flow fields computed so far (cache misses).
    pub fn computations(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    fn get(
        &self,
        scene: &Scene4D,
        view: usize,
        t: usize,
        dir: Direction,
    ) -> Result<Arc<FlowField>> {
        let key = (view, t, dir);
        if self.enabled {
            if let Some(hit) = self.flows.read().unwrap().get(&key) {
                return Ok(hit.clone());
            }
        }
        let (from, to) = match dir {
            Direction::Forward => (t, t + 1),
            Direction::Backward => (t + 1, t),
        };
        let field = Arc::new(self.source.flow(scene, view, from, to)?);
        self.computed.fetch_add(1, Ordering::Relaxed);
        if !self.enabled {
            return Ok(field);
        }
        Ok(self
            .flows
            .write()
            .unwrap()
            .entry(key)
            .or_insert(field)
            .clone())
    }

    /// Flow from `t` to `t+1`.
    pub fn forward(&self, scene: &Scene4D, view: usize, t: usize) -> Result<Arc<FlowField>> {
        self.get(scene, view, t, Direction::Forward)
    }

    /// Flow from `t+1` back to `t`.
    pub fn backward(&self, scene: &Scene4D, view: usize, t: usize) -> Result<Arc<FlowField>> {
        self.get(scene, view, t, Direction::Backward)
    }

    /// Link carrying edits from `t-1` into `t` (requires `t >= 1`).
    pub fn link(&self, scene: &Scene4D, view: usize, t: usize) -> Result<Arc<TemporalLink>> {
        if t == 0 {
            return Err(Error::OutOfRange("temporal link needs t >= 1".into()));
        }
        if self.enabled {
            if let Some(hit) = self.links.read().unwrap().get(&(view, t)) {
                return Ok(hit.clone());
            }
        }
        let backward = self.backward(scene, view, t - 1)?;
        let forward = self.forward(scene, view, t - 1)?;
        let residual = fb_residual(&backward, &forward)?;
        let mask = residual.map(|r| *r <= self.tau_fb);
        let link = Arc::new(TemporalLink {
            backward,
            mask,
            residual,
        });
        if !self.enabled {
            return Ok(link);
        }
        Ok(self
            .links
            .write()
            .unwrap()
            .entry((view, t))
            .or_insert(link)
            .clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{AnalyticFlow, FB_TOLERANCE};
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn entries_never_recomputed() {
        let s = generate_scene(&SceneSpec::with_size(1, 4, 24, 24, 1)).unwrap();
        let c = FlowCache::new(Box::new(AnalyticFlow), FB_TOLERANCE);
        c.link(&s, 0, 1).unwrap();
        c.link(&s, 0, 2).unwrap();
        let n = c.computations();
        assert_eq!(n, 4);
        c.link(&s, 0, 1).unwrap();
        c.forward(&s, 0, 0).unwrap();
        assert_eq!(c.computations(), n);
    }

    #[test]
    fn cached_and_uncached_warps_identical() {
        let s = generate_scene(&SceneSpec::with_size(1, 4, 24, 24, 1)).unwrap();
        let cached = FlowCache::new(Box::new(AnalyticFlow), FB_TOLERANCE);
        let plain = FlowCache::uncached(Box::new(AnalyticFlow), FB_TOLERANCE);
        let img = s.frame(0, 0).rgb.clone();
        for _ in 0..2 {
            for t in 1..4 {
                let a = cached.link(&s, 0, t).unwrap().warp(&img).unwrap();
                let b = plain.link(&s, 0, t).unwrap().warp(&img).unwrap();
                assert_eq!(a, b);
            }
        }
        assert!(plain.computations() > cached.computations());
    }
}
