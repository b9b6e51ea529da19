//! Versioned snapshots shared between the trainer and the editing worker.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::raster::Image;

/// An immutable published value and its version.
#[derive(Debug)]
pub struct Snapshot<T> {
    pub version: u64,
    pub value: T,
}

/// Single-slot publication point. Readers get whole snapshots, so a reader
/// never sees parts of two publications.
#[derive(Debug)]
pub struct SnapshotCell<T> {
    slot: Mutex<Arc<Snapshot<T>>>,
    changed: Condvar,
}

impl<T> SnapshotCell<T> {
    pub fn new(version: u64, value: T) -> Self {
        Self {
            slot: Mutex::new(Arc::new(Snapshot { version, value })),
            changed: Condvar::new(),
        }
    }

    pub fn load(&self) -> Arc<Snapshot<T>> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Replaces the current snapshot; `version` must not go backwards.
    pub fn publish(&self, version: u64, value: T) {
        let next = Arc::new(Snapshot { version, value });
        let mut slot = self.slot.lock().unwrap_or_else(|e| e.into_inner());
        assert!(
            version >= slot.version,
            "snapshot version went back from {} to {version}",
            slot.version
        );
        *slot = next;
        drop(slot);
        self.changed.notify_all();
    }

    /// Blocks until `ready` accepts the current snapshot or `cancelled` returns true.
    pub fn wait_for(
        &self,
        ready: impl Fn(&Snapshot<T>) -> bool,
        cancelled: impl Fn() -> bool,
    ) -> Option<Arc<Snapshot<T>>> {
        let mut slot = self.slot.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if ready(&slot) {
                return Some(slot.clone());
            }
            if cancelled() {
                return None;
            }
            slot = self
                .changed
                .wait_timeout(slot, Duration::from_millis(20))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

/// Renders of every training (view, frame) from one field state.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSet {
    views: usize,
    frames: usize,
    images: Vec<Image>,
    /// Version of the dataset the field was being fit to.
    pub dataset_version: u64,
    /// Fit steps taken on that dataset.
    pub fit_steps: usize,
}

impl RenderSet {
    /// `images[v * frames + t]`.
    pub fn new(
        views: usize,
        frames: usize,
        images: Vec<Image>,
        dataset_version: u64,
        fit_steps: usize,
    ) -> Self {
        assert_eq!(images.len(), views * frames, "render set size");
        Self {
            views,
            frames,
            images,
            dataset_version,
            fit_steps,
        }
    }

    pub fn empty() -> Self {
        Self {
            views: 0,
            frames: 0,
            images: Vec::new(),
            dataset_version: 0,
            fit_steps: 0,
        }
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, v: usize, t: usize) -> &Image {
        assert!(
            v < self.views && t < self.frames,
            "render ({v}, {t}) out of range"
        );
        &self.images[v * self.frames + t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    #[test]
    fn wait_sees_later_publication() {
        let cell = SnapshotCell::new(0, 0u32);
        std::thread::scope(|s| {
            s.spawn(|| {
                std::thread::sleep(Duration::from_millis(5));
                cell.publish(1, 7);
            });
            let got = cell.wait_for(|s| s.version == 1, || false).unwrap();
            assert_eq!(got.value, 7);
        });
        assert!(cell.wait_for(|s| s.version == 9, || true).is_none());
    }

    #[test]
    #[should_panic(expected = "went back")]
    fn versions_are_monotone() {
        let cell = SnapshotCell::new(3, ());
        cell.publish(2, ());
    }

    #[test]
    fn render_set_indexing() {
        let imgs = (0..6)
            .map(|i| Raster::filled(2, 2, [i as f64; 3]))
            .collect();
        let r = RenderSet::new(2, 3, imgs, 1, 10);
        assert_eq!(r.get(1, 0).get(0, 0)[0], 3.0);
    }
}
