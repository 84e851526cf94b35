//! Event streams, ground-truth annotations and their file formats.

mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::BBox;

pub use io::{
    load_annotations, load_events, read_annotations, read_events, save_annotations, save_events,
    save_events_binary, write_annotations, write_events_binary, write_events_text, BINARY_MAGIC,
    TEXT_MAGIC,
};
pub use synth::{synth_scene, SceneSpec, ShapeInit, ShapeKind, ShapePopulation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventPoint {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// 1 for a brightness increase, 0 for a decrease.
    pub p: u8,
}

impl EventPoint {
    pub const fn new(t: u64, x: u16, y: u16, p: u8) -> Self {
        Self { t, x, y, p }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<EventPoint>,
}

impl EventStream {
    /// Fails if an event lies outside the sensor, has a polarity other than
    /// 0/1, or the timestamps decrease.
    pub fn new(width: u16, height: u16, events: Vec<EventPoint>) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid(format!("sensor size {width}x{height} is empty"));
        }
        for (i, e) in events.iter().enumerate() {
            check_event(e, width, height).map_err(|m| crate::DeoeError::Invalid(format!("event {i}: {m}")))?;
            if i > 0 && events[i - 1].t > e.t {
                return invalid(format!("event {i}: timestamp {} precedes {}", e.t, events[i - 1].t));
            }
        }
        Ok(Self { width, height, events })
    }

    pub fn empty(width: u16, height: u16) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[EventPoint] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t_a <= t < t_b`, in stream order.
    pub fn window(&self, t_a: u64, t_b: u64) -> Result<&[EventPoint]> {
        if t_a >= t_b {
            return invalid(format!("window [{t_a}, {t_b}) is empty or reversed"));
        }
        let lo = self.events.partition_point(|e| e.t < t_a);
        let hi = self.events.partition_point(|e| e.t < t_b);
        Ok(&self.events[lo..hi])
    }
}

pub(crate) fn check_event(e: &EventPoint, width: u16, height: u16) -> std::result::Result<(), String> {
    if e.x >= width {
        return Err(format!("x = {} outside sensor width {width}", e.x));
    }
    if e.y >= height {
        return Err(format!("y = {} outside sensor height {height}", e.y));
    }
    if e.p > 1 {
        return Err(format!("polarity {} is not 0 or 1", e.p));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub t: u64,
    pub x_min: f64,
    pub y_min: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
    /// Visible to training as a known class.
    pub annotated: bool,
}

impl AnnotationRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x_min, self.y_min, self.w, self.h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || !self.x_min.is_finite() || !self.y_min.is_finite() {
            return invalid(format!(
                "annotation at t={} has degenerate box ({}, {}, {}, {})",
                self.t, self.x_min, self.y_min, self.w, self.h
            ));
        }
        Ok(())
    }
}

/// Groups annotations by timestamp, ascending.
pub fn annotations_by_time(records: &[AnnotationRecord]) -> Vec<(u64, Vec<AnnotationRecord>)> {
    let mut map = std::collections::BTreeMap::<u64, Vec<AnnotationRecord>>::new();
    for r in records {
        map.entry(r.t).or_default().push(*r);
    }
    map.into_iter().collect()
}
