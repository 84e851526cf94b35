//! Recordings cut into annotated frames.

use rayon::prelude::*;

use crate::encode::{encode_window, EventTensor};
use crate::error::Result;
use crate::events::{annotations_by_time, synth_scene, AnnotationRecord, EventStream, SceneSpec};
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// End of the frame window, which is also the annotation timestamp.
    pub t: u64,
    pub tensor: EventTensor,
    /// Boxes visible to training.
    pub known: Vec<BBox>,
    /// Every box, annotated or not.
    pub all: Vec<BBox>,
}

/// Encodes the window `[t - window_us, t)` (clipped at 0) ending at `t`.
pub fn encode_frame_at(stream: &EventStream, t: u64, window_us: u64, t_bins: usize) -> Result<EventTensor> {
    let t_a = t.saturating_sub(window_us);
    let t_b = t.max(t_a + 1);
    let events = stream.window(t_a, t_b)?;
    encode_window(events, t_a, t_b, t_bins, stream.height() as usize, stream.width() as usize)
}

/// One frame per annotation timestamp.
pub fn frames_from_recording(
    stream: &EventStream,
    annotations: &[AnnotationRecord],
    t_bins: usize,
    window_us: u64,
) -> Result<Vec<Frame>> {
    annotations_by_time(annotations)
        .into_iter()
        .map(|(t, recs)| {
            Ok(Frame {
                t,
                tensor: encode_frame_at(stream, t, window_us, t_bins)?,
                known: recs.iter().filter(|r| r.annotated).map(|r| r.bbox()).collect(),
                all: recs.iter().map(|r| r.bbox()).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub recordings: Vec<Vec<Frame>>,
}

impl Dataset {
    /// Synthesizes and encodes every scene (in parallel, order preserved).
    pub fn from_scenes(specs: &[SceneSpec], t_bins: usize, window_us: u64) -> Result<Self> {
        let recordings = specs
            .par_iter()
            .map(|spec| {
                let (stream, ann) = synth_scene(spec)?;
                frames_from_recording(&stream, &ann, t_bins, window_us)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { recordings })
    }

    /// Encodes recorded streams with their annotations.
    pub fn from_recordings(
        recordings: &[(EventStream, Vec<AnnotationRecord>)],
        t_bins: usize,
        window_us: u64,
    ) -> Result<Self> {
        let recordings = recordings
            .par_iter()
            .map(|(stream, ann)| frames_from_recording(stream, ann, t_bins, window_us))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { recordings })
    }

    pub fn num_frames(&self) -> usize {
        self.recordings.iter().map(Vec::len).sum()
    }
}
