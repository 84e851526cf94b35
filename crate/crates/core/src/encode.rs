//! Polarity-separated, time-binned event-count tensors.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, io_err, DeoeError, Result};
use crate::events::EventPoint;

/// Dense `(2T, H, W)` grid; channel `p * T + tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTensor {
    pub t_bins: usize,
    pub height: usize,
    pub width: usize,
    pub t_a: u64,
    pub t_b: u64,
    data: Vec<f32>,
}

impl EventTensor {
    pub fn zeros(t_bins: usize, height: usize, width: usize, t_a: u64, t_b: u64) -> Self {
        Self {
            t_bins,
            height,
            width,
            t_a,
            t_b,
            data: vec![0.0; 2 * t_bins * height * width],
        }
    }

    pub fn from_data(t_bins: usize, height: usize, width: usize, t_a: u64, t_b: u64, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * t_bins * height * width {
            return invalid(format!(
                "{} values cannot fill a ({}, {height}, {width}) tensor",
                data.len(),
                2 * t_bins
            ));
        }
        Ok(Self { t_bins, height, width, t_a, t_b, data })
    }

    pub fn channels(&self) -> usize {
        2 * self.t_bins
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Total count per pixel over all channels, row-major `H * W`.
    pub fn count_image(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0f32; plane];
        for c in self.data.chunks_exact(plane) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &EventTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return invalid(format!("cannot add {:?} to {:?}", other.shape(), self.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// `floor((t_k - t_a) / (t_b - t_a) * T)`, with `t_k = t_b` clamped to `T - 1`.
pub fn bin_index(t_k: u64, t_a: u64, t_b: u64, t_bins: usize) -> Result<usize> {
    if t_bins == 0 {
        return invalid("T must be at least 1");
    }
    if t_b <= t_a {
        return invalid(format!("window [{t_a}, {t_b}] is empty"));
    }
    if t_k < t_a || t_k > t_b {
        return invalid(format!("timestamp {t_k} outside window [{t_a}, {t_b}]"));
    }
    Ok(bin_unchecked(t_k, t_a, t_b - t_a, t_bins as u64))
}

#[inline]
fn bin_unchecked(t_k: u64, t_a: u64, span: u64, t_bins: u64) -> usize {
    let tau = (t_k - t_a) as u128 * t_bins as u128 / span as u128;
    tau.min(t_bins as u128 - 1) as usize
}

fn check_args(t_a: u64, t_b: u64, t_bins: usize, height: usize, width: usize) -> Result<()> {
    if t_bins == 0 || height == 0 || width == 0 {
        return invalid(format!("tensor shape (2*{t_bins}, {height}, {width}) is empty"));
    }
    if t_b <= t_a {
        return invalid(format!("window [{t_a}, {t_b}] is empty"));
    }
    Ok(())
}

fn accumulate(events: &[EventPoint], out: &mut EventTensor) -> Result<()> {
    let (t_a, t_b) = (out.t_a, out.t_b);
    let span = t_b - t_a;
    let t_bins = out.t_bins as u64;
    let (h, w) = (out.height, out.width);
    let plane = h * w;
    for (i, e) in events.iter().enumerate() {
        if e.t < t_a || e.t > t_b {
            return Err(DeoeError::Invalid(format!("event {i}: timestamp {} outside [{t_a}, {t_b}]", e.t)));
        }
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= w || y >= h || e.p > 1 {
            return Err(DeoeError::Invalid(format!(
                "event {i}: ({x}, {y}, p={}) outside a {w}x{h} sensor",
                e.p
            )));
        }
        let tau = bin_unchecked(e.t, t_a, span, t_bins);
        let c = e.p as usize * out.t_bins + tau;
        out.data[c * plane + y * w + x] += 1.0;
    }
    Ok(())
}

/// Count histogram of `events` over `[t_a, t_b]`: every event adds 1 to its
/// `(p * T + tau, y, x)` cell.
pub fn encode_window(
    events: &[EventPoint],
    t_a: u64,
    t_b: u64,
    t_bins: usize,
    height: usize,
    width: usize,
) -> Result<EventTensor> {
    check_args(t_a, t_b, t_bins, height, width)?;
    let mut out = EventTensor::zeros(t_bins, height, width, t_a, t_b);
    accumulate(events, &mut out)?;
    Ok(out)
}

/// Same result as [`encode_window`], with the events split into `workers`
/// chunks whose partial histograms are summed. Counts are small integers, so
/// the merge is exact regardless of partitioning.
pub fn encode_window_parallel(
    events: &[EventPoint],
    t_a: u64,
    t_b: u64,
    t_bins: usize,
    height: usize,
    width: usize,
    workers: usize,
) -> Result<EventTensor> {
    check_args(t_a, t_b, t_bins, height, width)?;
    let workers = workers.max(1);
    let chunk = events.len().div_ceil(workers).max(1);
    let partials = events
        .par_chunks(chunk)
        .map(|part| {
            let mut t = EventTensor::zeros(t_bins, height, width, t_a, t_b);
            accumulate(part, &mut t).map(|_| t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = EventTensor::zeros(t_bins, height, width, t_a, t_b);
    for p in &partials {
        out.add_assign(p)?;
    }
    Ok(out)
}

/// 2x2 sum pooling.
pub fn downsample2x(t: &EventTensor) -> Result<EventTensor> {
    if t.height % 2 != 0 || t.width % 2 != 0 {
        return invalid(format!("cannot halve a {}x{} tensor", t.height, t.width));
    }
    let (h2, w2) = (t.height / 2, t.width / 2);
    let mut out = EventTensor::zeros(t.t_bins, h2, w2, t.t_a, t.t_b);
    for c in 0..t.channels() {
        let src = &t.data[c * t.height * t.width..(c + 1) * t.height * t.width];
        let dst = &mut out.data[c * h2 * w2..(c + 1) * h2 * w2];
        for y in 0..h2 {
            let r0 = &src[2 * y * t.width..(2 * y + 1) * t.width];
            let r1 = &src[(2 * y + 1) * t.width..(2 * y + 2) * t.width];
            for x in 0..w2 {
                dst[y * w2 + x] = r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
            }
        }
    }
    Ok(out)
}

/// Debug dump: three little-endian u32 (2T, H, W) followed by the values as
/// little-endian f32, row-major.
pub fn dump_bytes(t: &EventTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.data.len());
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_dump(t: &EventTensor, path: &Path) -> Result<()> {
    fs::write(path, dump_bytes(t)).map_err(io_err(path))
}

/// Inverse of [`dump_bytes`]; the window bounds are not stored and come back as 0.
pub fn parse_dump(bytes: &[u8]) -> Result<EventTensor> {
    if bytes.len() < 12 {
        return invalid("tensor dump shorter than its header");
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c % 2 != 0 || c == 0 {
        return invalid(format!("tensor dump has {c} channels, expected an even count"));
    }
    let body = &bytes[12..];
    if body.len() != 4 * c * h * w {
        return invalid(format!("tensor dump body has {} bytes, expected {}", body.len(), 4 * c * h * w));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    EventTensor::from_data(c / 2, h, w, 0, 0, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_index_reference_values() {
        assert_eq!(bin_index(0, 0, 1000, 10).unwrap(), 0);
        assert_eq!(bin_index(1000, 0, 1000, 10).unwrap(), 9);
        assert_eq!(bin_index(500, 0, 1000, 10).unwrap(), 5);
        assert_eq!(bin_index(999, 0, 1000, 10).unwrap(), 9);
        assert!(bin_index(1001, 0, 1000, 10).is_err());
        assert!(bin_index(5, 0, 1000, 0).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let ev = [EventPoint::new(3, 1, 0, 1), EventPoint::new(9, 0, 1, 0)];
        let t = encode_window(&ev, 0, 10, 2, 2, 2).unwrap();
        let back = parse_dump(&dump_bytes(&t)).unwrap();
        assert_eq!(back.data(), t.data());
        assert_eq!(back.shape(), t.shape());
    }
}
