//! Synthetic open-world scenes: flat shapes drifting over a dark background,
//! observed by an idealized contrast-threshold sensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, EventPoint, EventStream};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disc,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Disc, ShapeKind::Triangle];

    pub fn class_id(self) -> u32 {
        match self {
            ShapeKind::Rectangle => 0,
            ShapeKind::Disc => 1,
            ShapeKind::Triangle => 2,
        }
    }

    pub fn from_class_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.class_id() == id)
    }
}

/// Randomly placed shapes of one kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapePopulation {
    pub kind: ShapeKind,
    pub count: usize,
    /// Nominal extent in pixels, `[min, max]`.
    pub size: [f64; 2],
    /// Pixels per second, `[min, max]`; the direction is uniform.
    pub speed: [f64; 2],
    /// Log-intensity step against the background, `[min, max]`; the sign is random.
    pub contrast: [f64; 2],
}

/// A fully specified shape. Velocities in pixels per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeInit {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    #[serde(default)]
    pub population: Vec<ShapePopulation>,
    #[serde(default)]
    pub shapes: Vec<ShapeInit>,
    pub known_kinds: Vec<ShapeKind>,
    /// Uniform background events per pixel per second.
    #[serde(default)]
    pub noise_rate: f64,
    pub seed: u64,
    #[serde(default = "default_annotation_period")]
    pub annotation_period_us: u64,
    #[serde(default = "default_micro_step")]
    pub micro_step_us: u64,
    /// Log-intensity change needed to fire an event.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_annotation_period() -> u64 {
    10_000
}

fn default_micro_step() -> u64 {
    500
}

fn default_threshold() -> f64 {
    0.2
}

impl SceneSpec {
    pub fn new(width: u16, height: u16, duration_us: u64, seed: u64) -> Self {
        Self {
            width,
            height,
            duration_us,
            population: Vec::new(),
            shapes: Vec::new(),
            known_kinds: vec![ShapeKind::Rectangle],
            noise_rate: 0.0,
            seed,
            annotation_period_us: default_annotation_period(),
            micro_step_us: default_micro_step(),
            threshold: default_threshold(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::DeoeError::Invalid(format!("scene spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return invalid("scene has an empty sensor");
        }
        if self.duration_us == 0 {
            return invalid("scene duration must be positive");
        }
        if self.annotation_period_us == 0 || self.micro_step_us == 0 {
            return invalid("annotation period and micro-step must be positive");
        }
        if !(self.threshold > 0.0) {
            return invalid("contrast threshold must be positive");
        }
        if !(self.noise_rate >= 0.0) {
            return invalid("noise rate must be non-negative");
        }
        for p in &self.population {
            let ranges = [("size", p.size), ("speed", p.speed), ("contrast", p.contrast)];
            for (name, r) in ranges {
                if !(r[0] <= r[1]) || r[0] < 0.0 {
                    return invalid(format!("{:?} population: bad {name} range {r:?}", p.kind));
                }
            }
            if p.count > 0 && p.size[0] <= 0.0 {
                return invalid(format!("{:?} population: zero-area shapes", p.kind));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    cx0: f64,
    cy0: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    contrast: f64,
}

/// Position along `[lo, lo + span]` of a point moving with constant speed and
/// bouncing off both ends.
fn reflect(start: f64, velocity: f64, t_s: f64, lo: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return lo;
    }
    let period = 2.0 * span;
    let u = (start - lo + velocity * t_s).rem_euclid(period);
    lo + if u > span { period - u } else { u }
}

impl Shape {
    fn validate(&self, width: f64, height: f64, tick_s: f64, index: usize) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return invalid(format!("shape {index}: zero-area {:?}", self.kind));
        }
        if self.w > width || self.h > height {
            return invalid(format!("shape {index}: larger than the frame"));
        }
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        if self.cx0 < hw || self.cx0 > width - hw || self.cy0 < hh || self.cy0 > height - hh {
            return invalid(format!("shape {index}: starts outside the frame"));
        }
        // Moving further than the free room in one annotation period would
        // carry the shape across the frame before it is first observed.
        for (v, room, axis) in [(self.vx, width - self.w, 'x'), (self.vy, height - self.h, 'y')] {
            if !v.is_finite() || (v != 0.0 && v.abs() * tick_s > room) {
                return invalid(format!(
                    "shape {index}: {axis}-velocity {v} px/s leaves the frame before the first annotation"
                ));
            }
        }
        Ok(())
    }

    fn center(&self, t_us: u64, width: f64, height: f64) -> (f64, f64) {
        let t_s = t_us as f64 * 1e-6;
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        (
            reflect(self.cx0, self.vx, t_s, hw, width - self.w),
            reflect(self.cy0, self.vy, t_s, hh, height - self.h),
        )
    }

    fn contains(&self, cx: f64, cy: f64, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= 0.5 * self.w && dy.abs() <= 0.5 * self.h,
            ShapeKind::Disc => {
                let (a, b) = (0.5 * self.w, 0.5 * self.h);
                (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
            }
            ShapeKind::Triangle => {
                // Apex up, base at the bottom edge.
                let depth = dy + 0.5 * self.h;
                (0.0..=self.h).contains(&depth) && dx.abs() <= 0.5 * self.w * depth / self.h
            }
        }
    }
}

fn sample_range<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn build_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let mut shapes = Vec::new();
    for pop in &spec.population {
        for _ in 0..pop.count {
            let s = sample_range(rng, pop.size);
            let (w, h) = match pop.kind {
                ShapeKind::Rectangle => {
                    let aspect: f64 = rng.random_range(0.6..1.6);
                    (s * aspect.sqrt(), s / aspect.sqrt())
                }
                ShapeKind::Disc => (s, s),
                ShapeKind::Triangle => (s, 0.9 * s),
            };
            let (w, h) = (w.min(fw), h.min(fh));
            let cx = 0.5 * w + rng.random::<f64>() * (fw - w);
            let cy = 0.5 * h + rng.random::<f64>() * (fh - h);
            let speed = sample_range(rng, pop.speed);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let magnitude = sample_range(rng, pop.contrast);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            shapes.push(Shape {
                kind: pop.kind,
                cx0: cx,
                cy0: cy,
                w,
                h,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                contrast: sign * magnitude,
            });
        }
    }
    shapes.extend(spec.shapes.iter().map(|s| Shape {
        kind: s.kind,
        cx0: s.cx,
        cy0: s.cy,
        w: s.width,
        h: s.height,
        vx: s.vx,
        vy: s.vy,
        contrast: s.contrast,
    }));
    shapes
}

fn render(shapes: &[Shape], t_us: u64, width: usize, height: usize, out: &mut [f32]) {
    out.fill(0.0);
    let (fw, fh) = (width as f64, height as f64);
    for s in shapes {
        let (cx, cy) = s.center(t_us, fw, fh);
        let x0 = (cx - 0.5 * s.w).floor().max(0.0) as usize;
        let y0 = (cy - 0.5 * s.h).floor().max(0.0) as usize;
        let x1 = ((cx + 0.5 * s.w).ceil() as usize).min(width);
        let y1 = ((cy + 0.5 * s.h).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                if s.contains(cx, cy, x as f64 + 0.5, y as f64 + 0.5) {
                    out[y * width + x] = s.contrast as f32;
                }
            }
        }
    }
}

/// Generates the event stream and annotations of a scene. Deterministic in
/// `spec` (including its seed).
///
/// Every micro-step the scene is re-rendered; a pixel whose log intensity
/// changed by at least the threshold fires one event, timestamped uniformly
/// inside the micro-step. Annotations are emitted for every shape at
/// `k * annotation_period_us` for `k >= 1`.
pub fn synth_scene(spec: &SceneSpec) -> Result<(EventStream, Vec<AnnotationRecord>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = build_shapes(spec, &mut rng);
    let (width, height) = (spec.width as usize, spec.height as usize);
    let (fw, fh) = (width as f64, height as f64);
    let tick_s = spec.annotation_period_us as f64 * 1e-6;
    for (i, s) in shapes.iter().enumerate() {
        s.validate(fw, fh, tick_s, i)?;
    }

    let mut events = Vec::new();
    let moving = shapes.iter().any(|s| s.vx != 0.0 || s.vy != 0.0);
    if moving {
        let threshold = spec.threshold as f32;
        let mut prev = vec![0f32; width * height];
        let mut cur = vec![0f32; width * height];
        render(&shapes, 0, width, height, &mut prev);
        let mut t_prev = 0u64;
        while t_prev < spec.duration_us {
            let t_cur = (t_prev + spec.micro_step_us).min(spec.duration_us);
            render(&shapes, t_cur, width, height, &mut cur);
            for (i, (&a, &b)) in prev.iter().zip(&cur).enumerate() {
                let delta = b - a;
                if delta.abs() >= threshold {
                    let t = rng.random_range(t_prev..t_cur);
                    events.push(EventPoint::new(t, (i % width) as u16, (i / width) as u16, u8::from(delta > 0.0)));
                }
            }
            std::mem::swap(&mut prev, &mut cur);
            t_prev = t_cur;
        }
    }

    if spec.noise_rate > 0.0 {
        let mean = spec.noise_rate * fw * fh * spec.duration_us as f64 * 1e-6;
        let count = Poisson::new(mean)
            .map_err(|e| crate::DeoeError::Invalid(format!("noise rate: {e}")))?
            .sample(&mut rng) as u64;
        for _ in 0..count {
            events.push(EventPoint::new(
                rng.random_range(0..spec.duration_us),
                rng.random_range(0..spec.width),
                rng.random_range(0..spec.height),
                rng.random_range(0..2u8),
            ));
        }
    }
    events.sort_by_key(|e| e.t);

    let mut annotations = Vec::new();
    let ticks = spec.duration_us / spec.annotation_period_us;
    for k in 1..=ticks {
        let t = k * spec.annotation_period_us;
        for s in &shapes {
            let (cx, cy) = s.center(t, fw, fh);
            let b = crate::geometry::BBox::from_center(cx, cy, s.w, s.h)
                .clip(fw, fh)
                .expect("shapes stay inside the frame");
            annotations.push(AnnotationRecord {
                t,
                x_min: b.x_min,
                y_min: b.y_min,
                w: b.w,
                h: b.h,
                class_id: s.kind.class_id(),
                annotated: spec.known_kinds.contains(&s.kind),
            });
        }
    }
    Ok((EventStream::new(spec.width, spec.height, events)?, annotations))
}
