//! Synthetic event streams from moving shapes.
//!
//! Every pixel tracks a reference log-brightness. Whenever the scene's log
//! brightness has moved at least one threshold away from it, the pixel
//! fires once per whole threshold crossed and the reference steps along.
//! Crossing times are interpolated linearly inside each simulation step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::{normalize, slice_stream, subsample_indices, EventCloud, RawEvent, SensorGeometry, TimeAnchor};

/// Width of the soft edge of every shape, in pixels.
const EDGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// A rectangle rotating at `omega` rad/µs around its moving center.
    Bar {
        center: [f64; 2],
        velocity: [f64; 2],
        angle: f64,
        omega: f64,
        half_len: f64,
        half_width: f64,
    },
    /// A disk whose radius grows by `growth` px/µs.
    Disk {
        center: [f64; 2],
        velocity: [f64; 2],
        radius: f64,
        growth: f64,
    },
    /// A thick polyline translating rigidly.
    Stroke {
        points: Vec<[f64; 2]>,
        velocity: [f64; 2],
        half_width: f64,
    },
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let h = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap[0] - h * ab[0]).hypot(ap[1] - h * ab[1])
}

impl Shape {
    /// Signed distance from pixel `p` to the shape at time `tau` (negative
    /// inside).
    pub fn signed_distance(&self, p: [f64; 2], tau: f64) -> f64 {
        match self {
            Shape::Bar {
                center,
                velocity,
                angle,
                omega,
                half_len,
                half_width,
            } => {
                let c = [center[0] + velocity[0] * tau, center[1] + velocity[1] * tau];
                let (s, co) = (angle + omega * tau).sin_cos();
                let d = [p[0] - c[0], p[1] - c[1]];
                let u = (co * d[0] + s * d[1]).abs() - half_len;
                let v = (-s * d[0] + co * d[1]).abs() - half_width;
                u.max(0.0).hypot(v.max(0.0)) + u.max(v).min(0.0)
            }
            Shape::Disk {
                center,
                velocity,
                radius,
                growth,
            } => {
                let c = [center[0] + velocity[0] * tau, center[1] + velocity[1] * tau];
                let r = (radius + growth * tau).max(0.1);
                (p[0] - c[0]).hypot(p[1] - c[1]) - r
            }
            Shape::Stroke {
                points,
                velocity,
                half_width,
            } => {
                let q = [p[0] - velocity[0] * tau, p[1] - velocity[1] * tau];
                let d = points
                    .windows(2)
                    .map(|w| seg_dist(q, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                let d = if points.len() == 1 {
                    (q[0] - points[0][0]).hypot(q[1] - points[0][1])
                } else {
                    d
                };
                d - half_width
            }
        }
    }

    fn is_finite(&self) -> bool {
        let fin = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Shape::Bar {
                center,
                velocity,
                angle,
                omega,
                half_len,
                half_width,
            } => fin(center) && fin(velocity) && fin(&[*angle, *omega, *half_len, *half_width]),
            Shape::Disk {
                center,
                velocity,
                radius,
                growth,
            } => fin(center) && fin(velocity) && fin(&[*radius, *growth]),
            Shape::Stroke {
                points,
                velocity,
                half_width,
            } => !points.is_empty() && points.iter().all(|p| fin(p)) && fin(velocity) && half_width.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Log-brightness added inside the shape.
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub geometry: SensorGeometry,
    /// Length of the simulated interval in µs.
    pub duration: i64,
    pub objects: Vec<SceneObject>,
    /// Log-brightness of empty background.
    pub background: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration <= 0 {
            return Err(Error::invalid("scene duration must be positive"));
        }
        if self.objects.is_empty() {
            return Err(Error::invalid("scene needs at least one object"));
        }
        if !self.background.is_finite()
            || self.objects.iter().any(|o| !o.contrast.is_finite() || !o.shape.is_finite())
        {
            return Err(Error::invalid("scene parameters must be finite"));
        }
        Ok(())
    }

    /// Log brightness of pixel `(x, y)` at time `tau`.
    pub fn log_brightness(&self, x: f64, y: f64, tau: f64) -> f64 {
        self.background
            + self
                .objects
                .iter()
                .map(|o| {
                    let sd = o.shape.signed_distance([x, y], tau);
                    o.contrast / (1.0 + (sd / EDGE).exp())
                })
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureSpec {
    /// Contrast threshold in log-brightness units.
    pub threshold: f64,
    /// Per-pixel dead time in µs after an emitted event.
    pub refractory: i64,
    /// Simulation step in µs.
    pub frame_dt: i64,
}

impl Default for CaptureSpec {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            refractory: 100,
            frame_dt: 500,
        }
    }
}

impl CaptureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) || self.frame_dt < 1 || self.refractory < 0 {
            return Err(Error::invalid(format!("invalid capture settings {self:?}")));
        }
        Ok(())
    }
}

/// Simulates the sensor over the scene and returns events sorted by
/// `(t, y, x, p)`.
///
/// `seed` draws each pixel's initial reference level uniformly within half
/// a threshold of its true initial brightness, so pixels do not all fire in
/// phase.
pub fn simulate_events(scene: &SceneSpec, capture: &CaptureSpec, seed: u64) -> Result<Vec<RawEvent>> {
    scene.validate()?;
    capture.validate()?;
    let (w, h) = (usize::from(scene.geometry.width), usize::from(scene.geometry.height));
    let th = capture.threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = |tau: f64| -> Vec<f64> {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| scene.log_brightness(x as f64, y as f64, tau))
            .collect()
    };
    let mut prev = frame(0.0);
    let mut reference: Vec<f64> = prev
        .iter()
        .map(|l| l + th * (rng.random::<f64>() - 0.5))
        .collect();
    let mut last_fire = vec![i64::MIN; w * h];
    let mut events = Vec::new();
    let steps = scene.duration / capture.frame_dt;
    for k in 1..=steps {
        let t_prev = (k - 1) * capture.frame_dt;
        let cur = frame((k * capture.frame_dt) as f64);
        for (i, (&l_new, &l_old)) in cur.iter().zip(&prev).enumerate() {
            let delta = l_new - reference[i];
            let n = (delta.abs() / th).floor() as usize;
            let sign = delta.signum();
            for _ in 0..n {
                let level = reference[i] + sign * th;
                reference[i] = level;
                let f = if l_new != l_old {
                    ((level - l_old) / (l_new - l_old)).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let t = t_prev + (f * capture.frame_dt as f64).round() as i64;
                if last_fire[i] != i64::MIN && t - last_fire[i] < capture.refractory {
                    continue;
                }
                last_fire[i] = t;
                events.push(RawEvent {
                    x: (i % w) as u16,
                    y: (i / w) as u16,
                    t,
                    p: u8::from(sign > 0.0),
                });
            }
        }
        prev = cur;
    }
    events.sort_by_key(RawEvent::sort_key);
    Ok(events)
}

/// A random scene of one or two objects: a translating or rotating bar, an
/// expanding disk, or a digit-like stroke.
pub fn random_scene(geometry: SensorGeometry, duration: i64, rng: &mut impl Rng) -> SceneSpec {
    let (w, h) = (f64::from(geometry.width), f64::from(geometry.height));
    let span = w.min(h);
    let dur = duration as f64;
    let count = rng.random_range(1..=2);
    let objects = (0..count)
        .map(|_| {
            let center = [rng.random_range(0.2 * w..0.8 * w), rng.random_range(0.2 * h..0.8 * h)];
            let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.3..0.9) * span / dur;
            let velocity = [speed * heading.cos(), speed * heading.sin()];
            // Start upstream so the object crosses the sensor.
            let start = [center[0] - velocity[0] * dur / 2.0, center[1] - velocity[1] * dur / 2.0];
            let shape = match rng.random_range(0..4) {
                0 => Shape::Bar {
                    center: start,
                    velocity,
                    angle: heading + std::f64::consts::FRAC_PI_2,
                    omega: 0.0,
                    half_len: rng.random_range(0.2..0.4) * span,
                    half_width: rng.random_range(1.0..2.5),
                },
                1 => Shape::Bar {
                    center,
                    velocity: [0.0, 0.0],
                    angle: heading,
                    omega: rng.random_range(1.0..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 } / dur,
                    half_len: rng.random_range(0.25..0.4) * span,
                    half_width: rng.random_range(1.0..2.0),
                },
                2 => Shape::Disk {
                    center,
                    velocity: [velocity[0] * 0.3, velocity[1] * 0.3],
                    radius: rng.random_range(1.0..3.0),
                    growth: rng.random_range(0.2..0.4) * span / dur,
                },
                _ => {
                    let n = rng.random_range(3..=5);
                    let mut p = [rng.random_range(-0.25..0.25) * span, rng.random_range(-0.25..0.25) * span];
                    let mut points = Vec::with_capacity(n);
                    for _ in 0..n {
                        points.push([start[0] + p[0], start[1] + p[1]]);
                        p = [
                            (p[0] + rng.random_range(-0.3..0.3) * span).clamp(-0.3 * span, 0.3 * span),
                            (p[1] + rng.random_range(-0.3..0.3) * span).clamp(-0.3 * span, 0.3 * span),
                        ];
                    }
                    Shape::Stroke {
                        points,
                        velocity,
                        half_width: rng.random_range(0.8..1.6),
                    }
                }
            };
            let magnitude = rng.random_range(0.6..1.5);
            SceneObject {
                shape,
                contrast: if rng.random_bool(0.5) { magnitude } else { -magnitude },
            }
        })
        .collect();
    SceneSpec {
        geometry,
        duration,
        objects,
        background: 0.0,
    }
}

/// A dense slice, a sparse subset of it and the shared time anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub sparse: EventCloud,
    pub dense: EventCloud,
    pub anchor: TimeAnchor,
}

/// Cuts `events` into `n_dense`-event slices, normalizes each and draws a
/// uniform `n_sparse`-point subset. Too few events yield an empty list.
pub fn build_pairs(
    events: &[RawEvent],
    geometry: SensorGeometry,
    n_dense: usize,
    n_sparse: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if n_sparse == 0 || n_sparse >= n_dense {
        return Err(Error::invalid(format!(
            "need 0 < sparse ({n_sparse}) < dense ({n_dense})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slice_stream(events, geometry, n_dense)?
        .iter()
        .map(|slice| {
            let (dense, anchor) = normalize(slice);
            let idx = subsample_indices(n_dense, n_sparse, &mut rng)?;
            Ok(TrainingPair {
                sparse: dense.select(&idx)?,
                dense,
                anchor,
            })
        })
        .collect()
}

/// Settings for a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub geometry: SensorGeometry,
    pub duration: i64,
    pub capture: CaptureSpec,
    pub n_dense: usize,
    pub n_sparse: usize,
}

/// One simulated scene's raw events and its pairs.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub events: Vec<RawEvent>,
    pub pairs: Vec<TrainingPair>,
}

/// Simulates scene `index` of the dataset with seed `seed`. Each scene gets
/// its own random stream, so scenes can be generated in any order.
pub fn simulate_scene(spec: &DatasetSpec, seed: u64, index: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let scene = random_scene(spec.geometry, spec.duration, &mut rng);
    let events = simulate_events(&scene, &spec.capture, rng.random())?;
    let pairs = build_pairs(&events, spec.geometry, spec.n_dense, spec.n_sparse, rng.random())?;
    Ok(SceneSample { events, pairs })
}

/// Exactly `count` pairs from consecutive scenes, simulated in parallel.
pub fn synthetic_pairs(spec: &DatasetSpec, count: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    const BATCH: u64 = 16;
    let mut out = Vec::with_capacity(count);
    let mut next = 0u64;
    let mut empty_batches = 0;
    while out.len() < count {
        let batch: Vec<SceneSample> = (next..next + BATCH)
            .into_par_iter()
            .map(|i| simulate_scene(spec, seed, i))
            .collect::<Result<_>>()?;
        next += BATCH;
        let before = out.len();
        out.extend(batch.into_iter().flat_map(|s| s.pairs));
        if out.len() == before {
            empty_batches += 1;
            if empty_batches >= 8 {
                return Err(Error::invalid("scenes produce too few events for one slice"));
            }
        }
    }
    out.truncate(count);
    Ok(out)
}
