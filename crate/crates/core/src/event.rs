//! Raw and normalized event representations.
//!
//! A raw event is an integer `(x, y, t, p)` tuple as produced by a sensor.
//! Fixed-length slices of a stream are mapped into a cloud of points in
//! `[-1, 1]^3` (columns `x, y, t`) with a `±1` polarity feature per point,
//! and mapped back again after generation.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A point in normalized `(x, y, t)` space.
pub type Point3 = [f64; 3];

/// A single sensor event. `p` is the raw polarity bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RawEvent {
    pub x: u16,
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: i64,
    pub p: u8,
}

impl RawEvent {
    pub fn new(x: u16, y: u16, t: i64, p: u8) -> Self {
        Self { x, y, t, p }
    }

    /// Ordering used wherever events are sequenced: time first, then
    /// `(y, x, p)` to break timestamp ties.
    pub fn sort_key(&self) -> (i64, u16, u16, u8) {
        (self.t, self.y, self.x, self.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorGeometry {
    pub width: u16,
    pub height: u16,
}

impl SensorGeometry {
    pub fn new(width: u16, height: u16) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::invalid(format!(
                "sensor must be at least 2x2, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, ev: &RawEvent) -> bool {
        ev.x < self.width && ev.y < self.height
    }

    fn check(&self, ev: &RawEvent) -> Result<()> {
        if !self.contains(ev) {
            return Err(Error::invalid(format!(
                "event ({}, {}) outside {}x{} sensor",
                ev.x, ev.y, self.width, self.height
            )));
        }
        if ev.p > 1 {
            return Err(Error::invalid(format!("polarity bit {} not in {{0,1}}", ev.p)));
        }
        if ev.t < 0 {
            return Err(Error::invalid(format!("negative timestamp {}", ev.t)));
        }
        Ok(())
    }
}

/// First and last timestamp of a slice, kept to undo time normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeAnchor {
    pub t0: i64,
    pub tn: i64,
}

impl TimeAnchor {
    pub fn new(t0: i64, tn: i64) -> Result<Self> {
        if tn <= t0 {
            return Err(Error::invalid(format!("degenerate time anchor [{t0}, {tn}]")));
        }
        Ok(Self { t0, tn })
    }

    pub fn span(&self) -> f64 {
        (self.tn - self.t0) as f64
    }
}

/// A time-ordered run of events with a strictly positive duration.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEventSlice {
    events: Vec<RawEvent>,
    geometry: SensorGeometry,
}

impl RawEventSlice {
    pub fn new(events: Vec<RawEvent>, geometry: SensorGeometry) -> Result<Self> {
        if events.len() < 2 {
            return Err(Error::invalid("a slice needs at least two events"));
        }
        for ev in &events {
            geometry.check(ev)?;
        }
        if events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::invalid("slice events are not sorted by timestamp"));
        }
        if events[events.len() - 1].t <= events[0].t {
            return Err(Error::invalid("slice has zero duration"));
        }
        Ok(Self { events, geometry })
    }

    pub fn events(&self) -> &[RawEvent] {
        &self.events
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn anchor(&self) -> TimeAnchor {
        TimeAnchor {
            t0: self.events[0].t,
            tn: self.events[self.events.len() - 1].t,
        }
    }

    pub fn into_events(self) -> Vec<RawEvent> {
        self.events
    }
}

/// Normalized events: coordinates in `[-1, 1]^3`, polarity in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventCloud {
    coords: Vec<Point3>,
    polarity: Vec<f64>,
}

impl EventCloud {
    pub fn new(coords: Vec<Point3>, polarity: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("event cloud must contain at least one point"));
        }
        if coords.len() != polarity.len() {
            return Err(Error::invalid(format!(
                "{} coordinates but {} polarities",
                coords.len(),
                polarity.len()
            )));
        }
        if let Some(i) = coords
            .iter()
            .position(|c| c.iter().any(|v| !v.is_finite() || v.abs() > 1.0))
        {
            return Err(Error::invalid(format!(
                "point {i} {:?} lies outside [-1, 1]^3",
                coords[i]
            )));
        }
        if let Some(i) = polarity.iter().position(|&p| p != 1.0 && p != -1.0) {
            return Err(Error::invalid(format!(
                "polarity {} at {i} is not ±1",
                polarity[i]
            )));
        }
        Ok(Self { coords, polarity })
    }

    /// Builds a cloud from unconstrained coordinates by clamping into the
    /// unit cube and snapping polarity to its sign (zero maps to +1).
    pub fn from_clamped(coords: &[Point3], polarity: &[f64]) -> Result<Self> {
        let coords = coords
            .iter()
            .map(|c| c.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }))
            .collect();
        let polarity = polarity
            .iter()
            .map(|&p| if p < 0.0 { -1.0 } else { 1.0 })
            .collect();
        Self::new(coords, polarity)
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn polarity(&self) -> &[f64] {
        &self.polarity
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Keeps the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "index {i} out of range for {} points",
                self.len()
            )));
        }
        Self::new(
            indices.iter().map(|&i| self.coords[i]).collect(),
            indices.iter().map(|&i| self.polarity[i]).collect(),
        )
    }
}

/// Cuts a stream into consecutive slices of exactly `n` events.
///
/// A trailing remainder shorter than `n` is dropped, and slices whose first
/// and last timestamps coincide are discarded.
pub fn slice_stream(
    events: &[RawEvent],
    geometry: SensorGeometry,
    n: usize,
) -> Result<Vec<RawEventSlice>> {
    if n < 2 {
        return Err(Error::invalid(format!("slice length must be >= 2, got {n}")));
    }
    let mut out = Vec::with_capacity(events.len() / n);
    for chunk in events.chunks_exact(n) {
        if chunk[n - 1].t <= chunk[0].t {
            continue;
        }
        out.push(RawEventSlice::new(chunk.to_vec(), geometry)?);
    }
    Ok(out)
}

fn unit(v: f64, extent: f64) -> f64 {
    (v / extent - 0.5) * 2.0
}

/// Maps a raw slice into the unit cube, returning the time anchor needed to
/// invert the mapping.
pub fn normalize(slice: &RawEventSlice) -> (EventCloud, TimeAnchor) {
    let anchor = slice.anchor();
    let cloud = normalize_with_anchor(slice.events(), slice.geometry(), anchor);
    (cloud, anchor)
}

/// Normalizes events against an externally supplied anchor, e.g. a sparse
/// subset sharing the anchor of its dense parent. Coordinates outside the
/// anchor's time range are clamped.
pub fn normalize_with_anchor(
    events: &[RawEvent],
    geometry: SensorGeometry,
    anchor: TimeAnchor,
) -> EventCloud {
    let wx = f64::from(geometry.width - 1);
    let wy = f64::from(geometry.height - 1);
    let span = anchor.span();
    let coords = events
        .iter()
        .map(|e| {
            [
                unit(f64::from(e.x), wx).clamp(-1.0, 1.0),
                unit(f64::from(e.y), wy).clamp(-1.0, 1.0),
                unit((e.t - anchor.t0) as f64, span).clamp(-1.0, 1.0),
            ]
        })
        .collect();
    let polarity = events.iter().map(|e| (f64::from(e.p) - 0.5) * 2.0).collect();
    EventCloud { coords, polarity }
}

/// Inverse of [`normalize`]: rounds to the nearest pixel and microsecond and
/// returns the events sorted by `(t, y, x, p)`.
pub fn denormalize(
    cloud: &EventCloud,
    geometry: SensorGeometry,
    anchor: TimeAnchor,
) -> RawEventSlice {
    let wx = f64::from(geometry.width - 1);
    let wy = f64::from(geometry.height - 1);
    let span = anchor.span();
    let mut events: Vec<RawEvent> = cloud
        .coords()
        .iter()
        .zip(cloud.polarity())
        .map(|(c, &p)| {
            let x = ((c[0] / 2.0 + 0.5) * wx).round().clamp(0.0, wx) as u16;
            let y = ((c[1] / 2.0 + 0.5) * wy).round().clamp(0.0, wy) as u16;
            let t = (anchor.t0 as f64 + (c[2] / 2.0 + 0.5) * span)
                .round()
                .clamp(anchor.t0 as f64, anchor.tn as f64) as i64;
            let p = if p > 0.0 { 1 } else { 0 };
            RawEvent { x, y, t, p }
        })
        .collect();
    events.sort_by_key(RawEvent::sort_key);
    if events.len() >= 2 && events[events.len() - 1].t <= events[0].t {
        // Every point collapsed onto a single instant; stretch the ends so
        // the slice keeps its anchor's duration.
        events[0].t = anchor.t0;
        let last = events.len() - 1;
        events[last].t = anchor.tn;
        events.sort_by_key(RawEvent::sort_key);
    }
    if events.len() < 2 {
        // A single point still has to form a valid slice; duplicate it at
        // both ends of the anchor.
        let e = events[0];
        events = vec![
            RawEvent { t: anchor.t0, ..e },
            RawEvent { t: anchor.tn, ..e },
        ];
    }
    RawEventSlice { events, geometry }
}

/// Uniform random subset of `m` points without replacement, keeping the
/// original relative order.
pub fn subsample(cloud: &EventCloud, m: usize, seed: u64) -> Result<EventCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = subsample_indices(cloud.len(), m, &mut rng)?;
    cloud.select(&idx)
}

pub(crate) fn subsample_indices(
    n: usize,
    m: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "cannot subsample {m} of {n} points"
        )));
    }
    let mut idx = index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(x: u16, y: u16, t: i64, p: u8) -> RawEvent {
        RawEvent::new(x, y, t, p)
    }

    fn geom(w: u16, h: u16) -> SensorGeometry {
        SensorGeometry::new(w, h).unwrap()
    }

    #[test]
    fn slicing_drops_remainder() {
        let events: Vec<_> = (0..10).map(|i| ev(0, 0, i, 0)).collect();
        let slices = slice_stream(&events, geom(4, 4), 4).unwrap();
        assert_eq!(slices.len(), 2);
        assert_eq!(slices[1].events()[0].t, 4);
    }

    #[test]
    fn slicing_discards_degenerate() {
        let events: Vec<_> = (0..4).map(|i| ev(i, 0, 100, 1)).collect();
        assert!(slice_stream(&events, geom(4, 4), 4).unwrap().is_empty());
    }

    #[test]
    fn slicing_identity_and_errors() {
        let events: Vec<_> = (0..1024).map(|i| ev(i as u16 % 34, 0, i, 0)).collect();
        let slices = slice_stream(&events, geom(34, 34), 1024).unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].events(), &events[..]);
        assert!(slice_stream(&[], geom(4, 4), 4).unwrap().is_empty());
        assert!(matches!(
            slice_stream(&events, geom(34, 34), 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn normalize_endpoints() {
        let g = geom(34, 34);
        let s = RawEventSlice::new(vec![ev(0, 33, 50, 0), ev(33, 0, 150, 1)], g).unwrap();
        let (cloud, anchor) = normalize(&s);
        assert_eq!(cloud.coords()[0], [-1.0, 1.0, -1.0]);
        assert_eq!(cloud.coords()[1], [1.0, -1.0, 1.0]);
        assert_eq!(cloud.polarity(), &[-1.0, 1.0]);
        assert_eq!(anchor, TimeAnchor::new(50, 150).unwrap());
    }

    #[test]
    fn denormalize_clamps_and_orders_ties() {
        let g = geom(34, 34);
        let anchor = TimeAnchor::new(0, 1000).unwrap();
        let cloud = EventCloud::new(
            vec![[0.999, 0.5, 0.0], [0.2, -0.5, 0.0], [-1.0, -0.5, 0.0]],
            vec![1.0, -1.0, 1.0],
        )
        .unwrap();
        let s = denormalize(&cloud, g, anchor);
        let evs = s.events();
        assert_eq!(evs.len(), 3);
        assert!(evs.iter().any(|e| e.x == 33));
        // All share t=500: ordered by y then x.
        assert!(evs.iter().all(|e| e.t == 500) || evs[0].t == 0);
        let keys: Vec<_> = evs.iter().map(RawEvent::sort_key).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn cloud_rejects_bad_values() {
        assert!(EventCloud::new(vec![], vec![]).is_err());
        assert!(EventCloud::new(vec![[1.5, 0.0, 0.0]], vec![1.0]).is_err());
        assert!(EventCloud::new(vec![[0.5, 0.0, 0.0]], vec![0.0]).is_err());
        assert!(EventCloud::new(vec![[0.5, 0.0, 0.0]], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn slice_rejects_bad_events() {
        let g = geom(4, 4);
        assert!(RawEventSlice::new(vec![ev(4, 0, 0, 0), ev(0, 0, 1, 0)], g).is_err());
        assert!(RawEventSlice::new(vec![ev(0, 0, 0, 2), ev(0, 0, 1, 0)], g).is_err());
        assert!(RawEventSlice::new(vec![ev(0, 0, 5, 0), ev(0, 0, 1, 0)], g).is_err());
        assert!(SensorGeometry::new(1, 4).is_err());
    }

    #[test]
    fn subsample_identity_and_determinism() {
        let coords: Vec<Point3> = (0..10).map(|i| [i as f64 / 10.0, 0.0, 0.0]).collect();
        let cloud = EventCloud::new(coords, vec![1.0; 10]).unwrap();
        assert_eq!(subsample(&cloud, 10, 3).unwrap(), cloud);
        let a = subsample(&cloud, 4, 42).unwrap();
        let b = subsample(&cloud, 4, 42).unwrap();
        assert_eq!(a, b);
        // order preserved
        assert!(a.coords().windows(2).all(|w| w[0][0] < w[1][0]));
        assert!(subsample(&cloud, 11, 0).is_err());
        assert!(subsample(&cloud, 0, 0).is_err());
    }

    #[test]
    fn subsample_pairs_are_uniform() {
        // Chi-square against the uniform distribution over the 28 pairs of
        // 8 indices; 27 degrees of freedom, 99.9% quantile ≈ 55.5.
        let n = 8;
        let trials = 100_000;
        let mut counts = [[0u32; 8]; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..trials {
            let idx = subsample_indices(n, 2, &mut rng).unwrap();
            counts[idx[0]][idx[1]] += 1;
        }
        let expected = trials as f64 / 28.0;
        let sigma = (trials as f64 * (1.0 / 28.0) * (27.0 / 28.0)).sqrt();
        let mut chi2 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let c = f64::from(counts[i][j]);
                assert!((c - expected).abs() <= 3.0 * sigma + 1.0, "pair ({i},{j}) {c}");
                chi2 += (c - expected).powi(2) / expected;
            }
        }
        assert!(chi2 < 55.5, "chi2 = {chi2}");
    }
}
