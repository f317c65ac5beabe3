//! Streaming voxel-grid encoder, bit-exact with the reference batch pipeline.
//!
//! The accumulation contract (shared with the reference implementation):
//! per event, with integer numerator `n = (bins-1) * (t - t0)` and remainder
//! `r = n mod dt`, the two kernel weights are `(dt - r) / dt` and `r / dt`,
//! each a single correctly rounded f64 division; the signed contribution is
//! cast to f32 and added into the grid in strict event order, left bin
//! before right bin.  Because `r` is an exact integer, the weights are
//! invariant under shifting the window start by whole bin durations, which
//! is what makes rolling plane reuse bitwise safe.
//!
//! The rolling state advances in whole-bin steps when the query time allows
//! it: bin planes shift down, the lowest plane is re-kerneled from the
//! boundary-straddling events, the freed planes restart at zero, and only
//! events newer than the previous query are folded in.  Non-bin-aligned
//! queries fall back to recomputing the window from the retained buffer,
//! which keeps parity exact in every case.

pub mod formats;

use std::collections::VecDeque;
use std::fmt;

pub use formats::{Event, VoxelGrid};

#[derive(Debug, PartialEq, Eq)]
pub enum EncoderError {
    /// offending event index within the pushed batch
    TimestampRegression(usize),
    OutOfBounds(usize),
    BadPolarity(usize),
    NonMonotoneQuery { previous: u64, requested: u64 },
    WindowBeforeRetainedData { window_start: u64, horizon: u64 },
    BadConfig(String),
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::TimestampRegression(i) => {
                write!(f, "timestamp regression at pushed event index {i}")
            }
            EncoderError::OutOfBounds(i) => write!(f, "event {i} outside sensor bounds"),
            EncoderError::BadPolarity(i) => write!(f, "event {i} has polarity not in {{-1,+1}}"),
            EncoderError::NonMonotoneQuery { previous, requested } => write!(
                f,
                "query time {requested} is earlier than previous query {previous}"
            ),
            EncoderError::WindowBeforeRetainedData { window_start, horizon } => write!(
                f,
                "window start {window_start} precedes retained horizon {horizon}"
            ),
            EncoderError::BadConfig(msg) => write!(f, "bad configuration: {msg}"),
        }
    }
}

impl std::error::Error for EncoderError {}

/// Contribution of one event to the grid under window start `t0`.
#[inline]
fn accumulate_event(
    values: &mut [f32],
    plane: usize,
    height: usize,
    width: usize,
    bins: i64,
    t0: u64,
    dt: i64,
    ev: &Event,
    lowest_plane_only: bool,
) {
    let n = (bins - 1) * (ev.t as i64 - t0 as i64);
    let b = n / dt;
    let r = n - b * dt;
    let w_left = (dt - r) as f64 / dt as f64;
    let cell = (ev.y as usize) * width + ev.x as usize;
    let ring = values.len() / (height * width);
    let base = move |bin: i64| ((plane + bin as usize) % ring) * height * width + cell;
    values[base(b)] += (ev.p as f64 * w_left) as f32;
    if !lowest_plane_only && b + 1 < bins {
        let w_right = r as f64 / dt as f64;
        values[base(b + 1)] += (ev.p as f64 * w_right) as f32;
    }
}

/// One-shot reference accumulation over `[t0, t0 + dt)` (no ring indirection).
pub fn batch_accumulate(
    events: &[Event],
    t0: u64,
    dt: u64,
    bins: u32,
    height: u32,
    width: u32,
) -> Vec<f32> {
    let (h, w) = (height as usize, width as usize);
    let mut values = vec![0f32; bins as usize * h * w];
    let t_end = t0 + dt;
    for ev in events {
        if ev.t < t0 || ev.t >= t_end {
            continue;
        }
        accumulate_event(&mut values, 0, h, w, bins as i64, t0, dt as i64, ev, false);
    }
    values
}

/// Clip to `[-clip, clip]` and map affinely onto `[0, 1]` in f32.
pub fn normalize(values: &[f32], clip: f32) -> Vec<f32> {
    let two_clip = 2.0f32 * clip;
    values
        .iter()
        .map(|&v| (v.max(-clip).min(clip) + clip) / two_clip)
        .collect()
}

struct Cache {
    bins: u32,
    dt: u64,
    t_end: u64,
    /// ring of bin planes; plane index 0 lives at `head`
    head: usize,
    values: Vec<f32>,
}

pub struct RollingEncoder {
    width: u32,
    height: u32,
    buffer: VecDeque<Event>,
    last_push_t: u64,
    last_query_t_end: Option<u64>,
    horizon: u64, // events before this time have been dropped
    cache: Option<Cache>,
}

impl RollingEncoder {
    pub fn new(width: u32, height: u32) -> Self {
        RollingEncoder {
            width,
            height,
            buffer: VecDeque::new(),
            last_push_t: 0,
            last_query_t_end: None,
            horizon: 0,
            cache: None,
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Append a time-sorted batch; timestamps may not regress, including
    /// against earlier pushes.
    pub fn push_events(&mut self, events: &[Event]) -> Result<(), EncoderError> {
        let mut prev = self.last_push_t;
        for (i, ev) in events.iter().enumerate() {
            if ev.t < prev {
                return Err(EncoderError::TimestampRegression(i));
            }
            if ev.x as u32 >= self.width || ev.y as u32 >= self.height {
                return Err(EncoderError::OutOfBounds(i));
            }
            if ev.p != 1 && ev.p != -1 {
                return Err(EncoderError::BadPolarity(i));
            }
            prev = ev.t;
        }
        for ev in events {
            if ev.t >= self.horizon {
                self.buffer.push_back(*ev);
            }
        }
        self.last_push_t = prev.max(self.last_push_t);
        Ok(())
    }

    fn drop_before(&mut self, t: u64) {
        while let Some(front) = self.buffer.front() {
            if front.t < t {
                self.buffer.pop_front();
            } else {
                break;
            }
        }
        self.horizon = self.horizon.max(t);
    }

    fn plane_len(&self) -> usize {
        self.height as usize * self.width as usize
    }

    fn full_rebuild(&mut self, t0: u64, t_end: u64, bins: u32, dt: u64) {
        let plane = self.plane_len();
        let mut values = vec![0f32; bins as usize * plane];
        for ev in self.buffer.iter() {
            if ev.t < t0 || ev.t >= t_end {
                continue;
            }
            accumulate_event(
                &mut values,
                0,
                self.height as usize,
                self.width as usize,
                bins as i64,
                t0,
                dt as i64,
                ev,
                false,
            );
        }
        self.cache = Some(Cache { bins, dt, t_end, head: 0, values });
    }

    /// Advance the cached grid by `m` whole bin durations and fold in the
    /// events between the old and new query times.
    fn advance_aligned(&mut self, m: u64, t_end: u64, bins: u32, dt: u64) {
        let plane = self.plane_len();
        let b = bins as usize;
        let cache = self.cache.as_mut().expect("aligned advance requires a cache");
        let old_t_end = cache.t_end;
        let t0 = t_end - dt;

        // rotate: new plane k is old plane k+m; freed planes restart at zero
        cache.head = (cache.head + m as usize) % b;
        for k in (b - m as usize)..b {
            let start = ((cache.head + k) % b) * plane;
            cache.values[start..start + plane].fill(0.0);
        }
        // the lowest plane must forget dropped events: re-kernel the
        // boundary-straddling ones (their upper-bin share is already in the
        // reused neighbor plane)
        let start = cache.head * plane;
        cache.values[start..start + plane].fill(0.0);
        let (h, w) = (self.height as usize, self.width as usize);
        let head = cache.head;
        for ev in self.buffer.iter() {
            if ev.t < t0 {
                continue;
            }
            let n = (bins as i64 - 1) * (ev.t as i64 - t0 as i64);
            if n >= dt as i64 {
                break; // sorted buffer: past the first bin span
            }
            accumulate_event(&mut cache.values, head, h, w, bins as i64, t0, dt as i64, ev, true);
        }
        // fold in events newer than the previous query
        for ev in self.buffer.iter() {
            if ev.t < old_t_end {
                continue;
            }
            if ev.t >= t_end {
                break;
            }
            accumulate_event(&mut cache.values, head, h, w, bins as i64, t0, dt as i64, ev, false);
        }
        cache.t_end = t_end;
    }

    fn materialize(&self, clip: f32) -> VoxelGrid {
        let cache = self.cache.as_ref().expect("materialize requires a cache");
        let plane = self.plane_len();
        let b = cache.bins as usize;
        let mut ordered = Vec::with_capacity(b * plane);
        for k in 0..b {
            let start = ((cache.head + k) % b) * plane;
            ordered.extend_from_slice(&cache.values[start..start + plane]);
        }
        VoxelGrid {
            bins: cache.bins,
            height: self.height,
            width: self.width,
            normalized: true,
            values: normalize(&ordered, clip),
        }
    }

    /// Normalized voxel grid over `[t_end - dt, t_end)`.
    ///
    /// Query times must be nondecreasing; `bins`, `dt`, and `clip` may vary
    /// between queries at the cost of a full window recomputation.
    pub fn query_grid(
        &mut self,
        t_end: u64,
        bins: u32,
        dt: u64,
        clip: f32,
    ) -> Result<VoxelGrid, EncoderError> {
        if bins < 1 {
            return Err(EncoderError::BadConfig(format!("bins must be >= 1, got {bins}")));
        }
        if dt == 0 || dt > t_end {
            return Err(EncoderError::BadConfig(format!(
                "window duration {dt} must be positive and not reach before time zero"
            )));
        }
        if clip <= 0.0 {
            return Err(EncoderError::BadConfig(format!("clip must be positive, got {clip}")));
        }
        if let Some(prev) = self.last_query_t_end {
            if t_end < prev {
                return Err(EncoderError::NonMonotoneQuery { previous: prev, requested: t_end });
            }
        }
        let t0 = t_end - dt;
        if t0 < self.horizon {
            return Err(EncoderError::WindowBeforeRetainedData {
                window_start: t0,
                horizon: self.horizon,
            });
        }

        let reusable = match &self.cache {
            Some(c) if c.bins == bins && c.dt == dt && bins >= 2 => {
                let delta = t_end - c.t_end;
                let num = delta as u128 * (bins as u128 - 1);
                if num % dt as u128 == 0 && (num / dt as u128) < bins as u128 - 1 {
                    Some((num / dt as u128) as u64)
                } else {
                    None
                }
            }
            _ => None,
        };
        match reusable {
            Some(0) => {}
            Some(m) => self.advance_aligned(m, t_end, bins, dt),
            None => self.full_rebuild(t0, t_end, bins, dt),
        }
        self.drop_before(t0);
        self.last_query_t_end = Some(t_end);
        Ok(self.materialize(clip))
    }
}
