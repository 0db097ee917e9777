//! Traffic series, patch windows, masking and the source split protocol.

pub mod corpus;
pub mod synth;

use ndarray::{s, Array2, Array3};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TpbError};

pub const HOURS_PER_WEEK: usize = 168;
pub const MINUTES_PER_WEEK: u32 = 7 * 24 * 60;

/// One city's raw tensor `[N, T, C]` with its sampling clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    pub city: String,
    pub interval_minutes: u32,
    /// Minutes since Monday 00:00, modulo one week.
    pub start_timestamp: u32,
    pub values: Array3<f32>,
}

impl TrafficSeries {
    pub fn new(
        city: impl Into<String>,
        interval_minutes: u32,
        start_timestamp: u32,
        values: Array3<f32>,
    ) -> Result<Self> {
        if interval_minutes == 0 || 60 % interval_minutes != 0 {
            return Err(TpbError::InvalidArgument(format!(
                "interval of {interval_minutes} minutes does not divide an hour"
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(TpbError::NonFinite(format!("series value #{bad} is not finite")));
        }
        Ok(Self {
            city: city.into(),
            interval_minutes,
            start_timestamp: start_timestamp % MINUTES_PER_WEEK,
            values,
        })
    }

    pub fn node_count(&self) -> usize {
        self.values.dim().0
    }

    pub fn step_count(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    /// Hour-of-week index of a step, Monday 00:00 being 0.
    pub fn hour_of_week(&self, step: usize) -> usize {
        let minutes = self.start_timestamp as u64 + step as u64 * self.interval_minutes as u64;
        ((minutes / 60) % HOURS_PER_WEEK as u64) as usize
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.interval_minutes) as usize
    }

    /// Sub-series covering steps `[from, to)`, with the clock advanced.
    pub fn slice_steps(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.step_count() {
            return Err(TpbError::InvalidArgument(format!(
                "step range {from}..{to} outside a series of {} steps",
                self.step_count()
            )));
        }
        let offset = from as u64 * self.interval_minutes as u64;
        Ok(Self {
            city: self.city.clone(),
            interval_minutes: self.interval_minutes,
            start_timestamp: ((self.start_timestamp as u64 + offset) % MINUTES_PER_WEEK as u64) as u32,
            values: self.values.slice(s![.., from..to, ..]).to_owned(),
        })
    }

    /// Non-overlapping window starts of `len` steps.
    pub fn tiled_starts(&self, len: usize) -> Vec<usize> {
        strided_starts(self.step_count(), len, len)
    }
}

/// Starts `0, stride, 2·stride, …` of windows of `len` steps that fit in `total`.
pub fn strided_starts(total: usize, len: usize, stride: usize) -> Vec<usize> {
    if len > total || stride == 0 {
        return Vec::new();
    }
    (0..=total - len).step_by(stride).collect()
}

/// `P` consecutive patches of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWindow {
    /// `[P, T0, C]`
    pub patches: Array3<f64>,
    pub mask: Vec<bool>,
    pub hours: Vec<usize>,
}

impl PatchWindow {
    pub fn patch_count(&self) -> usize {
        self.patches.dim().0
    }

    pub fn patch_len(&self) -> usize {
        self.patches.dim().1 * self.patches.dim().2
    }

    /// Patches as rows `[P, T0·C]`, time-major within a row.
    pub fn flat(&self) -> Array2<f64> {
        let (p, t0, c) = self.patches.dim();
        self.patches
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((p, t0 * c))
            .expect("contiguous patches")
    }

    /// Raw `[P·T0, C]` slice the patches were cut from.
    pub fn concat(&self) -> Array2<f64> {
        let (p, t0, c) = self.patches.dim();
        self.patches
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((p * t0, c))
            .expect("contiguous patches")
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&j| !self.mask[j]).collect()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&j| self.mask[j]).collect()
    }
}

fn check_window(series: &TrafficSeries, start: usize, t0: usize, p: usize) -> Result<()> {
    if t0 == 0 || p == 0 {
        return Err(TpbError::InvalidArgument(
            "patch length and count must be positive".into(),
        ));
    }
    if start + t0 * p > series.step_count() {
        return Err(TpbError::InvalidArgument(format!(
            "window {start}+{}·{} exceeds series of {} steps",
            p,
            t0,
            series.step_count()
        )));
    }
    Ok(())
}

/// Cut node `node`'s window starting at `start` into `p` patches of `t0` steps.
pub fn patchify(series: &TrafficSeries, node: usize, start: usize, t0: usize, p: usize) -> Result<PatchWindow> {
    check_window(series, start, t0, p)?;
    if node >= series.node_count() {
        return Err(TpbError::InvalidArgument(format!(
            "node {node} out of range for {} nodes",
            series.node_count()
        )));
    }
    let c = series.channels();
    let raw = series.values.slice(s![node, start..start + t0 * p, ..]);
    let patches = Array3::from_shape_fn((p, t0, c), |(j, t, ch)| f64::from(raw[[j * t0 + t, ch]]));
    Ok(PatchWindow {
        patches,
        mask: vec![false; p],
        hours: (0..p).map(|j| series.hour_of_week(start + j * t0)).collect(),
    })
}

/// Batch form of [`patchify`]: one window per node.
pub fn patchify_nodes(series: &TrafficSeries, start: usize, t0: usize, p: usize) -> Result<Vec<PatchWindow>> {
    (0..series.node_count())
        .map(|n| patchify(series, n, start, t0, p))
        .collect()
}

/// Exactly `round(ratio·p)` positions set, chosen uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(p: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(TpbError::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let count = (ratio * p as f64).round() as usize;
    let mut mask = vec![false; p];
    for i in index::sample(rng, p, count.min(p)) {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random partition of `n` windows; val and test sizes are floored, train
/// takes the remainder. Each part is returned sorted.
pub fn split_source<R: Rng + ?Sized>(n: usize, fractions: (f64, f64, f64), rng: &mut R) -> Result<Split> {
    let (tr, va, te) = fractions;
    if (tr + va + te - 1.0).abs() > 1e-9 || tr < 0.0 || va < 0.0 || te < 0.0 {
        return Err(TpbError::InvalidArgument(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n_val = (va * n as f64 + 1e-9).floor() as usize;
    let n_test = (te * n as f64 + 1e-9).floor() as usize;
    let order = index::sample(rng, n, n).into_vec();
    let mut val = order[..n_val].to_vec();
    let mut test = order[n_val..n_val + n_test].to_vec();
    let mut train = order[n_val + n_test..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// Resample onto a new interval by linear interpolation along time.
///
/// Output length is `ceil((T−1)·src/target) + 1`; when the last output step
/// falls beyond the final sample, the last segment is extended linearly.
pub fn align_interval(series: &TrafficSeries, target_minutes: u32) -> Result<TrafficSeries> {
    let src = series.interval_minutes;
    if target_minutes == 0 || (!src.is_multiple_of(target_minutes) && !target_minutes.is_multiple_of(src)) {
        return Err(TpbError::InvalidArgument(format!(
            "intervals {src} and {target_minutes} minutes are not commensurate"
        )));
    }
    let (n, t, c) = series.values.dim();
    if t == 0 {
        return Err(TpbError::InvalidArgument("empty series".into()));
    }
    let ratio = f64::from(src) / f64::from(target_minutes);
    let len = if t == 1 {
        1
    } else {
        ((t - 1) as u64 * u64::from(src)).div_ceil(u64::from(target_minutes)) as usize + 1
    };
    let values = Array3::from_shape_fn((n, len, c), |(node, k, ch)| {
        if t == 1 {
            return series.values[[node, 0, ch]];
        }
        let pos = k as f64 / ratio;
        let lo = (pos.floor() as usize).min(t - 2);
        let frac = pos - lo as f64;
        let a = f64::from(series.values[[node, lo, ch]]);
        let b = f64::from(series.values[[node, lo + 1, ch]]);
        (a + frac * (b - a)) as f32
    });
    TrafficSeries::new(series.city.clone(), target_minutes, series.start_timestamp, values)
}

/// Per-channel z-score statistics of one city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(series: &TrafficSeries) -> Self {
        let c = series.channels();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let col = series.values.slice(s![.., .., ch]);
            let m = col.iter().map(|&v| f64::from(v)).sum::<f64>() / col.len().max(1) as f64;
            let var = col.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / col.len().max(1) as f64;
            mean[ch] = m;
            std[ch] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn transform(&self, series: &TrafficSeries) -> TrafficSeries {
        let mut out = series.clone();
        for ((_, _, ch), v) in out.values.indexed_iter_mut() {
            *v = ((f64::from(*v) - self.mean[ch]) / self.std[ch]) as f32;
        }
        out
    }

    /// Map normalized values laid out with channels innermost back to raw units.
    pub fn invert_in_place(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
    }
}

/// A tiled window of one city, covering every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub city: usize,
    pub start: usize,
}

/// Z-scored cities cut into non-overlapping `P·T0` windows.
#[derive(Debug, Clone)]
pub struct PatchCorpus {
    pub series: Vec<TrafficSeries>,
    pub scalers: Vec<Scaler>,
    pub windows: Vec<WindowRef>,
    pub t0: usize,
    pub p: usize,
}

impl PatchCorpus {
    pub fn new(corpus: &corpus::CityCorpus, t0: usize, p: usize) -> Result<Self> {
        let mut series = Vec::new();
        let mut scalers = Vec::new();
        let mut windows = Vec::new();
        for (ci, city) in corpus.cities.iter().enumerate() {
            let scaler = Scaler::fit(&city.series);
            for start in city.series.tiled_starts(t0 * p) {
                windows.push(WindowRef { city: ci, start });
            }
            series.push(scaler.transform(&city.series));
            scalers.push(scaler);
        }
        if windows.is_empty() {
            return Err(TpbError::InsufficientData(format!(
                "no city holds a full window of {} steps",
                t0 * p
            )));
        }
        Ok(Self {
            series,
            scalers,
            windows,
            t0,
            p,
        })
    }

    pub fn window(&self, w: WindowRef, node: usize) -> PatchWindow {
        patchify(&self.series[w.city], node, w.start, self.t0, self.p).expect("tiled windows fit their series")
    }

    /// Every `(window, node)` pair of the selected windows, in order.
    pub fn node_windows(&self, selected: &[usize]) -> Vec<(WindowRef, usize)> {
        selected
            .iter()
            .flat_map(|&i| {
                let w = self.windows[i];
                (0..self.series[w.city].node_count()).map(move |n| (w, n))
            })
            .collect()
    }

    /// Number of patches over all windows and nodes.
    pub fn patch_total(&self) -> usize {
        self.windows
            .iter()
            .map(|w| self.series[w.city].node_count() * self.p)
            .sum()
    }
}
