//! Supervised forecasting samples: a day of patches per node and the next
//! `T'` steps as the label.

use std::ops::Range;

use ndarray::{s, Array2, Axis};

use crate::data::{strided_starts, Scaler, TrafficSeries, MINUTES_PER_WEEK};
use crate::error::{Result, TpbError};

/// One mini-batch of `B` samples over all `N` nodes of a city.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBatch {
    pub samples: usize,
    pub nodes: usize,
    pub patch_count: usize,
    /// `[B·N·P, T0·C]`, rows ordered by sample, node, patch.
    pub history: Array2<f64>,
    /// Hour-of-week of each patch, `[B·P]`.
    pub hours: Vec<usize>,
    /// `[B·N, T'·C]`, time-major within a row.
    pub target: Array2<f64>,
    /// Row-normalized prior graph of the city, when known.
    pub prior: Option<Array2<f64>>,
}

impl ForecastBatch {
    /// Hour index of every history row.
    pub fn token_hours(&self) -> Vec<usize> {
        let p = self.patch_count;
        (0..self.samples * self.nodes * p)
            .map(|r| self.hours[(r / (self.nodes * p)) * p + r % p])
            .collect()
    }

    /// Row indices of the last patch of every (sample, node) sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        let p = self.patch_count;
        (0..self.samples * self.nodes).map(|i| i * p + p - 1).collect()
    }
}

/// Sliding samples (stride `T0`) over one normalized city series.
#[derive(Debug, Clone)]
pub struct ForecastSet {
    pub series: TrafficSeries,
    pub scaler: Scaler,
    pub prior: Option<Array2<f64>>,
    pub t0: usize,
    pub p: usize,
    pub horizon: usize,
    starts: Vec<usize>,
}

impl ForecastSet {
    /// Every sample whose history and label fit inside `raw`, normalized by `scaler`.
    pub fn new(
        raw: &TrafficSeries,
        scaler: Scaler,
        prior: Option<Array2<f64>>,
        t0: usize,
        p: usize,
        horizon: usize,
    ) -> Result<Self> {
        Self::labelled_from(raw, scaler, prior, t0, p, horizon, 0)
    }

    /// Samples whose label starts at or after step `label_from`; history may
    /// reach back before it.
    pub fn labelled_from(
        raw: &TrafficSeries,
        scaler: Scaler,
        prior: Option<Array2<f64>>,
        t0: usize,
        p: usize,
        horizon: usize,
        label_from: usize,
    ) -> Result<Self> {
        if t0 == 0 || p == 0 || horizon == 0 {
            return Err(TpbError::InvalidArgument(
                "patch length, count and horizon must be positive".into(),
            ));
        }
        if scaler.mean.len() != raw.channels() {
            return Err(TpbError::Shape(format!(
                "scaler has {} channels, series {}",
                scaler.mean.len(),
                raw.channels()
            )));
        }
        if let Some(g) = &prior {
            let n = raw.node_count();
            if g.dim() != (n, n) {
                return Err(TpbError::Shape(format!("prior graph {:?} for {n} nodes", g.dim())));
            }
        }
        let hist = t0 * p;
        let starts: Vec<usize> = strided_starts(raw.step_count(), hist + horizon, t0)
            .into_iter()
            .filter(|s| s + hist >= label_from)
            .collect();
        if starts.is_empty() {
            return Err(TpbError::InsufficientData(format!(
                "city {} has no forecasting sample of {} steps after step {label_from}",
                raw.city,
                hist + horizon
            )));
        }
        Ok(Self {
            series: scaler.transform(raw),
            scaler,
            prior,
            t0,
            p,
            horizon,
            starts,
        })
    }

    /// History of `raw_context` followed by `raw_eval`, labelled only inside the
    /// evaluation span. `raw_eval` must continue `raw_context` in time.
    pub fn continuing(
        raw_context: &TrafficSeries,
        raw_eval: &TrafficSeries,
        scaler: Scaler,
        prior: Option<Array2<f64>>,
        t0: usize,
        p: usize,
        horizon: usize,
    ) -> Result<Self> {
        let expected = (raw_context.start_timestamp as u64
            + raw_context.step_count() as u64 * raw_context.interval_minutes as u64)
            % MINUTES_PER_WEEK as u64;
        if raw_context.interval_minutes != raw_eval.interval_minutes
            || raw_context.node_count() != raw_eval.node_count()
            || raw_context.channels() != raw_eval.channels()
            || raw_eval.start_timestamp as u64 != expected
        {
            return Err(TpbError::InvalidArgument(format!(
                "series {} does not continue {}",
                raw_eval.city, raw_context.city
            )));
        }
        let values = ndarray::concatenate(Axis(1), &[raw_context.values.view(), raw_eval.values.view()])
            .expect("matching node and channel counts");
        let joined = TrafficSeries::new(
            raw_eval.city.clone(),
            raw_eval.interval_minutes,
            raw_context.start_timestamp,
            values,
        )?;
        Self::labelled_from(&joined, scaler, prior, t0, p, horizon, raw_context.step_count())
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.series.node_count()
    }

    /// Steps covered by sample `i`, history through label.
    pub fn span(&self, i: usize) -> Range<usize> {
        let s = self.starts[i];
        s..s + self.t0 * self.p + self.horizon
    }

    pub fn batch(&self, idx: &[usize]) -> ForecastBatch {
        let (n, c) = (self.series.node_count(), self.series.channels());
        let (t0, p, h) = (self.t0, self.p, self.horizon);
        let b = idx.len();
        let mut history = Array2::zeros((b * n * p, t0 * c));
        let mut target = Array2::zeros((b * n, h * c));
        let mut hours = Vec::with_capacity(b * p);
        for (bi, &i) in idx.iter().enumerate() {
            let start = self.starts[i];
            hours.extend((0..p).map(|j| self.series.hour_of_week(start + j * t0)));
            for node in 0..n {
                for j in 0..p {
                    let from = start + j * t0;
                    let patch = self.series.values.slice(s![node, from..from + t0, ..]);
                    let mut row = history.row_mut((bi * n + node) * p + j);
                    for (dst, &v) in row.iter_mut().zip(patch.iter()) {
                        *dst = f64::from(v);
                    }
                }
                let from = start + p * t0;
                let label = self.series.values.slice(s![node, from..from + h, ..]);
                let mut row = target.row_mut(bi * n + node);
                for (dst, &v) in row.iter_mut().zip(label.iter()) {
                    *dst = f64::from(v);
                }
            }
        }
        ForecastBatch {
            samples: b,
            nodes: n,
            patch_count: p,
            history,
            hours,
            target,
            prior: self.prior.clone(),
        }
    }

    /// Consecutive batches of at most `size` samples in the given order.
    pub fn batches(&self, order: &[usize], size: usize) -> Vec<ForecastBatch> {
        order.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }
}
