//! Reptile meta-training over source-city tasks and few-shot fine-tuning on
//! the target city.

use log::{debug, info};
use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sgd_step, Adam, AdamConfig, Gradients, ParamStore, Tape};
use crate::data::corpus::{City, CityCorpus, Dataset};
use crate::data::Scaler;
use crate::error::{Result, TpbError};
use crate::forecaster::{ForecastBatch, ForecastModel, ForecastSet, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Tasks per meta-epoch.
    pub meta_batch: usize,
    pub batch_size: usize,
    /// Support-step rate.
    pub alpha: f64,
    /// Query-gradient rate.
    pub beta: f64,
    pub update_step: usize,
    pub meta_epochs: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            meta_batch: 2,
            batch_size: 16,
            alpha: 5e-4,
            beta: 5e-4,
            update_step: 2,
            meta_epochs: 20,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(TpbError::Config("meta-training rates must be positive".into()));
        }
        if self.update_step == 0 || self.meta_batch == 0 || self.batch_size == 0 {
            return Err(TpbError::Config(
                "update_step, meta_batch and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            epochs: 200,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(TpbError::Config(
                "fine-tuning needs a positive batch size and non-negative rates".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TpbError::Config("Adam moments must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::adamw(self.lr, self.weight_decay)
        }
    }
}

/// Supervised samples of every source city, each normalized by its own scaler.
pub fn source_sets(source: &CityCorpus, t0: usize, p: usize, horizon: usize) -> Result<Vec<ForecastSet>> {
    source
        .cities
        .iter()
        .map(|c| ForecastSet::new(&c.series, Scaler::fit(&c.series), c.prior_graph.clone(), t0, p, horizon))
        .collect()
}

/// Few-shot training samples and the test samples of the target city. The
/// test history may reach back into the few-shot span; both use the scaler
/// fitted on the few-shot span.
pub fn target_sets(data: &Dataset, t0: usize, p: usize, horizon: usize) -> Result<(ForecastSet, ForecastSet)> {
    let target: &City = data.target_city();
    let test = data.test_city();
    let scaler = Scaler::fit(&target.series);
    let train = ForecastSet::new(
        &target.series,
        scaler.clone(),
        target.prior_graph.clone(),
        t0,
        p,
        horizon,
    )?;
    let eval = ForecastSet::continuing(
        &target.series,
        &test.series,
        scaler,
        test.prior_graph.clone().or_else(|| target.prior_graph.clone()),
        t0,
        p,
        horizon,
    )?;
    Ok((train, eval))
}

/// Support and query batches cut from disjoint time ranges of one city.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub city: usize,
    pub city_id: String,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub support_batch: ForecastBatch,
    pub query_batch: ForecastBatch,
}

/// Pick a city uniformly, a cut sample uniformly among those leaving
/// `batch_size` samples on each side, then `batch_size` support samples that
/// end before the cut and `batch_size` query samples from the cut onward.
pub fn sample_task<R: Rng + ?Sized>(sets: &[ForecastSet], batch_size: usize, rng: &mut R) -> Result<Task> {
    if sets.is_empty() {
        return Err(TpbError::InsufficientData("no source city to sample tasks from".into()));
    }
    let city = rng.random_range(0..sets.len());
    let set = &sets[city];
    let n = set.len();
    let mut cuts = Vec::new();
    // Samples whose span ends at or before sample `c` starts.
    let mut before = 0;
    for c in 0..n {
        let start = set.span(c).start;
        while before < n && set.span(before).end <= start {
            before += 1;
        }
        if before >= batch_size && n - c >= batch_size {
            cuts.push((c, before));
        }
    }
    if cuts.is_empty() {
        return Err(TpbError::InsufficientData(format!(
            "city {} has {n} samples, too few for disjoint support and query batches of {batch_size}",
            set.series.city
        )));
    }
    let (cut, before) = cuts[rng.random_range(0..cuts.len())];
    let mut support = index::sample(rng, before, batch_size).into_vec();
    support.sort_unstable();
    let mut query: Vec<usize> = index::sample(rng, n - cut, batch_size)
        .into_iter()
        .map(|i| cut + i)
        .collect();
    query.sort_unstable();
    Ok(Task {
        city,
        city_id: set.series.city.clone(),
        support_batch: set.batch(&support),
        query_batch: set.batch(&query),
        support,
        query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    Support,
    Query,
}

/// Inner loop of one task: `update_step` support steps at rate `alpha` on a
/// clone of `theta`, storing the query gradient after each.
pub fn task_query_gradients<T, F>(
    theta: &ParamStore,
    task: &T,
    alpha: f64,
    update_step: usize,
    grad: &mut F,
) -> Result<Vec<Gradients>>
where
    F: FnMut(&ParamStore, &T, Half) -> Result<Gradients>,
{
    let mut local = theta.clone();
    let mut stored = Vec::with_capacity(update_step);
    for _ in 0..update_step {
        let g = grad(&local, task, Half::Support)?;
        sgd_step(&mut local, &g, alpha);
        stored.push(grad(&local, task, Half::Query)?);
    }
    Ok(stored)
}

/// One meta-epoch. Every task starts from the same `theta`; afterwards each
/// task's stored query gradients are summed and applied at rate
/// `beta / update_step`, task by task in order. Returns the stored gradients.
pub fn reptile_epoch<T, F>(
    theta: &mut ParamStore,
    tasks: &[T],
    alpha: f64,
    beta: f64,
    update_step: usize,
    mut grad: F,
) -> Result<Vec<Vec<Gradients>>>
where
    F: FnMut(&ParamStore, &T, Half) -> Result<Gradients>,
{
    let stored = tasks
        .iter()
        .map(|t| task_query_gradients(theta, t, alpha, update_step, &mut grad))
        .collect::<Result<Vec<_>>>()?;
    for task in &stored {
        let mut sum = Gradients::zeros_like(theta);
        for g in task {
            sum.add_scaled(g, 1.0);
        }
        sgd_step(theta, &sum, beta / update_step as f64);
    }
    Ok(stored)
}

fn batch_gradients(
    model: &ForecastModel,
    store: &ParamStore,
    batch: &ForecastBatch,
    stage: Stage,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(store);
    let loss = model.loss_var(&mut tape, batch, stage)?;
    let value = tape.scalar(loss);
    Ok((value, tape.backward(loss)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEpoch {
    pub epoch: usize,
    pub cities: Vec<String>,
    /// Mean query loss over the stored steps of all tasks.
    pub query_loss: f64,
}

/// Reptile over tasks drawn from `sets`; the bank stays outside θ.
pub fn reptile_meta_train(model: &mut ForecastModel, sets: &[ForecastSet], cfg: &MetaConfig) -> Result<Vec<MetaEpoch>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut history = Vec::with_capacity(cfg.meta_epochs);
    let mut store = model.store.clone();
    for epoch in 0..cfg.meta_epochs {
        let tasks = (0..cfg.meta_batch)
            .map(|_| sample_task(sets, cfg.batch_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut losses = Vec::new();
        reptile_epoch(
            &mut store,
            &tasks,
            cfg.alpha,
            cfg.beta,
            cfg.update_step,
            |s, task: &Task, half| {
                let batch = match half {
                    Half::Support => &task.support_batch,
                    Half::Query => &task.query_batch,
                };
                let (loss, g) = batch_gradients(model, s, batch, Stage::Source)?;
                if !loss.is_finite() || !g.all_finite() {
                    return Err(TpbError::NonFinite(format!(
                        "meta-epoch {epoch}, city {}, {half:?} batch {:?}",
                        task.city_id,
                        match half {
                            Half::Support => &task.support,
                            Half::Query => &task.query,
                        }
                    )));
                }
                if half == Half::Query {
                    losses.push(loss);
                }
                Ok(g)
            },
        )?;
        let query_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        debug!("meta-epoch {epoch}: query loss {query_loss:.5}");
        history.push(MetaEpoch {
            epoch,
            cities: tasks.iter().map(|t| t.city_id.clone()).collect(),
            query_loss,
        });
    }
    model.store.copy_from(&store)?;
    if let Some(last) = history.last() {
        info!("meta-training done, final query loss {:.5}", last.query_loss);
    }
    Ok(history)
}

/// AdamW mini-batch training on every batch of the few-shot set per epoch.
/// Returns the mean training loss of each epoch.
pub fn fine_tune(model: &mut ForecastModel, train: &ForecastSet, cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TpbError::InsufficientData("empty few-shot target set".into()));
    }
    model.attach_target(train.nodes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let mut adam = Adam::new(cfg.adam(), &model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.batch(idx);
            let (loss, g) = batch_gradients(model, &model.store, &batch, Stage::Target)?;
            if !loss.is_finite() || !g.all_finite() {
                return Err(TpbError::NonFinite(format!("fine-tuning epoch {epoch}")));
            }
            adam.step(&mut model.store, &g);
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let mean = total / count as f64;
        debug!("fine-tune epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

/// Forecasts of every sample `[S·N, T'·C]` in normalized units, in sample order.
pub fn predict_set(model: &ForecastModel, set: &ForecastSet, batch_size: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let order: Vec<usize> = (0..set.len()).collect();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for batch in set.batches(&order, batch_size) {
        preds.push(model.predict(&batch, Stage::Target)?);
        targets.push(batch.target);
    }
    let stack = |parts: Vec<Array2<f64>>| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
    };
    Ok((stack(preds), stack(targets)))
}
