//! Masked traffic-patch autoencoder and its pre-training loop.

use std::path::Path;

use log::info;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Magic};
use crate::autograd::{normal, uniform, Adam, AdamConfig, ParamId, ParamStore, Tape, Var};
use crate::data::corpus::CityCorpus;
use crate::data::{sample_mask, split_source, PatchCorpus, PatchWindow, Scaler, Split, HOURS_PER_WEEK};
use crate::error::{Result, TpbError};
use crate::metrics::Metrics;
use crate::nn::{dropout_mask, BlockShape, LayerNorm, Linear, TransformerLayer};

pub const CHECKPOINT_MAGIC: &Magic = b"TPBCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub width: usize,
    pub patch_len: usize,
    pub patch_count: usize,
    pub channels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub pe_dropout: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            patch_len: 12,
            patch_count: 24,
            channels: 1,
            encoder_layers: 4,
            decoder_layers: 1,
            heads: 4,
            ffn: 512,
            pe_dropout: 0.1,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.width,
            self.patch_len,
            self.patch_count,
            self.channels,
            self.encoder_layers,
            self.heads,
            self.ffn,
        ];
        if positive.contains(&0) {
            return Err(TpbError::Config("autoencoder sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(TpbError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.pe_dropout) {
            return Err(TpbError::Config(format!(
                "pe_dropout {} outside [0, 1)",
                self.pe_dropout
            )));
        }
        Ok(())
    }

    pub fn token_len(&self) -> usize {
        self.patch_len * self.channels
    }

    fn block(&self) -> BlockShape {
        BlockShape::new(self.width, self.heads, self.ffn)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub input: Linear,
    pub positional: ParamId,
    pub layers: Vec<TransformerLayer>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub mask_token: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct PatchAutoencoder {
    pub cfg: AutoencoderConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Rows `[n, T0·C]` of the selected patches of each window.
fn gather_patches<'a>(windows: impl Iterator<Item = (&'a PatchWindow, Vec<usize>)>, cols: usize) -> Array2<f64> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (w, idx) in windows {
        let flat = w.flat();
        for j in idx {
            data.extend(flat.row(j).iter());
            rows += 1;
        }
    }
    Array2::from_shape_vec((rows, cols), data).expect("patch rows")
}

impl PatchAutoencoder {
    pub fn new<R: Rng + ?Sized>(cfg: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.width;
        let input = Linear::new(&mut store, "encoder.input", cfg.token_len(), d, rng);
        let positional = store.add("encoder.positional", uniform(HOURS_PER_WEEK, d, 0.02, rng));
        let layers = (0..cfg.encoder_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("encoder.layer{i}"), cfg.block(), rng))
            .collect();
        let mask_token = store.add("decoder.mask_token", normal(1, d, 0.02, rng));
        let dec_layers = (0..cfg.decoder_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("decoder.layer{i}"), cfg.block(), rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "decoder.norm", d);
        let output = Linear::new(&mut store, "decoder.output", d, cfg.token_len(), rng);
        Ok(Self {
            cfg,
            store,
            encoder: EncoderParams {
                input,
                positional,
                layers,
            },
            decoder: DecoderParams {
                mask_token,
                layers: dec_layers,
                norm,
                output,
            },
        })
    }

    pub fn positional_table(&self) -> &Array2<f64> {
        self.store.get(self.encoder.positional)
    }

    fn check_windows(&self, windows: &[&PatchWindow]) -> Result<usize> {
        let first = windows
            .first()
            .ok_or_else(|| TpbError::InvalidArgument("no windows to encode".into()))?;
        let visible = first.visible().len();
        for w in windows {
            if w.patch_count() != self.cfg.patch_count || w.patch_len() != self.cfg.token_len() {
                return Err(TpbError::Shape(format!(
                    "window of {} patches × {} values, model expects {} × {}",
                    w.patch_count(),
                    w.patch_len(),
                    self.cfg.patch_count,
                    self.cfg.token_len()
                )));
            }
            if w.visible().len() != visible {
                return Err(TpbError::Shape(
                    "windows in one batch must share a visible count".into(),
                ));
            }
        }
        if visible == 0 {
            return Err(TpbError::InvalidArgument("every patch is masked".into()));
        }
        Ok(visible)
    }

    /// Encoder pass over the visible patches of equally-masked windows.
    /// Returns `[B·V, d]`. Positional dropout is applied when `dropout` is given.
    pub fn encode_var(
        &self,
        tape: &mut Tape,
        windows: &[&PatchWindow],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let visible = self.check_windows(windows)?;
        let x = gather_patches(windows.iter().map(|w| (*w, w.visible())), self.cfg.token_len());
        let hours: Vec<usize> = windows
            .iter()
            .flat_map(|w| w.visible().into_iter().map(|j| w.hours[j]))
            .collect();
        let x = tape.constant(x);
        let x = self.encoder.input.forward(tape, x);
        let pe = tape.param(self.encoder.positional);
        let mut pe = tape.gather_rows(pe, hours);
        if let Some(rng) = dropout {
            if self.cfg.pe_dropout > 0.0 {
                let (rows, cols) = tape.shape(pe);
                let m = dropout_mask(rows, cols, self.cfg.pe_dropout, rng);
                pe = tape.mul_const(pe, m);
            }
        }
        let mut h = tape.add(x, pe);
        for layer in &self.encoder.layers {
            h = layer.forward(tape, h, visible);
        }
        Ok(h)
    }

    /// Decoder pass: mask tokens fill the masked slots, positions are
    /// restored, positional rows re-added. Returns `[B·P, T0·C]`.
    pub fn decode_var(&self, tape: &mut Tape, h: Var, windows: &[&PatchWindow]) -> Result<Var> {
        let visible = self.check_windows(windows)?;
        let p = self.cfg.patch_count;
        let b = windows.len();
        if tape.shape(h) != (b * visible, self.cfg.width) {
            return Err(TpbError::Shape(format!(
                "decoder got {:?} embeddings for {b} windows of {visible} visible patches",
                tape.shape(h)
            )));
        }
        let masked = p - visible;
        let mut order = Vec::with_capacity(b * p);
        for (bi, w) in windows.iter().enumerate() {
            let (mut vi, mut mi) = (0, 0);
            for &is_masked in &w.mask {
                if is_masked {
                    order.push(b * visible + bi * masked + mi);
                    mi += 1;
                } else {
                    order.push(bi * visible + vi);
                    vi += 1;
                }
            }
        }
        let tokens = if masked > 0 {
            let mt = tape.param(self.decoder.mask_token);
            let fill = tape.gather_rows(mt, vec![0; b * masked]);
            tape.concat_rows(h, fill)
        } else {
            h
        };
        let tokens = tape.gather_rows(tokens, order);
        let pe = tape.param(self.encoder.positional);
        let hours: Vec<usize> = windows.iter().flat_map(|w| w.hours.iter().copied()).collect();
        let pe = tape.gather_rows(pe, hours);
        let mut x = tape.add(tokens, pe);
        for layer in &self.decoder.layers {
            x = layer.forward(tape, x, p);
        }
        let x = self.decoder.norm.forward(tape, x);
        Ok(self.decoder.output.forward(tape, x))
    }

    /// Masked-entry MSE of a batch on the tape.
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        windows: &[&PatchWindow],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.encode_var(tape, windows, dropout)?;
        let out = self.decode_var(tape, h, windows)?;
        let target = gather_patches(
            windows.iter().map(|w| (*w, (0..w.patch_count()).collect())),
            self.cfg.token_len(),
        );
        let weight = Array2::from_shape_fn(target.dim(), |(r, _)| {
            let w = windows[r / self.cfg.patch_count];
            if w.mask[r % self.cfg.patch_count] {
                1.0
            } else {
                0.0
            }
        });
        if weight.sum() == 0.0 {
            return Err(TpbError::InvalidArgument("no masked patch to reconstruct".into()));
        }
        Ok(tape.mse(out, target, Some(weight)))
    }

    /// Evaluation-mode embeddings of the visible patches, one `[V, d]` matrix
    /// per window.
    pub fn encode(&self, windows: &[PatchWindow]) -> Result<Vec<Array2<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        for group in equal_visible_chunks(windows, 64) {
            let mut tape = Tape::new(&self.store);
            let h = self.encode_var(&mut tape, &group, None)?;
            let h = tape.value(h);
            let v = h.nrows() / group.len();
            for i in 0..group.len() {
                out.push(h.slice(ndarray::s![i * v..(i + 1) * v, ..]).to_owned());
            }
        }
        Ok(out)
    }

    /// Decode given embeddings back to `[P, T0, C]` patches.
    pub fn decode(&self, embeddings: &[Array2<f64>], windows: &[PatchWindow]) -> Result<Vec<Array3<f64>>> {
        if embeddings.len() != windows.len() {
            return Err(TpbError::Shape("one embedding matrix per window".into()));
        }
        let mut out = Vec::with_capacity(windows.len());
        for (h, w) in embeddings.iter().zip(windows) {
            if h.nrows() != w.visible().len() {
                return Err(TpbError::Shape(format!(
                    "{} embeddings for {} visible patches",
                    h.nrows(),
                    w.visible().len()
                )));
            }
            let mut tape = Tape::new(&self.store);
            let hv = tape.constant(h.clone());
            let y = self.decode_var(&mut tape, hv, &[w])?;
            out.push(self.unflatten(tape.value(y)));
        }
        Ok(out)
    }

    /// Encode then decode in evaluation mode.
    pub fn reconstruct(&self, windows: &[PatchWindow]) -> Result<Vec<Array3<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        for group in equal_visible_chunks(windows, 64) {
            let mut tape = Tape::new(&self.store);
            let h = self.encode_var(&mut tape, &group, None)?;
            let y = self.decode_var(&mut tape, h, &group)?;
            let y = tape.value(y);
            let p = self.cfg.patch_count;
            for i in 0..group.len() {
                out.push(self.unflatten(&y.slice(ndarray::s![i * p..(i + 1) * p, ..]).to_owned()));
            }
        }
        Ok(out)
    }

    fn unflatten(&self, flat: &Array2<f64>) -> Array3<f64> {
        flat.as_standard_layout()
            .into_owned()
            .into_shape_with_order((flat.nrows(), self.cfg.patch_len, self.cfg.channels))
            .expect("token layout")
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut a = Archive::new();
        a.set_meta("config", self.cfg);
        a.set_meta("d", self.cfg.width);
        a.set_meta("L_E", self.cfg.encoder_layers);
        a.set_meta("L_D", self.cfg.decoder_layers);
        a.set_meta("T0", self.cfg.patch_len);
        a.set_meta("P", self.cfg.patch_count);
        a.set_meta("C", self.cfg.channels);
        a.set_meta("seed", meta.seed);
        a.set_meta("epoch", meta.epoch);
        a.set_meta("val_mse", meta.val_mse);
        for (_, name, value) in self.store.iter() {
            a.push_matrix(name, value);
        }
        a.write(path, CHECKPOINT_MAGIC)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let a = Archive::read(path, CHECKPOINT_MAGIC)?;
        let cfg: AutoencoderConfig = a.meta("config")?;
        let mut model = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        model
            .store
            .load_named(|name| a.get(name).and_then(|d| d.to_f64_2d().ok()))?;
        let meta = CheckpointMeta {
            seed: a.meta("seed")?,
            epoch: a.meta("epoch")?,
            val_mse: a.meta("val_mse")?,
        };
        Ok((model, meta))
    }
}

/// Consecutive runs of windows with the same visible count, at most `max` long.
fn equal_visible_chunks(windows: &[PatchWindow], max: usize) -> Vec<Vec<&PatchWindow>> {
    let mut out: Vec<Vec<&PatchWindow>> = Vec::new();
    for w in windows {
        match out.last_mut() {
            Some(g) if g.len() < max && g[0].visible().len() == w.visible().len() => g.push(w),
            _ => out.push(vec![w]),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub val_mse: f64,
}

/// Mean squared error over the entries of masked patches.
pub fn pretrain_loss(s: &Array3<f64>, s_hat: &Array3<f64>, mask: &[bool]) -> Result<f64> {
    if s.dim() != s_hat.dim() || s.dim().0 != mask.len() {
        return Err(TpbError::Shape(format!(
            "patches {:?}, reconstruction {:?}, mask {}",
            s.dim(),
            s_hat.dim(),
            mask.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (a, b) in s
            .index_axis(ndarray::Axis(0), j)
            .iter()
            .zip(s_hat.index_axis(ndarray::Axis(0), j))
        {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(TpbError::InvalidArgument("mask selects no patch".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: AutoencoderConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub seed: u64,
    pub split: [f64; 3],
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: AutoencoderConfig::default(),
            batch_size: 4,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            mask_ratio: 0.75,
            epochs: 30,
            seed: 0,
            split: [0.7, 0.2, 0.1],
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.lr.is_nan() || self.lr < 0.0 || !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(TpbError::Config(
                "batch_size must be positive, lr non-negative and mask_ratio in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TpbError::Config("moment coefficients must lie in [0, 1)".into()));
        }
        let masked = (self.mask_ratio * self.model.patch_count as f64).round() as usize;
        if masked == 0 || masked == self.model.patch_count {
            return Err(TpbError::Config(format!(
                "mask_ratio {} leaves nothing to {} among {} patches",
                self.mask_ratio,
                if masked == 0 { "reconstruct" } else { "encode" },
                self.model.patch_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: PatchAutoencoder,
    pub history: Vec<EpochRecord>,
    pub best: CheckpointMeta,
    pub corpus: PatchCorpus,
    pub split: Split,
}

impl PretrainOutcome {
    /// Windows of the held-out test split with masks drawn from `seed`.
    pub fn test_windows(&self, mask_ratio: f64, seed: u64) -> Result<Vec<(PatchWindow, usize)>> {
        masked_windows(&self.corpus, &self.split.test, mask_ratio, seed)
    }
}

/// Every `(window, node)` of the selected tiled windows with a fixed mask,
/// tagged with its city index.
fn masked_windows(
    corpus: &PatchCorpus,
    selected: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<Vec<(PatchWindow, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .node_windows(selected)
        .into_iter()
        .map(|(w, node)| {
            let mut pw = corpus.window(w, node);
            pw.mask = sample_mask(corpus.p, ratio, &mut rng)?;
            Ok((pw, w.city))
        })
        .collect()
}

fn masked_mse(model: &PatchAutoencoder, windows: &[PatchWindow]) -> Result<f64> {
    let recon = model.reconstruct(windows)?;
    let (mut sum, mut count) = (0.0, 0.0);
    for (w, r) in windows.iter().zip(&recon) {
        let m = w.masked().len() as f64 * model.cfg.token_len() as f64;
        sum += pretrain_loss(&w.patches, r, &w.mask)? * m;
        count += m;
    }
    Ok(sum / count)
}

/// Masked-reconstruction training on the train split of the source corpus,
/// keeping the parameters of the epoch with the lowest validation MSE.
pub fn pretrain(corpus: &CityCorpus, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let m = &cfg.model;
    let patches = PatchCorpus::new(corpus, m.patch_len, m.patch_count)?;
    for s in &patches.series {
        if s.channels() != m.channels {
            return Err(TpbError::Shape(format!(
                "city {} has {} channels, model expects {}",
                s.city,
                s.channels(),
                m.channels
            )));
        }
    }
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(k);
        r
    };
    let mut init_rng = stream(0);
    let mut split_rng = stream(1);
    let mut train_rng = stream(2);

    let split = split_source(
        patches.windows.len(),
        (cfg.split[0], cfg.split[1], cfg.split[2]),
        &mut split_rng,
    )?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(TpbError::InsufficientData(format!(
            "{} windows leave an empty train or validation split",
            patches.windows.len()
        )));
    }
    let val: Vec<PatchWindow> = masked_windows(&patches, &split.val, cfg.mask_ratio, cfg.seed ^ 0x5eed)?
        .into_iter()
        .map(|(w, _)| w)
        .collect();
    let mut samples = patches.node_windows(&split.train);

    let mut model = PatchAutoencoder::new(*m, &mut init_rng)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
        &model.store,
    );

    let v0 = masked_mse(&model, &val)?;
    info!("pretrain epoch 0: val masked MSE {v0:.5}");
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_mse: v0,
    }];
    let mut best = (
        model.store.clone(),
        CheckpointMeta {
            seed: cfg.seed,
            epoch: 0,
            val_mse: v0,
        },
    );

    for epoch in 1..=cfg.epochs {
        samples.shuffle(&mut train_rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (step, chunk) in samples.chunks(cfg.batch_size).enumerate() {
            let windows = chunk
                .iter()
                .map(|&(w, node)| {
                    let mut pw = patches.window(w, node);
                    pw.mask = sample_mask(m.patch_count, cfg.mask_ratio, &mut train_rng)?;
                    Ok(pw)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PatchWindow> = windows.iter().collect();
            let grads = {
                let mut tape = Tape::new(&model.store);
                let loss = model.loss_var(&mut tape, &refs, Some(&mut train_rng as &mut dyn RngCore))?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(TpbError::NonFinite(format!(
                        "pre-training loss {value} at epoch {epoch}, step {step}"
                    )));
                }
                total += value;
                batches += 1;
                tape.backward(loss)
            };
            if !grads.all_finite() {
                return Err(TpbError::NonFinite(format!(
                    "pre-training gradient at epoch {epoch}, step {step}"
                )));
            }
            opt.step(&mut model.store, &grads);
        }
        let v = masked_mse(&model, &val)?;
        let train_loss = total / batches as f64;
        info!("pretrain epoch {epoch}: train {train_loss:.5}, val masked MSE {v:.5}");
        history.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            val_mse: v,
        });
        if v < best.1.val_mse {
            best = (
                model.store.clone(),
                CheckpointMeta {
                    seed: cfg.seed,
                    epoch,
                    val_mse: v,
                },
            );
        }
    }
    model.store = best.0;
    Ok(PretrainOutcome {
        model,
        history,
        best: best.1,
        corpus: patches,
        split,
    })
}

/// Reconstruction error over masked entries in original units. Each window is
/// paired with the scaler of its city.
pub fn reconstruction_report(model: &PatchAutoencoder, windows: &[(PatchWindow, &Scaler)]) -> Result<Metrics> {
    let plain: Vec<PatchWindow> = windows.iter().map(|(w, _)| w.clone()).collect();
    let recon = model.reconstruct(&plain)?;
    let (mut y, mut yhat) = (Vec::new(), Vec::new());
    for ((w, scaler), r) in windows.iter().zip(&recon) {
        for j in w.masked() {
            let mut a: Vec<f64> = w.patches.index_axis(ndarray::Axis(0), j).iter().copied().collect();
            let mut b: Vec<f64> = r.index_axis(ndarray::Axis(0), j).iter().copied().collect();
            scaler.invert_in_place(&mut a);
            scaler.invert_in_place(&mut b);
            y.extend(a);
            yhat.extend(b);
        }
    }
    Metrics::compute(&y, &yhat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_gradients, max_rel_error};
    use crate::data::synth::{generate_dataset, SynthSpec};

    fn tiny_cfg() -> AutoencoderConfig {
        AutoencoderConfig {
            width: 8,
            patch_len: 3,
            patch_count: 4,
            channels: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn: 16,
            pe_dropout: 0.1,
        }
    }

    fn random_window(cfg: &AutoencoderConfig, mask: Vec<bool>, rng: &mut ChaCha8Rng) -> PatchWindow {
        let p = cfg.patch_count;
        PatchWindow {
            patches: Array3::from_shape_fn((p, cfg.patch_len, cfg.channels), |_| rng.random_range(-1.0..1.0)),
            mask,
            hours: (0..p).map(|j| (165 + j) % 168).collect(),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = PatchAutoencoder::new(cfg, &mut rng).unwrap();
        let windows = [
            random_window(&cfg, vec![true, false, true, false], &mut rng),
            random_window(&cfg, vec![false, false, true, true], &mut rng),
        ];
        let refs: Vec<&PatchWindow> = windows.iter().collect();
        let loss_of = |s: &ParamStore| {
            let mut m = model.clone();
            m.store = s.clone();
            let mut tape = Tape::new(&m.store);
            let l = m.loss_var(&mut tape, &refs, None).unwrap();
            tape.scalar(l)
        };
        let mut tape = Tape::new(&model.store);
        let l = model.loss_var(&mut tape, &refs, None).unwrap();
        let grads = tape.backward(l);
        let checks = check_gradients(&model.store, &grads, 1e-4, loss_of);
        assert_eq!(checks.len(), model.store.len());
        assert!(max_rel_error(&checks) <= 1e-4, "{checks:#?}");
    }

    #[test]
    fn default_shapes() {
        let cfg = AutoencoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = PatchAutoencoder::new(cfg, &mut rng).unwrap();
        let mask = sample_mask(24, 0.75, &mut rng).unwrap();
        let w = random_window(&cfg, mask, &mut rng);
        let h = model.encode(std::slice::from_ref(&w)).unwrap();
        assert_eq!(h[0].dim(), (6, 128));
        let r = model.decode(&h, std::slice::from_ref(&w)).unwrap();
        assert_eq!(r[0].dim(), (24, 12, 1));
        let again = model.encode(std::slice::from_ref(&w)).unwrap();
        assert_eq!(h, again);
    }

    #[test]
    fn identity_limit_of_the_encoder() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = PatchAutoencoder::new(cfg, &mut rng).unwrap();
        for layer in model.encoder.layers.clone() {
            layer.zero_residual_branches(&mut model.store);
        }
        let w = random_window(&cfg, vec![false, true, false, true], &mut rng);
        let h = &model.encode(std::slice::from_ref(&w)).unwrap()[0];
        let weight = model.store.get(model.encoder.input.weight);
        let bias = model.store.get(model.encoder.input.bias);
        let pe = model.positional_table();
        for (row, j) in w.visible().into_iter().enumerate() {
            let x = w.flat().row(j).to_owned();
            let want = x.dot(weight) + bias.row(0) + pe.row(w.hours[j]);
            for (a, b) in h.row(row).iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_weights_give_the_bias() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = PatchAutoencoder::new(cfg, &mut rng).unwrap();
        model.store.get_mut(model.decoder.output.weight).fill(0.0);
        let bias = normal(1, 3, 1.0, &mut rng);
        model.store.get_mut(model.decoder.output.bias).assign(&bias);
        let w = random_window(&cfg, vec![true, false, false, true], &mut rng);
        let r = &model.reconstruct(std::slice::from_ref(&w)).unwrap()[0];
        for j in 0..4 {
            for t in 0..3 {
                assert_eq!(r[[j, t, 0]], bias[[0, t]]);
            }
        }
    }

    #[test]
    fn masked_values_never_reach_the_encoder() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = PatchAutoencoder::new(cfg, &mut rng).unwrap();
        let w = random_window(&cfg, vec![true, false, true, false], &mut rng);
        let mut v = w.clone();
        v.patches.index_axis_mut(ndarray::Axis(0), 0).fill(1e6);
        v.patches.index_axis_mut(ndarray::Axis(0), 2).fill(-3.0);
        assert_eq!(model.encode(&[w]).unwrap(), model.encode(&[v]).unwrap());
    }

    #[test]
    fn a_week_shift_leaves_embeddings_unchanged() {
        let mut spec = SynthSpec::default();
        for c in &mut spec.cities {
            c.nodes = 2;
            c.days = 3;
        }
        let data = generate_dataset(&spec).unwrap().dataset;
        let series = &data.source.cities[0].series;
        let cfg = AutoencoderConfig {
            patch_len: 12,
            patch_count: 6,
            ..tiny_cfg()
        };
        let model = PatchAutoencoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let a = crate::data::patchify(series, 1, 24, 12, 6).unwrap();
        let mut b = a.clone();
        b.hours = (0..6).map(|j| series.hour_of_week(24 + j * 12 + 7 * 288)).collect();
        assert_eq!(a.hours, b.hours);
        assert_eq!(model.encode(&[a]).unwrap(), model.encode(&[b]).unwrap());
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Array3::from_shape_fn((4, 3, 1), |_| rng.random_range(-1.0..1.0));
        let mask = vec![false, true, false, false];
        assert_eq!(pretrain_loss(&s, &s, &mask).unwrap(), 0.0);
        let mut off = s.clone();
        off.index_axis_mut(ndarray::Axis(0), 1).mapv_inplace(|v| v + 0.5);
        assert!((pretrain_loss(&s, &off, &mask).unwrap() - 0.25).abs() < 1e-15);
        let mut unmasked = s.clone();
        unmasked.index_axis_mut(ndarray::Axis(0), 0).fill(9.0);
        assert_eq!(pretrain_loss(&s, &unmasked, &mask).unwrap(), 0.0);
        assert!(pretrain_loss(&s, &s, &[false; 4]).is_err());
    }

    #[test]
    fn encode_rejects_fully_masked_windows() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = PatchAutoencoder::new(cfg, &mut rng).unwrap();
        let w = random_window(&cfg, vec![true; 4], &mut rng);
        assert!(model.encode(&[w]).is_err());
    }

    fn small_corpus() -> CityCorpus {
        let mut spec = SynthSpec::default();
        for c in &mut spec.cities {
            c.nodes = 2;
            c.days = 4;
        }
        generate_dataset(&spec).unwrap().dataset.source
    }

    fn small_pretrain(lr: f64) -> PretrainConfig {
        PretrainConfig {
            model: AutoencoderConfig {
                patch_len: 12,
                patch_count: 8,
                ..tiny_cfg()
            },
            lr,
            epochs: 2,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_the_initialization() {
        let corpus = small_corpus();
        let cfg = small_pretrain(0.0);
        let out = pretrain(&corpus, &cfg).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(0);
        let fresh = PatchAutoencoder::new(cfg.model, &mut init_rng).unwrap();
        assert!(out.model.store.bitwise_eq(&fresh.store));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let corpus = small_corpus();
        let cfg = small_pretrain(1e-3);
        let a = pretrain(&corpus, &cfg).unwrap();
        let b = pretrain(&corpus, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.model.store.bitwise_eq(&b.model.store));
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_cfg();
        let model = PatchAutoencoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let meta = CheckpointMeta {
            seed: 9,
            epoch: 3,
            val_mse: 0.5,
        };
        model.save(&path, &meta).unwrap();
        let (back, m2) = PatchAutoencoder::load(&path).unwrap();
        assert_eq!(m2, meta);
        assert!(back.store.bitwise_eq(&model.store));
    }

    #[test]
    fn report_of_exact_and_constant_reconstructions() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = PatchAutoencoder::new(cfg, &mut rng).unwrap();
        model.store.get_mut(model.decoder.output.weight).fill(0.0);
        model.store.get_mut(model.decoder.output.bias).fill(2.5);
        let scaler = Scaler::identity(1);

        let mut exact = random_window(&cfg, vec![true, false, false, true], &mut rng);
        exact.patches.index_axis_mut(ndarray::Axis(0), 0).fill(2.5);
        exact.patches.index_axis_mut(ndarray::Axis(0), 3).fill(2.5);
        let m = reconstruction_report(&model, &[(exact, &scaler)]).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape), (0.0, 0.0, 0.0));

        // Masked entries with mean 2.5 predicted by the constant 2.5.
        let mut w = random_window(&cfg, vec![false, true, true, false], &mut rng);
        let vals = [1.0, 2.0, 3.0, 4.0, 2.0, 3.0];
        for (i, v) in vals.iter().enumerate() {
            w.patches[[1 + i / 3, i % 3, 0]] = *v;
        }
        let std = (vals.iter().map(|v| (v - 2.5) * (v - 2.5)).sum::<f64>() / 6.0).sqrt();
        let m = reconstruction_report(&model, &[(w, &scaler)]).unwrap();
        assert!((m.rmse - std).abs() < 1e-12);
    }
}
