//! Pattern-query forecaster: bank retrieval, metaknowledge aggregation,
//! adaptive graph reconstruction, a spatio-temporal backend and an MLP head.

pub mod backend;
pub mod samples;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{file_sha256, Archive, Magic};
use crate::autograd::{normal, uniform, zeros, ParamId, ParamStore, Tape, Var};
use crate::bank::PatternBank;
use crate::data::{PatchWindow, HOURS_PER_WEEK};
use crate::error::{Result, TpbError};
use crate::nn::{BlockShape, Linear, TransformerLayer};
pub use backend::{StModel, TcnBackend};
pub use samples::{ForecastBatch, ForecastSet};

pub const MODEL_MAGIC: &Magic = b"TPBMODL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMeta,
    NoAdj,
    #[serde(alias = "no_clu_bank")]
    NoClu,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMeta, Variant::NoAdj, Variant::NoClu];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMeta => "no_meta",
            Variant::NoAdj => "no_adj",
            Variant::NoClu => "no_clu",
        }
    }

    pub fn uses_bank(self) -> bool {
        self != Variant::NoMeta
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TpbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_meta" => Ok(Variant::NoMeta),
            "no_adj" => Ok(Variant::NoAdj),
            "no_clu" | "no_clu_bank" => Ok(Variant::NoClu),
            other => Err(TpbError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyInit {
    /// Independent Gaussian rows of norm close to one.
    Gaussian,
    /// A random linear projection of the bank rows.
    BankProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub variant: Variant,
    /// Bank and metaknowledge width `d`.
    pub width: usize,
    /// Key width `d_q`.
    pub query_width: usize,
    pub patch_len: usize,
    pub patch_count: usize,
    pub channels: usize,
    pub horizon: usize,
    pub heads: usize,
    pub aggregator_ffn: usize,
    pub backend_hidden: usize,
    pub backend_blocks: usize,
    pub head_hidden: usize,
    /// Softmax temperature of the reconstructed graph.
    pub epsilon: f64,
    /// Use the unnormalized dot-product scores as retrieval weights.
    pub raw_weights: bool,
    pub key_init: KeyInit,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            width: 128,
            query_width: 128,
            patch_len: 12,
            patch_count: 24,
            channels: 1,
            horizon: 6,
            heads: 4,
            aggregator_ffn: 512,
            backend_hidden: 32,
            backend_blocks: 2,
            head_hidden: 256,
            epsilon: 1.0,
            raw_weights: false,
            key_init: KeyInit::Gaussian,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("width", self.width),
            ("query_width", self.query_width),
            ("patch_len", self.patch_len),
            ("patch_count", self.patch_count),
            ("channels", self.channels),
            ("horizon", self.horizon),
            ("heads", self.heads),
            ("aggregator_ffn", self.aggregator_ffn),
            ("backend_hidden", self.backend_hidden),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(TpbError::Config(format!("forecaster {name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(TpbError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(TpbError::Config(format!(
                "temperature {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn token_len(&self) -> usize {
        self.patch_len * self.channels
    }
}

/// Where the adjacency comes from during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Meta-training over source cities.
    Source,
    /// Fine-tuning and evaluation on the target city.
    Target,
}

/// A frozen bank together with the file it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct BankBinding {
    pub bank: PatternBank,
    pub path: Option<PathBuf>,
    pub sha256: Option<String>,
}

impl BankBinding {
    pub fn in_memory(bank: PatternBank) -> Self {
        Self {
            bank,
            path: None,
            sha256: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(TpbError::Dependency(format!(
                "pattern bank {} not found",
                path.display()
            )));
        }
        let bank = PatternBank::load(path)?;
        let path = path.canonicalize().map_err(|e| TpbError::io(path, e))?;
        let sha256 = file_sha256(&path)?;
        Ok(Self {
            bank,
            path: Some(path),
            sha256: Some(sha256),
        })
    }
}

#[derive(Debug, Clone)]
struct MetaPath {
    query: Linear,
    key: ParamId,
    positional: ParamId,
    aggregator: TransformerLayer,
}

#[derive(Debug, Clone)]
enum GraphParams {
    Adaptive {
        query: Linear,
        key: Linear,
    },
    Prior,
    /// Free logits over the target city's nodes, created on first use.
    Learned {
        logits: Option<ParamId>,
    },
}

#[derive(Debug)]
pub struct ForecastModel {
    pub cfg: ForecastConfig,
    pub store: ParamStore,
    bank: Option<BankBinding>,
    meta: Option<MetaPath>,
    graph: GraphParams,
    backend: Box<dyn StModel>,
    head_hidden: Linear,
    head_out: Linear,
}

/// Row-normalized copy of `g`; all-zero rows become uniform.
fn row_normalize(g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    let n = g.ncols() as f64;
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(1.0 / n);
        }
    }
    out
}

/// `B` stacked copies of an `N × N` matrix.
fn tile(block: &Array2<f64>, times: usize) -> Array2<f64> {
    let n = block.nrows();
    Array2::from_shape_fn((times * n, block.ncols()), |(r, c)| block[[r % n, c]])
}

impl ForecastModel {
    pub fn new<R: Rng + ?Sized>(cfg: ForecastConfig, bank: Option<BankBinding>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let bank = if cfg.variant.uses_bank() {
            let b =
                bank.ok_or_else(|| TpbError::Dependency(format!("variant {} needs a pattern bank", cfg.variant)))?;
            if b.bank.width() != cfg.width {
                return Err(TpbError::Shape(format!(
                    "bank width {} differs from model width {}",
                    b.bank.width(),
                    cfg.width
                )));
            }
            Some(b)
        } else {
            None
        };
        let d = cfg.width;
        let mut store = ParamStore::new();
        let meta = bank.as_ref().map(|b| {
            let k = b.bank.k();
            let query = Linear::new(&mut store, "query", cfg.token_len(), cfg.query_width, rng);
            let key = match cfg.key_init {
                KeyInit::Gaussian => normal(k, cfg.query_width, 1.0 / (cfg.query_width as f64).sqrt(), rng),
                KeyInit::BankProjection => {
                    let g = normal(d, cfg.query_width, 1.0 / (d as f64).sqrt(), rng);
                    b.bank.matrix().dot(&g)
                }
            };
            let key = store.add("key", key);
            let positional = store.add("aggregator.positional", uniform(HOURS_PER_WEEK, d, 0.02, rng));
            let aggregator = TransformerLayer::new(
                &mut store,
                "aggregator.layer",
                BlockShape::new(d, cfg.heads, cfg.aggregator_ffn),
                rng,
            );
            MetaPath {
                query,
                key,
                positional,
                aggregator,
            }
        });
        let graph = match cfg.variant {
            Variant::Full | Variant::NoClu => GraphParams::Adaptive {
                query: Linear::new(&mut store, "graph.query", d, d, rng),
                key: Linear::new(&mut store, "graph.key", d, d, rng),
            },
            Variant::NoAdj => GraphParams::Prior,
            Variant::NoMeta => GraphParams::Learned { logits: None },
        };
        let backend = Box::new(TcnBackend::new(
            &mut store,
            "backend",
            (cfg.patch_len, cfg.channels),
            cfg.backend_hidden,
            cfg.backend_blocks,
            d,
            rng,
        ));
        let head_hidden = Linear::new(&mut store, "head.hidden", 2 * d, cfg.head_hidden, rng);
        let head_out = Linear::new(&mut store, "head.out", cfg.head_hidden, cfg.horizon * cfg.channels, rng);
        Ok(Self {
            cfg,
            store,
            bank,
            meta,
            graph,
            backend,
            head_hidden,
            head_out,
        })
    }

    pub fn bank(&self) -> Option<&PatternBank> {
        self.bank.as_ref().map(|b| &b.bank)
    }

    pub fn bank_binding(&self) -> Option<&BankBinding> {
        self.bank.as_ref()
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Copy a `[168, d]` hour-of-week table into the aggregator.
    pub fn init_positional(&mut self, table: &Array2<f64>) -> Result<()> {
        let Some(meta) = &self.meta else { return Ok(()) };
        let dst = self.store.get_mut(meta.positional);
        if dst.dim() != table.dim() {
            return Err(TpbError::Shape(format!(
                "positional table {:?}, aggregator expects {:?}",
                table.dim(),
                dst.dim()
            )));
        }
        dst.assign(table);
        Ok(())
    }

    /// Give the learned-graph variant its `N × N` logits, zero so the graph
    /// starts uniform. Other variants ignore this.
    pub fn attach_target(&mut self, nodes: usize) -> Result<()> {
        if let GraphParams::Learned { logits } = &mut self.graph {
            match logits {
                Some(id) if self.store.get(*id).dim() != (nodes, nodes) => {
                    return Err(TpbError::Shape(format!(
                        "learned graph covers {} nodes, target has {nodes}",
                        self.store.get(*id).nrows()
                    )))
                }
                Some(_) => {}
                None => *logits = Some(self.store.add("graph.logits", zeros(nodes, nodes))),
            }
        }
        Ok(())
    }

    fn meta_path(&self) -> Result<&MetaPath> {
        self.meta
            .as_ref()
            .ok_or_else(|| TpbError::InvalidArgument(format!("variant {} has no pattern query", self.cfg.variant)))
    }

    fn check_batch(&self, batch: &ForecastBatch) -> Result<()> {
        let c = &self.cfg;
        let rows = batch.samples * batch.nodes * c.patch_count;
        if batch.samples == 0 || batch.nodes == 0 {
            return Err(TpbError::InvalidArgument("empty forecasting batch".into()));
        }
        if batch.patch_count != c.patch_count
            || batch.history.dim() != (rows, c.token_len())
            || batch.hours.len() != batch.samples * c.patch_count
            || batch.target.dim() != (batch.samples * batch.nodes, c.horizon * c.channels)
        {
            return Err(TpbError::Shape(format!(
                "batch history {:?} / target {:?} do not fit P={}, T0·C={}, T'·C={}",
                batch.history.dim(),
                batch.target.dim(),
                c.patch_count,
                c.token_len(),
                c.horizon * c.channels
            )));
        }
        Ok(())
    }

    /// Retrieval weights `[rows, K]` and retrieved patterns `Z` `[rows, d]`
    /// for flattened patches `[rows, T0·C]`.
    pub fn query_var(&self, tape: &mut Tape, patches: Var) -> Result<(Var, Var)> {
        let meta = self.meta_path()?;
        let bank = &self.bank.as_ref().expect("meta path implies a bank").bank;
        let key = tape.param(meta.key);
        if tape.shape(key).0 != bank.k() {
            return Err(TpbError::Shape(format!(
                "Key has {} rows, bank has {} patterns",
                tape.shape(key).0,
                bank.k()
            )));
        }
        let q = meta.query.forward(tape, patches);
        let scores = tape.matmul_nt(q, key);
        let weights = if self.cfg.raw_weights {
            scores
        } else {
            tape.softmax_rows(scores)
        };
        let b = tape.constant(bank.matrix().clone());
        Ok((weights, tape.matmul(weights, b)))
    }

    /// Transformer over each sequence of `P` retrieved patterns with
    /// hour-of-week embeddings; the hidden state at the last position.
    pub fn aggregate_var(&self, tape: &mut Tape, z: Var, token_hours: Vec<usize>) -> Result<Var> {
        let meta = self.meta_path()?;
        let p = self.cfg.patch_count;
        let rows = tape.shape(z).0;
        if rows == 0 || !rows.is_multiple_of(p) || token_hours.len() != rows {
            return Err(TpbError::Shape(format!(
                "{rows} retrieved patterns with {} hours for sequences of {p}",
                token_hours.len()
            )));
        }
        let pe = tape.param(meta.positional);
        let pe = tape.gather_rows(pe, token_hours);
        let x = tape.add(z, pe);
        let h = meta.aggregator.forward(tape, x, p);
        let last = (0..rows / p).map(|i| i * p + p - 1).collect();
        Ok(tape.gather_rows(h, last))
    }

    /// Adaptive adjacency from metaknowledge `[B·N, d]`: `B` stacked
    /// row-softmax blocks of `(M W_Q + b_Q)(M W_K + b_K)ᵀ / ε`.
    pub fn graph_var(&self, tape: &mut Tape, m: Var, nodes: usize) -> Result<Var> {
        let GraphParams::Adaptive { query, key } = &self.graph else {
            return Err(TpbError::InvalidArgument(format!(
                "variant {} does not reconstruct a graph",
                self.cfg.variant
            )));
        };
        if nodes < 2 || !tape.shape(m).0.is_multiple_of(nodes) {
            return Err(TpbError::Shape(format!(
                "{} metaknowledge rows cannot form graphs of {nodes} ≥ 2 nodes",
                tape.shape(m).0
            )));
        }
        let q = query.forward(tape, m);
        let k = key.forward(tape, m);
        let r = tape.block_matmul_nt(q, k, nodes);
        let r = tape.scale(r, 1.0 / self.cfg.epsilon);
        Ok(tape.softmax_rows(r))
    }

    fn adjacency_var(&self, tape: &mut Tape, batch: &ForecastBatch, m: Option<Var>, stage: Stage) -> Result<Var> {
        let n = batch.nodes;
        match &self.graph {
            GraphParams::Adaptive { .. } => self.graph_var(tape, m.expect("adaptive graph needs metaknowledge"), n),
            GraphParams::Prior => {
                let prior = batch
                    .prior
                    .as_ref()
                    .ok_or_else(|| TpbError::Dependency("variant no_adj needs the city's prior graph".into()))?;
                Ok(tape.constant(tile(&row_normalize(prior), batch.samples)))
            }
            GraphParams::Learned { logits } => match (stage, logits) {
                (Stage::Source, _) => Ok(tape.constant(Array2::from_elem((batch.samples * n, n), 1.0 / n as f64))),
                (Stage::Target, Some(id)) => {
                    if self.store.get(*id).dim() != (n, n) {
                        return Err(TpbError::Shape(format!(
                            "learned graph covers {} nodes, batch has {n}",
                            self.store.get(*id).nrows()
                        )));
                    }
                    let l = tape.param(*id);
                    let idx = (0..batch.samples * n).map(|r| r % n).collect();
                    let l = tape.gather_rows(l, idx);
                    Ok(tape.softmax_rows(l))
                }
                (Stage::Target, None) => Err(TpbError::InvalidArgument(
                    "call attach_target before using the learned graph on a target city".into(),
                )),
            },
        }
    }

    /// `Ŷ` as `[B·N, T'·C]`.
    pub fn forward_var(&self, tape: &mut Tape, batch: &ForecastBatch, stage: Stage) -> Result<Var> {
        self.check_batch(batch)?;
        let d = self.cfg.width;
        let history = tape.constant(batch.history.clone());
        let m = match self.meta {
            Some(_) => {
                let (_, z) = self.query_var(tape, history)?;
                Some(self.aggregate_var(tape, z, batch.token_hours())?)
            }
            None => None,
        };
        let a = self.adjacency_var(tape, batch, m, stage)?;
        let recent = tape.gather_rows(history, batch.last_rows());
        let r = self.backend.forward(tape, recent, a, batch.nodes);
        let m = match m {
            Some(m) => m,
            None => tape.constant(Array2::zeros((batch.samples * batch.nodes, d))),
        };
        let x = tape.concat_cols(m, r);
        let h = self.head_hidden.forward(tape, x);
        let h = tape.gelu(h);
        Ok(self.head_out.forward(tape, h))
    }

    pub fn loss_var(&self, tape: &mut Tape, batch: &ForecastBatch, stage: Stage) -> Result<Var> {
        let y = self.forward_var(tape, batch, stage)?;
        Ok(tape.mse(y, batch.target.clone(), None))
    }

    /// Evaluation-mode forecast `[B·N, T'·C]`.
    pub fn predict(&self, batch: &ForecastBatch, stage: Stage) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.store);
        let y = self.forward_var(&mut tape, batch, stage)?;
        Ok(tape.value(y).clone())
    }

    /// Retrieved patterns `[P, d]` of one node's window. The mask is ignored.
    pub fn query_patterns(&self, window: &PatchWindow) -> Result<Array2<f64>> {
        if window.patch_len() != self.cfg.token_len() {
            return Err(TpbError::Shape(format!(
                "patches of {} values, model expects {}",
                window.patch_len(),
                self.cfg.token_len()
            )));
        }
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(window.flat());
        let (_, z) = self.query_var(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Metaknowledge row of each retrieved-pattern sequence `[P, d]`.
    pub fn aggregate_metaknowledge(&self, z: &Array2<f64>, hours: &[usize]) -> Result<Array2<f64>> {
        if z.nrows() == 0 {
            return Err(TpbError::InvalidArgument("empty pattern series".into()));
        }
        let mut tape = Tape::new(&self.store);
        let zv = tape.constant(z.clone());
        let m = self.aggregate_var(&mut tape, zv, hours.to_vec())?;
        Ok(tape.value(m).clone())
    }

    /// Adaptive adjacency `[N, N]` of one city's metaknowledge `[N, d]`.
    pub fn reconstruct_graph(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.store);
        let mv = tape.constant(m.clone());
        let a = self.graph_var(&mut tape, mv, m.nrows())?;
        Ok(tape.value(a).clone())
    }

    /// Backend plus head on given metaknowledge and adjacency, `[N, T'·C]`.
    pub fn forecast(&self, recent: &Array2<f64>, m: &Array2<f64>, a: &Array2<f64>) -> Result<Array2<f64>> {
        let n = recent.nrows();
        if recent.ncols() != self.cfg.token_len() || m.dim() != (n, self.cfg.width) || a.dim() != (n, n) {
            return Err(TpbError::Shape(format!(
                "recent {:?}, metaknowledge {:?}, adjacency {:?}",
                recent.dim(),
                m.dim(),
                a.dim()
            )));
        }
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(recent.clone());
        let av = tape.constant(a.clone());
        let r = self.backend.forward(&mut tape, x, av, n);
        let mv = tape.constant(m.clone());
        let x = tape.concat_cols(mv, r);
        let h = self.head_hidden.forward(&mut tape, x);
        let h = tape.gelu(h);
        let y = self.head_out.forward(&mut tape, h);
        Ok(tape.value(y).clone())
    }

    /// Zero both head layers so the forecast equals the output bias.
    pub fn zero_head_weights(&mut self) {
        self.store.get_mut(self.head_hidden.weight).fill(0.0);
        self.store.get_mut(self.head_out.weight).fill(0.0);
    }

    pub fn head_bias(&self) -> &Array2<f64> {
        self.store.get(self.head_out.bias)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        a.set_meta("config", self.cfg);
        a.set_meta("K", self.bank().map(|b| b.k()));
        a.set_meta("d", self.cfg.width);
        a.set_meta("d_q", self.cfg.query_width);
        a.set_meta("T0", self.cfg.patch_len);
        a.set_meta("P", self.cfg.patch_count);
        a.set_meta("T_prime", self.cfg.horizon);
        a.set_meta("epsilon", self.cfg.epsilon);
        a.set_meta("variant", self.cfg.variant.as_str());
        if let Some(b) = &self.bank {
            let (Some(p), Some(h)) = (&b.path, &b.sha256) else {
                return Err(TpbError::InvalidArgument(
                    "only a model bound to a bank file can be saved".into(),
                ));
            };
            a.set_meta("bank_path", relative_to_checkpoint(path, p).to_string_lossy());
            a.set_meta("bank_sha256", h);
        }
        for (_, name, value) in self.store.iter() {
            a.push_matrix(name, value);
        }
        a.write(path, MODEL_MAGIC)
    }

    /// Load a checkpoint and the bank it names, verifying the bank's hash.
    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::read(path, MODEL_MAGIC)?;
        let cfg: ForecastConfig = a.meta("config")?;
        let bank = if cfg.variant.uses_bank() {
            let recorded: String = a.meta("bank_path")?;
            let mut bank_path = PathBuf::from(&recorded);
            if bank_path.is_relative() {
                bank_path = path.parent().unwrap_or(Path::new(".")).join(bank_path);
            }
            let binding = BankBinding::from_file(&bank_path)?;
            let expected: String = a.meta("bank_sha256")?;
            if binding.sha256.as_deref() != Some(expected.as_str()) {
                return Err(TpbError::HashMismatch(format!(
                    "model {} was trained against a different bank than {}",
                    path.display(),
                    bank_path.display()
                )));
            }
            let k: Option<usize> = a.meta("K")?;
            if k != Some(binding.bank.k()) {
                return Err(TpbError::Shape(format!(
                    "model Key has {k:?} rows, bank has {} patterns",
                    binding.bank.k()
                )));
            }
            Some(binding)
        } else {
            None
        };
        let mut model = Self::new(cfg, bank, &mut ChaCha8Rng::seed_from_u64(0))?;
        if let Some(l) = a.get("graph.logits") {
            model.attach_target(l.shape()[0])?;
        }
        model
            .store
            .load_named(|name| a.get(name).and_then(|d| d.to_f64_2d().ok()))?;
        Ok(model)
    }
}

/// The bank path as seen from the checkpoint's directory, so a run directory
/// can move as a whole; absolute when no relative route exists.
fn relative_to_checkpoint(checkpoint: &Path, bank: &Path) -> PathBuf {
    let dir = checkpoint
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    dir.canonicalize()
        .ok()
        .and_then(|d| pathdiff::diff_paths(bank, d))
        .unwrap_or_else(|| bank.to_path_buf())
}

/// Mean squared error over every entry.
pub fn forecast_loss(y_hat: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if y_hat.dim() != y.dim() {
        return Err(TpbError::Shape(format!(
            "forecast {:?} vs label {:?}",
            y_hat.dim(),
            y.dim()
        )));
    }
    if y.is_empty() {
        return Err(TpbError::InvalidArgument("empty forecast".into()));
    }
    Ok(y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

#[cfg(test)]
mod tests;
