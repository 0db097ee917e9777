//! Traffic pattern bank: corpus embeddings clustered into a frozen matrix of
//! unit-norm centroids.

pub mod kmeans;

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArrayData, Magic};
use crate::autoencoder::PatchAutoencoder;
use crate::data::PatchCorpus;
use crate::error::{Result, TpbError};
pub use kmeans::{
    assign_to, kmeans_cosine, select_k, silhouette, silhouette_samples, ClusterAssignment, KMeansFit, KMeansOptions,
    KScore,
};

pub const BANK_MAGIC: &Magic = b"TPBBANK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMethod {
    Kmeans,
    RandomPatches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_cities: Vec<String>,
    pub sample_ratio: f64,
    pub seed: u64,
    pub silhouette: Option<f64>,
    pub method: BankMethod,
}

/// Read-only `[K, d]` pattern matrix. Values are held at single precision so
/// a saved bank reloads bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBank {
    matrix: Array2<f64>,
    unit_normalized: bool,
    provenance: Provenance,
}

impl PatternBank {
    pub fn new(matrix: Array2<f64>, unit_normalized: bool, provenance: Provenance) -> Result<Self> {
        if matrix.nrows() < 2 || matrix.ncols() == 0 {
            return Err(TpbError::InvalidArgument(format!(
                "a bank needs K ≥ 2 non-empty rows, got {:?}",
                matrix.dim()
            )));
        }
        let matrix = matrix.mapv(|v| f64::from(v as f32));
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(TpbError::NonFinite("bank entries".into()));
        }
        if unit_normalized {
            for (i, row) in matrix.rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(TpbError::InvalidArgument(format!("bank row {i} has norm {norm}")));
                }
            }
        }
        Ok(Self {
            matrix,
            unit_normalized,
            provenance,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn metric(&self) -> &'static str {
        "cosine"
    }

    pub fn unit_normalized(&self) -> bool {
        self.unit_normalized
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        a.set_meta("magic", "TPBBANK1");
        a.set_meta("K", self.k());
        a.set_meta("d", self.width());
        a.set_meta("metric", self.metric());
        a.set_meta("unit_normalized", self.unit_normalized);
        a.set_meta("seed", self.provenance.seed);
        a.set_meta("silhouette", self.provenance.silhouette);
        a.set_meta("provenance", &self.provenance);
        a.push_f32("B", self.matrix.mapv(|v| v as f32).into_dyn());
        a.write(path, BANK_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::read(path, BANK_MAGIC)?;
        let k: usize = a.meta("K")?;
        let d: usize = a.meta("d")?;
        let metric: String = a.meta("metric")?;
        if metric != "cosine" {
            return Err(TpbError::corrupt(path, format!("unsupported metric {metric}")));
        }
        let b = match a.require("B")? {
            ArrayData::F32(b) => b.mapv(f64::from),
            ArrayData::F64(_) => return Err(TpbError::corrupt(path, "bank matrix must be float32")),
        };
        let b: Array2<f64> = b
            .into_dimensionality()
            .map_err(|_| TpbError::corrupt(path, "bank matrix must be rank 2"))?;
        if b.dim() != (k, d) {
            return Err(TpbError::corrupt(
                path,
                format!("header says {k}×{d}, matrix is {:?}", b.dim()),
            ));
        }
        Self::new(b, a.meta("unit_normalized")?, a.meta("provenance")?)
    }
}

/// Encode every patch of every tiled window with nothing masked. Rows come in
/// (city, node, time) order.
pub fn embed_corpus(corpus: &PatchCorpus, model: &PatchAutoencoder) -> Result<Array2<f64>> {
    if model.cfg.patch_len != corpus.t0 || model.cfg.patch_count != corpus.p {
        return Err(TpbError::Shape(format!(
            "encoder expects {}×{} windows, corpus has {}×{}",
            model.cfg.patch_count, model.cfg.patch_len, corpus.p, corpus.t0
        )));
    }
    let d = model.cfg.width;
    let mut data: Vec<f64> = Vec::with_capacity(corpus.patch_total() * d);
    for (ci, series) in corpus.series.iter().enumerate() {
        let starts: Vec<_> = corpus.windows.iter().filter(|w| w.city == ci).copied().collect();
        for node in 0..series.node_count() {
            let windows: Vec<_> = starts.iter().map(|&w| corpus.window(w, node)).collect();
            for h in model.encode(&windows)? {
                data.extend(h.iter());
            }
        }
    }
    let rows = data.len() / d;
    let out = Array2::from_shape_vec((rows, d), data).expect("embedding rows");
    if !out.iter().all(|v| v.is_finite()) {
        return Err(TpbError::NonFinite("patch embeddings".into()));
    }
    Ok(out)
}

/// Uniform sample of `round(ratio·n)` rows without replacement, in original
/// order. Returns the rows and their indices.
pub fn subsample<R: Rng + ?Sized>(
    embeddings: &Array2<f64>,
    ratio: f64,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TpbError::InvalidArgument(format!(
            "sample ratio {ratio} outside (0, 1]"
        )));
    }
    let n = embeddings.nrows();
    let count = ((ratio * n as f64).round() as usize).min(n);
    let mut idx = index::sample(rng, n, count).into_vec();
    idx.sort_unstable();
    Ok((embeddings.select(Axis(0), &idx), idx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KChoice {
    Fixed(usize),
    Auto(AutoK),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoK {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// A fixed cluster count or `"auto"` for silhouette selection.
    pub k: KChoice,
    pub k_grid: Vec<usize>,
    pub sample_ratio: f64,
    pub kmeans: KMeansOptions,
    pub seed: u64,
    /// `random_patches` skips clustering and keeps K sampled embeddings.
    pub method: BankMethod,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            k: KChoice::Auto(AutoK::Auto),
            k_grid: vec![4, 8, 10, 16, 32, 64],
            sample_ratio: 0.1,
            kmeans: KMeansOptions::default(),
            seed: 0,
            method: BankMethod::Kmeans,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BankOutcome {
    pub bank: PatternBank,
    /// Indices of the clustered sample within the full embedding matrix.
    pub sample: Vec<usize>,
    pub assignment: ClusterAssignment,
    pub scores: Vec<KScore>,
}

/// Subsample, choose K, cluster and wrap the centroids as a bank.
pub fn build_bank(embeddings: &Array2<f64>, source_cities: Vec<String>, cfg: &BankConfig) -> Result<BankOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (sample, idx) = subsample(embeddings, cfg.sample_ratio, &mut rng)?;
    let (k, scores) = match cfg.k {
        KChoice::Fixed(k) => (k, Vec::new()),
        KChoice::Auto(_) => select_k(&sample, &cfg.k_grid, &cfg.kmeans, &mut rng)?,
    };
    if cfg.method == BankMethod::RandomPatches {
        let mut bank = random_bank(&sample, k, source_cities, cfg.seed)?;
        bank.provenance.sample_ratio = cfg.sample_ratio;
        let assignment = assign_to(&sample, bank.matrix())?;
        bank.provenance.silhouette = silhouette(&sample, &assignment.labels).ok();
        return Ok(BankOutcome {
            bank,
            sample: idx,
            assignment,
            scores,
        });
    }
    let fit = kmeans_cosine(&sample, k, &cfg.kmeans, &mut rng)?;
    let sil = silhouette(&sample, &fit.assignment.labels).ok();
    let bank = PatternBank::new(
        fit.centroids,
        true,
        Provenance {
            source_cities,
            sample_ratio: cfg.sample_ratio,
            seed: cfg.seed,
            silhouette: sil,
            method: BankMethod::Kmeans,
        },
    )?;
    Ok(BankOutcome {
        bank,
        sample: idx,
        assignment: fit.assignment,
        scores,
    })
}

/// Bank of `k` randomly chosen patch embeddings, clustering bypassed.
pub fn random_bank(embeddings: &Array2<f64>, k: usize, source_cities: Vec<String>, seed: u64) -> Result<PatternBank> {
    if k > embeddings.nrows() {
        return Err(TpbError::InvalidArgument(format!(
            "cannot pick {k} patches from {}",
            embeddings.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = index::sample(&mut rng, embeddings.nrows(), k).into_vec();
    let rows = kmeans::normalize_rows(&embeddings.select(Axis(0), &idx))?;
    PatternBank::new(
        rows,
        true,
        Provenance {
            source_cities,
            sample_ratio: k as f64 / embeddings.nrows() as f64,
            seed,
            silhouette: None,
            method: BankMethod::RandomPatches,
        },
    )
}
