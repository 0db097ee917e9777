//! Experiment orchestration: configuration files, the staged pipeline from
//! pre-training to evaluation, multi-seed metric reports, K sweeps and
//! embedding export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{file_sha256, sha256_hex, Archive, Magic};
use crate::autoencoder::{pretrain, PatchAutoencoder, PretrainConfig};
use crate::bank::{assign_to, build_bank, embed_corpus, BankConfig, BankMethod, KChoice, PatternBank};
use crate::data::corpus::{load_dataset, Dataset};
use crate::data::synth::{generate_dataset, SynthSpec};
use crate::data::{PatchCorpus, Scaler};
use crate::error::{Result, TpbError};
use crate::forecaster::{BankBinding, ForecastConfig, ForecastModel, ForecastSet, Variant};
use crate::meta_trainer::{
    fine_tune, predict_set, reptile_meta_train, source_sets, target_sets, FinetuneConfig, MetaConfig,
};
use crate::metrics::Metrics;

mod stages;
pub use stages::*;

pub const EMBEDDING_MAGIC: &Magic = b"TPBEMBD1";

/// Horizon steps shown in the summary table.
pub const TABLE_STEPS: [usize; 3] = [1, 3, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Pretrain,
    BuildBank,
    MetaTrain,
    FineTune,
    Evaluate,
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::Pretrain,
        StageKind::BuildBank,
        StageKind::MetaTrain,
        StageKind::FineTune,
        StageKind::Evaluate,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct DataConfig {
    /// Corpus directory written by `generate-data`; the synthetic spec is
    /// generated in memory when absent.
    pub dir: Option<PathBuf>,
    pub synth: SynthSpec,
}

/// Existing artifacts standing in for stages left out of a plan.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub encoder: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub random_bank: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

/// Stages, variants, seeds and K grid of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub stages: Vec<StageKind>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Cluster counts of the K sweep.
    pub k_grid: Vec<usize>,
    pub eval_batch: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            stages: StageKind::ALL.to_vec(),
            variants: vec![Variant::Full],
            seeds: vec![0],
            k_grid: vec![2, 3, 4, 5, 6, 7, 8, 9, 10],
            eval_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub pretrain: PretrainConfig,
    pub bank: BankConfig,
    pub forecast: ForecastConfig,
    pub meta: MetaConfig,
    pub finetune: FinetuneConfig,
    pub experiment: ExperimentPlan,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TpbError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| TpbError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TpbError::Serde(e.to_string()))
    }

    /// Override every training seed and reduce the seed list to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.bank.seed = seed;
        self.meta.seed = seed;
        self.finetune.seed = seed;
        self.experiment.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.forecast.validate()?;
        self.meta.validate()?;
        self.finetune.validate()?;
        let (p, f) = (&self.pretrain.model, &self.forecast);
        if (p.patch_len, p.patch_count, p.channels) != (f.patch_len, f.patch_count, f.channels) {
            return Err(TpbError::Config(format!(
                "encoder windows {}×{}×{} differ from forecaster windows {}×{}×{}",
                p.patch_count, p.patch_len, p.channels, f.patch_count, f.patch_len, f.channels
            )));
        }
        if p.width != f.width {
            return Err(TpbError::Config(format!(
                "encoder width {} differs from forecaster width {}",
                p.width, f.width
            )));
        }
        let plan = &self.experiment;
        if plan.variants.is_empty() || plan.seeds.is_empty() || plan.stages.is_empty() {
            return Err(TpbError::Config(
                "a plan needs at least one stage, variant and seed".into(),
            ));
        }
        if plan.eval_batch == 0 {
            return Err(TpbError::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }

    /// Forecaster configuration of one variant.
    pub fn forecast_for(&self, variant: Variant) -> ForecastConfig {
        ForecastConfig {
            variant,
            ..self.forecast
        }
    }

    /// Hash of the canonical configuration text.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Check that every stage can find its inputs, either from an earlier
    /// stage of the plan or from an existing file, before anything runs.
    pub fn check_dependencies(&self) -> Result<()> {
        let plan = &self.experiment;
        let runs = |s: StageKind| plan.stages.contains(&s);
        let need_file = |what: &str, path: &Option<PathBuf>, produced_by: StageKind| -> Result<()> {
            match path {
                Some(p) if p.exists() => Ok(()),
                Some(p) => Err(TpbError::Dependency(format!("{what} {} not found", p.display()))),
                None => Err(TpbError::Dependency(format!(
                    "{what} is neither produced by a `{}` stage nor given under [paths]",
                    stage_name(produced_by)
                ))),
            }
        };
        if let Some(dir) = &self.data.dir {
            if !dir.join(crate::data::corpus::MANIFEST).exists() {
                return Err(TpbError::Dependency(format!("no corpus at {}", dir.display())));
            }
        }
        let banked: Vec<Variant> = plan.variants.iter().copied().filter(|v| v.uses_bank()).collect();
        if runs(StageKind::BuildBank) && !runs(StageKind::Pretrain) {
            need_file("encoder checkpoint", &self.paths.encoder, StageKind::Pretrain)?;
        }
        if runs(StageKind::MetaTrain) && !runs(StageKind::BuildBank) {
            if banked.iter().any(|v| *v != Variant::NoClu) {
                need_file("pattern bank", &self.paths.bank, StageKind::BuildBank)?;
            }
            if banked.contains(&Variant::NoClu) {
                need_file("random pattern bank", &self.paths.random_bank, StageKind::BuildBank)?;
            }
        }
        if (runs(StageKind::FineTune) || runs(StageKind::Evaluate)) && !runs(StageKind::MetaTrain) {
            need_file("model checkpoint", &self.paths.model, StageKind::MetaTrain)?;
        }
        Ok(())
    }
}

fn stage_name(s: StageKind) -> &'static str {
    match s {
        StageKind::Pretrain => "pretrain",
        StageKind::BuildBank => "build-bank",
        StageKind::MetaTrain => "meta-train",
        StageKind::FineTune => "fine-tune",
        StageKind::Evaluate => "evaluate",
    }
}

/// The corpus named by the configuration.
pub fn load_data(cfg: &DataConfig) -> Result<Dataset> {
    match &cfg.dir {
        Some(dir) => load_dataset(dir),
        None => Ok(generate_dataset(&cfg.synth)?.dataset),
    }
}

/// Content hash over the raw values and timestamps of every city.
pub fn dataset_hash(data: &Dataset) -> String {
    let mut bytes = Vec::new();
    for corpus in [&data.source, &data.target, &data.test] {
        for city in &corpus.cities {
            let s = &city.series;
            bytes.extend(s.city.as_bytes());
            bytes.extend(s.interval_minutes.to_le_bytes());
            bytes.extend(s.start_timestamp.to_le_bytes());
            for &dim in s.values.shape() {
                bytes.extend((dim as u64).to_le_bytes());
            }
            for v in s.values.iter() {
                bytes.extend(v.to_le_bytes());
            }
        }
    }
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
}

/// Metrics per horizon step and over all steps, in original units.
pub fn evaluate(model: &ForecastModel, set: &ForecastSet, batch: usize) -> Result<(Vec<HorizonMetrics>, Metrics)> {
    let (pred, target) = predict_set(model, set, batch)?;
    evaluate_predictions(&pred, &target, &set.scaler, set.horizon)
}

/// Score normalized `[rows, T'·C]` predictions after mapping them back to
/// original units with `scaler`.
pub fn evaluate_predictions(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    scaler: &Scaler,
    horizon: usize,
) -> Result<(Vec<HorizonMetrics>, Metrics)> {
    if pred.dim() != target.dim() || !pred.ncols().is_multiple_of(horizon) {
        return Err(TpbError::Shape(format!(
            "predictions {:?}, targets {:?}, horizon {horizon}",
            pred.dim(),
            target.dim()
        )));
    }
    let c = pred.ncols() / horizon;
    let invert = |a: &Array2<f64>| {
        let mut out = Vec::with_capacity(a.len());
        for row in a.rows() {
            let mut r: Vec<f64> = row.to_vec();
            scaler.invert_in_place(&mut r);
            out.push(r);
        }
        out
    };
    let (p, y) = (invert(pred), invert(target));
    let mut per_step = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let cols = h * c..(h + 1) * c;
        let yh: Vec<f64> = y.iter().flat_map(|r| r[cols.clone()].to_vec()).collect();
        let ph: Vec<f64> = p.iter().flat_map(|r| r[cols.clone()].to_vec()).collect();
        let m = Metrics::compute(&yh, &ph)?;
        per_step.push(HorizonMetrics {
            step: h + 1,
            rmse: m.rmse,
            mae: m.mae,
            mape: m.mape,
        });
    }
    let all_y: Vec<f64> = y.into_iter().flatten().collect();
    let all_p: Vec<f64> = p.into_iter().flatten().collect();
    Ok((per_step, Metrics::compute(&all_y, &all_p)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub step: usize,
    pub rmse: Stat,
    pub mae: Stat,
    pub mape: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub horizons: Vec<HorizonMetrics>,
    pub overall: Metrics,
    pub meta_query_loss: Option<f64>,
    pub finetune_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_sha256: String,
    pub data_sha256: String,
    /// Hashes of the encoder and bank files the run depended on.
    pub inputs: BTreeMap<String, String>,
    /// Wall-clock seconds; left out in deterministic mode.
    pub elapsed_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    /// Mean and spread across seeds for every horizon step.
    pub horizons: Vec<HorizonSummary>,
    pub overall: HorizonSummary,
    pub median_rmse: f64,
    pub metadata: RunMetadata,
}

impl MetricReport {
    pub fn from_runs(variant: Variant, runs: Vec<SeedRun>, metadata: RunMetadata) -> Result<Self> {
        if runs.is_empty() {
            return Err(TpbError::InvalidArgument("a report needs at least one run".into()));
        }
        let summarize = |step: usize, get: &dyn Fn(&SeedRun) -> Metrics| {
            let ms: Vec<Metrics> = runs.iter().map(get).collect();
            HorizonSummary {
                step,
                rmse: Stat::of(&ms.iter().map(|m| m.rmse).collect::<Vec<_>>()),
                mae: Stat::of(&ms.iter().map(|m| m.mae).collect::<Vec<_>>()),
                mape: Stat::of(&ms.iter().map(|m| m.mape).collect::<Vec<_>>()),
            }
        };
        let steps = runs[0].horizons.len();
        let horizons = (0..steps)
            .map(|h| {
                summarize(h + 1, &|r: &SeedRun| Metrics {
                    rmse: r.horizons[h].rmse,
                    mae: r.horizons[h].mae,
                    mape: r.horizons[h].mape,
                })
            })
            .collect();
        let overall = summarize(0, &|r: &SeedRun| r.overall);
        let median_rmse = median(&runs.iter().map(|r| r.overall.rmse).collect::<Vec<_>>());
        Ok(Self {
            variant,
            seeds: runs.iter().map(|r| r.seed).collect(),
            runs,
            horizons,
            overall,
            median_rmse,
            metadata,
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A written file and its content hash, with the path relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub reports: Vec<MetricReport>,
    pub artifacts: Vec<Artifact>,
}

impl ExperimentReport {
    pub fn report(&self, variant: Variant) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.variant == variant)
    }
}

/// Output directory bookkeeping: every file goes through here so its hash
/// lands in the report.
struct RunDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl RunDir {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| TpbError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| TpbError::io(parent, e))?;
        }
        Ok(p)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let sha256 = file_sha256(&self.root.join(rel))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256,
        });
        Ok(())
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, text).map_err(|e| TpbError::io(&p, e))?;
        self.record(rel)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| TpbError::Serde(e.to_string()))?;
        self.write_text(rel, &(text + "\n"))
    }
}

/// Encoder and banks shared by every variant and seed.
struct Shared {
    encoder: Option<PatchAutoencoder>,
    bank: Option<PathBuf>,
    random_bank: Option<PathBuf>,
}

fn forecaster_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    rng
}

/// Run the stages of `cfg.experiment` and write reports and artifacts under
/// `out`. Nothing is trained unless every dependency resolves first.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, deterministic: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    cfg.check_dependencies()?;
    let clock = Instant::now();
    let plan = &cfg.experiment;
    let runs = |s: StageKind| plan.stages.contains(&s);
    let data = load_data(&cfg.data)?;
    let mut dir = RunDir::new(out)?;
    dir.write_text("config.toml", &cfg.to_toml()?)?;

    let needs_encoder = runs(StageKind::BuildBank);
    let encoder = if runs(StageKind::Pretrain) {
        let outcome = pretrain(&data.source, &cfg.pretrain)?;
        outcome.model.save(&dir.path("encoder.ckpt")?, &outcome.best)?;
        dir.record("encoder.ckpt")?;
        dir.write_json("pretrain_history.json", &outcome.history)?;
        Some(outcome.model)
    } else if needs_encoder || cfg.paths.encoder.is_some() {
        let p = cfg.paths.encoder.as_ref().expect("checked dependencies");
        Some(PatchAutoencoder::load(p)?.0)
    } else {
        None
    };

    let mut shared = Shared {
        encoder,
        bank: cfg.paths.bank.clone(),
        random_bank: cfg.paths.random_bank.clone(),
    };
    if runs(StageKind::BuildBank) {
        let enc = shared.encoder.as_ref().expect("encoder resolved");
        let corpus = PatchCorpus::new(&data.source, enc.cfg.patch_len, enc.cfg.patch_count)?;
        let embeddings = embed_corpus(&corpus, enc)?;
        let outcome = build_bank(&embeddings, data.source.ids(), &cfg.bank)?;
        outcome.bank.save(&dir.path("bank.tpb")?)?;
        dir.record("bank.tpb")?;
        dir.write_json("k_scores.json", &outcome.scores)?;
        shared.bank = Some(out.join("bank.tpb"));
        if plan.variants.contains(&Variant::NoClu) {
            let random_cfg = BankConfig {
                k: KChoice::Fixed(outcome.bank.k()),
                method: BankMethod::RandomPatches,
                ..cfg.bank.clone()
            };
            let random = build_bank(&embeddings, data.source.ids(), &random_cfg)?;
            random.bank.save(&dir.path("bank_random.tpb")?)?;
            dir.record("bank_random.tpb")?;
            shared.random_bank = Some(out.join("bank_random.tpb"));
        }
    }

    let mut inputs = BTreeMap::new();
    for (name, path) in [
        (
            "encoder",
            cfg.paths.encoder.as_ref().filter(|_| !runs(StageKind::Pretrain)),
        ),
        ("bank", shared.bank.as_ref()),
        ("random_bank", shared.random_bank.as_ref()),
    ] {
        if let Some(p) = path {
            if p.exists() {
                inputs.insert(name.to_string(), file_sha256(p)?);
            }
        }
    }

    let mut reports = Vec::new();
    let forecasting = [StageKind::MetaTrain, StageKind::FineTune, StageKind::Evaluate]
        .into_iter()
        .any(runs);
    if forecasting {
        let f = &cfg.forecast;
        let sources = source_sets(&data.source, f.patch_len, f.patch_count, f.horizon)?;
        let (train, test) = target_sets(&data, f.patch_len, f.patch_count, f.horizon)?;
        for &variant in &plan.variants {
            let mut seed_runs = Vec::new();
            for &seed in &plan.seeds {
                let tag = format!("{variant}/seed{seed}");
                info!("running {tag}");
                let (model, meta_loss, ft_loss) =
                    train_one(cfg, &shared, &sources, &train, variant, seed, &mut dir, &tag)?;
                if runs(StageKind::Evaluate) {
                    let (horizons, overall) = evaluate(&model, &test, plan.eval_batch)?;
                    seed_runs.push(SeedRun {
                        seed,
                        horizons,
                        overall,
                        meta_query_loss: meta_loss,
                        finetune_loss: ft_loss,
                    });
                }
            }
            if !seed_runs.is_empty() {
                let metadata = RunMetadata {
                    config_sha256: cfg.hash()?,
                    data_sha256: dataset_hash(&data),
                    inputs: inputs.clone(),
                    elapsed_seconds: (!deterministic).then(|| clock.elapsed().as_secs_f64()),
                };
                reports.push(MetricReport::from_runs(variant, seed_runs, metadata)?);
            }
        }
    }

    if !reports.is_empty() {
        dir.write_json("report.json", &reports)?;
        dir.write_text("metrics.csv", &metrics_csv(&reports)?)?;
        dir.write_text("summary.txt", &summary_text(&reports))?;
    }
    dir.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let report = ExperimentReport {
        reports,
        artifacts: dir.artifacts.clone(),
    };
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    cfg: &ExperimentConfig,
    shared: &Shared,
    sources: &[ForecastSet],
    train: &ForecastSet,
    variant: Variant,
    seed: u64,
    dir: &mut RunDir,
    tag: &str,
) -> Result<(ForecastModel, Option<f64>, Option<f64>)> {
    let plan = &cfg.experiment;
    let runs = |s: StageKind| plan.stages.contains(&s);
    let mut meta_loss = None;
    let mut model = if runs(StageKind::MetaTrain) {
        let binding = match variant {
            Variant::NoMeta => None,
            Variant::NoClu => Some(BankBinding::from_file(
                shared.random_bank.as_ref().expect("checked dependencies"),
            )?),
            _ => Some(BankBinding::from_file(
                shared.bank.as_ref().expect("checked dependencies"),
            )?),
        };
        let mut model = ForecastModel::new(cfg.forecast_for(variant), binding, &mut forecaster_rng(seed))?;
        if let Some(enc) = &shared.encoder {
            model.init_positional(enc.positional_table())?;
        }
        let history = reptile_meta_train(&mut model, sources, &MetaConfig { seed, ..cfg.meta })?;
        meta_loss = history.last().map(|h| h.query_loss);
        let rel = format!("{tag}/meta.model");
        model.save(&dir.path(&rel)?)?;
        dir.record(&rel)?;
        model
    } else {
        let p = cfg.paths.model.as_ref().expect("checked dependencies");
        let model = ForecastModel::load(p)?;
        if model.variant() != variant {
            return Err(TpbError::Config(format!(
                "checkpoint {} holds variant {}, the plan asks for {variant}",
                p.display(),
                model.variant()
            )));
        }
        model
    };
    let mut ft_loss = None;
    if runs(StageKind::FineTune) {
        let history = fine_tune(&mut model, train, &FinetuneConfig { seed, ..cfg.finetune })?;
        ft_loss = history.last().copied();
        let rel = format!("{tag}/finetuned.model");
        model.save(&dir.path(&rel)?)?;
        dir.record(&rel)?;
    }
    Ok((model, meta_loss, ft_loss))
}

/// Machine-readable table: one row per variant, seed (or aggregate) and step.
pub fn metrics_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| TpbError::Serde(e.to_string());
    w.write_record(["variant", "seed", "step", "rmse", "mae", "mape"])
        .map_err(err)?;
    for r in reports {
        for run in &r.runs {
            for h in &run.horizons {
                w.write_record([
                    r.variant.to_string(),
                    run.seed.to_string(),
                    h.step.to_string(),
                    format!("{:.6}", h.rmse),
                    format!("{:.6}", h.mae),
                    format!("{:.6}", h.mape),
                ])
                .map_err(err)?;
            }
        }
        for h in &r.horizons {
            w.write_record([
                r.variant.to_string(),
                "mean".to_string(),
                h.step.to_string(),
                format!("{:.6}", h.rmse.mean),
                format!("{:.6}", h.mae.mean),
                format!("{:.6}", h.mape.mean),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| TpbError::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| TpbError::Serde(e.to_string()))
}

/// Plain-text table at steps 1, 3 and 6 with mean ± std across seeds.
pub fn summary_text(reports: &[MetricReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "variant {} | seeds {:?} | median RMSE {:.4}\n",
            r.variant, r.seeds, r.median_rmse
        ));
        for h in r.horizons.iter().filter(|h| TABLE_STEPS.contains(&h.step)) {
            s.push_str(&format!(
                "  step {:>2}  RMSE {:8.4} ± {:.4}  MAE {:8.4} ± {:.4}  MAPE {:7.3}% ± {:.3}\n",
                h.step, h.rmse.mean, h.rmse.std, h.mae.mean, h.mae.std, h.mape.mean, h.mape.std
            ));
        }
        let o = &r.overall;
        s.push_str(&format!(
            "  all      RMSE {:8.4} ± {:.4}  MAE {:8.4} ± {:.4}  MAPE {:7.3}% ± {:.3}\n",
            o.rmse.mean, o.rmse.std, o.mae.mean, o.mae.std, o.mape.mean, o.mape.std
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub silhouette: Option<f64>,
    pub rmse: Stat,
}

/// Build a bank at every K of the plan's grid, run the full variant on each
/// and tabulate silhouette against test RMSE.
pub fn sweep_k(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.paths.encoder.is_none() && !cfg.experiment.stages.contains(&StageKind::Pretrain) {
        return Err(TpbError::Dependency(
            "the K sweep needs an encoder: run `pretrain` or set paths.encoder".into(),
        ));
    }
    if let Some(p) = &cfg.paths.encoder {
        if !p.exists() {
            return Err(TpbError::Dependency(format!(
                "encoder checkpoint {} not found",
                p.display()
            )));
        }
    }
    let data = load_data(&cfg.data)?;
    let mut dir = RunDir::new(out)?;
    let encoder = match &cfg.paths.encoder {
        Some(p) => PatchAutoencoder::load(p)?.0,
        None => {
            let o = pretrain(&data.source, &cfg.pretrain)?;
            o.model.save(&dir.path("encoder.ckpt")?, &o.best)?;
            dir.record("encoder.ckpt")?;
            o.model
        }
    };
    let corpus = PatchCorpus::new(&data.source, encoder.cfg.patch_len, encoder.cfg.patch_count)?;
    let embeddings = embed_corpus(&corpus, &encoder)?;
    let f = &cfg.forecast;
    let sources = source_sets(&data.source, f.patch_len, f.patch_count, f.horizon)?;
    let (train, test) = target_sets(&data, f.patch_len, f.patch_count, f.horizon)?;
    let shared_encoder = Some(encoder);
    let mut rows = Vec::new();
    for &k in &cfg.experiment.k_grid {
        let outcome = build_bank(
            &embeddings,
            data.source.ids(),
            &BankConfig {
                k: KChoice::Fixed(k),
                method: BankMethod::Kmeans,
                ..cfg.bank.clone()
            },
        )?;
        let rel = format!("sweep/k{k}/bank.tpb");
        outcome.bank.save(&dir.path(&rel)?)?;
        dir.record(&rel)?;
        let shared = Shared {
            encoder: shared_encoder.clone(),
            bank: Some(out.join(&rel)),
            random_bank: None,
        };
        let stage_cfg = ExperimentConfig {
            experiment: ExperimentPlan {
                stages: vec![StageKind::MetaTrain, StageKind::FineTune, StageKind::Evaluate],
                ..cfg.experiment.clone()
            },
            ..cfg.clone()
        };
        let mut rmse = Vec::new();
        for &seed in &cfg.experiment.seeds {
            let tag = format!("sweep/k{k}/seed{seed}");
            let (model, _, _) = train_one(
                &stage_cfg,
                &shared,
                &sources,
                &train,
                Variant::Full,
                seed,
                &mut dir,
                &tag,
            )?;
            rmse.push(evaluate(&model, &test, cfg.experiment.eval_batch)?.1.rmse);
        }
        let row = SweepRow {
            k,
            silhouette: outcome.bank.provenance().silhouette,
            rmse: Stat::of(&rmse),
        };
        info!("K = {k}: silhouette {:?}, RMSE {:.4}", row.silhouette, row.rmse.mean);
        rows.push(row);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize((r.k, r.silhouette, r.rmse.mean, r.rmse.std))
            .map_err(|e| TpbError::Serde(e.to_string()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| TpbError::Serde(e.to_string()))?)
        .map_err(|e| TpbError::Serde(e.to_string()))?;
    dir.write_text("sweep_k.csv", &format!("k,silhouette,rmse_mean,rmse_std\n{body}"))?;
    dir.write_json("sweep_k.json", &rows)?;
    Ok(rows)
}

/// Patch embeddings of a corpus with the bank pattern each is nearest to.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Embed every patch of `corpus`, label it with its nearest bank pattern and
/// write both to `path`.
pub fn export_embeddings(
    enc: &PatchAutoencoder,
    corpus: &PatchCorpus,
    bank: &PatternBank,
    path: &Path,
) -> Result<EmbeddingExport> {
    let embeddings = embed_corpus(corpus, enc)?;
    let labels = assign_to(&embeddings, bank.matrix())?.labels;
    let mut a = Archive::new();
    a.set_meta("rows", embeddings.nrows());
    a.set_meta("k", bank.k());
    a.push_matrix("embeddings", &embeddings);
    let lab: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    a.push_f64(
        "labels",
        ArrayD::from_shape_vec(IxDyn(&[lab.len()]), lab).expect("1-d labels"),
    );
    a.write(path, EMBEDDING_MAGIC)?;
    Ok(EmbeddingExport { embeddings, labels })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingExport> {
    let a = Archive::read(path, EMBEDDING_MAGIC)?;
    let embeddings = a.require("embeddings")?.to_f64_2d()?;
    let labels = match a.require("labels")? {
        crate::archive::ArrayData::F64(v) => v.iter().map(|&l| l as usize).collect::<Vec<_>>(),
        _ => return Err(TpbError::corrupt(path, "labels are not f64")),
    };
    if labels.len() != embeddings.nrows() {
        return Err(TpbError::corrupt(path, "label count differs from embedding rows"));
    }
    Ok(EmbeddingExport { embeddings, labels })
}
