//! One pipeline stage at a time, each reading its inputs from `[paths]` and
//! writing a single artifact plus a JSON record beside it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::*;
use crate::autoencoder::EpochRecord;
use crate::bank::KScore;
use crate::data::corpus::save_dataset;
use crate::meta_trainer::MetaEpoch;

fn require<'a>(path: &'a Option<PathBuf>, what: &str, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| TpbError::Dependency(format!("{what} needed: set paths.{key}")))?;
    if !p.exists() {
        return Err(TpbError::Dependency(format!("{what} {} not found", p.display())));
    }
    Ok(p)
}

/// `foo.ckpt` becomes `foo.ckpt.json`.
pub fn record_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TpbError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| TpbError::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| TpbError::io(path, e))
}

fn parent_dir(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TpbError::io(dir, e))?;
    }
    Ok(())
}

/// Generate the configured synthetic corpus into `dir`.
pub fn generate_data_stage(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    let data = generate_dataset(&cfg.data.synth)?.dataset;
    save_dataset(&data, dir)?;
    Ok(dataset_hash(&data))
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainRecord {
    pub data_sha256: String,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub history: Vec<EpochRecord>,
}

pub fn pretrain_stage(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainRecord> {
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    let outcome = pretrain(&data.source, &cfg.pretrain)?;
    parent_dir(out)?;
    outcome.model.save(out, &outcome.best)?;
    let record = PretrainRecord {
        data_sha256: dataset_hash(&data),
        best_epoch: outcome.best.epoch,
        best_val_mse: outcome.best.val_mse,
        history: outcome.history,
    };
    write_json(&record_path(out), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize)]
pub struct BankRecord {
    pub encoder_sha256: String,
    pub k: usize,
    pub method: BankMethod,
    pub silhouette: Option<f64>,
    pub scores: Vec<KScore>,
}

pub fn build_bank_stage(cfg: &ExperimentConfig, out: &Path) -> Result<BankRecord> {
    cfg.validate()?;
    let enc_path = require(&cfg.paths.encoder, "encoder checkpoint", "encoder")?;
    let (enc, _) = PatchAutoencoder::load(enc_path)?;
    let data = load_data(&cfg.data)?;
    let corpus = PatchCorpus::new(&data.source, enc.cfg.patch_len, enc.cfg.patch_count)?;
    let embeddings = embed_corpus(&corpus, &enc)?;
    let outcome = build_bank(&embeddings, data.source.ids(), &cfg.bank)?;
    parent_dir(out)?;
    outcome.bank.save(out)?;
    let record = BankRecord {
        encoder_sha256: file_sha256(enc_path)?,
        k: outcome.bank.k(),
        method: outcome.bank.provenance().method,
        silhouette: outcome.bank.provenance().silhouette,
        scores: outcome.scores,
    };
    write_json(&record_path(out), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetaRecord {
    pub variant: Variant,
    pub bank_sha256: Option<String>,
    pub history: Vec<MetaEpoch>,
}

/// Meta-train `[forecast].variant` from a fresh initialization seeded by
/// `[meta].seed`, bound to `paths.bank` when the variant uses one.
pub fn meta_train_stage(cfg: &ExperimentConfig, out: &Path) -> Result<MetaRecord> {
    cfg.validate()?;
    let variant = cfg.forecast.variant;
    let binding = if variant.uses_bank() {
        Some(BankBinding::from_file(require(
            &cfg.paths.bank,
            "pattern bank",
            "bank",
        )?)?)
    } else {
        None
    };
    let encoder = match &cfg.paths.encoder {
        Some(_) => Some(PatchAutoencoder::load(require(&cfg.paths.encoder, "encoder checkpoint", "encoder")?)?.0),
        None => None,
    };
    let data = load_data(&cfg.data)?;
    let f = &cfg.forecast;
    let sources = source_sets(&data.source, f.patch_len, f.patch_count, f.horizon)?;
    let bank_sha256 = binding.as_ref().and_then(|b| b.sha256.clone());
    let mut model = ForecastModel::new(*f, binding, &mut forecaster_rng(cfg.meta.seed))?;
    if let Some(enc) = &encoder {
        model.init_positional(enc.positional_table())?;
    }
    let history = reptile_meta_train(&mut model, &sources, &cfg.meta)?;
    parent_dir(out)?;
    model.save(out)?;
    let record = MetaRecord {
        variant,
        bank_sha256,
        history,
    };
    write_json(&record_path(out), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneRecord {
    pub variant: Variant,
    pub model_sha256: String,
    pub epoch_loss: Vec<f64>,
}

pub fn fine_tune_stage(cfg: &ExperimentConfig, out: &Path) -> Result<FinetuneRecord> {
    cfg.validate()?;
    let model_path = require(&cfg.paths.model, "meta-trained model", "model")?;
    let mut model = ForecastModel::load(model_path)?;
    let data = load_data(&cfg.data)?;
    let f = &model.cfg;
    let (train, _) = target_sets(&data, f.patch_len, f.patch_count, f.horizon)?;
    let epoch_loss = fine_tune(&mut model, &train, &cfg.finetune)?;
    parent_dir(out)?;
    model.save(out)?;
    let record = FinetuneRecord {
        variant: model.variant(),
        model_sha256: file_sha256(model_path)?,
        epoch_loss,
    };
    write_json(&record_path(out), &record)?;
    Ok(record)
}

/// Score `paths.model` on the test span and write `report.json`,
/// `metrics.csv` and `summary.txt` under `dir`.
pub fn evaluate_stage(cfg: &ExperimentConfig, dir: &Path, deterministic: bool) -> Result<MetricReport> {
    cfg.validate()?;
    let clock = Instant::now();
    let model_path = require(&cfg.paths.model, "fine-tuned model", "model")?;
    let model = ForecastModel::load(model_path)?;
    let data = load_data(&cfg.data)?;
    let f = &model.cfg;
    let (_, test) = target_sets(&data, f.patch_len, f.patch_count, f.horizon)?;
    let (horizons, overall) = evaluate(&model, &test, cfg.experiment.eval_batch)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("model".to_string(), file_sha256(model_path)?);
    let report = MetricReport::from_runs(
        model.variant(),
        vec![SeedRun {
            seed: cfg.finetune.seed,
            horizons,
            overall,
            meta_query_loss: None,
            finetune_loss: None,
        }],
        RunMetadata {
            config_sha256: cfg.hash()?,
            data_sha256: dataset_hash(&data),
            inputs,
            elapsed_seconds: (!deterministic).then(|| clock.elapsed().as_secs_f64()),
        },
    )?;
    let mut run = RunDir::new(dir)?;
    let reports = [report];
    run.write_json("report.json", &reports)?;
    run.write_text("metrics.csv", &metrics_csv(&reports)?)?;
    run.write_text("summary.txt", &summary_text(&reports))?;
    let [report] = reports;
    Ok(report)
}

/// Embed the source corpus with `paths.encoder` and label each patch by
/// its nearest pattern of `paths.bank`.
pub fn export_embeddings_stage(cfg: &ExperimentConfig, out: &Path) -> Result<EmbeddingExport> {
    cfg.validate()?;
    let (enc, _) = PatchAutoencoder::load(require(&cfg.paths.encoder, "encoder checkpoint", "encoder")?)?;
    let bank = PatternBank::load(require(&cfg.paths.bank, "pattern bank", "bank")?)?;
    let data = load_data(&cfg.data)?;
    let corpus = PatchCorpus::new(&data.source, enc.cfg.patch_len, enc.cfg.patch_count)?;
    parent_dir(out)?;
    export_embeddings(&enc, &corpus, &bank, out)
}
