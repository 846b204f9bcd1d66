//! End-to-end commands over an output directory.
//!
//! Layout under the output root:
//!
//! ```text
//! dataset/            manifest.jsonl + images/
//! run/                config.json, stage1.ckpt, stage2.ckpt, history.log, model.q8
//! reports/            metric reports (JSON and CSV), result logs
//! timestamps.jsonl    wall-clock times of each command
//! ```
//!
//! Reports are pure functions of the config and the files they read, so
//! reruns reproduce them byte for byte. Datasets and checkpoints are never
//! replaced.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::{
    characterize as geometry_of, pair_cosine_medians, Geometry, MetricsReport, ProtocolMetrics,
    ReportMeta,
};
use crate::fsio;
use crate::model::{init_params, load_checkpoint, pool_images, ModelConfig, ModelParams};
use crate::numcore::{dot, Tensor};
use crate::objectives::LossTerms;
use crate::quantsim::{
    calibrate, cost_model, encode_quantized_model, quantize_model, quantized_encode_images,
    CostReport,
};
use crate::retrieval::{
    eval_protocol_embedded, protocol_gallery, records_to_jsonl, result_records, split_embeddings,
    split_languages, Protocol, Ranker,
};
use crate::synthgen::{generate_dataset, read_dataset, Dataset, DatasetManifest, Split};
use crate::training::{run_two_stage, Stage, TrainConfig, TwoStageResult};

pub const CONFIG_FILE: &str = "config.json";
pub const QMODEL_FILE: &str = "model.q8";
pub const TIMESTAMPS_FILE: &str = "timestamps.jsonl";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports_dir().join(name)
    }

    /// Appends `{command, unix_time}` to the timestamp sidecar.
    pub fn stamp(&self, command: &str) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let line = serde_json::json!({ "command": command, "unix_time": secs });
        let path = self.root.join(TIMESTAMPS_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fsio::write_atomic(path, s.as_bytes())
}

pub fn gen(cfg: &RunConfig, layout: &Layout) -> Result<DatasetManifest> {
    cfg.validate()?;
    generate_dataset(&cfg.lexicon.build()?, &cfg.dataset, &layout.dataset_dir())
}

/// Reads the dataset and checks its lexicon matches the config.
pub fn load_dataset(cfg: &RunConfig, layout: &Layout) -> Result<Dataset> {
    let dir = layout.dataset_dir();
    if !dir.exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run `gen` first",
            dir.display()
        )));
    }
    let ds = read_dataset(&dir)?;
    if ds.lexicon != cfg.lexicon.build()? {
        return Err(Error::Config(format!(
            "dataset at {} was generated with a different lexicon",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Mean within-language Acc@1 over the languages present in `split`.
pub fn within_acc1(split: &Dataset, params: &ModelParams, model: &ModelConfig) -> Result<f64> {
    mean_within(
        split,
        &split_embeddings(split, params, model)?,
        params,
        model,
    )
}

/// Mean cross-language Acc@1 over all ordered pairs.
pub fn cross_acc1(split: &Dataset, params: &ModelParams, model: &ModelConfig) -> Result<f64> {
    let emb = split_embeddings(split, params, model)?;
    let pairs = ordered_pairs(&split_languages(split));
    let mut sum = 0.0;
    for p in &pairs {
        let res = eval_protocol_embedded(split, p, &emb, params, model, Ranker::Cosine)?;
        sum += ProtocolMetrics::from_results(p.clone(), &res)?.acc1;
    }
    Ok(sum / pairs.len().max(1) as f64)
}

pub fn train(cfg: &RunConfig, layout: &Layout) -> Result<TwoStageResult> {
    cfg.validate()?;
    let ds = load_dataset(cfg, layout)?;
    let run_dir = layout.run_dir();
    fsio::write_new_or_same(&run_dir.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
    let held_out = ds.split(Split::IdEval);
    let model = cfg.train.model;
    let hook = |p: &ModelParams| within_acc1(&held_out, p, &model);
    run_two_stage(&cfg.train, &ds, Some(&run_dir), Some(&hook))
}

/// The latest checkpoint in the run directory.
pub fn final_checkpoint(layout: &Layout) -> Result<(PathBuf, ModelConfig, ModelParams)> {
    for stage in [Stage::Finetune, Stage::Pretrain] {
        let path = layout.run_dir().join(stage.checkpoint_name());
        if path.exists() {
            let (meta, params) = load_checkpoint(&path)?;
            return Ok((path, meta.model, params));
        }
    }
    Err(Error::Checkpoint(format!(
        "no checkpoint in {}; run `train` first",
        layout.run_dir().display()
    )))
}

fn report_meta(path: &Path, ds: &Dataset, split: Split) -> Result<ReportMeta> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ReportMeta {
        checkpoint: format!("{name} sha256:{}", sha256_hex(&fsio::read(path)?)),
        dataset_seed: ds.seed,
        split: split.as_str().to_string(),
    })
}

fn run_protocols(
    cfg: &RunConfig,
    layout: &Layout,
    split: Split,
    protocols: &[Protocol],
    stem: &str,
) -> Result<MetricsReport> {
    let ds = load_dataset(cfg, layout)?;
    let (path, model, params) = final_checkpoint(layout)?;
    let part = ds.split(split);
    let emb = split_embeddings(&part, &params, &model)?;
    let mut metrics = Vec::with_capacity(protocols.len());
    let mut records = Vec::new();
    for p in protocols {
        let res = eval_protocol_embedded(&part, p, &emb, &params, &model, Ranker::Cosine)?;
        let gallery = protocol_gallery(&part, p, &params, &model)?;
        records.extend(result_records(p, &res, &gallery, cfg.eval.top_k));
        metrics.push(ProtocolMetrics::from_results(p.clone(), &res)?);
    }
    let labels: Vec<usize> = part.samples.iter().map(|s| s.semantic_id).collect();
    let report = MetricsReport {
        meta: report_meta(&path, &ds, split)?,
        protocols: metrics,
        geometry: Some(geometry_of(&emb, &labels)?),
    };
    let tag = split.as_str();
    fsio::write_atomic(
        &layout.report(&format!("{stem}_{tag}.json")),
        report.to_json()?.as_bytes(),
    )?;
    fsio::write_atomic(
        &layout.report(&format!("{stem}_{tag}.csv")),
        report.to_csv()?.as_bytes(),
    )?;
    fsio::write_atomic(
        &layout.report(&format!("{stem}_{tag}.results.jsonl")),
        records_to_jsonl(&records)?.as_bytes(),
    )?;
    Ok(report)
}

/// Within-language protocols for every language, then the mixed gallery.
pub fn evaluate(cfg: &RunConfig, layout: &Layout, split: Split) -> Result<MetricsReport> {
    let mut protocols: Vec<Protocol> = cfg
        .lexicon
        .languages
        .iter()
        .map(|l| Protocol::within(l))
        .collect();
    protocols.push(Protocol::Mixed);
    run_protocols(cfg, layout, split, &protocols, "eval")
}

/// Every ordered language pair. Neighbours in the configured order come
/// first, each followed by its reverse, cycling back to the first language;
/// for `[en, zh, es]` this gives en→zh, zh→en, zh→es, es→zh, es→en, en→es.
pub fn ordered_pairs<S: AsRef<str>>(langs: &[S]) -> Vec<Protocol> {
    let n = langs.len();
    let mut out: Vec<Protocol> = Vec::new();
    let mut push = |a: usize, b: usize| {
        let p = Protocol::cross(langs[a].as_ref(), langs[b].as_ref());
        if a != b && !out.contains(&p) {
            out.push(p);
        }
    };
    for i in 0..n {
        let j = (i + 1) % n;
        push(i, j);
        push(j, i);
    }
    for i in 0..n {
        for j in 0..n {
            push(i, j);
        }
    }
    out
}

pub fn cross_eval(cfg: &RunConfig, layout: &Layout, split: Split) -> Result<MetricsReport> {
    run_protocols(
        cfg,
        layout,
        split,
        &ordered_pairs(&cfg.lexicon.languages),
        "cross_eval",
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub meta: ReportMeta,
    /// Visual embeddings of the untrained model built from the same seed.
    pub init: Geometry,
    pub trained: Geometry,
    pub median_positive_cosine: f64,
    pub median_negative_cosine: f64,
}

pub fn characterize(cfg: &RunConfig, layout: &Layout, split: Split) -> Result<GeometryReport> {
    let ds = load_dataset(cfg, layout)?;
    let (path, model, params) = final_checkpoint(layout)?;
    let part = ds.split(split);
    let labels: Vec<usize> = part.samples.iter().map(|s| s.semantic_id).collect();
    let init = init_params(cfg.train.init_seed, &model)?;
    let init_emb = split_embeddings(&part, &init, &model)?;
    let emb = split_embeddings(&part, &params, &model)?;
    let (pos, neg) = pair_cosine_medians(&emb, &labels)?;
    let report = GeometryReport {
        meta: report_meta(&path, &ds, split)?,
        init: geometry_of(&init_emb, &labels)?,
        trained: geometry_of(&emb, &labels)?,
        median_positive_cosine: pos,
        median_negative_cosine: neg,
    };
    write_report(
        &layout.report(&format!("geometry_{}.json", split.as_str())),
        &report,
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub meta: ReportMeta,
    pub calibration_samples: usize,
    /// Bytes of the visual weight matrices at float32 and at int8.
    pub weight_payload_f32: u64,
    pub weight_payload_i8: u64,
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub float_acc1: f64,
    pub quant_acc1: f64,
    pub acc1_drop: f64,
    pub cost: CostReport,
}

/// Evenly spaced sample indices, deterministic in the split size.
fn spread(len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    (0..n).map(|i| i * len / n).collect()
}

fn mean_within(
    part: &Dataset,
    emb: &Tensor,
    params: &ModelParams,
    model: &ModelConfig,
) -> Result<f64> {
    let langs = split_languages(part);
    let mut sum = 0.0;
    for l in &langs {
        let p = Protocol::within(l);
        let res = eval_protocol_embedded(part, &p, emb, params, model, Ranker::Cosine)?;
        sum += ProtocolMetrics::from_results(p, &res)?.acc1;
    }
    Ok(sum / langs.len() as f64)
}

pub fn quantize(cfg: &RunConfig, layout: &Layout) -> Result<QuantReport> {
    let ds = load_dataset(cfg, layout)?;
    let (path, model, params) = final_checkpoint(layout)?;
    let calib_split = ds.split(cfg.quantize.calibration_split);
    let picks = spread(calib_split.len(), cfg.quantize.calibration_samples);
    let pooled = pool_images(picks.iter().map(|&i| &calib_split.samples[i].image), &model)?;
    let calibration = calibrate(&params, &pooled)?;
    let qm = quantize_model(&params, &model, &calibration)?;
    fsio::write_new_or_same(
        &layout.run_dir().join(QMODEL_FILE),
        &encode_quantized_model(&qm)?,
    )?;

    let split = cfg.eval.split;
    let part = ds.split(split);
    let float_emb = split_embeddings(&part, &params, &model)?;
    let quant_emb = quantized_encode_images(part.samples.iter().map(|s| &s.image), &qm)?;
    let cosines: Vec<f64> = (0..part.len())
        .map(|i| dot(float_emb.row(i), quant_emb.row(i)))
        .collect();
    let float_acc1 = mean_within(&part, &float_emb, &params, &model)?;
    let quant_acc1 = mean_within(&part, &quant_emb, &qm.text_params(), &model)?;
    let weights: u64 = qm.layers.iter().map(|l| l.weight.values.len() as u64).sum();
    let report = QuantReport {
        meta: report_meta(&path, &ds, split)?,
        calibration_samples: pooled.rows(),
        weight_payload_f32: 4 * [&params.w1, &params.w2, &params.w3]
            .iter()
            .map(|t| t.len() as u64)
            .sum::<u64>(),
        weight_payload_i8: weights,
        mean_cosine: cosines.iter().sum::<f64>() / cosines.len() as f64,
        min_cosine: cosines.iter().copied().fold(f64::INFINITY, f64::min),
        float_acc1,
        quant_acc1,
        acc1_drop: float_acc1 - quant_acc1,
        cost: cost_model(&model),
    };
    write_report(&layout.report("quantize.json"), &report)?;
    fsio::write_atomic(&layout.report("cost.csv"), report.cost.to_csv()?.as_bytes())?;
    Ok(report)
}

/// The seven non-empty objective combinations, single terms first.
pub const OBJECTIVES: [LossTerms; 7] = [
    LossTerms {
        v2t: true,
        t2v: false,
        inv: false,
    },
    LossTerms {
        v2t: false,
        t2v: true,
        inv: false,
    },
    LossTerms {
        v2t: false,
        t2v: false,
        inv: true,
    },
    LossTerms {
        v2t: true,
        t2v: true,
        inv: false,
    },
    LossTerms {
        v2t: true,
        t2v: false,
        inv: true,
    },
    LossTerms {
        v2t: false,
        t2v: true,
        inv: true,
    },
    LossTerms {
        v2t: true,
        t2v: true,
        inv: true,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub objective: String,
    pub terms: LossTerms,
    pub finetune: bool,
    /// Mean within-language Acc@1 on the evaluation split, one per seed.
    pub within_acc1: Vec<f64>,
    pub cross_acc1: Vec<f64>,
    pub mean_within_acc1: f64,
    pub mean_cross_acc1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: String,
    pub seeds: Vec<u64>,
    /// Acc@1 of a uniformly random ranking, `1 / C`.
    pub random_baseline: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, terms: LossTerms, finetune: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.terms == terms && r.finetune == finetune)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["objective", "ft", "within_acc1", "cross_acc1"])?;
        for r in &self.rows {
            w.write_record([
                r.objective.clone(),
                if r.finetune { "on" } else { "off" }.to_string(),
                format!("{:.6}", r.mean_within_acc1),
                format!("{:.6}", r.mean_cross_acc1),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Metric(format!("csv flush: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Trains every objective combination with and without the second stage,
/// averaging over the configured seeds. Nothing is checkpointed; the
/// stage-1 parameters of each run double as its no-finetune result.
pub fn ablation_table(cfg: &RunConfig, ds: &Dataset) -> Result<AblationTable> {
    cfg.validate()?;
    let split = cfg.eval.split;
    let part = ds.split(split);
    let model = cfg.train.model;
    let mut rows = Vec::with_capacity(2 * OBJECTIVES.len());
    for terms in OBJECTIVES {
        let mut scores = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
        for &seed in &cfg.ablation.seeds {
            let tc = TrainConfig {
                init_seed: seed,
                sampler: crate::training::SamplerConfig {
                    seed,
                    ..cfg.train.sampler
                },
                terms,
                finetune_enabled: true,
                ..cfg.train.clone()
            };
            let r = run_two_stage(&tc, ds, None, None)?;
            for (slot, p) in scores.iter_mut().zip([&r.pretrained, &r.params]) {
                slot.0.push(within_acc1(&part, p, &model)?);
                slot.1.push(cross_acc1(&part, p, &model)?);
            }
        }
        for (finetune, (within, cross)) in [false, true].into_iter().zip(scores) {
            rows.push(AblationRow {
                objective: terms.label(),
                terms,
                finetune,
                mean_within_acc1: mean(&within),
                mean_cross_acc1: mean(&cross),
                within_acc1: within,
                cross_acc1: cross,
            });
        }
    }
    Ok(AblationTable {
        split: split.as_str().to_string(),
        seeds: cfg.ablation.seeds.clone(),
        random_baseline: 1.0 / ds.lexicon.num_classes() as f64,
        rows,
    })
}

pub fn ablate(cfg: &RunConfig, layout: &Layout) -> Result<AblationTable> {
    let ds = load_dataset(cfg, layout)?;
    let table = ablation_table(cfg, &ds)?;
    write_report(&layout.report("ablation.json"), &table)?;
    fsio::write_atomic(&layout.report("ablation.csv"), table.to_csv()?.as_bytes())?;
    Ok(table)
}
