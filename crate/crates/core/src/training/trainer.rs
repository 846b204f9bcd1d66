use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{
    anchor_base, init_params, pool_images, save_checkpoint, ModelConfig, ModelParams, ParamNodes,
};
use crate::numcore::{AdamWConfig, AdamWState, Graph, Tensor};
use crate::objectives::{graph_loss, LossConfig, LossTerms};
use crate::seed;
use crate::synthgen::{Dataset, Split};
use crate::training::sampler::{make_batch, ClassIndex, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn checkpoint_name(self) -> &'static str {
        match self {
            Stage::Pretrain => "stage1.ckpt",
            Stage::Finetune => "stage2.ckpt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub split: Split,
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn pretrain() -> Self {
        StageConfig {
            stage: Stage::Pretrain,
            split: Split::Train,
            lr: 2e-2,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn finetune() -> Self {
        StageConfig {
            stage: Stage::Finetune,
            split: Split::Finetune,
            lr: 2e-3,
            ..Self::pretrain()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.epochs == 0 {
            return Err(Error::Config(format!(
                "{} stage needs lr > 0 and epochs >= 1 (lr {}, epochs {})",
                self.stage.as_str(),
                self.lr,
                self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub total: f64,
    pub itc: f64,
    pub inv: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
    pub tau: f64,
    /// Held-out Acc@1, when an evaluation hook was supplied.
    pub eval_acc1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSnapshot>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochSnapshot),
}

impl TrainHistory {
    pub fn extend(&mut self, other: TrainHistory) {
        self.steps.extend(other.steps);
        self.epochs.extend(other.epochs);
    }

    pub fn stage_steps(&self, stage: Stage) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |r| r.stage == stage)
    }

    /// One JSON object per line, steps and epoch snapshots in order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut epochs = self.epochs.iter().peekable();
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&serde_json::to_string(&LogLine::Step(s))?);
            out.push('\n');
            let last_of_epoch = self
                .steps
                .get(i + 1)
                .is_none_or(|n| n.epoch != s.epoch || n.stage != s.stage);
            if last_of_epoch {
                if let Some(e) = epochs.next_if(|e| e.stage == s.stage && e.epoch == s.epoch) {
                    out.push_str(&serde_json::to_string(&LogLine::Epoch(e))?);
                    out.push('\n');
                }
            }
        }
        for e in epochs {
            out.push_str(&serde_json::to_string(&LogLine::Epoch(e))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Optional per-epoch evaluation, returning a held-out Acc@1.
pub type EvalHook<'a> = &'a dyn Fn(&ModelParams) -> Result<f64>;

/// Everything a training stage needs besides the data.
#[derive(Clone, Copy, Debug)]
pub struct StageContext<'a> {
    pub model: &'a ModelConfig,
    pub sampler: &'a SamplerConfig,
    pub loss: &'a LossConfig,
    pub terms: LossTerms,
    /// Global step number of this stage's first step.
    pub first_step: usize,
}

/// Runs `epochs × ⌊|split| / N⌋` AdamW steps on the stage's split.
pub fn train_stage(
    mut params: ModelParams,
    dataset: &Dataset,
    stage: &StageConfig,
    ctx: StageContext<'_>,
    eval: Option<EvalHook<'_>>,
) -> Result<(ModelParams, TrainHistory)> {
    stage.validate()?;
    ctx.terms.validate()?;
    ctx.loss.validate()?;
    let split = dataset.split(stage.split);
    let samples = &split.samples;
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "{} split is empty",
            stage.split.as_str()
        )));
    }
    let index = ClassIndex::new(samples);
    let n = ctx
        .sampler
        .resolve_batch_size(dataset.lexicon.num_classes(), samples.len());
    let steps_per_epoch = samples.len() / n.max(1);
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {n} exceeds the {} split ({} samples)",
            stage.split.as_str(),
            samples.len()
        )));
    }

    let pooled = pool_images(samples.iter().map(|s| &s.image), ctx.model)?;
    let pooled_dim = pooled.cols();
    let mut anchors: HashMap<(usize, &str), Vec<f64>> = HashMap::new();
    for s in samples {
        if let std::collections::hash_map::Entry::Vacant(e) =
            anchors.entry((s.semantic_id, s.language.as_str()))
        {
            e.insert(anchor_base(
                s.semantic_id,
                &s.language,
                &dataset.lexicon,
                &ctx.model.anchor,
            )?);
        }
    }

    let stage_tag = match stage.stage {
        Stage::Pretrain => 1,
        Stage::Finetune => 2,
    };
    let mut rng = seed::rng(&[ctx.sampler.seed, stage_tag]);
    let opt = stage.optimizer();
    let mut state = AdamWState::new(params.tensors());
    let decay = ModelParams::decay_mask();
    let mut history = TrainHistory::default();
    let mut step = ctx.first_step;

    for epoch in 0..stage.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = make_batch(&index, ctx.sampler, &mut rng)?;
            let mut x = Vec::with_capacity(batch.len() * pooled_dim);
            let mut a = Vec::with_capacity(batch.len() * ctx.model.anchor.base_dim);
            let mut labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let s = &samples[i];
                x.extend_from_slice(pooled.row(i));
                a.extend_from_slice(&anchors[&(s.semantic_id, s.language.as_str())]);
                labels.push(s.semantic_id);
            }
            let wrap = |source: Error| Error::Training {
                step,
                source: Box::new(source),
            };

            let mut g = Graph::new();
            let nodes = ParamNodes::register(&mut g, &params);
            let xn = g.leaf(Tensor::new(vec![batch.len(), pooled_dim], x)?);
            let an = g.leaf(Tensor::new(
                vec![batch.len(), ctx.model.anchor.base_dim],
                a,
            )?);
            let v = nodes.visual(&mut g, xn).map_err(wrap)?;
            let z = nodes.text(&mut g, an).map_err(wrap)?;
            let loss = graph_loss(
                &mut g,
                v,
                z,
                nodes.log_temperature(),
                &labels,
                ctx.loss,
                ctx.terms,
            )
            .map_err(wrap)?;
            g.backward(loss.total).map_err(wrap)?;

            let total = g.value(loss.total).item();
            let (v2t, t2v) = (g.value(loss.v2t).item(), g.value(loss.t2v).item());
            let inv = g.value(loss.inv).item();
            if !total.is_finite() {
                return Err(wrap(Error::Contract(format!("non-finite loss {total}"))));
            }
            let grads = nodes.grads(&g);
            let mut tensors = params.tensors_mut();
            state.step(&mut tensors, &grads, &decay, &opt)?;
            params.clamp_temperature();

            history.steps.push(StepRecord {
                step,
                stage: stage.stage,
                epoch,
                total,
                itc: crate::objectives::combine_itc(v2t, t2v, ctx.terms),
                inv,
                tau: params.temperature(),
            });
            epoch_loss += total;
            step += 1;
        }
        let eval_acc1 = eval.map(|f| f(&params)).transpose()?;
        history.epochs.push(EpochSnapshot {
            stage: stage.stage,
            epoch,
            mean_loss: epoch_loss / steps_per_epoch as f64,
            tau: params.temperature(),
            eval_acc1,
        });
    }
    Ok((params, history))
}

/// Full two-stage run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub terms: LossTerms,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    /// Runs the second stage on the distortion-heavy split.
    pub finetune_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            init_seed: 0,
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            terms: LossTerms::ALL,
            pretrain: StageConfig::pretrain(),
            finetune: StageConfig::finetune(),
            finetune_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.terms.validate()?;
        self.pretrain.validate()?;
        if self.finetune_enabled {
            self.finetune.validate()?;
        }
        Ok(())
    }

    pub fn stages(&self) -> Vec<&StageConfig> {
        let mut v = vec![&self.pretrain];
        if self.finetune_enabled {
            v.push(&self.finetune);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageResult {
    pub params: ModelParams,
    /// Parameters after the first stage.
    pub pretrained: ModelParams,
    pub history: TrainHistory,
    pub checkpoints: Vec<PathBuf>,
}

pub const HISTORY_FILE: &str = "history.log";

/// Trains stage 1, then stage 2 when enabled. With a run directory, a
/// checkpoint is written after each stage together with `history.log`;
/// existing checkpoints are never overwritten.
pub fn run_two_stage(
    cfg: &TrainConfig,
    dataset: &Dataset,
    run_dir: Option<&Path>,
    eval: Option<EvalHook<'_>>,
) -> Result<TwoStageResult> {
    cfg.validate()?;
    if dataset.canvas != cfg.model.canvas {
        return Err(Error::Config(format!(
            "dataset canvas {:?} differs from model canvas {:?}",
            dataset.canvas, cfg.model.canvas
        )));
    }
    if let Some(dir) = run_dir {
        for stage in cfg.stages() {
            let p = dir.join(stage.stage.checkpoint_name());
            if p.exists() {
                return Err(Error::Config(format!(
                    "{} already exists; refusing to overwrite",
                    p.display()
                )));
            }
        }
    }
    let mut params = init_params(cfg.init_seed, &cfg.model)?;
    let mut history = TrainHistory::default();
    let mut checkpoints = Vec::new();
    let mut pretrained = None;
    for stage in cfg.stages() {
        let ctx = StageContext {
            model: &cfg.model,
            sampler: &cfg.sampler,
            loss: &cfg.loss,
            terms: cfg.terms,
            first_step: history.steps.len(),
        };
        let (p, h) = train_stage(params, dataset, stage, ctx, eval)?;
        params = p;
        history.extend(h);
        if pretrained.is_none() {
            pretrained = Some(params.clone());
        }
        if let Some(dir) = run_dir {
            let path = dir.join(stage.stage.checkpoint_name());
            save_checkpoint(&path, &params, &cfg.model, stage.stage.as_str())?;
            fsio::write_atomic(&dir.join(HISTORY_FILE), history.to_jsonl()?.as_bytes())?;
            checkpoints.push(path);
        }
    }
    Ok(TwoStageResult {
        pretrained: pretrained.expect("at least one stage"),
        params,
        history,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TAU_MAX, TAU_MIN};
    use crate::synthgen::{synthesize, DatasetConfig, Lexicon};

    fn desk_dataset() -> Dataset {
        let langs: Vec<String> = ["en", "zh", "es"].iter().map(|s| s.to_string()).collect();
        let lex = Lexicon::build(20, &langs, 7).unwrap();
        synthesize(&lex, &DatasetConfig::default()).unwrap()
    }

    fn one_epoch() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.pretrain.epochs = 1;
        cfg.finetune.epochs = 1;
        cfg
    }

    fn ctx(cfg: &TrainConfig) -> StageContext<'_> {
        StageContext {
            model: &cfg.model,
            sampler: &cfg.sampler,
            loss: &cfg.loss,
            terms: cfg.terms,
            first_step: 0,
        }
    }

    #[test]
    fn one_epoch_step_count_and_initial_loss() {
        let ds = desk_dataset();
        assert_eq!(ds.split(Split::Train).len(), 600);
        let mut cfg = one_epoch();
        // logits stay within [-1, 1], so the softmax starts near uniform
        cfg.model.tau_init = 1.0;
        let p = init_params(0, &cfg.model).unwrap();
        let (_, h) = train_stage(p, &ds, &cfg.pretrain, ctx(&cfg), None).unwrap();
        assert_eq!(h.steps.len(), 15);
        assert!(h.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        let first = &h.steps[0];
        let expected = 40f64.ln() + cfg.loss.lambda * first.inv;
        assert!(
            (first.total - expected).abs() <= 0.2 * expected,
            "{} vs {expected}",
            first.total
        );
        assert_eq!(h.epochs.len(), 1);
    }

    #[test]
    fn training_is_deterministic_and_keeps_tau_in_range() {
        let ds = desk_dataset();
        let cfg = one_epoch();
        let a = run_two_stage(&cfg, &ds, None, None).unwrap();
        let b = run_two_stage(&cfg, &ds, None, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        for r in &a.history.steps {
            assert!(r.tau >= TAU_MIN * (1.0 - 1e-12) && r.tau <= TAU_MAX * (1.0 + 1e-12));
            assert!(r.total.is_finite());
        }
        assert_eq!(a.history.stage_steps(Stage::Finetune).count(), 30);
    }

    #[test]
    fn all_terms_disabled_is_a_config_error() {
        let ds = desk_dataset();
        let mut cfg = one_epoch();
        cfg.terms = LossTerms {
            v2t: false,
            t2v: false,
            inv: false,
        };
        assert!(matches!(
            run_two_stage(&cfg, &ds, None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_run_writes_two_checkpoints_and_refuses_overwrite() {
        let ds = desk_dataset();
        let cfg = one_epoch();
        let dir = tempfile::tempdir().unwrap();
        let r = run_two_stage(&cfg, &ds, Some(dir.path()), None).unwrap();
        assert_eq!(r.checkpoints.len(), 2);
        let (_, loaded) = crate::model::load_checkpoint(&r.checkpoints[1]).unwrap();
        assert_eq!(loaded, r.params);
        assert!(dir.path().join(HISTORY_FILE).exists());
        assert!(run_two_stage(&cfg, &ds, Some(dir.path()), None).is_err());
    }

    #[test]
    fn v2t_only_without_finetune_runs_one_stage() {
        let ds = desk_dataset();
        let mut cfg = one_epoch();
        cfg.finetune_enabled = false;
        cfg.terms = LossTerms {
            v2t: true,
            t2v: false,
            inv: false,
        };
        let r = run_two_stage(&cfg, &ds, None, None).unwrap();
        assert_eq!(r.params, r.pretrained);
        assert!(r.history.steps.iter().all(|s| s.stage == Stage::Pretrain));
        assert!(r
            .history
            .steps
            .iter()
            .all(|s| (s.total - s.itc).abs() < 1e-12));
    }

    #[test]
    fn anchors_are_untouched_by_training() {
        let ds = desk_dataset();
        let cfg = one_epoch();
        let before = anchor_base(3, "zh", &ds.lexicon, &cfg.model.anchor).unwrap();
        run_two_stage(&cfg, &ds, None, None).unwrap();
        assert_eq!(
            before,
            anchor_base(3, "zh", &ds.lexicon, &cfg.model.anchor).unwrap()
        );
    }
}
