//! Training loops: text-only pretraining of the projection, cross-modal
//! fine-tuning, the direct baseline and continual chaining.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{lora_init, LoraAdapter};
use crate::data::{batch_iter, GenerationData, PairedDataset};
use crate::error::{Result, XbtError};
use crate::layers::{phi_init, ProjectionParams};
use crate::losses::{direct_loss, pretrain_loss, xbt_loss, NoiseSpec, DEFAULT_LOG_SCALE};
use crate::model::{XbtGrads, XbtModel};
use crate::optim::{AdamW, FreezingPolicy};
use crate::params::NamedParams;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub alpha: f64,
    pub rank: usize,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            alpha: 16.0,
            rank: 16,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub log_scale_pre: f64,
    pub log_scale_x: f64,
    pub log_scale_n: f64,
    /// Std of the Gaussian noise added to new text embeddings during pretraining.
    pub sigma: f64,
    /// Reference large-scale setting: 8192. Desk-scale runs take ~200× fewer
    /// steps, so the default trades batch size for step count.
    pub batch_pretrain: usize,
    /// Reference large-scale setting: 1024.
    pub batch_xbt: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Policy for `run_xbt` (must be `xbt`) and `run_direct`.
    pub policy: FreezingPolicy,
    pub lora: LoraConfig,
    pub clip_grad: Option<f64>,
    /// Soft-prompt settings, kept for provenance; embedding-level training has
    /// no token inputs to prepend prompts to.
    pub prompt_count: usize,
    pub prompt_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            // Reference large-scale setting: 1e-4 over thousands of steps.
            lr: 5e-4,
            weight_decay: 0.01,
            log_scale_pre: DEFAULT_LOG_SCALE,
            log_scale_x: DEFAULT_LOG_SCALE,
            log_scale_n: DEFAULT_LOG_SCALE,
            sigma: 0.1,
            batch_pretrain: 256,
            batch_xbt: 256,
            epochs: 1,
            seed: 0,
            policy: FreezingPolicy::Xbt,
            lora: LoraConfig::default(),
            clip_grad: None,
            prompt_count: 10,
            prompt_lr: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XbtError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_pretrain == 0 || self.batch_xbt == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return bad(format!("clip_grad must be positive, got {c}"));
            }
        }
        if self.lora.rank == 0 || !(0.0..1.0).contains(&self.lora.dropout) {
            return bad(format!("invalid lora settings {:?}", self.lora));
        }
        for s in [self.log_scale_pre, self.log_scale_x, self.log_scale_n] {
            if !s.is_finite() {
                return bad(format!("log scale {s} is not finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
    /// SHA-256 of the trained parameters.
    pub checksum: String,
}

impl TrainLog {
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Mean loss over the steps of the last epoch.
    pub fn final_epoch_mean(&self) -> Option<f64> {
        let last = self.steps.last()?.epoch;
        let tail: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.epoch == last)
            .map(|s| s.loss)
            .collect();
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// SplitMix64 finalizer; derives independent seeds for batching, noise and
/// dropout from the run seed.
pub fn derive_seed(seed: u64, tag: u64, counter: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(counter.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_BATCH: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_PHI: u64 = 4;
const TAG_ADAPTER_IMAGE: u64 = 5;
const TAG_ADAPTER_TEXT: u64 = 6;

fn check_loss(stage: &str, step: usize, loss: f32) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss as f64)
    } else {
        Err(XbtError::Numeric(format!(
            "{stage}: non-finite loss {loss} at step {step}"
        )))
    }
}

/// Projection initialization used by every stage that starts from scratch.
pub fn init_phi(cfg: &TrainConfig, d_new: usize, d_old: usize) -> ProjectionParams<f32> {
    phi_init(d_new, d_old, derive_seed(cfg.seed, TAG_PHI, 0))
}

/// Fresh identity adapters for the image and text sides.
pub fn init_adapters(
    cfg: &TrainConfig,
    dim: usize,
) -> Result<(LoraAdapter<f32>, LoraAdapter<f32>)> {
    let rank = cfg.lora.rank.min(dim);
    let make = |tag| {
        lora_init(
            dim,
            rank,
            cfg.lora.alpha,
            cfg.lora.dropout,
            derive_seed(cfg.seed, tag, 0),
        )
    };
    Ok((make(TAG_ADAPTER_IMAGE)?, make(TAG_ADAPTER_TEXT)?))
}

/// Text-only pretraining: all projection parameters train against the old
/// model's embeddings of the same texts.
pub fn run_text_pretrain(
    cfg: &TrainConfig,
    w_new: &Matrix<f32>,
    w_old: &Matrix<f32>,
) -> Result<(ProjectionParams<f32>, AdamW<f32>, TrainLog)> {
    cfg.validate()?;
    if w_new.rows() != w_old.rows() {
        return Err(XbtError::shape(
            "run_text_pretrain",
            format!("{} new texts vs {} old texts", w_new.rows(), w_old.rows()),
        ));
    }
    let start = Instant::now();
    let mut phi = init_phi(cfg, w_new.cols(), w_old.cols());
    let mut opt = AdamW::new(
        &phi,
        FreezingPolicy::FullTune,
        cfg.lr,
        cfg.weight_decay,
        cfg.clip_grad,
    );
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = batch_iter(
            w_new.rows(),
            cfg.batch_pretrain,
            derive_seed(cfg.seed, TAG_BATCH, epoch as u64),
            true,
        )?;
        for batch in batches {
            let step = steps.len();
            let noise = NoiseSpec {
                sigma: cfg.sigma,
                seed: derive_seed(cfg.seed, TAG_NOISE, step as u64),
            };
            let out = pretrain_loss(
                &phi,
                &w_new.select_rows(&batch),
                &w_old.select_rows(&batch),
                &noise,
                cfg.log_scale_pre,
            )?;
            let loss = check_loss("pretrain", step, out.loss)?;
            opt.step(&mut phi, &out.phi_grads)?;
            steps.push(StepRecord { epoch, step, loss });
        }
    }
    let log = TrainLog {
        stage: "pretrain".into(),
        steps,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checksum: phi.checksum(),
    };
    Ok((phi, opt, log))
}

/// Cross-modal fine-tuning on new-generation pairs only. The projection's
/// LayerNorm affines and both adapters train; everything else is frozen.
pub fn run_xbt(
    cfg: &TrainConfig,
    phi_pre: ProjectionParams<f32>,
    pairs: &PairedDataset,
    adapters: (LoraAdapter<f32>, LoraAdapter<f32>),
) -> Result<(XbtModel<f32>, AdamW<f32>, TrainLog)> {
    cfg.validate()?;
    if cfg.policy != FreezingPolicy::Xbt {
        return Err(XbtError::Argument(format!(
            "cross-modal fine-tuning requires policy `xbt`, got `{}`; baselines go through run_direct",
            cfg.policy
        )));
    }
    let (image_adapter, text_adapter) = adapters;
    let model = XbtModel {
        phi: phi_pre,
        image_adapter,
        text_adapter,
    };
    train_pairs(cfg, model, FreezingPolicy::Xbt, "xbt", pairs, None)
}

/// Direct baseline: a freshly initialized projection trained so that projected
/// new embeddings contrast against the other modality's old embeddings.
pub fn run_direct(
    cfg: &TrainConfig,
    new: &PairedDataset,
    old: &PairedDataset,
    policy: FreezingPolicy,
) -> Result<(XbtModel<f32>, AdamW<f32>, TrainLog)> {
    cfg.validate()?;
    if policy == FreezingPolicy::Xbt {
        return Err(XbtError::Argument(
            "direct baseline policy must be one of full_tune, lora_only, base".into(),
        ));
    }
    if new.pair_of != old.pair_of {
        return Err(XbtError::Argument(
            "new and old training pairs are not aligned".into(),
        ));
    }
    let (image_adapter, text_adapter) = init_adapters(cfg, new.dim())?;
    let model = XbtModel {
        phi: init_phi(cfg, new.dim(), old.dim()),
        image_adapter,
        text_adapter,
    };
    train_pairs(cfg, model, policy, "direct", new, Some(old))
}

fn train_pairs(
    cfg: &TrainConfig,
    mut model: XbtModel<f32>,
    policy: FreezingPolicy,
    stage: &str,
    new: &PairedDataset,
    old: Option<&PairedDataset>,
) -> Result<(XbtModel<f32>, AdamW<f32>, TrainLog)> {
    if new.dim() != model.phi.d_new() {
        return Err(XbtError::shape(
            "train_pairs",
            format!(
                "data dim {} vs projection input {}",
                new.dim(),
                model.phi.d_new()
            ),
        ));
    }
    let start = Instant::now();
    let mut opt = AdamW::new(&model, policy, cfg.lr, cfg.weight_decay, cfg.clip_grad);
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = batch_iter(
            new.n_captions(),
            cfg.batch_xbt,
            derive_seed(cfg.seed, TAG_BATCH, epoch as u64),
            true,
        )?;
        for batch in batches {
            let step = steps.len();
            let (v_new, w_new) = new.batch(&batch);
            let pass = model.adapter_forward(
                &v_new,
                &w_new,
                Some(derive_seed(cfg.seed, TAG_DROPOUT, step as u64)),
            )?;
            let out = match old {
                None => xbt_loss(&model.phi, &pass.image, &pass.text, cfg.log_scale_x)?,
                Some(old) => {
                    let (v_old, w_old) = old.batch(&batch);
                    direct_loss(
                        &model.phi,
                        &pass.image,
                        &pass.text,
                        &v_old,
                        &w_old,
                        cfg.log_scale_n,
                    )?
                }
            };
            let loss = check_loss(stage, step, out.loss)?;
            let (image_adapter, text_adapter) =
                model.adapter_backward(&pass, &out.grad_v_new, &out.grad_w_new)?;
            let grads = XbtGrads {
                phi: out.phi_grads,
                image_adapter,
                text_adapter,
            };
            opt.step(&mut model, &grads)?;
            steps.push(StepRecord { epoch, step, loss });
        }
    }
    let log = TrainLog {
        stage: stage.into(),
        steps,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checksum: model.checksum(),
    };
    Ok((model, opt, log))
}

/// Rows of the pretraining and paired-training splits one continual stage uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSplit {
    pub pretrain: Range<usize>,
    pub train: Range<usize>,
}

/// Splits both training sets into `stages` equal, disjoint, contiguous parts.
pub fn equal_splits(n_pretrain: usize, n_train: usize, stages: usize) -> Vec<StageSplit> {
    let part = |n: usize, k: usize| (n * k / stages)..(n * (k + 1) / stages);
    (0..stages)
        .map(|k| StageSplit {
            pretrain: part(n_pretrain, k),
            train: part(n_train, k),
        })
        .collect()
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    !a.is_empty() && !b.is_empty() && a.start < b.end && b.start < a.end
}

/// Output of one continual stage.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: usize,
    pub model: XbtModel<f32>,
    pub pretrain_log: TrainLog,
    pub xbt_log: TrainLog,
    pub optimizer: AdamW<f32>,
}

/// Chains pretraining and fine-tuning over successive generations. Stage `k`
/// (1-based) aligns generation `k` to generation `k−1` as seen through stage
/// `k−1`'s model, so every stage's output lives in generation 0's space.
/// Adapters are re-initialized per stage, and stage `k` uses seed `seed + k − 1`.
pub fn run_continual(
    cfg: &TrainConfig,
    generations: &[GenerationData],
    splits: &[StageSplit],
) -> Result<Vec<StageResult>> {
    cfg.validate()?;
    if generations.len() < 2 {
        return Err(XbtError::Argument(
            "a continual chain needs at least two generations".into(),
        ));
    }
    if splits.len() != generations.len() - 1 {
        return Err(XbtError::Argument(format!(
            "{} splits for {} stages",
            splits.len(),
            generations.len() - 1
        )));
    }
    for (i, a) in splits.iter().enumerate() {
        for b in &splits[i + 1..] {
            if overlaps(&a.pretrain, &b.pretrain) || overlaps(&a.train, &b.train) {
                return Err(XbtError::Argument(format!(
                    "continual stages share data: {a:?} overlaps {b:?}"
                )));
            }
        }
    }
    let mut results: Vec<StageResult> = Vec::with_capacity(splits.len());
    for (k, split) in splits.iter().enumerate() {
        let (prev, cur) = (&generations[k], &generations[k + 1]);
        let n_pre = cur.pretrain_text.rows();
        let n_train = cur.train.n_captions();
        if split.pretrain.end > n_pre || split.train.end > n_train {
            return Err(XbtError::Argument(format!(
                "stage {} split {split:?} exceeds data ({n_pre} texts, {n_train} pairs)",
                k + 1
            )));
        }
        let stage_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            policy: FreezingPolicy::Xbt,
            ..cfg.clone()
        };
        let rows: Vec<usize> = split.pretrain.clone().collect();
        let w_new = cur.pretrain_text.select_rows(&rows);
        let prev_text = prev.pretrain_text.select_rows(&rows);
        let target = match results.last() {
            None => prev_text,
            Some(r) => r.model.project_texts(&prev_text)?,
        };
        let (phi, _, pretrain_log) = run_text_pretrain(&stage_cfg, &w_new, &target)?;
        let train_images: Vec<usize> = split.train.clone().collect();
        let pairs = cur.train.subset_images(&train_images);
        let adapters = init_adapters(&stage_cfg, cur.train.dim())?;
        let (model, optimizer, xbt_log) = run_xbt(&stage_cfg, phi, &pairs, adapters)?;
        results.push(StageResult {
            stage: k + 1,
            model,
            pretrain_log,
            xbt_log,
            optimizer,
        });
    }
    Ok(results)
}
