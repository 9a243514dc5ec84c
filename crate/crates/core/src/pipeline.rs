//! End-to-end runs shared by the command line and the test suites.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    chain_generations, synth_generate, synth_generate_generations, PairedDataset, SyntheticData,
};
use crate::error::{Result, XbtError};
use crate::eval::{
    evaluate, Evaluation, ProjectedSplit, RetrievalReport, CASE_CROSS_I2T, CASE_CROSS_T2I,
};
use crate::model::XbtModel;
use crate::optim::FreezingPolicy;
use crate::training::{
    equal_splits, init_adapters, run_continual, run_direct, run_text_pretrain, run_xbt,
    StageResult, TrainLog,
};

/// Results of pretraining plus cross-modal fine-tuning, and optionally the
/// direct baseline under the same budget.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub model: XbtModel<f32>,
    pub pretrain_log: TrainLog,
    pub xbt_log: TrainLog,
    pub report: RetrievalReport,
    pub baseline: Option<BaselineOutput>,
}

#[derive(Clone, Debug)]
pub struct BaselineOutput {
    pub policy: FreezingPolicy,
    pub model: XbtModel<f32>,
    pub log: TrainLog,
    pub report: RetrievalReport,
}

pub fn evaluate_model(
    cfg: &RunConfig,
    data: &SyntheticData,
    model: &XbtModel<f32>,
) -> Result<Evaluation> {
    let new = &data.new_gen().eval;
    evaluate(
        &data.old().eval,
        new,
        &ProjectedSplit::from_model(model, new)?,
        &cfg.eval,
    )
}

/// Generates data from `cfg` and runs the full pipeline.
pub fn run_pipeline(cfg: &RunConfig, baseline: Option<FreezingPolicy>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let data = synth_generate(&cfg.synthetic)?;
    run_pipeline_on(cfg, &data, baseline)
}

pub fn run_pipeline_on(
    cfg: &RunConfig,
    data: &SyntheticData,
    baseline: Option<FreezingPolicy>,
) -> Result<PipelineOutput> {
    let (old, new) = (data.old(), data.new_gen());
    let train = &cfg.train;
    let (phi, _, pretrain_log) = run_text_pretrain(train, &new.pretrain_text, &old.pretrain_text)?;
    let adapters = init_adapters(train, new.train.dim())?;
    let xbt_cfg = crate::training::TrainConfig {
        policy: FreezingPolicy::Xbt,
        ..train.clone()
    };
    let (model, _, xbt_log) = run_xbt(&xbt_cfg, phi, &new.train, adapters)?;
    let report = RetrievalReport::new(cfg.effective_json(), evaluate_model(cfg, data, &model)?);
    let baseline = match baseline {
        None => None,
        Some(policy) => {
            let (bmodel, _, log) = run_direct(train, &new.train, &old.train, policy)?;
            let report =
                RetrievalReport::new(cfg.effective_json(), evaluate_model(cfg, data, &bmodel)?);
            Some(BaselineOutput {
                policy,
                model: bmodel,
                log,
                report,
            })
        }
    };
    Ok(PipelineOutput {
        model,
        pretrain_log,
        xbt_log,
        report,
        baseline,
    })
}

/// Cross-modal R@1 per direction: (text→image, image→text).
pub fn cross_r1(ev: &Evaluation) -> (f64, f64) {
    (
        ev.recall(CASE_CROSS_T2I, 1).unwrap_or(f64::NAN),
        ev.recall(CASE_CROSS_I2T, 1).unwrap_or(f64::NAN),
    )
}

/// Per-stage evaluation of a continual chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinualStageReport {
    pub stage: usize,
    pub pretrain_checksum: String,
    pub xbt_checksum: String,
    /// Stage queries against generation 0's gallery.
    pub report: RetrievalReport,
    /// From stage 2 on: stage queries against the gallery indexed by the
    /// previous stage's model, whose own recall there is the baseline.
    pub previous_stage: Option<RetrievalReport>,
}

/// Trains a chain over `generations` synthetic generations (≥ 2) with equal
/// disjoint data parts per stage.
pub fn run_continual_pipeline(
    cfg: &RunConfig,
    generations: usize,
) -> Result<(Vec<StageResult>, Vec<ContinualStageReport>)> {
    cfg.validate()?;
    if generations < 2 {
        return Err(XbtError::Config(format!(
            "a continual chain needs at least 2 generations, got {generations}"
        )));
    }
    let gens = chain_generations(&cfg.synthetic, generations);
    let data = synth_generate_generations(&cfg.synthetic, &gens)?;
    let splits = equal_splits(
        cfg.synthetic.n_pretrain_texts,
        cfg.synthetic.n_pairs,
        generations - 1,
    );
    let results = run_continual(&cfg.train, &data.generations, &splits)?;
    let g0 = &data.generations[0].eval;
    let mut reports = Vec::with_capacity(results.len());
    let mut previous_gallery: Option<PairedDataset> = None;
    for r in &results {
        let new = &data.generations[r.stage].eval;
        let projected = ProjectedSplit::from_model(&r.model, new)?;
        let ev = evaluate(g0, new, &projected, &cfg.eval)?;
        let previous_stage = match &previous_gallery {
            Some(prev) => Some(RetrievalReport::new(
                cfg.effective_json(),
                evaluate(prev, new, &projected, &cfg.eval)?,
            )),
            None => None,
        };
        reports.push(ContinualStageReport {
            stage: r.stage,
            pretrain_checksum: r.pretrain_log.checksum.clone(),
            xbt_checksum: r.xbt_log.checksum.clone(),
            report: RetrievalReport::new(cfg.effective_json(), ev),
            previous_stage,
        });
        previous_gallery = Some(PairedDataset::new(
            projected.image,
            projected.text,
            new.pair_of.clone(),
        )?);
    }
    Ok((results, reports))
}

/// A sweepable setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKey {
    Sigma,
    NPretrainTexts,
    NPairs,
}

impl SweepKey {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepKey::Sigma => "sigma",
            SweepKey::NPretrainTexts => "n_pretrain_texts",
            SweepKey::NPairs => "n_pairs",
        }
    }

    fn apply(&self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(XbtError::Config(format!(
                    "{} needs a non-negative integer, got {value}",
                    self.as_str()
                )))
            }
        };
        match self {
            SweepKey::Sigma => c.train.sigma = value,
            SweepKey::NPretrainTexts => c.synthetic.n_pretrain_texts = count()?,
            SweepKey::NPairs => c.synthetic.n_pairs = count()?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `key=v1,v2,...`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub key: SweepKey,
    pub values: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = XbtError;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| XbtError::Config(format!("sweep `{s}` must look like key=v1,v2")))?;
        let key = match key.trim() {
            "sigma" => SweepKey::Sigma,
            "n_pretrain_texts" => SweepKey::NPretrainTexts,
            "n_pairs" => SweepKey::NPairs,
            other => {
                return Err(XbtError::Config(format!(
                    "unknown sweep key `{other}` (expected sigma, n_pretrain_texts or n_pairs)"
                )))
            }
        };
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| XbtError::Config(format!("bad sweep value `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sweep { key, values })
    }
}

/// Parses `a..b` (inclusive) or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || XbtError::Config(format!("bad seed list `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| bad()))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub value: f64,
    pub seed: u64,
    pub report: RetrievalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub mean_cross_r1_t2i: f64,
    pub mean_cross_r1_i2t: f64,
    pub seeds: usize,
}

/// One pipeline run per (value, seed), plus mean cross R@1 per value.
pub fn ablate(
    cfg: &RunConfig,
    sweep: &Sweep,
    seeds: &[u64],
) -> Result<(Vec<AblationRun>, Vec<AblationRow>)> {
    if sweep.values.is_empty() || seeds.is_empty() {
        return Err(XbtError::Config(
            "sweep needs at least one value and one seed".into(),
        ));
    }
    let mut runs = Vec::new();
    let mut sums: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for (vi, &value) in sweep.values.iter().enumerate() {
        for &seed in seeds {
            let c = sweep.key.apply(&cfg.with_seed(seed), value)?;
            let out = run_pipeline(&c, None)?;
            let (t, i) = cross_r1(&out.report.evaluation);
            let e = sums.entry(vi).or_default();
            e.0 += t;
            e.1 += i;
            runs.push(AblationRun {
                value,
                seed,
                report: out.report,
            });
        }
    }
    let n = seeds.len() as f64;
    let rows = sums
        .into_iter()
        .map(|(vi, (t, i))| AblationRow {
            value: sweep.values[vi],
            mean_cross_r1_t2i: t / n,
            mean_cross_r1_i2t: i / n,
            seeds: seeds.len(),
        })
        .collect();
    Ok((runs, rows))
}
