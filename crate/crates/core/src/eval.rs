//! Cross-modal retrieval metrics and backward-compatibility verdicts.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{captions_of, validate_pairing, PairedDataset};
use crate::error::{Result, XbtError};
use crate::model::XbtModel;
use crate::tensor::{dot, matmul_nt, norm, Matrix};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];
pub const DEFAULT_STRICT_PAIR_CAP: usize = 1_000_000;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Caption queries against an image gallery; one relevant image each.
    TextToImage,
    /// Image queries against a caption gallery; any paired caption is a hit.
    ImageToText,
}

/// A query set, a gallery and the caption→image pairing that defines relevance.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalCase<'a> {
    pub name: &'a str,
    pub direction: Direction,
    pub query: &'a Matrix<f32>,
    pub gallery: &'a Matrix<f32>,
    pub pair_of: &'a [usize],
}

/// Percent recall keyed by K.
pub type RecallMap = BTreeMap<usize, f64>;

impl RetrievalCase<'_> {
    fn relevance(&self) -> Result<Vec<Vec<usize>>> {
        let (n_captions, n_images) = match self.direction {
            Direction::TextToImage => (self.query.rows(), self.gallery.rows()),
            Direction::ImageToText => (self.gallery.rows(), self.query.rows()),
        };
        validate_pairing(self.pair_of, n_captions, n_images)?;
        Ok(match self.direction {
            Direction::TextToImage => self.pair_of.iter().map(|&i| vec![i]).collect(),
            Direction::ImageToText => captions_of(self.pair_of, n_images),
        })
    }
}

/// Position of `target` in the ranking of `scores` (0 = best), under the same
/// order as [`crate::tensor::top_k`]: higher score first, lower index on ties.
fn rank_of(scores: &[f32], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, s)| match s.total_cmp(&t) {
            Ordering::Greater => true,
            Ordering::Equal => j < target,
            Ordering::Less => false,
        })
        .count()
}

fn check_ks(ks: &[usize], gallery: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(XbtError::Argument("K list is empty".into()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(XbtError::Argument(format!(
            "K list {ks:?} must be strictly ascending"
        )));
    }
    if ks[0] == 0 || ks[ks.len() - 1] > gallery {
        return Err(XbtError::Argument(format!(
            "K list {ks:?} must lie in 1..={gallery}"
        )));
    }
    Ok(())
}

pub fn recall_at_k(case: &RetrievalCase<'_>, ks: &[usize]) -> Result<RecallMap> {
    if case.query.cols() != case.gallery.cols() {
        return Err(XbtError::shape(
            "recall_at_k",
            format!(
                "query dim {} != gallery dim {}",
                case.query.cols(),
                case.gallery.cols()
            ),
        ));
    }
    check_ks(ks, case.gallery.rows())?;
    let relevance = case.relevance()?;
    let scores = matmul_nt(case.query, case.gallery)?;
    let mut hits = vec![0usize; ks.len()];
    for (q, relevant) in relevance.iter().enumerate() {
        let row = scores.row(q);
        let Some(best) = relevant.iter().map(|&r| rank_of(row, r)).min() else {
            continue;
        };
        for (h, &k) in hits.iter_mut().zip(ks) {
            if best < k {
                *h += 1;
            }
        }
    }
    let n = relevance.len().max(1) as f64;
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, 100.0 * h as f64 / n))
        .collect())
}

/// Fraction of caption/image pairs satisfying each per-pair distance
/// inequality, with cosine distance `d = 1 − cos`:
///
/// ```text
/// text_paired     d(w̄_new,i, v_old,j) ≤ d(w_old,i, v_old,j)   i paired with j
/// text_unpaired   d(w̄_new,i, v_old,j) ≥ d(w_old,i, v_old,j)   i not paired with j
/// image_paired    d(v̄_new,i, w_old,j) ≤ d(v_old,i, w_old,j)
/// image_unpaired  d(v̄_new,i, w_old,j) ≥ d(v_old,i, w_old,j)
/// ```
///
/// An empty family counts as satisfied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrictFractions {
    pub text_paired: f64,
    pub text_unpaired: f64,
    pub image_paired: f64,
    pub image_unpaired: f64,
    /// Unpaired pairs actually examined (all of them unless subsampled).
    pub unpaired_examined: usize,
    pub subsampled: bool,
}

impl StrictFractions {
    pub fn all(&self) -> [f64; 4] {
        [
            self.text_paired,
            self.text_unpaired,
            self.image_paired,
            self.image_unpaired,
        ]
    }
}

/// Query-side and gallery-side embeddings for the strict constraint check.
/// Texts are indexed by caption, images by image, and `pair_of` links them.
#[derive(Clone, Copy, Debug)]
pub struct StrictInputs<'a> {
    pub w_new: &'a Matrix<f32>,
    pub v_new: &'a Matrix<f32>,
    pub w_old: &'a Matrix<f32>,
    pub v_old: &'a Matrix<f32>,
    pub pair_of: &'a [usize],
}

struct Cosines<'a> {
    a: &'a Matrix<f32>,
    b: &'a Matrix<f32>,
    na: Vec<f64>,
    nb: Vec<f64>,
}

impl<'a> Cosines<'a> {
    fn new(a: &'a Matrix<f32>, b: &'a Matrix<f32>) -> Self {
        let norms = |m: &Matrix<f32>| m.iter_rows().map(|r| norm(r) as f64).collect();
        Cosines {
            na: norms(a),
            nb: norms(b),
            a,
            b,
        }
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        let denom = (self.na[i] * self.nb[j]).max(f64::MIN_POSITIVE);
        1.0 - dot(self.a.row(i), self.b.row(j)) as f64 / denom
    }
}

pub fn strict_constraint_fraction(
    inputs: &StrictInputs<'_>,
    pair_cap: usize,
    seed: u64,
) -> Result<StrictFractions> {
    let s = inputs;
    let (n_c, n_i) = (s.w_old.rows(), s.v_old.rows());
    validate_pairing(s.pair_of, n_c, n_i)?;
    if s.w_new.rows() != n_c || s.v_new.rows() != n_i {
        return Err(XbtError::shape(
            "strict_constraint_fraction",
            format!(
                "new embeddings have {}/{} rows, old have {n_c}/{n_i}",
                s.w_new.rows(),
                s.v_new.rows()
            ),
        ));
    }
    if s.w_new.cols() != s.v_old.cols()
        || s.v_new.cols() != s.w_old.cols()
        || s.w_old.cols() != s.v_old.cols()
    {
        return Err(XbtError::shape(
            "strict_constraint_fraction",
            "new embeddings must live in the old embedding space".to_string(),
        ));
    }
    let text_new = Cosines::new(s.w_new, s.v_old);
    let text_old = Cosines::new(s.w_old, s.v_old);
    let image_new = Cosines::new(s.v_new, s.w_old);
    let image_old = Cosines::new(s.v_old, s.w_old);

    // Caption c against image i, in both query roles.
    let text_le = |c: usize, i: usize| text_new.distance(c, i) <= text_old.distance(c, i);
    let text_ge = |c: usize, i: usize| text_new.distance(c, i) >= text_old.distance(c, i);
    let image_le = |c: usize, i: usize| image_new.distance(i, c) <= image_old.distance(i, c);
    let image_ge = |c: usize, i: usize| image_new.distance(i, c) >= image_old.distance(i, c);

    let frac = |ok: usize, total: usize| {
        if total == 0 {
            1.0
        } else {
            ok as f64 / total as f64
        }
    };

    let (mut tp, mut ip) = (0usize, 0usize);
    for (c, &i) in s.pair_of.iter().enumerate() {
        tp += text_le(c, i) as usize;
        ip += image_le(c, i) as usize;
    }

    let unpaired_total = n_c * n_i - n_c;
    let (mut tu, mut iu, mut examined) = (0usize, 0usize, 0usize);
    let subsampled = unpaired_total > pair_cap;
    if subsampled {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while examined < pair_cap {
            let c = rng.random_range(0..n_c);
            let i = rng.random_range(0..n_i);
            if s.pair_of[c] == i {
                continue;
            }
            tu += text_ge(c, i) as usize;
            iu += image_ge(c, i) as usize;
            examined += 1;
        }
    } else {
        for c in 0..n_c {
            for i in (0..n_i).filter(|&i| i != s.pair_of[c]) {
                tu += text_ge(c, i) as usize;
                iu += image_ge(c, i) as usize;
                examined += 1;
            }
        }
    }
    Ok(StrictFractions {
        text_paired: frac(tp, n_c),
        text_unpaired: frac(tu, examined),
        image_paired: frac(ip, n_c),
        image_unpaired: frac(iu, examined),
        unpaired_examined: examined,
        subsampled,
    })
}

/// Per-K verdict: new-query-vs-old-gallery recall strictly above old-vs-old.
pub fn eq2_criterion(new_cross: &RecallMap, old_self: &RecallMap) -> Result<BTreeMap<usize, bool>> {
    if !new_cross.keys().eq(old_self.keys()) {
        return Err(XbtError::Argument(format!(
            "K lists differ: {:?} vs {:?}",
            new_cross.keys().collect::<Vec<_>>(),
            old_self.keys().collect::<Vec<_>>()
        )));
    }
    Ok(new_cross
        .iter()
        .zip(old_self.values())
        .map(|((&k, &new), &old)| (k, new > old))
        .collect())
}

/// Prototype classification accuracy in percent. Ties go to the lower class.
pub fn zero_shot_classify(
    image_emb: &Matrix<f32>,
    class_emb: &Matrix<f32>,
    labels: &[usize],
) -> Result<f64> {
    if labels.len() != image_emb.rows() {
        return Err(XbtError::Argument(format!(
            "{} labels for {} images",
            labels.len(),
            image_emb.rows()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= class_emb.rows()) {
        return Err(XbtError::Argument(format!(
            "label {l} out of range for {} classes",
            class_emb.rows()
        )));
    }
    if class_emb.rows() == 0 {
        return Err(XbtError::Argument("no classes".into()));
    }
    let scores = matmul_nt(image_emb, class_emb)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| rank_of(scores.row(i), l) == 0)
        .count();
    Ok(100.0 * correct as f64 / labels.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub strict_pair_cap: usize,
    pub strict_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            strict_pair_cap: DEFAULT_STRICT_PAIR_CAP,
            strict_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub direction: Direction,
    pub recall: RecallMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eq2Verdicts {
    pub text_to_image: BTreeMap<usize, bool>,
    pub image_to_text: BTreeMap<usize, bool>,
}

impl Eq2Verdicts {
    pub fn all_true(&self) -> bool {
        self.text_to_image
            .values()
            .chain(self.image_to_text.values())
            .all(|&v| v)
    }

    pub fn holds_at(&self, k: usize) -> bool {
        self.text_to_image.get(&k) == Some(&true) && self.image_to_text.get(&k) == Some(&true)
    }
}

/// Everything computed on one evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ks: Vec<usize>,
    pub cases: Vec<CaseResult>,
    pub strict_fractions: StrictFractions,
    pub eq2_verdicts: Eq2Verdicts,
}

pub const CASE_OLD_T2I: &str = "w_old/v_old";
pub const CASE_OLD_I2T: &str = "v_old/w_old";
pub const CASE_CROSS_T2I: &str = "wbar_new/v_old";
pub const CASE_CROSS_I2T: &str = "vbar_new/w_old";
pub const CASE_PROJ_T2I: &str = "wbar_new/vbar_new";
pub const CASE_PROJ_I2T: &str = "vbar_new/wbar_new";
pub const CASE_ADAPT_T2I: &str = "wadapt_new/vadapt_new";
pub const CASE_ADAPT_I2T: &str = "vadapt_new/wadapt_new";
pub const CASE_RAW_T2I: &str = "w_new/v_new";
pub const CASE_RAW_I2T: &str = "v_new/w_new";

impl Evaluation {
    pub fn case(&self, name: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.name == name)
    }

    pub fn recall(&self, name: &str, k: usize) -> Option<f64> {
        self.case(name).and_then(|c| c.recall.get(&k).copied())
    }
}

/// Evaluation-split embeddings after the new model's pipeline.
#[derive(Clone, Debug)]
pub struct ProjectedSplit {
    /// `φ(adapter(·))` outputs, in the old space.
    pub text: Matrix<f32>,
    pub image: Matrix<f32>,
    /// Adapter outputs without the projection, in the new space.
    pub adapted_text: Matrix<f32>,
    pub adapted_image: Matrix<f32>,
}

impl ProjectedSplit {
    pub fn from_model(model: &XbtModel<f32>, new: &PairedDataset) -> Result<Self> {
        Ok(ProjectedSplit {
            text: model.project_texts(&new.text)?,
            image: model.project_images(&new.image)?,
            adapted_text: model.adapt_texts(&new.text)?,
            adapted_image: model.adapt_images(&new.image)?,
        })
    }
}

/// Runs every retrieval case, the strict constraint check and the verdicts.
/// `old` and `new` must describe the same samples with the same pairing.
pub fn evaluate(
    old: &PairedDataset,
    new: &PairedDataset,
    projected: &ProjectedSplit,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if old.pair_of != new.pair_of {
        return Err(XbtError::Argument(
            "old and new evaluation splits have different pairings".into(),
        ));
    }
    let p = &old.pair_of;
    let specs: [(&str, Direction, &Matrix<f32>, &Matrix<f32>); 10] = [
        (CASE_OLD_T2I, Direction::TextToImage, &old.text, &old.image),
        (CASE_OLD_I2T, Direction::ImageToText, &old.image, &old.text),
        (
            CASE_CROSS_T2I,
            Direction::TextToImage,
            &projected.text,
            &old.image,
        ),
        (
            CASE_CROSS_I2T,
            Direction::ImageToText,
            &projected.image,
            &old.text,
        ),
        (
            CASE_PROJ_T2I,
            Direction::TextToImage,
            &projected.text,
            &projected.image,
        ),
        (
            CASE_PROJ_I2T,
            Direction::ImageToText,
            &projected.image,
            &projected.text,
        ),
        (
            CASE_ADAPT_T2I,
            Direction::TextToImage,
            &projected.adapted_text,
            &projected.adapted_image,
        ),
        (
            CASE_ADAPT_I2T,
            Direction::ImageToText,
            &projected.adapted_image,
            &projected.adapted_text,
        ),
        (CASE_RAW_T2I, Direction::TextToImage, &new.text, &new.image),
        (CASE_RAW_I2T, Direction::ImageToText, &new.image, &new.text),
    ];
    let cases = specs
        .iter()
        .map(|&(name, direction, query, gallery)| {
            let case = RetrievalCase {
                name,
                direction,
                query,
                gallery,
                pair_of: p,
            };
            Ok(CaseResult {
                name: name.to_string(),
                direction,
                recall: recall_at_k(&case, &cfg.ks)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let by_name = |n: &str| {
        &cases
            .iter()
            .find(|c| c.name == n)
            .expect("case listed")
            .recall
    };
    let eq2_verdicts = Eq2Verdicts {
        text_to_image: eq2_criterion(by_name(CASE_CROSS_T2I), by_name(CASE_OLD_T2I))?,
        image_to_text: eq2_criterion(by_name(CASE_CROSS_I2T), by_name(CASE_OLD_I2T))?,
    };
    let strict_fractions = strict_constraint_fraction(
        &StrictInputs {
            w_new: &projected.text,
            v_new: &projected.image,
            w_old: &old.text,
            v_old: &old.image,
            pair_of: p,
        },
        cfg.strict_pair_cap,
        cfg.strict_seed,
    )?;
    Ok(Evaluation {
        ks: cfg.ks.clone(),
        cases,
        strict_fractions,
        eq2_verdicts,
    })
}

/// Machine-readable report with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

pub fn toolkit_version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

impl RetrievalReport {
    pub fn new(config: serde_json::Value, evaluation: Evaluation) -> Self {
        RetrievalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            toolkit_version: toolkit_version(),
            config,
            evaluation,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned-column CSV: one row per case, one column per K.
    pub fn to_csv(&self) -> String {
        let ev = &self.evaluation;
        let mut header = vec!["case".to_string(), "direction".to_string()];
        header.extend(ev.ks.iter().map(|k| format!("R@{k}")));
        let mut rows = vec![header];
        for c in &ev.cases {
            let mut row = vec![
                c.name.clone(),
                match c.direction {
                    Direction::TextToImage => "t2i".into(),
                    Direction::ImageToText => "i2t".into(),
                },
            ];
            row.extend(ev.ks.iter().map(|k| format!("{:.2}", c.recall[k])));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, &w))| {
                    if j + 1 == row.len() {
                        format!("{cell:>w$}")
                    } else if j < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", cells.join(", ")).expect("writing to a String");
        }
        out
    }
}
