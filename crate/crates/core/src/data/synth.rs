//! Seeded multi-generation image/text embedding generator.
//!
//! Every semantic unit has a latent `z ~ N(0, I_m)`. Generation `g` embeds it as
//!
//! ```text
//! text  = normalize(z·G_g/√m       + o_T,g + η)
//! image = normalize(z·A_I·G_g/√m   + o_I,g + η)
//! ```
//!
//! `G_g` is an `m × d_g` map with `N(0, 1/d_g)` entries. `A_I` mixes the latent
//! before it reaches the image side, so images and texts of one generation are
//! correlated but not identical views; it is shared by all generations, which
//! makes text structure a faithful proxy for image structure. Offsets `o` are
//! unit vectors times [`MODALITY_OFFSET`]. The noise `η` has per-coordinate
//! std `noise_g/√d_g`, so its expected norm is about `noise_g`.
//!
//! Each split draws from its own ChaCha stream, so changing one split's size
//! leaves the maps and the other splits untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PairedDataset;
use crate::error::{Result, XbtError};
use crate::tensor::{l2_normalize_rows, matmul, Matrix, NORM_EPS};

pub const MODALITY_OFFSET: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    pub d_old: usize,
    pub d_new: usize,
    pub n_pretrain_texts: usize,
    pub n_pairs: usize,
    pub n_eval_images: usize,
    pub captions_per_image: usize,
    pub old_noise: f64,
    pub new_noise: f64,
    /// Weight `ρ` of the random mixing in `A_I = √(1−ρ²)·I + ρ·R/√m`.
    pub modality_mix: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            latent_dim: 32,
            d_old: 64,
            d_new: 96,
            n_pretrain_texts: 50_000,
            n_pairs: 5_000,
            n_eval_images: 1_000,
            captions_per_image: 5,
            old_noise: 0.35,
            new_noise: 0.15,
            modality_mix: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XbtError::Config(m));
        if self.latent_dim == 0 || self.d_old == 0 || self.d_new == 0 {
            return bad("latent_dim, d_old and d_new must be >= 1".into());
        }
        if self.captions_per_image == 0 {
            return bad("captions_per_image must be >= 1".into());
        }
        if !(self.new_noise >= 0.0 && self.old_noise.is_finite()) {
            return bad(format!(
                "noise levels must be finite and non-negative (old {}, new {})",
                self.old_noise, self.new_noise
            ));
        }
        if !(self.new_noise < self.old_noise) {
            return bad(format!(
                "new_noise ({}) must be below old_noise ({})",
                self.new_noise, self.old_noise
            ));
        }
        if !(0.0..=1.0).contains(&self.modality_mix) {
            return bad(format!("modality_mix {} outside [0, 1]", self.modality_mix));
        }
        Ok(())
    }

    /// The old and new generations.
    pub fn generations(&self) -> [Generation; 2] {
        [
            Generation {
                dim: self.d_old,
                noise: self.old_noise,
                map_key: 0,
            },
            Generation {
                dim: self.d_new,
                noise: self.new_noise,
                map_key: 1,
            },
        ]
    }
}

/// One encoder generation. Generations with equal `map_key` and `dim` share
/// their maps and offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub dim: usize,
    pub noise: f64,
    pub map_key: u64,
}

/// `count` generations: old and new from `spec`, then each later one 32 dims
/// wider with half the noise of its predecessor.
pub fn chain_generations(spec: &SyntheticSpec, count: usize) -> Vec<Generation> {
    let mut gens: Vec<Generation> = spec.generations().into_iter().take(count).collect();
    while gens.len() < count {
        let last = *gens.last().expect("at least one generation");
        gens.push(Generation {
            dim: last.dim + 32,
            noise: last.noise / 2.0,
            map_key: gens.len() as u64,
        });
    }
    gens
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationData {
    pub generation: Generation,
    pub pretrain_text: Matrix<f32>,
    pub train: PairedDataset,
    pub eval: PairedDataset,
}

/// Generated splits, oldest generation first. All generations embed the same
/// latents, so row `i` of any split is the same sample in every generation.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub generations: Vec<GenerationData>,
}

impl SyntheticData {
    pub fn old(&self) -> &GenerationData {
        &self.generations[0]
    }

    pub fn new_gen(&self) -> &GenerationData {
        self.generations.last().expect("at least one generation")
    }
}

#[derive(Clone, Copy)]
enum Split {
    Pretrain = 1,
    Train = 2,
    Eval = 3,
}

const STREAM_MAPS: u64 = 0;
const STREAM_KEY_BASE: u64 = 1 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn split_stream(seed: u64, split: Split, slot: u64) -> ChaCha8Rng {
    stream(seed, ((split as u64) << 48) | slot)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<f64> {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

struct GenerationMaps {
    text_map: Matrix<f64>,
    image_map: Matrix<f64>,
    text_offset: Vec<f64>,
    image_offset: Vec<f64>,
}

fn unit_offset(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v = gaussian(rng, 1, dim, 1.0);
    l2_normalize_rows(&v, NORM_EPS)
        .row(0)
        .iter()
        .map(|x| x * MODALITY_OFFSET)
        .collect()
}

fn generation_maps(
    seed: u64,
    m: usize,
    gen: &Generation,
    image_mix: &Matrix<f64>,
) -> GenerationMaps {
    let mut rng = stream(seed, STREAM_KEY_BASE + gen.map_key);
    let g = gaussian(&mut rng, m, gen.dim, 1.0 / (gen.dim as f64).sqrt());
    let text_offset = unit_offset(&mut rng, gen.dim);
    let image_offset = unit_offset(&mut rng, gen.dim);
    GenerationMaps {
        image_map: matmul(image_mix, &g).expect("m × m times m × d"),
        text_map: g,
        text_offset,
        image_offset,
    }
}

fn embed(
    latents: &Matrix<f64>,
    map: &Matrix<f64>,
    offset: &[f64],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Matrix<f32> {
    let m = latents.cols() as f64;
    let mut x = matmul(latents, map)
        .expect("n × m times m × d")
        .scale(1.0 / m.sqrt());
    let std = noise / (map.cols() as f64).sqrt();
    for row in 0..x.rows() {
        for (v, o) in x.row_mut(row).iter_mut().zip(offset) {
            let eta = if noise > 0.0 {
                std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            *v += o + eta;
        }
    }
    l2_normalize_rows(&x, NORM_EPS).cast()
}

/// Generates the default old/new pair of generations after validating `spec`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    synth_generate_generations(spec, &spec.generations())
}

/// Generates arbitrary generations from `spec`'s sizes and seed. The noise
/// ordering of `spec` is not enforced here.
pub fn synth_generate_generations(
    spec: &SyntheticSpec,
    gens: &[Generation],
) -> Result<SyntheticData> {
    if gens.is_empty() {
        return Err(XbtError::Argument(
            "at least one generation required".into(),
        ));
    }
    if let Some(g) = gens.iter().find(|g| g.dim == 0 || !(g.noise >= 0.0)) {
        return Err(XbtError::Argument(format!("invalid generation {g:?}")));
    }
    let m = spec.latent_dim;
    if m == 0 || spec.captions_per_image == 0 {
        return Err(XbtError::Config(
            "latent_dim and captions_per_image must be >= 1".into(),
        ));
    }
    let rho = spec.modality_mix;
    let mut mix_rng = stream(spec.seed, STREAM_MAPS);
    let image_mix = Matrix::<f64>::identity(m)
        .scale((1.0 - rho * rho).max(0.0).sqrt())
        .add(&gaussian(&mut mix_rng, m, m, rho / (m as f64).sqrt()))?;
    let maps: Vec<GenerationMaps> = gens
        .iter()
        .map(|g| generation_maps(spec.seed, m, g, &image_mix))
        .collect();

    let latents = |split, n| gaussian(&mut split_stream(spec.seed, split, 0), n, m, 1.0);
    let z_pre = latents(Split::Pretrain, spec.n_pretrain_texts);
    let z_train = latents(Split::Train, spec.n_pairs);
    let z_eval = latents(Split::Eval, spec.n_eval_images);
    let train_pairs: Vec<usize> = (0..spec.n_pairs).collect();
    let eval_pairs: Vec<usize> = (0..spec.n_eval_images)
        .flat_map(|i| std::iter::repeat_n(i, spec.captions_per_image))
        .collect();
    let z_eval_captions = z_eval.select_rows(&eval_pairs);

    let mut generations = Vec::with_capacity(gens.len());
    for (gi, (gen, mp)) in gens.iter().zip(&maps).enumerate() {
        let slot = |modality: u64| 1 + 2 * gi as u64 + modality;
        let text = |z: &Matrix<f64>, split| {
            embed(
                z,
                &mp.text_map,
                &mp.text_offset,
                gen.noise,
                &mut split_stream(spec.seed, split, slot(0)),
            )
        };
        let image = |z: &Matrix<f64>, split| {
            embed(
                z,
                &mp.image_map,
                &mp.image_offset,
                gen.noise,
                &mut split_stream(spec.seed, split, slot(1)),
            )
        };
        generations.push(GenerationData {
            generation: *gen,
            pretrain_text: text(&z_pre, Split::Pretrain),
            train: PairedDataset::new(
                image(&z_train, Split::Train),
                text(&z_train, Split::Train),
                train_pairs.clone(),
            )?,
            eval: PairedDataset::new(
                image(&z_eval, Split::Eval),
                text(&z_eval_captions, Split::Eval),
                eval_pairs.clone(),
            )?,
        });
    }
    Ok(SyntheticData { generations })
}
