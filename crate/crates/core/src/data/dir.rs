//! On-disk layout of an old/new corpus: ten embedding files, two pairing
//! files and a manifest naming the generations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::format::{read_embeddings, write_atomic, write_embeddings, EmbeddingMatrix};
use super::synth::{Generation, GenerationData, SyntheticData};
use super::{read_pairing, write_pairing, PairedDataset};
use crate::error::{Result, XbtError};
use crate::tensor::Matrix;

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_PAIRING: &str = "train_pairing.json";
pub const EVAL_PAIRING: &str = "eval_pairing.json";

const TAGS: [&str; 2] = ["old", "new"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub old: Generation,
    pub new: Generation,
    pub embedding_files: Vec<String>,
    pub pairing_files: Vec<String>,
}

/// Embedding file names for generation `tag` ("old" or "new").
pub fn embedding_files(tag: &str) -> [String; 5] {
    [
        format!("pretrain_text_{tag}.xbte"),
        format!("train_image_{tag}.xbte"),
        format!("train_text_{tag}.xbte"),
        format!("eval_image_{tag}.xbte"),
        format!("eval_text_{tag}.xbte"),
    ]
}

/// Writes the oldest and newest generation of `data` into `dir`. The manifest
/// is written last, so its presence marks a complete directory.
pub fn write_corpus_dir(dir: &Path, data: &SyntheticData) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| XbtError::io(dir, e))?;
    let mut files = Vec::new();
    for (tag, g) in TAGS.iter().zip([data.old(), data.new_gen()]) {
        let names = embedding_files(tag);
        let mats = [
            &g.pretrain_text,
            &g.train.image,
            &g.train.text,
            &g.eval.image,
            &g.eval.text,
        ];
        for (name, m) in names.iter().zip(mats) {
            write_embeddings(&dir.join(name), &EmbeddingMatrix::normalized(m.clone()))?;
            files.push(name.clone());
        }
    }
    write_pairing(&dir.join(TRAIN_PAIRING), &data.new_gen().train.pair_of)?;
    write_pairing(&dir.join(EVAL_PAIRING), &data.new_gen().eval.pair_of)?;
    let manifest = Manifest {
        old: data.old().generation,
        new: data.new_gen().generation,
        embedding_files: files,
        pairing_files: vec![TRAIN_PAIRING.into(), EVAL_PAIRING.into()],
    };
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_matrix(dir: &Path, name: &str) -> Result<Matrix<f32>> {
    Ok(read_embeddings(&dir.join(name))?.data)
}

pub fn read_corpus_dir(dir: &Path) -> Result<SyntheticData> {
    let path = dir.join(MANIFEST);
    let raw = fs::read(&path).map_err(|e| XbtError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    let train_pairs = read_pairing(&dir.join(TRAIN_PAIRING))?;
    let eval_pairs = read_pairing(&dir.join(EVAL_PAIRING))?;
    let mut generations = Vec::with_capacity(2);
    for (tag, generation) in TAGS.iter().zip([manifest.old, manifest.new]) {
        let [pre, ti, tt, ei, et] = embedding_files(tag);
        let g = GenerationData {
            generation,
            pretrain_text: read_matrix(dir, &pre)?,
            train: PairedDataset::new(
                read_matrix(dir, &ti)?,
                read_matrix(dir, &tt)?,
                train_pairs.clone(),
            )?,
            eval: PairedDataset::new(
                read_matrix(dir, &ei)?,
                read_matrix(dir, &et)?,
                eval_pairs.clone(),
            )?,
        };
        if g.pretrain_text.cols() != generation.dim || g.train.dim() != generation.dim {
            return Err(XbtError::Argument(format!(
                "{tag} embeddings have dim {} but the manifest says {}",
                g.train.dim(),
                generation.dim
            )));
        }
        generations.push(g);
    }
    Ok(SyntheticData { generations })
}
