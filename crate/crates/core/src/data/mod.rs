//! Embedding persistence, paired datasets, the synthetic generator and batching.

mod batch;
mod dir;
mod format;
mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::batch_iter;
pub use dir::{
    embedding_files, read_corpus_dir, write_corpus_dir, Manifest, EVAL_PAIRING, MANIFEST,
    TRAIN_PAIRING,
};
pub use format::{
    decode, encode, ids_path, read_embeddings, write_atomic, write_embeddings, EmbeddingMatrix,
    FLAG_NORMALIZED, HEADER_LEN, MAGIC, NORM_TOLERANCE, VERSION,
};
pub use synth::{
    chain_generations, synth_generate, synth_generate_generations, Generation, GenerationData,
    SyntheticData, SyntheticSpec, MODALITY_OFFSET,
};

use crate::error::{Result, XbtError};
use crate::tensor::Matrix;

/// Image and caption embeddings of one generation. Caption `c` describes
/// image `pair_of[c]`; an image may own several captions.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub image: Matrix<f32>,
    pub text: Matrix<f32>,
    pub pair_of: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PairingFile {
    pair_of: Vec<usize>,
}

impl PairedDataset {
    pub fn new(image: Matrix<f32>, text: Matrix<f32>, pair_of: Vec<usize>) -> Result<Self> {
        validate_pairing(&pair_of, text.rows(), image.rows())?;
        if image.cols() != text.cols() {
            return Err(XbtError::shape(
                "PairedDataset::new",
                format!("image dim {} != text dim {}", image.cols(), text.cols()),
            ));
        }
        Ok(PairedDataset {
            image,
            text,
            pair_of,
        })
    }

    pub fn n_captions(&self) -> usize {
        self.text.rows()
    }

    pub fn n_images(&self) -> usize {
        self.image.rows()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    /// Caption indices per image, ascending.
    pub fn captions_of(&self) -> Vec<Vec<usize>> {
        captions_of(&self.pair_of, self.n_images())
    }

    /// Caption rows and their paired image rows for a batch of caption indices.
    pub fn batch(&self, captions: &[usize]) -> (Matrix<f32>, Matrix<f32>) {
        let images: Vec<usize> = captions.iter().map(|&c| self.pair_of[c]).collect();
        (
            self.image.select_rows(&images),
            self.text.select_rows(captions),
        )
    }

    /// Restricts to a set of images (in the given order) and all their captions.
    pub fn subset_images(&self, images: &[usize]) -> PairedDataset {
        let owners = self.captions_of();
        let mut pair_of = Vec::new();
        let mut captions = Vec::new();
        for (new_idx, &img) in images.iter().enumerate() {
            for &c in &owners[img] {
                captions.push(c);
                pair_of.push(new_idx);
            }
        }
        PairedDataset {
            image: self.image.select_rows(images),
            text: self.text.select_rows(&captions),
            pair_of,
        }
    }
}

pub fn captions_of(pair_of: &[usize], n_images: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_images];
    for (c, &i) in pair_of.iter().enumerate() {
        out[i].push(c);
    }
    out
}

pub fn validate_pairing(pair_of: &[usize], n_captions: usize, n_images: usize) -> Result<()> {
    if pair_of.len() != n_captions {
        return Err(XbtError::Argument(format!(
            "pairing has {} entries for {n_captions} captions",
            pair_of.len()
        )));
    }
    if let Some((c, &i)) = pair_of.iter().enumerate().find(|(_, &i)| i >= n_images) {
        return Err(XbtError::Argument(format!(
            "caption {c} maps to image {i}, but there are only {n_images} images"
        )));
    }
    Ok(())
}

pub fn write_pairing(path: &Path, pair_of: &[usize]) -> Result<()> {
    let json = serde_json::to_vec(&PairingFile {
        pair_of: pair_of.to_vec(),
    })?;
    write_atomic(path, &json)
}

pub fn read_pairing(path: &Path) -> Result<Vec<usize>> {
    let raw = fs::read(path).map_err(|e| XbtError::io(path, e))?;
    let file: PairingFile = serde_json::from_slice(&raw)?;
    Ok(file.pair_of)
}
