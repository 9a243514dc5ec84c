//! `XBTC` checkpoints.
//!
//! ```text
//! "XBTC" | version u32 LE | header_len u64 LE | JSON header | f32 LE tensors
//! ```
//!
//! The header lists every tensor by name and length in payload order, echoes
//! the training config and tags the stage. Optimizer moments are stored as
//! `opt.m.<name>` / `opt.v.<name>` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::data::write_atomic;
use crate::error::{Result, XbtError};
use crate::layers::{phi_init_with_eps, ProjectionParams, ProjectionShape};
use crate::model::XbtModel;
use crate::optim::{AdamW, AdamWState};
use crate::params::NamedParams;
use crate::tensor::Matrix;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"XBTC";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub dim: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub seed: u64,
}

impl LoraMeta {
    fn of(ad: &LoraAdapter<f32>) -> Self {
        LoraMeta {
            dim: ad.dim(),
            rank: ad.rank,
            alpha: ad.alpha,
            dropout_p: ad.dropout_p,
            seed: ad.seed,
        }
    }

    fn empty(&self) -> LoraAdapter<f32> {
        LoraAdapter {
            a: Matrix::zeros(self.rank, self.dim),
            b: Matrix::zeros(self.dim, self.rank),
            alpha: self.alpha,
            rank: self.rank,
            dropout_p: self.dropout_p,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: String,
    config: TrainConfig,
    phi: ProjectionShape,
    ln_eps: f64,
    adapters: Option<[LoraMeta; 2]>,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Per-tensor AdamW moments, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub moments: BTreeMap<String, AdamWState<f32>>,
}

impl OptimizerSnapshot {
    pub fn of(opt: &AdamW<f32>) -> Self {
        OptimizerSnapshot {
            step: opt.step_count(),
            moments: opt.states.clone(),
        }
    }
}

/// Trained state after one stage: the projection, optionally both adapters
/// and the optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub config: TrainConfig,
    pub phi: ProjectionParams<f32>,
    pub adapters: Option<(LoraAdapter<f32>, LoraAdapter<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    /// The projection with identity adapters when none were trained.
    pub fn model(&self) -> Result<XbtModel<f32>> {
        let (image_adapter, text_adapter) = match &self.adapters {
            Some(a) => a.clone(),
            None => crate::training::init_adapters(&self.config, self.phi.d_new())?,
        };
        Ok(XbtModel {
            phi: self.phi.clone(),
            image_adapter,
            text_adapter,
        })
    }

    pub fn from_model(
        stage: &str,
        config: &TrainConfig,
        model: &XbtModel<f32>,
        opt: Option<&AdamW<f32>>,
    ) -> Self {
        Checkpoint {
            stage: stage.into(),
            config: config.clone(),
            phi: model.phi.clone(),
            adapters: Some((model.image_adapter.clone(), model.text_adapter.clone())),
            optimizer: opt.map(OptimizerSnapshot::of),
        }
    }

    fn tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = self
            .phi
            .named()
            .into_iter()
            .map(|(n, t)| (format!("phi.{n}"), t))
            .collect();
        if let Some((img, txt)) = &self.adapters {
            for (prefix, ad) in [("adapter.image", img), ("adapter.text", txt)] {
                out.extend(
                    ad.named()
                        .into_iter()
                        .map(|(n, t)| (format!("{prefix}.{n}"), t)),
                );
            }
        }
        if let Some(opt) = &self.optimizer {
            for (name, st) in &opt.moments {
                out.push((format!("opt.m.{name}"), &st.m));
                out.push((format!("opt.v.{name}"), &st.v));
            }
        }
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            stage: self.stage.clone(),
            config: self.config.clone(),
            phi: self.phi.shape(),
            ln_eps: self.phi.ln1.eps as f64,
            adapters: self
                .adapters
                .as_ref()
                .map(|(i, t)| [LoraMeta::of(i), LoraMeta::of(t)]),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    len: t.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for &x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, detail: String| XbtError::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail,
        };
        if bytes.len() < PREFIX_LEN {
            return Err(err(
                0,
                format!("truncated checkpoint: {} bytes", bytes.len()),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(err(0, "bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(err(4, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = PREFIX_LEN
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(8, format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..body])
            .map_err(|e| err(PREFIX_LEN, format!("bad header: {e}")))?;
        let expected: usize = header.tensors.iter().map(|t| t.len * 4).sum();
        if bytes.len() - body != expected {
            return Err(err(
                body,
                format!(
                    "payload length mismatch: expected {expected} bytes, found {}",
                    bytes.len() - body
                ),
            ));
        }
        let mut payload: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut offset = body;
        for t in &header.tensors {
            let data = bytes[offset..offset + t.len * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload.insert(t.name.clone(), data);
            offset += t.len * 4;
        }
        let mut take = |name: String, dst: &mut [f32]| -> Result<()> {
            let src = payload
                .remove(&name)
                .ok_or_else(|| err(PREFIX_LEN, format!("missing tensor {name}")))?;
            if src.len() != dst.len() {
                return Err(err(
                    PREFIX_LEN,
                    format!(
                        "tensor {name} has {} values, expected {}",
                        src.len(),
                        dst.len()
                    ),
                ));
            }
            dst.copy_from_slice(&src);
            Ok(())
        };

        let s = header.phi;
        let mut phi = phi_init_with_eps::<f32>(s.d_new, s.d_old, 0, header.ln_eps);
        if phi.shape() != s {
            return Err(err(
                PREFIX_LEN,
                format!("unsupported projection shape {s:?}"),
            ));
        }
        for (n, dst) in phi.named_mut() {
            take(format!("phi.{n}"), dst)?;
        }
        let adapters = match &header.adapters {
            None => None,
            Some([mi, mt]) => {
                let (mut img, mut txt) = (mi.empty(), mt.empty());
                for (prefix, ad) in [("adapter.image", &mut img), ("adapter.text", &mut txt)] {
                    for (n, dst) in ad.named_mut() {
                        take(format!("{prefix}.{n}"), dst)?;
                    }
                }
                Some((img, txt))
            }
        };
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let names: Vec<String> = header
                    .tensors
                    .iter()
                    .filter_map(|t| t.name.strip_prefix("opt.m.").map(str::to_string))
                    .collect();
                let mut moments = BTreeMap::new();
                for name in names {
                    let m = payload.remove(&format!("opt.m.{name}")).unwrap_or_default();
                    let v = payload
                        .remove(&format!("opt.v.{name}"))
                        .ok_or_else(|| err(PREFIX_LEN, format!("missing opt.v.{name}")))?;
                    moments.insert(name, AdamWState { step, m, v });
                }
                Some(OptimizerSnapshot { step, moments })
            }
        };
        if let Some(extra) = payload.keys().next() {
            return Err(err(PREFIX_LEN, format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            stage: header.stage,
            config: header.config,
            phi,
            adapters,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| XbtError::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}
