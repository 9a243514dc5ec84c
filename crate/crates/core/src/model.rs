//! The trainable bundle: projection plus one adapter per modality.

use crate::adapters::{lora_apply, lora_backward, lora_forward, LoraAdapter, LoraCache, LoraGrads};
use crate::error::Result;
use crate::layers::{phi_apply, ProjectionGrads, ProjectionParams};
use crate::params::{prefixed, prefixed_mut, NamedParams};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct XbtModel<T: Real> {
    pub phi: ProjectionParams<T>,
    pub image_adapter: LoraAdapter<T>,
    pub text_adapter: LoraAdapter<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XbtGrads<T: Real> {
    pub phi: ProjectionGrads<T>,
    pub image_adapter: LoraGrads<T>,
    pub text_adapter: LoraGrads<T>,
}

pub(crate) struct AdapterPass<T: Real> {
    pub image: Matrix<T>,
    pub text: Matrix<T>,
    image_cache: LoraCache<T>,
    text_cache: LoraCache<T>,
}

impl<T: Real> XbtModel<T> {
    pub fn zeros_like(&self) -> XbtGrads<T> {
        XbtGrads {
            phi: ProjectionGrads::zeros_like(&self.phi),
            image_adapter: LoraGrads::zeros_like(&self.image_adapter),
            text_adapter: LoraGrads::zeros_like(&self.text_adapter),
        }
    }

    /// `v̄_new = φ(adapter_I(v_new))`.
    pub fn project_images(&self, v_new: &Matrix<T>) -> Result<Matrix<T>> {
        phi_apply(&self.phi, &lora_forward(&self.image_adapter, v_new)?, true)
    }

    /// `w̄_new = φ(adapter_T(w_new))`.
    pub fn project_texts(&self, w_new: &Matrix<T>) -> Result<Matrix<T>> {
        phi_apply(&self.phi, &lora_forward(&self.text_adapter, w_new)?, true)
    }

    /// Adapters only, for new/new retrieval without the projection.
    pub fn adapt_images(&self, v_new: &Matrix<T>) -> Result<Matrix<T>> {
        lora_forward(&self.image_adapter, v_new)
    }

    pub fn adapt_texts(&self, w_new: &Matrix<T>) -> Result<Matrix<T>> {
        lora_forward(&self.text_adapter, w_new)
    }

    pub(crate) fn adapter_forward(
        &self,
        v_new: &Matrix<T>,
        w_new: &Matrix<T>,
        dropout_seed: Option<u64>,
    ) -> Result<AdapterPass<T>> {
        let (image, image_cache) =
            lora_apply(&self.image_adapter, v_new, dropout_seed.map(|s| s ^ 0x1))?;
        let (text, text_cache) =
            lora_apply(&self.text_adapter, w_new, dropout_seed.map(|s| s ^ 0x2))?;
        Ok(AdapterPass {
            image,
            text,
            image_cache,
            text_cache,
        })
    }

    pub(crate) fn adapter_backward(
        &self,
        pass: &AdapterPass<T>,
        grad_image: &Matrix<T>,
        grad_text: &Matrix<T>,
    ) -> Result<(LoraGrads<T>, LoraGrads<T>)> {
        let (_, gi) = lora_backward(&self.image_adapter, &pass.image_cache, grad_image)?;
        let (_, gt) = lora_backward(&self.text_adapter, &pass.text_cache, grad_text)?;
        Ok((gi, gt))
    }
}

impl<T: Real> NamedParams<T> for XbtModel<T> {
    fn named(&self) -> Vec<(String, &[T])> {
        prefixed("phi", self.phi.named())
            .chain(prefixed("adapter.image", self.image_adapter.named()))
            .chain(prefixed("adapter.text", self.text_adapter.named()))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut [T])> {
        prefixed_mut("phi", self.phi.named_mut())
            .chain(prefixed_mut(
                "adapter.image",
                self.image_adapter.named_mut(),
            ))
            .chain(prefixed_mut("adapter.text", self.text_adapter.named_mut()))
            .collect()
    }
}

impl<T: Real> NamedParams<T> for XbtGrads<T> {
    fn named(&self) -> Vec<(String, &[T])> {
        prefixed("phi", self.phi.named())
            .chain(prefixed("adapter.image", self.image_adapter.named()))
            .chain(prefixed("adapter.text", self.text_adapter.named()))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut [T])> {
        prefixed_mut("phi", self.phi.named_mut())
            .chain(prefixed_mut(
                "adapter.image",
                self.image_adapter.named_mut(),
            ))
            .chain(prefixed_mut("adapter.text", self.text_adapter.named_mut()))
            .collect()
    }
}
