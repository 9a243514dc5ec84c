//! Named flat views over parameter (and gradient) tensors.
//!
//! Every trainable structure exposes its tensors in a fixed order under stable
//! dotted names such as `phi.ln1.gamma` or `adapter.text.b`. The optimizer,
//! freezing policies and checkpoints all key off these names.

use sha2::{Digest, Sha256};

use crate::tensor::Real;

pub trait NamedParams<T: Real> {
    fn named(&self) -> Vec<(String, &[T])>;

    fn named_mut(&mut self) -> Vec<(String, &mut [T])>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the little-endian `f32` image of every tensor, in order.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &x in t {
                h.update(x.to_le_f32_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Prefixes every name from `inner` with `prefix.`.
pub(crate) fn prefixed<'a, T: Real>(
    prefix: &str,
    inner: Vec<(String, &'a [T])>,
) -> impl Iterator<Item = (String, &'a [T])> + 'a {
    let prefix = prefix.to_string();
    inner
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a, T: Real>(
    prefix: &str,
    inner: Vec<(String, &'a mut [T])>,
) -> impl Iterator<Item = (String, &'a mut [T])> + 'a {
    let prefix = prefix.to_string();
    inner
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}
