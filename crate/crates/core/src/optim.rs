//! AdamW with decoupled weight decay, and the freezing policies that decide
//! which named tensors a training stage may touch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XbtError};
use crate::params::NamedParams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub lr: f64,
    pub weight_decay: f64,
    pub trainable: bool,
}

/// Moment buffers for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T: Real> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        AdamWState {
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update of a single tensor. Decay is applied multiplicatively
/// before the moment update; frozen groups are left untouched.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamWState<T>,
    group: &ParamGroup,
    hyper: &AdamWHyper,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || state.m.len() != state.v.len()
    {
        return Err(XbtError::shape(
            "adamw_step",
            format!(
                "params {}, grads {}, m {}, v {}",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    if !group.trainable {
        return Ok(());
    }
    if !(group.lr > 0.0) {
        return Err(XbtError::Argument(format!(
            "learning rate {} must be > 0",
            group.lr
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = T::from_f64(group.lr);
    let decay = T::from_f64(1.0 - group.lr * group.weight_decay);
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - hyper.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - hyper.beta2.powi(t));
    let eps = T::from_f64(hyper.eps);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *p *= decay;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Which parameters a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezingPolicy {
    /// Everything trainable.
    FullTune,
    /// Adapters only; the projection is frozen.
    LoraOnly,
    /// Adapters plus the whole (untrained) projection.
    Base,
    /// Adapters plus the projection's LayerNorm scale/shift only.
    Xbt,
}

impl FreezingPolicy {
    pub const ALL: [FreezingPolicy; 4] = [
        FreezingPolicy::FullTune,
        FreezingPolicy::LoraOnly,
        FreezingPolicy::Base,
        FreezingPolicy::Xbt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FreezingPolicy::FullTune => "full_tune",
            FreezingPolicy::LoraOnly => "lora_only",
            FreezingPolicy::Base => "base",
            FreezingPolicy::Xbt => "xbt",
        }
    }

    /// Trainability of a tensor given its dotted name (`phi.*` or `adapter.*`).
    pub fn is_trainable(&self, name: &str) -> bool {
        let adapter = name.starts_with("adapter.");
        match self {
            FreezingPolicy::FullTune | FreezingPolicy::Base => true,
            FreezingPolicy::LoraOnly => adapter,
            FreezingPolicy::Xbt => {
                adapter
                    || (name.starts_with("phi.ln")
                        && (name.ends_with(".gamma") || name.ends_with(".beta")))
            }
        }
    }

    pub fn trainability<T: Real>(&self, params: &impl NamedParams<T>) -> TrainabilityMap {
        TrainabilityMap(
            params
                .named()
                .into_iter()
                .map(|(n, _)| {
                    let t = self.is_trainable(&n);
                    (n, t)
                })
                .collect(),
        )
    }
}

impl fmt::Display for FreezingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezingPolicy {
    type Err = XbtError;

    fn from_str(s: &str) -> Result<Self> {
        FreezingPolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| XbtError::Argument(format!("unknown freezing policy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainabilityMap(pub BTreeMap<String, bool>);

impl TrainabilityMap {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.0.get(name).copied().unwrap_or(false)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter(|(_, &t)| t).map(|(n, _)| n.as_str())
    }
}

/// AdamW over a whole named parameter set, with one moment buffer per tensor.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub lr: f64,
    pub weight_decay: f64,
    pub hyper: AdamWHyper,
    pub clip_grad: Option<f64>,
    pub trainable: TrainabilityMap,
    pub states: BTreeMap<String, AdamWState<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(
        params: &impl NamedParams<T>,
        policy: FreezingPolicy,
        lr: f64,
        weight_decay: f64,
        clip_grad: Option<f64>,
    ) -> Self {
        let trainable = policy.trainability(params);
        let states = params
            .named()
            .into_iter()
            .filter(|(n, _)| trainable.is_trainable(n))
            .map(|(n, t)| (n, AdamWState::new(t.len())))
            .collect();
        AdamW {
            lr,
            weight_decay,
            hyper: AdamWHyper::default(),
            clip_grad,
            trainable,
            states,
        }
    }

    pub fn trainable_count(&self, params: &impl NamedParams<T>) -> usize {
        params
            .named()
            .iter()
            .filter(|(n, _)| self.trainable.is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn step_count(&self) -> u64 {
        self.states.values().map(|s| s.step).max().unwrap_or(0)
    }

    /// Global l2 norm of the trainable gradients.
    fn grad_norm(&self, grads: &impl NamedParams<T>) -> f64 {
        grads
            .named()
            .iter()
            .filter(|(n, _)| self.trainable.is_trainable(n))
            .flat_map(|(_, g)| g.iter())
            .map(|&g| g.to_f64() * g.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn step(
        &mut self,
        params: &mut impl NamedParams<T>,
        grads: &impl NamedParams<T>,
    ) -> Result<()> {
        let grad_views = grads.named();
        let clip_factor = match self.clip_grad {
            Some(max_norm) => {
                let n = self.grad_norm(grads);
                if n > max_norm {
                    Some(T::from_f64(max_norm / n))
                } else {
                    None
                }
            }
            None => None,
        };
        let group = ParamGroup {
            lr: self.lr,
            weight_decay: self.weight_decay,
            trainable: true,
        };
        let mut param_views = params.named_mut();
        if param_views.len() != grad_views.len() {
            return Err(XbtError::shape(
                "AdamW::step",
                format!("{} params vs {} grads", param_views.len(), grad_views.len()),
            ));
        }
        for ((name, p), (gname, g)) in param_views.iter_mut().zip(&grad_views) {
            if name != gname {
                return Err(XbtError::shape(
                    "AdamW::step",
                    format!("param `{name}` paired with grad `{gname}`"),
                ));
            }
            let Some(state) = self.states.get_mut(name.as_str()) else {
                continue;
            };
            match clip_factor {
                Some(f) => {
                    let clipped: Vec<T> = g.iter().map(|&x| x * f).collect();
                    adamw_step(p, &clipped, state, &group, &self.hyper)?;
                }
                None => adamw_step(p, g, state, &group, &self.hyper)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::lora_init;
    use crate::layers::phi_init;
    use crate::model::XbtModel;

    /// Straight-line AdamW for one scalar, written independently of `adamw_step`.
    fn hand_adamw(p: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            p -= lr * wd * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    fn group(lr: f64, wd: f64) -> ParamGroup {
        ParamGroup {
            lr,
            weight_decay: wd,
            trainable: true,
        }
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = vec![1.5f64, -2.0];
        let mut s = AdamWState::new(2);
        adamw_step(
            &mut p,
            &[0.0, 0.0],
            &mut s,
            &group(1e-4, 0.0),
            &AdamWHyper::default(),
        )
        .unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn zero_grad_applies_pure_decay() {
        let mut p = vec![2.0f64];
        let mut s = AdamWState::new(1);
        adamw_step(
            &mut p,
            &[0.0],
            &mut s,
            &group(1e-4, 0.01),
            &AdamWHyper::default(),
        )
        .unwrap();
        assert!((p[0] - 2.0 * (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn single_scalar_step_matches_hand_oracle() {
        let mut p = vec![1.0f64];
        let mut s = AdamWState::new(1);
        adamw_step(
            &mut p,
            &[0.5],
            &mut s,
            &group(0.1, 0.01),
            &AdamWHyper::default(),
        )
        .unwrap();
        let expected = hand_adamw(1.0, &[0.5], 0.1, 0.01);
        assert!((p[0] - expected).abs() < 1e-12);
        // Bias correction makes the first step exactly lr·sign(g) (up to eps).
        assert!((p[0] - (1.0 * (1.0 - 0.001) - 0.1)).abs() < 1e-7);
    }

    #[test]
    fn without_decay_matches_plain_adam_on_random_scalars() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let p0: f64 = rng.random_range(-2.0..2.0);
            let grads: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut p = vec![p0];
            let mut s = AdamWState::new(1);
            for &g in &grads {
                adamw_step(
                    &mut p,
                    &[g],
                    &mut s,
                    &group(0.01, 0.0),
                    &AdamWHyper::default(),
                )
                .unwrap();
            }
            assert!((p[0] - hand_adamw(p0, &grads, 0.01, 0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![1.0f64; 3];
        let mut s = AdamWState::new(2);
        let r = adamw_step(
            &mut p,
            &[0.0; 3],
            &mut s,
            &group(0.1, 0.0),
            &AdamWHyper::default(),
        );
        assert!(matches!(r, Err(XbtError::Shape { .. })));
    }

    fn model() -> XbtModel<f64> {
        XbtModel {
            phi: phi_init(6, 4, 0),
            image_adapter: lora_init(6, 2, 4.0, 0.0, 1).unwrap(),
            text_adapter: lora_init(6, 2, 4.0, 0.0, 2).unwrap(),
        }
    }

    #[test]
    fn policy_examples() {
        let m = model();
        let xbt = FreezingPolicy::Xbt.trainability(&m);
        assert!(!xbt.is_trainable("phi.lin1.weight"));
        assert!(xbt.is_trainable("phi.ln1.gamma"));
        assert!(xbt.is_trainable("phi.ln2.beta"));
        assert!(!xbt.is_trainable("phi.lin3.bias"));
        assert!(xbt.is_trainable("adapter.text.a"));

        let full = FreezingPolicy::FullTune.trainability(&m);
        assert!(full.0.values().all(|&t| t));

        let lora = FreezingPolicy::LoraOnly.trainability(&m);
        for (name, &t) in &lora.0 {
            assert_eq!(t, name.starts_with("adapter."), "{name}");
        }
        assert!(lora.is_trainable("adapter.image.b"));

        assert!("bogus".parse::<FreezingPolicy>().is_err());
        assert_eq!(
            "lora_only".parse::<FreezingPolicy>().unwrap(),
            FreezingPolicy::LoraOnly
        );
    }

    #[test]
    fn frozen_tensors_stay_bitwise_identical() {
        for policy in FreezingPolicy::ALL {
            let mut m = model();
            let before = m.clone();
            let mut opt = AdamW::new(&m, policy, 1e-2, 0.01, None);
            let mut grads = m.zeros_like();
            for (_, g) in grads.named_mut() {
                for (k, x) in g.iter_mut().enumerate() {
                    *x = ((k % 7) as f64 - 3.0) * 0.1;
                }
            }
            for _ in 0..5 {
                opt.step(&mut m, &grads).unwrap();
            }
            for ((name, a), (_, b)) in m.named().iter().zip(before.named()) {
                if policy.is_trainable(name) {
                    assert_ne!(*a, b, "{policy}: {name} should move");
                } else {
                    assert_eq!(*a, b, "{policy}: {name} should be frozen");
                }
            }
        }
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut a = model();
        let mut b = model();
        let mut grads = a.zeros_like();
        for (_, g) in grads.named_mut() {
            g.iter_mut().for_each(|x| *x = 100.0);
        }
        let mut clipped = AdamW::new(&a, FreezingPolicy::FullTune, 1e-3, 0.0, Some(1.0));
        let mut plain = AdamW::new(&b, FreezingPolicy::FullTune, 1e-3, 0.0, None);
        clipped.step(&mut a, &grads).unwrap();
        plain.step(&mut b, &grads).unwrap();
        // Adam is scale-invariant on the first step, so only the moments differ.
        let (_, m_clip) = clipped.states.iter().next().unwrap();
        let (_, m_plain) = plain.states.iter().next().unwrap();
        assert!(m_clip.m[0] < m_plain.m[0]);
    }
}
