use serde::{Deserialize, Serialize};

use super::{contract, Result, Tensor, TensorError};

/// Which sub-network a parameter belongs to; the training steps update
/// disjoint unions of these groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// F: latent → style.
    Mapping,
    /// G: synthesis network (constant input, convolutions, to-RGB).
    Synthesis,
    /// Spatial conditional style modulation.
    Scs,
    /// E: encoder.
    Encoder,
    /// D: discriminator head on top of the encoder.
    DiscHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids of every parameter in any of `groups`.
    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over the bit patterns of every value in `groups`.
    pub fn checksum(&self, groups: &[ParamGroup]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                expected: p.grad.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        p.grad.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Adam with bias correction; moment state is kept per parameter, so a
/// parameter updated by several training steps shares one state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// Update `ids` from their accumulated gradients, then zero those
    /// gradients. A non-finite gradient aborts before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for id in ids {
            let p = store.get(*id);
            if !p.grad.is_finite() {
                return Err(TensorError::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), Moments::default);
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        if !(lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
            return Err(contract("adam", "invalid hyperparameters"));
        }
        for id in ids {
            let st = &mut self.state[id.index()];
            let p = store.get_mut(*id);
            let n = p.value.numel();
            if st.m.len() != n {
                st.m = vec![0.0; n];
                st.v = vec![0.0; n];
                st.steps = 0;
            }
            st.steps += 1;
            let c1 = 1.0 - beta1.powi(st.steps as i32);
            let c2 = 1.0 - beta2.powi(st.steps as i32);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", ParamGroup::Mapping, Tensor::full(&[1], v));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = scalar_store(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut s, &[id]).unwrap();
        }
        assert_eq!(s.get(id).value.data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        s.accumulate_grad(id, &Tensor::full(&[1], 1.0)).unwrap();
        adam.step(&mut s, &[id]).unwrap();
        let moved = s.get(id).value.data()[0];
        assert!((moved + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
        assert_eq!(s.get(id).grad.data()[0], 0.0);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        s.accumulate_grad(id, &Tensor::full(&[1], f64::NAN)).unwrap();
        assert!(matches!(adam.step(&mut s, &[id]), Err(TensorError::NonFinite(_))));
        assert_eq!(s.get(id).value.data()[0], 1.0);
    }

    #[test]
    fn reset_state_reproduces_trajectory() {
        let run = |adam: &mut Adam| {
            let (mut s, id) = scalar_store(0.3);
            for k in 0..5 {
                s.accumulate_grad(id, &Tensor::full(&[1], (k as f64).sin())).unwrap();
                adam.step(&mut s, &[id]).unwrap();
            }
            s.get(id).value.data()[0]
        };
        let mut adam = Adam::new(AdamConfig::default());
        let a = run(&mut adam);
        adam.reset();
        let b = run(&mut adam);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn checksum_tracks_group_membership() {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamGroup::Encoder, Tensor::full(&[2], 1.0));
        s.add("b", ParamGroup::Mapping, Tensor::full(&[2], 1.0));
        let before = s.checksum(&[ParamGroup::Mapping]);
        s.get_mut(a).value.data_mut()[0] = 5.0;
        assert_eq!(before, s.checksum(&[ParamGroup::Mapping]));
        assert_ne!(s.checksum(&[ParamGroup::Encoder]), before);
    }
}
