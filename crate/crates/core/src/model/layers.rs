//! Equalized-learning-rate layers and the per-pass parameter binder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{self, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Copies stored parameters into a graph on first use. Parameters whose
/// group is trainable become gradient-tracking leaves; the rest are constants.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: Vec<ParamGroup>,
    vars: Vec<Option<Var>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: &[ParamGroup]) -> Self {
        Self {
            store,
            trainable: trainable.to_vec(),
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        let v = g.leaf(p.value.clone(), self.trainable.contains(&p.group));
        self.vars[id.index()] = Some(v);
        v
    }

    /// Trainable parameters that were actually used in this pass.
    pub fn trainable_vars(&self) -> (Vec<ParamId>, Vec<Var>) {
        self.store
            .iter()
            .filter_map(|(id, p)| {
                let v = self.vars[id.index()]?;
                self.trainable.contains(&p.group).then_some((id, v))
            })
            .unzip()
    }
}

/// A graph under construction together with its bound parameters.
pub struct Pass<'s> {
    pub g: Graph,
    pub params: Binder<'s>,
}

impl<'s> Pass<'s> {
    pub fn new(store: &'s ParamStore, trainable: &[ParamGroup]) -> Self {
        Self {
            g: Graph::new(),
            params: Binder::new(store, trainable),
        }
    }

    fn scaled(&mut self, id: ParamId, c: f64) -> Var {
        let v = self.params.var(&mut self.g, id);
        if c == 1.0 {
            v
        } else {
            self.g.scale(v, c)
        }
    }

    pub fn linear(&mut self, layer: &EqLinear, x: Var) -> tensor::Result<Var> {
        let w = self.scaled(layer.weight, layer.weight_mul);
        let b = self.scaled(layer.bias, layer.bias_mul);
        self.g.linear(x, w, Some(b))
    }

    pub fn conv(&mut self, layer: &EqConv, x: Var) -> tensor::Result<Var> {
        let w = self.scaled(layer.weight, layer.weight_mul);
        let b = self.params.var(&mut self.g, layer.bias);
        self.g.conv2d(x, w, Some(b), 1, layer.kernel / 2)
    }

    /// Gradients of `loss` for every trainable parameter used in the pass.
    pub fn gradients(&mut self, loss: Var) -> tensor::Result<Vec<(ParamId, Tensor)>> {
        let (ids, vars) = self.params.trainable_vars();
        let grads = self.g.backward(loss, &vars)?;
        Ok(ids.into_iter().zip(grads).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zero,
}

/// Fully connected layer whose weights are stored at unit scale and
/// rescaled by `gain·lr_mul/√fan_in` at run time.
#[derive(Clone, Debug)]
pub struct EqLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    weight_mul: f64,
    bias_mul: f64,
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    t
}

#[allow(clippy::too_many_arguments)]
impl EqLinear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        lr_mul: f64,
        init: Init,
    ) -> Self {
        let weight = match init {
            Init::Normal => normal(rng, &[fan_out, fan_in], 1.0 / lr_mul),
            Init::Zero => Tensor::zeros(&[fan_out, fan_in]),
        };
        Self {
            weight: store.add(format!("{name}.weight"), group, weight),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out])),
            weight_mul: gain / (fan_in as f64).sqrt() * lr_mul,
            bias_mul: lr_mul,
        }
    }
}

/// Stride-1, same-padding convolution with equalized learning rate.
#[derive(Clone, Debug)]
pub struct EqConv {
    pub weight: ParamId,
    pub bias: ParamId,
    kernel: usize,
    weight_mul: f64,
}

#[allow(clippy::too_many_arguments)]
impl EqConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
        init: Init,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let weight = match init {
            Init::Normal => normal(rng, &shape, 1.0),
            Init::Zero => Tensor::zeros(&shape),
        };
        Self {
            weight: store.add(format!("{name}.weight"), group, weight),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout])),
            kernel,
            weight_mul: gain / ((cin * kernel * kernel) as f64).sqrt(),
        }
    }
}
