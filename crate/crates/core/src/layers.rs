//! Layer parameter containers and their forward passes on a [`Graph`].

use rand::Rng;

use crate::autograd::{BnRecord, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    BatchNorm2d,
    Conv2d,
}

/// Handles to the parameters of one layer inside a [`ParamStore`].
///
/// For BatchNorm `weight`/`bias` are the affine scale and shift and
/// `running` holds the mean and variance buffers.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: ParamId,
    pub bias: ParamId,
    pub running: Option<(ParamId, ParamId)>,
    pub eps: f64,
    pub momentum: f64,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

impl LayerParams {
    /// Fully connected layer, weight `[f_out, f_in]`, uniform init in `±1/sqrt(f_in)`.
    pub fn linear(store: &mut ParamStore, name: &str, f_in: usize, f_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (f_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, vec![f_out, f_in], bound), true)?;
        let bias = store.add(format!("{name}.bias"), uniform(rng, vec![f_out], bound), true)?;
        Ok(Self {
            kind: LayerKind::Linear,
            weight,
            bias,
            running: None,
            eps: 0.0,
            momentum: 0.0,
            kernel: 0,
            stride: 0,
            padding: 0,
        })
    }

    /// Convolution with weight `[f_out, f_in, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((f_in * kernel * kernel).max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, vec![f_out, f_in, kernel, kernel], bound),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), uniform(rng, vec![f_out], bound), true)?;
        Ok(Self {
            kind: LayerKind::Conv2d,
            weight,
            bias,
            running: None,
            eps: 0.0,
            momentum: 0.0,
            kernel,
            stride,
            padding,
        })
    }

    pub fn batch_norm(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::ones(vec![channels]), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![channels]), true)?;
        let mean = store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), false)?;
        let var = store.add(format!("{name}.running_var"), Tensor::ones(vec![channels]), false)?;
        Ok(Self {
            kind: LayerKind::BatchNorm2d,
            weight,
            bias,
            running: Some((mean, var)),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            kernel: 0,
            stride: 0,
            padding: 0,
        })
    }

    pub fn in_features(&self, store: &ParamStore) -> usize {
        let s = store.value(self.weight).shape();
        match self.kind {
            LayerKind::Linear | LayerKind::Conv2d => s[1],
            LayerKind::BatchNorm2d => s[0],
        }
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }

    /// Trainable scalars owned by this layer.
    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        store.value(self.weight).numel() + store.value(self.bias).numel()
    }
}

pub fn linear_forward(g: &mut Graph, store: &ParamStore, x: Var, layer: &LayerParams) -> Result<Var> {
    let w = g.param(store, layer.weight);
    let b = g.param(store, layer.bias);
    g.linear(x, w, b)
}

/// Applies a chain of linear layers row-wise, with ReLU after every layer
/// except optionally the last.
pub fn mlp_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    layers: &[LayerParams],
    relu_last: bool,
) -> Result<Var> {
    let mut h = x;
    for (index, layer) in layers.iter().enumerate() {
        let fin = layer.in_features(store);
        let width = g.shape(h).get(1).copied();
        if layer.kind != LayerKind::Linear || width != Some(fin) {
            return Err(Error::Layer {
                index,
                msg: format!("expects {fin} input features, got shape {:?}", g.shape(h)),
            });
        }
        h = linear_forward(g, store, h, layer)?;
        if relu_last || index + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

pub fn batch_norm_forward(g: &mut Graph, store: &ParamStore, x: Var, bn: &LayerParams, mode: Mode) -> Result<Var> {
    let (mean_id, var_id) = bn
        .running
        .ok_or_else(|| Error::Shape("batch norm layer without running statistics".into()))?;
    let gamma = g.param(store, bn.weight);
    let beta = g.param(store, bn.bias);
    match mode {
        Mode::Train => {
            let (out, mean, var) = g.batch_norm_train(x, gamma, beta, bn.eps)?;
            g.record_bn(BnRecord {
                running_mean: mean_id,
                running_var: var_id,
                mean,
                var,
            });
            Ok(out)
        }
        Mode::Eval => g.batch_norm_eval(
            x,
            gamma,
            beta,
            store.value(mean_id).data(),
            store.value(var_id).data(),
            bn.eps,
        ),
    }
}

pub fn conv2d_forward(g: &mut Graph, store: &ParamStore, x: Var, conv: &LayerParams) -> Result<Var> {
    let w = g.param(store, conv.weight);
    let b = g.param(store, conv.bias);
    g.conv2d(x, w, b, conv.stride, conv.padding)
}

/// Convolution, BatchNorm, then ReLU.
pub fn conv2d_bn_relu(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    conv: &LayerParams,
    bn: &LayerParams,
    mode: Mode,
) -> Result<Var> {
    let y = conv2d_forward(g, store, x, conv)?;
    let y = batch_norm_forward(g, store, y, bn, mode)?;
    g.relu(y)
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_records(store: &mut ParamStore, records: &[BnRecord], momentum: f64) {
    for r in records {
        for (id, batch) in [(r.running_mean, &r.mean), (r.running_var, &r.var)] {
            let running = store.get_mut(id).value.data_mut();
            for (v, b) in running.iter_mut().zip(batch) {
                *v = (1.0 - momentum) * *v + momentum * b;
            }
        }
    }
}

/// A stack of linear layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<LayerParams>,
    pub relu_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        sizes: &[usize],
        relu_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut fin = f_in;
        for (i, &fout) in sizes.iter().enumerate() {
            layers.push(LayerParams::linear(store, &format!("{name}.{i}"), fin, fout, rng)?);
            fin = fout;
        }
        Ok(Self { layers, relu_last })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        mlp_forward(g, store, x, &self.layers, self.relu_last)
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        self.layers.last().map_or(0, |l| l.out_features(store))
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        self.layers.iter().map(|l| l.trainable_count(store)).sum()
    }
}

/// A convolution followed by BatchNorm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: LayerParams,
    pub bn: LayerParams,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: LayerParams::conv2d(store, &format!("{name}.conv"), f_in, f_out, kernel, stride, padding, rng)?,
            bn: LayerParams::batch_norm(store, &format!("{name}.bn"), f_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        conv2d_bn_relu(g, store, x, &self.conv, &self.bn, mode)
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        self.conv.trainable_count(store) + self.bn.trainable_count(store)
    }
}
