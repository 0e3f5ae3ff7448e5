//! Segmentation networks as a small static graph with explicit backward.

use std::sync::Arc;

use ndarray::{s, Array2, Array3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Architecture, LayoutBuilder, NetworkSpec, ParamEntry, ParamKind, ParameterVector};
use crate::data::reflect_pad;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, BnCache, Tensor};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Foreground probabilities, one per input pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap(pub Array2<f64>);

/// Activation of the latent tap for one image, `channels × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentActivation(pub Array3<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization.
    Train,
    /// Running statistics for normalization.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    ConvTranspose2x2,
}

/// One weighted layer of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub batch_norm: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { src: usize, weight: usize, bias: usize, k: usize, out_c: usize },
    ConvTranspose { src: usize, weight: usize, bias: usize, out_c: usize },
    BatchNorm { src: usize, scale: usize, shift: usize, mean: usize, var: usize },
    Relu { src: usize },
    MaxPool { src: usize },
    Concat { a: usize, b: usize },
    Sigmoid { src: usize },
}

struct GraphBuilder {
    ops: Vec<Op>,
    channels: Vec<usize>,
    params: LayoutBuilder,
    layers: Vec<LayerInfo>,
    /// Node holding each weighted layer's post-activation output.
    layer_outputs: Vec<usize>,
}

impl GraphBuilder {
    fn new(input_channels: usize) -> Self {
        Self {
            ops: vec![Op::Input],
            channels: vec![input_channels],
            params: LayoutBuilder::default(),
            layers: Vec::new(),
            layer_outputs: Vec::new(),
        }
    }

    fn node(&mut self, op: Op, channels: usize) -> usize {
        self.ops.push(op);
        self.channels.push(channels);
        self.ops.len() - 1
    }

    fn batch_norm(&mut self, name: &str, src: usize) -> usize {
        let c = self.channels[src];
        let scale = self.params.push(format!("{name}.bn.scale"), ParamKind::BnScale, vec![c]);
        let shift = self.params.push(format!("{name}.bn.shift"), ParamKind::BnShift, vec![c]);
        let mean = self.params.push(format!("{name}.bn.running_mean"), ParamKind::RunningMean, vec![c]);
        let var = self.params.push(format!("{name}.bn.running_var"), ParamKind::RunningVar, vec![c]);
        self.node(Op::BatchNorm { src, scale, shift, mean, var }, c)
    }

    /// Convolution, optionally followed by batch norm and ReLU.
    fn conv(&mut self, name: &str, src: usize, out_c: usize, k: usize, bn_relu: bool) -> usize {
        let in_c = self.channels[src];
        let weight = self.params.push(format!("{name}.weight"), ParamKind::Weight, vec![out_c, in_c, k, k]);
        let bias = self.params.push(format!("{name}.bias"), ParamKind::Bias, vec![out_c]);
        let mut n = self.node(Op::Conv { src, weight, bias, k, out_c }, out_c);
        if bn_relu {
            n = self.batch_norm(name, n);
            n = self.node(Op::Relu { src: n }, out_c);
        }
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: if k == 3 { LayerKind::Conv3x3 } else { LayerKind::Conv1x1 },
            in_channels: in_c,
            out_channels: out_c,
            batch_norm: bn_relu,
        });
        self.layer_outputs.push(n);
        n
    }

    fn up(&mut self, name: &str, src: usize, out_c: usize, bn_relu: bool) -> usize {
        let in_c = self.channels[src];
        let weight = self.params.push(format!("{name}.weight"), ParamKind::Weight, vec![in_c, out_c, 2, 2]);
        let bias = self.params.push(format!("{name}.bias"), ParamKind::Bias, vec![out_c]);
        let mut n = self.node(Op::ConvTranspose { src, weight, bias, out_c }, out_c);
        if bn_relu {
            n = self.batch_norm(name, n);
            n = self.node(Op::Relu { src: n }, out_c);
        }
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: LayerKind::ConvTranspose2x2,
            in_channels: in_c,
            out_channels: out_c,
            batch_norm: bn_relu,
        });
        self.layer_outputs.push(n);
        n
    }

    fn pool(&mut self, src: usize) -> usize {
        let c = self.channels[src];
        self.node(Op::MaxPool { src }, c)
    }
}

/// An encoder–decoder segmentation network. Holds the graph only; all
/// parameters and running statistics live in a [`ParameterVector`].
#[derive(Debug, Clone)]
pub struct SegmentationNetwork {
    spec: NetworkSpec,
    ops: Vec<Op>,
    channels: Vec<usize>,
    layout: Arc<Vec<ParamEntry>>,
    layers: Vec<LayerInfo>,
    latent_node: usize,
    output_node: usize,
}

/// Cached activations of one batched forward pass.
pub struct BatchForward {
    outputs: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
    pool: Vec<Option<Vec<usize>>>,
    crop: (usize, usize, usize, usize),
    mode: Mode,
    /// Output probabilities cropped back to the input size.
    pub predictions: Vec<PredictionMap>,
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// Builds a network and its initial parameters.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<(SegmentationNetwork, ParameterVector)> {
    let net = SegmentationNetwork::new(spec.clone())?;
    let params = net.init_parameters(seed);
    Ok((net, params))
}

impl SegmentationNetwork {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut g = GraphBuilder::new(spec.input_channels);
        let width = |i: usize| spec.base_width << i;
        let d = spec.depth;
        let mut x = 0;
        let output;
        match spec.architecture {
            Architecture::Fcrn => {
                for i in 0..d {
                    x = g.conv(&format!("enc{i}"), x, width(i), 3, true);
                    x = g.pool(x);
                }
                x = g.conv("bottleneck", x, width(d), 3, true);
                for i in (0..d).rev() {
                    x = g.up(&format!("dec{i}"), x, width(i), true);
                }
                output = g.conv("head", x, 1, 1, false);
            }
            Architecture::UNetLight => {
                let mut skips = Vec::with_capacity(d);
                for i in 0..d {
                    x = g.conv(&format!("enc{i}"), x, width(i), 3, true);
                    skips.push(x);
                    x = g.pool(x);
                }
                x = g.conv("bottleneck0", x, width(d), 3, true);
                x = g.conv("bottleneck1", x, width(d), 3, true);
                for i in (0..d).rev() {
                    let up = g.up(&format!("up{i}"), x, width(i), false);
                    let c = g.channels[skips[i]] + g.channels[up];
                    let cat = g.node(Op::Concat { a: skips[i], b: up }, c);
                    x = g.conv(&format!("dec{i}"), cat, width(i), 3, true);
                }
                output = g.conv("head", x, 1, 1, false);
            }
            Architecture::TwoLayer => {
                x = g.conv("conv", x, spec.base_width, 3, true);
                output = g.conv("head", x, 1, 1, false);
            }
        }
        let bottleneck = match spec.architecture {
            Architecture::Fcrn => d,
            Architecture::UNetLight => d + 1,
            Architecture::TwoLayer => 0,
        };
        let tap = spec.latent_tap.unwrap_or(bottleneck);
        let latent_node = g.layer_outputs[tap];
        let sig = g.node(Op::Sigmoid { src: output }, 1);
        debug_assert_eq!(g.layers.len(), spec.weighted_layer_count());
        Ok(Self {
            spec,
            ops: g.ops,
            channels: g.channels,
            layout: g.params.finish(),
            layers: g.layers,
            latent_node,
            output_node: sig,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Vec<ParamEntry>> {
        &self.layout
    }

    /// The weighted layers in build order.
    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    /// Spatial multiple the input is padded to.
    pub fn pad_multiple(&self) -> usize {
        1 << self.spec.effective_depth()
    }

    /// He-style fan-in initialization for convolution weights, zero biases,
    /// unit batch-norm scale and running variance.
    pub fn init_parameters(&self, seed: u64) -> ParameterVector {
        let mut p = ParameterVector::zeros(self.layout.clone());
        for (i, e) in self.layout.iter().enumerate() {
            let fill = match e.kind {
                ParamKind::Weight => {
                    let fan_in = match e.shape.as_slice() {
                        // transposed conv [in, out, 2, 2]: each output sees `in` taps
                        [cin, _, 2, 2] => *cin,
                        [_, cin, k, k2] => cin * k * k2,
                        _ => 1,
                    };
                    let gain = if e.name.starts_with("head") { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                    let mut r = rng::stream_for(seed, &[rng::tag(&e.name)]);
                    p.slice_mut(i).iter_mut().for_each(|v| *v = normal.sample(&mut r));
                    continue;
                }
                ParamKind::BnScale | ParamKind::RunningVar => 1.0,
                _ => 0.0,
            };
            p.slice_mut(i).fill(fill);
        }
        p
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if Arc::ptr_eq(params.layout(), &self.layout) || **params.layout() == *self.layout {
            Ok(())
        } else {
            Err(Error::arg("parameter vector does not match this network"))
        }
    }

    fn input_tensor(&self, images: &[&Array2<f64>]) -> Result<(Tensor, (usize, usize, usize, usize))> {
        if self.spec.input_channels != 1 {
            return Err(Error::arg("image inputs require a single-channel network"));
        }
        let Some(first) = images.first() else {
            return Err(Error::arg("empty image batch"));
        };
        let (h, w) = first.dim();
        if h == 0 || w == 0 {
            return Err(Error::arg("empty image"));
        }
        let m = self.pad_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let (top, left) = ((ph - h) / 2, (pw - w) / 2);
        let mut t = Tensor::zeros(images.len(), 1, ph, pw);
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (h, w) {
                return Err(Error::arg("images in one batch must share their size"));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg("non-finite input intensity"));
            }
            let padded = reflect_pad(img, ph, pw);
            t.data[i * ph * pw..(i + 1) * ph * pw].iter_mut().zip(padded.iter()).for_each(|(d, s)| *d = *s);
        }
        Ok((t, (top, left, h, w)))
    }

    /// Runs the network on a batch of equally sized images and keeps the
    /// activations needed by [`Self::backward`].
    pub fn forward_batch(&self, params: &ParameterVector, images: &[&Array2<f64>], mode: Mode) -> Result<BatchForward> {
        self.check_params(params)?;
        let (input, crop) = self.input_tensor(images)?;
        let n_nodes = self.ops.len();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(n_nodes);
        let mut bn = vec![None; n_nodes];
        let mut pool = vec![None; n_nodes];
        let mut input = Some(input);
        for (id, op) in self.ops.iter().enumerate() {
            let out = match *op {
                Op::Input => input.take().expect("single input node"),
                Op::Conv { src, weight, bias, k, out_c } => {
                    tensor::conv_forward(&outputs[src], params.slice(weight), params.slice(bias), out_c, k)
                }
                Op::ConvTranspose { src, weight, bias, out_c } => {
                    tensor::conv_transpose_forward(&outputs[src], params.slice(weight), params.slice(bias), out_c)
                }
                Op::BatchNorm { src, scale, shift, mean, var } => {
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((params.slice(mean), params.slice(var))),
                    };
                    let (y, cache) =
                        tensor::batch_norm_forward(&outputs[src], params.slice(scale), params.slice(shift), running);
                    bn[id] = Some(cache);
                    y
                }
                Op::Relu { src } => tensor::relu_forward(&outputs[src]),
                Op::MaxPool { src } => {
                    let (y, arg) = tensor::max_pool_forward(&outputs[src]);
                    pool[id] = Some(arg);
                    y
                }
                Op::Concat { a, b } => tensor::concat_forward(&outputs[a], &outputs[b]),
                Op::Sigmoid { src } => tensor::sigmoid_forward(&outputs[src]),
            };
            outputs.push(out);
        }
        let (top, left, h, w) = crop;
        let out = &outputs[self.output_node];
        let predictions = (0..out.n)
            .map(|i| {
                let full = Array2::from_shape_vec((out.h, out.w), out.sample(i).to_vec()).expect("output plane shape");
                PredictionMap(full.slice(s![top..top + h, left..left + w]).to_owned())
            })
            .collect();
        Ok(BatchForward { outputs, bn, pool, crop, mode, predictions })
    }

    /// Latent activations of every image in a forward batch.
    pub fn latents(&self, fwd: &BatchForward) -> Vec<LatentActivation> {
        let t = &fwd.outputs[self.latent_node];
        (0..t.n)
            .map(|i| {
                LatentActivation(Array3::from_shape_vec((t.c, t.h, t.w), t.sample(i).to_vec()).expect("latent shape"))
            })
            .collect()
    }

    pub fn forward(&self, params: &ParameterVector, image: &Array2<f64>, mode: Mode) -> Result<PredictionMap> {
        let mut fwd = self.forward_batch(params, &[image], mode)?;
        Ok(fwd.predictions.pop().expect("one prediction"))
    }

    pub fn forward_with_latent(
        &self,
        params: &ParameterVector,
        image: &Array2<f64>,
        mode: Mode,
    ) -> Result<(PredictionMap, LatentActivation)> {
        let mut fwd = self.forward_batch(params, &[image], mode)?;
        let latent = self.latents(&fwd).pop().expect("one latent");
        Ok((fwd.predictions.pop().expect("one prediction"), latent))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient at the (cropped) predictions and/or at the latent tap.
    /// Entries for running statistics are zero.
    pub fn backward(
        &self,
        params: &ParameterVector,
        fwd: &BatchForward,
        d_predictions: Option<&[Array2<f64>]>,
        d_latents: Option<&[Array3<f64>]>,
    ) -> Result<ParameterVector> {
        self.check_params(params)?;
        let n = fwd.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        if let Some(dp) = d_predictions {
            if dp.len() != n {
                return Err(Error::arg("prediction gradient count differs from batch size"));
            }
            let out = &fwd.outputs[self.output_node];
            let (top, left, h, w) = fwd.crop;
            let mut g = Tensor::zeros(n, 1, out.h, out.w);
            for (i, d) in dp.iter().enumerate() {
                if d.dim() != (h, w) {
                    return Err(Error::arg("prediction gradient has the wrong shape"));
                }
                for y in 0..h {
                    for x in 0..w {
                        g.data[i * out.h * out.w + (top + y) * out.w + left + x] = d[[y, x]];
                    }
                }
            }
            grads[self.output_node] = Some(g);
        }
        if let Some(dl) = d_latents {
            let lat = &fwd.outputs[self.latent_node];
            if dl.len() != n || dl.iter().any(|d| d.dim() != (lat.c, lat.h, lat.w)) {
                return Err(Error::arg("latent gradient has the wrong shape"));
            }
            let mut g = Tensor::zeros(n, lat.c, lat.h, lat.w);
            for (i, d) in dl.iter().enumerate() {
                g.data[i * lat.sample_len()..(i + 1) * lat.sample_len()]
                    .iter_mut()
                    .zip(d.iter())
                    .for_each(|(a, b)| *a = *b);
            }
            accumulate(&mut grads[self.latent_node], g);
        }

        let mut pg = ParameterVector::zeros(self.layout.clone());
        for id in (1..self.ops.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match self.ops[id] {
                Op::Input => {}
                Op::Conv { src, weight, bias, k, .. } => {
                    let need_dx = src != 0;
                    let (dx, dw, db) = tensor::conv_backward(&fwd.outputs[src], params.slice(weight), &g, k, need_dx);
                    add_into(pg.slice_mut(weight), &dw);
                    add_into(pg.slice_mut(bias), &db);
                    if let Some(dx) = dx {
                        accumulate(&mut grads[src], dx);
                    }
                }
                Op::ConvTranspose { src, weight, bias, .. } => {
                    let (dx, dw, db) = tensor::conv_transpose_backward(&fwd.outputs[src], params.slice(weight), &g);
                    add_into(pg.slice_mut(weight), &dw);
                    add_into(pg.slice_mut(bias), &db);
                    accumulate(&mut grads[src], dx);
                }
                Op::BatchNorm { src, scale, shift, .. } => {
                    let cache = fwd.bn[id].as_ref().expect("batch-norm cache");
                    let (dx, dgamma, dbeta) = tensor::batch_norm_backward(&g, params.slice(scale), cache);
                    add_into(pg.slice_mut(scale), &dgamma);
                    add_into(pg.slice_mut(shift), &dbeta);
                    accumulate(&mut grads[src], dx);
                }
                Op::Relu { src } => {
                    let dx = tensor::relu_backward(&fwd.outputs[id], &g);
                    accumulate(&mut grads[src], dx);
                }
                Op::MaxPool { src } => {
                    let arg = fwd.pool[id].as_ref().expect("pool indices");
                    let dx = tensor::max_pool_backward(&fwd.outputs[src], arg, &g);
                    accumulate(&mut grads[src], dx);
                }
                Op::Concat { a, b } => {
                    let (da, db) = tensor::concat_backward(self.channels[a], &g);
                    accumulate(&mut grads[a], da);
                    accumulate(&mut grads[b], db);
                }
                Op::Sigmoid { src } => {
                    let dx = tensor::sigmoid_backward(&fwd.outputs[id], &g);
                    accumulate(&mut grads[src], dx);
                }
            }
        }
        Ok(pg)
    }

    /// Blends the batch statistics of a train-mode forward pass into the
    /// running statistics held in `params`.
    pub fn update_running_stats(&self, params: &mut ParameterVector, fwd: &BatchForward, momentum: f64) {
        if fwd.mode != Mode::Train {
            return;
        }
        for (id, op) in self.ops.iter().enumerate() {
            if let Op::BatchNorm { mean, var, .. } = *op {
                let cache = fwd.bn[id].as_ref().expect("batch-norm cache");
                for (r, b) in params.slice_mut(mean).iter_mut().zip(&cache.mean) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
                for (r, b) in params.slice_mut(var).iter_mut().zip(&cache.var_unbiased) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// A network together with its current parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: SegmentationNetwork,
    params: ParameterVector,
}

impl Model {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let (network, params) = build_network(spec, seed)?;
        Ok(Self { network, params })
    }

    pub fn get_parameters(&self) -> ParameterVector {
        self.params.clone()
    }

    pub fn parameters(&self) -> &ParameterVector {
        &self.params
    }

    /// Replaces the parameters; names and shapes must match the network.
    pub fn set_parameters(&mut self, params: ParameterVector) -> Result<()> {
        self.network.check_params(&params)?;
        if !params.is_finite() {
            return Err(Error::arg("parameters contain non-finite values"));
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, image: &Array2<f64>, mode: Mode) -> Result<PredictionMap> {
        self.network.forward(&self.params, image, mode)
    }

    pub fn forward_with_latent(&self, image: &Array2<f64>, mode: Mode) -> Result<(PredictionMap, LatentActivation)> {
        self.network.forward_with_latent(&self.params, image, mode)
    }
}
