//! Sequential network executor: forward passes, per-slot feature traces,
//! losses, manual backpropagation and plain SGD.
//!
//! A model is an ordered list of [`LayerSpec`]s. Parameters live in a
//! [`Checkpoint`] under the names `layer{idx}.{weight|bias|scale|shift}`
//! where `idx` is the zero-based position in the layer list.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::speclinalg::Matrix;
use crate::tensorio::{Checkpoint, ParamKind, Tensor};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

// tanh-approximation constants for gelu
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `0.5 x (1 + tanh(sqrt(2/π) (x + 0.044715 x³)))`
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `Y = X·W (+ b)`; `W` is `[in_dim, out_dim]`.
    Linear {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        frozen: bool,
    },
    /// Per-row mean/variance normalization, then scale, then shift.
    Norm {
        dim: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        frozen: bool,
    },
    Activation { kind: Activation },
}

impl LayerSpec {
    fn io_dims(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Linear { in_dim, out_dim, .. } => Some((in_dim, out_dim)),
            LayerSpec::Norm { dim, .. } => Some((dim, dim)),
            LayerSpec::Activation { .. } => None,
        }
    }
}

/// One parameterized slot of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// `Linear → [Norm] → act` repeated `hidden_layers` times, then a linear head.
    pub fn mlp(
        input_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        output_dim: usize,
        norm: bool,
        activation: Activation,
    ) -> Self {
        let mut layers = Vec::new();
        let mut d = input_dim;
        for _ in 0..hidden_layers {
            layers.push(LayerSpec::Linear { in_dim: d, out_dim: hidden, bias: true, frozen: false });
            if norm {
                layers.push(LayerSpec::Norm { dim: hidden, eps: DEFAULT_NORM_EPS, frozen: false });
            }
            layers.push(LayerSpec::Activation { kind: activation });
            d = hidden;
        }
        layers.push(LayerSpec::Linear { in_dim: d, out_dim: output_dim, bias: true, frozen: false });
        Self { input_dim, output_dim, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Spec("input_dim and output_dim must be positive".into()));
        }
        let mut d = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Norm { eps, .. } = layer {
                if !(*eps > 0.0) || !eps.is_finite() {
                    return Err(Error::Spec(format!("layer {i}: eps must be positive, got {eps}")));
                }
            }
            if let Some((din, dout)) = layer.io_dims() {
                if din != d {
                    return Err(Error::Spec(format!("layer {i}: expects input dim {din}, receives {d}")));
                }
                if dout == 0 {
                    return Err(Error::Spec(format!("layer {i}: zero output dim")));
                }
                d = dout;
            }
        }
        if d != self.output_dim {
            return Err(Error::Spec(format!("network produces dim {d}, output_dim is {}", self.output_dim)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    /// All parameterized slots in layer order.
    pub fn slots(&self) -> Vec<SlotInfo> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Linear { in_dim, out_dim, bias, frozen } => {
                    let (wk, bk) = if frozen {
                        (ParamKind::Frozen, ParamKind::Frozen)
                    } else {
                        (ParamKind::LinearWeight, ParamKind::Shift)
                    };
                    out.push(SlotInfo { name: format!("layer{idx}.weight"), kind: wk, shape: vec![in_dim, out_dim], layer: idx });
                    if bias {
                        out.push(SlotInfo { name: format!("layer{idx}.bias"), kind: bk, shape: vec![out_dim], layer: idx });
                    }
                }
                LayerSpec::Norm { dim, frozen, .. } => {
                    let (sk, hk) =
                        if frozen { (ParamKind::Frozen, ParamKind::Frozen) } else { (ParamKind::Scale, ParamKind::Shift) };
                    out.push(SlotInfo { name: format!("layer{idx}.scale"), kind: sk, shape: vec![dim], layer: idx });
                    out.push(SlotInfo { name: format!("layer{idx}.shift"), kind: hk, shape: vec![dim], layer: idx });
                }
                LayerSpec::Activation { .. } => {}
            }
        }
        out
    }

    /// Fresh parameters: He-scaled Gaussian weights, zero biases/shifts, unit scales.
    pub fn init_params(&self, rng: &mut CounterRng) -> Result<Checkpoint> {
        self.validate()?;
        let mut ckpt = Checkpoint::new();
        for slot in self.slots() {
            let n: usize = slot.shape.iter().product();
            let data = if slot.name.ends_with(".weight") {
                let std = (2.0 / slot.shape[0] as f64).sqrt();
                rng.normals(n).into_iter().map(|z| z * std).collect()
            } else if slot.name.ends_with(".scale") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            ckpt.insert(slot.name, slot.kind, Tensor::from_f64(slot.shape, data)?)?;
        }
        Ok(ckpt)
    }

    /// Errors unless `params` has exactly this spec's slots, in order, with
    /// matching kinds and shapes.
    pub fn check_params(&self, params: &Checkpoint) -> Result<()> {
        let slots = self.slots();
        if slots.len() != params.len() {
            return Err(Error::NotAligned(format!(
                "model has {} parameter slots, checkpoint has {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, (name, e)) in slots.iter().zip(params.iter()) {
            if slot.name != name || slot.kind != e.kind || slot.shape != e.tensor.shape() {
                return Err(Error::NotAligned(format!(
                    "expected {} ({}, {:?}), found {} ({}, {:?})",
                    slot.name,
                    slot.kind,
                    slot.shape,
                    name,
                    e.kind,
                    e.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class ids for cross-entropy.
    Labels(Vec<u32>),
    /// Regression targets `[n, output_dim]` for MSE.
    Values(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Option<Targets>,
}

impl Batch {
    pub fn new(x: Matrix, y: Option<Targets>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Shape("batch must contain at least one sample".into()));
        }
        match &y {
            Some(Targets::Labels(l)) if l.len() != x.rows() => {
                return Err(Error::Shape(format!("{} labels for {} samples", l.len(), x.rows())))
            }
            Some(Targets::Values(v)) if v.rows() != x.rows() => {
                return Err(Error::Shape(format!("{} target rows for {} samples", v.rows(), x.rows())))
            }
            _ => {}
        }
        Ok(Self { x, y })
    }

    pub fn unlabeled(x: Matrix) -> Result<Self> {
        Self::new(x, None)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Rows `[0, n)`.
    pub fn head(&self, n: usize) -> Result<Batch> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
        }
        let x = Matrix::from_vec(rows.len(), d, data)?;
        let y = match &self.y {
            None => None,
            Some(Targets::Labels(l)) => Some(Targets::Labels(rows.iter().map(|&r| l[r]).collect())),
            Some(Targets::Values(v)) => {
                let mut vd = Vec::with_capacity(rows.len() * v.cols());
                for &r in rows {
                    vd.extend_from_slice(v.row(r));
                }
                Some(Targets::Values(Matrix::from_vec(rows.len(), v.cols(), vd)?))
            }
        };
        Batch::new(x, y)
    }

    /// Container form: tensor `x` `[n, d]` (f64) and, if labeled, `y`
    /// (`[n]` u32 labels or `[n, m]` f64 targets).
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert("x", ParamKind::Frozen, self.x.to_tensor()?)?;
        match &self.y {
            Some(Targets::Labels(l)) => c.insert("y", ParamKind::Frozen, Tensor::from_u32(vec![l.len()], l.clone())?)?,
            Some(Targets::Values(v)) => c.insert("y", ParamKind::Frozen, v.to_tensor()?)?,
            None => {}
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let x = Matrix::from_tensor(c.tensor("x")?)?;
        let y = match c.get("y") {
            None => None,
            Some(e) => match e.tensor.as_u32() {
                Some(l) => Some(Targets::Labels(l.to_vec())),
                None => Some(Targets::Values(Matrix::from_tensor(&e.tensor)?)),
            },
        };
        Batch::new(x, y)
    }
}

/// Per-slot layer inputs recorded during a forward pass, keyed by slot name.
///
/// * `weight`: the linear layer's input `X` `[n, d_in]`.
/// * linear `bias`: `X·W`, the features the bias is added to.
/// * `scale`: the normalized features before scaling.
/// * norm `shift`: the scaled features before shifting.
pub type FeatureTrace = IndexMap<String, Matrix>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone)]
enum Resolved {
    Linear { w: Matrix, b: Option<Vec<f64>> },
    Norm { scale: Vec<f64>, shift: Vec<f64>, eps: f64 },
    Act(Activation),
}

/// Cached per-layer state needed by the backward pass.
enum Cache {
    Linear { input: Matrix },
    Norm { xhat: Matrix, inv_std: Vec<f64> },
    Act { input: Matrix },
}

/// A model spec bound to concrete parameter values.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Resolved>,
    frozen: Vec<bool>,
    input_dim: usize,
}

fn vec_of(params: &Checkpoint, name: &str) -> Result<Vec<f64>> {
    Ok(params.tensor(name)?.to_f64_vec())
}

impl Network {
    pub fn new(spec: &ModelSpec, params: &Checkpoint) -> Result<Self> {
        spec.validate()?;
        spec.check_params(params)?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut frozen = Vec::with_capacity(spec.layers.len());
        for (idx, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Linear { bias, frozen: fz, .. } => {
                    let w = Matrix::from_tensor(params.tensor(&format!("layer{idx}.weight"))?)?;
                    let b = if bias { Some(vec_of(params, &format!("layer{idx}.bias"))?) } else { None };
                    layers.push(Resolved::Linear { w, b });
                    frozen.push(fz);
                }
                LayerSpec::Norm { eps, frozen: fz, .. } => {
                    layers.push(Resolved::Norm {
                        scale: vec_of(params, &format!("layer{idx}.scale"))?,
                        shift: vec_of(params, &format!("layer{idx}.shift"))?,
                        eps,
                    });
                    frozen.push(fz);
                }
                LayerSpec::Activation { kind } => {
                    layers.push(Resolved::Act(kind));
                    frozen.push(false);
                }
            }
        }
        Ok(Self { layers, frozen, input_dim: spec.input_dim })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!("input has {} features, model expects {}", x.cols(), self.input_dim)));
        }
        Ok(())
    }

    /// Applies layer `idx` to `input` (rows are independent samples).
    pub fn apply_layer(&self, idx: usize, input: &Matrix) -> Result<Matrix> {
        let out = match &self.layers[idx] {
            Resolved::Linear { w, b } => linear(input, w, b.as_deref())?,
            Resolved::Norm { scale, shift, eps } => {
                let (xhat, _) = normalize(input, *eps)?;
                affine(&xhat, scale, shift)
            }
            Resolved::Act(a) => map(input, |v| a.apply(v)),
        };
        if out.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: idx });
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for idx in 0..self.layers.len() {
            h = self.apply_layer(idx, &h)?;
        }
        Ok(h)
    }

    /// Output of every layer; element `l` is the output of layer `l`.
    pub fn layer_outputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(x)?;
        let mut outs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for idx in 0..self.layers.len() {
            let input = if idx == 0 { x } else { &outs[idx - 1] };
            let next = self.apply_layer(idx, input)?;
            outs.push(next);
        }
        Ok(outs)
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, Vec<Cache>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let out = match layer {
                Resolved::Linear { w, b } => {
                    let o = linear(&h, w, b.as_deref())?;
                    caches.push(Cache::Linear { input: h });
                    o
                }
                Resolved::Norm { scale, shift, eps } => {
                    let (xhat, inv_std) = normalize(&h, *eps)?;
                    let o = affine(&xhat, scale, shift);
                    caches.push(Cache::Norm { xhat, inv_std });
                    o
                }
                Resolved::Act(a) => {
                    let o = map(&h, |v| a.apply(v));
                    caches.push(Cache::Act { input: h });
                    o
                }
            };
            if out.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: idx });
            }
            h = out;
        }
        Ok((h, caches))
    }

    /// Loss and gradients for every layer (frozen layers get zeros).
    /// Gradients are returned per slot in spec slot order.
    fn loss_and_grads(&self, batch: &Batch, kind: LossKind) -> Result<(f64, Vec<Vec<f64>>)> {
        let targets = batch.y.as_ref().ok_or_else(|| Error::Missing("batch has no targets".into()))?;
        let (out, caches) = self.forward_cached(&batch.x)?;
        let value = loss(kind, &out, targets)?;
        let mut delta = loss_gradient(kind, &out, targets)?;

        // Gradients collected back-to-front, then reversed.
        let mut grads_rev: Vec<Vec<f64>> = Vec::new();
        for (idx, (layer, cache)) in self.layers.iter().zip(caches.iter()).enumerate().rev() {
            match (layer, cache) {
                (Resolved::Linear { w, b }, Cache::Linear { input }) => {
                    let frozen = self.frozen[idx];
                    if b.is_some() {
                        let mut gb = vec![0.0; delta.cols()];
                        if !frozen {
                            for r in 0..delta.rows() {
                                for (g, &d) in gb.iter_mut().zip(delta.row(r)) {
                                    *g += d;
                                }
                            }
                        }
                        grads_rev.push(gb);
                    }
                    let gw = if frozen {
                        vec![0.0; w.rows() * w.cols()]
                    } else {
                        input.t_matmul(&delta)?.into_vec()
                    };
                    grads_rev.push(gw);
                    delta = delta.matmul_t(w)?;
                }
                (Resolved::Norm { scale, .. }, Cache::Norm { xhat, inv_std }) => {
                    let frozen = self.frozen[idx];
                    let d = scale.len();
                    let mut gscale = vec![0.0; d];
                    let mut gshift = vec![0.0; d];
                    if !frozen {
                        for r in 0..delta.rows() {
                            let dr = delta.row(r);
                            let xr = xhat.row(r);
                            for z in 0..d {
                                gscale[z] += dr[z] * xr[z];
                                gshift[z] += dr[z];
                            }
                        }
                    }
                    grads_rev.push(gshift);
                    grads_rev.push(gscale);
                    let mut dx = Matrix::zeros(delta.rows(), d);
                    for r in 0..delta.rows() {
                        let g: Vec<f64> = delta.row(r).iter().zip(scale).map(|(a, s)| a * s).collect();
                        let xr = xhat.row(r);
                        let mean_g = g.iter().sum::<f64>() / d as f64;
                        let mean_gx = g.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = dx.row_mut(r);
                        for z in 0..d {
                            out[z] = inv_std[r] * (g[z] - mean_g - xr[z] * mean_gx);
                        }
                    }
                    delta = dx;
                }
                (Resolved::Act(a), Cache::Act { input }) => {
                    for (dv, &iv) in delta.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        *dv *= a.derivative(iv);
                    }
                }
                _ => unreachable!("cache matches layer"),
            }
        }
        grads_rev.reverse();
        Ok((value, grads_rev))
    }
}

fn linear(x: &Matrix, w: &Matrix, b: Option<&[f64]>) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        for r in 0..y.rows() {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    Ok(y)
}

/// Row-wise `(x - mean) / sqrt(var + eps)` with the biased variance.
fn normalize(x: &Matrix, eps: f64) -> Result<(Matrix, Vec<f64>)> {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv_std = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        inv.push(inv_std);
    }
    Ok((out, inv))
}

fn affine(xhat: &Matrix, scale: &[f64], shift: &[f64]) -> Matrix {
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((v, s), h) in out.row_mut(r).iter_mut().zip(scale).zip(shift) {
            *v = *v * s + h;
        }
    }
    out
}

fn hadamard_rows(x: &Matrix, v: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (a, s) in out.row_mut(r).iter_mut().zip(v) {
            *a *= s;
        }
    }
    out
}

fn map(x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let data = x.as_slice().iter().map(|&v| f(v)).collect();
    Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

pub fn forward(spec: &ModelSpec, params: &Checkpoint, batch: &Batch) -> Result<Matrix> {
    Network::new(spec, params)?.forward(&batch.x)
}

/// Forward pass that also records every slot's input (see [`FeatureTrace`]).
pub fn forward_collect(spec: &ModelSpec, params: &Checkpoint, batch: &Batch) -> Result<(Matrix, FeatureTrace)> {
    let net = Network::new(spec, params)?;
    net.check_input(&batch.x)?;
    let mut trace = FeatureTrace::new();
    let mut h = batch.x.clone();
    for (idx, layer) in net.layers.iter().enumerate() {
        let out = match layer {
            Resolved::Linear { w, b } => {
                let xw = h.matmul(w)?;
                trace.insert(format!("layer{idx}.weight"), h);
                match b {
                    Some(b) => {
                        let mut out = xw.clone();
                        for r in 0..out.rows() {
                            for (v, bb) in out.row_mut(r).iter_mut().zip(b) {
                                *v += bb;
                            }
                        }
                        trace.insert(format!("layer{idx}.bias"), xw);
                        out
                    }
                    None => xw,
                }
            }
            Resolved::Norm { scale, shift, eps } => {
                let (xhat, _) = normalize(&h, *eps)?;
                let scaled = hadamard_rows(&xhat, scale);
                let out = affine(&xhat, scale, shift);
                trace.insert(format!("layer{idx}.scale"), xhat);
                trace.insert(format!("layer{idx}.shift"), scaled);
                out
            }
            Resolved::Act(a) => map(&h, |v| a.apply(v)),
        };
        if out.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: idx });
        }
        h = out;
    }
    Ok((h, trace))
}

fn check_targets(kind: LossKind, output: &Matrix, targets: &Targets) -> Result<()> {
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Labels(l)) => {
            if l.len() != output.rows() {
                return Err(Error::Shape(format!("{} labels for {} outputs", l.len(), output.rows())));
            }
            if let Some(&bad) = l.iter().find(|&&c| c as usize >= output.cols()) {
                return Err(Error::LabelOutOfRange { label: bad, classes: output.cols() });
            }
            Ok(())
        }
        (LossKind::Mse, Targets::Values(v)) => {
            if v.rows() != output.rows() || v.cols() != output.cols() {
                return Err(Error::Shape(format!(
                    "targets {}x{} vs outputs {}x{}",
                    v.rows(),
                    v.cols(),
                    output.rows(),
                    output.cols()
                )));
            }
            Ok(())
        }
        (LossKind::CrossEntropy, Targets::Values(_)) => {
            Err(Error::Shape("cross-entropy needs class labels".into()))
        }
        (LossKind::Mse, Targets::Labels(_)) => Err(Error::Shape("mse needs value targets".into())),
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Loss of each sample; the batch loss is their mean.
pub fn per_sample_loss(kind: LossKind, output: &Matrix, targets: &Targets) -> Result<Vec<f64>> {
    check_targets(kind, output, targets)?;
    Ok(match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Labels(l)) => {
            (0..output.rows()).map(|r| -log_softmax_row(output.row(r))[l[r] as usize]).collect()
        }
        (LossKind::Mse, Targets::Values(v)) => (0..output.rows())
            .map(|r| {
                output.row(r).iter().zip(v.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    / output.cols() as f64
            })
            .collect(),
        _ => unreachable!("checked"),
    })
}

/// Mean cross-entropy (log-softmax applied internally) or mean squared error
/// over all output elements.
pub fn loss(kind: LossKind, output: &Matrix, targets: &Targets) -> Result<f64> {
    let per = per_sample_loss(kind, output, targets)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn loss_gradient(kind: LossKind, output: &Matrix, targets: &Targets) -> Result<Matrix> {
    check_targets(kind, output, targets)?;
    let n = output.rows() as f64;
    let mut g = Matrix::zeros(output.rows(), output.cols());
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Labels(l)) => {
            for r in 0..output.rows() {
                let ls = log_softmax_row(output.row(r));
                let gr = g.row_mut(r);
                for (c, v) in ls.iter().enumerate() {
                    gr[c] = v.exp() / n;
                }
                gr[l[r] as usize] -= 1.0 / n;
            }
        }
        (LossKind::Mse, Targets::Values(v)) => {
            let scale = 2.0 / (n * output.cols() as f64);
            for (gv, (a, b)) in g.as_mut_slice().iter_mut().zip(output.as_slice().iter().zip(v.as_slice())) {
                *gv = scale * (a - b);
            }
        }
        _ => unreachable!("checked"),
    }
    Ok(g)
}

/// Loss value and gradient checkpoint (aligned to `params`, `f64`).
pub fn loss_and_backward(
    spec: &ModelSpec,
    params: &Checkpoint,
    batch: &Batch,
    loss_kind: LossKind,
) -> Result<(f64, Checkpoint)> {
    let net = Network::new(spec, params)?;
    let (value, grads) = net.loss_and_grads(batch, loss_kind)?;
    let mut out = Checkpoint::new();
    for ((name, e), g) in params.iter().zip(grads) {
        out.insert(name, e.kind, Tensor::from_f64(e.tensor.shape().to_vec(), g)?)?;
    }
    Ok((value, out))
}

pub fn backward(spec: &ModelSpec, params: &Checkpoint, batch: &Batch, loss_kind: LossKind) -> Result<Checkpoint> {
    loss_and_backward(spec, params, batch, loss_kind).map(|(_, g)| g)
}

/// `params − lr · grads`, elementwise.
pub fn sgd_step(params: &Checkpoint, grads: &Checkpoint, lr: f64) -> Result<Checkpoint> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be a finite non-negative number, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::NotAligned(format!("{} params vs {} grads", params.len(), grads.len())));
    }
    let mut out = Checkpoint::new();
    out.meta = params.meta.clone();
    for ((name, p), (gname, g)) in params.iter().zip(grads.iter()) {
        if name != gname || p.tensor.shape() != g.tensor.shape() {
            return Err(Error::NotAligned(format!("{name} vs {gname}")));
        }
        let gv = g.tensor.to_f64_vec();
        let data: Vec<f64> = p.tensor.to_f64_vec().iter().zip(&gv).map(|(a, b)| a - lr * b).collect();
        out.insert(name, p.kind, Tensor::from_f64(p.tensor.shape().to_vec(), data)?)?;
    }
    Ok(out)
}
