//! Differentiable building blocks for the trading agents: dense, gated
//! recurrent, 1-D convolution and softmax layers in 64-bit floats, exact
//! reverse-mode gradients, an adaptive-moment optimizer, an L1 penalty,
//! and a finite-difference gradient checker.
//!
//! Data between layers is a `Tensor3` shaped rows x steps x features:
//! rows index stocks, steps index time. Recurrent layers run along the
//! step axis with weights shared across rows; the convolution runs along
//! the row axis (mixing neighboring stocks) once time is collapsed;
//! dense layers act per row, or on the whole flattened tensor when
//! `flatten` is set. Softmax normalizes each row and may only terminate
//! a network.
//!
//! Parameter arrays are named `l{index}.{part}` where part is `w`/`b`
//! for dense and convolution layers and `wx`/`wh`/`b` for recurrent
//! layers. Everything keyed by name iterates in sorted order, so
//! checkpoints and updates are reproducible.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, Tensor3};
use crate::math;
use crate::rng;

/// Elementwise nonlinearity applied after dense and convolution layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => math::tanh(x),
        }
    }

    /// Derivative expressed through the activation's own output, which
    /// is all the cache keeps.
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// One layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Affine map per row, or on the flattened tensor when `flatten`.
    /// `zero_init` starts weights and bias at zero, which makes a
    /// terminal policy head uniform and a value head zero.
    Dense { input: usize, output: usize, activation: Activation, flatten: bool, zero_init: bool },
    /// Gated memory cell (input/forget/output gates, tanh candidate)
    /// over the step axis. Emits every step or only the last one.
    Recurrent { input: usize, hidden: usize, return_sequence: bool },
    /// Convolution along the row axis with odd kernel and zero padding,
    /// so output rows match input rows.
    Conv1d { input: usize, output: usize, kernel: usize, activation: Activation },
    /// Row-wise softmax; terminal only.
    Softmax,
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Recurrent { .. } => "recurrent",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Ordered layers of one network.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { input, output, .. } => {
                    if input == 0 || output == 0 {
                        return Err(Error::Parameter(format!(
                            "layer {i} (dense): zero-sized input or output"
                        )));
                    }
                }
                LayerSpec::Recurrent { input, hidden, .. } => {
                    if input == 0 || hidden == 0 {
                        return Err(Error::Parameter(format!(
                            "layer {i} (recurrent): zero-sized input or hidden"
                        )));
                    }
                }
                LayerSpec::Conv1d { input, output, kernel, .. } => {
                    if input == 0 || output == 0 {
                        return Err(Error::Parameter(format!(
                            "layer {i} (conv1d): zero-sized channels"
                        )));
                    }
                    if kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::Parameter(format!(
                            "layer {i} (conv1d): kernel must be odd, got {kernel}"
                        )));
                    }
                }
                LayerSpec::Softmax => {
                    if i + 1 != layers.len() {
                        return Err(Error::Parameter(format!(
                            "layer {i} (softmax): softmax must be terminal"
                        )));
                    }
                }
            }
        }
        Ok(NetworkSpec { layers })
    }

    /// Walks the layer chain from a concrete input shape, validating
    /// compatibility, and returns the output shape.
    pub fn output_shape(
        &self,
        rows: usize,
        steps: usize,
        feat: usize,
    ) -> Result<(usize, usize, usize)> {
        let mut shape = (rows, steps, feat);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer_output_shape(i, layer, shape)?;
        }
        Ok(shape)
    }
}

fn shape_err(i: usize, layer: &LayerSpec, msg: String) -> Error {
    Error::Shape(format!("layer {i} ({}): {msg}", layer.kind()))
}

fn layer_output_shape(
    i: usize,
    layer: &LayerSpec,
    (rows, steps, feat): (usize, usize, usize),
) -> Result<(usize, usize, usize)> {
    if rows == 0 || steps == 0 || feat == 0 {
        return Err(shape_err(i, layer, format!("empty input {rows}x{steps}x{feat}")));
    }
    match *layer {
        LayerSpec::Dense { input, output, flatten, .. } => {
            if steps != 1 {
                return Err(shape_err(i, layer, format!("expected collapsed steps, got {steps}")));
            }
            let got = if flatten { rows * feat } else { feat };
            if got != input {
                return Err(shape_err(i, layer, format!("expected {input} inputs, got {got}")));
            }
            if flatten {
                Ok((1, 1, output))
            } else {
                Ok((rows, 1, output))
            }
        }
        LayerSpec::Recurrent { input, hidden, return_sequence } => {
            if feat != input {
                return Err(shape_err(i, layer, format!("expected {input} features, got {feat}")));
            }
            Ok((rows, if return_sequence { steps } else { 1 }, hidden))
        }
        LayerSpec::Conv1d { input, output, .. } => {
            if steps != 1 {
                return Err(shape_err(i, layer, format!("expected collapsed steps, got {steps}")));
            }
            if feat != input {
                return Err(shape_err(i, layer, format!("expected {input} channels, got {feat}")));
            }
            Ok((rows, 1, output))
        }
        LayerSpec::Softmax => {
            if steps != 1 {
                return Err(shape_err(i, layer, format!("expected collapsed steps, got {steps}")));
            }
            Ok((rows, 1, feat))
        }
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Array { shape, data: vec![0.0; len] }
    }
}

/// Named parameter arrays; also the container for gradients and
/// optimizer moments, which share the parameter shapes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub arrays: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        let arrays = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), Array::zeros(a.shape.clone())))
            .collect();
        ParamSet { arrays }
    }

    fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Validation(format!("parameter array {name} missing")))
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.arrays.values().map(|a| a.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In-place elementwise a += scale * b over matching arrays.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        for (name, arr) in &mut self.arrays {
            let src = other.get(name)?;
            if src.data.len() != arr.data.len() {
                return Err(Error::Shape(format!("array {name} length mismatch")));
            }
            for (a, b) in arr.data.iter_mut().zip(&src.data) {
                *a += scale * b;
            }
        }
        Ok(())
    }
}

fn glorot(stream: &mut rng::Stream, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Array {
    let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng::uniform(stream, -bound, bound)).collect();
    Array { shape, data }
}

/// Fresh parameters for `spec`: weights uniform in
/// +-sqrt(6/(fan_in+fan_out)), biases zero, layers drawn in order so a
/// fixed stream reproduces them bit for bit.
pub fn init_params(spec: &NetworkSpec, stream: &mut rng::Stream) -> ParamSet {
    let mut arrays = BTreeMap::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { input, output, zero_init, .. } => {
                let w = if zero_init {
                    Array::zeros(vec![output, input])
                } else {
                    glorot(stream, input, output, vec![output, input])
                };
                arrays.insert(format!("l{i}.w"), w);
                arrays.insert(format!("l{i}.b"), Array::zeros(vec![output]));
            }
            LayerSpec::Recurrent { input, hidden, .. } => {
                arrays.insert(
                    format!("l{i}.wx"),
                    glorot(stream, input, hidden, vec![4 * hidden, input]),
                );
                arrays.insert(
                    format!("l{i}.wh"),
                    glorot(stream, hidden, hidden, vec![4 * hidden, hidden]),
                );
                arrays.insert(format!("l{i}.b"), Array::zeros(vec![4 * hidden]));
            }
            LayerSpec::Conv1d { input, output, kernel, .. } => {
                arrays.insert(
                    format!("l{i}.w"),
                    glorot(stream, kernel * input, output, vec![output, kernel * input]),
                );
                arrays.insert(format!("l{i}.b"), Array::zeros(vec![output]));
            }
            LayerSpec::Softmax => {}
        }
    }
    ParamSet { arrays }
}

/// Per-row saved state of one recurrent pass: hidden and cell chains
/// including the zero initial step, gate activations, and tanh(c).
#[derive(Debug)]
struct RecurrentRowCache {
    /// (steps+1) x hidden, row 0 is the zero initial state.
    hs: Vec<f64>,
    /// (steps+1) x hidden, row 0 is the zero initial cell.
    cs: Vec<f64>,
    /// steps x 4*hidden, gate order input, forget, candidate, output.
    gates: Vec<f64>,
    /// steps x hidden.
    tanh_c: Vec<f64>,
}

#[derive(Debug)]
enum LayerCache {
    Dense { input: Tensor3, output: Tensor3 },
    Recurrent { input: Tensor3, rows: Vec<RecurrentRowCache>, output: Tensor3 },
    Conv1d { input: Tensor3, output: Tensor3 },
    Softmax { output: Tensor3 },
}

/// Activations saved by `forward` for the matching `backward`.
#[derive(Debug)]
pub struct Cache {
    layers: Vec<LayerCache>,
}

fn dense_forward(
    i: usize,
    layer: &LayerSpec,
    params: &ParamSet,
    input: &Tensor3,
    output: usize,
    activation: Activation,
    flatten: bool,
) -> Result<Tensor3> {
    let w = params.get(&format!("l{i}.w"))?;
    let b = params.get(&format!("l{i}.b"))?;
    let in_len = if flatten { input.d0 * input.d2 } else { input.d2 };
    if w.data.len() != output * in_len || b.data.len() != output {
        return Err(shape_err(i, layer, "parameter shape mismatch".into()));
    }
    let rows = if flatten { 1 } else { input.d0 };
    let mut out = Tensor3::zeros(rows, 1, output);
    for r in 0..rows {
        let x: &[f64] = if flatten { &input.data } else { input.plane(r) };
        let y = out.plane_mut(r);
        for o in 0..output {
            let z = dot(x, &w.data[o * in_len..(o + 1) * in_len]) + b.data[o];
            y[o] = activation.apply(z);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    i: usize,
    params: &ParamSet,
    input: &Tensor3,
    output_t: &Tensor3,
    grad_out: &Tensor3,
    activation: Activation,
    flatten: bool,
    grads: &mut ParamSet,
) -> Result<Tensor3> {
    let w = params.get(&format!("l{i}.w"))?;
    let in_len = if flatten { input.d0 * input.d2 } else { input.d2 };
    let output = output_t.d2;
    let rows = output_t.d0;
    let mut dx_flat = vec![0.0; input.d0 * input.d2];
    {
        let dw = &mut grads.arrays.get_mut(&format!("l{i}.w")).expect("zeros_like").data;
        let db_name = format!("l{i}.b");
        // Split borrows: accumulate dw first, then db, to keep the map
        // borrow rules simple.
        for r in 0..rows {
            let x: &[f64] = if flatten { &input.data } else { input.plane(r) };
            let y = output_t.plane(r);
            let dy = grad_out.plane(r);
            let dx = if flatten { &mut dx_flat[..] } else { &mut dx_flat[r * in_len..(r + 1) * in_len] };
            for o in 0..output {
                let dz = dy[o] * activation.deriv_from_output(y[o]);
                if dz == 0.0 {
                    continue;
                }
                let wrow = &w.data[o * in_len..(o + 1) * in_len];
                let dwrow = &mut dw[o * in_len..(o + 1) * in_len];
                for k in 0..in_len {
                    dwrow[k] += dz * x[k];
                    dx[k] += dz * wrow[k];
                }
            }
        }
        let db = &mut grads.arrays.get_mut(&db_name).expect("zeros_like").data;
        for r in 0..rows {
            let y = output_t.plane(r);
            let dy = grad_out.plane(r);
            for o in 0..output {
                db[o] += dy[o] * activation.deriv_from_output(y[o]);
            }
        }
    }
    let mut dx = Tensor3::zeros(input.d0, input.d1, input.d2);
    dx.data.copy_from_slice(&dx_flat);
    Ok(dx)
}

fn recurrent_forward(
    i: usize,
    layer: &LayerSpec,
    params: &ParamSet,
    input: &Tensor3,
    hidden: usize,
    return_sequence: bool,
) -> Result<(Tensor3, Vec<RecurrentRowCache>)> {
    let wx = params.get(&format!("l{i}.wx"))?;
    let wh = params.get(&format!("l{i}.wh"))?;
    let b = params.get(&format!("l{i}.b"))?;
    let in_len = input.d2;
    let steps = input.d1;
    if wx.data.len() != 4 * hidden * in_len
        || wh.data.len() != 4 * hidden * hidden
        || b.data.len() != 4 * hidden
    {
        return Err(shape_err(i, layer, "parameter shape mismatch".into()));
    }
    let out_steps = if return_sequence { steps } else { 1 };
    let mut out = Tensor3::zeros(input.d0, out_steps, hidden);
    let mut caches = Vec::with_capacity(input.d0);
    for r in 0..input.d0 {
        let mut hs = vec![0.0; (steps + 1) * hidden];
        let mut cs = vec![0.0; (steps + 1) * hidden];
        let mut gates = vec![0.0; steps * 4 * hidden];
        let mut tanh_c = vec![0.0; steps * hidden];
        let plane = input.plane(r);
        for t in 0..steps {
            let x = &plane[t * in_len..(t + 1) * in_len];
            let (h_prev, h_rest) = hs[t * hidden..].split_at_mut(hidden);
            let (c_prev, c_rest) = cs[t * hidden..].split_at_mut(hidden);
            let g = &mut gates[t * 4 * hidden..(t + 1) * 4 * hidden];
            for u in 0..4 * hidden {
                let z = dot(x, &wx.data[u * in_len..(u + 1) * in_len])
                    + dot(h_prev, &wh.data[u * hidden..(u + 1) * hidden])
                    + b.data[u];
                g[u] = z;
            }
            for u in 0..hidden {
                let zi = math::sigmoid(g[u]);
                let zf = math::sigmoid(g[hidden + u]);
                let zg = math::tanh(g[2 * hidden + u]);
                let zo = math::sigmoid(g[3 * hidden + u]);
                g[u] = zi;
                g[hidden + u] = zf;
                g[2 * hidden + u] = zg;
                g[3 * hidden + u] = zo;
                let c = zf * c_prev[u] + zi * zg;
                let tc = math::tanh(c);
                c_rest[u] = c;
                tanh_c[t * hidden + u] = tc;
                h_rest[u] = zo * tc;
            }
        }
        if return_sequence {
            out.plane_mut(r).copy_from_slice(&hs[hidden..]);
        } else {
            out.plane_mut(r).copy_from_slice(&hs[steps * hidden..]);
        }
        caches.push(RecurrentRowCache { hs, cs, gates, tanh_c });
    }
    Ok((out, caches))
}

#[allow(clippy::too_many_arguments)]
fn recurrent_backward(
    i: usize,
    params: &ParamSet,
    input: &Tensor3,
    rows: &[RecurrentRowCache],
    grad_out: &Tensor3,
    hidden: usize,
    return_sequence: bool,
    grads: &mut ParamSet,
) -> Result<Tensor3> {
    let wx = params.get(&format!("l{i}.wx"))?;
    let wh = params.get(&format!("l{i}.wh"))?;
    let in_len = input.d2;
    let steps = input.d1;
    let mut dx = Tensor3::zeros(input.d0, input.d1, input.d2);
    let mut dwx = vec![0.0; wx.data.len()];
    let mut dwh = vec![0.0; wh.data.len()];
    let mut db = vec![0.0; 4 * hidden];
    let mut dh = vec![0.0; hidden];
    let mut dc = vec![0.0; hidden];
    let mut dz = vec![0.0; 4 * hidden];
    for r in 0..input.d0 {
        let cache = &rows[r];
        let plane = input.plane(r);
        let dplane = dx.plane_mut(r);
        let gout = grad_out.plane(r);
        dh.iter_mut().for_each(|v| *v = 0.0);
        dc.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..steps).rev() {
            if return_sequence {
                for u in 0..hidden {
                    dh[u] += gout[t * hidden + u];
                }
            } else if t + 1 == steps {
                dh.copy_from_slice(gout);
            }
            let g = &cache.gates[t * 4 * hidden..(t + 1) * 4 * hidden];
            let c_prev = &cache.cs[t * hidden..(t + 1) * hidden];
            let h_prev = &cache.hs[t * hidden..(t + 1) * hidden];
            let tc = &cache.tanh_c[t * hidden..(t + 1) * hidden];
            for u in 0..hidden {
                let (zi, zf, zg, zo) = (g[u], g[hidden + u], g[2 * hidden + u], g[3 * hidden + u]);
                let dco = dc[u] + dh[u] * zo * (1.0 - tc[u] * tc[u]);
                dz[u] = dco * zg * zi * (1.0 - zi);
                dz[hidden + u] = dco * c_prev[u] * zf * (1.0 - zf);
                dz[2 * hidden + u] = dco * zi * (1.0 - zg * zg);
                dz[3 * hidden + u] = dh[u] * tc[u] * zo * (1.0 - zo);
                dc[u] = dco * zf;
            }
            let x = &plane[t * in_len..(t + 1) * in_len];
            let dxt = &mut dplane[t * in_len..(t + 1) * in_len];
            dh.iter_mut().for_each(|v| *v = 0.0);
            for u in 0..4 * hidden {
                let dzu = dz[u];
                if dzu == 0.0 {
                    continue;
                }
                db[u] += dzu;
                let wx_row = &wx.data[u * in_len..(u + 1) * in_len];
                let dwx_row = &mut dwx[u * in_len..(u + 1) * in_len];
                for k in 0..in_len {
                    dwx_row[k] += dzu * x[k];
                    dxt[k] += dzu * wx_row[k];
                }
                let wh_row = &wh.data[u * hidden..(u + 1) * hidden];
                let dwh_row = &mut dwh[u * hidden..(u + 1) * hidden];
                for k in 0..hidden {
                    dwh_row[k] += dzu * h_prev[k];
                    dh[k] += dzu * wh_row[k];
                }
            }
        }
    }
    let gx = &mut grads.arrays.get_mut(&format!("l{i}.wx")).expect("zeros_like").data;
    gx.iter_mut().zip(&dwx).for_each(|(a, b)| *a += b);
    let gh = &mut grads.arrays.get_mut(&format!("l{i}.wh")).expect("zeros_like").data;
    gh.iter_mut().zip(&dwh).for_each(|(a, b)| *a += b);
    let gb = &mut grads.arrays.get_mut(&format!("l{i}.b")).expect("zeros_like").data;
    gb.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
    Ok(dx)
}

fn conv1d_forward(
    i: usize,
    layer: &LayerSpec,
    params: &ParamSet,
    input: &Tensor3,
    output: usize,
    kernel: usize,
    activation: Activation,
) -> Result<Tensor3> {
    let w = params.get(&format!("l{i}.w"))?;
    let b = params.get(&format!("l{i}.b"))?;
    let channels = input.d2;
    if w.data.len() != output * kernel * channels || b.data.len() != output {
        return Err(shape_err(i, layer, "parameter shape mismatch".into()));
    }
    let rows = input.d0;
    let pad = kernel / 2;
    let mut out = Tensor3::zeros(rows, 1, output);
    let mut patch = vec![0.0; kernel * channels];
    for p in 0..rows {
        patch.iter_mut().for_each(|v| *v = 0.0);
        for dk in 0..kernel {
            let src = p as isize + dk as isize - pad as isize;
            if src < 0 || src as usize >= rows {
                continue;
            }
            patch[dk * channels..(dk + 1) * channels].copy_from_slice(input.plane(src as usize));
        }
        let y = out.plane_mut(p);
        for o in 0..output {
            let z = dot(&patch, &w.data[o * patch.len()..(o + 1) * patch.len()]) + b.data[o];
            y[o] = activation.apply(z);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    i: usize,
    params: &ParamSet,
    input: &Tensor3,
    output_t: &Tensor3,
    grad_out: &Tensor3,
    kernel: usize,
    activation: Activation,
    grads: &mut ParamSet,
) -> Result<Tensor3> {
    let w = params.get(&format!("l{i}.w"))?;
    let channels = input.d2;
    let rows = input.d0;
    let output = output_t.d2;
    let pad = kernel / 2;
    let plen = kernel * channels;
    let mut dx = Tensor3::zeros(rows, 1, channels);
    let mut patch = vec![0.0; plen];
    let mut dpatch = vec![0.0; plen];
    let mut dw = vec![0.0; w.data.len()];
    let mut db = vec![0.0; output];
    for p in 0..rows {
        patch.iter_mut().for_each(|v| *v = 0.0);
        dpatch.iter_mut().for_each(|v| *v = 0.0);
        for dk in 0..kernel {
            let src = p as isize + dk as isize - pad as isize;
            if src < 0 || src as usize >= rows {
                continue;
            }
            patch[dk * channels..(dk + 1) * channels].copy_from_slice(input.plane(src as usize));
        }
        let y = output_t.plane(p);
        let dy = grad_out.plane(p);
        for o in 0..output {
            let dz = dy[o] * activation.deriv_from_output(y[o]);
            if dz == 0.0 {
                continue;
            }
            db[o] += dz;
            let wrow = &w.data[o * plen..(o + 1) * plen];
            let dwrow = &mut dw[o * plen..(o + 1) * plen];
            for k in 0..plen {
                dwrow[k] += dz * patch[k];
                dpatch[k] += dz * wrow[k];
            }
        }
        for dk in 0..kernel {
            let src = p as isize + dk as isize - pad as isize;
            if src < 0 || src as usize >= rows {
                continue;
            }
            let drow = dx.plane_mut(src as usize);
            for c in 0..channels {
                drow[c] += dpatch[dk * channels + c];
            }
        }
    }
    let gw = &mut grads.arrays.get_mut(&format!("l{i}.w")).expect("zeros_like").data;
    gw.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
    let gb = &mut grads.arrays.get_mut(&format!("l{i}.b")).expect("zeros_like").data;
    gb.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
    Ok(dx)
}

fn softmax_forward(input: &Tensor3) -> Tensor3 {
    let mut out = Tensor3::zeros(input.d0, 1, input.d2);
    for r in 0..input.d0 {
        let x = input.plane(r);
        let y = out.plane_mut(r);
        let mut max = f64::NEG_INFINITY;
        for &v in x {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (yo, &v) in y.iter_mut().zip(x) {
            let e = math::exp(v - max);
            *yo = e;
            sum += e;
        }
        for yo in y.iter_mut() {
            *yo /= sum;
        }
    }
    out
}

fn softmax_backward(output: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    let mut dx = Tensor3::zeros(output.d0, 1, output.d2);
    for r in 0..output.d0 {
        let y = output.plane(r);
        let dy = grad_out.plane(r);
        let inner = dot(y, dy);
        let dxr = dx.plane_mut(r);
        for j in 0..y.len() {
            dxr[j] = y[j] * (dy[j] - inner);
        }
    }
    dx
}

/// Runs the network on `input`, returning the output tensor and the
/// cache `backward` needs. Pure: same input, same output.
pub fn forward(spec: &NetworkSpec, params: &ParamSet, input: &Tensor3) -> Result<(Tensor3, Cache)> {
    let mut current = input.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        layer_output_shape(i, layer, (current.d0, current.d1, current.d2))?;
        match *layer {
            LayerSpec::Dense { output, activation, flatten, .. } => {
                let out = dense_forward(i, layer, params, &current, output, activation, flatten)?;
                layers.push(LayerCache::Dense { input: current, output: out.clone() });
                current = out;
            }
            LayerSpec::Recurrent { hidden, return_sequence, .. } => {
                let (out, rows) =
                    recurrent_forward(i, layer, params, &current, hidden, return_sequence)?;
                layers.push(LayerCache::Recurrent { input: current, rows, output: out.clone() });
                current = out;
            }
            LayerSpec::Conv1d { output, kernel, activation, .. } => {
                let out =
                    conv1d_forward(i, layer, params, &current, output, kernel, activation)?;
                layers.push(LayerCache::Conv1d { input: current, output: out.clone() });
                current = out;
            }
            LayerSpec::Softmax => {
                let out = softmax_forward(&current);
                layers.push(LayerCache::Softmax { output: out.clone() });
                current = out;
            }
        }
    }
    Ok((current, Cache { layers }))
}

/// Exact reverse-mode gradients of the function `forward` computed,
/// with respect to every parameter and to the input. `grad_out` is the
/// loss gradient at the network output.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParamSet,
    cache: &Cache,
    grad_out: &Tensor3,
) -> Result<(ParamSet, Tensor3)> {
    if cache.layers.len() != spec.layers.len() {
        return Err(Error::Shape(format!(
            "cache holds {} layers but the network has {}",
            cache.layers.len(),
            spec.layers.len()
        )));
    }
    let mut grads = init_grads(spec);
    let mut current = grad_out.clone();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let lc = &cache.layers[i];
        current = match (*layer, lc) {
            (
                LayerSpec::Dense { activation, flatten, .. },
                LayerCache::Dense { input, output },
            ) => {
                if current.data.len() != output.data.len() {
                    return Err(shape_err(i, layer, "gradient shape mismatch".into()));
                }
                dense_backward(i, params, input, output, &current, activation, flatten, &mut grads)?
            }
            (
                LayerSpec::Recurrent { hidden, return_sequence, .. },
                LayerCache::Recurrent { input, rows, output },
            ) => {
                if current.data.len() != output.data.len() {
                    return Err(shape_err(i, layer, "gradient shape mismatch".into()));
                }
                recurrent_backward(
                    i,
                    params,
                    input,
                    rows,
                    &current,
                    hidden,
                    return_sequence,
                    &mut grads,
                )?
            }
            (
                LayerSpec::Conv1d { kernel, activation, .. },
                LayerCache::Conv1d { input, output },
            ) => {
                if current.data.len() != output.data.len() {
                    return Err(shape_err(i, layer, "gradient shape mismatch".into()));
                }
                conv1d_backward(
                    i,
                    params,
                    input,
                    output,
                    &current,
                    kernel,
                    activation,
                    &mut grads,
                )?
            }
            (LayerSpec::Softmax, LayerCache::Softmax { output }) => {
                if current.data.len() != output.data.len() {
                    return Err(shape_err(i, layer, "gradient shape mismatch".into()));
                }
                softmax_backward(output, &current)
            }
            _ => {
                return Err(Error::Validation(format!(
                    "cache at layer {i} does not match the network spec"
                )))
            }
        };
    }
    Ok((grads, current))
}

fn init_grads(spec: &NetworkSpec) -> ParamSet {
    let mut arrays = BTreeMap::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { input, output, .. } => {
                arrays.insert(format!("l{i}.w"), Array::zeros(vec![output, input]));
                arrays.insert(format!("l{i}.b"), Array::zeros(vec![output]));
            }
            LayerSpec::Recurrent { input, hidden, .. } => {
                arrays.insert(format!("l{i}.wx"), Array::zeros(vec![4 * hidden, input]));
                arrays.insert(format!("l{i}.wh"), Array::zeros(vec![4 * hidden, hidden]));
                arrays.insert(format!("l{i}.b"), Array::zeros(vec![4 * hidden]));
            }
            LayerSpec::Conv1d { input, output, kernel, .. } => {
                arrays.insert(format!("l{i}.w"), Array::zeros(vec![output, kernel * input]));
                arrays.insert(format!("l{i}.b"), Array::zeros(vec![output]));
            }
            LayerSpec::Softmax => {}
        }
    }
    ParamSet { arrays }
}

/// Adam with bias correction. A gradient set that is zero everywhere is
/// a strict no-op: nothing moves, not even the step counter, so idle
/// workers cannot decay another worker's momentum.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        let mut all_zero = true;
        for (name, g) in &grads.arrays {
            let p = params.get(name)?;
            if p.data.len() != g.data.len() {
                return Err(Error::Shape(format!("gradient array {name} length mismatch")));
            }
            for &v in &g.data {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in {name}")));
                }
                if v != 0.0 {
                    all_zero = false;
                }
            }
        }
        if all_zero {
            return Ok(());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powf(self.beta1, t as f64);
        let bc2 = 1.0 - math::powf(self.beta2, t as f64);
        for (name, g) in &grads.arrays {
            let p = &mut params.arrays.get_mut(name).expect("validated above").data;
            let m = &mut self.m.arrays.get_mut(name).expect("same shapes").data;
            let v = &mut self.v.arrays.get_mut(name).expect("same shapes").data;
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.learning_rate * mhat / (math::sqrt(vhat) + self.epsilon);
            }
        }
        Ok(())
    }
}

/// L1 penalty over weight arrays (bias arrays, the ones named `*.b`,
/// are exempt): value lambda * sum |w|, subgradient lambda * sign(w)
/// with sign(0) = 0.
pub fn l1_penalty(params: &ParamSet, lambda: f64) -> Result<(f64, ParamSet)> {
    if lambda < 0.0 {
        return Err(Error::Parameter(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut value = 0.0;
    let mut sub = params.zeros_like();
    if lambda == 0.0 {
        return Ok((0.0, sub));
    }
    for (name, arr) in &params.arrays {
        if name.ends_with(".b") {
            continue;
        }
        let out = &mut sub.arrays.get_mut(name).expect("zeros_like").data;
        for (o, &w) in out.iter_mut().zip(&arr.data) {
            value += lambda * math::abs(w);
            *o = if w > 0.0 {
                lambda
            } else if w < 0.0 {
                -lambda
            } else {
                0.0
            };
        }
    }
    Ok((value, sub))
}

/// Outcome of a finite-difference sweep: the largest relative error
/// over every parameter entry and the entry where it occurred.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub pass: bool,
}

const FD_STEP: f64 = 1e-5;

fn half_sq_norm(t: &Tensor3) -> f64 {
    0.5 * dot(&t.data, &t.data)
}

/// Compares `analytic` against central finite differences of the loss
/// 0.5*||forward(..)||^2 for every parameter entry.
fn fd_compare(
    spec: &NetworkSpec,
    params: &ParamSet,
    input: &Tensor3,
    analytic: &ParamSet,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut probe = params.clone();
    let mut max_rel_err = 0.0;
    let mut worst = String::new();
    for (name, arr) in &analytic.arrays {
        for k in 0..arr.data.len() {
            let original = probe.arrays.get(name).expect("same shapes").data[k];
            probe.arrays.get_mut(name).expect("same shapes").data[k] = original + FD_STEP;
            let plus = half_sq_norm(&forward(spec, &probe, input)?.0);
            probe.arrays.get_mut(name).expect("same shapes").data[k] = original - FD_STEP;
            let minus = half_sq_norm(&forward(spec, &probe, input)?.0);
            probe.arrays.get_mut(name).expect("same shapes").data[k] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = arr.data[k];
            let denom = math::abs(a).max(math::abs(fd)).max(1e-6);
            let rel = math::abs(a - fd) / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{k}]");
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, pass: max_rel_err < tolerance })
}

/// Checks every analytic parameter gradient against central finite
/// differences of the loss 0.5*||output||^2. A network with no
/// parameters passes vacuously.
pub fn finite_diff_check(
    spec: &NetworkSpec,
    params: &ParamSet,
    input: &Tensor3,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(tolerance > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {tolerance}")));
    }
    let (out, cache) = forward(spec, params, input)?;
    let (grads, _) = backward(spec, params, &cache, &out)?;
    fd_compare(spec, params, input, &grads, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, steps: usize, feat: usize, data: Vec<f64>) -> Tensor3 {
        let mut t = Tensor3::zeros(rows, steps, feat);
        t.data.copy_from_slice(&data);
        t
    }

    fn random_input(stream: &mut rng::Stream, rows: usize, steps: usize, feat: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(rows, steps, feat);
        for v in t.data.iter_mut() {
            *v = rng::uniform(stream, -1.0, 1.0);
        }
        t
    }

    #[test]
    fn dense_identity_maps_input() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 2,
            output: 2,
            activation: Activation::Linear,
            flatten: false,
            zero_init: true,
        }])
        .unwrap();
        let mut stream = rng::substream(1, "dc-ident");
        let mut params = init_params(&spec, &mut stream);
        let w = &mut params.arrays.get_mut("l0.w").unwrap().data;
        w[0] = 1.0;
        w[3] = 1.0;
        let x = tensor(1, 1, 2, vec![3.0, -1.0]);
        let (y, _) = forward(&spec, &params, &x).unwrap();
        assert_eq!(y.data, vec![3.0, -1.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let spec = NetworkSpec::new(vec![LayerSpec::Softmax]).unwrap();
        let params = ParamSet::default();
        let x = tensor(1, 1, 3, vec![0.0, 0.0, 0.0]);
        let (y, _) = forward(&spec, &params, &x).unwrap();
        for &v in &y.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_is_fixed_point_of_gated_recurrence() {
        // With zero biases the candidate is tanh(0) = 0 whatever the
        // weights, so cell and hidden stay at zero for every step.
        let spec = NetworkSpec::new(vec![LayerSpec::Recurrent {
            input: 4,
            hidden: 3,
            return_sequence: true,
        }])
        .unwrap();
        let mut stream = rng::substream(2, "dc-zero");
        let params = init_params(&spec, &mut stream);
        let x = Tensor3::zeros(2, 3, 4);
        let (y, _) = forward(&spec, &params, &x).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_chain_gradients_are_products_of_factors() {
        // Two stacked 1x1 linear maps: f = w1 * (w0 * x). At x = 1,
        // df/dw0 = w1 and df/dw1 = w0 * x; with w0 = w1 = 3 both are 3,
        // and with loss gradient 1 they come out unscaled.
        let mk = |zero| LayerSpec::Dense {
            input: 1,
            output: 1,
            activation: Activation::Linear,
            flatten: false,
            zero_init: zero,
        };
        let spec = NetworkSpec::new(vec![mk(true), mk(true)]).unwrap();
        let mut stream = rng::substream(3, "dc-chain");
        let mut params = init_params(&spec, &mut stream);
        params.arrays.get_mut("l0.w").unwrap().data[0] = 3.0;
        params.arrays.get_mut("l1.w").unwrap().data[0] = 3.0;
        let x = tensor(1, 1, 1, vec![1.0]);
        let (y, cache) = forward(&spec, &params, &x).unwrap();
        assert_eq!(y.data[0], 9.0);
        let ones = tensor(1, 1, 1, vec![1.0]);
        let (grads, dx) = backward(&spec, &params, &cache, &ones).unwrap();
        assert_eq!(grads.arrays["l0.w"].data[0], 3.0);
        assert_eq!(grads.arrays["l1.w"].data[0], 3.0);
        // dx = w1 * w0.
        assert_eq!(dx.data[0], 9.0);
        // Single layer at x = 3: df/dw = x = 3.
        let spec1 = NetworkSpec::new(vec![mk(true)]).unwrap();
        let mut p1 = init_params(&spec1, &mut rng::substream(4, "dc-single"));
        p1.arrays.get_mut("l0.w").unwrap().data[0] = 2.0;
        let x3 = tensor(1, 1, 1, vec![3.0]);
        let (_, cache1) = forward(&spec1, &p1, &x3).unwrap();
        let (g1, _) = backward(&spec1, &p1, &cache1, &ones).unwrap();
        assert_eq!(g1.arrays["l0.w"].data[0], 3.0);
    }

    #[test]
    fn two_layer_net_passes_gradient_check() {
        let spec = NetworkSpec::new(vec![
            LayerSpec::Dense {
                input: 4,
                output: 6,
                activation: Activation::Tanh,
                flatten: false,
                zero_init: false,
            },
            LayerSpec::Dense {
                input: 6,
                output: 2,
                activation: Activation::Linear,
                flatten: false,
                zero_init: false,
            },
        ])
        .unwrap();
        let mut stream = rng::substream(5, "dc-two");
        let params = init_params(&spec, &mut stream);
        let input = random_input(&mut stream, 3, 1, 4);
        let report = finite_diff_check(&spec, &params, &input, 1e-4).unwrap();
        assert!(report.pass, "max rel err {} at {}", report.max_rel_err, report.worst);
    }

    #[test]
    fn actor_shaped_net_passes_gradient_check() {
        // The policy network layout in miniature: two recurrent layers,
        // a convolution across rows, a per-row head, softmax.
        let spec = NetworkSpec::new(vec![
            LayerSpec::Recurrent { input: 5, hidden: 4, return_sequence: true },
            LayerSpec::Recurrent { input: 4, hidden: 6, return_sequence: false },
            LayerSpec::Conv1d { input: 6, output: 4, kernel: 3, activation: Activation::Relu },
            LayerSpec::Dense {
                input: 4,
                output: 3,
                activation: Activation::Linear,
                flatten: false,
                zero_init: false,
            },
            LayerSpec::Softmax,
        ])
        .unwrap();
        let mut stream = rng::substream(6, "dc-actor");
        let params = init_params(&spec, &mut stream);
        let input = random_input(&mut stream, 3, 4, 5);
        let report = finite_diff_check(&spec, &params, &input, 1e-4).unwrap();
        assert!(report.pass, "max rel err {} at {}", report.max_rel_err, report.worst);
    }

    #[test]
    fn critic_shaped_net_passes_gradient_check() {
        // Value-network layout in miniature: recurrent encoder, then a
        // flattening dense layer pooling all rows, then a scalar head.
        let spec = NetworkSpec::new(vec![
            LayerSpec::Recurrent { input: 5, hidden: 4, return_sequence: false },
            LayerSpec::Dense {
                input: 3 * 4,
                output: 3,
                activation: Activation::Relu,
                flatten: true,
                zero_init: false,
            },
            LayerSpec::Dense {
                input: 3,
                output: 1,
                activation: Activation::Linear,
                flatten: false,
                zero_init: false,
            },
        ])
        .unwrap();
        let mut stream = rng::substream(7, "dc-critic");
        let params = init_params(&spec, &mut stream);
        let input = random_input(&mut stream, 3, 4, 5);
        let report = finite_diff_check(&spec, &params, &input, 1e-4).unwrap();
        assert!(report.pass, "max rel err {} at {}", report.max_rel_err, report.worst);
    }

    #[test]
    fn single_row_conv_pads_cleanly() {
        let spec = NetworkSpec::new(vec![LayerSpec::Conv1d {
            input: 3,
            output: 2,
            kernel: 3,
            activation: Activation::Tanh,
        }])
        .unwrap();
        let mut stream = rng::substream(8, "dc-conv1");
        let params = init_params(&spec, &mut stream);
        let input = random_input(&mut stream, 1, 1, 3);
        let report = finite_diff_check(&spec, &params, &input, 1e-4).unwrap();
        assert!(report.pass, "max rel err {} at {}", report.max_rel_err, report.worst);
    }

    #[test]
    fn corrupted_gradient_fails_naming_the_weight() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 3,
            output: 2,
            activation: Activation::Tanh,
            flatten: false,
            zero_init: false,
        }])
        .unwrap();
        let mut stream = rng::substream(9, "dc-corrupt");
        let params = init_params(&spec, &mut stream);
        let input = random_input(&mut stream, 2, 1, 3);
        let (out, cache) = forward(&spec, &params, &input).unwrap();
        let (mut grads, _) = backward(&spec, &params, &cache, &out).unwrap();
        grads.arrays.get_mut("l0.w").unwrap().data[4] *= 2.0;
        let report = fd_compare(&spec, &params, &input, &grads, 1e-4).unwrap();
        assert!(!report.pass);
        assert_eq!(report.worst, "l0.w[4]");
    }

    #[test]
    fn parameterless_net_passes_vacuously() {
        let spec = NetworkSpec::new(vec![LayerSpec::Softmax]).unwrap();
        let params = ParamSet::default();
        let input = tensor(2, 1, 3, vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.4]);
        let report = finite_diff_check(&spec, &params, &input, 1e-4).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.worst, "");
    }

    #[test]
    fn softmax_rows_are_positive_distributions() {
        let spec = NetworkSpec::new(vec![LayerSpec::Softmax]).unwrap();
        let params = ParamSet::default();
        let mut stream = rng::substream(10, "dc-softmax");
        for _ in 0..50 {
            let input = random_input(&mut stream, 4, 1, 5);
            let (y, _) = forward(&spec, &params, &input).unwrap();
            for r in 0..4 {
                let row = y.plane(r);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 4,
            output: 2,
            activation: Activation::Linear,
            flatten: false,
            zero_init: false,
        }])
        .unwrap();
        let mut stream = rng::substream(11, "dc-shape");
        let params = init_params(&spec, &mut stream);
        let input = Tensor3::zeros(2, 1, 3);
        let err = forward(&spec, &params, &input).unwrap_err();
        match err {
            Error::Shape(msg) => assert!(msg.contains("layer 0 (dense)"), "{msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_must_be_terminal() {
        let err = NetworkSpec::new(vec![
            LayerSpec::Softmax,
            LayerSpec::Dense {
                input: 3,
                output: 3,
                activation: Activation::Linear,
                flatten: false,
                zero_init: false,
            },
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn same_stream_reproduces_initialization() {
        let spec = NetworkSpec::new(vec![
            LayerSpec::Recurrent { input: 3, hidden: 4, return_sequence: false },
            LayerSpec::Dense {
                input: 4,
                output: 2,
                activation: Activation::Linear,
                flatten: false,
                zero_init: false,
            },
        ])
        .unwrap();
        let a = init_params(&spec, &mut rng::substream(12, "dc-init"));
        let b = init_params(&spec, &mut rng::substream(12, "dc-init"));
        assert_eq!(a, b);
    }

    #[test]
    fn adam_zero_gradient_is_strict_noop_in_any_state() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 3,
            output: 2,
            activation: Activation::Linear,
            flatten: false,
            zero_init: false,
        }])
        .unwrap();
        let mut stream = rng::substream(13, "dc-adam0");
        let mut params = init_params(&spec, &mut stream);
        let mut opt = Adam::new(&params, 0.01);
        let zeros = params.zeros_like();

        let before = params.clone();
        opt.apply(&mut params, &zeros).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.step, 0);

        // Run a real step so the moments are nonzero, then check the
        // zero gradient still changes nothing at all.
        let mut grads = params.zeros_like();
        grads.arrays.get_mut("l0.w").unwrap().data[0] = 0.5;
        opt.apply(&mut params, &grads).unwrap();
        let after_real = params.clone();
        let step_after_real = opt.step;
        opt.apply(&mut params, &zeros).unwrap();
        assert_eq!(params, after_real);
        assert_eq!(opt.step, step_after_real);
    }

    #[test]
    fn adam_first_step_moves_against_gradient_sign() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 2,
            output: 2,
            activation: Activation::Linear,
            flatten: false,
            zero_init: false,
        }])
        .unwrap();
        let mut stream = rng::substream(14, "dc-adam1");
        let mut params = init_params(&spec, &mut stream);
        let before = params.clone();
        let mut grads = params.zeros_like();
        for (i, g) in grads.arrays.get_mut("l0.w").unwrap().data.iter_mut().enumerate() {
            *g = if i % 2 == 0 { 0.3 } else { -1.7 };
        }
        let lr = 0.01;
        let mut opt = Adam::new(&params, lr);
        opt.apply(&mut params, &grads).unwrap();
        // With bias correction the first update is lr * g/(|g| + eps'),
        // i.e. one learning rate against the gradient sign.
        for k in 0..4 {
            let delta = params.arrays["l0.w"].data[k] - before.arrays["l0.w"].data[k];
            let g = grads.arrays["l0.w"].data[k];
            let expected = -lr * g.signum();
            assert!((delta - expected).abs() < 1e-6, "k={k} delta={delta}");
        }
        assert_eq!(params.arrays["l0.b"].data, before.arrays["l0.b"].data);
    }

    #[test]
    fn adam_repeated_gradient_does_not_grow_steps() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 1,
            output: 1,
            activation: Activation::Linear,
            flatten: false,
            zero_init: false,
        }])
        .unwrap();
        let mut stream = rng::substream(15, "dc-adam2");
        let mut params = init_params(&spec, &mut stream);
        let mut grads = params.zeros_like();
        grads.arrays.get_mut("l0.w").unwrap().data[0] = 0.25;
        let mut opt = Adam::new(&params, 0.001);
        let p0 = params.arrays["l0.w"].data[0];
        opt.apply(&mut params, &grads).unwrap();
        let p1 = params.arrays["l0.w"].data[0];
        opt.apply(&mut params, &grads).unwrap();
        let p2 = params.arrays["l0.w"].data[0];
        assert!((p2 - p1).abs() <= (p1 - p0).abs() + 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 1,
            output: 1,
            activation: Activation::Linear,
            flatten: false,
            zero_init: false,
        }])
        .unwrap();
        let mut stream = rng::substream(16, "dc-adamnan");
        let mut params = init_params(&spec, &mut stream);
        let mut grads = params.zeros_like();
        grads.arrays.get_mut("l0.w").unwrap().data[0] = f64::NAN;
        let mut opt = Adam::new(&params, 0.001);
        assert!(matches!(opt.apply(&mut params, &grads), Err(Error::Numeric(_))));
    }

    #[test]
    fn l1_penalty_matches_hand_computation() {
        let mut params = ParamSet::default();
        params
            .arrays
            .insert("w".into(), Array { shape: vec![2], data: vec![1.0, -2.0] });
        params
            .arrays
            .insert("head.b".into(), Array { shape: vec![1], data: vec![5.0] });
        let (value, sub) = l1_penalty(&params, 0.001).unwrap();
        assert!((value - 0.003).abs() < 1e-15);
        assert_eq!(sub.arrays["w"].data, vec![0.001, -0.001]);
        // Bias arrays carry no penalty and a zero subgradient.
        assert_eq!(sub.arrays["head.b"].data, vec![0.0]);

        let (zero_value, zero_sub) = l1_penalty(&params, 0.0).unwrap();
        assert_eq!(zero_value, 0.0);
        assert!(zero_sub.arrays.values().all(|a| a.data.iter().all(|&v| v == 0.0)));

        params.arrays.get_mut("w").unwrap().data[0] = 0.0;
        let (_, sub0) = l1_penalty(&params, 0.5).unwrap();
        assert_eq!(sub0.arrays["w"].data[0], 0.0);
    }

    #[test]
    fn flatten_dense_collapses_rows() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 6,
            output: 2,
            activation: Activation::Linear,
            flatten: true,
            zero_init: false,
        }])
        .unwrap();
        let mut stream = rng::substream(17, "dc-flat");
        let params = init_params(&spec, &mut stream);
        let input = random_input(&mut stream, 3, 1, 2);
        let (y, _) = forward(&spec, &params, &input).unwrap();
        assert_eq!((y.d0, y.d1, y.d2), (1, 1, 2));
        assert_eq!(spec.output_shape(3, 1, 2).unwrap(), (1, 1, 2));
    }
}
