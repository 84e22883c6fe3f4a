//! Layer sequence networks: spec, initialization, forward, and backprop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Recurrent cell flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Vanilla,
    Lstm,
}

/// One layer descriptor. Convolutions are "valid" (no padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel: usize, stride: usize },
    Dense { width: usize },
    Relu,
    Flatten,
    Recurrent { hidden: usize, kind: CellKind },
}

/// Ordered layer descriptors plus the input shape they apply to.
///
/// Feedforward nets take a `[channels, height, width]` or `[features]`
/// input. A recurrent net has the `Recurrent` layer first, reads one
/// `[features]` tensor per step, and feeds the final hidden state through
/// the remaining layers as the readout head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Vec<usize>, layers: Vec<LayerSpec>) -> NetworkSpec {
        NetworkSpec { input, layers }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self.layers.first(), Some(LayerSpec::Recurrent { .. }))
    }

    /// Checks layer compatibility and returns each layer's output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        if self.layers.is_empty() {
            return Err(NnError::EmptySpec);
        }
        if self.input.is_empty() || self.input.iter().any(|&d| d == 0) {
            return Err(NnError::ShapeMismatch(format!("bad input shape {:?}", self.input)));
        }
        let mut shape = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Conv2d { out_channels, kernel, stride } => {
                    if shape.len() != 3 {
                        return Err(NnError::ShapeMismatch(format!(
                            "conv2d at layer {idx} needs a [c,h,w] input, got {shape:?}"
                        )));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(NnError::ShapeMismatch(format!("bad conv2d at layer {idx}")));
                    }
                    let (h, w) = (shape[1], shape[2]);
                    if kernel > h || kernel > w {
                        return Err(NnError::ShapeMismatch(format!(
                            "conv2d kernel {kernel} larger than input {h}x{w} at layer {idx}"
                        )));
                    }
                    vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerSpec::Dense { width } => {
                    if shape.len() != 1 || width == 0 {
                        return Err(NnError::ShapeMismatch(format!(
                            "dense at layer {idx} needs a flat input, got {shape:?}"
                        )));
                    }
                    vec![width]
                }
                LayerSpec::Relu => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Recurrent { hidden, kind: _ } => {
                    if idx != 0 {
                        return Err(NnError::BadRecurrent(format!(
                            "recurrent layer must come first, found at layer {idx}"
                        )));
                    }
                    if shape.len() != 1 || hidden == 0 {
                        return Err(NnError::BadRecurrent(format!(
                            "recurrent layer needs a flat per-step input, got {shape:?}"
                        )));
                    }
                    vec![hidden]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, NnError> {
        Ok(self.shapes()?.pop().unwrap())
    }
}

/// A network: spec plus one parameter tensor list in fixed layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

impl Network {
    /// Initializes parameters: He-uniform for conv/dense, uniform
    /// `±1/√hidden` for recurrent weights, zero biases except the LSTM
    /// forget gate which starts at 1.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Network, NnError> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut in_shape = spec.input.clone();
        for (layer, out_shape) in spec.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv2d { out_channels, kernel, .. } => {
                    let in_ch = in_shape[0];
                    let fan_in = in_ch * kernel * kernel;
                    let limit = (6.0 / fan_in as f64).sqrt();
                    params.push(uniform(&mut rng, &[out_channels, in_ch, kernel, kernel], limit));
                    params.push(Tensor::zeros(&[out_channels]));
                }
                LayerSpec::Dense { width } => {
                    let fan_in = in_shape[0];
                    let limit = (6.0 / fan_in as f64).sqrt();
                    params.push(uniform(&mut rng, &[width, fan_in], limit));
                    params.push(Tensor::zeros(&[width]));
                }
                LayerSpec::Relu | LayerSpec::Flatten => {}
                LayerSpec::Recurrent { hidden, kind } => {
                    let gates = match kind {
                        CellKind::Vanilla => 1,
                        CellKind::Lstm => 4,
                    };
                    let limit = 1.0 / (hidden as f64).sqrt();
                    params.push(uniform(&mut rng, &[gates * hidden, in_shape[0]], limit));
                    params.push(uniform(&mut rng, &[gates * hidden, hidden], limit));
                    let mut bias = Tensor::zeros(&[gates * hidden]);
                    if kind == CellKind::Lstm {
                        // Forget-gate slice starts open.
                        bias.data_mut()[hidden..2 * hidden].fill(1.0);
                    }
                    params.push(bias);
                }
            }
            in_shape = out_shape.clone();
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Zeroed gradient buffers matching this network's parameters.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// Runs a feedforward net; activations land in `cache` for `backward`.
    pub fn forward(&self, input: &Tensor, cache: &mut ForwardCache) -> Result<(), NnError> {
        if self.spec.is_recurrent() {
            return Err(NnError::BadRecurrent("use forward_seq for recurrent nets".into()));
        }
        if input.shape() != self.spec.input.as_slice() {
            return Err(NnError::ShapeMismatch(format!(
                "input {:?} vs spec {:?}",
                input.shape(),
                self.spec.input
            )));
        }
        cache.acts.clear();
        cache.seq = None;
        cache.acts.push(input.clone());
        let mut param_ix = 0;
        for layer in &self.spec.layers {
            let x = cache.acts.last().unwrap();
            let y = match *layer {
                LayerSpec::Conv2d { out_channels, kernel, stride } => {
                    let w = &self.params[param_ix];
                    let b = &self.params[param_ix + 1];
                    param_ix += 2;
                    conv2d_forward(x, w, b, out_channels, kernel, stride)
                }
                LayerSpec::Dense { .. } => {
                    let w = &self.params[param_ix];
                    let b = &self.params[param_ix + 1];
                    param_ix += 2;
                    dense_forward(x, w, b)
                }
                LayerSpec::Relu => relu_forward(x),
                LayerSpec::Flatten => {
                    let mut y = x.clone();
                    y.reshape(&[x.len()])?;
                    y
                }
                LayerSpec::Recurrent { .. } => unreachable!(),
            };
            cache.acts.push(y);
        }
        cache.valid = true;
        Ok(())
    }

    /// Backprop for a feedforward net: accumulates parameter gradients into
    /// `grads` (layout of [`Network::zero_grads`]) from the upstream
    /// gradient on the output.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor,
        grads: &mut [Tensor],
    ) -> Result<(), NnError> {
        if !cache.valid || cache.acts.len() != self.spec.layers.len() + 1 {
            return Err(NnError::NoForwardCache);
        }
        if upstream.shape() != cache.acts.last().unwrap().shape() {
            return Err(NnError::ShapeMismatch(format!(
                "upstream {:?} vs output {:?}",
                upstream.shape(),
                cache.acts.last().unwrap().shape()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(NnError::ShapeMismatch("gradient buffer layout".into()));
        }
        let mut d_out = upstream.clone();
        let mut param_ix = self.params.len();
        for (l, layer) in self.spec.layers.iter().enumerate().rev() {
            let x = &cache.acts[l];
            d_out = match *layer {
                LayerSpec::Conv2d { out_channels, kernel, stride } => {
                    param_ix -= 2;
                    let (dw, db, dx) =
                        conv2d_backward(x, &self.params[param_ix], &d_out, out_channels, kernel, stride);
                    accumulate(&mut grads[param_ix], &dw);
                    accumulate(&mut grads[param_ix + 1], &db);
                    dx
                }
                LayerSpec::Dense { .. } => {
                    param_ix -= 2;
                    let (dw, db, dx) = dense_backward(x, &self.params[param_ix], &d_out);
                    accumulate(&mut grads[param_ix], &dw);
                    accumulate(&mut grads[param_ix + 1], &db);
                    dx
                }
                LayerSpec::Relu => relu_backward(x, &d_out),
                LayerSpec::Flatten => {
                    let mut dx = d_out.clone();
                    dx.reshape(x.shape())?;
                    dx
                }
                LayerSpec::Recurrent { .. } => unreachable!(),
            };
        }
        Ok(())
    }

    /// Runs a recurrent net over a sequence: the cell consumes each step,
    /// then the remaining layers read the final hidden state. Per-step
    /// hidden states are exposed through the cache.
    pub fn forward_seq(&self, seq: &[Tensor], cache: &mut ForwardCache) -> Result<(), NnError> {
        let (hidden, kind) = match self.spec.layers.first() {
            Some(&LayerSpec::Recurrent { hidden, kind }) => (hidden, kind),
            _ => return Err(NnError::BadRecurrent("forward_seq needs a recurrent first layer".into())),
        };
        if seq.is_empty() {
            return Err(NnError::ShapeMismatch("empty sequence".into()));
        }
        for step in seq {
            if step.shape() != self.spec.input.as_slice() {
                return Err(NnError::ShapeMismatch(format!(
                    "step {:?} vs spec {:?}",
                    step.shape(),
                    self.spec.input
                )));
            }
        }
        let w_ih = &self.params[0];
        let w_hh = &self.params[1];
        let bias = &self.params[2];
        let mut sc = SeqCache::default();
        let mut h = Tensor::zeros(&[hidden]);
        let mut c = Tensor::zeros(&[hidden]);
        for step in seq {
            match kind {
                CellKind::Vanilla => {
                    let mut pre = affine(w_ih, step, bias);
                    add_matvec(&mut pre, w_hh, &h);
                    let mut new_h = Tensor::zeros(&[hidden]);
                    for (o, p) in new_h.data_mut().iter_mut().zip(pre.data()) {
                        *o = p.tanh();
                    }
                    sc.gates.push(pre);
                    h = new_h;
                }
                CellKind::Lstm => {
                    let mut z = affine(w_ih, step, bias);
                    add_matvec(&mut z, w_hh, &h);
                    let mut gates = Tensor::zeros(&[4 * hidden]);
                    let zd = z.data();
                    let gd = gates.data_mut();
                    for u in 0..hidden {
                        gd[u] = sigmoid(zd[u]);
                        gd[hidden + u] = sigmoid(zd[hidden + u]);
                        gd[2 * hidden + u] = zd[2 * hidden + u].tanh();
                        gd[3 * hidden + u] = sigmoid(zd[3 * hidden + u]);
                    }
                    let mut new_c = Tensor::zeros(&[hidden]);
                    let mut new_h = Tensor::zeros(&[hidden]);
                    for u in 0..hidden {
                        let i = gates.data()[u];
                        let f = gates.data()[hidden + u];
                        let g = gates.data()[2 * hidden + u];
                        let o = gates.data()[3 * hidden + u];
                        let cu = f * c.data()[u] + i * g;
                        new_c.data_mut()[u] = cu;
                        new_h.data_mut()[u] = o * cu.tanh();
                    }
                    sc.gates.push(gates);
                    sc.cells.push(new_c.clone());
                    c = new_c;
                    h = new_h;
                }
            }
            sc.inputs.push(step.clone());
            sc.hiddens.push(h.clone());
        }

        // Readout head on the final hidden state.
        cache.acts.clear();
        cache.acts.push(h);
        let mut param_ix = 3;
        for layer in &self.spec.layers[1..] {
            let x = cache.acts.last().unwrap();
            let y = match *layer {
                LayerSpec::Dense { .. } => {
                    let w = &self.params[param_ix];
                    let b = &self.params[param_ix + 1];
                    param_ix += 2;
                    dense_forward(x, w, b)
                }
                LayerSpec::Relu => relu_forward(x),
                LayerSpec::Flatten => {
                    let mut y = x.clone();
                    y.reshape(&[x.len()])?;
                    y
                }
                _ => return Err(NnError::BadRecurrent("head layers must be dense/relu/flatten".into())),
            };
            cache.acts.push(y);
        }
        cache.seq = Some(sc);
        cache.valid = true;
        Ok(())
    }

    /// Backprop through time for a recurrent net run with `forward_seq`.
    pub fn backward_seq(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor,
        grads: &mut [Tensor],
    ) -> Result<(), NnError> {
        let (hidden, kind) = match self.spec.layers.first() {
            Some(&LayerSpec::Recurrent { hidden, kind }) => (hidden, kind),
            _ => return Err(NnError::BadRecurrent("backward_seq needs a recurrent first layer".into())),
        };
        let sc = cache.seq.as_ref().ok_or(NnError::NoForwardCache)?;
        if !cache.valid || cache.acts.len() != self.spec.layers.len() {
            return Err(NnError::NoForwardCache);
        }
        if grads.len() != self.params.len() {
            return Err(NnError::ShapeMismatch("gradient buffer layout".into()));
        }

        // Head backward, mirroring the forward head walk.
        let mut d_out = upstream.clone();
        let mut param_ix = self.params.len();
        for (l, layer) in self.spec.layers.iter().enumerate().skip(1).rev() {
            let x = &cache.acts[l - 1];
            d_out = match *layer {
                LayerSpec::Dense { .. } => {
                    param_ix -= 2;
                    let (dw, db, dx) = dense_backward(x, &self.params[param_ix], &d_out);
                    accumulate(&mut grads[param_ix], &dw);
                    accumulate(&mut grads[param_ix + 1], &db);
                    dx
                }
                LayerSpec::Relu => relu_backward(x, &d_out),
                LayerSpec::Flatten => {
                    let mut dx = d_out.clone();
                    dx.reshape(x.shape())?;
                    dx
                }
                _ => unreachable!(),
            };
        }

        let w_hh = &self.params[1];
        let steps = sc.inputs.len();
        let mut dh = d_out;
        let mut dc = Tensor::zeros(&[hidden]);
        for t in (0..steps).rev() {
            let h_prev = if t == 0 { None } else { Some(&sc.hiddens[t - 1]) };
            let dz = match kind {
                CellKind::Vanilla => {
                    let h_t = &sc.hiddens[t];
                    let mut dz = Tensor::zeros(&[hidden]);
                    for u in 0..hidden {
                        let h = h_t.data()[u];
                        dz.data_mut()[u] = dh.data()[u] * (1.0 - h * h);
                    }
                    dz
                }
                CellKind::Lstm => {
                    let gates = &sc.gates[t];
                    let c_t = &sc.cells[t];
                    let c_prev_val = |u: usize| if t == 0 { 0.0 } else { sc.cells[t - 1].data()[u] };
                    let mut dz = Tensor::zeros(&[4 * hidden]);
                    let mut dc_prev = Tensor::zeros(&[hidden]);
                    for u in 0..hidden {
                        let i = gates.data()[u];
                        let f = gates.data()[hidden + u];
                        let g = gates.data()[2 * hidden + u];
                        let o = gates.data()[3 * hidden + u];
                        let tc = c_t.data()[u].tanh();
                        let d_o = dh.data()[u] * tc;
                        let dcu = dc.data()[u] + dh.data()[u] * o * (1.0 - tc * tc);
                        let d_i = dcu * g;
                        let d_f = dcu * c_prev_val(u);
                        let d_g = dcu * i;
                        dc_prev.data_mut()[u] = dcu * f;
                        dz.data_mut()[u] = d_i * i * (1.0 - i);
                        dz.data_mut()[hidden + u] = d_f * f * (1.0 - f);
                        dz.data_mut()[2 * hidden + u] = d_g * (1.0 - g * g);
                        dz.data_mut()[3 * hidden + u] = d_o * o * (1.0 - o);
                    }
                    dc = dc_prev;
                    dz
                }
            };
            // dW_ih += dz ⊗ x_t ; dW_hh += dz ⊗ h_{t-1} ; db += dz
            outer_accumulate(&mut grads[0], &dz, &sc.inputs[t]);
            if let Some(hp) = h_prev {
                outer_accumulate(&mut grads[1], &dz, hp);
            }
            accumulate(&mut grads[2], &dz);
            // dh_{t-1} = W_hhᵀ dz
            dh = matvec_transposed(w_hh, &dz);
        }
        Ok(())
    }
}

/// Reusable activation scratch for one forward/backward pair.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    acts: Vec<Tensor>,
    seq: Option<SeqCache>,
    valid: bool,
}

impl ForwardCache {
    pub fn new() -> ForwardCache {
        ForwardCache::default()
    }

    pub fn output(&self) -> Result<&Tensor, NnError> {
        if !self.valid {
            return Err(NnError::NoForwardCache);
        }
        Ok(self.acts.last().expect("valid cache has activations"))
    }

    /// Per-step hidden states of the last `forward_seq` call.
    pub fn hidden_states(&self) -> Result<&[Tensor], NnError> {
        match &self.seq {
            Some(sc) if self.valid => Ok(&sc.hiddens),
            _ => Err(NnError::NoForwardCache),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct SeqCache {
    inputs: Vec<Tensor>,
    hiddens: Vec<Tensor>,
    cells: Vec<Tensor>,
    gates: Vec<Tensor>,
}

/// Copies `src` parameters into `dst`; the specs must match exactly.
pub fn copy_params(src: &Network, dst: &mut Network) -> Result<(), NnError> {
    if src.spec != dst.spec {
        return Err(NnError::SpecMismatch);
    }
    dst.params.clone_from(&src.params);
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).expect("shape matches generated data")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(acc: &mut Tensor, delta: &Tensor) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

/// `acc[r, c] += col[r] * row[c]`
fn outer_accumulate(acc: &mut Tensor, col: &Tensor, row: &Tensor) {
    let cols = row.len();
    let data = acc.data_mut();
    for (r, cv) in col.data().iter().enumerate() {
        let base = r * cols;
        for (c, rv) in row.data().iter().enumerate() {
            data[base + c] += cv * rv;
        }
    }
}

/// `w x + b`
fn affine(w: &Tensor, x: &Tensor, b: &Tensor) -> Tensor {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    let mut out = b.clone();
    let wd = w.data();
    let xd = x.data();
    for r in 0..rows {
        let row = &wd[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(xd) {
            acc += wv * xv;
        }
        out.data_mut()[r] += acc;
    }
    out
}

/// `out += w x`
fn add_matvec(out: &mut Tensor, w: &Tensor, x: &Tensor) {
    let cols = w.shape()[1];
    let wd = w.data();
    let xd = x.data();
    for (r, o) in out.data_mut().iter_mut().enumerate() {
        let row = &wd[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(xd) {
            acc += wv * xv;
        }
        *o += acc;
    }
}

/// `wᵀ y`
fn matvec_transposed(w: &Tensor, y: &Tensor) -> Tensor {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    let mut out = Tensor::zeros(&[cols]);
    let wd = w.data();
    let od = out.data_mut();
    for r in 0..rows {
        let yv = y.data()[r];
        if yv == 0.0 {
            continue;
        }
        let row = &wd[r * cols..(r + 1) * cols];
        for c in 0..cols {
            od[c] += row[c] * yv;
        }
    }
    out
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    affine(w, x, b)
}

fn dense_backward(x: &Tensor, w: &Tensor, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let mut dw = Tensor::zeros(w.shape());
    outer_accumulate(&mut dw, d_out, x);
    let db = d_out.clone();
    let dx = matvec_transposed(w, d_out);
    (dw, db, dx)
}

fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

fn relu_backward(x: &Tensor, d_out: &Tensor) -> Tensor {
    let mut dx = d_out.clone();
    for (d, xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    out_channels: usize,
    kernel: usize,
    stride: usize,
) -> Tensor {
    let (ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (ih - kernel) / stride + 1;
    let ow = (iw - kernel) / stride + 1;
    let mut out = Tensor::zeros(&[out_channels, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for o in 0..out_channels {
        let out_base = o * oh * ow;
        od[out_base..out_base + oh * ow].fill(b.data()[o]);
        for i in 0..ic {
            let in_base = i * ih * iw;
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = wd[((o * ic + i) * kernel + ky) * kernel + kx];
                    for oy in 0..oh {
                        let in_row = in_base + (oy * stride + ky) * iw + kx;
                        let out_row = out_base + oy * ow;
                        for ox in 0..ow {
                            od[out_row + ox] += wv * xd[in_row + ox * stride];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    d_out: &Tensor,
    out_channels: usize,
    kernel: usize,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let (ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (ih - kernel) / stride + 1;
    let ow = (iw - kernel) / stride + 1;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[out_channels]);
    let mut dx = Tensor::zeros(x.shape());
    let xd = x.data();
    let wd = w.data();
    let dod = d_out.data();
    {
        let dbd = db.data_mut();
        for o in 0..out_channels {
            let base = o * oh * ow;
            dbd[o] = dod[base..base + oh * ow].iter().sum();
        }
    }
    let dwd = dw.data_mut();
    let dxd = dx.data_mut();
    for o in 0..out_channels {
        let out_base = o * oh * ow;
        for i in 0..ic {
            let in_base = i * ih * iw;
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let widx = ((o * ic + i) * kernel + ky) * kernel + kx;
                    let wv = wd[widx];
                    let mut wgrad = 0.0;
                    for oy in 0..oh {
                        let in_row = in_base + (oy * stride + ky) * iw + kx;
                        let out_row = out_base + oy * ow;
                        for ox in 0..ow {
                            let d = dod[out_row + ox];
                            wgrad += d * xd[in_row + ox * stride];
                            dxd[in_row + ox * stride] += wv * d;
                        }
                    }
                    dwd[widx] += wgrad;
                }
            }
        }
    }
    (dw, db, dx)
}
