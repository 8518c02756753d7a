//! Tape-recorded forward operations and their reverse-mode replay.

use super::tensor::Tensor4;
use super::AutodiffError;

/// Epsilon inside the masked-RMSE square root; guards the loss-zero
/// singularity of the gradient.
pub const MASKED_RMSE_EPSILON: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// Handle to a parameter owned by a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient accumulator.
///
/// The gradient always has the value's shape and is zeroed between
/// optimization steps by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
}

/// Ordered collection of parameters; order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> ParamId {
        let grad = Tensor4::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.num_elements()).sum()
    }

    pub fn snapshot_values(&self) -> Vec<Tensor4> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Tensor4]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot layout differs");
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            assert_eq!(p.value.shape(), s.shape(), "snapshot shape differs");
            p.value = s.clone();
        }
    }

    fn add_to_grad(&mut self, id: ParamId, delta: &Tensor4) {
        let grad = &mut self.params[id.0].grad;
        debug_assert_eq!(grad.shape(), delta.shape());
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
            *g += *d;
        }
    }
}

enum Step {
    Conv2d {
        x: VarId,
        w: ParamId,
        b: ParamId,
        out: VarId,
        padding: usize,
    },
    LeakyRelu {
        x: VarId,
        out: VarId,
        slope: f32,
    },
    MaxPool2 {
        x: VarId,
        out: VarId,
        /// Flat index into the input's data for each output element.
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: VarId,
        w: ParamId,
        b: ParamId,
        out: VarId,
    },
    Concat {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Sum {
        x: VarId,
        out: VarId,
    },
    MaskedRmse {
        pred: VarId,
        label: Tensor4,
        mask: Vec<bool>,
        valid: usize,
        out: VarId,
    },
}

/// Eagerly evaluated forward tape with saved activations for the backward
/// pass. Backward traverses the exact reverse of the recorded order and may
/// run once per recorded forward pass.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor4>,
    scalars: Vec<Option<f64>>,
    steps: Vec<Step>,
    grads: Vec<Option<Tensor4>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_value(&mut self, t: Tensor4) -> VarId {
        self.values.push(t);
        self.scalars.push(None);
        VarId(self.values.len() - 1)
    }

    /// Register a leaf input.
    pub fn input(&mut self, t: Tensor4) -> VarId {
        self.push_value(t)
    }

    pub fn value(&self, v: VarId) -> &Tensor4 {
        &self.values[v.0]
    }

    /// f64 value of a scalar-producing node (`sum`, `masked_rmse`).
    pub fn scalar_value(&self, v: VarId) -> Option<f64> {
        self.scalars[v.0]
    }

    /// Gradient of a value after `backward`; `None` if the value does not
    /// influence the seeded loss or backward has not run.
    pub fn grad(&self, v: VarId) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // -- forward ops --------------------------------------------------------

    /// Cross-correlation with zero padding. Weights are `[c_out, c_in, k, k]`
    /// with k ∈ {1, 3}; bias is `[c_out, 1, 1, 1]`.
    pub fn conv2d(
        &mut self,
        params: &ParamSet,
        x: VarId,
        w: ParamId,
        b: ParamId,
        padding: usize,
    ) -> Result<VarId, AutodiffError> {
        let xv = &self.values[x.0];
        let wv = params.value(w);
        let bv = params.value(b);
        let [n, cin, h, wd] = xv.shape();
        let [cout, wcin, k, k2] = wv.shape();
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv kernel must be square, got {k}x{k2}"
            )));
        }
        if k != 1 && k != 3 {
            return Err(AutodiffError::UnsupportedKernel(k));
        }
        if wcin != cin {
            return Err(AutodiffError::ChannelMismatch {
                input: cin,
                expected: wcin,
            });
        }
        if bv.shape() != [cout, 1, 1, 1] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv bias must be [{cout},1,1,1], got {:?}",
                bv.shape()
            )));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(AutodiffError::ShapeMismatch(format!(
                "input {h}x{wd} with padding {padding} is smaller than kernel {k}"
            )));
        }
        let oh = h + 2 * padding - k + 1;
        let ow = wd + 2 * padding - k + 1;
        let ohw = oh * ow;
        let kk = cin * k * k;

        let mut out = Tensor4::zeros([n, cout, oh, ow]);
        let mut col = vec![0.0f32; kk * ohw];
        for nn in 0..n {
            im2col(xv.sample(nn), cin, h, wd, k, padding, oh, ow, &mut col);
            for co in 0..cout {
                let orow = out.plane_mut(nn, co);
                orow.fill(bv.data()[co]);
                let wrow = &wv.data()[co * kk..(co + 1) * kk];
                for (kki, &wval) in wrow.iter().enumerate() {
                    axpy(orow, wval, &col[kki * ohw..(kki + 1) * ohw]);
                }
            }
        }

        let out = self.push_value(out);
        self.steps.push(Step::Conv2d {
            x,
            w,
            b,
            out,
            padding,
        });
        Ok(out)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        self.leaky_relu(x, 0.0)
    }

    /// max(x, slope·x); gradient passes where the input is strictly positive
    /// and is scaled by `slope` elsewhere.
    pub fn leaky_relu(&mut self, x: VarId, slope: f32) -> VarId {
        let xv = &self.values[x.0];
        let mut out = Tensor4::zeros(xv.shape());
        for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
            *o = if v > 0.0 { v } else { slope * v };
        }
        let out = self.push_value(out);
        self.steps.push(Step::LeakyRelu { x, out, slope });
        out
    }

    /// 2×2 max pooling with stride 2; ties go to the first element in
    /// row-major order. Requires even spatial dimensions.
    pub fn maxpool2(&mut self, x: VarId) -> Result<VarId, AutodiffError> {
        let xv = &self.values[x.0];
        let [n, c, h, w] = xv.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::OddSpatial { h, w });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        debug_assert!(xv.num_elements() <= u32::MAX as usize);
        for nn in 0..n {
            for cc in 0..c {
                let base = xv.offset(nn, cc, 0, 0);
                let plane = xv.plane(nn, cc);
                let oplane = out.plane_mut(nn, cc);
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = (2 * i) * w + 2 * j;
                        let mut best = plane[best_idx];
                        for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * i + du) * w + 2 * j + dv;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                        oplane[i * ow + j] = best;
                        argmax.push((base + best_idx) as u32);
                    }
                }
            }
        }
        let out = self.push_value(out);
        self.steps.push(Step::MaxPool2 { x, out, argmax });
        Ok(out)
    }

    /// 2×2 stride-2 transposed convolution doubling H and W. Weights are
    /// `[c_in, c_out, 2, 2]`; each output pixel receives exactly one kernel
    /// tap per input channel.
    pub fn upsample2(
        &mut self,
        params: &ParamSet,
        x: VarId,
        w: ParamId,
        b: ParamId,
    ) -> Result<VarId, AutodiffError> {
        let xv = &self.values[x.0];
        let wv = params.value(w);
        let bv = params.value(b);
        let [n, cin, h, wd] = xv.shape();
        let [wcin, cout, k, k2] = wv.shape();
        if k != 2 || k2 != 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "upsample kernel must be 2x2, got {k}x{k2}"
            )));
        }
        if wcin != cin {
            return Err(AutodiffError::ChannelMismatch {
                input: cin,
                expected: wcin,
            });
        }
        if bv.shape() != [cout, 1, 1, 1] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "upsample bias must be [{cout},1,1,1], got {:?}",
                bv.shape()
            )));
        }
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = Tensor4::zeros([n, cout, oh, ow]);
        let wdata = wv.data();
        for nn in 0..n {
            for co in 0..cout {
                let oplane = out.plane_mut(nn, co);
                oplane.fill(bv.data()[co]);
                for ci in 0..cin {
                    let xplane = xv.plane(nn, ci);
                    let wbase = (ci * cout + co) * 4;
                    let (w00, w01, w10, w11) = (
                        wdata[wbase],
                        wdata[wbase + 1],
                        wdata[wbase + 2],
                        wdata[wbase + 3],
                    );
                    for i in 0..h {
                        let top = 2 * i * ow;
                        let bottom = top + ow;
                        for j in 0..wd {
                            let v = xplane[i * wd + j];
                            oplane[top + 2 * j] += v * w00;
                            oplane[top + 2 * j + 1] += v * w01;
                            oplane[bottom + 2 * j] += v * w10;
                            oplane[bottom + 2 * j + 1] += v * w11;
                        }
                    }
                }
            }
        }
        let out = self.push_value(out);
        self.steps.push(Step::Upsample2 { x, w, b, out });
        Ok(out)
    }

    /// Concatenate along the channel axis; batch and spatial dims must match.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId, AutodiffError> {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let [na, ca, ha, wa] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        if na != nb || ha != hb || wa != wb {
            return Err(AutodiffError::ShapeMismatch(format!(
                "concat requires matching N,H,W: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let hw = ha * wa;
        let mut out = Tensor4::zeros([na, ca + cb, ha, wa]);
        for nn in 0..na {
            let dst = out.sample_mut(nn);
            dst[..ca * hw].copy_from_slice(av.sample(nn));
            dst[ca * hw..].copy_from_slice(bv.sample(nn));
        }
        let out = self.push_value(out);
        self.steps.push(Step::Concat { a, b, out });
        Ok(out)
    }

    /// Scalar sum of every entry, accumulated in f64. Mostly an oracle head
    /// for gradient checks.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let total: f64 = self.values[x.0].data().iter().map(|v| *v as f64).sum();
        let out = self.push_value(Tensor4::scalar(total as f32));
        self.scalars[out.0] = Some(total);
        self.steps.push(Step::Sum { x, out });
        out
    }

    /// Masked RMSE head: sqrt(Σ_valid (pred − label)² / |valid| + ε).
    ///
    /// Invalid pixels contribute nothing to the value and receive exactly
    /// zero gradient. Errors when no pixel is valid.
    pub fn masked_rmse(
        &mut self,
        pred: VarId,
        label: &Tensor4,
        mask: &[bool],
    ) -> Result<VarId, AutodiffError> {
        let pv = &self.values[pred.0];
        if pv.shape() != label.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "prediction {:?} vs label {:?}",
                pv.shape(),
                label.shape()
            )));
        }
        if mask.len() != pv.num_elements() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "mask has {} entries for {} pixels",
                mask.len(),
                pv.num_elements()
            )));
        }
        let mut sse = 0.0f64;
        let mut valid = 0usize;
        for ((p, l), m) in pv.data().iter().zip(label.data()).zip(mask) {
            if *m {
                let d = *p as f64 - *l as f64;
                sse += d * d;
                valid += 1;
            }
        }
        if valid == 0 {
            return Err(AutodiffError::NoValidPixels);
        }
        let loss = (sse / valid as f64 + MASKED_RMSE_EPSILON).sqrt();
        let out = self.push_value(Tensor4::scalar(loss as f32));
        self.scalars[out.0] = Some(loss);
        self.steps.push(Step::MaskedRmse {
            pred,
            label: label.clone(),
            mask: mask.to_vec(),
            valid,
            out,
        });
        Ok(out)
    }

    // -- backward ------------------------------------------------------------

    /// Replay the tape in reverse, accumulating gradients of `seed · loss`
    /// into parameter `.grad` buffers and the graph's value gradients.
    pub fn backward(
        &mut self,
        params: &mut ParamSet,
        loss: VarId,
        seed: f32,
    ) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        if self.steps.is_empty() {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let loss_shape = self.values[loss.0].shape();
        if loss_shape != [1, 1, 1, 1] {
            return Err(AutodiffError::NotScalar(loss_shape));
        }

        let mut grads: Vec<Option<Tensor4>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor4::scalar(seed));

        let steps = std::mem::take(&mut self.steps);
        for step in steps.iter().rev() {
            match step {
                Step::Conv2d {
                    x,
                    w,
                    b,
                    out,
                    padding,
                } => {
                    let dout = match &grads[out.0] {
                        Some(g) => g.clone(),
                        None => continue,
                    };
                    self.conv2d_backward(params, *x, *w, *b, *padding, &dout, &mut grads);
                }
                Step::LeakyRelu { x, out, slope } => {
                    let dout = match &grads[out.0] {
                        Some(g) => g.clone(),
                        None => continue,
                    };
                    let xv = &self.values[x.0];
                    let dx = grad_buf(&mut grads, x.0, xv.shape());
                    for ((g, &v), d) in dx.data_mut().iter_mut().zip(xv.data()).zip(dout.data()) {
                        *g += if v > 0.0 { *d } else { slope * *d };
                    }
                }
                Step::MaxPool2 { x, out, argmax } => {
                    let dout = match &grads[out.0] {
                        Some(g) => g.clone(),
                        None => continue,
                    };
                    let shape = self.values[x.0].shape();
                    let dx = grad_buf(&mut grads, x.0, shape);
                    for (&src, d) in argmax.iter().zip(dout.data()) {
                        dx.data_mut()[src as usize] += *d;
                    }
                }
                Step::Upsample2 { x, w, b, out } => {
                    let dout = match &grads[out.0] {
                        Some(g) => g.clone(),
                        None => continue,
                    };
                    self.upsample2_backward(params, *x, *w, *b, &dout, &mut grads);
                }
                Step::Concat { a, b, out } => {
                    let dout = match &grads[out.0] {
                        Some(g) => g.clone(),
                        None => continue,
                    };
                    let [n, _ca, h, w] = self.values[a.0].shape();
                    let ca = self.values[a.0].shape()[1];
                    let hw = h * w;
                    {
                        let da = grad_buf(&mut grads, a.0, self.values[a.0].shape());
                        for nn in 0..n {
                            let src = &dout.sample(nn)[..ca * hw];
                            for (g, d) in da.sample_mut(nn).iter_mut().zip(src) {
                                *g += *d;
                            }
                        }
                    }
                    {
                        let db = grad_buf(&mut grads, b.0, self.values[b.0].shape());
                        for nn in 0..n {
                            let src = &dout.sample(nn)[ca * hw..];
                            for (g, d) in db.sample_mut(nn).iter_mut().zip(src) {
                                *g += *d;
                            }
                        }
                    }
                }
                Step::Sum { x, out } => {
                    let dout = match &grads[out.0] {
                        Some(g) => g.data()[0],
                        None => continue,
                    };
                    let shape = self.values[x.0].shape();
                    let dx = grad_buf(&mut grads, x.0, shape);
                    for g in dx.data_mut() {
                        *g += dout;
                    }
                }
                Step::MaskedRmse {
                    pred,
                    label,
                    mask,
                    valid,
                    out,
                } => {
                    let dout = match &grads[out.0] {
                        Some(g) => g.data()[0] as f64,
                        None => continue,
                    };
                    let loss = self.scalars[out.0].expect("masked_rmse records its value");
                    let denom = *valid as f64 * loss;
                    let pv = self.values[pred.0].clone();
                    let dp = grad_buf(&mut grads, pred.0, pv.shape());
                    for (((g, &p), &l), m) in dp
                        .data_mut()
                        .iter_mut()
                        .zip(pv.data())
                        .zip(label.data())
                        .zip(mask)
                    {
                        if *m {
                            *g += (dout * (p as f64 - l as f64) / denom) as f32;
                        }
                    }
                }
            }
        }
        self.steps = steps;
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn conv2d_backward(
        &self,
        params: &mut ParamSet,
        x: VarId,
        w: ParamId,
        b: ParamId,
        padding: usize,
        dout: &Tensor4,
        grads: &mut Vec<Option<Tensor4>>,
    ) {
        let xv = &self.values[x.0];
        let [n, cin, h, wd] = xv.shape();
        let wv = params.value(w).clone();
        let [cout, _, k, _] = wv.shape();
        let [_, _, oh, ow] = dout.shape();
        let ohw = oh * ow;
        let kk = cin * k * k;

        let mut dw = Tensor4::zeros(wv.shape());
        let mut db = Tensor4::zeros([cout, 1, 1, 1]);
        let mut col = vec![0.0f32; kk * ohw];
        let mut dcol = vec![0.0f32; kk * ohw];
        let dx = grad_buf(grads, x.0, xv.shape());

        for nn in 0..n {
            im2col(xv.sample(nn), cin, h, wd, k, padding, oh, ow, &mut col);
            for co in 0..cout {
                let drow = dout.plane(nn, co);
                db.data_mut()[co] += drow.iter().sum::<f32>();
                let dwrow = &mut dw.data_mut()[co * kk..(co + 1) * kk];
                for (kki, dwv) in dwrow.iter_mut().enumerate() {
                    *dwv += dot(drow, &col[kki * ohw..(kki + 1) * ohw]);
                }
            }
            dcol.fill(0.0);
            for co in 0..cout {
                let drow = dout.plane(nn, co);
                let wrow = &wv.data()[co * kk..(co + 1) * kk];
                for (kki, &wval) in wrow.iter().enumerate() {
                    axpy(&mut dcol[kki * ohw..(kki + 1) * ohw], wval, drow);
                }
            }
            col2im_add(&dcol, cin, h, wd, k, padding, oh, ow, dx.sample_mut(nn));
        }
        params.add_to_grad(w, &dw);
        params.add_to_grad(b, &db);
    }

    fn upsample2_backward(
        &self,
        params: &mut ParamSet,
        x: VarId,
        w: ParamId,
        b: ParamId,
        dout: &Tensor4,
        grads: &mut Vec<Option<Tensor4>>,
    ) {
        let xv = &self.values[x.0];
        let [n, cin, h, wd] = xv.shape();
        let wv = params.value(w).clone();
        let [_, cout, _, _] = wv.shape();
        let ow = 2 * wd;

        let mut dw = Tensor4::zeros(wv.shape());
        let mut db = Tensor4::zeros([cout, 1, 1, 1]);
        let dx = grad_buf(grads, x.0, xv.shape());
        let wdata = wv.data();

        for nn in 0..n {
            for co in 0..cout {
                let dplane = dout.plane(nn, co);
                db.data_mut()[co] += dplane.iter().sum::<f32>();
                for ci in 0..cin {
                    let xplane = xv.plane(nn, ci);
                    let dxplane = dx.plane_mut(nn, ci);
                    let wbase = (ci * cout + co) * 4;
                    let (w00, w01, w10, w11) = (
                        wdata[wbase],
                        wdata[wbase + 1],
                        wdata[wbase + 2],
                        wdata[wbase + 3],
                    );
                    let (mut g00, mut g01, mut g10, mut g11) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
                    for i in 0..h {
                        let top = 2 * i * ow;
                        let bottom = top + ow;
                        for j in 0..wd {
                            let v = xplane[i * wd + j];
                            let (d00, d01, d10, d11) = (
                                dplane[top + 2 * j],
                                dplane[top + 2 * j + 1],
                                dplane[bottom + 2 * j],
                                dplane[bottom + 2 * j + 1],
                            );
                            g00 += v * d00;
                            g01 += v * d01;
                            g10 += v * d10;
                            g11 += v * d11;
                            dxplane[i * wd + j] +=
                                w00 * d00 + w01 * d01 + w10 * d10 + w11 * d11;
                        }
                    }
                    let dwrow = &mut dw.data_mut()[wbase..wbase + 4];
                    dwrow[0] += g00;
                    dwrow[1] += g01;
                    dwrow[2] += g10;
                    dwrow[3] += g11;
                }
            }
        }
        params.add_to_grad(w, &dw);
        params.add_to_grad(b, &db);
    }
}

/// Get-or-init a gradient accumulator for a value.
fn grad_buf(grads: &mut [Option<Tensor4>], idx: usize, shape: [usize; 4]) -> &mut Tensor4 {
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor4::zeros(shape));
    }
    grads[idx].as_mut().expect("just initialized")
}

// -- kernels ----------------------------------------------------------------

/// y += a·x over equal-length slices. Lane-independent, so it vectorizes
/// without changing the result.
#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Dot product with a fixed 8-lane accumulation order. The reassociation is
/// chosen here, not by the compiler, so results are reproducible.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (xa, xb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in rem_a.iter().zip(rem_b) {
        tail += x * y;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Unfold one sample into a `[c_in·k·k, oh·ow]` patch matrix with zero
/// padding.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    p: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(col.len(), cin * k * k * oh * ow);
    let mut row = 0usize;
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let off = v as isize - p as isize;
                let j_lo = (-off).max(0) as usize;
                let j_hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                for i in 0..oh {
                    let sy = (i + u) as isize - p as isize;
                    let drow = &mut dst[i * ow..(i + 1) * ow];
                    if sy < 0 || sy >= h as isize || j_lo >= j_hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &xc[(sy as usize) * w..(sy as usize + 1) * w];
                    drow[..j_lo].fill(0.0);
                    drow[j_lo..j_hi].copy_from_slice(
                        &srow[(j_lo as isize + off) as usize..(j_hi as isize + off) as usize],
                    );
                    drow[j_hi..].fill(0.0);
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input layout; the
/// adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    p: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let mut row = 0usize;
    for ci in 0..cin {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let off = v as isize - p as isize;
                let j_lo = (-off).max(0) as usize;
                let j_hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                if j_lo < j_hi {
                    for i in 0..oh {
                        let sy = (i + u) as isize - p as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[i * ow + j_lo..i * ow + j_hi];
                        let drow = &mut xc[(sy as usize) * w + (j_lo as isize + off) as usize
                            ..(sy as usize) * w + (j_hi as isize + off) as usize];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn uniform(rng: &mut ChaCha20Rng, shape: [usize; 4], lo: f32, hi: f32) -> Tensor4 {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_1x1_identity() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap());
        let b = params.add("b", Tensor4::zeros([1, 1, 1, 1]));
        let mut g = Graph::new();
        let x = g.input(Tensor4::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.5]).unwrap());
        let y = g.conv2d(&params, x, w, b, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0, 4.5]);
    }

    #[test]
    fn conv_3x3_zero_padding_arithmetic() {
        // All-ones kernel on a constant map: interior sums 9 neighbours,
        // edges 6, corners 4.
        let c = 2.5f32;
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor4::filled([1, 1, 3, 3], 1.0));
        let b = params.add("b", Tensor4::zeros([1, 1, 1, 1]));
        let mut g = Graph::new();
        let x = g.input(Tensor4::filled([1, 1, 4, 4], c));
        let y = g.conv2d(&params, x, w, b, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.at(0, 0, 1, 1), 9.0 * c);
        assert_eq!(out.at(0, 0, 0, 1), 6.0 * c);
        assert_eq!(out.at(0, 0, 0, 0), 4.0 * c);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor4::zeros([2, 3, 3, 3]));
        let b = params.add("b", Tensor4::zeros([2, 1, 1, 1]));
        let mut g = Graph::new();
        let x = g.input(Tensor4::zeros([1, 2, 4, 4]));
        assert!(matches!(
            g.conv2d(&params, x, w, b, 1),
            Err(AutodiffError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let x = g.input(Tensor4::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(&mut params, s, 1.0).unwrap();
        // Gradient passes only where the input was strictly positive.
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_value_and_gradient_routing() {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let x = g.input(Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y);
        g.backward(&mut params, s, 1.0).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_breaks_to_first_row_major() {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let x = g.input(Tensor4::from_vec([1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        let s = g.sum(y);
        g.backward(&mut params, s, 1.0).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_spatial() {
        let mut g = Graph::new();
        let x = g.input(Tensor4::zeros([1, 1, 3, 4]));
        assert!(matches!(
            g.maxpool2(x),
            Err(AutodiffError::OddSpatial { .. })
        ));
    }

    #[test]
    fn concat_splits_gradient_exactly() {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let a = g.input(Tensor4::filled([1, 2, 2, 2], 1.0));
        let b = g.input(Tensor4::filled([1, 3, 2, 2], 2.0));
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y).shape(), [1, 5, 2, 2]);
        let s = g.sum(y);
        g.backward(&mut params, s, 1.0).unwrap();
        let ga: f32 = g.grad(a).unwrap().data().iter().sum();
        let gb: f32 = g.grad(b).unwrap().data().iter().sum();
        // The upstream gradient is all ones over 5*2*2 entries; the split
        // pieces must add back to it.
        assert_eq!(ga + gb, 20.0);
        assert_eq!(ga, 8.0);
        assert_eq!(gb, 12.0);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Tensor4::zeros([1, 1, 2, 2]));
        let b = g.input(Tensor4::zeros([1, 1, 4, 4]));
        assert!(g.concat_channels(a, b).is_err());
    }

    #[test]
    fn backward_of_sum_is_all_ones_and_zero_seed_zeroes() {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let x = g.input(Tensor4::filled([2, 1, 2, 2], 3.0));
        let s = g.sum(x);
        g.backward(&mut params, s, 1.0).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 1.0));

        let mut g = Graph::new();
        let x = g.input(Tensor4::filled([2, 1, 2, 2], 3.0));
        let s = g.sum(x);
        g.backward(&mut params, s, 0.0).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn double_backward_and_backward_before_forward_error() {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let x = g.input(Tensor4::scalar(1.0));
        assert!(matches!(
            g.backward(&mut params, x, 1.0),
            Err(AutodiffError::BackwardBeforeForward)
        ));
        let s = g.sum(x);
        g.backward(&mut params, s, 1.0).unwrap();
        assert!(matches!(
            g.backward(&mut params, s, 1.0),
            Err(AutodiffError::DoubleBackward)
        ));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let x = g.input(Tensor4::zeros([1, 1, 2, 2]));
        let y = g.relu(x);
        assert!(matches!(
            g.backward(&mut params, y, 1.0),
            Err(AutodiffError::NotScalar(_))
        ));
    }

    #[test]
    fn conv_is_linear_in_input_with_zero_bias() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let w = params.add("w", uniform(&mut rng, [4, 3, 3, 3], -0.5, 0.5));
        let b = params.add("b", Tensor4::zeros([4, 1, 1, 1]));
        let x1 = uniform(&mut rng, [2, 3, 6, 6], -1.0, 1.0);
        let alpha = 3.25f32;
        let mut x2 = x1.clone();
        for v in x2.data_mut() {
            *v *= alpha;
        }
        let mut g1 = Graph::new();
        let v1 = g1.input(x1);
        let y1 = g1.conv2d(&params, v1, w, b, 1).unwrap();
        let mut g2 = Graph::new();
        let v2 = g2.input(x2);
        let y2 = g2.conv2d(&params, v2, w, b, 1).unwrap();
        for (a, b) in g1.value(y1).data().iter().zip(g2.value(y2).data()) {
            let scaled = a * alpha;
            assert!(
                (scaled - b).abs() <= 1e-5 * scaled.abs().max(1e-3),
                "conv(αx) deviates: {scaled} vs {b}"
            );
        }
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(99);
            let mut params = ParamSet::new();
            let w = params.add("w", uniform(&mut rng, [4, 3, 3, 3], -0.5, 0.5));
            let b = params.add("b", uniform(&mut rng, [4, 1, 1, 1], -0.1, 0.1));
            let mut g = Graph::new();
            let x = g.input(uniform(&mut rng, [2, 3, 8, 8], -1.0, 1.0));
            let y = g.conv2d(&params, x, w, b, 1).unwrap();
            let y = g.relu(y);
            let p = g.maxpool2(y).unwrap();
            let s = g.sum(p);
            g.backward(&mut params, s, 1.0).unwrap();
            (
                g.value(p).data().to_vec(),
                params.grad(w).data().to_vec(),
                g.grad(x).unwrap().data().to_vec(),
            )
        };
        let (v1, gw1, gx1) = run();
        let (v2, gw2, gx2) = run();
        assert_eq!(v1, v2);
        assert_eq!(gw1, gw2);
        assert_eq!(gx1, gx2);
    }

    // -- finite-difference oracles -------------------------------------------

    fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }

    /// Sum-loss of a conv over fixed input; used to probe d(loss)/d(entry).
    fn conv_sum_loss(params: &ParamSet, x: &Tensor4, w: ParamId, b: ParamId) -> f64 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.conv2d(params, xv, w, b, 1).unwrap();
        let s = g.sum(y);
        g.scalar_value(s).unwrap()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        // Positive data keeps every gradient bounded away from zero, so the
        // relative comparison is meaningful for each entry.
        let w = params.add("w", uniform(&mut rng, [4, 3, 3, 3], 0.1, 0.6));
        let b = params.add("b", uniform(&mut rng, [4, 1, 1, 1], 0.0, 0.2));
        let x = uniform(&mut rng, [2, 3, 5, 5], 0.1, 1.0);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.conv2d(&params, xv, w, b, 1).unwrap();
        let s = g.sum(y);
        g.backward(&mut params, s, 1.0).unwrap();
        let analytic_w = params.grad(w).clone();
        let analytic_b = params.grad(b).clone();
        let analytic_x = g.grad(xv).unwrap().clone();

        let step = 1e-3f32;
        let mut max_err = 0.0f64;
        for idx in 0..params.value(w).num_elements() {
            let orig = params.value(w).data()[idx];
            params.value_mut(w).data_mut()[idx] = orig + step;
            let plus = conv_sum_loss(&params, &x, w, b);
            params.value_mut(w).data_mut()[idx] = orig - step;
            let minus = conv_sum_loss(&params, &x, w, b);
            params.value_mut(w).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step as f64);
            max_err = max_err.max(relative_error(
                analytic_w.data()[idx] as f64,
                numeric,
                1e-3,
            ));
        }
        for idx in 0..params.value(b).num_elements() {
            let orig = params.value(b).data()[idx];
            params.value_mut(b).data_mut()[idx] = orig + step;
            let plus = conv_sum_loss(&params, &x, w, b);
            params.value_mut(b).data_mut()[idx] = orig - step;
            let minus = conv_sum_loss(&params, &x, w, b);
            params.value_mut(b).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step as f64);
            max_err = max_err.max(relative_error(
                analytic_b.data()[idx] as f64,
                numeric,
                1e-3,
            ));
        }
        let mut xp = x.clone();
        for idx in 0..xp.num_elements() {
            let orig = xp.data()[idx];
            xp.data_mut()[idx] = orig + step;
            let plus = conv_sum_loss(&params, &xp, w, b);
            xp.data_mut()[idx] = orig - step;
            let minus = conv_sum_loss(&params, &xp, w, b);
            xp.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step as f64);
            max_err = max_err.max(relative_error(
                analytic_x.data()[idx] as f64,
                numeric,
                1e-3,
            ));
        }
        assert!(max_err < 1e-3, "conv finite-difference max rel err {max_err}");
    }

    fn upsample_sum_loss(params: &ParamSet, x: &Tensor4, w: ParamId, b: ParamId) -> f64 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.upsample2(params, xv, w, b).unwrap();
        let s = g.sum(y);
        g.scalar_value(s).unwrap()
    }

    #[test]
    fn upsample_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut params = ParamSet::new();
        let w = params.add("w", uniform(&mut rng, [3, 2, 2, 2], 0.1, 0.6));
        let b = params.add("b", uniform(&mut rng, [2, 1, 1, 1], 0.0, 0.2));
        let x = uniform(&mut rng, [2, 3, 4, 4], 0.1, 1.0);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.upsample2(&params, xv, w, b).unwrap();
        assert_eq!(g.value(y).shape(), [2, 2, 8, 8]);
        let s = g.sum(y);
        g.backward(&mut params, s, 1.0).unwrap();
        let analytic_w = params.grad(w).clone();
        let analytic_x = g.grad(xv).unwrap().clone();

        let step = 1e-3f32;
        let mut max_err = 0.0f64;
        for idx in 0..params.value(w).num_elements() {
            let orig = params.value(w).data()[idx];
            params.value_mut(w).data_mut()[idx] = orig + step;
            let plus = upsample_sum_loss(&params, &x, w, b);
            params.value_mut(w).data_mut()[idx] = orig - step;
            let minus = upsample_sum_loss(&params, &x, w, b);
            params.value_mut(w).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step as f64);
            max_err = max_err.max(relative_error(
                analytic_w.data()[idx] as f64,
                numeric,
                1e-3,
            ));
        }
        let mut xp = x.clone();
        for idx in 0..xp.num_elements() {
            let orig = xp.data()[idx];
            xp.data_mut()[idx] = orig + step;
            let plus = upsample_sum_loss(&params, &xp, w, b);
            xp.data_mut()[idx] = orig - step;
            let minus = upsample_sum_loss(&params, &xp, w, b);
            xp.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step as f64);
            max_err = max_err.max(relative_error(
                analytic_x.data()[idx] as f64,
                numeric,
                1e-3,
            ));
        }
        assert!(
            max_err < 1e-3,
            "upsample finite-difference max rel err {max_err}"
        );
    }

    #[test]
    fn masked_rmse_value_and_gradient() {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let pred = g.input(Tensor4::from_vec([1, 1, 1, 2], vec![3.0, 100.0]).unwrap());
        let label = Tensor4::from_vec([1, 1, 1, 2], vec![1.0, -55.0]).unwrap();
        // Only the first pixel is valid: loss = |3-1| = 2.
        let loss = g.masked_rmse(pred, &label, &[true, false]).unwrap();
        let lv = g.scalar_value(loss).unwrap();
        assert!((lv - 2.0).abs() < 1e-6);
        g.backward(&mut params, loss, 1.0).unwrap();
        let grad = g.grad(pred).unwrap();
        // d loss / d p0 = (p0 - l0) / (1 * loss) = 1; invalid pixel exactly 0.
        assert!((grad.data()[0] - 1.0).abs() < 1e-6);
        assert_eq!(grad.data()[1], 0.0);
    }

    #[test]
    fn masked_rmse_rejects_all_invalid() {
        let mut g = Graph::new();
        let pred = g.input(Tensor4::zeros([1, 1, 1, 2]));
        let label = Tensor4::zeros([1, 1, 1, 2]);
        assert!(matches!(
            g.masked_rmse(pred, &label, &[false, false]),
            Err(AutodiffError::NoValidPixels)
        ));
    }
}
