//! Forward and backward passes for [`NetworkSpec`] networks.
//!
//! Activations are NHWC. A convolution lowers its input with im2col so that
//! the forward pass, the weight gradient and the input gradient are each one
//! matrix product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{LayerPlan, LayerSpec, NetworkSpec, Shape};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    plan: Vec<LayerPlan>,
    params: Vec<T>,
}

/// Per-layer values saved by the forward pass for the backward pass.
enum Cache<T> {
    None,
    Conv { cols: Vec<T> },
    Relu { out: Vec<T> },
    Pool { argmax: Vec<u32> },
    Dense { input: Vec<T> },
    Residual { cols1: Vec<T>, hidden: Vec<T>, cols2: Vec<T>, out: Vec<T> },
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<T> {
    batch: usize,
    caches: Vec<Cache<T>>,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn kkc(&self) -> usize {
        self.k * self.k * self.c
    }

    fn weights(&self) -> usize {
        self.kkc() * self.oc
    }
}

fn geom(input: Shape, output: Shape, k: usize, stride: usize, pad: usize) -> ConvGeom {
    match (input, output) {
        (Shape::Spatial { h, w, c }, Shape::Spatial { h: oh, w: ow, c: oc }) => {
            ConvGeom { h, w, c, oh, ow, oc, k, stride, pad }
        }
        _ => unreachable!("convolution planned on non-spatial shapes"),
    }
}

fn im2col<T: Scalar>(x: &[T], n: usize, g: ConvGeom) -> Vec<T> {
    let kkc = g.kkc();
    let mut cols = vec![T::zero(); n * g.oh * g.ow * kkc];
    for b in 0..n {
        let img = &x[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * kkc;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.c;
                        let dst = row + (ky * g.k + kx) * g.c;
                        cols[dst..dst + g.c].copy_from_slice(&img[src..src + g.c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], n: usize, g: ConvGeom) -> Vec<T> {
    let kkc = g.kkc();
    let mut dx = vec![T::zero(); n * g.h * g.w * g.c];
    for b in 0..n {
        let img = &mut dx[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * kkc;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.c;
                        let src = row + (ky * g.k + kx) * g.c;
                        for (d, &s) in img[dst..dst + g.c].iter_mut().zip(&dcols[src..src + g.c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward<T: Scalar>(x: &[T], n: usize, g: ConvGeom, p: &[T]) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, n, g);
    let rows = n * g.oh * g.ow;
    let (w, bias) = p.split_at(g.weights());
    let mut out = Vec::with_capacity(rows * g.oc);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    T::gemm(rows, g.kkc(), g.oc, &cols, false, w, false, &mut out, T::one());
    (out, cols)
}

/// Returns the input gradient (if requested) and accumulates into `dp`.
fn conv_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    n: usize,
    g: ConvGeom,
    p: &[T],
    dp: Option<&mut [T]>,
    want_input: bool,
) -> Option<Vec<T>> {
    let rows = n * g.oh * g.ow;
    if let Some(dp) = dp {
        let (dw, db) = dp.split_at_mut(g.weights());
        T::gemm(g.kkc(), rows, g.oc, cols, true, dout, false, dw, T::one());
        for r in 0..rows {
            for (d, &v) in db.iter_mut().zip(&dout[r * g.oc..(r + 1) * g.oc]) {
                *d += v;
            }
        }
    }
    if !want_input {
        return None;
    }
    let mut dcols = vec![T::zero(); rows * g.kkc()];
    T::gemm(rows, g.oc, g.kkc(), dout, false, &p[..g.weights()], true, &mut dcols, T::zero());
    Some(col2im(&dcols, n, g))
}

fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn relu_mask<T: Scalar>(grad: &mut [T], out: &[T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

fn residual_geoms(shape: Shape) -> ConvGeom {
    geom(shape, shape, 3, 1, 1)
}

impl<T: Scalar> Network<T> {
    /// He-normal weights and zero biases, drawn from `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let plan = spec.plan()?;
        let total = plan.iter().map(|p| p.n_params).sum();
        let mut params = vec![T::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |dst: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in dst {
                *v = lit(normal.sample(rng));
            }
        };
        for lp in &plan {
            let p = &mut params[lp.offset..lp.offset + lp.n_params];
            match lp.layer {
                LayerSpec::Conv2d { kernel, stride, pad, .. } => {
                    let g = geom(lp.input, lp.output, kernel, stride, pad);
                    fill(&mut p[..g.weights()], g.kkc(), &mut rng);
                }
                LayerSpec::Dense { out } => {
                    let d = lp.input.len();
                    fill(&mut p[..d * out], d, &mut rng);
                }
                LayerSpec::Residual { .. } => {
                    let g = residual_geoms(lp.input);
                    let half = g.weights() + g.oc;
                    fill(&mut p[..g.weights()], g.kkc(), &mut rng);
                    fill(&mut p[half..half + g.weights()], g.kkc(), &mut rng);
                    // keep the residual branch small at init so the identity path dominates
                    for v in &mut p[half..half + g.weights()] {
                        *v *= lit(0.1);
                    }
                }
                _ => {}
            }
        }
        Ok(Network { spec, plan, params })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<T>) -> Result<Self> {
        let plan = spec.plan()?;
        let total: usize = plan.iter().map(|p| p.n_params).sum();
        if params.len() != total {
            return Err(Error::invalid(format!(
                "network needs {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Network { spec, plan, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|v| U::from(*v).expect("finite")).collect(),
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let (h, w, c) = self.spec.input;
        match batch.shape() {
            [n, bh, bw, bc] if (*bh, *bw, *bc) == (h, w, c) => Ok(*n),
            s => Err(Error::invalid(format!("batch shape {s:?} does not match network input N x {h} x {w} x {c}"))),
        }
    }

    fn run(&self, batch: &Tensor<T>, keep: bool) -> Result<(Vec<T>, Tape<T>)> {
        let n = self.check_batch(batch)?;
        let mut x = batch.data().to_vec();
        let mut caches = Vec::with_capacity(if keep { self.plan.len() } else { 0 });
        for lp in &self.plan {
            let p = &self.params[lp.offset..lp.offset + lp.n_params];
            let (y, cache) = match lp.layer {
                LayerSpec::Conv2d { kernel, stride, pad, .. } => {
                    let (y, cols) = conv_forward(&x, n, geom(lp.input, lp.output, kernel, stride, pad), p);
                    (y, Cache::Conv { cols })
                }
                LayerSpec::Relu => {
                    relu_inplace(&mut x);
                    let cache = if keep { Cache::Relu { out: x.clone() } } else { Cache::None };
                    (x, cache)
                }
                LayerSpec::MaxPool2d { k } => {
                    let (y, argmax) = maxpool_forward(&x, n, lp.input, lp.output, k);
                    (y, Cache::Pool { argmax })
                }
                LayerSpec::Flatten => (x, Cache::None),
                LayerSpec::Dense { out } => {
                    let d = lp.input.len();
                    let mut y = Vec::with_capacity(n * out);
                    for _ in 0..n {
                        y.extend_from_slice(&p[d * out..]);
                    }
                    T::gemm(n, d, out, &x, false, &p[..d * out], false, &mut y, T::one());
                    (y, Cache::Dense { input: x })
                }
                LayerSpec::Residual { .. } => {
                    let g = residual_geoms(lp.input);
                    let (p1, p2) = p.split_at(g.weights() + g.oc);
                    let (mut hidden, cols1) = conv_forward(&x, n, g, p1);
                    relu_inplace(&mut hidden);
                    let (mut out, cols2) = conv_forward(&hidden, n, g, p2);
                    for (o, &xi) in out.iter_mut().zip(&x) {
                        *o += xi;
                    }
                    relu_inplace(&mut out);
                    let cache = if keep {
                        Cache::Residual { cols1, hidden, cols2, out: out.clone() }
                    } else {
                        Cache::None
                    };
                    (out, cache)
                }
            };
            if keep {
                caches.push(cache);
            }
            x = y;
        }
        Ok((x, Tape { batch: n, caches }))
    }

    /// Logits, `N x classes`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let (logits, tape) = self.run(batch, false)?;
        Tensor::new(&[tape.batch, self.spec.classes], logits)
    }

    /// Forward in chunks of at most `chunk` samples.
    pub fn forward_chunked(&self, batch: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = self.check_batch(batch)?;
        let mut out = Vec::with_capacity(n * self.spec.classes);
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk.max(1)) {
            out.extend_from_slice(self.forward(&batch.select(part))?.data());
        }
        Tensor::new(&[n, self.spec.classes], out)
    }

    pub fn forward_with_tape(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let (logits, tape) = self.run(batch, true)?;
        Ok((Tensor::new(&[tape.batch, self.spec.classes], logits)?, tape))
    }

    /// Back-propagate `dlogits` (`N x classes`). Returns (parameter gradient,
    /// input gradient), each only if requested.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dlogits: &[T],
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let n = tape.batch;
        let mut dparams = if want_params { Some(vec![T::zero(); self.params.len()]) } else { None };
        let mut grad = dlogits.to_vec();
        for (i, (lp, cache)) in self.plan.iter().zip(&tape.caches).enumerate().rev() {
            let need_dx = want_input || i > 0;
            let p = &self.params[lp.offset..lp.offset + lp.n_params];
            let dp = dparams.as_mut().map(|d| &mut d[lp.offset..lp.offset + lp.n_params]);
            grad = match (lp.layer, cache) {
                (LayerSpec::Conv2d { kernel, stride, pad, .. }, Cache::Conv { cols }) => {
                    let g = geom(lp.input, lp.output, kernel, stride, pad);
                    match conv_backward(&grad, cols, n, g, p, dp, need_dx) {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (LayerSpec::Relu, Cache::Relu { out }) => {
                    relu_mask(&mut grad, out);
                    grad
                }
                (LayerSpec::MaxPool2d { .. }, Cache::Pool { argmax }) => {
                    let mut dx = vec![T::zero(); n * lp.input.len()];
                    for (&src, &g) in argmax.iter().zip(&grad) {
                        dx[src as usize] += g;
                    }
                    dx
                }
                (LayerSpec::Flatten, _) => grad,
                (LayerSpec::Dense { out }, Cache::Dense { input }) => {
                    let d = lp.input.len();
                    if let Some(dp) = dp {
                        let (dw, db) = dp.split_at_mut(d * out);
                        T::gemm(d, n, out, input, true, &grad, false, dw, T::one());
                        for r in 0..n {
                            for (b, &v) in db.iter_mut().zip(&grad[r * out..(r + 1) * out]) {
                                *b += v;
                            }
                        }
                    }
                    if !need_dx {
                        break;
                    }
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, out, d, &grad, false, &p[..d * out], true, &mut dx, T::zero());
                    dx
                }
                (LayerSpec::Residual { .. }, Cache::Residual { cols1, hidden, cols2, out }) => {
                    let g = residual_geoms(lp.input);
                    let half = g.weights() + g.oc;
                    let (p1, p2) = p.split_at(half);
                    let (dp1, dp2) = match dp {
                        Some(d) => {
                            let (a, b) = d.split_at_mut(half);
                            (Some(a), Some(b))
                        }
                        None => (None, None),
                    };
                    relu_mask(&mut grad, out);
                    let mut dhidden = conv_backward(&grad, cols2, n, g, p2, dp2, true).unwrap();
                    relu_mask(&mut dhidden, hidden);
                    if let Some(dx) = conv_backward(&dhidden, cols1, n, g, p1, dp1, need_dx) {
                        for (s, d) in grad.iter_mut().zip(dx) {
                            *s += d;
                        }
                    }
                    grad
                }
                _ => unreachable!("tape does not match plan"),
            };
        }
        let dinput = if want_input { Some(grad) } else { None };
        (dparams, dinput)
    }

    /// Mean cross-entropy over the batch and its parameter gradient.
    pub fn loss_and_param_gradients(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<T>)> {
        let (logits, tape) = self.forward_with_tape(batch)?;
        let n = tape.batch;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels, lit(1.0 / n.max(1) as f64))?;
        let (dp, _) = self.backward(&tape, &dlogits, true, false);
        Ok((loss, dp.unwrap()))
    }

    /// Gradient of each sample's own cross-entropy loss with respect to that
    /// sample's input, same shape as `batch`.
    pub fn input_gradient(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let (logits, tape) = self.forward_with_tape(batch)?;
        let (_, dlogits) = softmax_cross_entropy(&logits, labels, T::one())?;
        let (_, dx) = self.backward(&tape, &dlogits, false, true);
        Tensor::new(batch.shape(), dx.unwrap())
    }

    /// ReLU on/off decisions and max-pool winners for `batch`; two parameter
    /// settings with equal patterns lie in the same smooth region of the loss.
    pub fn activation_pattern(&self, batch: &Tensor<T>) -> Result<Vec<u8>> {
        let (_, tape) = self.run(batch, true)?;
        let mut bits = Vec::new();
        let mask = |bits: &mut Vec<u8>, v: &[T]| bits.extend(v.iter().map(|x| u8::from(*x > T::zero())));
        for c in &tape.caches {
            match c {
                Cache::Relu { out } => mask(&mut bits, out),
                Cache::Pool { argmax } => bits.extend(argmax.iter().flat_map(|a| a.to_le_bytes())),
                Cache::Residual { hidden, out, .. } => {
                    mask(&mut bits, hidden);
                    mask(&mut bits, out);
                }
                _ => {}
            }
        }
        Ok(bits)
    }

    /// Mean cross-entropy only.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(batch)?;
        Ok(softmax_cross_entropy(&logits, labels, T::one())?.0)
    }
}

fn maxpool_forward<T: Scalar>(x: &[T], n: usize, input: Shape, output: Shape, k: usize) -> (Vec<T>, Vec<u32>) {
    let (Shape::Spatial { h, w, c }, Shape::Spatial { h: oh, w: ow, .. }) = (input, output) else {
        unreachable!("pooling planned on non-spatial shapes")
    };
    let mut y = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = ((b * h + oy * k + ky) * w + ox * k + kx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (y, arg)
}

/// Row-wise softmax with f64 accumulation.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let c = logits.shape()[1];
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64().unwrap() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    probs
}

/// Mean cross-entropy of `logits` (`N x c`) against `labels`, and
/// `scale * (softmax - onehot)` as the logit gradient.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], scale: T) -> Result<(f64, Vec<T>)> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::invalid(format!("logits must be N x c, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (i, &y) in labels.iter().enumerate() {
        let row = &probs[i * c..(i + 1) * c];
        // log-softmax directly for accuracy at large margins
        let lrow = &logits.data()[i * c..(i + 1) * c];
        let m = lrow.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
        let lse = m + lrow.iter().map(|v| (v.to_f64().unwrap() - m).exp()).sum::<f64>().ln();
        loss += lse - lrow[y].to_f64().unwrap();
        for (j, &p) in row.iter().enumerate() {
            let g = if j == y { p - 1.0 } else { p };
            grad.push(lit::<T>(g) * scale);
        }
    }
    Ok((loss / n.max(1) as f64, grad))
}
