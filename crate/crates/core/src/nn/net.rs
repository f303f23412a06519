use rand::Rng as _;

use super::linalg::{gemm, Scalar};
use super::{ConvBlock, Model, BN_EPS, BN_MOMENTUM};
use crate::binviz::InputTensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `n` single-channel `side`×`side` inputs, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub side: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_inputs(inputs: &[InputTensor], side: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(inputs.len() * side * side);
        for t in inputs {
            if t.side != side || t.values.len() != side * side {
                return Err(Error::ShapeMismatch(format!(
                    "input side {} but model expects {side}",
                    t.side
                )));
            }
            data.extend(t.values.iter().map(|&v| T::of(v as f64)));
        }
        Ok(Batch {
            n: inputs.len(),
            side,
            data,
        })
    }
}

pub enum Mode<'a> {
    Eval,
    /// Batch statistics, dropout drawn from the given stream.
    Train(&'a mut Rng),
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    /// Conv resolution (block input side).
    side: usize,
    cols: Vec<T>,
    /// ReLU output `[n, out, side, side]`.
    act: Vec<T>,
    pool_idx: Vec<u32>,
    drop_mask: Option<Vec<T>>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

#[derive(Debug, Clone)]
struct DenseCache<T> {
    input: Vec<T>,
    /// ReLU output before dropout (hidden layers only).
    act: Vec<T>,
    drop_mask: Option<Vec<T>>,
}

/// Activations cached by a forward pass, sufficient for backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub n: usize,
    pub train: bool,
    kept: bool,
    blocks: Vec<BlockCache<T>>,
    dense: Vec<DenseCache<T>>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    classes: usize,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.probs
            .chunks(self.classes)
            .map(|r| r.iter().map(|v| v.f64()).collect())
            .collect()
    }

    /// Last conv feature map (post-ReLU) as `(channels, side, values)`.
    pub fn feature_map(&self) -> Option<(usize, usize, &[T])> {
        let b = self.blocks.last()?;
        let hw = b.side * b.side;
        Some((b.act.len() / (self.n * hw), b.side, &b.act))
    }

    /// Mean cross-entropy against `labels`.
    pub fn loss(&self, labels: &[usize]) -> f64 {
        let c = self.classes;
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &self.logits[i * c..(i + 1) * c];
                let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln();
                lse - row[y].f64()
            })
            .sum::<f64>()
            / labels.len() as f64
    }
}

/// Gradients aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Vec<T>>,
}

/// Last conv feature map of one sample and the class-score gradient on it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapGrad {
    pub channels: usize,
    pub side: usize,
    pub activations: Vec<f64>,
    pub gradient: Vec<f64>,
}

fn im2col<T: Scalar>(x: &[T], ch: usize, s: usize, k: usize, cols: &mut [T]) {
    let p = k / 2;
    let hw = s * s;
    for c in 0..ch {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * hw..][..hw];
                for y in 0..s {
                    let sy = y as isize + ki as isize - p as isize;
                    let dst = &mut row[y * s..(y + 1) * s];
                    if sy < 0 || sy >= s as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * s..(sy as usize + 1) * s];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + kj as isize - p as isize;
                        *d = if sx < 0 || sx >= s as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], ch: usize, s: usize, k: usize, x: &mut [T]) {
    let p = k / 2;
    let hw = s * s;
    x.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * hw..][..hw];
                for y in 0..s {
                    let sy = y as isize + ki as isize - p as isize;
                    if sy < 0 || sy >= s as isize {
                        continue;
                    }
                    for xo in 0..s {
                        let sx = xo as isize + kj as isize - p as isize;
                        if sx >= 0 && sx < s as isize {
                            x[c * hw + sy as usize * s + sx as usize] += row[y * s + xo];
                        }
                    }
                }
            }
        }
    }
}

fn dropout_mask<T: Scalar>(len: usize, rate: f64, r: &mut Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if r.random_bool(1.0 - rate) { keep } else { T::zero() })
        .collect()
}

fn relu<T: Scalar>(v: &mut [T]) {
    v.iter_mut().for_each(|x| {
        if *x < T::zero() {
            *x = T::zero()
        }
    });
}

fn softmax_rows<T: Scalar>(logits: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, o) in logits.chunks(c).zip(out.chunks_mut(c)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &v) in o.iter_mut().zip(row) {
            *d = (v - m).exp();
            sum += *d;
        }
        o.iter_mut().for_each(|d| *d = *d / sum);
    }
    out
}

/// Pool, dropout and normalization of one block, from its ReLU output.
#[allow(clippy::too_many_arguments)]
fn pool_drop_norm<T: Scalar>(
    blk: &ConvBlock<T>,
    act: &[T],
    n: usize,
    s: usize,
    drop_rate: f64,
    rng: Option<&mut Rng>,
) -> (Vec<T>, Vec<u32>, Option<Vec<T>>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let ch = blk.out_ch;
    let ps = s / 2;
    let phw = ps * ps;
    let mut pooled = vec![T::zero(); n * ch * phw];
    let mut idx = vec![0u32; n * ch * phw];
    for plane in 0..n * ch {
        let base = plane * s * s;
        for y in 0..ps {
            for x in 0..ps {
                let mut best = base + 2 * y * s + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * s + 2 * x + dx;
                    if act[j] > act[best] {
                        best = j;
                    }
                }
                let o = plane * phw + y * ps + x;
                pooled[o] = act[best];
                idx[o] = best as u32;
            }
        }
    }
    let train = rng.is_some();
    let mask = match rng {
        Some(r) if drop_rate > 0.0 => {
            let m = dropout_mask(pooled.len(), drop_rate, r);
            pooled.iter_mut().zip(&m).for_each(|(v, k)| *v *= *k);
            Some(m)
        }
        _ => None,
    };
    let count = n * phw;
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    let mut inv_std = vec![T::zero(); ch];
    if train {
        for c in 0..ch {
            let mut acc = 0.0f64;
            for i in 0..n {
                acc += pooled[(i * ch + c) * phw..][..phw].iter().map(|v| v.f64()).sum::<f64>();
            }
            let m = acc / count as f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                sq += pooled[(i * ch + c) * phw..][..phw]
                    .iter()
                    .map(|v| (v.f64() - m).powi(2))
                    .sum::<f64>();
            }
            let v = sq / count as f64;
            mean[c] = T::of(m);
            var[c] = T::of(v);
            inv_std[c] = T::of(1.0 / (v + BN_EPS).sqrt());
        }
    } else {
        for c in 0..ch {
            mean[c] = blk.running_mean[c];
            inv_std[c] = T::of(1.0 / (blk.running_var[c].f64() + BN_EPS).sqrt());
        }
    }
    let mut xhat = pooled;
    let mut out = vec![T::zero(); xhat.len()];
    for i in 0..n {
        for c in 0..ch {
            let o = (i * ch + c) * phw;
            for j in o..o + phw {
                xhat[j] = (xhat[j] - mean[c]) * inv_std[c];
                out[j] = blk.gamma[c] * xhat[j] + blk.beta[c];
            }
        }
    }
    (out, idx, mask, xhat, inv_std, mean, var)
}

fn dense_forward<T: Scalar>(d: &super::Dense<T>, x: &[T], n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * d.outputs];
    gemm(n, d.inputs, d.outputs, x, false, &d.weight, true, &mut y, false);
    for row in y.chunks_mut(d.outputs) {
        row.iter_mut().zip(&d.bias).for_each(|(v, b)| *v += *b);
    }
    y
}

impl<T: Scalar> Model<T> {
    /// Forward pass. Training mode uses batch statistics (and updates the
    /// running ones) and applies dropout from the given stream.
    pub fn forward(&mut self, batch: &Batch<T>, mode: Mode<'_>) -> Result<ForwardTrace<T>> {
        match mode {
            Mode::Eval => self.forward_eval(batch, true),
            Mode::Train(r) => {
                let trace = self.run(batch, Some(r), true)?;
                let n = trace.n;
                for (blk, cache) in self.blocks.iter_mut().zip(&trace.blocks) {
                    let count = (n * (cache.side / 2) * (cache.side / 2)) as f64;
                    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    let m = T::of(BN_MOMENTUM);
                    let one_m = T::of(1.0 - BN_MOMENTUM);
                    for c in 0..blk.out_ch {
                        blk.running_mean[c] = m * blk.running_mean[c] + one_m * cache.batch_mean[c];
                        blk.running_var[c] = m * blk.running_var[c]
                            + one_m * T::of(cache.batch_var[c].f64() * unbias);
                    }
                }
                Ok(trace)
            }
        }
    }

    /// Deterministic inference; `keep` retains what backward needs.
    pub fn forward_eval(&self, batch: &Batch<T>, keep: bool) -> Result<ForwardTrace<T>> {
        self.run(batch, None, keep)
    }

    fn run(&self, batch: &Batch<T>, mut rng: Option<&mut Rng>, keep: bool) -> Result<ForwardTrace<T>> {
        let side = self.config.input_side;
        if batch.side != side || batch.data.len() != batch.n * side * side {
            return Err(Error::ShapeMismatch(format!(
                "batch of side {} for model side {side}",
                batch.side
            )));
        }
        let n = batch.n;
        let h = &self.config.hyper;
        let train = rng.is_some();
        let mut x = batch.data.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (bi, blk) in self.blocks.iter().enumerate() {
            let s = self.config.block_side(bi);
            let hw = s * s;
            let ck2 = blk.in_ch * blk.kernel * blk.kernel;
            let mut act = vec![T::zero(); n * blk.out_ch * hw];
            let mut cols = vec![T::zero(); if keep { n * ck2 * hw } else { ck2 * hw }];
            for i in 0..n {
                let c = if keep { &mut cols[i * ck2 * hw..][..ck2 * hw] } else { &mut cols[..] };
                im2col(&x[i * blk.in_ch * hw..][..blk.in_ch * hw], blk.in_ch, s, blk.kernel, c);
                let y = &mut act[i * blk.out_ch * hw..][..blk.out_ch * hw];
                gemm(blk.out_ch, ck2, hw, &blk.weight, false, c, false, y, false);
                for (o, plane) in y.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += blk.bias[o]);
                }
            }
            relu(&mut act);
            let (out, pool_idx, drop_mask, xhat, inv_std, batch_mean, batch_var) =
                pool_drop_norm(blk, &act, n, s, h.dropout_conv, rng.as_deref_mut());
            x = out;
            blocks.push(BlockCache {
                side: s,
                cols: if keep { cols } else { Vec::new() },
                act,
                pool_idx,
                drop_mask,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
            });
        }
        let (dense, logits) = self.head(x, n, rng.as_deref_mut());
        let probs = softmax_rows(&logits, self.num_classes());
        Ok(ForwardTrace {
            n,
            train,
            kept: keep,
            blocks,
            dense,
            logits,
            probs,
            classes: self.num_classes(),
        })
    }

    fn head(&self, flat: Vec<T>, n: usize, mut rng: Option<&mut Rng>) -> (Vec<DenseCache<T>>, Vec<T>) {
        let mut caches = Vec::with_capacity(self.dense.len());
        let mut x = flat;
        let last = self.dense.len() - 1;
        for (j, d) in self.dense.iter().enumerate() {
            let mut y = dense_forward(d, &x, n);
            if j == last {
                caches.push(DenseCache {
                    input: x,
                    act: Vec::new(),
                    drop_mask: None,
                });
                return (caches, y);
            }
            relu(&mut y);
            let act = y.clone();
            let rate = self.config.hyper.dropout_dense;
            let drop_mask = match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => {
                    let m = dropout_mask(y.len(), rate, r);
                    y.iter_mut().zip(&m).for_each(|(v, k)| *v *= *k);
                    Some(m)
                }
                _ => None,
            };
            caches.push(DenseCache {
                input: x,
                act,
                drop_mask,
            });
            x = y;
        }
        unreachable!("model has an output layer")
    }

    /// Eval-mode logits of one sample computed from a given last-block
    /// feature map (post-ReLU), i.e. everything downstream of it.
    pub fn logits_from_feature_map(&self, act: &[T]) -> Vec<T> {
        let bi = self.blocks.len() - 1;
        let blk = &self.blocks[bi];
        let s = self.config.block_side(bi);
        let (out, ..) = pool_drop_norm(blk, act, 1, s, 0.0, None);
        self.head(out, 1, None).1
    }

    /// Gradients of mean cross-entropy over the traced batch.
    pub fn backward(&self, trace: &ForwardTrace<T>, labels: &[usize]) -> Result<(Grads<T>, Vec<T>)> {
        if labels.len() != trace.n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for batch of {}",
                labels.len(),
                trace.n
            )));
        }
        let c = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::ShapeMismatch(format!("label {bad} >= {c} classes")));
        }
        let inv_n = T::of(1.0 / trace.n as f64);
        let mut dlogits = trace.probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            dlogits[i * c + y] -= T::one();
        }
        dlogits.iter_mut().for_each(|v| *v *= inv_n);
        let (g, da) = self.backprop(trace, dlogits, true)?;
        Ok((g.expect("param grads requested"), da))
    }

    /// Gradient of the pre-softmax score of `class` with respect to the last
    /// conv feature map, for the first sample of the trace.
    pub fn class_score_feature_grad(&self, trace: &ForwardTrace<T>, class: usize) -> Result<FeatureMapGrad> {
        let c = self.num_classes();
        if class >= c {
            return Err(Error::ShapeMismatch(format!("class {class} >= {c}")));
        }
        let mut dlogits = vec![T::zero(); trace.n * c];
        dlogits[class] = T::one();
        let (_, da) = self.backprop(trace, dlogits, false)?;
        let (channels, side, act) = trace.feature_map().ok_or(Error::MissingTrace)?;
        let per = channels * side * side;
        Ok(FeatureMapGrad {
            channels,
            side,
            activations: act[..per].iter().map(|v| v.f64()).collect(),
            gradient: da[..per].iter().map(|v| v.f64()).collect(),
        })
    }

    /// Backpropagates `dlogits`; returns parameter gradients (when asked)
    /// and the gradient at the last conv feature map.
    fn backprop(
        &self,
        trace: &ForwardTrace<T>,
        dlogits: Vec<T>,
        want_params: bool,
    ) -> Result<(Option<Grads<T>>, Vec<T>)> {
        if !trace.kept || trace.blocks.len() != self.blocks.len() {
            return Err(Error::MissingTrace);
        }
        let n = trace.n;
        let mut dense_grads: Vec<(Vec<T>, Vec<T>)> = Vec::new();
        let mut g = dlogits;
        for j in (0..self.dense.len()).rev() {
            let d = &self.dense[j];
            let cache = &trace.dense[j];
            if want_params {
                let mut dw = vec![T::zero(); d.outputs * d.inputs];
                gemm(d.outputs, n, d.inputs, &g, true, &cache.input, false, &mut dw, false);
                let mut db = vec![T::zero(); d.outputs];
                for row in g.chunks(d.outputs) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                }
                dense_grads.push((dw, db));
            }
            let mut dx = vec![T::zero(); n * d.inputs];
            gemm(n, d.outputs, d.inputs, &g, false, &d.weight, false, &mut dx, false);
            if j > 0 {
                let prev = &trace.dense[j - 1];
                if let Some(m) = &prev.drop_mask {
                    dx.iter_mut().zip(m).for_each(|(v, k)| *v *= *k);
                }
                dx.iter_mut().zip(&prev.act).for_each(|(v, a)| {
                    if *a <= T::zero() {
                        *v = T::zero()
                    }
                });
            }
            g = dx;
        }
        dense_grads.reverse();

        let mut block_grads: Vec<[Vec<T>; 4]> = Vec::new();
        let mut feature_grad = Vec::new();
        for bi in (0..self.blocks.len()).rev() {
            let blk = &self.blocks[bi];
            let cache = &trace.blocks[bi];
            let s = cache.side;
            let ch = blk.out_ch;
            let phw = (s / 2) * (s / 2);
            let count = (n * phw) as f64;

            // batch norm
            let mut dgamma = vec![T::zero(); ch];
            let mut dbeta = vec![T::zero(); ch];
            let mut dx = vec![T::zero(); g.len()];
            for c in 0..ch {
                let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
                for i in 0..n {
                    let o = (i * ch + c) * phw;
                    for j in o..o + phw {
                        sdy += g[j].f64();
                        sdyx += (g[j] * cache.xhat[j]).f64();
                    }
                }
                dgamma[c] = T::of(sdyx);
                dbeta[c] = T::of(sdy);
                let gamma = blk.gamma[c];
                let inv = cache.inv_std[c];
                if trace.train {
                    // dxhat = dy * gamma; sums scale by gamma as well
                    let k1 = T::of(gamma.f64() * sdy / count);
                    let k2 = T::of(gamma.f64() * sdyx / count);
                    for i in 0..n {
                        let o = (i * ch + c) * phw;
                        for j in o..o + phw {
                            dx[j] = inv * (gamma * g[j] - k1 - cache.xhat[j] * k2);
                        }
                    }
                } else {
                    for i in 0..n {
                        let o = (i * ch + c) * phw;
                        for j in o..o + phw {
                            dx[j] = g[j] * gamma * inv;
                        }
                    }
                }
            }
            if let Some(m) = &cache.drop_mask {
                dx.iter_mut().zip(m).for_each(|(v, k)| *v *= *k);
            }
            let mut dact = vec![T::zero(); cache.act.len()];
            for (p, &src) in cache.pool_idx.iter().enumerate() {
                dact[src as usize] += dx[p];
            }
            if bi + 1 == self.blocks.len() {
                feature_grad = dact.clone();
                if !want_params {
                    return Ok((None, feature_grad));
                }
            }
            dact.iter_mut().zip(&cache.act).for_each(|(v, a)| {
                if *a <= T::zero() {
                    *v = T::zero()
                }
            });

            let hw = s * s;
            let ck2 = blk.in_ch * blk.kernel * blk.kernel;
            let mut dw = vec![T::zero(); blk.out_ch * ck2];
            let mut db = vec![T::zero(); blk.out_ch];
            let mut dinput = if bi > 0 { vec![T::zero(); n * blk.in_ch * hw] } else { Vec::new() };
            let mut dcols = vec![T::zero(); if bi > 0 { ck2 * hw } else { 0 }];
            for i in 0..n {
                let dy = &dact[i * ch * hw..][..ch * hw];
                for (o, plane) in dy.chunks(hw).enumerate() {
                    db[o] += plane.iter().copied().sum::<T>();
                }
                let cols = &cache.cols[i * ck2 * hw..][..ck2 * hw];
                gemm(ch, hw, ck2, dy, false, cols, true, &mut dw, true);
                if bi > 0 {
                    gemm(ck2, ch, hw, &blk.weight, true, dy, false, &mut dcols, false);
                    col2im(&dcols, blk.in_ch, s, blk.kernel, &mut dinput[i * blk.in_ch * hw..][..blk.in_ch * hw]);
                }
            }
            block_grads.push([dw, db, dgamma, dbeta]);
            g = dinput;
        }
        block_grads.reverse();
        let mut tensors = Vec::new();
        for b in block_grads {
            tensors.extend(b);
        }
        for (w, b) in dense_grads {
            tensors.push(w);
            tensors.push(b);
        }
        Ok((Some(Grads { tensors }), feature_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{tiny_config, Hyperparams, ModelConfig};
    use super::*;
    use crate::rng;

    fn random_batch<T: Scalar>(n: usize, side: usize, seed: u64) -> Batch<T> {
        let mut r = rng::stream(seed, "batch");
        Batch {
            n,
            side,
            data: (0..n * side * side).map(|_| T::of(r.random::<f64>())).collect(),
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m: Model<f32> = Model::zeroed(tiny_config(4, 1)).unwrap();
        let t = m.forward_eval(&random_batch(3, 16, 1), false).unwrap();
        for p in t.probs {
            assert!((p - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_model_output_bias_gradient() {
        let mut m: Model<f64> = Model::zeroed(tiny_config(4, 1)).unwrap();
        let mut r = rng::stream(0, "d");
        let b = random_batch(1, 16, 2);
        let t = m.forward(&b, Mode::Train(&mut r)).unwrap();
        let (g, _) = m.backward(&t, &[2]).unwrap();
        let db = g.tensors.last().unwrap();
        assert_eq!(db.len(), 4);
        for (k, v) in db.iter().enumerate() {
            let expect = if k == 2 { 0.25 - 1.0 } else { 0.25 };
            assert!((v - expect).abs() < 1e-12, "{k}: {v}");
        }
    }

    #[test]
    fn eval_is_pure_and_rows_sum_to_one() {
        let m: Model<f32> = Model::new(tiny_config(5, 3)).unwrap();
        let b = random_batch(4, 16, 3);
        let a = m.forward_eval(&b, false).unwrap();
        let c = m.forward_eval(&b, true).unwrap();
        assert_eq!(a.probs, c.probs);
        for row in a.probabilities() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn wrong_side_is_shape_mismatch() {
        let m: Model<f32> = Model::new(tiny_config(3, 3)).unwrap();
        assert!(matches!(m.forward_eval(&random_batch(1, 8, 0), false), Err(Error::ShapeMismatch(_))));
        let t = InputTensor::filled(8, 0.0);
        assert!(Batch::<f32>::from_inputs(&[t], 16).is_err());
    }

    #[test]
    fn backward_without_trace_fails() {
        let m: Model<f32> = Model::new(tiny_config(3, 3)).unwrap();
        let t = m.forward_eval(&random_batch(1, 16, 0), false).unwrap();
        assert!(matches!(m.backward(&t, &[0]), Err(Error::MissingTrace)));
    }

    // Straight-loop reference for a one-block network: same-padded conv,
    // ReLU, 2x2 max pool, eval-mode normalization, then the dense head.
    #[test]
    fn one_block_matches_loop_reference() {
        let cfg = ModelConfig {
            hyper: Hyperparams {
                filters: vec![3],
                kernel_first_conv: 3,
                dense1: 5,
                dense2: 4,
                ..Hyperparams::default()
            },
            input_side: 8,
            classes: vec!["a".into(), "b".into()],
            seed: 4,
        };
        let mut m: Model<f64> = Model::new(cfg).unwrap();
        let mut r = rng::stream(1, "bn");
        for b in &mut m.blocks {
            for c in 0..b.out_ch {
                b.bias[c] = r.random_range(-0.2..0.2);
                b.gamma[c] = r.random_range(0.5..1.5);
                b.beta[c] = r.random_range(-0.3..0.3);
                b.running_mean[c] = r.random_range(0.0..0.3);
                b.running_var[c] = r.random_range(0.5..2.0);
            }
        }
        let batch = random_batch::<f64>(1, 8, 7);
        let got = m.forward_eval(&batch, false).unwrap().logits;

        let x = &batch.data;
        let blk = &m.blocks[0];
        let mut pooled = vec![0.0; 3 * 16];
        for o in 0..3 {
            let mut conv = [[0.0f64; 8]; 8];
            for (y, row) in conv.iter_mut().enumerate() {
                for (xx, cell) in row.iter_mut().enumerate() {
                    let mut s = blk.bias[o];
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (sy, sx) = (y as i32 + ki as i32 - 1, xx as i32 + kj as i32 - 1);
                            if (0..8).contains(&sy) && (0..8).contains(&sx) {
                                s += blk.weight[o * 9 + ki * 3 + kj] * x[sy as usize * 8 + sx as usize];
                            }
                        }
                    }
                    *cell = s.max(0.0);
                }
            }
            for py in 0..4 {
                for px in 0..4 {
                    let v = conv[2 * py][2 * px]
                        .max(conv[2 * py][2 * px + 1])
                        .max(conv[2 * py + 1][2 * px])
                        .max(conv[2 * py + 1][2 * px + 1]);
                    let norm = (v - blk.running_mean[o]) / (blk.running_var[o] + BN_EPS).sqrt();
                    pooled[o * 16 + py * 4 + px] = blk.gamma[o] * norm + blk.beta[o];
                }
            }
        }
        let mut h = pooled;
        for (j, d) in m.dense.iter().enumerate() {
            let mut y: Vec<f64> = (0..d.outputs)
                .map(|o| d.bias[o] + (0..d.inputs).map(|i| d.weight[o * d.inputs + i] * h[i]).sum::<f64>())
                .collect();
            if j + 1 < m.dense.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = y;
        }
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn dropout_keep_rate_matches() {
        let mut r = rng::stream(5, "drop");
        let m: Vec<f64> = dropout_mask(10_000, 0.3, &mut r);
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.7).abs() <= 0.01, "{kept}");
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    }

    #[test]
    fn train_mode_normalizes_batches() {
        let mut cfg = tiny_config(3, 2);
        cfg.hyper.dropout_conv = 0.0;
        let mut m: Model<f64> = Model::new(cfg).unwrap();
        let mut r = rng::stream(0, "d");
        // large-variance inputs so the epsilon term is negligible
        let mut b = random_batch::<f64>(6, 16, 9);
        b.data.iter_mut().for_each(|v| *v *= 100.0);
        let t = m.forward(&b, Mode::Train(&mut r)).unwrap();
        for (bi, cache) in t.blocks.iter().enumerate() {
            let ch = m.blocks[bi].out_ch;
            let phw = (cache.side / 2).pow(2);
            for c in 0..ch {
                let vals: Vec<f64> = (0..6)
                    .flat_map(|i| cache.xhat[(i * ch + c) * phw..][..phw].to_vec())
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-4);
                // exactly unit unless the channel is constant (dead ReLU)
                assert!((var - 1.0).abs() < 1e-4 || var < 1e-6, "{var}");
            }
        }
    }

    #[test]
    fn feature_grad_matches_head_finite_difference() {
        let m: Model<f64> = Model::new(tiny_config(3, 8)).unwrap();
        let b = random_batch::<f64>(1, 16, 4);
        let t = m.forward_eval(&b, true).unwrap();
        let fg = m.class_score_feature_grad(&t, 1).unwrap();
        let a: Vec<f64> = fg.activations.clone();
        let eps = 1e-6;
        // pooling ties among zero activations make one-sided derivatives differ
        for k in (0..a.len()).filter(|&k| a[k] > 1e-3) {
            let mut p = a.clone();
            p[k] += eps;
            let mut q = a.clone();
            q[k] -= eps;
            let fd = (m.logits_from_feature_map(&p)[1] - m.logits_from_feature_map(&q)[1]) / (2.0 * eps);
            assert!((fd - fg.gradient[k]).abs() < 1e-6, "{k}: {fd} vs {}", fg.gradient[k]);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = tiny_config(3, 21);
        let base: Model<f64> = Model::new(cfg).unwrap();
        let batch = random_batch::<f64>(2, 16, 5);
        let labels = [0, 2];
        let loss = |m: &Model<f64>| {
            let mut m = m.clone();
            let mut r = rng::stream(77, "fd");
            m.forward(&batch, Mode::Train(&mut r)).unwrap().loss(&labels)
        };
        let mut m = base.clone();
        let mut r = rng::stream(77, "fd");
        let t = m.forward(&batch, Mode::Train(&mut r)).unwrap();
        let (g, _) = base.backward(&t, &labels).unwrap();
        // a 1e-3 step crosses max-pool and ReLU switch points on this net
        let eps = 1e-6;
        let mut worst = (0.0f64, String::new());
        let names = base.param_names();
        for (ti, grad) in g.tensors.iter().enumerate() {
            for k in 0..grad.len() {
                let mut p = base.clone();
                p.params_mut()[ti][k] += eps;
                let mut q = base.clone();
                q.params_mut()[ti][k] -= eps;
                let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
                let rel = (grad[k] - fd).abs() / (grad[k].abs() + 1e-8);
                if rel > worst.0 {
                    worst = (rel, format!("{}[{k}] analytic {} fd {fd}", names[ti], grad[k]));
                }
            }
        }
        assert!(worst.0 <= 1e-3, "{worst:?}");
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let (ch, s, k) = (2, 5, 3);
        let mut r = rng::stream(1, "adj");
        let x: Vec<f64> = (0..ch * s * s).map(|_| r.random()).collect();
        let c: Vec<f64> = (0..ch * k * k * s * s).map(|_| r.random()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, ch, s, k, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, ch, s, k, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
