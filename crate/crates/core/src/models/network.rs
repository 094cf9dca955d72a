//! Fully connected ReLU body with optional skip connections, shared by the
//! softmax classifier and the Dirichlet head.
//!
//! Parameters live in one flat vector so optimizers and finite-difference
//! checks can treat the network as a plain point in R^n. Hidden layer `i`
//! (1-based) computes
//!
//! ```text
//! a_i = W_i h_{i-1} + b_i [+ S_i h_{i-2}]
//! h_i = dropout(relu(a_i))
//! ```
//!
//! where the skip term exists on every second layer (i = 2, 4, ...) when
//! skips are enabled. `S_i` is the identity when widths agree and a learned
//! projection otherwise. The output layer is affine with two logits.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum SkipKind {
    Identity,
    Projection { offset: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HiddenLayer {
    fan_in: usize,
    width: usize,
    weight: usize,
    bias: usize,
    skip: Option<SkipKind>,
}

/// Parameter layout derived from the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    input_dim: usize,
    hidden: Vec<HiddenLayer>,
    out_weight: usize,
    out_bias: usize,
    len: usize,
}

impl Layout {
    pub fn new(input_dim: usize, hidden_sizes: &[usize], skips: bool) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if hidden_sizes.is_empty() {
            return Err(Error::invalid("at least one hidden layer is required"));
        }
        if hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_sizes);
        let mut offset = 0;
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        for i in 1..dims.len() {
            let (fan_in, width) = (dims[i - 1], dims[i]);
            let weight = offset;
            offset += fan_in * width;
            let bias = offset;
            offset += width;
            let skip = if skips && i % 2 == 0 {
                if dims[i - 2] == width {
                    Some(SkipKind::Identity)
                } else {
                    let o = offset;
                    offset += width * dims[i - 2];
                    Some(SkipKind::Projection { offset: o })
                }
            } else {
                None
            };
            hidden.push(HiddenLayer {
                fan_in,
                width,
                weight,
                bias,
                skip,
            });
        }
        let last = *hidden_sizes.last().unwrap();
        let out_weight = offset;
        offset += 2 * last;
        let out_bias = offset;
        offset += 2;
        Ok(Layout {
            input_dim,
            hidden,
            out_weight,
            out_bias,
            len: offset,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.len
    }

    fn dim_of(&self, level: usize) -> usize {
        if level == 0 {
            self.input_dim
        } else {
            self.hidden[level - 1].width
        }
    }

    /// He-normal weights, zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.len];
        let mut fill = |params: &mut [f64], start: usize, count: usize, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in &mut params[start..start + count] {
                *v = normal.sample(rng);
            }
        };
        for (i, layer) in self.hidden.iter().enumerate() {
            fill(&mut params, layer.weight, layer.fan_in * layer.width, layer.fan_in);
            if let Some(SkipKind::Projection { offset }) = layer.skip {
                let src = self.dim_of(i - 1);
                // Small projections so the skip path starts as a mild residual.
                fill(&mut params, offset, layer.width * src, src * 4);
            }
        }
        let last = self.hidden.last().unwrap().width;
        fill(&mut params, self.out_weight, 2 * last, last);
        params
    }
}

/// Activations recorded during a forward pass, needed by backprop.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// h_0 = input, h_1..h_L hidden outputs (after dropout).
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    /// Dropout scale per unit (0 or 1/(1-p)); empty in evaluation mode.
    masks: Vec<Vec<f64>>,
    pub logits: [f64; 2],
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y += a·x
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Forward pass. `dropout` carries (rate, rng) during training.
pub(crate) fn forward<R: Rng>(layout: &Layout, params: &[f64], x: &[f64], mut dropout: Option<(f64, &mut R)>) -> Trace {
    let depth = layout.hidden.len();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut pre = Vec::with_capacity(depth);
    let mut masks = Vec::new();
    activations.push(x.to_vec());
    for (i, layer) in layout.hidden.iter().enumerate() {
        let mut a = params[layer.bias..layer.bias + layer.width].to_vec();
        matvec_add(
            &params[layer.weight..],
            layer.width,
            layer.fan_in,
            &activations[i],
            &mut a,
        );
        match layer.skip {
            Some(SkipKind::Identity) => {
                for (v, s) in a.iter_mut().zip(&activations[i - 1]) {
                    *v += s;
                }
            }
            Some(SkipKind::Projection { offset }) => {
                let src = &activations[i - 1];
                matvec_add(&params[offset..], layer.width, src.len(), src, &mut a);
            }
            None => {}
        }
        let mut h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        if let Some((rate, rng)) = dropout.as_mut() {
            let rate = *rate;
            if rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..layer.width)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                for (v, m) in h.iter_mut().zip(&mask) {
                    *v *= m;
                }
                masks.push(mask);
            }
        }
        pre.push(a);
        activations.push(h);
    }
    let last = &activations[depth];
    let mut logits = [params[layout.out_bias], params[layout.out_bias + 1]];
    let w = &params[layout.out_weight..];
    let width = last.len();
    for (k, z) in logits.iter_mut().enumerate() {
        *z += dot(&w[k * width..(k + 1) * width], last);
    }
    Trace {
        activations,
        pre,
        masks,
        logits,
    }
}

/// Backpropagates `dz` (gradient w.r.t. logits). Accumulates parameter
/// gradients into `grad` when given and returns the gradient w.r.t. input.
pub(crate) fn backward(
    layout: &Layout,
    params: &[f64],
    trace: &Trace,
    dz: [f64; 2],
    mut grad: Option<&mut [f64]>,
) -> Vec<f64> {
    let depth = layout.hidden.len();
    let mut dh: Vec<Vec<f64>> = trace.activations.iter().map(|h| vec![0.0; h.len()]).collect();

    let last = &trace.activations[depth];
    let width = last.len();
    if let Some(g) = grad.as_deref_mut() {
        for k in 0..2 {
            for j in 0..width {
                g[layout.out_weight + k * width + j] += dz[k] * last[j];
            }
            g[layout.out_bias + k] += dz[k];
        }
    }
    for j in 0..width {
        dh[depth][j] = dz[0] * params[layout.out_weight + j] + dz[1] * params[layout.out_weight + width + j];
    }

    for i in (0..depth).rev() {
        let layer = &layout.hidden[i];
        let level = i + 1;
        let mut da = std::mem::take(&mut dh[level]);
        let has_mask = !trace.masks.is_empty();
        for (j, v) in da.iter_mut().enumerate() {
            if has_mask {
                *v *= trace.masks[i][j];
            }
            if trace.pre[i][j] <= 0.0 {
                *v = 0.0;
            }
        }
        let (lower, upper) = dh.split_at_mut(i);
        let dh_in = &mut upper[0];
        let input = &trace.activations[i];
        let fan_in = layer.fan_in;
        let w = &params[layer.weight..layer.weight + layer.width * fan_in];
        if let Some(g) = grad.as_deref_mut() {
            let gw = &mut g[layer.weight..layer.weight + layer.width * fan_in];
            for ((&d, grow), wrow) in da.iter().zip(gw.chunks_exact_mut(fan_in)).zip(w.chunks_exact(fan_in)) {
                if d == 0.0 {
                    continue;
                }
                axpy(d, input, grow);
                axpy(d, wrow, dh_in);
            }
            for (gb, &d) in g[layer.bias..layer.bias + layer.width].iter_mut().zip(&da) {
                *gb += d;
            }
        } else {
            for (&d, wrow) in da.iter().zip(w.chunks_exact(fan_in)) {
                if d != 0.0 {
                    axpy(d, wrow, dh_in);
                }
            }
        }
        match layer.skip {
            Some(SkipKind::Identity) => {
                for (d, v) in lower[i - 1].iter_mut().zip(&da) {
                    *d += v;
                }
            }
            Some(SkipKind::Projection { offset }) => {
                let src = &trace.activations[i - 1];
                let cols = src.len();
                let p = &params[offset..offset + layer.width * cols];
                let dh_src = &mut lower[i - 1];
                match grad.as_deref_mut() {
                    Some(g) => {
                        let gp = &mut g[offset..offset + layer.width * cols];
                        for ((&d, grow), prow) in da.iter().zip(gp.chunks_exact_mut(cols)).zip(p.chunks_exact(cols)) {
                            if d == 0.0 {
                                continue;
                            }
                            axpy(d, src, grow);
                            axpy(d, prow, dh_src);
                        }
                    }
                    None => {
                        for (&d, prow) in da.iter().zip(p.chunks_exact(cols)) {
                            if d != 0.0 {
                                axpy(d, prow, dh_src);
                            }
                        }
                    }
                }
            }
            None => {}
        }
    }
    std::mem::take(&mut dh[0])
}

/// Forward activations for a minibatch, stored feature-major: unit `u` of
/// sample `j` lives at `u * batch + j`, so per-unit loops run over
/// contiguous samples and vectorize.
struct BatchTrace {
    batch: usize,
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
    logits: Vec<[f64; 2]>,
}

fn forward_batch<R: Rng>(
    layout: &Layout,
    params: &[f64],
    rows: &[&[f64]],
    dropout_rate: f64,
    rng: &mut R,
) -> BatchTrace {
    let b = rows.len();
    let depth = layout.hidden.len();
    let mut x0 = vec![0.0; layout.input_dim * b];
    for (j, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            x0[c * b + j] = v;
        }
    }
    let mut activations = vec![x0];
    let mut pre = Vec::with_capacity(depth);
    let mut masks = Vec::new();
    for (i, layer) in layout.hidden.iter().enumerate() {
        let mut a = vec![0.0; layer.width * b];
        let input = &activations[i];
        for (r, out) in a.chunks_exact_mut(b).enumerate() {
            out.fill(params[layer.bias + r]);
            let wrow = &params[layer.weight + r * layer.fan_in..][..layer.fan_in];
            for (&w, col) in wrow.iter().zip(input.chunks_exact(b)) {
                axpy(w, col, out);
            }
            match layer.skip {
                Some(SkipKind::Identity) => axpy(1.0, &activations[i - 1][r * b..(r + 1) * b], out),
                Some(SkipKind::Projection { offset }) => {
                    let src = &activations[i - 1];
                    let cols = src.len() / b;
                    let prow = &params[offset + r * cols..][..cols];
                    for (&w, col) in prow.iter().zip(src.chunks_exact(b)) {
                        axpy(w, col, out);
                    }
                }
                None => {}
            }
        }
        let mut h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        if dropout_rate > 0.0 {
            let keep = 1.0 / (1.0 - dropout_rate);
            // Integer comparison against rate·2³² avoids a float draw per unit.
            let cut = (dropout_rate * 4_294_967_296.0) as u64;
            let mask: Vec<f64> = (0..h.len())
                .map(|_| if u64::from(rng.next_u32()) < cut { 0.0 } else { keep })
                .collect();
            for (v, m) in h.iter_mut().zip(&mask) {
                *v *= m;
            }
            masks.push(mask);
        }
        pre.push(a);
        activations.push(h);
    }
    let last = &activations[depth];
    let width = last.len() / b;
    let mut z = [vec![params[layout.out_bias]; b], vec![params[layout.out_bias + 1]; b]];
    for (k, zk) in z.iter_mut().enumerate() {
        let w = &params[layout.out_weight + k * width..][..width];
        for (&wv, col) in w.iter().zip(last.chunks_exact(b)) {
            axpy(wv, col, zk);
        }
    }
    BatchTrace {
        batch: b,
        activations,
        pre,
        masks,
        logits: (0..b).map(|j| [z[0][j], z[1][j]]).collect(),
    }
}

/// Accumulates the parameter gradient of Σ_j dz_j · logits_j into `grad`.
fn backward_batch(layout: &Layout, params: &[f64], trace: &BatchTrace, dz: &[[f64; 2]], grad: &mut [f64]) {
    let b = trace.batch;
    let depth = layout.hidden.len();
    let dzk: [Vec<f64>; 2] = [dz.iter().map(|d| d[0]).collect(), dz.iter().map(|d| d[1]).collect()];
    let last = &trace.activations[depth];
    let width = last.len() / b;
    let mut dh: Vec<Vec<f64>> = trace.activations.iter().map(|h| vec![0.0; h.len()]).collect();
    for k in 0..2 {
        let w = &params[layout.out_weight + k * width..][..width];
        let g = &mut grad[layout.out_weight + k * width..][..width];
        for ((gv, &wv), (col, dcol)) in g
            .iter_mut()
            .zip(w)
            .zip(last.chunks_exact(b).zip(dh[depth].chunks_exact_mut(b)))
        {
            *gv += dot(&dzk[k], col);
            axpy(wv, &dzk[k], dcol);
        }
        grad[layout.out_bias + k] += dzk[k].iter().sum::<f64>();
    }
    for i in (0..depth).rev() {
        let layer = &layout.hidden[i];
        let mut da = std::mem::take(&mut dh[i + 1]);
        if let Some(mask) = trace.masks.get(i) {
            for (v, m) in da.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        for (v, &p) in da.iter_mut().zip(&trace.pre[i]) {
            if p <= 0.0 {
                *v = 0.0;
            }
        }
        let (lower, upper) = dh.split_at_mut(i);
        let dh_in = &mut upper[0];
        let input = &trace.activations[i];
        // The input layer needs no gradient.
        let need_in = i > 0;
        for (r, da_r) in da.chunks_exact(b).enumerate() {
            grad[layer.bias + r] += da_r.iter().sum::<f64>();
            let wrow = &params[layer.weight + r * layer.fan_in..][..layer.fan_in];
            let grow = &mut grad[layer.weight + r * layer.fan_in..][..layer.fan_in];
            for (c, (gv, &wv)) in grow.iter_mut().zip(wrow).enumerate() {
                *gv += dot(da_r, &input[c * b..(c + 1) * b]);
                if need_in {
                    axpy(wv, da_r, &mut dh_in[c * b..(c + 1) * b]);
                }
            }
            match layer.skip {
                Some(SkipKind::Identity) => axpy(1.0, da_r, &mut lower[i - 1][r * b..(r + 1) * b]),
                Some(SkipKind::Projection { offset }) => {
                    let src = &trace.activations[i - 1];
                    let cols = src.len() / b;
                    let prow = &params[offset + r * cols..][..cols];
                    let gp = &mut grad[offset + r * cols..][..cols];
                    for (c, (gv, &pv)) in gp.iter_mut().zip(prow).enumerate() {
                        *gv += dot(da_r, &src[c * b..(c + 1) * b]);
                        if i > 1 {
                            axpy(pv, da_r, &mut lower[i - 1][c * b..(c + 1) * b]);
                        }
                    }
                }
                None => {}
            }
        }
    }
}

/// Optimization settings shared by every network trainer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub batch_size: Option<usize>,
}

/// Minimizes Σ_i weight_i · loss(i, logits_i) with Adam.
///
/// `loss` returns the per-sample loss and its gradient w.r.t. the logits.
/// Full-batch unless a batch size is set, in which case rows are reshuffled
/// each epoch from `rng` and batch gradients are rescaled to stay unbiased.
/// Returns the objective observed during each epoch.
pub(crate) fn train<R, F>(
    layout: &Layout,
    params: &mut [f64],
    rows: &[&[f64]],
    weights: &[f64],
    settings: TrainSettings,
    rng: &mut R,
    loss: F,
) -> Vec<f64>
where
    R: Rng,
    F: Fn(usize, [f64; 2]) -> (f64, [f64; 2]),
{
    let n = rows.len();
    let mut adam = Adam::new(settings.learning_rate, params.len());
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..n).collect();
    let batch = settings.batch_size.unwrap_or(n).clamp(1, n.max(1));
    let mut history = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        if batch < n {
            order.shuffle(rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = n as f64 / chunk.len() as f64;
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| rows[i]).collect();
            let trace = forward_batch(layout, params, &xs, settings.dropout_rate, rng);
            let dz: Vec<[f64; 2]> = chunk
                .iter()
                .zip(&trace.logits)
                .map(|(&i, &z)| {
                    let (l, d) = loss(i, z);
                    let w = weights[i];
                    epoch_loss += w * l;
                    [w * scale * d[0], w * scale * d[1]]
                })
                .collect();
            backward_batch(layout, params, &trace, &dz, &mut grad);
            adam.step(params, &grad);
        }
        history.push(epoch_loss);
    }
    history
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_counts_projection_and_identity_skips() {
        // 3 -> 4 -> 4 -> 5: layer 2 skips from input (3 != 4, projection).
        let l = Layout::new(3, &[4, 4, 5], true).unwrap();
        let plain = 3 * 4 + 4 + 4 * 4 + 4 + 4 * 5 + 5 + 2 * 5 + 2;
        assert_eq!(l.param_count(), plain + 4 * 3);
        // 4 -> 4 -> 4: identity skip adds nothing.
        let l = Layout::new(4, &[4, 4], true).unwrap();
        assert_eq!(l.param_count(), 4 * 4 + 4 + 4 * 4 + 4 + 2 * 4 + 2);
    }

    #[test]
    fn rejects_empty_architecture() {
        assert!(Layout::new(3, &[], false).is_err());
        assert!(Layout::new(0, &[2], false).is_err());
        assert!(Layout::new(3, &[2, 0], false).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let layout = Layout::new(3, &[5, 5, 4], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = layout.init_params(&mut rng);
        let x = [0.3, -0.7, 1.1];
        let trace = forward::<ChaCha8Rng>(&layout, &params, &x, None);
        let g = backward(&layout, &params, &trace, [1.0, -1.0], None);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let zp = forward::<ChaCha8Rng>(&layout, &params, &xp, None).logits;
            let zm = forward::<ChaCha8Rng>(&layout, &params, &xm, None).logits;
            let fd = ((zp[0] - zp[1]) - (zm[0] - zm[1])) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn batched_pass_matches_per_sample_pass() {
        // Widths cover identity skips, projection skips and an input-sized
        // first layer.
        for hidden in [vec![5, 5, 4], vec![3, 6, 6, 2]] {
            let layout = Layout::new(3, &hidden, true).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let params = layout.init_params(&mut rng);
            let xs: Vec<Vec<f64>> = (0..7)
                .map(|i| (0..3).map(|c| ((i * 3 + c) as f64 * 0.37).sin()).collect())
                .collect();
            let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let dz: Vec<[f64; 2]> = (0..7).map(|i| [0.1 * i as f64, -0.3 + 0.05 * i as f64]).collect();

            let batch = forward_batch(&layout, &params, &rows, 0.0, &mut rng);
            let mut g_batch = vec![0.0; params.len()];
            backward_batch(&layout, &params, &batch, &dz, &mut g_batch);

            let mut g_single = vec![0.0; params.len()];
            for (j, x) in rows.iter().enumerate() {
                let t = forward::<ChaCha8Rng>(&layout, &params, x, None);
                for k in 0..2 {
                    assert!((t.logits[k] - batch.logits[j][k]).abs() < 1e-12);
                }
                backward(&layout, &params, &t, dz[j], Some(&mut g_single));
            }
            for (a, b) in g_batch.iter().zip(&g_single) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
