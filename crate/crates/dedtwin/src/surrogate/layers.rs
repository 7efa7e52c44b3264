//! Network primitives with explicit forward caches and hand-written
//! backward passes. Everything is plain `Vec<f64>` with row-major weight
//! matrices; sizes here are small enough that clarity beats vectorization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// out = W·x (rows×cols, row-major).
pub(crate) fn matvec(w: &[f64], x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            s += wi * xi;
        }
        out[r] = s;
    }
}

/// dx += Wᵀ·dy.
pub(crate) fn matvec_t_add(w: &[f64], dy: &[f64], dx: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = dy[r];
        for (dxi, wi) in dx.iter_mut().zip(row) {
            *dxi += g * wi;
        }
    }
}

/// grad += dy ⊗ x.
pub(crate) fn outer_add(grad: &mut [f64], dy: &[f64], x: &[f64], rows: usize, cols: usize) {
    debug_assert_eq!(grad.len(), rows * cols);
    for r in 0..rows {
        let row = &mut grad[r * cols..(r + 1) * cols];
        let g = dy[r];
        for (gi, xi) in row.iter_mut().zip(x) {
            *gi += g * xi;
        }
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Affine layer y = W·x + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Dense {
        Dense {
            n_in,
            n_out,
            w: uniform_init(rng, n_out * n_in, n_in),
            b: vec![0.0; n_out],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out];
        matvec(&self.w, x, &mut out, self.n_out, self.n_in);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += b;
        }
        out
    }

    /// Accumulates weight grads and, when `dx` is given, the input grad.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut DenseGrad, dx: Option<&mut [f64]>) {
        outer_add(&mut grad.w, dy, x, self.n_out, self.n_in);
        for (g, d) in grad.b.iter_mut().zip(dy) {
            *g += d;
        }
        if let Some(dx) = dx {
            matvec_t_add(&self.w, dy, dx, self.n_out, self.n_in);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseGrad {
    pub fn zeros_like(d: &Dense) -> DenseGrad {
        DenseGrad {
            w: vec![0.0; d.w.len()],
            b: vec![0.0; d.b.len()],
        }
    }
}

/// Single LSTM layer. Gate rows are packed `[input, forget, cell, output]`,
/// each block `hidden` wide. The forget-gate bias starts at +1 so fresh
/// models remember by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub n_in: usize,
    pub hidden: usize,
    /// 4H × n_in.
    pub wx: Vec<f64>,
    /// 4H × H.
    pub wh: Vec<f64>,
    /// 4H.
    pub b: Vec<f64>,
}

/// Per-step forward cache; owned values so BPTT can walk backwards freely.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Post-activation gates, packed like the weights.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmLayer {
    pub fn new(n_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> LstmLayer {
        let mut b = vec![0.0; 4 * hidden];
        for v in &mut b[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmLayer {
            n_in,
            hidden,
            wx: uniform_init(rng, 4 * hidden * n_in, n_in),
            wh: uniform_init(rng, 4 * hidden * hidden, hidden),
            b,
        }
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStepCache {
        let hn = self.hidden;
        let mut pre = vec![0.0; 4 * hn];
        matvec(&self.wx, x, &mut pre, 4 * hn, self.n_in);
        let mut from_h = vec![0.0; 4 * hn];
        matvec(&self.wh, h_prev, &mut from_h, 4 * hn, hn);
        for ((p, fh), b) in pre.iter_mut().zip(&from_h).zip(&self.b) {
            *p += fh + b;
        }
        let mut gates = vec![0.0; 4 * hn];
        for k in 0..hn {
            gates[k] = sigmoid(pre[k]); // input
            gates[hn + k] = sigmoid(pre[hn + k]); // forget
            gates[2 * hn + k] = pre[2 * hn + k].tanh(); // cell candidate
            gates[3 * hn + k] = sigmoid(pre[3 * hn + k]); // output
        }
        let mut c = vec![0.0; hn];
        let mut tanh_c = vec![0.0; hn];
        let mut h = vec![0.0; hn];
        for k in 0..hn {
            c[k] = gates[hn + k] * c_prev[k] + gates[k] * gates[2 * hn + k];
            tanh_c[k] = c[k].tanh();
            h[k] = gates[3 * hn + k] * tanh_c[k];
        }
        LstmStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
            h,
            c,
        }
    }

    /// One step of backpropagation through time. `dh` is the total gradient
    /// reaching `h_t`, `dc_in` the carry from step t+1. Returns
    /// `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache,
        dh: &[f64],
        dc_in: &[f64],
        grad: &mut LstmGrad,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hn = self.hidden;
        let g = &cache.gates;
        let mut d_pre = vec![0.0; 4 * hn];
        for k in 0..hn {
            let i = g[k];
            let f = g[hn + k];
            let cand = g[2 * hn + k];
            let o = g[3 * hn + k];
            let tc = cache.tanh_c[k];
            let d_o = dh[k] * tc;
            let d_c = dc_in[k] + dh[k] * o * (1.0 - tc * tc);
            let d_i = d_c * cand;
            let d_cand = d_c * i;
            let d_f = d_c * cache.c_prev[k];
            d_pre[k] = d_i * i * (1.0 - i);
            d_pre[hn + k] = d_f * f * (1.0 - f);
            d_pre[2 * hn + k] = d_cand * (1.0 - cand * cand);
            d_pre[3 * hn + k] = d_o * o * (1.0 - o);
        }
        // dc_prev rides on d_c = f ⊙ (carry); recompute to avoid a buffer.
        let mut dc_prev = vec![0.0; hn];
        for k in 0..hn {
            let o = g[3 * hn + k];
            let tc = cache.tanh_c[k];
            let d_c = dc_in[k] + dh[k] * o * (1.0 - tc * tc);
            dc_prev[k] = d_c * g[hn + k];
        }
        outer_add(&mut grad.wx, &d_pre, &cache.x, 4 * hn, self.n_in);
        outer_add(&mut grad.wh, &d_pre, &cache.h_prev, 4 * hn, hn);
        for (gb, d) in grad.b.iter_mut().zip(&d_pre) {
            *gb += d;
        }
        let mut dx = vec![0.0; self.n_in];
        matvec_t_add(&self.wx, &d_pre, &mut dx, 4 * hn, self.n_in);
        let mut dh_prev = vec![0.0; hn];
        matvec_t_add(&self.wh, &d_pre, &mut dh_prev, 4 * hn, hn);
        (dx, dh_prev, dc_prev)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmGrad {
    pub wx: Vec<f64>,
    pub wh: Vec<f64>,
    pub b: Vec<f64>,
}

impl LstmGrad {
    pub fn zeros_like(l: &LstmLayer) -> LstmGrad {
        LstmGrad {
            wx: vec![0.0; l.wx.len()],
            wh: vec![0.0; l.wh.len()],
            b: vec![0.0; l.b.len()],
        }
    }
}

/// Scaled dot-product attention pooling with a single learned query.
/// Keys and values are linear projections of the hidden sequence; the
/// softmax-weighted value sum condenses the sequence to one vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub dim: usize,
    pub query: Vec<f64>,
    pub wk: Dense,
    pub wv: Dense,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

impl Attention {
    pub fn new(hidden: usize, dim: usize, rng: &mut ChaCha8Rng) -> Attention {
        Attention {
            dim,
            query: uniform_init(rng, dim, dim),
            wk: Dense::new(hidden, dim, rng),
            wv: Dense::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, hs: &[Vec<f64>]) -> AttnCache {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let keys: Vec<Vec<f64>> = hs.iter().map(|h| self.wk.forward(h)).collect();
        let values: Vec<Vec<f64>> = hs.iter().map(|h| self.wv.forward(h)).collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| k.iter().zip(&self.query).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, s| m.max(*s));
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut context = vec![0.0; self.dim];
        for (w, v) in weights.iter().zip(&values) {
            for (c, vi) in context.iter_mut().zip(v) {
                *c += w * vi;
            }
        }
        AttnCache {
            keys,
            values,
            weights,
            context,
        }
    }

    /// Returns the gradient w.r.t. each input hidden vector.
    pub fn backward(
        &self,
        hs: &[Vec<f64>],
        cache: &AttnCache,
        dcontext: &[f64],
        grad: &mut AttnGrad,
    ) -> Vec<Vec<f64>> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let steps = hs.len();
        // Value path plus softmax / key / query paths.
        let dweights: Vec<f64> = cache
            .values
            .iter()
            .map(|v| v.iter().zip(dcontext).map(|(a, b)| a * b).sum())
            .collect();
        let dot: f64 = cache
            .weights
            .iter()
            .zip(&dweights)
            .map(|(w, dw)| w * dw)
            .sum();
        let dscores: Vec<f64> = cache
            .weights
            .iter()
            .zip(&dweights)
            .map(|(w, dw)| w * (dw - dot))
            .collect();

        let mut dhs = vec![vec![0.0; hs[0].len()]; steps];
        for t in 0..steps {
            // dv_t = w_t · dcontext
            let dv: Vec<f64> = dcontext.iter().map(|d| cache.weights[t] * d).collect();
            self.wv
                .backward(&hs[t], &dv, &mut grad.wv, Some(&mut dhs[t]));
            // dk_t = ds_t · q · scale ; dq += ds_t · k_t · scale
            let ds = dscores[t] * scale;
            let dk: Vec<f64> = self.query.iter().map(|q| ds * q).collect();
            for (gq, k) in grad.query.iter_mut().zip(&cache.keys[t]) {
                *gq += ds * k;
            }
            self.wk
                .backward(&hs[t], &dk, &mut grad.wk, Some(&mut dhs[t]));
        }
        dhs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnGrad {
    pub query: Vec<f64>,
    pub wk: DenseGrad,
    pub wv: DenseGrad,
}

impl AttnGrad {
    pub fn zeros_like(a: &Attention) -> AttnGrad {
        AttnGrad {
            query: vec![0.0; a.query.len()],
            wk: DenseGrad::zeros_like(&a.wk),
            wv: DenseGrad::zeros_like(&a.wv),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weight_cell_halves_the_carry() {
        // All-zero weights and biases: every sigmoid gate sits at 1/2 and the
        // candidate at 0, so c = c_prev/2 and h = tanh(c)/2.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cell = LstmLayer::new(2, 3, &mut rng);
        cell.wx.iter_mut().for_each(|w| *w = 0.0);
        cell.wh.iter_mut().for_each(|w| *w = 0.0);
        cell.b.iter_mut().for_each(|w| *w = 0.0);
        let cache = cell.step(&[0.3, -0.8], &[0.0; 3], &[1.0, 1.0, 1.0]);
        for k in 0..3 {
            assert!((cache.c[k] - 0.5).abs() < 1e-15);
            assert!((cache.h[k] - 0.23105857863000487).abs() < 1e-12);
        }
    }

    #[test]
    fn forget_bias_starts_open() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmLayer::new(4, 5, &mut rng);
        assert!(cell.b[5..10].iter().all(|b| *b == 1.0));
        assert!(cell.b[0..5].iter().all(|b| *b == 0.0));
        let bound = 1.0 / 2.0; // 1/sqrt(fan_in = 4)
        assert!(cell.wx.iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = Attention::new(6, 4, &mut rng);
        let hs: Vec<Vec<f64>> = (0..9)
            .map(|t| (0..6).map(|k| ((t * 6 + k) as f64 * 0.37).sin()).collect())
            .collect();
        let cache = attn.forward(&hs);
        let sum: f64 = cache.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(cache.weights.iter().all(|w| *w >= 0.0));
        assert_eq!(cache.context.len(), 4);
    }

    #[test]
    fn attention_matches_straight_line_reference() {
        // Unstabilized softmax over raw dot products, computed longhand.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = Attention::new(3, 2, &mut rng);
        let hs = vec![
            vec![0.2, -0.1, 0.4],
            vec![-0.3, 0.5, 0.1],
            vec![0.0, 0.2, -0.2],
        ];
        let cache = attn.forward(&hs);
        let scale = 1.0 / (2.0f64).sqrt();
        let mut exps = Vec::new();
        for h in &hs {
            let k = attn.wk.forward(h);
            let s: f64 = k.iter().zip(&attn.query).map(|(a, b)| a * b).sum::<f64>() * scale;
            exps.push(s.exp());
        }
        let total: f64 = exps.iter().sum();
        let mut want = vec![0.0; 2];
        for (e, h) in exps.iter().zip(&hs) {
            let v = attn.wv.forward(h);
            for (wi, vi) in want.iter_mut().zip(&v) {
                *wi += e / total * vi;
            }
        }
        for (a, b) in cache.context.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dense_backward_accumulates_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Dense::new(2, 3, &mut rng);
        let mut grad = DenseGrad::zeros_like(&d);
        let x = [0.5, -1.0];
        let dy = [1.0, 2.0, -1.0];
        let mut dx = vec![0.0; 2];
        d.backward(&x, &dy, &mut grad, Some(&mut dx));
        assert_eq!(grad.w[0], 0.5); // dy[0]*x[0]
        assert_eq!(grad.w[1], -1.0); // dy[0]*x[1]
        assert_eq!(grad.b, vec![1.0, 2.0, -1.0]);
        let want_dx0 = d.w[0] * 1.0 + d.w[2] * 2.0 + d.w[4] * -1.0;
        assert!((dx[0] - want_dx0).abs() < 1e-15);
    }
}
