//! Layer primitives with explicit forward caches and backward passes.
//!
//! Every layer takes a frame-validity mask. Invalid frames are treated as
//! absent: convolutions read them as zeros, recurrences skip them and
//! attention never attends to them. Valid-frame outputs are therefore
//! bit-identical whether or not masked frames are present.

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Matrix};

/// Output width of a kernel-3, padding-1 convolution with the given stride.
pub fn conv_out_bins(bins_in: usize, stride: usize) -> usize {
    (bins_in - 1) / stride + 1
}

/// 3×3 convolution over a (time × frequency) map with `cin` channels,
/// stride 1 in time and `stride` in frequency, zero padding 1, ReLU output.
///
/// Activations are laid out `[frame][bin][channel]`. The weight matrix is
/// `(9·cin) × cout` with row index `(dt·3 + db)·cin + ci`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub frames: usize,
    pub bins_in: usize,
    pub bins_out: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    geo: ConvGeometry,
    cols: Matrix,
    /// post-ReLU output, `(frames·bins_out) × cout`
    out: Matrix,
}

impl ConvCache {
    pub fn output(&self) -> &Matrix {
        &self.out
    }
}

impl ConvBlock {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Matrix::zeros(9 * cin, cout),
            bias: Matrix::zeros(1, cout),
        }
    }

    fn im2col(x: &[f64], geo: &ConvGeometry, mask: &[bool]) -> Matrix {
        let k = 9 * geo.cin;
        let mut cols = Matrix::zeros(geo.frames * geo.bins_out, k);
        for t in 0..geo.frames {
            if !mask[t] {
                continue;
            }
            for bo in 0..geo.bins_out {
                let row = cols.row_mut(t * geo.bins_out + bo);
                for dt in 0..3 {
                    let ti = t + dt;
                    if ti == 0 || ti > geo.frames || !mask[ti - 1] {
                        continue;
                    }
                    let ti = ti - 1;
                    for db in 0..3 {
                        let bi = bo * geo.stride + db;
                        if bi == 0 || bi > geo.bins_in {
                            continue;
                        }
                        let bi = bi - 1;
                        let src = &x[(ti * geo.bins_in + bi) * geo.cin..][..geo.cin];
                        row[(dt * 3 + db) * geo.cin..][..geo.cin].copy_from_slice(src);
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &[f64], geo: ConvGeometry, mask: &[bool]) -> ConvCache {
        debug_assert_eq!(x.len(), geo.frames * geo.bins_in * geo.cin);
        let cols = Self::im2col(x, &geo, mask);
        let rows = geo.frames * geo.bins_out;
        let mut out = Matrix::zeros(rows, geo.cout);
        gemm_nn(rows, 9 * geo.cin, geo.cout, cols.data(), self.weight.data(), out.data_mut());
        let bias = self.bias.data();
        for t in 0..geo.frames {
            for bo in 0..geo.bins_out {
                let r = out.row_mut(t * geo.bins_out + bo);
                if mask[t] {
                    for (v, b) in r.iter_mut().zip(bias) {
                        *v = (*v + b).max(0.0);
                    }
                } else {
                    r.fill(0.0);
                }
            }
        }
        ConvCache { geo, cols, out }
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// w.r.t. the input when `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        d_out: &[f64],
        grad: &mut ConvBlock,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let geo = cache.geo;
        let rows = geo.frames * geo.bins_out;
        let k = 9 * geo.cin;
        let mut dz = Matrix::from_vec(rows, geo.cout, d_out.to_vec());
        for (d, &y) in dz.data_mut().iter_mut().zip(cache.out.data()) {
            if y <= 0.0 {
                *d = 0.0;
            }
        }
        gemm_tn(k, rows, geo.cout, cache.cols.data(), dz.data(), grad.weight.data_mut());
        let gb = grad.bias.data_mut();
        for r in 0..rows {
            for (g, d) in gb.iter_mut().zip(dz.row(r)) {
                *g += d;
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = Matrix::zeros(rows, k);
        gemm_nt(rows, geo.cout, k, dz.data(), self.weight.data(), dcols.data_mut());
        let mut dx = vec![0.0; geo.frames * geo.bins_in * geo.cin];
        for t in 0..geo.frames {
            for bo in 0..geo.bins_out {
                let row = dcols.row(t * geo.bins_out + bo);
                for dt in 0..3 {
                    let ti = t + dt;
                    if ti == 0 || ti > geo.frames {
                        continue;
                    }
                    let ti = ti - 1;
                    for db in 0..3 {
                        let bi = bo * geo.stride + db;
                        if bi == 0 || bi > geo.bins_in {
                            continue;
                        }
                        let bi = bi - 1;
                        let dst = &mut dx[(ti * geo.bins_in + bi) * geo.cin..][..geo.cin];
                        for (d, s) in dst.iter_mut().zip(&row[(dt * 3 + db) * geo.cin..][..geo.cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction of an LSTM. Gate order in the `4H` axis is
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    /// `D × 4H`
    pub w_ih: Matrix,
    /// `H × 4H`
    pub w_hh: Matrix,
    /// `1 × 4H`
    pub bias: Matrix,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    order: Vec<usize>,
    gates: Vec<Vec<f64>>,
    tanh_c: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
    c_prev: Vec<Vec<f64>>,
}

impl LstmDirection {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Matrix::zeros(input, 4 * hidden),
            w_hh: Matrix::zeros(hidden, 4 * hidden),
            bias: Matrix::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    /// Runs over `order` (valid frame indices, in processing order) and
    /// writes hidden states into columns `offset..offset+H` of `out`.
    pub fn forward(&self, x: &Matrix, order: &[usize], out: &mut Matrix, offset: usize) -> LstmCache {
        let h_dim = self.hidden();
        let g4 = 4 * h_dim;
        let frames = x.rows();
        let mut xp = Matrix::zeros(frames, g4);
        gemm_nn(frames, x.cols(), g4, x.data(), self.w_ih.data(), xp.data_mut());

        let mut cache = LstmCache {
            order: order.to_vec(),
            gates: Vec::with_capacity(order.len()),
            tanh_c: Vec::with_capacity(order.len()),
            h_prev: Vec::with_capacity(order.len()),
            c_prev: Vec::with_capacity(order.len()),
        };
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        for &t in order {
            let mut z: Vec<f64> = xp.row(t).iter().zip(self.bias.data()).map(|(a, b)| a + b).collect();
            for (p, &hp) in h.iter().enumerate() {
                for (zv, w) in z.iter_mut().zip(self.w_hh.row(p)) {
                    *zv += hp * w;
                }
            }
            let mut gates = vec![0.0; g4];
            for j in 0..h_dim {
                gates[j] = sigmoid(z[j]);
                gates[h_dim + j] = sigmoid(z[h_dim + j]);
                gates[2 * h_dim + j] = z[2 * h_dim + j].tanh();
                gates[3 * h_dim + j] = sigmoid(z[3 * h_dim + j]);
            }
            let mut c_new = vec![0.0; h_dim];
            let mut tc = vec![0.0; h_dim];
            let mut h_new = vec![0.0; h_dim];
            for j in 0..h_dim {
                c_new[j] = gates[h_dim + j] * c[j] + gates[j] * gates[2 * h_dim + j];
                tc[j] = c_new[j].tanh();
                h_new[j] = gates[3 * h_dim + j] * tc[j];
            }
            out.row_mut(t)[offset..offset + h_dim].copy_from_slice(&h_new);
            cache.gates.push(gates);
            cache.tanh_c.push(tc);
            cache.h_prev.push(std::mem::replace(&mut h, h_new));
            cache.c_prev.push(std::mem::replace(&mut c, c_new));
        }
        cache
    }

    /// Backpropagates through time; returns `∂L/∂x` and accumulates
    /// parameter gradients into `grad`.
    pub fn backward(
        &self,
        x: &Matrix,
        cache: &LstmCache,
        d_out: &Matrix,
        offset: usize,
        grad: &mut LstmDirection,
    ) -> Matrix {
        let h_dim = self.hidden();
        let g4 = 4 * h_dim;
        let frames = x.rows();
        let mut dxp = Matrix::zeros(frames, g4);
        let mut dh_next = vec![0.0; h_dim];
        let mut dc_next = vec![0.0; h_dim];
        let mut dz = vec![0.0; g4];
        for s in (0..cache.order.len()).rev() {
            let t = cache.order[s];
            let gates = &cache.gates[s];
            let tc = &cache.tanh_c[s];
            let c_prev = &cache.c_prev[s];
            let d_row = &d_out.row(t)[offset..offset + h_dim];
            for j in 0..h_dim {
                let (i, f, g, o) = (gates[j], gates[h_dim + j], gates[2 * h_dim + j], gates[3 * h_dim + j]);
                let dh = d_row[j] + dh_next[j];
                let d_o = dh * tc[j];
                let dc = dc_next[j] + dh * o * (1.0 - tc[j] * tc[j]);
                let d_i = dc * g;
                let d_g = dc * i;
                let d_f = dc * c_prev[j];
                dc_next[j] = dc * f;
                dz[j] = d_i * i * (1.0 - i);
                dz[h_dim + j] = d_f * f * (1.0 - f);
                dz[2 * h_dim + j] = d_g * (1.0 - g * g);
                dz[3 * h_dim + j] = d_o * o * (1.0 - o);
            }
            let h_prev = &cache.h_prev[s];
            for (p, &hp) in h_prev.iter().enumerate() {
                for (gw, d) in grad.w_hh.row_mut(p).iter_mut().zip(&dz) {
                    *gw += hp * d;
                }
                dh_next[p] = dot(self.w_hh.row(p), &dz);
            }
            dxp.row_mut(t).copy_from_slice(&dz);
        }
        gemm_tn(x.cols(), frames, g4, x.data(), dxp.data(), grad.w_ih.data_mut());
        let gb = grad.bias.data_mut();
        for t in 0..frames {
            for (g, d) in gb.iter_mut().zip(dxp.row(t)) {
                *g += d;
            }
        }
        let mut dx = Matrix::zeros(frames, x.cols());
        gemm_nt(frames, g4, x.cols(), dxp.data(), self.w_ih.data(), dx.data_mut());
        dx
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    query: Matrix,
    /// `F × F` attention weights; rows of invalid frames are zero.
    pub weights: Matrix,
}

/// Multiplicative attention: `S = H W Hᵀ / √d` with invalid columns
/// excluded, row softmax, context `C = softmax(S) H`. Rows of invalid
/// frames are zero.
pub fn attention_forward(h: &Matrix, w: &Matrix, mask: &[bool]) -> (Matrix, AttentionCache) {
    let (frames, d) = h.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let mut query = Matrix::zeros(frames, d);
    gemm_nn(frames, d, d, h.data(), w.data(), query.data_mut());
    let valid: Vec<usize> = (0..frames).filter(|&t| mask[t]).collect();
    let mut weights = Matrix::zeros(frames, frames);
    let mut context = Matrix::zeros(frames, d);
    for &i in &valid {
        let q = query.row(i);
        let logits: Vec<f64> = valid.iter().map(|&j| dot(q, h.row(j)) * scale).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let ctx = context.row_mut(i);
        for (&j, e) in valid.iter().zip(&exps) {
            let a = e / total;
            weights.set(i, j, a);
            for (c, hv) in ctx.iter_mut().zip(h.row(j)) {
                *c += a * hv;
            }
        }
    }
    (context, AttentionCache { query, weights })
}

/// Context vectors of multiplicative self-attention over valid frames.
pub fn multiplicative_attention(h: &Matrix, w: &Matrix, mask: &[bool]) -> Result<Matrix> {
    let (frames, d) = h.shape();
    if w.shape() != (d, d) {
        return Err(Error::invalid(format!(
            "attention matrix is {}×{}, expected {d}×{d}",
            w.rows(),
            w.cols()
        )));
    }
    if mask.len() != frames {
        return Err(Error::invalid(format!("mask length {} does not match {frames} frames", mask.len())));
    }
    Ok(attention_forward(h, w, mask).0)
}

/// Returns `∂L/∂H` (attention path only) and accumulates `∂L/∂W`.
pub fn attention_backward(
    h: &Matrix,
    w: &Matrix,
    mask: &[bool],
    cache: &AttentionCache,
    d_context: &Matrix,
    grad_w: &mut Matrix,
) -> Matrix {
    let (frames, d) = h.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let valid: Vec<usize> = (0..frames).filter(|&t| mask[t]).collect();
    let a = &cache.weights;
    let mut dh = Matrix::zeros(frames, d);
    let mut dq = Matrix::zeros(frames, d);
    let mut ds = vec![0.0; frames];
    for &i in &valid {
        let dc = d_context.row(i);
        let mut weighted = 0.0;
        for &j in &valid {
            let da = dot(dc, h.row(j));
            ds[j] = da;
            weighted += a.get(i, j) * da;
            let aij = a.get(i, j);
            for (g, c) in dh.row_mut(j).iter_mut().zip(dc) {
                *g += aij * c;
            }
        }
        for &j in &valid {
            ds[j] = a.get(i, j) * (ds[j] - weighted) * scale;
        }
        let dq_row = dq.row_mut(i);
        for &j in &valid {
            for (g, hv) in dq_row.iter_mut().zip(h.row(j)) {
                *g += ds[j] * hv;
            }
        }
        let q = cache.query.row(i);
        for &j in &valid {
            let s = ds[j];
            for (g, qv) in dh.row_mut(j).iter_mut().zip(q) {
                *g += s * qv;
            }
        }
    }
    gemm_tn(d, frames, d, h.data(), dq.data(), grad_w.data_mut());
    gemm_nt(frames, d, d, dq.data(), w.data(), dh.data_mut());
    dh
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_frame_attention_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random(1, 4, &mut rng);
        let w = random(4, 4, &mut rng);
        let (c, cache) = attention_forward(&h, &w, &[true]);
        assert_eq!(cache.weights.get(0, 0), 1.0);
        assert_eq!(c, h);
    }

    #[test]
    fn zero_weights_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random(5, 3, &mut rng);
        let mask = [true, true, false, true, false];
        let (c, _) = attention_forward(&h, &Matrix::zeros(3, 3), &mask);
        for col in 0..3 {
            let mean = (h.get(0, col) + h.get(1, col) + h.get(3, col)) / 3.0;
            for i in [0, 1, 3] {
                assert!((c.get(i, col) - mean).abs() < 1e-12);
            }
            assert_eq!(c.get(2, col), 0.0);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let f = rng.gen_range(1..9);
            let d = rng.gen_range(1..6);
            let h = random(f, d, &mut rng);
            let w = random(d, d, &mut rng);
            let mut mask: Vec<bool> = (0..f).map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            let (_, cache) = attention_forward(&h, &w, &mask);
            for i in (0..f).filter(|&i| mask[i]) {
                let row = cache.weights.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..f {
                    assert!(row[j] >= 0.0);
                    if !mask[j] {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_output_width() {
        assert_eq!(conv_out_bins(257, 3), 86);
        assert_eq!(conv_out_bins(86, 3), 29);
        assert_eq!(conv_out_bins(29, 3), 10);
        assert_eq!(conv_out_bins(10, 3), 4);
    }
}
