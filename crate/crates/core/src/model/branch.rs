//! One ear's CNN-BLSTM-attention stack, from cached features to frame
//! scores.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::LOG_EPS;
use crate::error::{Error, Result};
use crate::features::lfb::{FilterResponses, LfbFrontend};
use crate::features::{BranchInput, LfbParams};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Matrix};

use super::fusion::{BranchTag, FrameScores};
use super::layers::{attention_backward, attention_forward, conv_out_bins, AttentionCache};
use super::layers::{ConvBlock, ConvCache, ConvGeometry, LstmCache, LstmDirection};
use super::ModelConfig;

/// Per-dimension standardization applied to an input stream. Not trained;
/// fitted once from training data.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: Matrix,
    pub std: Matrix,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Matrix::zeros(1, dim),
            std: Matrix::filled(1, dim, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    /// Mean and standard deviation over the given rows. Dimensions with
    /// (near-)zero spread keep unit scale.
    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for (j, v) in r.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let mut norm = Self::identity(dim);
        if n == 0 {
            return norm;
        }
        for j in 0..dim {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            norm.mean.set(0, j, mean);
            norm.std.set(0, j, if std > 1e-3 { std } else { 1.0 });
        }
        norm.mean.round_to_f32();
        norm.std.round_to_f32();
        norm
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(x).zip(self.mean.data()).zip(self.std.data()) {
            *o = (v - m) / s;
        }
    }
}

/// A branch's features in the form the network consumes: the spectral and
/// embedding streams as stored, and the filter-bank stream as weighted
/// frame power spectra (filters are applied inside the network).
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub spectral: Matrix,
    pub lfb_power: Matrix,
    pub ssl: Matrix,
}

impl PreparedInput {
    pub fn num_frames(&self) -> usize {
        self.spectral.rows()
    }

    pub fn new(input: &BranchInput, cfg: &ModelConfig, frontend: &LfbFrontend) -> Result<Self> {
        let f = input.num_frames();
        if f == 0 {
            return Err(Error::invalid("branch input has no frames"));
        }
        let checks = [
            ("spectral", input.spectral.shape(), (f, cfg.spectral_bins())),
            ("filter-bank frame", input.lfb_frames.shape(), (f, cfg.architecture.window)),
            ("embedding", input.ssl.shape(), (f, cfg.ssl_dim)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::invalid(format!(
                    "{name} stream has shape {}×{}, model expects {}×{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        Ok(Self {
            spectral: input.spectral.clone(),
            lfb_power: frontend.frame_power(&input.lfb_frames),
            ssl: input.ssl.clone(),
        })
    }

    /// Copy padded with zero frames up to `frames` rows.
    pub fn padded(&self, frames: usize) -> Self {
        Self {
            spectral: self.spectral.resized_rows(frames),
            lfb_power: self.lfb_power.resized_rows(frames),
            ssl: self.ssl.resized_rows(frames),
        }
    }
}

/// All weights of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchWeights {
    pub convs: Vec<ConvBlock>,
    pub lfb: LfbParams,
    /// `input_dim × d_model`
    pub proj_w: Matrix,
    pub proj_b: Matrix,
    pub lstm_fwd: LstmDirection,
    pub lstm_bwd: LstmDirection,
    /// `d × d` with `d = 2·hidden`
    pub att_w: Matrix,
    /// `2d × 1`, applied to `[H ‖ C]`
    pub head_w: Matrix,
    pub head_b: Matrix,
    pub norm_spectral: InputNorm,
    pub norm_lfb: InputNorm,
    pub norm_ssl: InputNorm,
}

fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit) as f32 as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl BranchWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let a = &cfg.architecture;
        let mut convs = Vec::new();
        let mut cin = 1;
        for &c in &a.cnn_channels {
            convs.push(ConvBlock::zeros(cin, c));
            cin = c;
        }
        let h = a.lstm_hidden;
        let d = 2 * h;
        let mut lfb = LfbParams::mel_init(a.lfb_filters, a.lfb_kernel, cfg.sample_rate_hz);
        lfb.cutoffs.fill(0.0);
        Self {
            convs,
            lfb,
            proj_w: Matrix::zeros(cfg.input_dim(), a.d_model),
            proj_b: Matrix::zeros(1, a.d_model),
            lstm_fwd: LstmDirection::zeros(a.d_model, h),
            lstm_bwd: LstmDirection::zeros(a.d_model, h),
            att_w: Matrix::zeros(d, d),
            head_w: Matrix::zeros(2 * d, 1),
            head_b: Matrix::zeros(1, 1),
            norm_spectral: InputNorm::identity(cfg.spectral_bins()),
            norm_lfb: InputNorm::identity(a.lfb_filters),
            norm_ssl: InputNorm::identity(cfg.ssl_dim),
        }
    }

    /// Random initialization; every value is representable in `f32`.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let a = &cfg.architecture;
        let mut w = Self::zeros(cfg);
        for conv in &mut w.convs {
            let fan_in = conv.weight.rows() as f64;
            conv.weight = uniform(conv.weight.rows(), conv.weight.cols(), (6.0 / fan_in).sqrt(), rng);
        }
        let mut lfb = LfbParams::mel_init(a.lfb_filters, a.lfb_kernel, cfg.sample_rate_hz);
        lfb.cutoffs.round_to_f32();
        w.lfb = lfb;
        let (din, dm) = w.proj_w.shape();
        w.proj_w = uniform(din, dm, (6.0 / (din + dm) as f64).sqrt(), rng);
        let h = a.lstm_hidden;
        for dir in [&mut w.lstm_fwd, &mut w.lstm_bwd] {
            let k = 1.0 / (h as f64).sqrt();
            dir.w_ih = uniform(dir.w_ih.rows(), 4 * h, k, rng);
            dir.w_hh = uniform(h, 4 * h, k, rng);
            for j in h..2 * h {
                dir.bias.set(0, j, 1.0);
            }
        }
        let d = 2 * h;
        w.att_w = uniform(d, d, (3.0 / d as f64).sqrt(), rng);
        w.head_w = uniform(2 * d, 1, (6.0 / (2 * d + 1) as f64).sqrt(), rng);
        w
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out.push(("lfb.cutoffs".into(), &self.lfb.cutoffs));
        out.push(("proj.weight".into(), &self.proj_w));
        out.push(("proj.bias".into(), &self.proj_b));
        for (name, dir) in [("lstm_fwd", &self.lstm_fwd), ("lstm_bwd", &self.lstm_bwd)] {
            out.push((format!("{name}.w_ih"), &dir.w_ih));
            out.push((format!("{name}.w_hh"), &dir.w_hh));
            out.push((format!("{name}.bias"), &dir.bias));
        }
        out.push(("attention.weight".into(), &self.att_w));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.split_mut().0
    }

    /// Trainable tensors and normalization buffers, each in their fixed
    /// order.
    pub fn split_mut(&mut self) -> (Vec<&mut Matrix>, Vec<&mut Matrix>) {
        let Self {
            convs,
            lfb,
            proj_w,
            proj_b,
            lstm_fwd,
            lstm_bwd,
            att_w,
            head_w,
            head_b,
            norm_spectral,
            norm_lfb,
            norm_ssl,
        } = self;
        let mut params: Vec<&mut Matrix> = Vec::new();
        for c in convs {
            params.push(&mut c.weight);
            params.push(&mut c.bias);
        }
        params.push(&mut lfb.cutoffs);
        params.push(proj_w);
        params.push(proj_b);
        for dir in [lstm_fwd, lstm_bwd] {
            params.push(&mut dir.w_ih);
            params.push(&mut dir.w_hh);
            params.push(&mut dir.bias);
        }
        params.push(att_w);
        params.push(head_w);
        params.push(head_b);
        let mut buffers = Vec::new();
        for n in [norm_spectral, norm_lfb, norm_ssl] {
            buffers.push(&mut n.mean);
            buffers.push(&mut n.std);
        }
        (params, buffers)
    }

    /// Fitted, non-trainable normalization statistics.
    pub fn buffers(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (name, n) in [
            ("spectral", &self.norm_spectral),
            ("lfb", &self.norm_lfb),
            ("ssl", &self.norm_ssl),
        ] {
            out.push((format!("norm_{name}.mean"), &n.mean));
            out.push((format!("norm_{name}.std"), &n.std));
        }
        out
    }

    fn cnn_geometry(&self, frames: usize, bins: usize, stride: usize) -> Vec<ConvGeometry> {
        let mut geos = Vec::with_capacity(self.convs.len());
        let mut bins_in = bins;
        let mut cin = 1;
        for c in &self.convs {
            let bins_out = conv_out_bins(bins_in, stride);
            geos.push(ConvGeometry {
                frames,
                bins_in,
                bins_out,
                cin,
                cout: c.bias.cols(),
                stride,
            });
            bins_in = bins_out;
            cin = c.bias.cols();
        }
        geos
    }

    /// Log filter-bank energies under the current cutoffs (before
    /// normalization).
    pub fn lfb_log_energies(&self, input: &PreparedInput, frontend: &LfbFrontend) -> Matrix {
        let responses = frontend.responses(&self.lfb);
        let mut e = frontend.energies(&input.lfb_power, &responses);
        e.data_mut().iter_mut().for_each(|v| *v = (*v + LOG_EPS).ln());
        e
    }
}

/// Everything the backward pass needs from a forward pass.
pub struct BranchCache {
    mask: Vec<bool>,
    valid: Vec<usize>,
    geos: Vec<ConvGeometry>,
    convs: Vec<ConvCache>,
    responses: FilterResponses,
    lfb_energy: Matrix,
    x: Matrix,
    u: Matrix,
    lstm: [LstmCache; 2],
    h: Matrix,
    attn: AttentionCache,
    c: Matrix,
}

/// Stateless evaluator for branch weights of a given configuration.
#[derive(Debug, Clone)]
pub struct BranchNet {
    stride: usize,
    frontend: LfbFrontend,
}

impl BranchNet {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            stride: cfg.architecture.freq_stride,
            frontend: LfbFrontend::new(cfg.architecture.window, cfg.architecture.lfb_kernel),
        }
    }

    pub fn frontend(&self) -> &LfbFrontend {
        &self.frontend
    }

    fn check(&self, input: &PreparedInput, w: &BranchWeights, mask: &[bool]) -> Result<()> {
        let f = input.num_frames();
        if mask.len() != f {
            return Err(Error::invalid(format!("mask length {} does not match {f} frames", mask.len())));
        }
        let shapes = [
            ("spectral", input.spectral.shape(), (f, w.norm_spectral.dim())),
            ("filter-bank power", input.lfb_power.shape(), (f, self.frontend.bins())),
            ("embedding", input.ssl.shape(), (f, w.norm_ssl.dim())),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::invalid(format!(
                    "{name} input is {}×{} but the weights expect {}×{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        let cnn_dim = self
            .cnn_geometry_dims(w, f)
            .map(|g| g.bins_out * g.cout)
            .unwrap_or(0);
        let din = cnn_dim + w.norm_lfb.dim() + w.norm_ssl.dim();
        if w.proj_w.rows() != din || w.lfb.num_filters() != w.norm_lfb.dim() {
            return Err(Error::invalid("branch weights have inconsistent shapes"));
        }
        Ok(())
    }

    fn cnn_geometry_dims(&self, w: &BranchWeights, frames: usize) -> Option<ConvGeometry> {
        w.cnn_geometry(frames, w.norm_spectral.dim(), self.stride).last().copied()
    }

    pub fn forward(&self, input: &PreparedInput, w: &BranchWeights, mask: &[bool]) -> Result<(FrameScores, BranchCache)> {
        self.check(input, w, mask)?;
        let f = input.num_frames();
        let valid: Vec<usize> = (0..f).filter(|&t| mask[t]).collect();

        // spectral CNN
        let bins = w.norm_spectral.dim();
        let mut act = vec![0.0; f * bins];
        for &t in &valid {
            w.norm_spectral.apply(input.spectral.row(t), &mut act[t * bins..(t + 1) * bins]);
        }
        let geos = w.cnn_geometry(f, bins, self.stride);
        let mut convs = Vec::with_capacity(geos.len());
        for (conv, geo) in w.convs.iter().zip(&geos) {
            let cache = conv.forward(&act, *geo, mask);
            act = cache.output().data().to_vec();
            convs.push(cache);
        }
        let cnn_dim = act.len() / f;

        // learnable filter bank
        let responses = self.frontend.responses(&w.lfb);
        let lfb_energy = self.frontend.energies(&input.lfb_power, &responses);
        let nf = w.lfb.num_filters();
        let ssl_dim = w.norm_ssl.dim();

        let din = cnn_dim + nf + ssl_dim;
        let mut x = Matrix::zeros(f, din);
        let mut logs = vec![0.0; nf];
        for &t in &valid {
            let row = x.row_mut(t);
            row[..cnn_dim].copy_from_slice(&act[t * cnn_dim..(t + 1) * cnn_dim]);
            for (l, e) in logs.iter_mut().zip(lfb_energy.row(t)) {
                *l = (e + LOG_EPS).ln();
            }
            w.norm_lfb.apply(&logs, &mut row[cnn_dim..cnn_dim + nf]);
            w.norm_ssl.apply(input.ssl.row(t), &mut row[cnn_dim + nf..]);
        }

        let dm = w.proj_w.cols();
        let mut u = Matrix::zeros(f, dm);
        gemm_nn(f, din, dm, x.data(), w.proj_w.data(), u.data_mut());
        for t in 0..f {
            let row = u.row_mut(t);
            if mask[t] {
                row.iter_mut().zip(w.proj_b.data()).for_each(|(v, b)| *v += b);
            } else {
                row.fill(0.0);
            }
        }

        let hid = w.lstm_fwd.hidden();
        let mut h = Matrix::zeros(f, 2 * hid);
        let rev: Vec<usize> = valid.iter().rev().copied().collect();
        let lf = w.lstm_fwd.forward(&u, &valid, &mut h, 0);
        let lb = w.lstm_bwd.forward(&u, &rev, &mut h, hid);

        let (c, attn) = attention_forward(&h, &w.att_w, mask);

        let d = 2 * hid;
        let head = w.head_w.data();
        let bias = w.head_b.get(0, 0);
        let mut scores = vec![0.0; f];
        for &t in &valid {
            scores[t] = dot(h.row(t), &head[..d]) + dot(c.row(t), &head[d..]) + bias;
        }

        let cache = BranchCache {
            mask: mask.to_vec(),
            valid,
            geos,
            convs,
            responses,
            lfb_energy,
            x,
            u,
            lstm: [lf, lb],
            h,
            attn,
            c,
        };
        Ok((FrameScores::new(scores, BranchTag::Left), cache))
    }

    /// Accumulates `∂L/∂weights` into `grad` given `∂L/∂scores`.
    pub fn backward(
        &self,
        input: &PreparedInput,
        w: &BranchWeights,
        cache: &BranchCache,
        d_scores: &[f64],
        grad: &mut BranchWeights,
    ) {
        let f = input.num_frames();
        let hid = w.lstm_fwd.hidden();
        let d = 2 * hid;
        let head = w.head_w.data();

        let mut dh = Matrix::zeros(f, d);
        let mut dc = Matrix::zeros(f, d);
        {
            let gh = grad.head_w.data_mut();
            let mut gb = 0.0;
            for &t in &cache.valid {
                let ds = d_scores[t];
                gb += ds;
                for (j, v) in cache.h.row(t).iter().enumerate() {
                    gh[j] += ds * v;
                }
                for (j, v) in cache.c.row(t).iter().enumerate() {
                    gh[d + j] += ds * v;
                }
                dh.row_mut(t).iter_mut().zip(&head[..d]).for_each(|(g, w)| *g = ds * w);
                dc.row_mut(t).iter_mut().zip(&head[d..]).for_each(|(g, w)| *g = ds * w);
            }
            grad.head_b.data_mut()[0] += gb;
        }

        let dh_att = attention_backward(&cache.h, &w.att_w, &cache.mask, &cache.attn, &dc, &mut grad.att_w);
        dh.data_mut().iter_mut().zip(dh_att.data()).for_each(|(a, b)| *a += b);

        let mut du = w.lstm_fwd.backward(&cache.u, &cache.lstm[0], &dh, 0, &mut grad.lstm_fwd);
        let du_b = w.lstm_bwd.backward(&cache.u, &cache.lstm[1], &dh, hid, &mut grad.lstm_bwd);
        du.data_mut().iter_mut().zip(du_b.data()).for_each(|(a, b)| *a += b);
        for t in 0..f {
            if !cache.mask[t] {
                du.row_mut(t).fill(0.0);
            }
        }

        let (din, dm) = w.proj_w.shape();
        gemm_tn(din, f, dm, cache.x.data(), du.data(), grad.proj_w.data_mut());
        {
            let gb = grad.proj_b.data_mut();
            for &t in &cache.valid {
                gb.iter_mut().zip(du.row(t)).for_each(|(g, v)| *g += v);
            }
        }
        let mut dx = Matrix::zeros(f, din);
        gemm_nt(f, dm, din, du.data(), w.proj_w.data(), dx.data_mut());

        // filter-bank path
        let nf = w.lfb.num_filters();
        let last = cache.geos.last().expect("at least one conv block");
        let cnn_dim = last.bins_out * last.cout;
        let mut d_energy = Matrix::zeros(f, nf);
        for &t in &cache.valid {
            let src = &dx.row(t)[cnn_dim..cnn_dim + nf];
            let e = cache.lfb_energy.row(t);
            let row = d_energy.row_mut(t);
            for k in 0..nf {
                row[k] = src[k] / w.norm_lfb.std.get(0, k) / (e[k] + LOG_EPS);
            }
        }
        let g_cut = self
            .frontend
            .backward(&w.lfb, &input.lfb_power, &cache.responses, &d_energy);
        grad.lfb
            .cutoffs
            .data_mut()
            .iter_mut()
            .zip(g_cut.data())
            .for_each(|(a, b)| *a += b);

        // CNN path
        let mut d_act = vec![0.0; f * cnn_dim];
        for &t in &cache.valid {
            d_act[t * cnn_dim..(t + 1) * cnn_dim].copy_from_slice(&dx.row(t)[..cnn_dim]);
        }
        for i in (0..w.convs.len()).rev() {
            let need_input = i > 0;
            let dxi = w.convs[i].backward(&cache.convs[i], &d_act, &mut grad.convs[i], need_input);
            if let Some(v) = dxi {
                d_act = v;
            }
        }
    }
}

/// Frame scores of one branch. Invalid frames score 0 and do not influence
/// valid ones.
pub fn branch_forward(
    input: &PreparedInput,
    w: &BranchWeights,
    cfg: &ModelConfig,
    mask: &[bool],
) -> Result<FrameScores> {
    BranchNet::new(cfg).forward(input, w, mask).map(|(s, _)| s)
}
