//! Learnable band-pass filter bank on raw waveforms.
//!
//! Each filter is a Hamming-windowed difference of two ideal low-pass sinc
//! responses, parameterized only by a `(f_low, f_band)` pair in Hz. The
//! realized cutoffs are
//!
//! ```text
//! low  = clamp(|f_low|, MIN_LOW_HZ, nyquist - MIN_BAND_HZ)
//! high = min(low + MIN_BAND_HZ + |f_band|, nyquist)
//! ```
//!
//! so every real parameter setting yields `0 < low < high <= nyquist`.
//!
//! Filter energies per frame are computed in the frequency domain: the
//! energy of the full linear convolution of a frame with `h` equals
//! `Σ_f P(f) |H(f)|² / (N·W)` for an FFT size `N >= W + K - 1`. This is the
//! route the model trains through; [`lfb_features`] computes the same
//! quantity by direct time-domain convolution.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::corpus::MonoSignal;
use crate::dsp::{frame_at, frame_count, hamming, hz_to_mel, mel_to_hz, FftPlan, LOG_EPS};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_tn, Matrix};

use super::LfbFeatures;

pub const MIN_LOW_HZ: f64 = 1.0;
pub const MIN_BAND_HZ: f64 = 50.0;

/// Filter-bank parameters. `cutoffs` is `num_filters × 2` holding the raw
/// learnable `(f_low, f_band)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LfbParams {
    pub kernel_len: usize,
    pub sample_rate_hz: u32,
    pub cutoffs: Matrix,
}

impl LfbParams {
    /// Filters spaced evenly on the mel scale from 30 Hz up to Nyquist.
    pub fn mel_init(num_filters: usize, kernel_len: usize, sample_rate_hz: u32) -> Self {
        let nyq = sample_rate_hz as f64 / 2.0;
        let lo = hz_to_mel(30.0);
        let hi = hz_to_mel(nyq - (MIN_LOW_HZ + MIN_BAND_HZ));
        let edges: Vec<f64> = (0..=num_filters)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / num_filters as f64))
            .collect();
        let mut cutoffs = Matrix::zeros(num_filters, 2);
        for k in 0..num_filters {
            cutoffs.set(k, 0, edges[k]);
            cutoffs.set(k, 1, edges[k + 1] - edges[k]);
        }
        Self {
            kernel_len,
            sample_rate_hz,
            cutoffs,
        }
    }

    pub fn num_filters(&self) -> usize {
        self.cutoffs.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_len == 0 || self.kernel_len.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "filter kernel length must be odd and positive, got {}",
                self.kernel_len
            )));
        }
        if self.sample_rate_hz == 0 || self.num_filters() == 0 || self.cutoffs.cols() != 2 {
            return Err(Error::invalid("filter bank needs a sample rate and at least one filter"));
        }
        if !self.cutoffs.is_finite() {
            return Err(Error::invalid("non-finite filter cutoffs"));
        }
        Ok(())
    }

    /// Realized `(low, high)` band edges in Hz for every filter.
    pub fn bands(&self) -> Vec<(f64, f64)> {
        let nyq = self.sample_rate_hz as f64 / 2.0;
        (0..self.num_filters())
            .map(|k| {
                let c = effective_cutoffs(self.cutoffs.get(k, 0), self.cutoffs.get(k, 1), nyq);
                (c.low, c.high)
            })
            .collect()
    }
}

/// Realized band edges and their partial derivatives w.r.t. the raw
/// parameters.
#[derive(Debug, Clone, Copy)]
pub struct Cutoffs {
    pub low: f64,
    pub high: f64,
    pub dlow_dflow: f64,
    pub dhigh_dflow: f64,
    pub dhigh_dfband: f64,
}

pub fn effective_cutoffs(f_low: f64, f_band: f64, nyquist: f64) -> Cutoffs {
    let abs_low = f_low.abs();
    let low_max = nyquist - MIN_BAND_HZ;
    let (low, dlow_dflow) = if abs_low < MIN_LOW_HZ {
        (MIN_LOW_HZ, 0.0)
    } else if abs_low > low_max {
        (low_max, 0.0)
    } else {
        (abs_low, f_low.signum())
    };
    let raw_high = low + MIN_BAND_HZ + f_band.abs();
    let (high, dhigh_dflow, dhigh_dfband) = if raw_high > nyquist {
        (nyquist, 0.0, 0.0)
    } else {
        (raw_high, dlow_dflow, f_band.signum())
    };
    Cutoffs {
        low,
        high,
        dlow_dflow,
        dhigh_dflow,
        dhigh_dfband,
    }
}

/// Impulse response of a band-pass with the given edges, centered at tap
/// `(kernel_len - 1) / 2`.
pub fn bandpass_kernel(low: f64, high: f64, kernel_len: usize, sample_rate: f64) -> Vec<f64> {
    let window = hamming(kernel_len);
    let half = (kernel_len - 1) as f64 / 2.0;
    (0..kernel_len)
        .map(|j| {
            let n = j as f64 - half;
            let ideal = if n == 0.0 {
                2.0 * (high - low) / sample_rate
            } else {
                ((2.0 * PI * high * n / sample_rate).sin() - (2.0 * PI * low * n / sample_rate).sin())
                    / (PI * n)
            };
            ideal * window[j]
        })
        .collect()
}

/// `∂h_j/∂high` (the derivative w.r.t. `low` is the negation evaluated at
/// `low`).
fn kernel_edge_derivative(edge: f64, kernel_len: usize, sample_rate: f64, window: &[f64]) -> Vec<f64> {
    let half = (kernel_len - 1) as f64 / 2.0;
    (0..kernel_len)
        .map(|j| {
            let n = j as f64 - half;
            2.0 * (2.0 * PI * edge * n / sample_rate).cos() / sample_rate * window[j]
        })
        .collect()
}

/// Frequency-domain filter-bank evaluator for frames of a fixed length.
#[derive(Debug, Clone)]
pub struct LfbFrontend {
    frame_len: usize,
    kernel_len: usize,
    plan: FftPlan,
}

/// Squared filter responses `|H_k(f)|²` for one parameter setting, kept for
/// the backward pass.
#[derive(Debug, Clone)]
pub struct FilterResponses {
    cutoffs: Vec<Cutoffs>,
    spectra: Vec<Vec<Complex64>>,
    /// `bins × num_filters`
    power: Matrix,
}

impl LfbFrontend {
    pub fn new(frame_len: usize, kernel_len: usize) -> Self {
        let size = (frame_len + kernel_len - 1).next_power_of_two();
        Self {
            frame_len,
            kernel_len,
            plan: FftPlan::new(size),
        }
    }

    pub fn bins(&self) -> usize {
        self.plan.bins()
    }

    pub fn fft_size(&self) -> usize {
        self.plan.size()
    }

    /// Weighted frame power spectra, `F × bins`: each row is `c_f |X(f)|²`
    /// with the one-sided weights `c_f` and the `1/(N·W)` normalization
    /// folded in, so that `frame_power · |H|²` is the mean squared filter
    /// output per frame.
    pub fn frame_power(&self, frames: &Matrix) -> Matrix {
        assert_eq!(frames.cols(), self.frame_len, "frame length mismatch");
        let n = self.plan.size();
        let bins = self.plan.bins();
        let norm = 1.0 / (n as f64 * self.frame_len as f64);
        let mut out = Matrix::zeros(frames.rows(), bins);
        for t in 0..frames.rows() {
            let p = self.plan.power(frames.row(t));
            let row = out.row_mut(t);
            for (f, (o, v)) in row.iter_mut().zip(p).enumerate() {
                let c = if f == 0 || f == n / 2 { 1.0 } else { 2.0 };
                *o = c * norm * v;
            }
        }
        out
    }

    pub fn responses(&self, params: &LfbParams) -> FilterResponses {
        let fs = params.sample_rate_hz as f64;
        let nf = params.num_filters();
        let bins = self.plan.bins();
        let mut cutoffs = Vec::with_capacity(nf);
        let mut spectra = Vec::with_capacity(nf);
        let mut power = Matrix::zeros(bins, nf);
        for k in 0..nf {
            let c = effective_cutoffs(params.cutoffs.get(k, 0), params.cutoffs.get(k, 1), fs / 2.0);
            let h = bandpass_kernel(c.low, c.high, self.kernel_len, fs);
            let spec = self.plan.forward_real(&h);
            for f in 0..bins {
                power.set(f, k, spec[f].norm_sqr());
            }
            cutoffs.push(c);
            spectra.push(spec);
        }
        FilterResponses {
            cutoffs,
            spectra,
            power,
        }
    }

    /// Mean squared filter output per frame and filter, `F × num_filters`.
    pub fn energies(&self, frame_power: &Matrix, responses: &FilterResponses) -> Matrix {
        let (f, bins) = frame_power.shape();
        let nf = responses.power.cols();
        let mut e = Matrix::zeros(f, nf);
        gemm_nn(f, bins, nf, frame_power.data(), responses.power.data(), e.data_mut());
        e
    }

    /// Chains `∂L/∂energies` back to the raw `(f_low, f_band)` parameters.
    pub fn backward(
        &self,
        params: &LfbParams,
        frame_power: &Matrix,
        responses: &FilterResponses,
        d_energies: &Matrix,
    ) -> Matrix {
        let (f, bins) = frame_power.shape();
        let nf = params.num_filters();
        let n = self.plan.size();
        let fs = params.sample_rate_hz as f64;
        let window = hamming(self.kernel_len);

        // ∂L/∂|H_k(f)|²
        let mut g = Matrix::zeros(bins, nf);
        gemm_tn(bins, f, nf, frame_power.data(), d_energies.data(), g.data_mut());

        let mut grads = Matrix::zeros(nf, 2);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..nf {
            // ∂|H(f)|²/∂h_j = 2 Re(H(f) e^{iω_f j}); fold the one-sided sum
            // into a full-spectrum inverse FFT.
            let spec = &responses.spectra[k];
            for fi in 0..bins {
                let gf = g.get(fi, k);
                let w = if fi == 0 || fi == n / 2 { gf } else { gf / 2.0 };
                buf[fi] = spec[fi] * w;
                if fi != 0 && fi != n / 2 {
                    buf[n - fi] = spec[n - fi] * w;
                }
            }
            self.plan.inverse(&mut buf);
            let dh: Vec<f64> = buf[..self.kernel_len].iter().map(|c| 2.0 * c.re).collect();

            let c = responses.cutoffs[k];
            let dh_dhigh = kernel_edge_derivative(c.high, self.kernel_len, fs, &window);
            let dh_dlow = kernel_edge_derivative(c.low, self.kernel_len, fs, &window);
            let d_high: f64 = dh.iter().zip(&dh_dhigh).map(|(a, b)| a * b).sum();
            let d_low: f64 = -dh.iter().zip(&dh_dlow).map(|(a, b)| a * b).sum::<f64>();
            grads.set(k, 0, d_low * c.dlow_dflow + d_high * c.dhigh_dflow);
            grads.set(k, 1, d_high * c.dhigh_dfband);
        }
        grads
    }
}

/// Frames of `window` samples every `hop` samples, zero-padded at the end;
/// `ceil(len/hop)` rows.
pub fn frame_signal(samples: &[f64], window: usize, hop: usize) -> Matrix {
    let frames = frame_count(samples.len(), hop);
    let mut out = Matrix::zeros(frames, window);
    for t in 0..frames {
        out.row_mut(t).copy_from_slice(&frame_at(samples, t * hop, window));
    }
    out
}

fn check_framing(window: usize, hop: usize) -> Result<()> {
    if window == 0 || hop == 0 || hop > window {
        return Err(Error::invalid(format!(
            "invalid framing: window {window}, hop {hop}"
        )));
    }
    Ok(())
}

/// Log filter energies per frame by direct convolution: each frame is
/// convolved with every filter, squared, averaged over the frame length and
/// log-compressed. Frame grid matches [`super::stft_features`].
pub fn lfb_features(sig: &MonoSignal, params: &LfbParams, hop: usize, window: usize) -> Result<LfbFeatures> {
    params.validate()?;
    check_framing(window, hop)?;
    if sig.sample_rate_hz != params.sample_rate_hz {
        return Err(Error::invalid(format!(
            "signal rate {} Hz does not match filter bank rate {} Hz",
            sig.sample_rate_hz, params.sample_rate_hz
        )));
    }
    let fs = params.sample_rate_hz as f64;
    let kernels: Vec<Vec<f64>> = params
        .bands()
        .into_iter()
        .map(|(lo, hi)| bandpass_kernel(lo, hi, params.kernel_len, fs))
        .collect();
    let frames = frame_signal(&sig.samples, window, hop);
    let mut out = Matrix::zeros(frames.rows(), kernels.len());
    let mut y = vec![0.0; window + params.kernel_len - 1];
    for t in 0..frames.rows() {
        let x = frames.row(t);
        for (k, h) in kernels.iter().enumerate() {
            y.iter_mut().for_each(|v| *v = 0.0);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (j, &hj) in h.iter().enumerate() {
                    y[i + j] += xi * hj;
                }
            }
            let e = y.iter().map(|v| v * v).sum::<f64>() / window as f64;
            out.set(t, k, (e + LOG_EPS).ln());
        }
    }
    Ok(LfbFeatures {
        frames: out,
        frame_rate_hz: fs / hop as f64,
    })
}

/// Gradient of a scalar loss of the filter-bank features w.r.t. every raw
/// `(f_low, f_band)` pair. `loss_fn` receives the `F × num_filters` log
/// energies and returns the loss and its gradient w.r.t. them.
pub fn lfb_gradient<L>(
    params: &LfbParams,
    sig: &MonoSignal,
    hop: usize,
    window: usize,
    loss_fn: L,
) -> Result<(f64, Matrix)>
where
    L: Fn(&Matrix) -> (f64, Matrix),
{
    params.validate()?;
    check_framing(window, hop)?;
    let frontend = LfbFrontend::new(window, params.kernel_len);
    let power = frontend.frame_power(&frame_signal(&sig.samples, window, hop));
    let responses = frontend.responses(params);
    let energies = frontend.energies(&power, &responses);
    let mut feats = energies.clone();
    feats.data_mut().iter_mut().for_each(|e| *e = (*e + LOG_EPS).ln());
    let (loss, mut d_feats) = loss_fn(&feats);
    for (d, e) in d_feats.data_mut().iter_mut().zip(energies.data()) {
        *d /= e + LOG_EPS;
    }
    Ok((loss, frontend.backward(params, &power, &responses, &d_feats)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    fn params(pairs: &[(f64, f64)], kernel_len: usize, sr: u32) -> LfbParams {
        let rows: Vec<Vec<f64>> = pairs.iter().map(|&(a, b)| vec![a, b]).collect();
        LfbParams {
            kernel_len,
            sample_rate_hz: sr,
            cutoffs: Matrix::from_rows(&rows),
        }
    }

    proptest! {
        #[test]
        fn every_parameter_setting_is_a_valid_bandpass(a in -1e5f64..1e5, b in -1e5f64..1e5) {
            let c = effective_cutoffs(a, b, 8000.0);
            prop_assert!(c.low > 0.0);
            prop_assert!(c.low < c.high);
            prop_assert!(c.high <= 8000.0);
        }
    }

    #[test]
    fn kernel_passes_its_band() {
        let h = bandpass_kernel(1000.0, 2000.0, 251, 16000.0);
        let plan = FftPlan::new(4096);
        let p = plan.power(&h);
        let at = |hz: f64| p[(hz / 16000.0 * 4096.0).round() as usize];
        assert!((at(1500.0) - 1.0).abs() < 0.05, "{}", at(1500.0));
        assert!(at(4000.0) < 1e-4);
        assert!(at(300.0) < 1e-4);
    }

    #[test]
    fn frequency_route_matches_direct_convolution() {
        let sig = MonoSignal::new(16000, noise(2000, 3)).unwrap();
        let p = params(&[(300.0, 400.0), (-2500.0, 700.0), (6000.0, -5000.0)], 31, 16000);
        let direct = lfb_features(&sig, &p, 64, 128).unwrap();

        let fe = LfbFrontend::new(128, 31);
        let power = fe.frame_power(&frame_signal(&sig.samples, 128, 64));
        let e = fe.energies(&power, &fe.responses(&p));
        assert_eq!(e.shape(), direct.frames.shape());
        for (a, b) in e.data().iter().zip(direct.frames.data()) {
            assert!(((a + LOG_EPS).ln() - b).abs() < 1e-9);
        }
    }

    #[test]
    fn white_noise_gives_comparable_band_energies() {
        let sig = MonoSignal::new(16000, noise(32000, 11)).unwrap();
        // raw params chosen so the realized bands are [1000,2000] and [4000,5000]
        let p = params(&[(1000.0, 950.0), (4000.0, 950.0)], 251, 16000);
        assert_eq!(p.bands(), vec![(1000.0, 2000.0), (4000.0, 5000.0)]);
        let f = lfb_features(&sig, &p, 256, 512).unwrap();
        let mean = |k: usize| (0..f.frames.rows()).map(|t| f.frames.get(t, k).exp()).sum::<f64>();
        let ratio_db = 10.0 * (mean(0) / mean(1)).log10();
        assert!(ratio_db.abs() < 3.0, "{ratio_db}");

        // Reference oracle: apply an independently designed windowed-sinc
        // FIR (Blackman) to the whole signal and compare band energies.
        let reference = |lo: f64, hi: f64| {
            let k = 401;
            let half = (k - 1) as f64 / 2.0;
            let taps: Vec<f64> = (0..k)
                .map(|j| {
                    let n = j as f64 - half;
                    let w = 0.42 - 0.5 * (2.0 * PI * j as f64 / (k - 1) as f64).cos()
                        + 0.08 * (4.0 * PI * j as f64 / (k - 1) as f64).cos();
                    let ideal = if n == 0.0 {
                        2.0 * (hi - lo) / 16000.0
                    } else {
                        ((2.0 * PI * hi * n / 16000.0).sin() - (2.0 * PI * lo * n / 16000.0).sin()) / (PI * n)
                    };
                    ideal * w
                })
                .collect();
            let x = &sig.samples;
            (0..x.len())
                .map(|i| {
                    let y: f64 = taps
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j <= i)
                        .map(|(j, h)| h * x[i - j])
                        .sum();
                    y * y
                })
                .sum::<f64>()
        };
        let ref_db = 10.0 * (reference(1000.0, 2000.0) / reference(4000.0, 5000.0)).log10();
        assert!((ratio_db - ref_db).abs() < 1.0, "{ratio_db} vs {ref_db}");
    }

    #[test]
    fn tone_selects_its_filter() {
        let sig = MonoSignal::new(
            16000,
            (0..8000).map(|i| (2.0 * PI * 3000.0 * i as f64 / 16000.0).sin()).collect(),
        )
        .unwrap();
        let p = LfbParams::mel_init(16, 101, 16000);
        let bands = p.bands();
        let f = lfb_features(&sig, &p, 256, 512).unwrap();
        let t = f.frames.rows() / 2;
        let best = (0..16)
            .max_by(|&a, &b| f.frames.get(t, a).total_cmp(&f.frames.get(t, b)))
            .unwrap();
        assert!(bands[best].0 <= 3000.0 && 3000.0 <= bands[best].1, "{:?}", bands[best]);
    }

    #[test]
    fn zero_signal_is_log_floor() {
        let sig = MonoSignal::new(16000, vec![0.0; 1000]).unwrap();
        let f = lfb_features(&sig, &LfbParams::mel_init(4, 31, 16000), 256, 512).unwrap();
        assert!(f.frames.data().iter().all(|&v| v == LOG_EPS.ln()));
        assert_eq!(f.frames.rows(), 4);
    }

    #[test]
    fn even_kernel_is_rejected() {
        let p = LfbParams::mel_init(4, 30, 16000);
        let sig = MonoSignal::new(16000, vec![0.0; 1000]).unwrap();
        assert!(lfb_features(&sig, &p, 256, 512).is_err());
    }

    fn weighted_loss(weights: Vec<f64>) -> impl Fn(&Matrix) -> (f64, Matrix) {
        move |feats: &Matrix| {
            let mut g = Matrix::zeros(feats.rows(), feats.cols());
            let mut loss = 0.0;
            for t in 0..feats.rows() {
                for k in 0..feats.cols() {
                    let v = feats.get(t, k);
                    // smooth, nonlinear in the features
                    loss += weights[k] * (0.1 * v).sin() * (t as f64 + 1.0);
                    g.set(t, k, weights[k] * 0.1 * (0.1 * v).cos() * (t as f64 + 1.0));
                }
            }
            (loss, g)
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let sig = MonoSignal::new(16000, noise(700, 5)).unwrap();
        let p = params(&[(500.0, 300.0), (-1800.0, 900.0), (3500.0, -1200.0)], 21, 16000);
        let loss = weighted_loss(vec![1.0, -0.7, 0.4]);
        let (_, grad) = lfb_gradient(&p, &sig, 64, 128, &loss).unwrap();
        let h = 1e-3;
        for k in 0..3 {
            for c in 0..2 {
                let mut plus = p.clone();
                plus.cutoffs.set(k, c, p.cutoffs.get(k, c) + h);
                let mut minus = p.clone();
                minus.cutoffs.set(k, c, p.cutoffs.get(k, c) - h);
                let lp = lfb_gradient(&plus, &sig, 64, 128, &loss).unwrap().0;
                let lm = lfb_gradient(&minus, &sig, 64, 128, &loss).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.get(k, c);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "filter {k} coord {c}: analytic {an} fd {fd}");
            }
        }
    }

    #[test]
    fn ignored_filter_has_zero_gradient() {
        let sig = MonoSignal::new(16000, noise(700, 6)).unwrap();
        let p = params(&[(500.0, 300.0), (1800.0, 900.0)], 21, 16000);
        let (_, grad) = lfb_gradient(&p, &sig, 64, 128, weighted_loss(vec![1.0, 0.0])).unwrap();
        assert_eq!(grad.get(1, 0), 0.0);
        assert_eq!(grad.get(1, 1), 0.0);
        assert!(grad.get(0, 0) != 0.0);
    }

    #[test]
    fn duplicated_filters_get_equal_gradients() {
        let sig = MonoSignal::new(16000, noise(700, 7)).unwrap();
        let p = params(&[(900.0, 400.0), (900.0, 400.0)], 21, 16000);
        let (_, grad) = lfb_gradient(&p, &sig, 64, 128, weighted_loss(vec![0.5, 0.5])).unwrap();
        assert_eq!(grad.row(0), grad.row(1));
    }
}
