//! Prony analysis of sampled ringdown signals. Fits a sum of damped
//! sinusoids by linear prediction, polynomial rooting, and a final amplitude
//! least-squares pass, yielding per-mode frequency and damping ratio. This is
//! the measurement instrument the simulation harness uses to grade damping.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// A uniformly sampled scalar signal segment.
#[derive(Debug, Clone)]
pub struct SampledSignal {
    pub values: Vec<f64>,
    pub dt: f64,
    pub start_time: f64,
}

impl SampledSignal {
    pub fn new(values: Vec<f64>, dt: f64, start_time: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sample spacing must be positive and finite, got {dt}"
            )));
        }
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "signal needs at least 2 samples, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "signal contains non-finite samples".into(),
            ));
        }
        Ok(Self {
            values,
            dt,
            start_time,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Keeps every `factor`-th sample. Ringdown modes here live well below
    /// 1 Hz, so analysis at a coarser spacing conditions the prediction
    /// matrix without losing information.
    pub fn decimate(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("decimation factor must be >= 1".into()));
        }
        let values: Vec<f64> = self.values.iter().step_by(factor).cloned().collect();
        Self::new(values, self.dt * factor as f64, self.start_time)
    }

    /// The sub-signal with sample times >= from_time.
    pub fn window_from(&self, from_time: f64) -> Result<Self> {
        let first = ((from_time - self.start_time) / self.dt).ceil().max(0.0) as usize;
        if first >= self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "window start {from_time} s is past the end of the signal"
            )));
        }
        Self::new(
            self.values[first..].to_vec(),
            self.dt,
            self.start_time + first as f64 * self.dt,
        )
    }
}

/// One fitted damped sinusoid. Damping ratio is in percent; a real
/// (non-oscillatory) pole reports frequency 0 and damping 100%.
#[derive(Debug, Clone, Copy)]
pub struct PronyMode {
    pub frequency_hz: f64,
    pub damping_pct: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// Prony fit result: modes sorted by amplitude descending, plus the relative
/// RMS misfit of the reconstruction over the analyzed window.
#[derive(Debug, Clone)]
pub struct RingdownEstimate {
    pub modes: Vec<PronyMode>,
    pub fit_error: f64,
}

const COND_LIMIT: f64 = 1e12;

/// Classic three-stage Prony fit of `order` complex pole pairs (2·order
/// discrete poles). The signal is mean-detrended first; the prediction
/// coefficients come from a least-squares solve, whose matrix must be
/// numerically full rank, then the characteristic roots give the poles and a
/// final least-squares pass assigns amplitudes and phases.
pub fn prony_fit(signal: &SampledSignal, order: usize) -> Result<RingdownEstimate> {
    if order < 1 {
        return Err(Error::InvalidArgument("model order must be >= 1".into()));
    }
    let p = 2 * order;
    let n = signal.len();
    if n < 2 * p {
        return Err(Error::OrderTooLarge {
            requested: order,
            limit: n / 4,
        });
    }

    let mean = signal.values.iter().sum::<f64>() / n as f64;
    let y: Vec<f64> = signal.values.iter().map(|v| v - mean).collect();

    // Stage 1: affine linear prediction y[k] = sum_j a_j y[k-j] + d. The
    // constant column absorbs whatever offset the mean subtraction leaves (a
    // decaying signal's sample mean is not its asymptote), which otherwise
    // biases the poles.
    let rows = n - p;
    let m = DMatrix::from_fn(rows, p + 1, |r, j| {
        if j < p {
            y[p + r - 1 - j]
        } else {
            1.0
        }
    });
    let svd = m.svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(smax > 0.0) || cond > COND_LIMIT {
        return Err(Error::IllConditioned { cond });
    }

    // Total least squares: measurement noise lands in the lagged columns as
    // much as in the predicted sample, and plain least squares then biases
    // the poles toward the origin (damping reads high). The smallest right
    // singular direction of [regressors | target] treats both sides evenly
    // and coincides with the least-squares solution on clean data.
    let aug = DMatrix::from_fn(rows, p + 2, |r, j| {
        if j < p {
            y[p + r - 1 - j]
        } else if j == p {
            1.0
        } else {
            y[p + r]
        }
    });
    let svd_aug = aug.svd(false, true);
    let vt = svd_aug.v_t.as_ref().expect("svd v_t");
    let mut min_idx = 0;
    for (i, s) in svd_aug.singular_values.iter().enumerate() {
        if *s < svd_aug.singular_values[min_idx] {
            min_idx = i;
        }
    }
    let w = vt.row(min_idx);
    let pivot = w[p + 1];
    if pivot.abs() < 1e-12 {
        return Err(Error::SolverFailure(
            "prediction stage produced a degenerate direction".into(),
        ));
    }
    let coeffs = DVector::from_fn(p, |j, _| -w[j] / pivot);

    // Stage 2: roots of z^p - a_1 z^(p-1) - ... - a_p via the companion
    // matrix. Sorted for determinism.
    let companion = DMatrix::from_fn(p, p, |r, c| {
        if r == 0 {
            coeffs[c]
        } else if r == c + 1 {
            1.0
        } else {
            0.0
        }
    });
    let mut roots: Vec<Complex<f64>> = companion.complex_eigenvalues().iter().cloned().collect();
    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));

    // Stage 3: amplitudes by least squares on the Vandermonde system
    // y[k] = sum_i c_i z_i^k + offset, solved through the normal equations
    // (p is small and the poles are well separated after the rank check
    // above). The trailing column re-estimates the leftover offset.
    let vand = DMatrix::from_fn(n, p + 1, |k, i| {
        if i < p {
            roots[i].powc(Complex::new(k as f64, 0.0))
        } else {
            Complex::new(1.0, 0.0)
        }
    });
    let yc = DVector::from_fn(n, |k, _| Complex::new(y[k], 0.0));
    let gram = vand.adjoint() * &vand;
    let rhs = vand.adjoint() * &yc;
    let lu = gram.full_piv_lu();
    let amps = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SolverFailure("amplitude solve failed".into()))?;

    let recon = &vand * &amps;
    let mut misfit = 0.0;
    let mut scale = 0.0;
    for k in 0..n {
        let e = recon[k].re - y[k];
        misfit += e * e;
        scale += y[k] * y[k];
    }
    let fit_error = if scale > 0.0 {
        (misfit / scale).sqrt().min(1.0)
    } else {
        0.0
    };

    // Convert discrete poles to modes. Each conjugate pair is reported once
    // through its positive-frequency member; negligible-magnitude roots are
    // numerical artifacts of the rooting and carry no signal energy.
    let mut modes = Vec::new();
    for (i, z) in roots.iter().enumerate() {
        let zmag = z.norm();
        if zmag < 1e-8 {
            continue;
        }
        let im_tol = 1e-9 * (1.0 + zmag);
        if z.im < -im_tol {
            continue;
        }
        let s_re = zmag.ln() / signal.dt;
        let s_im = z.arg() / signal.dt;
        let s_mag = (s_re * s_re + s_im * s_im).sqrt();
        let damping_pct = if s_mag > 0.0 { -s_re / s_mag * 100.0 } else { 0.0 };
        let (frequency_hz, amplitude, phase) = if z.im > im_tol {
            (
                s_im.abs() / (2.0 * std::f64::consts::PI),
                2.0 * amps[i].norm(),
                amps[i].arg(),
            )
        } else {
            let c = amps[i].re;
            (0.0, c.abs(), if c >= 0.0 { 0.0 } else { std::f64::consts::PI })
        };
        modes.push(PronyMode {
            frequency_hz,
            damping_pct,
            amplitude,
            phase,
        });
    }
    modes.sort_by(|a, b| {
        b.amplitude
            .total_cmp(&a.amplitude)
            .then(a.frequency_hz.total_cmp(&b.frequency_hz))
    });

    Ok(RingdownEstimate { modes, fit_error })
}

/// Tries `prony_fit` from max_order down to 1 and returns the first fit whose
/// prediction matrix is acceptably conditioned. A signal of k pole pairs makes
/// every order above k numerically rank deficient, so stepping down lands on
/// the highest order the data supports.
pub fn prony_fit_auto(signal: &SampledSignal, max_order: usize) -> Result<RingdownEstimate> {
    if max_order < 1 {
        return Err(Error::InvalidArgument("model order must be >= 1".into()));
    }
    let mut last_err = None;
    for order in (1..=max_order).rev() {
        match prony_fit(signal, order) {
            Ok(est) => return Ok(est),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one order attempted"))
}

/// Damping (percent) of the largest-amplitude fitted mode within
/// `tolerance_hz` of the target frequency.
pub fn critical_mode_damping(
    estimate: &RingdownEstimate,
    target_hz: f64,
    tolerance_hz: f64,
) -> Result<f64> {
    estimate
        .modes
        .iter()
        .find(|m| (m.frequency_hz - target_hz).abs() <= tolerance_hz)
        .map(|m| m.damping_pct)
        .ok_or(Error::NoMatchingMode {
            target_hz,
            tolerance_hz,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{eig_real_modal, StateSpaceModel};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn damped_cosine(sigma: f64, f_hz: f64, amp: f64, phase: f64, dt: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                amp * (sigma * t).exp() * (2.0 * PI * f_hz * t + phase).cos()
            })
            .collect()
    }

    #[test]
    fn single_pair_frequency_and_damping_recovered() {
        let f = 0.564;
        let sigma = -0.1;
        let n = 500; // 10 s at 0.02 s
        let signal =
            SampledSignal::new(damped_cosine(sigma, f, 1.0, 0.0, 0.02, n), 0.02, 0.0).unwrap();
        let est = prony_fit(&signal, 1).unwrap();
        let mode = est.modes[0];
        let omega = 2.0 * PI * f;
        let zeta = -sigma / (sigma * sigma + omega * omega).sqrt();
        assert!((mode.frequency_hz - f).abs() <= 1e-4, "freq {}", mode.frequency_hz);
        assert!(
            (mode.damping_pct / 100.0 - zeta).abs() <= 1e-4,
            "zeta {} vs {zeta}",
            mode.damping_pct / 100.0
        );
        assert!((mode.amplitude - 1.0).abs() <= 1e-2);
        assert!(est.fit_error <= 1e-6);
    }

    #[test]
    fn undamped_cosine_has_zero_damping() {
        let signal = SampledSignal::new(
            damped_cosine(0.0, 0.45, 0.7, 0.3, 0.02, 600),
            0.02,
            0.0,
        )
        .unwrap();
        let est = prony_fit(&signal, 1).unwrap();
        assert!(est.modes[0].damping_pct.abs() <= 1e-6 * 100.0);
        assert!((est.modes[0].frequency_hz - 0.45).abs() <= 1e-6);
    }

    #[test]
    fn two_modes_recovered() {
        let a = damped_cosine(-0.15, 0.3, 1.0, 0.2, 0.05, 400);
        let b = damped_cosine(-0.05, 0.6, 0.6, -0.8, 0.05, 400);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let signal = SampledSignal::new(sum, 0.05, 0.0).unwrap();
        let est = prony_fit(&signal, 2).unwrap();
        assert_eq!(est.modes.len(), 2);
        let slow = est
            .modes
            .iter()
            .find(|m| (m.frequency_hz - 0.3).abs() < 0.1)
            .unwrap();
        let fast = est
            .modes
            .iter()
            .find(|m| (m.frequency_hz - 0.6).abs() < 0.1)
            .unwrap();
        let zeta_slow = 0.15 / (0.15f64.powi(2) + (2.0 * PI * 0.3).powi(2)).sqrt();
        let zeta_fast = 0.05 / (0.05f64.powi(2) + (2.0 * PI * 0.6).powi(2)).sqrt();
        assert!((slow.frequency_hz - 0.3).abs() <= 1e-3);
        assert!((fast.frequency_hz - 0.6).abs() <= 1e-3);
        assert!((slow.damping_pct / 100.0 - zeta_slow).abs() <= 1e-3);
        assert!((fast.damping_pct / 100.0 - zeta_fast).abs() <= 1e-3);
        assert!(slow.amplitude > fast.amplitude);
    }

    #[test]
    fn exact_recovery_of_three_pairs() {
        let dt = 0.05;
        let n = 600;
        let spec = [(-0.12, 0.327, 0.9, 0.1), (-0.33, 0.442, 0.7, -0.4), (-0.035, 0.564, 1.1, 0.9)];
        let mut sum = vec![0.0; n];
        for &(sigma, f, amp, ph) in &spec {
            for (k, v) in damped_cosine(sigma, f, amp, ph, dt, n).iter().enumerate() {
                sum[k] += v;
            }
        }
        let signal = SampledSignal::new(sum, dt, 0.0).unwrap();
        let est = prony_fit(&signal, 3).unwrap();
        assert_eq!(est.modes.len(), 3);
        for &(sigma, f, _, _) in &spec {
            let m = est
                .modes
                .iter()
                .find(|m| (m.frequency_hz - f).abs() < 0.05)
                .unwrap();
            let omega = 2.0 * PI * f;
            let s_mag = (sigma * sigma + omega * omega).sqrt();
            let fitted_sigma = -m.damping_pct / 100.0 * s_mag;
            // relative pole error
            assert!(((m.frequency_hz - f) * 2.0 * PI).hypot(fitted_sigma - sigma) / s_mag <= 1e-6);
        }
    }

    #[test]
    fn one_percent_noise_keeps_damping_within_ten_percent() {
        let sigma = -0.08_f64;
        let f = 0.5;
        let clean = damped_cosine(sigma, f, 1.0, 0.0, 0.05, 400);
        let rms = (clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noisy: Vec<f64> = clean
            .iter()
            .map(|v| v + 0.01 * rms * rng.gen_range(-1.732..1.732))
            .collect();
        let signal = SampledSignal::new(noisy, 0.05, 0.0).unwrap();
        let est = prony_fit(&signal, 1).unwrap();
        let omega = 2.0 * PI * f;
        let zeta = -sigma / (sigma * sigma + omega * omega).sqrt();
        let rel = (est.modes[0].damping_pct / 100.0 - zeta).abs() / zeta;
        assert!(rel <= 0.10, "relative damping error {rel}");
    }

    #[test]
    fn overfit_order_is_rejected_as_ill_conditioned() {
        let signal = SampledSignal::new(
            damped_cosine(-0.1, 0.564, 1.0, 0.0, 0.02, 500),
            0.02,
            0.0,
        )
        .unwrap();
        match prony_fit(&signal, 3) {
            Err(Error::IllConditioned { cond }) => assert!(cond > 1e12),
            other => panic!("expected IllConditioned, got {other:?}"),
        }
    }

    #[test]
    fn auto_fit_steps_down_to_supported_order() {
        let signal = SampledSignal::new(
            damped_cosine(-0.1, 0.564, 1.0, 0.0, 0.02, 500),
            0.02,
            0.0,
        )
        .unwrap();
        let est = prony_fit_auto(&signal, 4).unwrap();
        assert!((est.modes[0].frequency_hz - 0.564).abs() <= 1e-4);
    }

    #[test]
    fn short_signal_rejected_with_order_limit() {
        let signal = SampledSignal::new(vec![1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01], 0.1, 0.0).unwrap();
        match prony_fit(&signal, 2) {
            Err(Error::OrderTooLarge { requested, limit }) => {
                assert_eq!(requested, 2);
                assert_eq!(limit, 1);
            }
            other => panic!("expected OrderTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn critical_mode_selection_band_and_failure() {
        let est = RingdownEstimate {
            modes: vec![
                PronyMode {
                    frequency_hz: 0.9,
                    damping_pct: 8.0,
                    amplitude: 5.0,
                    phase: 0.0,
                },
                PronyMode {
                    frequency_hz: 0.56,
                    damping_pct: 1.2,
                    amplitude: 1.0,
                    phase: 0.0,
                },
            ],
        fit_error: 0.01,
        };
        // only the in-band mode counts, amplitude ordering notwithstanding
        let d = critical_mode_damping(&est, 0.564, 0.1).unwrap();
        assert_eq!(d, 1.2);
        match critical_mode_damping(&est, 2.0, 0.05) {
            Err(Error::NoMatchingMode { target_hz, .. }) => assert_eq!(target_hz, 2.0),
            other => panic!("expected NoMatchingMode, got {other:?}"),
        }
    }

    #[test]
    fn lti_ringdown_damping_matches_eigenvalues() {
        // Two oscillatory pairs, the slow one lightly damped; measure a mix.
        let sigma = -0.05_f64;
        let omega = 2.0 * PI * 0.5;
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                sigma, omega, 0.0, 0.0, //
                -omega, sigma, 0.0, 0.0, //
                0.0, 0.0, -0.4, 2.0 * PI * 1.3, //
                0.0, 0.0, -2.0 * PI * 1.3, -0.4,
            ],
        );
        let b = DMatrix::zeros(4, 1);
        let c = DMatrix::from_row_slice(1, 4, &[1.0, 0.3, 0.4, 0.1]);
        let mut model = StateSpaceModel::new(a, b, c).unwrap();
        let modal = eig_real_modal(&model).unwrap();
        model.set_state(DVector::from_vec(vec![1.0, 0.0, 0.6, 0.2])).unwrap();
        let dt = 0.02;
        let steps = 2000; // 40 s
        let mut ys = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (_, y) = model.simulate_step(&DVector::zeros(1), dt).unwrap();
            ys.push(y[0]);
        }
        let signal = SampledSignal::new(ys, dt, dt).unwrap();
        let windowed = signal.window_from(1.0).unwrap().decimate(5).unwrap();
        let est = prony_fit_auto(&windowed, 4).unwrap();
        let eig_pct = modal
            .modes
            .iter()
            .find(|m| (m.frequency_hz - 0.5).abs() < 0.05)
            .unwrap()
            .damping_ratio
            * 100.0;
        let prony_pct = critical_mode_damping(&est, 0.5, 0.1).unwrap();
        assert!(
            (prony_pct - eig_pct).abs() <= 0.1,
            "prony {prony_pct} vs eig {eig_pct}"
        );
    }

    #[test]
    fn window_and_decimate_track_time_base() {
        let signal = SampledSignal::new((0..100).map(|k| k as f64).collect(), 0.5, 2.0).unwrap();
        let w = signal.window_from(11.2).unwrap();
        assert_eq!(w.start_time, 11.5);
        assert_eq!(w.values[0], 19.0);
        let d = w.decimate(4).unwrap();
        assert_eq!(d.dt, 2.0);
        assert_eq!(d.values[1], 23.0);
    }
}
