//! Continuous-time LTI state-space models, real modal decomposition, and
//! exact fixed-step closed-loop integration.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

type CMatrix = DMatrix<Complex<f64>>;
type CVector = DVector<Complex<f64>>;

/// Continuous-time plant ẋ = Ax + Bu, y = Cx. No feedthrough: the output is
/// C·x exactly.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    a_matrix: DMatrix<f64>,
    b_matrix: DMatrix<f64>,
    c_matrix: DMatrix<f64>,
    state: DVector<f64>,
    zoh_cache: Option<ZohCache>,
}

#[derive(Debug, Clone)]
struct ZohCache {
    dt: f64,
    ad: DMatrix<f64>,
    bd: DMatrix<f64>,
}

/// Exact zero-order-hold discretization of (A, B) at step dt, via the matrix
/// exponential of the augmented [A B; 0 0] block.
fn zoh_discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    if n == 0 {
        return (DMatrix::zeros(0, 0), DMatrix::zeros(0, m));
    }
    if m == 0 {
        return ((a * dt).exp(), DMatrix::zeros(n, 0));
    }
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = (aug * dt).exp();
    let ad = e.view((0, 0), (n, n)).into_owned();
    let bd = e.view((0, n), (n, m)).into_owned();
    (ad, bd)
}

impl StateSpaceModel {
    /// Validates dimensional consistency; the initial state is zero.
    pub fn new(
        a_matrix: DMatrix<f64>,
        b_matrix: DMatrix<f64>,
        c_matrix: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a_matrix.nrows();
        if a_matrix.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a_matrix.nrows(),
                a_matrix.ncols()
            )));
        }
        if b_matrix.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows, expected {n}",
                b_matrix.nrows()
            )));
        }
        if c_matrix.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "C has {} columns, expected {n}",
                c_matrix.ncols()
            )));
        }
        let state = DVector::zeros(n);
        Ok(Self {
            a_matrix,
            b_matrix,
            c_matrix,
            state,
            zoh_cache: None,
        })
    }

    pub fn order(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.b_matrix.ncols()
    }

    pub fn num_outputs(&self) -> usize {
        self.c_matrix.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a_matrix
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b_matrix
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c_matrix
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn set_state(&mut self, x: DVector<f64>) -> Result<()> {
        if x.len() != self.order() {
            return Err(Error::DimensionMismatch(format!(
                "state has length {}, expected {}",
                x.len(),
                self.order()
            )));
        }
        self.state = x;
        Ok(())
    }

    pub fn output(&self) -> DVector<f64> {
        &self.c_matrix * &self.state
    }

    /// Advances the state one step under a zero-order-hold input and returns
    /// (new_state, output). The discretization is exact (matrix exponential)
    /// and cached per dt.
    pub fn simulate_step(
        &mut self,
        input: &DVector<f64>,
        dt: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if dt <= 0.0 {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if input.len() != self.num_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "input has length {}, expected {}",
                input.len(),
                self.num_inputs()
            )));
        }
        let needs_refresh = match &self.zoh_cache {
            Some(c) => c.dt != dt,
            None => true,
        };
        if needs_refresh {
            let (ad, bd) = zoh_discretize(&self.a_matrix, &self.b_matrix, dt);
            self.zoh_cache = Some(ZohCache { dt, ad, bd });
        }
        let cache = self.zoh_cache.as_ref().expect("zoh cache populated");
        let new_state = &cache.ad * &self.state + &cache.bd * input;
        if new_state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        self.state = new_state.clone();
        let output = &self.c_matrix * &self.state;
        Ok((new_state, output))
    }
}

/// One diagonal block of the modal form: a real eigenvalue (omega = 0) or a
/// complex pair sigma ± j·omega.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeRecord {
    pub sigma: f64,
    pub omega: f64,
    pub frequency_hz: f64,
    pub damping_ratio: f64,
    /// Row/column offset of this block inside the block-diagonal matrix.
    pub block_index: usize,
}

impl ModeRecord {
    fn new(sigma: f64, omega: f64, block_index: usize) -> Self {
        let mag = (sigma * sigma + omega * omega).sqrt();
        let damping_ratio = if mag > 0.0 { -sigma / mag } else { 0.0 };
        Self {
            sigma,
            omega,
            frequency_hz: omega / std::f64::consts::TAU,
            damping_ratio,
            block_index,
        }
    }

    pub fn block_size(&self) -> usize {
        if self.omega > 0.0 {
            2
        } else {
            1
        }
    }
}

/// Real modal form z = ψ·x with block-diagonal dynamics ż = Λz: 1×1 blocks for
/// real eigenvalues, [[σ, ω], [−ω, σ]] blocks for complex pairs.
#[derive(Debug, Clone)]
pub struct ModalRealization {
    pub lambda_matrix: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub modes: Vec<ModeRecord>,
    psi_inv: DMatrix<f64>,
}

impl ModalRealization {
    pub fn order(&self) -> usize {
        self.lambda_matrix.nrows()
    }

    /// The eigenvector-column matrix ψ⁻¹, kept exactly as constructed.
    pub fn psi_inv(&self) -> &DMatrix<f64> {
        &self.psi_inv
    }

    /// Sizes of the diagonal blocks, in order (1 for real, 2 for oscillatory).
    pub fn block_sizes(&self) -> Vec<usize> {
        self.modes.iter().map(ModeRecord::block_size).collect()
    }
}

fn complex_norm(v: &CVector) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Inverse iteration for the eigenvector of `ac` at eigenvalue `lambda`.
/// Deterministic: a fixed ladder of start vectors and shift perturbations is
/// tried until the residual target is met; the best candidate wins.
fn eigenvector_for(ac: &CMatrix, lambda: Complex<f64>, scale: f64) -> CVector {
    let n = ac.nrows();
    let target = 1e-11 * scale.max(1.0);
    let mut best: Option<(f64, CVector)> = None;
    for attempt in 0..=n {
        let start: CVector = if attempt == 0 {
            CVector::from_element(n, Complex::new(1.0, 0.0))
        } else {
            let mut e = CVector::zeros(n);
            e[attempt - 1] = Complex::new(1.0, 0.0);
            e
        };
        for round in 0..3 {
            let shift = lambda + Complex::new(1e-12 * scale.max(1.0) * round as f64, 0.0);
            let shifted = ac - CMatrix::identity(n, n) * shift;
            let lu = shifted.full_piv_lu();
            let mut v = start.clone();
            let nv = complex_norm(&v);
            v /= Complex::new(nv, 0.0);
            let mut ok = true;
            for _ in 0..4 {
                match lu.solve(&v) {
                    Some(w) => {
                        let nw = complex_norm(&w);
                        if !nw.is_finite() || nw == 0.0 {
                            ok = false;
                            break;
                        }
                        v = w / Complex::new(nw, 0.0);
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let residual = complex_norm(&(ac * &v - &v * lambda));
            if best.as_ref().map_or(true, |(r, _)| residual < *r) {
                best = Some((residual, v));
            }
            if best.as_ref().map(|(r, _)| *r <= target).unwrap_or(false) {
                break;
            }
        }
        if best.as_ref().map(|(r, _)| *r <= target).unwrap_or(false) {
            break;
        }
    }
    let (_, v) = best.expect("inverse iteration produced at least one candidate");
    normalize_eigenvector(v)
}

/// Unit norm, with the largest-magnitude component rotated to be real and
/// positive (ties broken by lowest index) so the result is unique.
fn normalize_eigenvector(mut v: CVector) -> CVector {
    let n = complex_norm(&v);
    v /= Complex::new(n, 0.0);
    let mut k = 0;
    let mut mag = 0.0;
    for (i, c) in v.iter().enumerate() {
        let m = c.norm();
        if m > mag + 1e-15 {
            mag = m;
            k = i;
        }
    }
    let pivot = v[k];
    let phase = pivot / Complex::new(pivot.norm(), 0.0);
    v * phase.conj()
}

/// Computes the real modal realization of the model's A matrix. Blocks are
/// ordered by ascending |ω| (real modes first), ties by ascending σ.
pub fn eig_real_modal(model: &StateSpaceModel) -> Result<ModalRealization> {
    let a = model.a();
    let n = a.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty system".into()));
    }
    let eigs = a.complex_eigenvalues();
    let scale = eigs.iter().map(|l| l.norm()).fold(0.0_f64, f64::max);
    let limit = 1e-9 * scale.max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let separation = (eigs[i] - eigs[j]).norm();
            if separation <= limit {
                return Err(Error::RepeatedEigenvalue { separation, limit });
            }
        }
    }

    let im_zero = 1e-12 * scale.max(1.0);
    let mut modes: Vec<(f64, f64)> = Vec::new(); // (sigma, omega)
    for l in eigs.iter() {
        if l.im.abs() <= im_zero {
            modes.push((l.re, 0.0));
        } else if l.im > 0.0 {
            modes.push((l.re, l.im));
        }
    }
    modes.sort_by(|x, y| {
        x.1.abs()
            .total_cmp(&y.1.abs())
            .then(x.0.total_cmp(&y.0))
    });

    let ac: CMatrix = a.map(|x| Complex::new(x, 0.0));
    let a_scale = a.norm().max(scale);
    let mut psi_inv = DMatrix::zeros(n, n);
    let mut lambda = DMatrix::zeros(n, n);
    let mut records = Vec::with_capacity(modes.len());
    let mut offset = 0usize;
    for &(sigma, omega) in &modes {
        let v = eigenvector_for(&ac, Complex::new(sigma, omega), a_scale);
        if omega == 0.0 {
            for r in 0..n {
                psi_inv[(r, offset)] = v[r].re;
            }
            // Real eigenvectors come back with negligible imaginary residue;
            // renormalize the real part so the column has unit norm.
            let col_norm = psi_inv.column(offset).norm();
            for r in 0..n {
                psi_inv[(r, offset)] /= col_norm;
            }
            lambda[(offset, offset)] = sigma;
            records.push(ModeRecord::new(sigma, 0.0, offset));
            offset += 1;
        } else {
            for r in 0..n {
                psi_inv[(r, offset)] = v[r].re;
                psi_inv[(r, offset + 1)] = v[r].im;
            }
            lambda[(offset, offset)] = sigma;
            lambda[(offset, offset + 1)] = omega;
            lambda[(offset + 1, offset)] = -omega;
            lambda[(offset + 1, offset + 1)] = sigma;
            records.push(ModeRecord::new(sigma, omega, offset));
            offset += 2;
        }
    }
    debug_assert_eq!(offset, n);

    let svd = psi_inv.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > 1e12 {
        return Err(Error::SingularTransform { cond });
    }
    let psi = psi_inv
        .clone()
        .try_inverse()
        .ok_or(Error::SingularTransform { cond })?;

    let residual = (&psi * a * &psi_inv - &lambda).norm() / lambda.norm();
    if residual > 1e-8 {
        return Err(Error::SolverFailure(format!(
            "modal reconstruction residual {residual:.3e} exceeds 1e-8"
        )));
    }

    Ok(ModalRealization {
        lambda_matrix: lambda,
        psi,
        modes: records,
        psi_inv,
    })
}

/// Dynamic output-feedback controller ẋ_k = A_k x_k + B_k y, v = C_k x_k + D_k y.
#[derive(Debug, Clone)]
pub struct DynamicController {
    a_k: DMatrix<f64>,
    b_k: DMatrix<f64>,
    c_k: DMatrix<f64>,
    d_k: DMatrix<f64>,
    state: DVector<f64>,
    zoh_cache: Option<ZohCache>,
}

impl DynamicController {
    pub fn new(
        a_k: DMatrix<f64>,
        b_k: DMatrix<f64>,
        c_k: DMatrix<f64>,
        d_k: DMatrix<f64>,
    ) -> Result<Self> {
        let nk = a_k.nrows();
        if a_k.ncols() != nk {
            return Err(Error::DimensionMismatch("A_k must be square".into()));
        }
        if b_k.nrows() != nk || c_k.ncols() != nk {
            return Err(Error::DimensionMismatch(
                "B_k rows and C_k columns must match the controller order".into(),
            ));
        }
        if d_k.nrows() != c_k.nrows() {
            return Err(Error::DimensionMismatch(
                "C_k and D_k must have the same number of rows".into(),
            ));
        }
        if d_k.ncols() != b_k.ncols() {
            return Err(Error::DimensionMismatch(
                "B_k and D_k must have the same number of inputs".into(),
            ));
        }
        let state = DVector::zeros(nk);
        Ok(Self {
            a_k,
            b_k,
            c_k,
            d_k,
            state,
            zoh_cache: None,
        })
    }

    /// Static gain v = D·y (controller order zero).
    pub fn static_gain(d_k: DMatrix<f64>) -> Self {
        let p = d_k.ncols();
        let n_out = d_k.nrows();
        Self {
            a_k: DMatrix::zeros(0, 0),
            b_k: DMatrix::zeros(0, p),
            c_k: DMatrix::zeros(n_out, 0),
            d_k,
            state: DVector::zeros(0),
            zoh_cache: None,
        }
    }

    pub fn order(&self) -> usize {
        self.a_k.nrows()
    }

    pub fn num_outputs(&self) -> usize {
        self.c_k.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.b_k.ncols()
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn reset_state(&mut self) {
        self.state.fill(0.0);
    }

    /// Advances the internal state one zero-order-hold step driven by the
    /// measurement, then emits v = C_k x_k + D_k y at the new state.
    pub fn controller_step(&mut self, measurement: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
        if dt <= 0.0 {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if measurement.len() != self.num_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "measurement has length {}, expected {}",
                measurement.len(),
                self.num_inputs()
            )));
        }
        if self.order() > 0 {
            let needs_refresh = match &self.zoh_cache {
                Some(c) => c.dt != dt,
                None => true,
            };
            if needs_refresh {
                let (ad, bd) = zoh_discretize(&self.a_k, &self.b_k, dt);
                self.zoh_cache = Some(ZohCache { dt, ad, bd });
            }
            let cache = self.zoh_cache.as_ref().expect("zoh cache populated");
            let new_state = &cache.ad * &self.state + &cache.bd * measurement;
            if new_state.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState);
            }
            self.state = new_state;
        }
        let v = &self.c_k * &self.state + &self.d_k * measurement;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        Ok(v)
    }
}

/// Block-diagonal state-feedback gain K that moves each targeted mode's real
/// part to −ζ·√(σ² + ω²) while keeping ω, so Λ − K has the requested damping.
/// Targets are (mode index, damping ratio) pairs; untargeted modes get a zero
/// block.
pub fn modal_state_feedback_gain(
    modal: &ModalRealization,
    targets: &[(usize, f64)],
) -> Result<DMatrix<f64>> {
    let n = modal.order();
    let mut k = DMatrix::zeros(n, n);
    for &(idx, zeta) in targets {
        let mode = modal
            .modes
            .get(idx)
            .ok_or_else(|| Error::InvalidTarget(format!("no mode with index {idx}")))?;
        if !(0.0 < zeta && zeta < 1.0) {
            return Err(Error::InvalidTarget(format!(
                "target damping {zeta} for mode {idx} must lie in (0, 1)"
            )));
        }
        let mag = (mode.sigma * mode.sigma + mode.omega * mode.omega).sqrt();
        let sigma_new = -zeta * mag;
        let shift = mode.sigma - sigma_new;
        let at = mode.block_index;
        k[(at, at)] = shift;
        if mode.block_size() == 2 {
            k[(at + 1, at + 1)] = shift;
        }
    }
    Ok(k)
}
