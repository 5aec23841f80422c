//! Sparse control allocation: distributes a modal virtual-control demand
//! across redundant actuators by solving a box-constrained QP per step, with
//! an ℓ1 term for sparsity, a slew memory term, and a quadratic penalty tying
//! the achieved modal effect to the demand. Also the fixed pseudo-inverse
//! baseline.
//!
//! Per step, with effectiveness E = ψB_r, the cost
//!
//! ```text
//!   ρ²‖W_v (E u − v)‖² + ‖W_u u‖² + ‖W_s (u − u_prev)‖² + λ‖u‖₁
//! ```
//!
//! is rewritten over q = [u⁺; u⁻], u = u⁺ − u⁻, 0 ≤ q ≤ [u_max; −u_min],
//! where the two quadratic regularizers collapse into ‖W(u − u_d)‖² plus a
//! constant.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qp::{self, QpProblem};

/// Immutable per-scenario allocation setup. Weight matrices are diagonal and
/// stored as their diagonals.
#[derive(Debug, Clone)]
pub struct AllocatorConfig {
    w_u: DVector<f64>,
    w_s: DVector<f64>,
    w_v: DVector<f64>,
    lambda: f64,
    rho: f64,
    u_min: DVector<f64>,
    u_max: DVector<f64>,
    t_s: f64,
    effectiveness: DMatrix<f64>,
}

/// The allocator knobs that exist before the plant's effectiveness matrix is
/// known; combined into an AllocatorConfig once ψB_r is available.
#[derive(Debug, Clone)]
pub struct AllocatorParams {
    pub w_u: DVector<f64>,
    pub w_s: DVector<f64>,
    pub w_v: DVector<f64>,
    pub lambda: f64,
    pub rho: f64,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub t_s: f64,
}

impl AllocatorConfig {
    /// Validates weights, bounds, and the effectiveness matrix. `block_sizes`
    /// describes the modal block structure (1 or 2 per block) so that w_v
    /// entries can be checked for per-block grouping: both entries of an
    /// oscillatory block must carry the same weight.
    pub fn new(
        params: AllocatorParams,
        effectiveness: DMatrix<f64>,
        block_sizes: &[usize],
    ) -> Result<Self> {
        let n = effectiveness.nrows();
        let m = effectiveness.ncols();
        if params.w_u.len() != m || params.w_s.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "w_u/w_s have lengths {}/{}, expected {m}",
                params.w_u.len(),
                params.w_s.len()
            )));
        }
        if params.w_v.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "w_v has length {}, expected {n}",
                params.w_v.len()
            )));
        }
        if params.u_min.len() != m || params.u_max.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "bounds have lengths {}/{}, expected {m}",
                params.u_min.len(),
                params.u_max.len()
            )));
        }
        if params.w_u.iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument(
                "w_u entries must be strictly positive".into(),
            ));
        }
        if params.w_s.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument(
                "w_s entries must be non-negative".into(),
            ));
        }
        if params.w_v.iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument(
                "w_v entries must be strictly positive".into(),
            ));
        }
        if params.lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        if params.rho <= 0.0 {
            return Err(Error::InvalidArgument("rho must be > 0".into()));
        }
        if params.t_s <= 0.0 {
            return Err(Error::InvalidArgument("ts must be > 0".into()));
        }
        for i in 0..m {
            if params.u_min[i] > 0.0 || params.u_max[i] < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "bounds must straddle zero, actuator {i} has [{}, {}]",
                    params.u_min[i], params.u_max[i]
                )));
            }
        }
        let total: usize = block_sizes.iter().sum();
        if total != n {
            return Err(Error::DimensionMismatch(format!(
                "block sizes sum to {total}, expected {n}"
            )));
        }
        let mut at = 0;
        for (bi, &size) in block_sizes.iter().enumerate() {
            if size == 2 {
                let (a, b) = (params.w_v[at], params.w_v[at + 1]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                    return Err(Error::InvalidArgument(format!(
                        "w_v entries {a} and {b} of oscillatory block {bi} must match"
                    )));
                }
            }
            at += size;
        }
        if m < n {
            return Err(Error::InvalidArgument(format!(
                "need at least as many actuators as modal states, got m={m} < n={n}"
            )));
        }
        let svd = effectiveness.clone().svd(false, false);
        let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > smax * 1e-10)
            .count();
        if rank < n {
            return Err(Error::RankDeficient { rank, required: n });
        }
        Ok(Self {
            w_u: params.w_u,
            w_s: params.w_s,
            w_v: params.w_v,
            lambda: params.lambda,
            rho: params.rho,
            u_min: params.u_min,
            u_max: params.u_max,
            t_s: params.t_s,
            effectiveness,
        })
    }

    pub fn num_modal_states(&self) -> usize {
        self.effectiveness.nrows()
    }

    pub fn num_actuators(&self) -> usize {
        self.effectiveness.ncols()
    }

    pub fn effectiveness(&self) -> &DMatrix<f64> {
        &self.effectiveness
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn t_s(&self) -> f64 {
        self.t_s
    }

    pub fn u_min(&self) -> &DVector<f64> {
        &self.u_min
    }

    pub fn u_max(&self) -> &DVector<f64> {
        &self.u_max
    }

    pub fn w_u(&self) -> &DVector<f64> {
        &self.w_u
    }

    pub fn w_s(&self) -> &DVector<f64> {
        &self.w_s
    }

    pub fn w_v(&self) -> &DVector<f64> {
        &self.w_v
    }
}

/// Mutable per-run allocator memory: the previous command and the actuator
/// health mask.
#[derive(Debug, Clone)]
pub struct AllocatorState {
    u_prev: DVector<f64>,
    status: Vec<bool>,
}

impl AllocatorState {
    pub fn new(m: usize) -> Self {
        Self {
            u_prev: DVector::zeros(m),
            status: vec![true; m],
        }
    }

    pub fn u_prev(&self) -> &DVector<f64> {
        &self.u_prev
    }

    pub fn status(&self) -> &[bool] {
        &self.status
    }

    pub fn is_healthy(&self, idx: usize) -> bool {
        self.status[idx]
    }

    /// Marks an actuator failed or recovered. Failing zeroes its memory so
    /// the slew term doesn't chase a command the hardware never held.
    pub fn set_failed(&mut self, idx: usize, failed: bool) -> Result<()> {
        if idx >= self.status.len() {
            return Err(Error::InvalidArgument(format!(
                "actuator index {idx} out of range (m={})",
                self.status.len()
            )));
        }
        self.status[idx] = !failed;
        if failed {
            self.u_prev[idx] = 0.0;
        }
        Ok(())
    }

    pub fn set_u_prev(&mut self, u: DVector<f64>) -> Result<()> {
        if u.len() != self.u_prev.len() {
            return Err(Error::DimensionMismatch(format!(
                "u_prev has length {}, expected {}",
                u.len(),
                self.u_prev.len()
            )));
        }
        self.u_prev = u;
        Ok(())
    }
}

/// Collapses the command and slew regularizers into a single quadratic around
/// the drift target: u_d = W_s²(W_u² + W_s²)⁻¹ u_prev and W = (W_u² + W_s²)^½,
/// both diagonal and computed elementwise. Returns (u_d, diagonal of W).
pub fn derive_cost_terms(
    cfg: &AllocatorConfig,
    state: &AllocatorState,
) -> (DVector<f64>, DVector<f64>) {
    let m = cfg.num_actuators();
    let mut u_d = DVector::zeros(m);
    let mut w = DVector::zeros(m);
    for i in 0..m {
        let wu2 = cfg.w_u[i] * cfg.w_u[i];
        let ws2 = cfg.w_s[i] * cfg.w_s[i];
        u_d[i] = ws2 / (wu2 + ws2) * state.u_prev[i];
        w[i] = (wu2 + ws2).sqrt();
    }
    (u_d, w)
}

/// Assembles the box QP over q = [u⁺; u⁻] for one allocation step:
/// stack 𝒜 = [ρ·W_v·E; W], ℬ = [ρ·W_v·v; W·u_d], Hessian blocks ±𝒜ᵀ𝒜,
/// linear term ∓2𝒜ᵀℬ + λ·1, bounds 0 ≤ q ≤ [u_max; −u_min] with failed
/// actuators pinned by zeroed bounds.
pub fn build_qp(
    cfg: &AllocatorConfig,
    state: &AllocatorState,
    v_t: &DVector<f64>,
) -> Result<QpProblem> {
    let n = cfg.num_modal_states();
    let m = cfg.num_actuators();
    if v_t.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "virtual control has length {}, expected {n}",
            v_t.len()
        )));
    }
    if v_t.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("virtual control must be finite".into()));
    }
    if state.status.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "state tracks {} actuators, config has {m}",
            state.status.len()
        )));
    }
    let (u_d, w) = derive_cost_terms(cfg, state);
    let (stacked, target) = stacked_system(cfg, &u_d, &w, v_t);

    let gram = stacked.transpose() * &stacked;
    let atb = stacked.transpose() * &target;

    let d = 2 * m;
    let mut hessian = DMatrix::zeros(d, d);
    hessian.view_mut((0, 0), (m, m)).copy_from(&gram);
    hessian.view_mut((m, m), (m, m)).copy_from(&gram);
    hessian.view_mut((0, m), (m, m)).copy_from(&(-&gram));
    hessian.view_mut((m, 0), (m, m)).copy_from(&(-&gram));

    let mut linear = DVector::from_element(d, cfg.lambda);
    for i in 0..m {
        linear[i] += -2.0 * atb[i];
        linear[m + i] += 2.0 * atb[i];
    }

    let lower = DVector::zeros(d);
    let mut upper = DVector::zeros(d);
    for i in 0..m {
        if state.status[i] {
            upper[i] = cfg.u_max[i];
            upper[m + i] = -cfg.u_min[i];
        }
    }
    QpProblem::new(hessian, linear, lower, upper)
}

/// The stacked least-squares pair 𝒜 = [ρ·W_v·E; W], ℬ = [ρ·W_v·v; W·u_d]
/// whose normal equations the allocation QP minimizes.
fn stacked_system(
    cfg: &AllocatorConfig,
    u_d: &DVector<f64>,
    w: &DVector<f64>,
    v_t: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = cfg.num_modal_states();
    let m = cfg.num_actuators();
    let mut stacked = DMatrix::zeros(n + m, m);
    for r in 0..n {
        for c in 0..m {
            stacked[(r, c)] = cfg.rho * cfg.w_v[r] * cfg.effectiveness[(r, c)];
        }
    }
    for i in 0..m {
        stacked[(n + i, i)] = w[i];
    }
    let mut target = DVector::zeros(n + m);
    for r in 0..n {
        target[r] = cfg.rho * cfg.w_v[r] * v_t[r];
    }
    for i in 0..m {
        target[n + i] = w[i] * u_d[i];
    }
    (stacked, target)
}

/// Cost of a command in stacked form, ‖𝒜u − ℬ‖² + λ‖u‖₁. Evaluating on the
/// tall system avoids the squared conditioning of the Hessian, so comparisons
/// stay meaningful at large ρ.
fn stacked_cost(
    stacked: &DMatrix<f64>,
    target: &DVector<f64>,
    lambda: f64,
    u: &DVector<f64>,
) -> f64 {
    let r = stacked * u - target;
    r.norm_squared() + lambda * u.iter().map(|x| x.abs()).sum::<f64>()
}

/// Re-solves the free actuators of a solved allocation step directly against
/// the stacked system. The QP settles which actuators sit at a bound, at zero,
/// or run free with which sign, but its Hessian squares the conditioning of 𝒜,
/// which at large ρ costs the regularization block most of its digits. On the
/// face the QP picked, the exact stationary point is a least-squares solve in
/// 𝒜 itself, well conditioned enough to recover them. Returns None (keep the
/// QP point) when the polished point leaves the face or fails to lower cost.
fn polish_on_face(
    cfg: &AllocatorConfig,
    state: &AllocatorState,
    stacked: &DMatrix<f64>,
    target: &DVector<f64>,
    u: &DVector<f64>,
) -> Option<DVector<f64>> {
    let m = cfg.num_actuators();
    let mut fixed = u.clone();
    let mut free: Vec<usize> = Vec::new();
    let mut signs: Vec<f64> = Vec::new();
    for i in 0..m {
        let span = cfg.u_max[i] - cfg.u_min[i];
        let snap = 1e-9 * (1.0 + span);
        if !state.status[i] {
            fixed[i] = 0.0;
        } else if u[i] >= cfg.u_max[i] - snap {
            fixed[i] = cfg.u_max[i];
        } else if u[i] <= cfg.u_min[i] + snap {
            fixed[i] = cfg.u_min[i];
        } else if cfg.lambda > 0.0 && u[i].abs() <= 1e-12 {
            fixed[i] = 0.0;
        } else {
            free.push(i);
            signs.push(if u[i] > 0.0 {
                1.0
            } else if u[i] < 0.0 {
                -1.0
            } else {
                0.0
            });
        }
    }
    if free.is_empty() {
        return None;
    }

    let rows = stacked.nrows();
    let a_free = DMatrix::from_fn(rows, free.len(), |r, k| stacked[(r, free[k])]);
    let mut rhs = target.clone();
    for i in 0..m {
        if !free.contains(&i) {
            rhs -= stacked.column(i) * fixed[i];
        }
    }
    let svd = a_free.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if !(smax > 0.0) {
        return None;
    }
    let cutoff = smax * 1e-13;
    let u_mat = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let mut coeffs = u_mat.transpose() * &rhs;
    for (k, c) in coeffs.iter_mut().enumerate() {
        let s = svd.singular_values[k];
        *c = if s > cutoff { *c / s } else { 0.0 };
    }
    let mut u_free = vt.transpose() * coeffs;
    if cfg.lambda > 0.0 {
        let s_vec = DVector::from_vec(signs.clone());
        let mut c2 = vt * &s_vec;
        for (k, c) in c2.iter_mut().enumerate() {
            let s = svd.singular_values[k];
            *c = if s > cutoff { *c / (s * s) } else { 0.0 };
        }
        u_free -= vt.transpose() * c2 * (cfg.lambda / 2.0);
    }

    let mut polished = fixed;
    for (k, &i) in free.iter().enumerate() {
        let span = cfg.u_max[i] - cfg.u_min[i];
        let snap = 1e-9 * (1.0 + span);
        let val = u_free[k];
        if val > cfg.u_max[i] + snap || val < cfg.u_min[i] - snap {
            return None;
        }
        if cfg.lambda > 0.0 && val * signs[k] < -1e-12 {
            return None;
        }
        polished[i] = val.clamp(cfg.u_min[i], cfg.u_max[i]);
    }
    let before = stacked_cost(stacked, target, cfg.lambda, u);
    let after = stacked_cost(stacked, target, cfg.lambda, &polished);
    if after <= before + 1e-9 * (1.0 + before.abs()) {
        Some(polished)
    } else {
        None
    }
}

/// One allocation step: solve the QP, recombine u = u⁺ − u⁻ (clamping
/// microscopic complementarity overlap), polish the free actuators on the
/// face the QP selected, record u as the new previous command. The command
/// respects the bounds exactly and failed actuators emit exactly zero.
pub fn allocate(
    cfg: &AllocatorConfig,
    state: &mut AllocatorState,
    v_t: &DVector<f64>,
) -> Result<DVector<f64>> {
    let problem = build_qp(cfg, state, v_t)?;
    let m = cfg.num_actuators();

    // Rescale the objective so the fixed tolerance is meaningful for any ρ;
    // scaling H and g together leaves the minimizer unchanged.
    let scale = 1.0 / (1.0 + problem.hessian().amax());
    let scaled = QpProblem::new(
        problem.hessian() * scale,
        problem.linear() * scale,
        problem.lower().clone(),
        problem.upper().clone(),
    )?;
    let solution = match qp::solve(&scaled, qp::DEFAULT_TOL, qp::default_max_iter(2 * m)) {
        Ok(s) => s,
        Err(Error::MaxIterations {
            iterations,
            kkt_residual,
            ..
        }) => {
            return Err(Error::SolverFailure(format!(
                "allocation QP stopped after {iterations} iterations with KKT residual {kkt_residual:.3e}"
            )))
        }
        Err(e) => return Err(e),
    };

    let mut u_pos = DVector::zeros(m);
    let mut u_neg = DVector::zeros(m);
    for i in 0..m {
        u_pos[i] = solution.point[i];
        u_neg[i] = solution.point[m + i];
        let overlap = u_pos[i].min(u_neg[i]);
        if overlap > 0.0 && overlap <= 1e-12 {
            u_pos[i] -= overlap;
            u_neg[i] -= overlap;
        }
    }
    let mut u = u_pos - u_neg;
    let (u_d, w) = derive_cost_terms(cfg, state);
    let (stacked, target) = stacked_system(cfg, &u_d, &w, v_t);
    if let Some(polished) = polish_on_face(cfg, state, &stacked, &target, &u) {
        u = polished;
    }
    state.u_prev = u.clone();
    Ok(u)
}

/// Fixed-allocation baseline: the Moore-Penrose pseudo-inverse distribution
/// u = E†·v. Deliberately ignores bounds and failures; callers saturate the
/// result downstream.
pub fn fixed_allocate(effectiveness: &DMatrix<f64>, v_t: &DVector<f64>) -> Result<DVector<f64>> {
    let n = effectiveness.nrows();
    if v_t.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "virtual control has length {}, expected {n}",
            v_t.len()
        )));
    }
    let svd = effectiveness.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = smax * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < n {
        return Err(Error::RankDeficient { rank, required: n });
    }
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let mut coeffs = u.transpose() * v_t;
    for (i, c) in coeffs.iter_mut().enumerate() {
        *c /= svd.singular_values[i];
    }
    Ok(vt.transpose() * coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_params(m: usize, n: usize, lambda: f64, rho: f64) -> AllocatorParams {
        AllocatorParams {
            w_u: DVector::from_element(m, 1.0),
            w_s: DVector::from_element(m, 2.0),
            w_v: DVector::from_element(n, 1.0),
            lambda,
            rho,
            u_min: DVector::from_element(m, -0.4),
            u_max: DVector::from_element(m, 0.4),
            t_s: 0.02,
        }
    }

    fn wide_effectiveness(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn simple_cfg(m: usize, lambda: f64, rho: f64) -> AllocatorConfig {
        // n = 1, all-ones effectiveness row.
        AllocatorConfig::new(
            uniform_params(m, 1, lambda, rho),
            DMatrix::from_element(1, m, 1.0),
            &[1],
        )
        .unwrap()
    }

    #[test]
    fn cost_terms_match_hand_computation() {
        let cfg = simple_cfg(3, 0.0, 100.0); // w_u = 1, w_s = 2
        let mut state = AllocatorState::new(3);
        state
            .set_u_prev(DVector::from_row_slice(&[0.1, -0.2, 0.3]))
            .unwrap();
        let (u_d, w) = derive_cost_terms(&cfg, &state);
        for i in 0..3 {
            assert_abs_diff_eq!(u_d[i], 0.8 * state.u_prev()[i], epsilon = 1e-15);
            assert_abs_diff_eq!(w[i], 5.0_f64.sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_slew_weight_drops_memory() {
        let mut params = uniform_params(3, 1, 0.0, 100.0);
        params.w_s = DVector::zeros(3);
        let cfg = AllocatorConfig::new(params, DMatrix::from_element(1, 3, 1.0), &[1]).unwrap();
        let mut state = AllocatorState::new(3);
        state
            .set_u_prev(DVector::from_row_slice(&[0.1, 0.2, 0.3]))
            .unwrap();
        let (u_d, w) = derive_cost_terms(&cfg, &state);
        assert!(u_d.amax() == 0.0);
        for i in 0..3 {
            assert_abs_diff_eq!(w[i], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_memory_gives_zero_drift_target() {
        let cfg = simple_cfg(3, 0.0, 100.0);
        let state = AllocatorState::new(3);
        let (u_d, _) = derive_cost_terms(&cfg, &state);
        assert!(u_d.amax() == 0.0);
    }

    #[test]
    fn single_actuator_qp_structure() {
        // m = n = 1, unit weights and effectiveness, ρ = 1, λ = 0, v = 1:
        // stacked system [1; 1] against [1; 0], Hessian blocks ±2, u = 1/2.
        let mut params = uniform_params(1, 1, 0.0, 1.0);
        params.w_s = DVector::zeros(1);
        params.u_min = DVector::from_element(1, -10.0);
        params.u_max = DVector::from_element(1, 10.0);
        let cfg = AllocatorConfig::new(params, DMatrix::from_element(1, 1, 1.0), &[1]).unwrap();
        let state = AllocatorState::new(1);
        let problem = build_qp(&cfg, &state, &DVector::from_row_slice(&[1.0])).unwrap();
        assert_abs_diff_eq!(problem.hessian()[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(problem.hessian()[(0, 1)], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(problem.linear()[0], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(problem.linear()[1], 2.0, epsilon = 1e-15);

        let sol = qp::solve(&problem, qp::DEFAULT_TOL, 100).unwrap();
        assert_abs_diff_eq!(sol.point[0] - sol.point[1], 0.5, epsilon = 1e-9);
        let oracle = qp::solve_exact_oracle(&problem).unwrap();
        assert_abs_diff_eq!(oracle.point[0] - oracle.point[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn all_failed_pins_command_to_zero() {
        let cfg = simple_cfg(3, 1.0, 100.0);
        let mut state = AllocatorState::new(3);
        for i in 0..3 {
            state.set_failed(i, true).unwrap();
        }
        let problem = build_qp(&cfg, &state, &DVector::from_row_slice(&[0.3])).unwrap();
        assert!(problem.upper().amax() == 0.0);
        let u = allocate(&cfg, &mut state, &DVector::from_row_slice(&[0.3])).unwrap();
        assert!(u.amax() == 0.0);
    }

    #[test]
    fn lambda_shifts_every_linear_coefficient_by_one() {
        let cfg0 = simple_cfg(3, 0.0, 100.0);
        let cfg1 = simple_cfg(3, 1.0, 100.0);
        let state = AllocatorState::new(3);
        let v = DVector::from_row_slice(&[0.2]);
        let p0 = build_qp(&cfg0, &state, &v).unwrap();
        let p1 = build_qp(&cfg1, &state, &v).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(p1.linear()[i] - p0.linear()[i], 1.0, epsilon = 1e-15);
        }
        assert_eq!(p0.hessian(), p1.hessian());
    }

    #[test]
    fn zero_demand_zero_memory_yields_zero_command() {
        let cfg = simple_cfg(4, 1.0, 100.0);
        let mut state = AllocatorState::new(4);
        let u = allocate(&cfg, &mut state, &DVector::zeros(1)).unwrap();
        assert!(u.amax() == 0.0);
        assert!(state.u_prev().amax() == 0.0);
    }

    #[test]
    fn symmetric_demand_splits_evenly() {
        let mut params = uniform_params(3, 1, 0.0, 1e6);
        params.w_s = DVector::zeros(3);
        let cfg = AllocatorConfig::new(params, DMatrix::from_element(1, 3, 1.0), &[1]).unwrap();
        let mut state = AllocatorState::new(3);
        let u = allocate(&cfg, &mut state, &DVector::from_row_slice(&[0.3])).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(u[i], 0.1, epsilon = 1e-5);
        }
    }

    #[test]
    fn failures_shift_demand_to_healthy_actuator() {
        let mut params = uniform_params(3, 1, 0.0, 1e6);
        params.w_s = DVector::zeros(3);
        let cfg = AllocatorConfig::new(params, DMatrix::from_element(1, 3, 1.0), &[1]).unwrap();
        let mut state = AllocatorState::new(3);
        state.set_failed(1, true).unwrap();
        state.set_failed(2, true).unwrap();
        let u = allocate(&cfg, &mut state, &DVector::from_row_slice(&[0.3])).unwrap();
        assert_abs_diff_eq!(u[0], 0.3, epsilon = 1e-5);
        assert_eq!(u[1], 0.0);
        assert_eq!(u[2], 0.0);
    }

    #[test]
    fn quadratic_simplification_is_exact_up_to_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..20 {
            let m = 4;
            let mut params = uniform_params(m, 2, 0.0, 10.0);
            params.w_u = DVector::from_fn(m, |_, _| rng.gen_range(0.2..3.0));
            params.w_s = DVector::from_fn(m, |_, _| rng.gen_range(0.0..3.0));
            let eff = wide_effectiveness(&mut rng, 2, m);
            let cfg = AllocatorConfig::new(params, eff, &[1, 1]).unwrap();
            let mut state = AllocatorState::new(m);
            state
                .set_u_prev(DVector::from_fn(m, |_, _| rng.gen_range(-0.4..0.4)))
                .unwrap();
            let (u_d, w) = derive_cost_terms(&cfg, &state);

            let original = |u: &DVector<f64>| -> f64 {
                let mut total = 0.0;
                for i in 0..m {
                    let cu = cfg.w_u()[i] * u[i];
                    let cs = cfg.w_s()[i] * (u[i] - state.u_prev()[i]);
                    total += cu * cu + cs * cs;
                }
                total
            };
            let collapsed = |u: &DVector<f64>| -> f64 {
                let mut total = 0.0;
                for i in 0..m {
                    let c = w[i] * (u[i] - u_d[i]);
                    total += c * c;
                }
                total
            };
            let u1 = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let u2 = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let lhs = original(&u1) - original(&u2);
            let rhs = collapsed(&u1) - collapsed(&u2);
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn l1_path_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for _ in 0..5 {
            let eff = wide_effectiveness(&mut rng, 2, 6);
            let v = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5));
            let mut last = f64::INFINITY;
            for &lambda in &[0.0, 0.5, 1.0, 2.0, 5.0] {
                let cfg = AllocatorConfig::new(
                    uniform_params(6, 2, lambda, 100.0),
                    eff.clone(),
                    &[1, 1],
                )
                .unwrap();
                let mut state = AllocatorState::new(6);
                let u = allocate(&cfg, &mut state, &v).unwrap();
                let l1: f64 = u.iter().map(|x| x.abs()).sum();
                assert!(
                    l1 <= last + 1e-9,
                    "ℓ1 norm grew from {last} to {l1} at λ={lambda}"
                );
                last = l1;
            }
        }
    }

    #[test]
    fn penalty_tightens_residual_and_reaches_exact_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let eff = wide_effectiveness(&mut rng, 2, 6);
        let v = DVector::from_fn(2, |_, _| rng.gen_range(-0.3..0.3));
        let residual_at = |rho: f64| -> (f64, DVector<f64>) {
            let mut params = uniform_params(6, 2, 0.0, rho);
            params.u_min = DVector::from_element(6, -100.0);
            params.u_max = DVector::from_element(6, 100.0);
            let cfg = AllocatorConfig::new(params, eff.clone(), &[1, 1]).unwrap();
            let mut state = AllocatorState::new(6);
            let u = allocate(&cfg, &mut state, &v).unwrap();
            ((&eff * &u - &v).norm(), u)
        };
        let mut last = f64::INFINITY;
        for &rho in &[1.0, 10.0, 100.0, 1000.0] {
            let (r, _) = residual_at(rho);
            assert!(r <= last + 1e-9, "residual grew to {r} at ρ={rho}");
            last = r;
        }
        // At ρ = 1e6 the command agrees with the exact weighted
        // minimum-effort solution of E·u = v (u_d = 0 here, W = √5·I, so it
        // is the plain minimum-norm solution).
        let (_, u_hi) = residual_at(1e6);
        let exact = fixed_allocate(&eff, &v).unwrap();
        assert!((u_hi - exact).amax() <= 1e-4);
    }

    /// Component of x orthogonal to the row space of eff, i.e. x − E†(E·x).
    fn null_space_part(eff: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
        let back = fixed_allocate(eff, &(eff * x)).unwrap();
        x - back
    }

    #[test]
    fn null_space_moves_leave_penalty_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let eff = wide_effectiveness(&mut rng, 2, 5);
        let x = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let z = null_space_part(&eff, &x);
        assert!((&eff * &z).amax() <= 1e-12);
        let v = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5));
        let u = DVector::from_fn(5, |_, _| rng.gen_range(-0.5..0.5));
        let w_v = DVector::from_element(2, 1.3);
        let penalty = |u: &DVector<f64>| -> f64 {
            let r = &eff * u - &v;
            let mut total = 0.0;
            for i in 0..2 {
                let c = w_v[i] * r[i];
                total += c * c;
            }
            total
        };
        let moved = &u + &z * 0.7;
        assert!((penalty(&u) - penalty(&moved)).abs() <= 1e-10 * (1.0 + penalty(&u)));
    }

    #[test]
    fn commands_always_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        for _ in 0..20 {
            let eff = wide_effectiveness(&mut rng, 2, 5);
            let cfg =
                AllocatorConfig::new(uniform_params(5, 2, 1.0, 1000.0), eff, &[1, 1]).unwrap();
            let mut state = AllocatorState::new(5);
            // Demand far beyond actuator capacity forces saturation.
            let v = DVector::from_fn(2, |_, _| rng.gen_range(-20.0..20.0));
            let u = allocate(&cfg, &mut state, &v).unwrap();
            for i in 0..5 {
                assert!(u[i] >= cfg.u_min()[i] && u[i] <= cfg.u_max()[i]);
            }
        }
    }

    #[test]
    fn split_is_complementary_under_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let eff = wide_effectiveness(&mut rng, 2, 5);
        let cfg = AllocatorConfig::new(uniform_params(5, 2, 1.0, 100.0), eff, &[1, 1]).unwrap();
        let state = AllocatorState::new(5);
        let v = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5));
        let problem = build_qp(&cfg, &state, &v).unwrap();
        let scale = 1.0 / (1.0 + problem.hessian().amax());
        let scaled = QpProblem::new(
            problem.hessian() * scale,
            problem.linear() * scale,
            problem.lower().clone(),
            problem.upper().clone(),
        )
        .unwrap();
        let sol = qp::solve(&scaled, qp::DEFAULT_TOL, 500).unwrap();
        for i in 0..5 {
            assert!(sol.point[i] * sol.point[5 + i] <= 1e-10);
        }
    }

    #[test]
    fn allocate_updates_previous_command() {
        let cfg = simple_cfg(3, 1.0, 100.0);
        let mut state = AllocatorState::new(3);
        let u = allocate(&cfg, &mut state, &DVector::from_row_slice(&[0.25])).unwrap();
        assert_eq!(state.u_prev(), &u);
    }

    #[test]
    fn pinv_splits_demand_minimum_norm() {
        let eff = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let u = fixed_allocate(&eff, &DVector::from_row_slice(&[1.0])).unwrap();
        assert_abs_diff_eq!(u[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 0.5, epsilon = 1e-12);
        let z = fixed_allocate(&eff, &DVector::zeros(1)).unwrap();
        assert!(z.amax() == 0.0);
    }

    #[test]
    fn pinv_tracks_exactly_and_stays_in_row_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let eff = wide_effectiveness(&mut rng, 2, 5);
        let v = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let u = fixed_allocate(&eff, &v).unwrap();
        assert!((&eff * &u - &v).amax() <= 1e-10);
        // Row-space membership: u ⟂ every null-space direction.
        for _ in 0..5 {
            let x = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
            let z = null_space_part(&eff, &x);
            assert!(z.dot(&u).abs() <= 1e-10);
        }
    }

    #[test]
    fn rank_deficiency_rejected() {
        let eff = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(matches!(
            fixed_allocate(&eff, &DVector::from_row_slice(&[1.0, 1.0])),
            Err(Error::RankDeficient { .. })
        ));
        assert!(matches!(
            AllocatorConfig::new(uniform_params(3, 2, 0.0, 100.0), eff, &[1, 1]),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn config_validation_catches_bad_inputs() {
        let eff = DMatrix::from_element(1, 3, 1.0);
        let mut params = uniform_params(3, 1, 0.0, 100.0);
        params.u_min = DVector::from_element(3, 0.1); // does not straddle zero
        assert!(matches!(
            AllocatorConfig::new(params, eff.clone(), &[1]),
            Err(Error::InvalidArgument(_))
        ));

        let params = uniform_params(3, 1, -1.0, 100.0);
        assert!(matches!(
            AllocatorConfig::new(params, eff.clone(), &[1]),
            Err(Error::InvalidArgument(_))
        ));

        // Oscillatory block with mismatched w_v pair.
        let mut params = uniform_params(4, 2, 0.0, 100.0);
        params.w_v = DVector::from_row_slice(&[1.0, 2.0]);
        let eff2 = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.0, 0.5, 0.0, 1.0, 0.5, 1.0]);
        assert!(matches!(
            AllocatorConfig::new(params, eff2, &[2]),
            Err(Error::InvalidArgument(_))
        ));
    }
}
