//! Gramians, Hankel singular values, and balanced truncation.
//!
//! The Lyapunov solver is a direct Bartels-Stewart-style method: real Schur
//! form, block back-substitution over the quasi-triangular factor, small
//! Kronecker systems for the 1×1/2×2 diagonal blocks.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::StateSpaceModel;

fn max_real_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn require_hurwitz(a: &DMatrix<f64>) -> Result<()> {
    let max_real = max_real_eigenvalue(a);
    if max_real >= 0.0 {
        return Err(Error::NotHurwitz { max_real });
    }
    Ok(())
}

/// Boundaries of the 1×1/2×2 diagonal blocks of a real quasi-triangular
/// Schur factor: returns the start offsets plus a final sentinel equal to n.
fn schur_block_starts(t: &DMatrix<f64>) -> Vec<usize> {
    let n = t.nrows();
    let scale = 1.0 + t.amax();
    let mut starts = vec![];
    let mut i = 0;
    while i < n {
        starts.push(i);
        if i + 1 < n && t[(i + 1, i)].abs() > 1e-14 * scale {
            i += 2;
        } else {
            i += 1;
        }
    }
    starts.push(n);
    starts
}

/// Solves A·P + P·Aᵀ + Q = 0 for symmetric Q and Hurwitz A.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let q_scale = 1.0 + q.amax();
    for i in 0..n {
        for j in (i + 1)..n {
            if (q[(i, j)] - q[(j, i)]).abs() > 1e-10 * q_scale {
                return Err(Error::InvalidArgument(format!(
                    "Q not symmetric at ({i},{j})"
                )));
            }
        }
    }
    require_hurwitz(a)?;

    let (u, t) = a.clone().schur().unpack();
    let c = -(u.transpose() * q * &u); // T·Y + Y·Tᵀ = C
    let starts = schur_block_starts(&t);
    let nb = starts.len() - 1;
    let block = |idx: usize| (starts[idx], starts[idx + 1] - starts[idx]);

    let mut y = DMatrix::zeros(n, n);
    for bj in (0..nb).rev() {
        let (j0, jc) = block(bj);
        for bi in (0..nb).rev() {
            let (i0, ir) = block(bi);
            // RHS = C_ij − Σ_{k>i} T_ik Y_kj − Σ_{l>j} Y_il T_jlᵀ
            let mut rhs = c.view((i0, j0), (ir, jc)).into_owned();
            if i0 + ir < n {
                let t_tail = t.view((i0, i0 + ir), (ir, n - i0 - ir));
                let y_tail = y.view((i0 + ir, j0), (n - i0 - ir, jc));
                rhs -= t_tail * y_tail;
            }
            if j0 + jc < n {
                let y_row = y.view((i0, j0 + jc), (ir, n - j0 - jc));
                let t_row = t.view((j0, j0 + jc), (jc, n - j0 - jc));
                rhs -= y_row * t_row.transpose();
            }
            // Kronecker system (I⊗T_ii + T_jj⊗I)·vec(Y_ij) = vec(RHS).
            let t_ii = t.view((i0, i0), (ir, ir)).into_owned();
            let t_jj = t.view((j0, j0), (jc, jc)).into_owned();
            let dim = ir * jc;
            let mut k = DMatrix::zeros(dim, dim);
            for col in 0..jc {
                for row in 0..ir {
                    let r_idx = col * ir + row;
                    for row2 in 0..ir {
                        k[(r_idx, col * ir + row2)] += t_ii[(row, row2)];
                    }
                    for col2 in 0..jc {
                        k[(r_idx, col2 * ir + row)] += t_jj[(col, col2)];
                    }
                }
            }
            let vec_rhs = DVector::from_fn(dim, |idx, _| rhs[(idx % ir, idx / ir)]);
            let sol = k
                .lu()
                .solve(&vec_rhs)
                .ok_or_else(|| Error::SolverFailure("singular Sylvester block".into()))?;
            for col in 0..jc {
                for row in 0..ir {
                    y[(i0 + row, j0 + col)] = sol[col * ir + row];
                }
            }
        }
    }

    let p = &u * y * u.transpose();
    Ok((&p + p.transpose()) * 0.5)
}

/// Symmetric PSD square-root factor: P = Z·Zᵀ, with any small negative
/// eigenvalues from roundoff clamped to zero.
fn psd_factor(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = p.clone().symmetric_eigen();
    let n = p.nrows();
    let mut z = eig.eigenvectors;
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            z[(i, j)] *= s;
        }
    }
    z
}

pub fn controllability_gramian(model: &StateSpaceModel) -> Result<DMatrix<f64>> {
    solve_lyapunov(model.a(), &(model.b() * model.b().transpose()))
}

pub fn observability_gramian(model: &StateSpaceModel) -> Result<DMatrix<f64>> {
    solve_lyapunov(
        &model.a().transpose(),
        &(model.c().transpose() * model.c()),
    )
}

/// Hankel singular values with the order suggested by their decay.
#[derive(Debug, Clone)]
pub struct HankelSpectrum {
    /// Sorted descending, all non-negative.
    pub values: Vec<f64>,
    /// Smallest order r with values[r]/values[0] below the default 1e-2
    /// threshold (the full order when the spectrum never decays that far).
    pub suggested_order: usize,
}

pub const DEFAULT_ORDER_THRESHOLD: f64 = 1e-2;

impl HankelSpectrum {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        let suggested_order = order_for_threshold(&values, DEFAULT_ORDER_THRESHOLD);
        Self {
            values,
            suggested_order,
        }
    }

    pub fn order_for_threshold(&self, threshold: f64) -> usize {
        order_for_threshold(&self.values, threshold)
    }
}

fn order_for_threshold(values: &[f64], threshold: f64) -> usize {
    let n = values.len();
    if n == 0 || values[0] <= 0.0 {
        return n;
    }
    for r in 1..n {
        if values[r] / values[0] < threshold {
            return r;
        }
    }
    n
}

pub fn hankel_singular_values(model: &StateSpaceModel) -> Result<HankelSpectrum> {
    let p = controllability_gramian(model)?;
    let q = observability_gramian(model)?;
    let z_c = psd_factor(&p);
    let z_o = psd_factor(&q);
    let svd = (z_o.transpose() * z_c).svd(false, false);
    Ok(HankelSpectrum::from_values(
        svd.singular_values.iter().cloned().collect(),
    ))
}

/// Oblique projection onto and back from the balanced reduced coordinates:
/// x_r = to_reduced · x and x ≈ from_reduced · x_r, with
/// to_reduced · from_reduced = I.
#[derive(Debug, Clone)]
pub struct ReductionMaps {
    pub to_reduced: DMatrix<f64>,
    pub from_reduced: DMatrix<f64>,
    pub spectrum: HankelSpectrum,
}

/// Square-root balanced truncation to the requested order.
pub fn balanced_truncate_with_maps(
    model: &StateSpaceModel,
    order: usize,
) -> Result<(StateSpaceModel, ReductionMaps)> {
    let n = model.order();
    if order < 1 || order > n {
        return Err(Error::OrderTooLarge {
            requested: order,
            limit: n,
        });
    }
    let p = controllability_gramian(model)?;
    let q = observability_gramian(model)?;
    let z_c = psd_factor(&p);
    let z_o = psd_factor(&q);
    let svd = (z_o.transpose() * &z_c).svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let values: Vec<f64> = idx.iter().map(|&k| svd.singular_values[k]).collect();
    let rank_floor = values[0] * 1e-13;
    let rank = values.iter().filter(|&&s| s > rank_floor).count();
    if rank < order {
        return Err(Error::RankDeficient {
            rank,
            required: order,
        });
    }

    let mut from_reduced = DMatrix::zeros(n, order); // T_r = Z_c V_r Σ_r^{-1/2}
    let mut to_reduced = DMatrix::zeros(order, n); // L_r = Σ_r^{-1/2} U_rᵀ Z_oᵀ
    for (col, &k) in idx.iter().take(order).enumerate() {
        let s_inv_sqrt = 1.0 / svd.singular_values[k].sqrt();
        let v_k = vt.row(k).transpose();
        let t_col = &z_c * v_k * s_inv_sqrt;
        from_reduced.set_column(col, &t_col);
        let u_k = u.column(k);
        let l_row = (u_k.transpose() * z_o.transpose()) * s_inv_sqrt;
        to_reduced.set_row(col, &l_row);
    }

    let a_r = &to_reduced * model.a() * &from_reduced;
    let b_r = &to_reduced * model.b();
    let c_r = model.c() * &from_reduced;
    let reduced = StateSpaceModel::new(a_r, b_r, c_r)?;
    Ok((
        reduced,
        ReductionMaps {
            to_reduced,
            from_reduced,
            spectrum: HankelSpectrum::from_values(values),
        },
    ))
}

pub fn balanced_truncate(model: &StateSpaceModel, order: usize) -> Result<StateSpaceModel> {
    balanced_truncate_with_maps(model, order).map(|(m, _)| m)
}

/// Transfer matrix G(jω) = C (jωI − A)⁻¹ B.
pub fn frequency_response(model: &StateSpaceModel, omega: f64) -> DMatrix<Complex<f64>> {
    let n = model.order();
    let ac: DMatrix<Complex<f64>> = model.a().map(|x| Complex::new(x, 0.0));
    let shifted = DMatrix::<Complex<f64>>::identity(n, n) * Complex::new(0.0, omega) - ac;
    let bc: DMatrix<Complex<f64>> = model.b().map(|x| Complex::new(x, 0.0));
    let cc: DMatrix<Complex<f64>> = model.c().map(|x| Complex::new(x, 0.0));
    let x = shifted
        .full_piv_lu()
        .solve(&bc)
        .expect("resolvent is nonsingular at jω for Hurwitz A");
    cc * x
}

/// Largest singular value of the response deviation at ω.
pub fn response_gap(a: &StateSpaceModel, b: &StateSpaceModel, omega: f64) -> f64 {
    let g = frequency_response(a, omega) - frequency_response(b, omega);
    g.svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}
