//! Deterministic active-set solver for convex box-constrained quadratic
//! programs, plus an exhaustive small-instance oracle.
//!
//! Problems are stated as
//!
//! ```text
//!     minimize   f(x) = xᵀ H x + gᵀ x
//!     subject to l <= x <= u
//! ```
//!
//! with H symmetric positive semidefinite, possibly singular. The gradient is
//! 2Hx + g. Optimality is certified by the projected gradient: interior
//! coordinates need |grad_i| <= tol, coordinates at the lower bound need
//! grad_i >= -tol, coordinates at the upper bound need grad_i <= tol.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default projected-gradient tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Default iteration cap, scaled by problem dimension.
pub fn default_max_iter(dim: usize) -> usize {
    50 * dim.max(1)
}

/// A box-constrained QP instance.
#[derive(Debug, Clone)]
pub struct QpProblem {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl QpProblem {
    /// Validates symmetry (within 1e-12, scale-relative), dimensions, and
    /// bound ordering.
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let d = linear.len();
        if hessian.nrows() != d || hessian.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "hessian is {}x{}, linear term has length {d}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        if lower.len() != d || upper.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "bounds have lengths {} and {}, expected {d}",
                lower.len(),
                upper.len()
            )));
        }
        let scale = 1.0 + hessian.amax();
        for i in 0..d {
            for j in (i + 1)..d {
                if (hessian[(i, j)] - hessian[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "hessian not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        for i in 0..d {
            if lower[i] > upper[i] {
                return Err(Error::InvalidArgument(format!(
                    "lower[{i}] = {} exceeds upper[{i}] = {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self {
            hessian,
            linear,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// f(x) = xᵀHx + gᵀx
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.hessian * x)[(0, 0)] + self.linear.dot(x)
    }

    /// grad f(x) = 2Hx + g
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hessian * x * 2.0 + &self.linear
    }

    /// Projected gradient: zero where the bound blocks descent.
    pub fn projected_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let grad = self.gradient(x);
        DVector::from_fn(self.dim(), |i, _| {
            let g = grad[i];
            if x[i] <= self.lower[i] {
                g.min(0.0)
            } else if x[i] >= self.upper[i] {
                g.max(0.0)
            } else {
                g
            }
        })
    }

    fn clamp(&self, x: &mut DVector<f64>) {
        for i in 0..self.dim() {
            x[i] = x[i].max(self.lower[i]).min(self.upper[i]);
        }
    }
}

/// Solver output with a KKT certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub point: DVector<f64>,
    pub objective: f64,
    /// Euclidean norm of the projected gradient at `point`.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Sorted indices of coordinates sitting exactly on a bound.
    pub active_set: Vec<usize>,
}

fn active_indices(problem: &QpProblem, x: &DVector<f64>) -> Vec<usize> {
    (0..problem.dim())
        .filter(|&i| x[i] <= problem.lower()[i] || x[i] >= problem.upper()[i])
        .collect()
}

fn finish(problem: &QpProblem, x: DVector<f64>, iterations: usize) -> QpSolution {
    let kkt_residual = problem.projected_gradient(&x).norm();
    QpSolution {
        objective: problem.objective(&x),
        kkt_residual,
        iterations,
        active_set: active_indices(problem, &x),
        point: x,
    }
}

/// Minimum-norm least-squares solve of `m y = rhs` with a relative singular
/// value cutoff, plus iterative refinement so badly conditioned subsystems
/// still resolve to near machine precision. Used for the (possibly singular)
/// free-variable subsystems.
fn pinv_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = smax * 1e-13;
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let apply_pinv = |b: &DVector<f64>| -> DVector<f64> {
        let mut coeffs = u.transpose() * b;
        for (i, c) in coeffs.iter_mut().enumerate() {
            let s = svd.singular_values[i];
            *c = if s > cutoff { *c / s } else { 0.0 };
        }
        vt.transpose() * coeffs
    };
    let mut y = apply_pinv(rhs);
    for _ in 0..2 {
        let residual = rhs - m * &y;
        y += apply_pinv(&residual);
    }
    y
}

/// Solve the box QP with a primal active-set method warm-started by a
/// gradient-projection (Cauchy point) sweep. Deterministic: multiplier ties
/// break toward the lowest index and every other choice is index-ordered.
pub fn solve(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    if tol <= 0.0 {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    let d = problem.dim();
    if d == 0 {
        return Ok(QpSolution {
            point: DVector::zeros(0),
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
            active_set: vec![],
        });
    }

    // Diagonal entries are curvatures along coordinate directions, which are
    // always feasible directions in a box; a clearly negative one disproves
    // convexity before any iteration runs.
    let diag_scale = 1.0 + problem.hessian().amax();
    for i in 0..d {
        let h_ii = problem.hessian()[(i, i)];
        if h_ii < -1e-10 * diag_scale {
            return Err(Error::NonConvex { curvature: h_ii });
        }
    }

    let mut x = DVector::zeros(d);
    problem.clamp(&mut x);
    cauchy_point(problem, &mut x);

    // Working set: coordinates held at a bound. Entries record which bound.
    #[derive(Clone, Copy, PartialEq)]
    enum Hold {
        Free,
        Lower,
        Upper,
    }
    let mut hold = vec![Hold::Free; d];
    for i in 0..d {
        if x[i] <= problem.lower()[i] {
            hold[i] = Hold::Lower;
        } else if x[i] >= problem.upper()[i] {
            hold[i] = Hold::Upper;
        }
    }

    let mut iterations = 0usize;
    let mut f_best = f64::INFINITY;
    let mut no_improvement = 0usize;
    while iterations < max_iter {
        iterations += 1;
        let grad = problem.gradient(&x);
        let free: Vec<usize> = (0..d).filter(|&i| hold[i] == Hold::Free).collect();

        // Subspace step over the free coordinates: H_ff p = -grad_f / 2.
        let nf = free.len();
        let mut step = DVector::zeros(d);
        let mut grad_free_norm = 0.0f64;
        if nf > 0 {
            let h_ff = DMatrix::from_fn(nf, nf, |r, c| problem.hessian()[(free[r], free[c])]);
            let rhs = DVector::from_fn(nf, |r, _| -grad[free[r]] / 2.0);
            grad_free_norm = rhs.norm() * 2.0;
            let p = pinv_solve(&h_ff, &rhs);
            let curvature = (p.transpose() * &h_ff * &p)[(0, 0)];
            if curvature < -1e-10 * (1.0 + p.norm_squared()) {
                return Err(Error::NonConvex { curvature });
            }
            for (k, &i) in free.iter().enumerate() {
                step[i] = p[k];
            }
        }

        // Treat the face as exhausted when the step shrinks to roundoff or
        // when several iterations in a row fail to lower the objective (a
        // near-singular subsystem can alternate between two points whose step
        // size alone never betrays the cycle).
        let f_now = problem.objective(&x);
        if f_now < f_best {
            f_best = f_now;
            no_improvement = 0;
        } else {
            no_improvement += 1;
        }
        let step_norm = step.amax();
        let stall = step_norm <= 1e-13 * (1.0 + x.amax()) || no_improvement >= 3;

        if stall && grad_free_norm > tol {
            // Inconsistent subsystem (gradient component in the Hessian null
            // space): fall back to steepest descent on the free coordinates.
            for &i in &free {
                step[i] = -grad[i];
            }
        } else if stall {
            // Subspace-stationary: examine bound multipliers; release the most
            // violated coordinate, lowest index on ties.
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..d {
                let mu = match hold[i] {
                    Hold::Lower => grad[i],
                    Hold::Upper => -grad[i],
                    Hold::Free => continue,
                };
                if problem.lower()[i] == problem.upper()[i] {
                    continue; // pinned coordinate can never move
                }
                if mu < -tol && worst.map_or(true, |(_, w)| mu < w) {
                    worst = Some((i, mu));
                }
            }
            match worst {
                Some((i, _)) => {
                    hold[i] = Hold::Free;
                    continue;
                }
                None => return Ok(finish(problem, x, iterations)),
            }
        }

        // Line search along `step`, capped by the free coordinates' bounds.
        let slope = grad.dot(&step);
        if slope >= 0.0 {
            break; // no descent left; the post-loop KKT check decides
        }
        let curvature = (step.transpose() * problem.hessian() * &step)[(0, 0)];
        let alpha_star = if curvature > 1e-14 * step.norm_squared() {
            -slope / (2.0 * curvature)
        } else {
            f64::INFINITY
        };
        let mut alpha_max = f64::INFINITY;
        for i in 0..d {
            let s = step[i];
            if s > 0.0 {
                alpha_max = alpha_max.min((problem.upper()[i] - x[i]) / s);
            } else if s < 0.0 {
                alpha_max = alpha_max.min((problem.lower()[i] - x[i]) / s);
            }
        }
        let alpha = alpha_star.min(alpha_max).max(0.0);
        if !alpha.is_finite() {
            // Unbounded descent direction inside an unbounded box.
            let best = finish(problem, x, iterations);
            return Err(Error::MaxIterations {
                iterations,
                kkt_residual: best.kkt_residual,
                best_point: best.point.iter().cloned().collect(),
                best_objective: best.objective,
            });
        }

        x += alpha * &step;
        problem.clamp(&mut x);
        // Snap coordinates that reached a bound and add them to the working
        // set so the next subspace solve excludes them.
        for i in 0..d {
            if hold[i] != Hold::Free {
                continue;
            }
            let span = (problem.upper()[i] - problem.lower()[i]).abs();
            let snap = 1e-12 * (1.0 + span);
            if x[i] - problem.lower()[i] <= snap {
                x[i] = problem.lower()[i];
                hold[i] = Hold::Lower;
            } else if problem.upper()[i] - x[i] <= snap {
                x[i] = problem.upper()[i];
                hold[i] = Hold::Upper;
            }
        }
    }

    let best = finish(problem, x, iterations);
    if best.kkt_residual <= tol {
        return Ok(best);
    }
    Err(Error::MaxIterations {
        iterations,
        kkt_residual: best.kkt_residual,
        best_point: best.point.iter().cloned().collect(),
        best_objective: best.objective,
    })
}

/// Exact projected-search Cauchy point: walk the piecewise-linear projected
/// steepest-descent path segment by segment until the 1-D minimizer falls
/// inside a segment.
fn cauchy_point(problem: &QpProblem, x: &mut DVector<f64>) {
    let d = problem.dim();
    let grad = problem.gradient(x);
    let mut dir = DVector::from_fn(d, |i, _| {
        let g: f64 = grad[i];
        if (x[i] <= problem.lower()[i] && g > 0.0) || (x[i] >= problem.upper()[i] && g < 0.0) {
            0.0
        } else {
            -g
        }
    });
    for _segment in 0..d {
        if dir.amax() == 0.0 {
            return;
        }
        let grad_here = problem.gradient(x);
        let slope = grad_here.dot(&dir);
        if slope >= 0.0 {
            return;
        }
        let curvature = (dir.transpose() * problem.hessian() * &dir)[(0, 0)];
        let t_star = if curvature > 0.0 {
            -slope / (2.0 * curvature)
        } else {
            f64::INFINITY
        };
        // Nearest breakpoint along the remaining direction.
        let mut t_break = f64::INFINITY;
        for i in 0..d {
            let s = dir[i];
            let t = if s > 0.0 {
                (problem.upper()[i] - x[i]) / s
            } else if s < 0.0 {
                (problem.lower()[i] - x[i]) / s
            } else {
                continue;
            };
            t_break = t_break.min(t);
        }
        if t_star <= t_break {
            if t_star.is_finite() {
                *x += t_star * &dir;
                problem.clamp(x);
            }
            return;
        }
        if !t_break.is_finite() {
            return; // unbounded linear descent: leave to the main loop
        }
        *x += t_break * &dir;
        problem.clamp(x);
        // Freeze every coordinate that just hit its bound.
        for i in 0..d {
            if dir[i] != 0.0
                && (x[i] <= problem.lower()[i] + 1e-14 * (1.0 + problem.lower()[i].abs())
                    || x[i] >= problem.upper()[i] - 1e-14 * (1.0 + problem.upper()[i].abs()))
            {
                let s = dir[i];
                if (s < 0.0 && x[i] <= problem.lower()[i] + 1e-12)
                    || (s > 0.0 && x[i] >= problem.upper()[i] - 1e-12)
                {
                    dir[i] = 0.0;
                }
            }
        }
    }
}

/// Exhaustive oracle for d <= 8: every variable is enumerated as free, at its
/// lower bound, or at its upper bound; each restriction is solved by least
/// squares and the best feasible candidate wins.
pub fn solve_exact_oracle(problem: &QpProblem) -> Result<QpSolution> {
    let d = problem.dim();
    if d > 8 {
        return Err(Error::DimensionTooLarge(d));
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut assignments = vec![0u8; d]; // 0 free, 1 lower, 2 upper
    let total = 3usize.pow(d as u32);
    'outer: for code in 0..total {
        let mut c = code;
        for slot in assignments.iter_mut() {
            *slot = (c % 3) as u8;
            c /= 3;
        }
        let mut x = DVector::zeros(d);
        let mut free = Vec::new();
        for i in 0..d {
            match assignments[i] {
                1 => {
                    if !problem.lower()[i].is_finite() {
                        continue 'outer;
                    }
                    x[i] = problem.lower()[i];
                }
                2 => {
                    if !problem.upper()[i].is_finite() {
                        continue 'outer;
                    }
                    x[i] = problem.upper()[i];
                }
                _ => free.push(i),
            }
        }
        if !free.is_empty() {
            let nf = free.len();
            let h_ff = DMatrix::from_fn(nf, nf, |r, c| problem.hessian()[(free[r], free[c])]);
            let mut rhs = DVector::from_fn(nf, |r, _| -problem.linear()[free[r]] / 2.0);
            for (r, &i) in free.iter().enumerate() {
                for j in 0..d {
                    if assignments[j] != 0 {
                        rhs[r] -= problem.hessian()[(i, j)] * x[j];
                    }
                }
            }
            let sol = pinv_solve(&h_ff, &rhs);
            for (k, &i) in free.iter().enumerate() {
                let v = sol[k];
                let slack = 1e-10 * (1.0 + v.abs());
                if v < problem.lower()[i] - slack || v > problem.upper()[i] + slack {
                    continue 'outer;
                }
                x[i] = v.max(problem.lower()[i]).min(problem.upper()[i]);
            }
        }
        let obj = problem.objective(&x);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    let (_, x) = best.ok_or_else(|| {
        Error::SolverFailure("oracle found no feasible candidate (unbounded box?)".into())
    })?;
    Ok(finish(problem, x, total))
}
