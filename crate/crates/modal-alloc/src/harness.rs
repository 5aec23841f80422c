//! Closed-loop scenario engine: full-order plant, model reduction, modal
//! feedback, allocation, saturation, and fault injection in a fixed-step
//! loop, plus a seeded synthetic benchmark plant and a failure-fraction
//! sweep. Damping is graded by Prony analysis of the measured output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::allocator::{allocate, fixed_allocate, AllocatorConfig, AllocatorParams, AllocatorState};
use crate::error::{Error, Result};
use crate::lti::{
    eig_real_modal, modal_state_feedback_gain, DynamicController, ModalRealization,
    StateSpaceModel,
};
use crate::reduction::balanced_truncate_with_maps;
use crate::ringdown::{critical_mode_damping, prony_fit_auto, SampledSignal};

/// How the virtual control demand is turned into actuator commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationMode {
    Sparse,
    Fixed,
    None,
}

/// Damping controller in the loop: either modal state feedback v = -Kz with
/// per-mode damping targets addressed by frequency, or user-supplied dynamic
/// output feedback.
#[derive(Debug, Clone)]
pub enum ControllerSpec {
    ModalDamping { targets: Vec<(f64, f64)> },
    Dynamic(DynamicController),
}

/// Disturbance that starts the ringdown: either an explicit initial state or
/// an impulse along the critical mode's eigenvector, the magnitude standing
/// in for fault severity.
#[derive(Debug, Clone)]
pub enum Disturbance {
    CriticalModeImpulse { magnitude: f64 },
    InitialState(DVector<f64>),
}

/// One actuator outage window; the actuator is failed for
/// fail_time <= t < recover_time.
#[derive(Debug, Clone, Copy)]
pub struct FaultEvent {
    pub actuator: usize,
    pub fail_time: f64,
    pub recover_time: f64,
}

/// A complete closed-loop experiment description.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub plant: StateSpaceModel,
    pub reduced_order: usize,
    pub controller: ControllerSpec,
    pub allocator_params: AllocatorParams,
    pub allocation_mode: AllocationMode,
    pub disturbance: Disturbance,
    pub fault_schedule: Vec<FaultEvent>,
    pub t_end: f64,
    pub critical_hz: f64,
}

/// Time series and summary metrics of one scenario run. Matrices hold one
/// row per step.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub time: Vec<f64>,
    pub outputs: DMatrix<f64>,
    pub virtual_controls: DMatrix<f64>,
    pub commands: DMatrix<f64>,
    pub critical_damping_pct: Option<f64>,
    pub command_l1: Vec<f64>,
    pub nonzero_counts: Vec<usize>,
    pub saturation_events: usize,
}

/// One fitted mode of the benchmark plant.
#[derive(Debug, Clone, Copy)]
pub struct ModeSpec {
    pub frequency_hz: f64,
    pub damping_pct: f64,
}

/// What the benchmark generator promises about its plant.
#[derive(Debug, Clone)]
pub struct BenchmarkMeta {
    pub critical_hz: f64,
    pub critical_damping_pct: f64,
    pub modes: Vec<ModeSpec>,
    pub recommended_order: usize,
}

/// One failure-fraction row of a sweep: Prony damping of the critical mode
/// under each allocation mode, plus which actuators were failed.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub fraction: f64,
    pub failed: Vec<usize>,
    pub sparse_damping_pct: f64,
    pub fixed_damping_pct: f64,
    pub none_damping_pct: f64,
}

/// The three inter-area-style modes the benchmark ships with; the third is
/// the poorly damped critical mode.
pub fn default_mode_specs() -> Vec<ModeSpec> {
    vec![
        ModeSpec {
            frequency_hz: 0.327,
            damping_pct: 6.99,
        },
        ModeSpec {
            frequency_hz: 0.442,
            damping_pct: 11.62,
        },
        ModeSpec {
            frequency_hz: 0.564,
            damping_pct: 0.98,
        },
    ]
}

/// Allocator defaults used by the benchmark scenario: unit command weight,
/// double slew weight, lambda = 1, rho = 100, 0.02 s step, +-0.4 pu bounds.
pub fn default_allocator_params(m: usize, n: usize) -> AllocatorParams {
    AllocatorParams {
        w_u: DVector::from_element(m, 1.0),
        w_s: DVector::from_element(m, 2.0),
        w_v: DVector::from_element(n, 1.0),
        lambda: 1.0,
        rho: 100.0,
        u_min: DVector::from_element(m, -0.4),
        u_max: DVector::from_element(m, 0.4),
        t_s: 0.02,
    }
}

const STATE_OVERFLOW: f64 = 1e9;

fn continuous_pole(spec: &ModeSpec) -> (f64, f64) {
    let zeta = spec.damping_pct / 100.0;
    let omega = std::f64::consts::TAU * spec.frequency_hz;
    let sigma = -zeta / (1.0 - zeta * zeta).sqrt() * omega;
    (sigma, omega)
}

/// Builds the seeded synthetic benchmark plant: the requested oscillatory
/// modes plus two heavily damped spillover pairs, seeded random actuator
/// columns rescaled so every column's authority over the critical pair is
/// capped (no single actuator can buy the damping target inside the command
/// bounds), and a measurement row that sees the critical mode strongest.
pub fn make_benchmark(
    seed: u64,
    modes: &[ModeSpec],
    m_actuators: usize,
) -> Result<(StateSpaceModel, BenchmarkMeta)> {
    if modes.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one mode".into()));
    }
    let mode_count = modes.len();
    if m_actuators <= 2 * mode_count {
        return Err(Error::InsufficientRedundancy {
            required: 2 * mode_count,
            actual: m_actuators,
            modes: mode_count,
        });
    }
    for (i, s) in modes.iter().enumerate() {
        if !(s.frequency_hz > 0.0) || !(s.damping_pct > 0.0) || s.damping_pct >= 100.0 {
            return Err(Error::InvalidArgument(format!(
                "mode {i} must have positive frequency and damping in (0, 100)%"
            )));
        }
    }

    let spillover = [
        ModeSpec {
            frequency_hz: 1.3,
            damping_pct: 28.0,
        },
        ModeSpec {
            frequency_hz: 2.2,
            damping_pct: 45.0,
        },
    ];
    let n = 2 * (mode_count + spillover.len());
    let mut a = DMatrix::zeros(n, n);
    for (i, spec) in modes.iter().chain(spillover.iter()).enumerate() {
        let (sigma, omega) = continuous_pole(spec);
        let at = 2 * i;
        a[(at, at)] = sigma;
        a[(at, at + 1)] = omega;
        a[(at + 1, at)] = -omega;
        a[(at + 1, at + 1)] = sigma;
    }

    let crit_idx = (0..mode_count)
        .min_by(|&i, &j| modes[i].damping_pct.total_cmp(&modes[j].damping_pct))
        .expect("non-empty modes");
    let crit_rows = [2 * crit_idx, 2 * crit_idx + 1];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b: DMatrix<f64> = DMatrix::zeros(n, m_actuators);
    for r in 0..n {
        let amp = if r < 2 * mode_count { 1.0 } else { 0.2 };
        for c in 0..m_actuators {
            b[(r, c)] = amp * rng.gen_range(-1.0..1.0);
        }
    }
    const CRITICAL_AUTHORITY_CAP: f64 = 0.45;
    for c in 0..m_actuators {
        let crit_norm = (b[(crit_rows[0], c)].powi(2) + b[(crit_rows[1], c)].powi(2)).sqrt();
        if crit_norm < 1e-6 {
            return Err(Error::SolverFailure(format!(
                "seed {seed} produced an actuator column {c} blind to the critical mode"
            )));
        }
        let scale = CRITICAL_AUTHORITY_CAP / crit_norm;
        for r in 0..n {
            b[(r, c)] *= scale;
        }
    }

    let mut c_row = DMatrix::zeros(1, n);
    for i in 0..mode_count {
        let base = if i == crit_idx { 1.0 } else { 0.3 * 0.8_f64.powi(i as i32) };
        c_row[(0, 2 * i)] = base;
        c_row[(0, 2 * i + 1)] = 0.35 * base;
    }
    for (k, _) in spillover.iter().enumerate() {
        c_row[(0, 2 * (mode_count + k))] = 0.04 / (k + 1) as f64;
    }

    let plant = StateSpaceModel::new(a, b, c_row)?;
    let meta = BenchmarkMeta {
        critical_hz: modes[crit_idx].frequency_hz,
        critical_damping_pct: modes[crit_idx].damping_pct,
        modes: modes.to_vec(),
        recommended_order: 2 * mode_count,
    };
    Ok((plant, meta))
}

/// The default benchmark experiment: seeded plant, modal feedback targeting
/// 8% damping on the critical mode, impulse disturbance of the given
/// magnitude, 20 s horizon.
pub fn benchmark_scenario(
    seed: u64,
    mode: AllocationMode,
    disturbance_magnitude: f64,
    fault_schedule: Vec<FaultEvent>,
) -> Result<Scenario> {
    let (plant, meta) = make_benchmark(seed, &default_mode_specs(), 10)?;
    let m = plant.num_inputs();
    let n_r = meta.recommended_order;
    Ok(Scenario {
        plant,
        reduced_order: n_r,
        controller: ControllerSpec::ModalDamping {
            targets: vec![(meta.critical_hz, 0.08)],
        },
        allocator_params: default_allocator_params(m, n_r),
        allocation_mode: mode,
        disturbance: Disturbance::CriticalModeImpulse {
            magnitude: disturbance_magnitude,
        },
        fault_schedule,
        t_end: 20.0,
        critical_hz: meta.critical_hz,
    })
}

fn mode_index_near(realization: &ModalRealization, f_hz: f64, tol_hz: f64) -> Result<usize> {
    realization
        .modes
        .iter()
        .enumerate()
        .filter(|(_, m)| m.block_size() == 2)
        .min_by(|(_, a), (_, b)| {
            (a.frequency_hz - f_hz)
                .abs()
                .total_cmp(&(b.frequency_hz - f_hz).abs())
        })
        .filter(|(_, m)| (m.frequency_hz - f_hz).abs() <= tol_hz)
        .map(|(i, _)| i)
        .ok_or(Error::NoMatchingMode {
            target_hz: f_hz,
            tolerance_hz: tol_hz,
        })
}

const MODE_MATCH_TOL_HZ: f64 = 0.2;

fn validate_scenario(scenario: &Scenario) -> Result<()> {
    let m = scenario.plant.num_inputs();
    if scenario.t_end <= 0.0 {
        return Err(Error::InvalidArgument("t_end must be positive".into()));
    }
    if scenario.reduced_order > scenario.plant.order() {
        return Err(Error::OrderTooLarge {
            requested: scenario.reduced_order,
            limit: scenario.plant.order(),
        });
    }
    for (i, f) in scenario.fault_schedule.iter().enumerate() {
        if f.actuator >= m {
            return Err(Error::InvalidArgument(format!(
                "fault {i} names actuator {} but the plant has {m}",
                f.actuator
            )));
        }
        if !(0.0 <= f.fail_time && f.fail_time <= f.recover_time && f.recover_time <= scenario.t_end)
        {
            return Err(Error::InvalidArgument(format!(
                "fault {i} window [{}, {}] must satisfy 0 <= fail <= recover <= t_end",
                f.fail_time, f.recover_time
            )));
        }
    }
    Ok(())
}

/// Runs one closed-loop scenario: reduce the plant, take its real modal
/// form, build the allocator around the effectiveness matrix, then loop
/// measure -> control -> allocate -> fault mask -> plant step at t_s.
pub fn run(scenario: &Scenario) -> Result<ScenarioResult> {
    validate_scenario(scenario)?;
    let mut plant = scenario.plant.clone();
    let m = plant.num_inputs();
    let p = plant.num_outputs();
    let t_s = scenario.allocator_params.t_s;

    let (reduced, maps) = balanced_truncate_with_maps(&plant, scenario.reduced_order)?;
    let realization = eig_real_modal(&reduced)?;
    let n_r = realization.order();
    let effectiveness = &realization.psi * reduced.b();

    let cfg = AllocatorConfig::new(
        scenario.allocator_params.clone(),
        effectiveness.clone(),
        &realization.block_sizes(),
    )?;
    let mut alloc_state = AllocatorState::new(m);

    let mut controller = match &scenario.controller {
        ControllerSpec::ModalDamping { targets } => {
            let resolved: Vec<(usize, f64)> = targets
                .iter()
                .map(|&(f_hz, zeta)| Ok((mode_index_near(&realization, f_hz, MODE_MATCH_TOL_HZ)?, zeta)))
                .collect::<Result<_>>()?;
            let gain = modal_state_feedback_gain(&realization, &resolved)?;
            LoopController::Modal(gain)
        }
        ControllerSpec::Dynamic(ctrl) => {
            if ctrl.num_inputs() != p || ctrl.num_outputs() != n_r {
                return Err(Error::DimensionMismatch(format!(
                    "controller maps {} -> {}, loop needs {p} -> {n_r}",
                    ctrl.num_inputs(),
                    ctrl.num_outputs()
                )));
            }
            let mut c = ctrl.clone();
            c.reset_state();
            LoopController::Dynamic(c)
        }
    };

    let x0 = match &scenario.disturbance {
        Disturbance::InitialState(x) => {
            if x.len() != plant.order() {
                return Err(Error::DimensionMismatch(format!(
                    "initial state has length {}, plant order is {}",
                    x.len(),
                    plant.order()
                )));
            }
            x.clone()
        }
        Disturbance::CriticalModeImpulse { magnitude } => {
            let idx = mode_index_near(&realization, scenario.critical_hz, MODE_MATCH_TOL_HZ)?;
            let col = realization
                .psi_inv()
                .column(realization.modes[idx].block_index)
                .into_owned();
            let full = &maps.from_reduced * col;
            let norm = full.norm();
            if norm <= 0.0 {
                return Err(Error::SolverFailure(
                    "critical mode eigenvector vanished under the reduction maps".into(),
                ));
            }
            full * (*magnitude / norm)
        }
    };
    plant.set_state(x0)?;

    let steps = (scenario.t_end / t_s).round() as usize;
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "t_end shorter than one control step".into(),
        ));
    }
    let mut time = Vec::with_capacity(steps);
    let mut outputs = DMatrix::zeros(steps, p);
    let mut virtuals = DMatrix::zeros(steps, n_r);
    let mut commands = DMatrix::zeros(steps, m);
    let mut command_l1 = Vec::with_capacity(steps);
    let mut nonzero_counts = Vec::with_capacity(steps);
    let mut saturation_events = 0usize;

    let params = &scenario.allocator_params;
    for k in 0..steps {
        let t = k as f64 * t_s;
        let mut failed_now = vec![false; m];
        for f in &scenario.fault_schedule {
            if f.fail_time <= t && t < f.recover_time {
                failed_now[f.actuator] = true;
            }
        }

        let y = plant.output();
        let v = if scenario.allocation_mode == AllocationMode::None {
            DVector::zeros(n_r)
        } else {
            match &mut controller {
                LoopController::Modal(gain) => {
                    let z = &realization.psi * (&maps.to_reduced * plant.state());
                    -(&*gain * z)
                }
                LoopController::Dynamic(ctrl) => ctrl.controller_step(&y, t_s)?,
            }
        };

        let u = match scenario.allocation_mode {
            AllocationMode::None => DVector::zeros(m),
            AllocationMode::Sparse => {
                for (i, &is_failed) in failed_now.iter().enumerate() {
                    alloc_state.set_failed(i, is_failed)?;
                }
                allocate(&cfg, &mut alloc_state, &v)?
            }
            AllocationMode::Fixed => {
                let mut u = fixed_allocate(&effectiveness, &v)?;
                for i in 0..m {
                    u[i] = u[i].clamp(params.u_min[i], params.u_max[i]);
                    if failed_now[i] {
                        u[i] = 0.0;
                    }
                }
                u
            }
        };

        time.push(t);
        outputs.row_mut(k).tr_copy_from(&y);
        virtuals.row_mut(k).tr_copy_from(&v);
        commands.row_mut(k).tr_copy_from(&u);
        command_l1.push(u.iter().map(|x| x.abs()).sum());
        nonzero_counts.push(u.iter().filter(|x| x.abs() > 1e-12).count());
        for i in 0..m {
            let at_upper = params.u_max[i] != 0.0
                && (u[i] - params.u_max[i]).abs() <= 1e-12 * (1.0 + params.u_max[i].abs());
            let at_lower = params.u_min[i] != 0.0
                && (u[i] - params.u_min[i]).abs() <= 1e-12 * (1.0 + params.u_min[i].abs());
            if at_upper || at_lower {
                saturation_events += 1;
            }
        }

        match plant.simulate_step(&u, t_s) {
            Ok(_) => {}
            Err(Error::NonFiniteState) => return Err(Error::Unstable { time: t }),
            Err(e) => return Err(e),
        }
        if plant.state().amax() > STATE_OVERFLOW {
            return Err(Error::Unstable { time: t });
        }
    }

    let oscillatory = realization.modes.iter().filter(|m| m.block_size() == 2).count();
    let critical_damping_pct = measure_critical_damping(
        &outputs.column(0).iter().cloned().collect::<Vec<f64>>(),
        t_s,
        scenario.critical_hz,
        2 * oscillatory.max(1),
    );

    Ok(ScenarioResult {
        time,
        outputs,
        virtual_controls: virtuals,
        commands,
        critical_damping_pct,
        command_l1,
        nonzero_counts,
        saturation_events,
    })
}

enum LoopController {
    Modal(DMatrix<f64>),
    Dynamic(DynamicController),
}

/// Prony damping of the mode near `critical_hz` in a recorded output: skip
/// the first second of transient, decimate to roughly 0.1 s spacing, then
/// step the fit order down from `max_order` until the data supports it.
pub fn measure_critical_damping(
    samples: &[f64],
    dt: f64,
    critical_hz: f64,
    max_order: usize,
) -> Option<f64> {
    let signal = SampledSignal::new(samples.to_vec(), dt, 0.0).ok()?;
    let windowed = signal.window_from(1.0).ok()?;
    let factor = ((0.1 / dt).round() as usize).max(1);
    let coarse = windowed.decimate(factor).ok()?;
    let est = prony_fit_auto(&coarse, max_order.max(1)).ok()?;
    critical_mode_damping(&est, critical_hz, 0.1).ok()
}

fn thread_cap() -> Option<usize> {
    std::env::var("MODAL_ALLOC_THREADS")
        .ok()?
        .parse::<usize>()
        .ok()
        .filter(|&n| n >= 1)
}

/// Failure-fraction sweep: for each fraction, fails the round(fraction·m)
/// actuators with the largest effectiveness column norms (worst case, ties to
/// the lower index) for the whole horizon and tabulates Prony damping under
/// sparse, fixed, and no allocation. Rows keep the order of `fractions`;
/// scenarios run in parallel, capped by MODAL_ALLOC_THREADS.
pub fn run_failure_sweep(base: &Scenario, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!(
                "failure fraction {f} outside [0, 1]"
            )));
        }
    }
    let m = base.plant.num_inputs();
    let (reduced, _) = balanced_truncate_with_maps(&base.plant, base.reduced_order)?;
    let realization = eig_real_modal(&reduced)?;
    let effectiveness = &realization.psi * reduced.b();
    let mut by_norm: Vec<usize> = (0..m).collect();
    by_norm.sort_by(|&i, &j| {
        effectiveness
            .column(j)
            .norm()
            .total_cmp(&effectiveness.column(i).norm())
            .then(i.cmp(&j))
    });

    let job = |&fraction: &f64| -> Result<SweepRow> {
        let k = (fraction * m as f64).round() as usize;
        let failed: Vec<usize> = by_norm[..k.min(m)].to_vec();
        let schedule: Vec<FaultEvent> = failed
            .iter()
            .map(|&actuator| FaultEvent {
                actuator,
                fail_time: 0.0,
                recover_time: base.t_end,
            })
            .collect();
        let mut damping = [0.0f64; 3];
        for (slot, mode) in [
            AllocationMode::Sparse,
            AllocationMode::Fixed,
            AllocationMode::None,
        ]
        .into_iter()
        .enumerate()
        {
            let mut scenario = base.clone();
            scenario.allocation_mode = mode;
            scenario.fault_schedule = schedule.clone();
            let result = run(&scenario)?;
            damping[slot] = result.critical_damping_pct.ok_or(Error::NoMatchingMode {
                target_hz: base.critical_hz,
                tolerance_hz: 0.1,
            })?;
        }
        Ok(SweepRow {
            fraction,
            failed,
            sparse_damping_pct: damping[0],
            fixed_damping_pct: damping[1],
            none_damping_pct: damping[2],
        })
    };

    match thread_cap() {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::SolverFailure(format!("thread pool: {e}")))?
            .install(|| fractions.par_iter().map(job).collect()),
        None => fractions.par_iter().map(job).collect(),
    }
}
