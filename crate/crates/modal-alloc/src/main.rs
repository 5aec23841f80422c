use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use modal_alloc::allocator::{allocate, AllocatorConfig, AllocatorParams, AllocatorState};
use modal_alloc::config::{build_scenario, load_config, RunConfig};
use modal_alloc::error::{Error, Result};
use modal_alloc::harness::{
    benchmark_scenario, make_benchmark, run, run_failure_sweep, AllocationMode, ModeSpec,
    ScenarioResult,
};
use modal_alloc::io::{
    fmt_num, read_csv_columns, read_matrix, read_plant_triple, read_vector, write_csv,
    write_csv_text, write_matrix, write_plant_triple, write_vector,
};
use modal_alloc::lti::eig_real_modal;
use modal_alloc::plot::{write_line_plot, Series};
use modal_alloc::reduction::{balanced_truncate_with_maps, hankel_singular_values};
use modal_alloc::ringdown::{prony_fit, prony_fit_auto, SampledSignal};

/// Sparse control allocation toolkit: model reduction, modal analysis,
/// allocation, closed-loop simulation, failure sweeps, and Prony damping
/// estimation.
#[derive(Parser)]
#[command(name = "modal-alloc", version, disable_help_subcommand = true)]
struct Cli {
    /// Print the complete default configuration as TOML and exit.
    #[arg(long)]
    show_config: bool,

    /// Print progress details to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set lambda=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,

    /// Also write an SVG plot of the primary series.
    #[arg(long)]
    plot: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Balanced truncation: write the Hankel spectrum and the reduced model.
    Reduce {
        /// Input plant triple prefix (reads <prefix>.{a,b,c}.mtx.txt).
        #[arg(long)]
        plant: PathBuf,
        /// Reduced order; 0 picks the order from the spectrum decay.
        #[arg(long, default_value_t = 0)]
        order: usize,
        /// Relative Hankel-value threshold behind the automatic order.
        #[arg(long, default_value_t = 1e-2)]
        threshold: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Real modal decomposition: write the mode table and the Lambda/psi pair.
    Modal {
        /// Input plant triple prefix.
        #[arg(long)]
        plant: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// One-shot allocation of a virtual control demand.
    Allocate {
        /// Effectiveness matrix file (n x m).
        #[arg(long)]
        effectiveness: PathBuf,
        /// Virtual control demand file (n x 1).
        #[arg(long)]
        demand: PathBuf,
        /// Previous command file (m x 1); zeros when omitted.
        #[arg(long)]
        u_prev: Option<PathBuf>,
        /// Comma-separated indices of failed actuators.
        #[arg(long, value_delimiter = ',')]
        failed: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Closed-loop simulation: write timeseries.csv and metrics.csv.
    Simulate {
        /// Allocation mode override: sparse|fixed|none.
        #[arg(long)]
        mode: Option<String>,
        /// Benchmark seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Disturbance override: small|medium|large or a magnitude.
        #[arg(long)]
        disturbance: Option<String>,
        /// Simulation horizon override in seconds.
        #[arg(long)]
        t_end: Option<f64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Failure-fraction sweep over sparse/fixed/none: write sweep.csv.
    Sweep {
        /// Comma-separated failure fractions in [0, 1].
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.3, 0.5, 0.7, 1.0])]
        fractions: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Prony damping estimation on a two-column CSV (time, value).
    Prony {
        /// Input CSV; first column is time unless --column points elsewhere.
        #[arg(long)]
        input: PathBuf,
        /// Which column holds the signal (0 is time).
        #[arg(long, default_value_t = 1)]
        column: usize,
        /// Fit order (pole pairs); 0 steps down automatically from 6.
        #[arg(long, default_value_t = 0)]
        order: usize,
        /// Drop samples before this time (seconds).
        #[arg(long)]
        start_time: Option<f64>,
        /// Keep every k-th sample.
        #[arg(long, default_value_t = 1)]
        decimate: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Generate the seeded benchmark plant triple and its metadata.
    Bench {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of actuator columns.
        #[arg(long, default_value_t = 10)]
        actuators: usize,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 2 on usage errors and 0 for --help/--version
        Err(e) => e.exit(),
    };
    if cli.show_config {
        print!("{}", RunConfig::default().to_toml_string());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (or --show-config); see --help");
        return ExitCode::from(2);
    };
    match dispatch(command, cli.verbose) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command, verbose: bool) -> Result<()> {
    match command {
        Command::Reduce {
            plant,
            order,
            threshold,
            out,
        } => cmd_reduce(&plant, order, threshold, &out, verbose),
        Command::Modal { plant, out } => cmd_modal(&plant, &out),
        Command::Allocate {
            effectiveness,
            demand,
            u_prev,
            failed,
            config,
            out,
        } => cmd_allocate(&effectiveness, &demand, u_prev.as_deref(), &failed, &config, &out),
        Command::Simulate {
            mode,
            seed,
            disturbance,
            t_end,
            config,
            out,
        } => cmd_simulate(mode, seed, disturbance, t_end, &config, &out, verbose),
        Command::Sweep {
            fractions,
            config,
            out,
        } => cmd_sweep(&fractions, &config, &out, verbose),
        Command::Prony {
            input,
            column,
            order,
            start_time,
            decimate,
            out,
        } => cmd_prony(&input, column, order, start_time, decimate, &out),
        Command::Bench {
            seed,
            actuators,
            out,
        } => cmd_bench(seed, actuators, &out),
    }
}

fn ensure_out(out: &OutArgs) -> Result<()> {
    std::fs::create_dir_all(&out.out)
        .map_err(|e| Error::Io {
            path: out.out.display().to_string(),
            source: e,
        })
}

fn load_with_overrides(args: &ConfigArgs) -> Result<RunConfig> {
    load_config(args.config.as_deref(), &args.overrides)
}

fn cmd_reduce(
    plant_prefix: &Path,
    order: usize,
    threshold: f64,
    out: &OutArgs,
    verbose: bool,
) -> Result<()> {
    ensure_out(out)?;
    let plant = read_plant_triple(plant_prefix)?;
    let spectrum = hankel_singular_values(&plant)?;
    let chosen = if order > 0 {
        order
    } else {
        spectrum.order_for_threshold(threshold)
    };
    if verbose {
        eprintln!(
            "spectrum spans {:.3e}..{:.3e}, reducing {} -> {chosen}",
            spectrum.values.first().copied().unwrap_or(0.0),
            spectrum.values.last().copied().unwrap_or(0.0),
            plant.order()
        );
    }
    let (reduced, _) = balanced_truncate_with_maps(&plant, chosen)?;

    let hankel_path = out.out.join("hankel.csv");
    write_csv(
        &hankel_path,
        &["index".into(), "value".into()],
        spectrum
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| vec![i as f64, v]),
    )?;
    let reduced_prefix = out.out.join("reduced");
    write_plant_triple(&reduced_prefix, &reduced)?;
    println!("wrote {}", hankel_path.display());
    println!("wrote {}.{{a,b,c}}.mtx.txt (order {chosen})", reduced_prefix.display());

    if out.plot {
        let x: Vec<f64> = (0..spectrum.values.len()).map(|i| i as f64).collect();
        let path = out.out.join("hankel.svg");
        write_line_plot(
            &path,
            "Hankel singular values",
            "index",
            "value",
            &[Series {
                label: "sigma",
                x: &x,
                y: &spectrum.values,
            }],
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_modal(plant_prefix: &Path, out: &OutArgs) -> Result<()> {
    ensure_out(out)?;
    let plant = read_plant_triple(plant_prefix)?;
    let modal = eig_real_modal(&plant)?;
    let modes_path = out.out.join("realization.csv");
    write_csv(
        &modes_path,
        &[
            "index".into(),
            "sigma".into(),
            "omega".into(),
            "frequency_hz".into(),
            "damping_pct".into(),
        ],
        modal.modes.iter().enumerate().map(|(i, m)| {
            vec![
                i as f64,
                m.sigma,
                m.omega,
                m.frequency_hz,
                m.damping_ratio * 100.0,
            ]
        }),
    )?;
    write_matrix(out.out.join("lambda.mtx.txt"), &modal.lambda_matrix)?;
    write_matrix(out.out.join("psi.mtx.txt"), &modal.psi)?;
    println!("wrote {}", modes_path.display());
    println!("wrote {}", out.out.join("lambda.mtx.txt").display());
    println!("wrote {}", out.out.join("psi.mtx.txt").display());

    if out.plot {
        let freq: Vec<f64> = modal.modes.iter().map(|m| m.frequency_hz).collect();
        let damp: Vec<f64> = modal.modes.iter().map(|m| m.damping_ratio * 100.0).collect();
        let path = out.out.join("realization.svg");
        write_line_plot(
            &path,
            "Mode damping vs frequency",
            "frequency (Hz)",
            "damping (%)",
            &[Series {
                label: "modes",
                x: &freq,
                y: &damp,
            }],
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_allocate(
    effectiveness_path: &Path,
    demand_path: &Path,
    u_prev_path: Option<&Path>,
    failed: &[usize],
    config: &ConfigArgs,
    out: &OutArgs,
) -> Result<()> {
    ensure_out(out)?;
    let cfg = load_with_overrides(config)?;
    let effectiveness = read_matrix(effectiveness_path)?;
    let demand = read_vector(demand_path)?;
    let (n, m) = effectiveness.shape();
    if demand.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "demand has length {}, effectiveness has {n} rows",
            demand.len()
        )));
    }
    let params = AllocatorParams {
        w_u: cfg.w_u.expand(m, "w_u")?,
        w_s: cfg.w_s.expand(m, "w_s")?,
        w_v: cfg.w_v.expand(n, "w_v")?,
        lambda: cfg.lambda.0,
        rho: cfg.rho.0,
        u_min: cfg.u_min.expand(m, "u_min")?,
        u_max: cfg.u_max.expand(m, "u_max")?,
        t_s: cfg.ts.0,
    };
    let alloc_cfg = AllocatorConfig::new(params, effectiveness, &vec![1; n])?;
    let mut state = AllocatorState::new(m);
    if let Some(p) = u_prev_path {
        state.set_u_prev(read_vector(p)?)?;
    }
    for &i in failed {
        state.set_failed(i, true)?;
    }
    let u = allocate(&alloc_cfg, &mut state, &demand)?;

    let path = out.out.join("command.csv");
    write_csv(
        &path,
        &["actuator".into(), "command".into()],
        u.iter().enumerate().map(|(i, &v)| vec![i as f64, v]),
    )?;
    write_vector(out.out.join("command.mtx.txt"), &u)?;
    println!("wrote {}", path.display());

    if out.plot {
        let x: Vec<f64> = (0..m).map(|i| i as f64).collect();
        let y: Vec<f64> = u.iter().cloned().collect();
        let path = out.out.join("command.svg");
        write_line_plot(
            &path,
            "Allocated commands",
            "actuator",
            "command (pu)",
            &[Series {
                label: "u",
                x: &x,
                y: &y,
            }],
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn timeseries_header(p: usize, n: usize, m: usize) -> Vec<String> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=p).map(|i| format!("y{i}")));
    header.extend((1..=n).map(|i| format!("v{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header
}

fn write_timeseries(path: &Path, result: &ScenarioResult) -> Result<()> {
    let p = result.outputs.ncols();
    let n = result.virtual_controls.ncols();
    let m = result.commands.ncols();
    let rows = (0..result.time.len()).map(|k| {
        let mut row = Vec::with_capacity(1 + p + n + m);
        row.push(result.time[k]);
        row.extend(result.outputs.row(k).iter().cloned());
        row.extend(result.virtual_controls.row(k).iter().cloned());
        row.extend(result.commands.row(k).iter().cloned());
        row
    });
    write_csv(path, &timeseries_header(p, n, m), rows)
}

fn write_metrics(path: &Path, result: &ScenarioResult, scenario_order: usize) -> Result<()> {
    let steps = result.time.len() as f64;
    let mean_l1 = result.command_l1.iter().sum::<f64>() / steps;
    let mean_nonzero = result.nonzero_counts.iter().sum::<usize>() as f64 / steps;
    let rows: Vec<Vec<String>> = vec![
        vec![
            "critical_damping_pct".into(),
            fmt_num(result.critical_damping_pct.unwrap_or(f64::NAN)),
        ],
        vec!["mean_command_l1".into(), fmt_num(mean_l1)],
        vec!["mean_nonzero_commands".into(), fmt_num(mean_nonzero)],
        vec![
            "saturation_events".into(),
            fmt_num(result.saturation_events as f64),
        ],
        vec!["steps".into(), fmt_num(steps)],
        vec!["reduced_order".into(), fmt_num(scenario_order as f64)],
    ];
    write_csv_text(path, &["metric".into(), "value".into()], rows)
}

fn cmd_simulate(
    mode: Option<String>,
    seed: Option<u64>,
    disturbance: Option<String>,
    t_end: Option<f64>,
    config: &ConfigArgs,
    out: &OutArgs,
    verbose: bool,
) -> Result<()> {
    ensure_out(out)?;
    let mut args = config.clone();
    if let Some(mode) = mode {
        args.overrides.push(format!("mode=\"{mode}\""));
    }
    if let Some(seed) = seed {
        args.overrides.push(format!("seed={seed}"));
    }
    if let Some(d) = disturbance {
        if d.parse::<f64>().is_ok() {
            args.overrides.push(format!("disturbance={d}"));
        } else {
            args.overrides.push(format!("disturbance=\"{d}\""));
        }
    }
    if let Some(t) = t_end {
        args.overrides.push(format!("t_end={t}"));
    }
    let cfg = load_with_overrides(&args)?;
    let (scenario, _) = build_scenario(&cfg)?;
    if verbose {
        eprintln!(
            "plant order {}, reduced {}, mode {}, critical {} Hz",
            scenario.plant.order(),
            scenario.reduced_order,
            cfg.mode,
            scenario.critical_hz
        );
    }
    let result = run(&scenario)?;

    let ts_path = out.out.join("timeseries.csv");
    write_timeseries(&ts_path, &result)?;
    let metrics_path = out.out.join("metrics.csv");
    write_metrics(&metrics_path, &result, scenario.reduced_order)?;
    println!("wrote {}", ts_path.display());
    println!("wrote {}", metrics_path.display());
    match result.critical_damping_pct {
        Some(d) => println!("critical mode damping: {d:.4}%"),
        None => println!("critical mode damping: not identified"),
    }

    if out.plot {
        let y: Vec<f64> = result.outputs.column(0).iter().cloned().collect();
        let path = out.out.join("timeseries.svg");
        write_line_plot(
            &path,
            "Measured output",
            "t (s)",
            "y",
            &[Series {
                label: "y1",
                x: &result.time,
                y: &y,
            }],
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(fractions: &[f64], config: &ConfigArgs, out: &OutArgs, verbose: bool) -> Result<()> {
    ensure_out(out)?;
    let cfg = load_with_overrides(config)?;
    let (base, _) = build_scenario(&cfg)?;
    if verbose {
        eprintln!("sweeping {} fractions, t_end {} s", fractions.len(), base.t_end);
    }
    let rows = run_failure_sweep(&base, fractions)?;

    let path = out.out.join("sweep.csv");
    let header = vec![
        "fraction".to_string(),
        "failed_count".to_string(),
        "failed_indices".to_string(),
        "sparse_damping_pct".to_string(),
        "fixed_damping_pct".to_string(),
        "none_damping_pct".to_string(),
    ];
    let text_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let indices = r
                .failed
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";");
            vec![
                fmt_num(r.fraction),
                r.failed.len().to_string(),
                indices,
                fmt_num(r.sparse_damping_pct),
                fmt_num(r.fixed_damping_pct),
                fmt_num(r.none_damping_pct),
            ]
        })
        .collect();
    write_csv_text(&path, &header, text_rows)?;
    println!("wrote {}", path.display());
    for r in &rows {
        println!(
            "fraction {:.2}: sparse {:.3}% fixed {:.3}% none {:.3}%",
            r.fraction, r.sparse_damping_pct, r.fixed_damping_pct, r.none_damping_pct
        );
    }

    if out.plot {
        let x: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
        let sparse: Vec<f64> = rows.iter().map(|r| r.sparse_damping_pct).collect();
        let fixed: Vec<f64> = rows.iter().map(|r| r.fixed_damping_pct).collect();
        let none: Vec<f64> = rows.iter().map(|r| r.none_damping_pct).collect();
        let path = out.out.join("sweep.svg");
        write_line_plot(
            &path,
            "Critical-mode damping vs failure fraction",
            "failure fraction",
            "damping (%)",
            &[
                Series { label: "sparse", x: &x, y: &sparse },
                Series { label: "fixed", x: &x, y: &fixed },
                Series { label: "none", x: &x, y: &none },
            ],
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_prony(
    input: &Path,
    column: usize,
    order: usize,
    start_time: Option<f64>,
    decimate: usize,
    out: &OutArgs,
) -> Result<()> {
    ensure_out(out)?;
    let (names, columns) = read_csv_columns(input)?;
    if column == 0 || column >= columns.len() {
        return Err(Error::InvalidArgument(format!(
            "column {column} out of range; file has columns 1..{} after time",
            columns.len() - 1
        )));
    }
    let time = &columns[0];
    if time.len() < 2 {
        return Err(Error::Parse {
            path: input.display().to_string(),
            message: "need at least two samples".into(),
        });
    }
    let dt = time[1] - time[0];
    if dt <= 0.0 {
        return Err(Error::Parse {
            path: input.display().to_string(),
            message: "time column must be strictly increasing".into(),
        });
    }
    for w in time.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt {
            return Err(Error::Parse {
            path: input.display().to_string(),
            message: "samples are not uniformly spaced".into(),
        });
        }
    }
    let mut signal = SampledSignal::new(columns[column].clone(), dt, time[0])?;
    if let Some(t0) = start_time {
        signal = signal.window_from(t0)?;
    }
    if decimate > 1 {
        signal = signal.decimate(decimate)?;
    }
    let estimate = if order > 0 {
        prony_fit(&signal, order)?
    } else {
        prony_fit_auto(&signal, 6)?
    };

    let path = out.out.join("modes.csv");
    write_csv(
        &path,
        &[
            "freq_hz".into(),
            "damping_pct".into(),
            "amplitude".into(),
            "phase".into(),
        ],
        estimate
            .modes
            .iter()
            .map(|m| vec![m.frequency_hz, m.damping_pct, m.amplitude, m.phase]),
    )?;
    println!("wrote {}", path.display());
    println!("fit error: {}", fmt_num(estimate.fit_error));
    for m in &estimate.modes {
        println!(
            "mode {:.4} Hz, damping {:.4}%, amplitude {:.4e}",
            m.frequency_hz, m.damping_pct, m.amplitude
        );
    }

    if out.plot {
        let x: Vec<f64> = (0..signal.values.len())
            .map(|i| signal.start_time + i as f64 * signal.dt)
            .collect();
        let path = out.out.join("signal.svg");
        write_line_plot(
            &path,
            &format!("Analyzed signal ({})", names[column]),
            "t (s)",
            &names[column],
            &[Series {
                label: &names[column],
                x: &x,
                y: &signal.values,
            }],
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchMetaFile {
    seed: u64,
    actuators: usize,
    critical_hz: f64,
    critical_damping_pct: f64,
    recommended_order: usize,
    mode_frequency_hz: Vec<f64>,
    mode_damping_pct: Vec<f64>,
}

fn cmd_bench(seed: u64, actuators: usize, out: &OutArgs) -> Result<()> {
    ensure_out(out)?;
    let specs = modal_alloc::harness::default_mode_specs();
    let (plant, meta) = make_benchmark(seed, &specs, actuators)?;
    let prefix = out.out.join("plant");
    write_plant_triple(&prefix, &plant)?;

    let meta_file = BenchMetaFile {
        seed,
        actuators,
        critical_hz: meta.critical_hz,
        critical_damping_pct: meta.critical_damping_pct,
        recommended_order: meta.recommended_order,
        mode_frequency_hz: meta.modes.iter().map(|m: &ModeSpec| m.frequency_hz).collect(),
        mode_damping_pct: meta.modes.iter().map(|m| m.damping_pct).collect(),
    };
    let meta_path = out.out.join("metadata.toml");
    let text = toml::to_string(&meta_file)
        .map_err(|e| Error::Parse {
            path: meta_path.display().to_string(),
            message: e.to_string(),
        })?;
    std::fs::write(&meta_path, text).map_err(|e| Error::Io {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    println!("wrote {}.{{a,b,c}}.mtx.txt", prefix.display());
    println!("wrote {}", meta_path.display());
    println!(
        "critical mode {:.3} Hz at {:.2}% damping; suggested reduced order {}",
        meta.critical_hz, meta.critical_damping_pct, meta.recommended_order
    );

    if out.plot {
        let mut scenario = benchmark_scenario(seed, AllocationMode::None, 1.0, vec![])?;
        scenario.t_end = 12.0;
        let result = run(&scenario)?;
        let y: Vec<f64> = result.outputs.column(0).iter().cloned().collect();
        let path = out.out.join("openloop.svg");
        write_line_plot(
            &path,
            "Open-loop ringdown",
            "t (s)",
            "y",
            &[Series {
                label: "y1",
                x: &result.time,
                y: &y,
            }],
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
