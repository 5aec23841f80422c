//! Run configuration: one flat TOML table covering the allocator weights and
//! the scenario. Scalars stand for uniform vectors and are expanded once the
//! plant dimensions are known; unknown keys are rejected by name so typos
//! cannot silently fall back to defaults.

use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::allocator::AllocatorParams;
use crate::error::{Error, Result};
use crate::harness::{
    default_mode_specs, make_benchmark, AllocationMode, BenchmarkMeta, ControllerSpec,
    Disturbance, FaultEvent, Scenario,
};
use crate::io::{read_matrix, read_plant_triple};
use crate::lti::{eig_real_modal, DynamicController};
use crate::reduction::{balanced_truncate_with_maps, hankel_singular_values};

/// An f64 that also deserializes from TOML integers, so `lambda = 1` and
/// `lambda = 1.0` mean the same thing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Num;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Num, E> {
                Ok(Num(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Num, E> {
                Ok(Num(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

/// A weight or bound: one number applied uniformly, or one entry per channel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Entries {
    Uniform(Num),
    PerChannel(Vec<Num>),
}

impl Entries {
    pub fn expand(&self, len: usize, key: &str) -> Result<DVector<f64>> {
        match self {
            Entries::Uniform(Num(v)) => Ok(DVector::from_element(len, *v)),
            Entries::PerChannel(v) => {
                if v.len() != len {
                    return Err(Error::InvalidArgument(format!(
                        "{key} has {} entries, the plant needs {len}",
                        v.len()
                    )));
                }
                Ok(DVector::from_iterator(len, v.iter().map(|n| n.0)))
            }
        }
    }
}

/// Impulse severity: a named preset or an explicit magnitude.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum DisturbanceSpec {
    Preset(String),
    Magnitude(Num),
}

pub const DISTURBANCE_SMALL: f64 = 1.0;
pub const DISTURBANCE_MEDIUM: f64 = 4.0;
pub const DISTURBANCE_LARGE: f64 = 12.0;

impl DisturbanceSpec {
    pub fn magnitude(&self) -> Result<f64> {
        match self {
            DisturbanceSpec::Magnitude(Num(v)) => {
                if *v <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "disturbance magnitude must be positive".into(),
                    ));
                }
                Ok(*v)
            }
            DisturbanceSpec::Preset(name) => match name.as_str() {
                "small" => Ok(DISTURBANCE_SMALL),
                "medium" => Ok(DISTURBANCE_MEDIUM),
                "large" => Ok(DISTURBANCE_LARGE),
                other => Err(Error::InvalidArgument(format!(
                    "disturbance {other:?} is not small|medium|large or a number"
                ))),
            },
        }
    }
}

/// One `failures` row: [actuator index, fail time s, recover time s].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureSpec {
    pub actuator: usize,
    pub fail_time: f64,
    pub recover_time: f64,
}

impl<'de> Deserialize<'de> for FailureSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = FailureSpec;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("[actuator, fail_time, recover_time]")
            }
            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<FailureSpec, A::Error> {
                let idx: u64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let fail: Num = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                let recover: Num = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(2, &self))?;
                if seq.next_element::<Num>()?.is_some() {
                    return Err(de::Error::invalid_length(4, &self));
                }
                Ok(FailureSpec {
                    actuator: idx as usize,
                    fail_time: fail.0,
                    recover_time: recover.0,
                })
            }
        }
        d.deserialize_seq(V)
    }
}

impl Serialize for FailureSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(3))?;
        seq.serialize_element(&(self.actuator as u64))?;
        seq.serialize_element(&self.fail_time)?;
        seq.serialize_element(&self.recover_time)?;
        seq.end()
    }
}

/// Everything a run needs, with working defaults for the built-in benchmark.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lambda: Num,
    pub rho: Num,
    pub ts: Num,
    pub w_u: Entries,
    pub w_s: Entries,
    pub w_v: Entries,
    pub u_min: Entries,
    pub u_max: Entries,
    pub mode: String,
    pub disturbance: DisturbanceSpec,
    pub failures: Vec<FailureSpec>,
    pub plant: String,
    pub controller: String,
    pub seed: u64,
    pub t_end: Num,
    pub reduced_order: usize,
    pub critical_hz: Num,
    pub target_damping_pct: Num,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda: Num(1.0),
            rho: Num(100.0),
            ts: Num(0.02),
            w_u: Entries::Uniform(Num(1.0)),
            w_s: Entries::Uniform(Num(2.0)),
            w_v: Entries::Uniform(Num(1.0)),
            u_min: Entries::Uniform(Num(-0.4)),
            u_max: Entries::Uniform(Num(0.4)),
            mode: "sparse".into(),
            disturbance: DisturbanceSpec::Preset("medium".into()),
            failures: Vec::new(),
            plant: String::new(),
            controller: String::new(),
            seed: 7,
            t_end: Num(20.0),
            reduced_order: 0,
            critical_hz: Num(0.0),
            target_damping_pct: Num(8.0),
        }
    }
}

impl RunConfig {
    pub fn allocation_mode(&self) -> Result<AllocationMode> {
        match self.mode.as_str() {
            "sparse" => Ok(AllocationMode::Sparse),
            "fixed" => Ok(AllocationMode::Fixed),
            "none" => Ok(AllocationMode::None),
            other => Err(Error::InvalidArgument(format!(
                "mode {other:?} is not sparse|fixed|none"
            ))),
        }
    }

    /// The defaults as a TOML document, every key present.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn toml_error(origin: &str, err: impl fmt::Display) -> Error {
    Error::parse(origin, err.to_string())
}

/// Parses a config document; `origin` names the source in error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| toml_error(origin, e))
}

/// Loads the config file (defaults if absent) and applies `key=value`
/// overrides, each parsed as one TOML line so values keep full TOML syntax.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            text.parse().map_err(|e| toml_error(&p.display().to_string(), e))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        let Some((key, _)) = item.split_once('=') else {
            return Err(Error::InvalidArgument(format!(
                "override {item:?} is not key=value"
            )));
        };
        let parsed: toml::Table = item
            .parse()
            .map_err(|e| toml_error(&format!("override {key}"), e))?;
        for (k, v) in parsed {
            table.insert(k, v);
        }
    }
    let text = toml::to_string(&table).expect("table serializes");
    parse_config(&text, "config")
}

fn load_controller(prefix: &Path) -> Result<DynamicController> {
    let part = |p: &str| {
        let mut name = prefix
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push('.');
        name.push_str(p);
        name.push_str(".mtx.txt");
        prefix.with_file_name(name)
    };
    let d = read_matrix(part("d"))?;
    if part("a").exists() {
        let a = read_matrix(part("a"))?;
        let b = read_matrix(part("b"))?;
        let c = read_matrix(part("c"))?;
        DynamicController::new(a, b, c, d)
    } else {
        Ok(DynamicController::static_gain(d))
    }
}

/// Turns a config into a runnable scenario. Returns the benchmark metadata
/// when the built-in plant was used (empty `plant` key).
pub fn build_scenario(cfg: &RunConfig) -> Result<(Scenario, Option<BenchmarkMeta>)> {
    let (plant, meta) = if cfg.plant.is_empty() {
        let (plant, meta) = make_benchmark(cfg.seed, &default_mode_specs(), 10)?;
        (plant, Some(meta))
    } else {
        (read_plant_triple(Path::new(&cfg.plant))?, None)
    };

    let reduced_order = if cfg.reduced_order > 0 {
        cfg.reduced_order
    } else if let Some(meta) = &meta {
        meta.recommended_order
    } else {
        hankel_singular_values(&plant)?.suggested_order
    };

    let (reduced, _) = balanced_truncate_with_maps(&plant, reduced_order)?;
    let realization = eig_real_modal(&reduced)?;
    let critical_hz = if cfg.critical_hz.0 > 0.0 {
        cfg.critical_hz.0
    } else if let Some(meta) = &meta {
        meta.critical_hz
    } else {
        realization
            .modes
            .iter()
            .filter(|m| m.block_size() == 2)
            .min_by(|a, b| a.damping_ratio.total_cmp(&b.damping_ratio))
            .map(|m| m.frequency_hz)
            .ok_or_else(|| {
                Error::InvalidArgument(
                    "reduced model has no oscillatory mode; set critical_hz".into(),
                )
            })?
    };

    let m = plant.num_inputs();
    let n_r = realization.order();
    let params = AllocatorParams {
        w_u: cfg.w_u.expand(m, "w_u")?,
        w_s: cfg.w_s.expand(m, "w_s")?,
        w_v: cfg.w_v.expand(n_r, "w_v")?,
        lambda: cfg.lambda.0,
        rho: cfg.rho.0,
        u_min: cfg.u_min.expand(m, "u_min")?,
        u_max: cfg.u_max.expand(m, "u_max")?,
        t_s: cfg.ts.0,
    };

    let controller = if cfg.controller.is_empty() {
        ControllerSpec::ModalDamping {
            targets: vec![(critical_hz, cfg.target_damping_pct.0 / 100.0)],
        }
    } else {
        ControllerSpec::Dynamic(load_controller(Path::new(&cfg.controller))?)
    };

    let fault_schedule: Vec<FaultEvent> = cfg
        .failures
        .iter()
        .map(|f| FaultEvent {
            actuator: f.actuator,
            fail_time: f.fail_time,
            recover_time: f.recover_time,
        })
        .collect();

    let scenario = Scenario {
        plant,
        reduced_order,
        controller,
        allocator_params: params,
        allocation_mode: cfg.allocation_mode()?,
        disturbance: Disturbance::CriticalModeImpulse {
            magnitude: cfg.disturbance.magnitude()?,
        },
        fault_schedule,
        t_end: cfg.t_end.0,
        critical_hz,
    };
    Ok((scenario, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_name_the_headline_values() {
        let text = RunConfig::default().to_toml_string();
        assert!(text.contains("lambda = 1.0"));
        assert!(text.contains("rho = 100.0"));
        assert!(text.contains("ts = 0.02"));
        assert!(text.contains("u_max = 0.4"));
        let back = parse_config(&text, "defaults").unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        match parse_config("lambda = 1\nrho_typo = 3\n", "test") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("rho_typo")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn integers_accepted_for_float_keys() {
        let cfg = parse_config("lambda = 2\nrho = 50\nu_max = 1\nu_min = -1\n", "t").unwrap();
        assert_eq!(cfg.lambda, Num(2.0));
        assert_eq!(cfg.rho, Num(50.0));
        assert_eq!(cfg.u_max, Entries::Uniform(Num(1.0)));
    }

    #[test]
    fn vector_and_scalar_weights() {
        let cfg = parse_config("w_u = [1, 2.5, 3]\n", "t").unwrap();
        let v = cfg.w_u.expand(3, "w_u").unwrap();
        assert_eq!(v.as_slice(), &[1.0, 2.5, 3.0]);
        assert!(cfg.w_u.expand(4, "w_u").is_err());
        let uniform = RunConfig::default().w_s.expand(4, "w_s").unwrap();
        assert_eq!(uniform.as_slice(), &[2.0; 4]);
    }

    #[test]
    fn failures_parse_from_triples() {
        let cfg = parse_config("failures = [[3, 1.0, 4.0], [0, 0, 20]]\n", "t").unwrap();
        assert_eq!(
            cfg.failures,
            vec![
                FailureSpec {
                    actuator: 3,
                    fail_time: 1.0,
                    recover_time: 4.0
                },
                FailureSpec {
                    actuator: 0,
                    fail_time: 0.0,
                    recover_time: 20.0
                },
            ]
        );
        assert!(parse_config("failures = [[1, 2.0]]\n", "t").is_err());
    }

    #[test]
    fn disturbance_presets_and_numbers() {
        let cfg = parse_config("disturbance = \"large\"\n", "t").unwrap();
        assert_eq!(cfg.disturbance.magnitude().unwrap(), DISTURBANCE_LARGE);
        let cfg = parse_config("disturbance = 2.5\n", "t").unwrap();
        assert_eq!(cfg.disturbance.magnitude().unwrap(), 2.5);
        let cfg = parse_config("disturbance = \"huge\"\n", "t").unwrap();
        assert!(cfg.disturbance.magnitude().is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let dir = std::env::temp_dir().join(format!("modal-alloc-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "lambda = 1\nmode = \"sparse\"\n").unwrap();
        let cfg = load_config(
            Some(&path),
            &["lambda=0.5".into(), "mode=\"fixed\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.lambda, Num(0.5));
        assert_eq!(cfg.mode, "fixed");
        assert!(load_config(Some(&path), &["nonsense".into()]).is_err());
    }

    #[test]
    fn benchmark_scenario_builds_from_defaults() {
        let (scenario, meta) = build_scenario(&RunConfig::default()).unwrap();
        let meta = meta.unwrap();
        assert_eq!(scenario.reduced_order, 6);
        assert_eq!(scenario.critical_hz, meta.critical_hz);
        assert_eq!(scenario.plant.num_inputs(), 10);
        assert_eq!(scenario.allocation_mode, AllocationMode::Sparse);
    }

    #[test]
    fn bad_mode_rejected() {
        let cfg = parse_config("mode = \"both\"\n", "t").unwrap();
        match build_scenario(&cfg) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("both")),
            other => panic!("expected invalid mode, got {other:?}"),
        }
    }
}
