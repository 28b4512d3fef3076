//! Named scenario presets and config resolution.
//!
//! A config document is TOML. It is merged onto a preset key by key, then
//! `section.key=value` overrides are applied the same way. Keys that the
//! preset does not have are rejected, so typos never pass silently.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;
use toml::{Table, Value};

use crate::estimator::{CostWeights, MesVariant};
use crate::manipulator::{ManipulatorParams, StateTerm, UncertaintySpec, Waveform};
use crate::sim::{
    ControllerSection, GainSection, MesSection, PlantModel, ReferenceKind, RobustChoice, RunSection, SimConfig, SimError,
    SyntheticSection,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("schema error at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("validation error at `{key}`: {message}")]
    Validation { key: String, message: String },
}

impl ConfigError {
    pub fn key(&self) -> &str {
        match self {
            ConfigError::Schema { key, .. } | ConfigError::Validation { key, .. } => key,
        }
    }

    fn schema(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Schema {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl From<SimError> for ConfigError {
    fn from(e: SimError) -> Self {
        match e.root() {
            SimError::InvalidConfig { key, reason } => ConfigError::Validation {
                key: key.clone(),
                message: reason.clone(),
            },
            other => ConfigError::Validation {
                key: String::new(),
                message: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioPreset {
    Nominal,
    StateDepCase2,
    TimevarCase1,
    TimevarCase2,
    TimevarCase3,
    SyntheticQuadratic,
}

/// Table 2 dither tuning.
const TABLE2_AMPLITUDES: [f64; 2] = [0.05, 0.04];
const TABLE2_FREQUENCIES: [f64; 2] = [7.4, 7.5];
/// Table 3 tuning.
const TABLE3_ALPHA: [f64; 2] = [0.01, 0.01];
const TABLE3_KAPPA: [f64; 2] = [0.01, 0.01];
const TABLE3_FREQUENCIES: [f64; 2] = [9.9, 9.8];

/// `Δ1(t) = 1 − 0.14 sin(0.01 t)`, `Δ2(t) = 1 − 0.12 cos(0.01 t)`.
pub fn slow_drift_truth() -> [Waveform; 2] {
    [
        Waveform::Sine {
            amplitude: -0.14,
            frequency: 0.01,
            offset: 1.0,
        },
        Waveform::Cosine {
            amplitude: -0.12,
            frequency: 0.01,
            offset: 1.0,
        },
    ]
}

impl ScenarioPreset {
    pub const ALL: [ScenarioPreset; 6] = [
        ScenarioPreset::Nominal,
        ScenarioPreset::StateDepCase2,
        ScenarioPreset::TimevarCase1,
        ScenarioPreset::TimevarCase2,
        ScenarioPreset::TimevarCase3,
        ScenarioPreset::SyntheticQuadratic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioPreset::Nominal => "nominal",
            ScenarioPreset::StateDepCase2 => "state_dep_case2",
            ScenarioPreset::TimevarCase1 => "timevar_case1",
            ScenarioPreset::TimevarCase2 => "timevar_case2",
            ScenarioPreset::TimevarCase3 => "timevar_case3",
            ScenarioPreset::SyntheticQuadratic => "synthetic_quadratic",
        }
    }

    /// Where the preset's numbers come from.
    pub fn citation(&self) -> &'static str {
        match self {
            ScenarioPreset::Nominal => "Table 1 arm, no uncertainty, Table 2 dither",
            ScenarioPreset::StateDepCase2 => "Table 1 arm, Table 2 MES parameters, Delta = diag(-1,-3) on gravity",
            ScenarioPreset::TimevarCase1 => "Table 1 arm, Table 3 case 1 parameters, slow sinusoidal drift",
            ScenarioPreset::TimevarCase2 => "Table 1 arm, Table 3 tuning, drifting gravity uncertainty",
            ScenarioPreset::TimevarCase3 => "Table 1 arm, Table 2 MES parameters, Delta = diag(-1,-3), bounded eta",
            ScenarioPreset::SyntheticQuadratic => "Table 2 MES parameters on J = |x - (-1,-3)|^2",
        }
    }

    pub fn config(&self) -> SimConfig {
        let mut cfg = base_config();
        match self {
            ScenarioPreset::Nominal => {
                cfg.sim.iterations = 5;
            }
            ScenarioPreset::StateDepCase2 => {
                // the case-2 gain makes the loop stiff; 1e-3 is outside RK4's stability region
                cfg.sim.dt = 1e-4;
                cfg.controller.robust_case = RobustChoice::Case2;
                cfg.uncertainty = UncertaintySpec::StateDependentGravity {
                    delta: [Waveform::Constant(-1.0), Waveform::Constant(-3.0)],
                };
            }
            ScenarioPreset::TimevarCase1 => {
                cfg.controller.robust_case = RobustChoice::Case1;
                cfg.uncertainty = UncertaintySpec::TimeVarying {
                    delta: slow_drift_truth(),
                };
                cfg.mes = table3_mes();
                cfg.cost = CostWeights { q1: 0.325, q2: 0.325 };
            }
            ScenarioPreset::TimevarCase2 => {
                cfg.sim.dt = 1e-4;
                cfg.controller.robust_case = RobustChoice::Case2;
                cfg.uncertainty = UncertaintySpec::StateDependentGravity {
                    delta: slow_drift_truth(),
                };
                cfg.mes = table3_mes();
                cfg.cost = CostWeights { q1: 0.325, q2: 0.325 };
            }
            ScenarioPreset::TimevarCase3 => {
                cfg.sim.dt = 1e-4;
                cfg.controller.robust_case = RobustChoice::Case3;
                cfg.controller.c1 = 0.5;
                cfg.uncertainty = UncertaintySpec::Mixed {
                    delta: [[-1.0, 0.0], [0.0, -3.0]],
                    state_term: StateTerm::Gravity,
                    eta: [
                        Waveform::Sine {
                            amplitude: 0.5,
                            frequency: 1.0,
                            offset: 0.0,
                        },
                        Waveform::Cosine {
                            amplitude: 0.5,
                            frequency: 1.0,
                            offset: 0.0,
                        },
                    ],
                    eta_bound: 0.5,
                };
            }
            ScenarioPreset::SyntheticQuadratic => {
                cfg.sim.plant = PlantModel::SyntheticQuadratic;
                cfg.sim.iterations = 500;
            }
        }
        cfg
    }
}

fn base_config() -> SimConfig {
    SimConfig {
        sim: RunSection {
            dt: 1e-3,
            t_f: 4.0,
            iterations: 100,
            // matched to the reference at t = 0
            q0: [0.5, 0.5],
            qdot0: [0.25, 0.25],
            reference: ReferenceKind::Sigmoid,
            plant: PlantModel::Manipulator,
        },
        plant: ManipulatorParams::default(),
        gains: GainSection {
            k: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        },
        controller: ControllerSection {
            robust_case: RobustChoice::None,
            c1: 0.0,
            sign_smoothing: 0.0,
        },
        uncertainty: UncertaintySpec::None,
        mes: MesSection {
            variant: MesVariant::DiscreteMes,
            amplitudes: TABLE2_AMPLITUDES.to_vec(),
            frequencies: TABLE2_FREQUENCIES.to_vec(),
            gains: vec![1.0, 1.0],
            phase_aligned: false,
        },
        cost: CostWeights { q1: 5.0, q2: 5.0 },
        synthetic: SyntheticSection {
            target: vec![-1.0, -3.0],
        },
    }
}

fn table3_mes() -> MesSection {
    MesSection {
        variant: MesVariant::DiscreteDynamic,
        amplitudes: TABLE3_ALPHA.to_vec(),
        frequencies: TABLE3_FREQUENCIES.to_vec(),
        gains: TABLE3_KAPPA.to_vec(),
        phase_aligned: false,
    }
}

impl fmt::Display for ScenarioPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioPreset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ScenarioPreset::ALL.iter().map(|p| p.name()).collect();
                ConfigError::schema("scenario", format!("unknown scenario `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Every config key with a one-line description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("sim.dt", "RK4 step [s]; must divide sim.t_f"),
    ("sim.t_f", "duration of one tracking cycle [s]"),
    ("sim.iterations", "number of MES iterations (cycles)"),
    ("sim.q0", "initial joint angles [rad], reset every cycle"),
    ("sim.qdot0", "initial joint rates [rad/s], reset every cycle"),
    ("sim.reference", "desired trajectory: sigmoid"),
    ("sim.plant", "manipulator | synthetic_quadratic"),
    ("plant.m1, plant.m2", "link masses [kg]"),
    ("plant.l1, plant.l2", "link lengths [m]"),
    ("plant.lc1, plant.lc2", "distances to the link centres of mass [m]"),
    ("plant.i1, plant.i2", "link inertias [kg m^2]"),
    ("plant.g", "gravitational acceleration [m/s^2]"),
    ("gains.k", "per-joint error feedback gains [[K1_1, K1_2], [K2_1, K2_2]]; companion blocks must be Hurwitz"),
    ("controller.robust_case", "none | case1 | case2 | case3"),
    ("controller.c1", "bound on |eta(t)| used by case3"),
    ("controller.sign_smoothing", "0 for exact sign, otherwise boundary-layer width"),
    ("uncertainty.kind", "none | time_varying | state_dependent_gravity | mixed"),
    ("uncertainty.delta", "two waveforms (time_varying, state_dependent_gravity) or a 2x2 matrix (mixed)"),
    ("uncertainty.state_term", "mixed only: gravity | zero"),
    ("uncertainty.eta", "mixed only: two waveforms"),
    ("uncertainty.eta_bound", "mixed only: bound on |eta(t)|, checked by sampling"),
    ("mes.variant", "discrete_mes | discrete_dynamic | continuous_mes | continuous_dynamic"),
    ("mes.amplitudes", "dither amplitudes a_i (alpha_i for the dynamic laws); length sets the number of estimates"),
    ("mes.frequencies", "dither frequencies omega_i [rad/s], pairwise distinct"),
    ("mes.gains", "adaptation gains k_i (kappa_i) of the dynamic laws"),
    ("mes.phase_aligned", "discrete_mes: evaluate the dither at the index of the estimate being produced"),
    ("cost.q1, cost.q2", "weights of the position and velocity error integrals"),
    ("synthetic.target", "minimiser of the synthetic quadratic cost"),
];

/// Waveform syntax accepted wherever a waveform is expected.
pub const WAVEFORM_HELP: &str =
    "a number, or { kind = \"sine\" | \"cosine\", amplitude = A, frequency = W, offset = C } meaning C + A*sin(W t)";

/// Resolves a full config: preset, then document, then `section.key=value` overrides.
pub fn parse_config(preset: ScenarioPreset, document: Option<&str>, overrides: &[String]) -> Result<SimConfig, ConfigError> {
    let cfg = resolve_config(preset, document, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`parse_config`] but only checks the schema, not the invariants.
pub fn resolve_config(preset: ScenarioPreset, document: Option<&str>, overrides: &[String]) -> Result<SimConfig, ConfigError> {
    let mut value = Value::try_from(preset.config()).map_err(|e| ConfigError::schema("", e.to_string()))?;
    if let Some(doc) = document {
        let table: Table = doc.parse().map_err(|e: toml::de::Error| ConfigError::schema("", e.to_string()))?;
        merge(&mut value, Value::Table(table), "")?;
    }
    for item in overrides {
        let (path, overlay) = parse_override(item)?;
        merge(&mut value, overlay, "").map_err(|e| match e {
            ConfigError::Schema { key, message } if key.is_empty() => ConfigError::schema(path.clone(), message),
            other => other,
        })?;
    }
    deserialize(value)
}

/// Parses `a.b.c=value`; the value is TOML, or a bare string when it does not parse.
pub fn parse_override(item: &str) -> Result<(String, Value), ConfigError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::schema(item, "override must look like section.key=value"))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(|s| s.trim().is_empty()) {
        return Err(ConfigError::schema(path, "empty key in override path"));
    }
    let raw = raw.trim();
    let leaf = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let value = path.rsplit('.').fold(leaf, |acc, key| {
        let mut t = Table::new();
        t.insert(key.trim().to_string(), acc);
        Value::Table(t)
    });
    Ok((path.to_string(), value))
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Merges `overlay` into `base`, rejecting keys `base` does not know.
///
/// A table whose `kind` changes is replaced wholesale (its schema changes with it).
pub fn merge(base: &mut Value, overlay: Value, path: &str) -> Result<(), ConfigError> {
    match (base, overlay) {
        (Value::Table(b), Value::Table(o)) => {
            let kind_changes = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y)
                || (o.contains_key("kind") && !b.contains_key("kind") && !b.is_empty());
            if kind_changes {
                *b = o;
                return Ok(());
            }
            for (key, val) in o {
                let here = join(path, &key);
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, val, &here)?,
                    None => return Err(ConfigError::schema(here, "unknown key")),
                }
            }
            Ok(())
        }
        (slot, overlay) => {
            *slot = coerce(slot, overlay, path)?;
            Ok(())
        }
    }
}

fn coerce(base: &Value, overlay: Value, path: &str) -> Result<Value, ConfigError> {
    Ok(match (base, overlay) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Array(b), Value::Array(o)) => {
            let template = b.first();
            let items = o
                .into_iter()
                .map(|v| match template {
                    Some(t) => coerce(t, v, path),
                    None => Ok(v),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Value::Array(items)
        }
        // waveforms: a number may become a shape table and back
        (Value::Float(_), o @ Value::Table(_)) | (Value::Table(_), o @ (Value::Float(_) | Value::Integer(_))) => o,
        (b, o) if std::mem::discriminant(b) == std::mem::discriminant(&o) => o,
        (b, o) => {
            return Err(ConfigError::schema(
                path,
                format!("type mismatch: expected {}, got {}", b.type_str(), o.type_str()),
            ))
        }
    })
}

fn deserialize(value: Value) -> Result<SimConfig, ConfigError> {
    let text = toml::to_string(&value).map_err(|e| ConfigError::schema("", e.to_string()))?;
    toml::from_str(&text).map_err(|e: toml::de::Error| {
        let key = e
            .span()
            .and_then(|span| key_at(&text, span.start))
            .unwrap_or_default();
        ConfigError::schema(key, e.message().to_string())
    })
}

/// Dotted key of the entry that contains byte offset `pos` in `text`.
fn key_at(text: &str, pos: usize) -> Option<String> {
    let mut section = String::new();
    let mut offset = 0;
    let mut found = None;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            if offset <= pos {
                found = Some(join(&section, k.trim()));
            }
        }
        if offset <= pos && pos < offset + line.len() {
            if trimmed.starts_with('[') {
                found = Some(section.clone());
            }
            break;
        }
        offset += line.len();
    }
    found.or(Some(section))
}

/// The resolved config as a TOML document.
pub fn render_config(cfg: &SimConfig) -> String {
    toml::to_string(cfg).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table2_preset_literals() {
        let cfg = parse_config(ScenarioPreset::StateDepCase2, Some(""), &[]).unwrap();
        assert_eq!(cfg.cost, CostWeights { q1: 5.0, q2: 5.0 });
        assert_eq!(cfg.mes.amplitudes, vec![0.05, 0.04]);
        assert_eq!(cfg.mes.frequencies, vec![7.4, 7.5]);
        assert_eq!(cfg.sim.t_f, 4.0);
        assert_eq!(cfg.mes.variant, MesVariant::DiscreteMes);
        assert_eq!(
            cfg.uncertainty,
            UncertaintySpec::StateDependentGravity {
                delta: [Waveform::Constant(-1.0), Waveform::Constant(-3.0)]
            }
        );
        assert_eq!(cfg.controller.robust_case, RobustChoice::Case2);
    }

    #[test]
    fn table3_preset_literals() {
        let cfg = ScenarioPreset::TimevarCase1.config();
        assert_eq!(cfg.cost, CostWeights { q1: 0.325, q2: 0.325 });
        assert_eq!(cfg.mes.amplitudes, vec![0.01, 0.01]);
        assert_eq!(cfg.mes.gains, vec![0.01, 0.01]);
        assert_eq!(cfg.mes.frequencies, vec![9.9, 9.8]);
        assert_eq!(cfg.sim.t_f, 4.0);
        assert_eq!(cfg.mes.variant, MesVariant::DiscreteDynamic);
        let truth = cfg.uncertainty.true_parameters(100.0, 2);
        assert!((truth[0] - (1.0 - 0.14 * 1f64.sin())).abs() < 1e-15);
        assert!((truth[1] - (1.0 - 0.12 * 1f64.cos())).abs() < 1e-15);
    }

    #[test]
    fn all_presets_validate_and_roundtrip() {
        for p in ScenarioPreset::ALL {
            let cfg = p.config();
            cfg.validate().unwrap_or_else(|e| panic!("{p}: {e}"));
            let text = render_config(&cfg);
            assert_eq!(parse_config(p, Some(&text), &[]).unwrap(), cfg, "{p}");
            assert_eq!(p.name().parse::<ScenarioPreset>().unwrap(), p);
        }
    }

    #[test]
    fn override_keeps_other_fields() {
        let base = ScenarioPreset::StateDepCase2.config();
        let cfg = parse_config(ScenarioPreset::StateDepCase2, None, &["sim.dt=5e-4".into()]).unwrap();
        assert_eq!(cfg.sim.dt, 5e-4);
        let mut expected = base;
        expected.sim.dt = 5e-4;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn integer_override_coerces_to_float() {
        let cfg = parse_config(ScenarioPreset::Nominal, None, &["cost.q1=3".into(), "sim.q0=[0, 1]".into()]).unwrap();
        assert_eq!(cfg.cost.q1, 3.0);
        assert_eq!(cfg.sim.q0, [0.0, 1.0]);
    }

    #[test]
    fn bare_string_override() {
        let cfg = parse_config(ScenarioPreset::Nominal, None, &["controller.robust_case=case1".into()]).unwrap();
        assert_eq!(cfg.controller.robust_case, RobustChoice::Case1);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(ScenarioPreset::Nominal, Some("[sim]\nstep = 0.1\n"), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }));
        assert_eq!(err.key(), "sim.step");
        let err = parse_config(ScenarioPreset::Nominal, None, &["mes.omega=[1,2]".into()]).unwrap_err();
        assert_eq!(err.key(), "mes.omega");
    }

    #[test]
    fn type_mismatch_is_schema_error() {
        let err = parse_config(ScenarioPreset::Nominal, Some("[sim]\ndt = \"fast\"\n"), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }), "{err}");
        assert_eq!(err.key(), "sim.dt");
    }

    #[test]
    fn duplicate_frequency_is_validation_error() {
        let err = parse_config(ScenarioPreset::StateDepCase2, Some("[mes]\nfrequencies = [7.4, 7.4]\n"), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Validation { .. }), "{err}");
        assert_eq!(err.key(), "mes.frequencies");
        assert!(err.to_string().contains("distinct"));
    }

    #[test]
    fn switching_uncertainty_kind_replaces_table() {
        let doc = "[uncertainty]\nkind = \"time_varying\"\ndelta = [1.0, { kind = \"sine\", amplitude = 0.1, frequency = 2.0 }]\n";
        let cfg = parse_config(ScenarioPreset::StateDepCase2, Some(doc), &["controller.robust_case=case1".into()]).unwrap();
        match cfg.uncertainty {
            UncertaintySpec::TimeVarying { delta } => {
                assert_eq!(delta[0], Waveform::Constant(1.0));
                assert_eq!(delta[1].eval(0.0), 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_scenario() {
        let err = "table9".parse::<ScenarioPreset>().unwrap_err();
        assert_eq!(err.key(), "scenario");
    }

    #[test]
    fn malformed_override() {
        assert!(parse_override("sim.dt").is_err());
        assert!(parse_override("sim..dt=1").is_err());
        let (path, v) = parse_override("mes.frequencies=[1.0, 2.0]").unwrap();
        assert_eq!(path, "mes.frequencies");
        assert!(v["mes"]["frequencies"].is_array());
    }
}
