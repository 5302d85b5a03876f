//! Experiment configuration: TOML documents layered over benchmark defaults,
//! plus dotted-path overrides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histstack::StackParams;
use crate::numerics::{sym_eig_min, Matrix};
use crate::observer::Activation;
use crate::plant::{benchmark_system, BenchmarkId, SafetySpec};
use crate::trainer::LmConfig;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config error at '{field}': {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyMode {
    RobustCbf,
    PlainCbf,
    NoCbf,
}

impl SafetyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SafetyMode::RobustCbf => "robust_cbf",
            SafetyMode::PlainCbf => "plain_cbf",
            SafetyMode::NoCbf => "no_cbf",
        }
    }
}

impl std::str::FromStr for SafetyMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "robust_cbf" => Ok(SafetyMode::RobustCbf),
            "plain_cbf" => Ok(SafetyMode::PlainCbf),
            "no_cbf" => Ok(SafetyMode::NoCbf),
            other => Err(ConfigError::new("mode", format!("unknown mode '{other}'"))),
        }
    }
}

/// Which drift feeds the barrier bounds and the Bellman-error extrapolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftSource {
    Estimated,
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackInit {
    /// Fill the first active stack from a short zero-input run of the
    /// observer model.
    Preroll,
    /// Fill it from integral windows of the offline pretraining runs.
    Offline,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub x0: Vec<f64>,
    pub xhat0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub wa0: Vec<f64>,
    pub wc0: Vec<f64>,
    pub gamma0: Vec<Vec<f64>>,
    pub kc: f64,
    pub ka1: f64,
    pub ka2: f64,
    pub nu: f64,
    pub beta: f64,
    pub w_bar: f64,
    pub kappa_p: f64,
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub extrap_per_axis: usize,
    pub extrap_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    pub a: Vec<Vec<f64>>,
    pub poles: Vec<f64>,
    /// Literal output-injection gain; overrides `poles` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    /// Fill value for the initial outer-layer weights.
    pub theta0: f64,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub feature_layers: Vec<usize>,
    pub bias_feature: bool,
    pub k_theta: f64,
    /// Scalar multiple of the identity used as the adaptation gain.
    pub gamma: f64,
    pub kappa: f64,
    pub theta_bar: f64,
    pub band: f64,
    /// JSON weight document for the inner layers; seeded random weights
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub window: f64,
    pub capacity: usize,
    pub eig_threshold: f64,
    pub sample_period: f64,
    pub purge_ratio: f64,
    pub dwell: f64,
    pub init: StackInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    pub eps: f64,
    pub lip_f: f64,
    pub lip_g: Vec<f64>,
    pub classk_gain: f64,
    /// Symmetric bound applied to each filtered input channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub enabled: bool,
    pub period: f64,
    /// Last time at which training runs; half the duration when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_until: Option<f64>,
    pub sample_stride: usize,
    pub max_samples: usize,
    pub max_epochs: usize,
    pub target_mse: f64,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub val_patience: usize,
    /// Train on the pretraining pairs as well as the logged samples.
    pub keep_offline: bool,
}

/// Offline fit of the network before the closed loop starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub trajectories: usize,
    pub horizon: f64,
    /// Initial states are drawn uniformly from `[-half_width, half_width]ⁿ`.
    pub half_width: f64,
    pub control_amplitude: f64,
    pub control_hold: f64,
    /// Trajectories stop once any state leaves `[-state_limit, state_limit]`.
    pub state_limit: f64,
    pub sample_stride: usize,
    pub max_samples: usize,
    pub rounds: usize,
    pub max_epochs: usize,
    pub ridge: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            trajectories: 40,
            horizon: 2.0,
            half_width: 2.5,
            control_amplitude: 2.0,
            control_hold: 0.2,
            state_limit: 3.0,
            sample_stride: 25,
            max_samples: 500,
            rounds: 4,
            max_epochs: 100,
            ridge: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkId,
    pub duration: f64,
    pub dt: f64,
    pub mode: SafetyMode,
    pub drift_source: DriftSource,
    pub seed: u64,
    pub initial: InitialConfig,
    pub critic: CriticConfig,
    pub observer: ObserverConfig,
    pub stack: StackConfig,
    pub safety: SafetyConfig,
    pub trainer: TrainerConfig,
    pub pretrain: PretrainConfig,
}

fn eye(n: usize, s: f64) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { s } else { 0.0 }).collect()).collect()
}

impl ExperimentConfig {
    /// Printed parameters of each benchmark study, with engineering defaults
    /// where none are given.
    pub fn for_benchmark(id: BenchmarkId) -> Self {
        let (_, safety, _) = benchmark_system(id);
        let stack_defaults = StackParams::default();
        let lm = LmConfig::default();
        let observer_common = |a: Vec<Vec<f64>>, poles: Vec<f64>| ObserverConfig {
            a,
            poles,
            k: None,
            s: eye(2, 1.0),
            theta0: 0.0,
            widths: vec![10, 6, 7],
            activations: vec![Activation::ElliotSym, Activation::LogSigmoid, Activation::TanhSigmoid],
            feature_layers: vec![1, 2],
            bias_feature: false,
            k_theta: 100.0,
            gamma: 1.0,
            kappa: 0.5,
            theta_bar: 50.0,
            band: 0.1,
            weights_file: None,
        };
        let critic_common = |wa0: f64, wc0: f64, gamma0: f64, kc: f64, ka1: f64, ka2: f64| CriticConfig {
            wa0: vec![wa0; 3],
            wc0: vec![wc0; 3],
            gamma0: eye(3, gamma0),
            kc,
            ka1,
            ka2,
            nu: 0.7,
            beta: 0.01,
            w_bar: 10.0,
            kappa_p: 0.1,
            gamma_max: 1e4,
            gamma_min: 1e-6,
            extrap_per_axis: 10,
            extrap_half_width: 1.0,
        };
        let (initial, critic, observer) = match id {
            BenchmarkId::ConvexSet => (
                InitialConfig { x0: vec![-2.0, 1.0], xhat0: vec![-2.5, 1.5] },
                critic_common(0.5, 1.0, 0.5, 5.0, 0.5, 0.1),
                observer_common(vec![vec![-0.6, -1.0], vec![0.0, 0.0]], vec![-5.0, -6.0]),
            ),
            BenchmarkId::Obstacle => (
                InitialConfig { x0: vec![-0.5, 2.0], xhat0: vec![-0.75, 2.25] },
                critic_common(0.5, 0.5, 1.0, 0.5, 1.0, 0.5),
                observer_common(vec![vec![-1.0, -1.0], vec![-0.5, -0.5]], vec![-3.0, -4.0]),
            ),
        };
        Self {
            benchmark: id,
            duration: 30.0,
            dt: 1e-3,
            mode: SafetyMode::RobustCbf,
            drift_source: DriftSource::Estimated,
            seed: 1,
            initial,
            critic,
            observer,
            stack: StackConfig {
                window: stack_defaults.window,
                capacity: stack_defaults.capacity,
                eig_threshold: stack_defaults.eig_threshold,
                sample_period: stack_defaults.sample_period,
                purge_ratio: stack_defaults.purge_ratio,
                dwell: stack_defaults.dwell,
                init: StackInit::Offline,
            },
            safety: SafetyConfig {
                eps: safety.eps,
                lip_f: safety.lip_f,
                lip_g: safety.lip_g.clone(),
                classk_gain: safety.classk_gain,
                u_max: Some(1e3),
            },
            trainer: TrainerConfig {
                enabled: true,
                period: 2.0,
                train_until: None,
                sample_stride: 10,
                max_samples: 400,
                max_epochs: 100,
                target_mse: lm.target_mse,
                damping_init: lm.damping_init,
                damping_up: lm.damping_up,
                damping_down: lm.damping_down,
                val_patience: lm.val_patience,
                keep_offline: true,
            },
            pretrain: PretrainConfig::default(),
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn train_until(&self) -> f64 {
        self.trainer.train_until.unwrap_or(0.5 * self.duration)
    }

    pub fn stack_params(&self) -> StackParams {
        StackParams {
            window: self.stack.window,
            capacity: self.stack.capacity,
            eig_threshold: self.stack.eig_threshold,
            sample_period: self.stack.sample_period,
            purge_ratio: self.stack.purge_ratio,
            dwell: self.stack.dwell,
            kappa: self.observer.kappa,
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            max_epochs: self.trainer.max_epochs,
            target_mse: self.trainer.target_mse,
            damping_init: self.trainer.damping_init,
            damping_up: self.trainer.damping_up,
            damping_down: self.trainer.damping_down,
            val_patience: self.trainer.val_patience,
            ..LmConfig::default()
        }
    }

    pub fn lm_config_with_epochs(&self, max_epochs: usize) -> LmConfig {
        LmConfig { max_epochs, ..self.lm_config() }
    }

    pub fn safety_spec(&self, base: &SafetySpec) -> SafetySpec {
        base.with_robustness(self.safety.eps, self.safety.lip_f, self.safety.lip_g.clone(), self.safety.classk_gain)
    }

    /// Structural checks. Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let err = |f: &str, m: String| Err(ConfigError::new(f, m));
        let (plant, safety, _) = benchmark_system(self.benchmark);
        let n = plant.n();
        let m = plant.m();
        if !(self.dt > 0.0 && self.dt <= crate::numerics::MAX_STEP) {
            return err("dt", format!("must lie in (0, {}], got {}", crate::numerics::MAX_STEP, self.dt));
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return err("duration", format!("must be finite and >= 0, got {}", self.duration));
        }
        let divides = |span: f64| {
            let r = span / self.dt;
            r >= 1.0 - 1e-9 && (r - r.round()).abs() <= 1e-9 * r.max(1.0)
        };
        for (field, span) in [
            ("stack.window", self.stack.window),
            ("stack.sample_period", self.stack.sample_period),
            ("trainer.period", self.trainer.period),
        ] {
            if !divides(span) {
                return err(field, format!("{span} is not a positive multiple of dt = {}", self.dt));
            }
        }
        if self.initial.x0.len() != n || self.initial.xhat0.len() != n {
            return err("initial", format!("x0 and xhat0 need {n} entries"));
        }
        if self.initial.x0.iter().chain(&self.initial.xhat0).any(|v| !v.is_finite()) {
            return err("initial", "non-finite initial state".into());
        }
        let l = 3;
        if self.critic.wa0.len() != l || self.critic.wc0.len() != l {
            return err("critic", format!("wa0 and wc0 need {l} entries"));
        }
        let gamma0 = matrix_field("critic.gamma0", &self.critic.gamma0, l, l)?;
        if sym_eig_min(&gamma0).map_err(|e| ConfigError::new("critic.gamma0", e.to_string()))? <= 0.0 {
            return err("critic.gamma0", "must be symmetric positive definite".into());
        }
        if self.critic.extrap_per_axis == 0 || !(self.critic.extrap_half_width > 0.0) {
            return err("critic.extrap_per_axis", "need at least one point and positive half width".into());
        }
        matrix_field("observer.a", &self.observer.a, n, n)?;
        let s = matrix_field("observer.s", &self.observer.s, n, n)?;
        if sym_eig_min(&s).map_err(|e| ConfigError::new("observer.s", e.to_string()))? <= 0.0 {
            return err("observer.s", "must be symmetric positive definite".into());
        }
        if self.observer.poles.len() != n {
            return err("observer.poles", format!("need {n} poles"));
        }
        if let Some(k) = &self.observer.k {
            if k.len() != n {
                return err("observer.k", format!("need {n} entries"));
            }
        }
        if self.observer.widths.len() != self.observer.activations.len() || self.observer.widths.is_empty() {
            return err("observer.activations", "need one activation per layer".into());
        }
        if self.observer.widths.iter().any(|w| *w == 0) {
            return err("observer.widths", "layer widths must be positive".into());
        }
        if self.observer.feature_layers.iter().any(|f| *f >= self.observer.widths.len()) {
            return err("observer.feature_layers", "index out of range".into());
        }
        if !(self.observer.gamma > 0.0) {
            return err("observer.gamma", "must be > 0".into());
        }
        if self.safety.u_max.is_some_and(|b| !(b > 0.0)) {
            return err("safety.u_max", "must be > 0".into());
        }
        if self.safety.lip_g.len() != m {
            return err("safety.lip_g", format!("need {m} entries"));
        }
        self.stack_params().validate().map_err(|e| ConfigError::new("stack", e.to_string()))?;
        self.lm_config().validate().map_err(|e| ConfigError::new("trainer", e.to_string()))?;
        if self.trainer.sample_stride == 0 {
            return err("trainer.sample_stride", "must be >= 1".into());
        }
        let pc = &self.pretrain;
        if pc.enabled {
            if pc.trajectories == 0 || pc.sample_stride == 0 || pc.max_samples < 3 {
                return err("pretrain", "need trajectories, sample_stride >= 1 and max_samples >= 3".into());
            }
            if !(pc.horizon > 0.0 && pc.half_width > 0.0 && pc.control_hold > 0.0 && pc.state_limit > pc.half_width) {
                return err("pretrain", "horizon, half_width, control_hold must be > 0 and state_limit > half_width".into());
            }
            if !(pc.ridge >= 0.0 && pc.control_amplitude >= 0.0) {
                return err("pretrain", "ridge and control_amplitude must be >= 0".into());
            }
        } else if self.stack.init == StackInit::Offline {
            return err("stack.init", "offline initialization needs pretrain.enabled".into());
        }
        let spec = self.safety_spec(&safety);
        spec.validate().map_err(|e| ConfigError::new("safety", e.to_string()))?;

        let mut warnings = Vec::new();
        if self.mode == SafetyMode::RobustCbf && !ball_inside_safe_set(&spec, &self.initial.xhat0, self.safety.eps) {
            warnings.push(format!(
                "closed ball of radius eps = {} around xhat0 is not contained in the safe set",
                self.safety.eps
            ));
        }
        if safety.h(&self.initial.x0) < 0.0 {
            warnings.push("initial state x0 is outside the safe set".into());
        }
        Ok(warnings)
    }
}

/// Samples the closed ball on concentric rings and checks `h ≥ 0`.
pub fn ball_inside_safe_set(spec: &SafetySpec, center: &[f64], radius: f64) -> bool {
    if spec.h(center) < 0.0 {
        return false;
    }
    let rings = 20;
    let angles = 360;
    for r in 1..=rings {
        let rad = radius * r as f64 / rings as f64;
        for a in 0..angles {
            let th = 2.0 * std::f64::consts::PI * a as f64 / angles as f64;
            let p = [center[0] + rad * th.cos(), center[1] + rad * th.sin()];
            if spec.h(&p) < 0.0 {
                return false;
            }
        }
    }
    true
}

pub fn matrix_field(field: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<Matrix, ConfigError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(ConfigError::new(field, format!("expected a {r}x{c} matrix")));
    }
    Matrix::from_rows(rows).map_err(|e| ConfigError::new(field, e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path = value` onto a table. The parent table must exist.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(key, "malformed key"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(ConfigError::new(key, format!("unknown section '{p}'"))),
        };
    }
    let leaf = parts[parts.len() - 1];
    let mut value = parse_override_value(raw);
    match (cur.get(leaf), &value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => value = toml::Value::Float(*i as f64),
        (Some(toml::Value::String(_)), v) if !matches!(v, toml::Value::String(_)) => {
            value = toml::Value::String(raw.to_string());
        }
        (Some(existing), v) if std::mem::discriminant(existing) != std::mem::discriminant(v) => {
            let numeric = matches!(existing, toml::Value::Float(_) | toml::Value::Integer(_));
            if numeric || !matches!(v, toml::Value::String(_)) {
                return Err(ConfigError::new(key, format!("cannot use '{raw}' here (expected {})", existing.type_str())));
            }
        }
        (None, _) if !matches!(leaf, "k" | "weights_file" | "train_until" | "u_max") => {
            return Err(ConfigError::new(key, "unknown key"));
        }
        _ => {}
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

/// Builds a configuration from an optional TOML document and overrides,
/// starting from the defaults of the selected benchmark.
pub fn load_config(text: Option<&str>, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let user: toml::Table = match text {
        Some(t) => toml::from_str(t).map_err(|e| ConfigError::new("<document>", e.to_string()))?,
        None => toml::Table::new(),
    };
    let bench_raw = overrides
        .iter()
        .rev()
        .find(|(k, _)| k == "benchmark")
        .map(|(_, v)| v.trim().trim_matches('"').to_string())
        .or_else(|| user.get("benchmark").and_then(|v| v.as_str()).map(str::to_string))
        .unwrap_or_else(|| "convex_set".into());
    let bench: BenchmarkId = bench_raw.parse().map_err(|e: crate::plant::PlantError| ConfigError::new("benchmark", e.to_string()))?;
    let defaults = ExperimentConfig::for_benchmark(bench);
    let mut table = toml::Table::try_from(&defaults).map_err(|e| ConfigError::new("<defaults>", e.to_string()))?;
    merge(&mut table, user);
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::new(error_field(&e), e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn error_field(e: &toml::de::Error) -> String {
    let msg = e.to_string();
    // toml reports the offending key in backticks for missing/unknown fields.
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "<document>".into())
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::new(s, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}
