//! Attack method selection from flat key/value settings.

use sigattack_core::attack::AttackConfig;
use sigattack_core::baselines::{comparison_rows, BaselineConfig, Direction, Method};
use sigattack_core::config::KeyValues;
use sigattack_core::{Error, Result};

/// One configured attack: the proposed method or a baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    Ours(AttackConfig),
    Baseline(BaselineConfig),
}

/// A method together with the decision it tries to flip.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub method: MethodSpec,
    pub direction: Direction,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Ours(c) if c.gamma == 0.0 => "ours-no-st".into(),
            MethodSpec::Ours(_) => "ours".into(),
            MethodSpec::Baseline(b) => b.label(),
        }
    }

    /// Resolved settings; feeding them back through [`MethodSpec::from_echo`]
    /// rebuilds the same method.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        match self {
            MethodSpec::Ours(c) => {
                put("method", "ours".into());
                put("alpha", c.alpha.to_string());
                put("beta", c.beta.to_string());
                put("gamma", c.gamma.to_string());
                put("delta", c.delta.to_string());
                put("tau", c.tau.to_string());
                if let Some(t) = c.attack_tau {
                    put("attack_tau", t.to_string());
                }
                put("epochs", c.epochs.to_string());
                put("lr", c.adam.lr.to_string());
                put("style_layers", c.style_layers.join(","));
            }
            MethodSpec::Baseline(b) => {
                put("method", b.method.as_str().into());
                put("direction", b.direction.as_str().into());
                put("epsilon", b.epsilon.to_string());
                put("step", b.step.to_string());
                put("mu", b.mu.to_string());
                put("vmi_beta", b.vmi_beta.to_string());
                put("vmi_samples", b.vmi_samples.to_string());
                put("c", b.cw_c.to_string());
                put("cw_lr", b.cw_lr.to_string());
                put("tau", b.tau.to_string());
                put("iterations", b.iterations.to_string());
                put("foreground", b.foreground_mask.to_string());
                put("style", b.with_style.to_string());
                put("style_weight", b.style_weight.to_string());
                put("random_start", b.random_start.to_string());
                put("seed", b.seed.to_string());
            }
        }
        out
    }

    pub fn from_echo(echo: &[(String, String)], tau: f64) -> Result<Self> {
        let kv: KeyValues = echo.iter().cloned().collect();
        let mut spec = single(&kv, tau, None)?;
        spec.set_tau(tau);
        Ok(spec)
    }

    pub fn set_tau(&mut self, tau: f64) {
        match self {
            MethodSpec::Ours(c) => c.tau = tau,
            MethodSpec::Baseline(b) => b.tau = tau,
        }
    }
}

impl Job {
    pub fn label(&self) -> String {
        format!("{}/{}", self.method.label(), self.direction.as_str())
    }
}

/// Builds the jobs selected by `settings`.
///
/// `method` picks `ours` (default), a baseline name, or `table` for every
/// comparison row in both directions plus the proposed attack. `direction`
/// (default `fp`) applies to baselines; the proposed attack is FP only.
pub fn jobs_from_settings(settings: &KeyValues, tau: f64) -> Result<Vec<Job>> {
    let method = settings.get("method").map(String::as_str).unwrap_or("ours");
    if method == "table" {
        let extra: Vec<&String> = settings.keys().filter(|k| !matches!(k.as_str(), "method" | "preset")).collect();
        if !extra.is_empty() {
            return Err(Error::Config(format!("method=table takes no further settings, got {extra:?}")));
        }
        let ours = ours_config(settings, tau)?;
        let mut jobs = vec![Job {
            method: MethodSpec::Ours(ours.clone()),
            direction: Direction::Fp,
        }];
        for direction in [Direction::Fp, Direction::Tn] {
            for mut row in comparison_rows(ours.gamma) {
                row.tau = tau;
                row.direction = direction;
                jobs.push(Job {
                    method: MethodSpec::Baseline(row),
                    direction,
                });
            }
        }
        return Ok(jobs);
    }
    let direction = match settings.get("direction") {
        Some(d) => Direction::parse(d).ok_or_else(|| Error::Config(format!("direction must be tn or fp, got {d:?}")))?,
        None => Direction::Fp,
    };
    let spec = single(settings, tau, Some(direction))?;
    if matches!(spec, MethodSpec::Ours(_)) && direction != Direction::Fp {
        return Err(Error::Config("the proposed attack only runs in the fp direction".into()));
    }
    Ok(vec![Job { method: spec, direction }])
}

fn ours_config(settings: &KeyValues, tau: f64) -> Result<AttackConfig> {
    let preset = settings.get("preset").map(String::as_str).unwrap_or("desk");
    AttackConfig::preset(preset, tau)
}

fn single(settings: &KeyValues, tau: f64, direction: Option<Direction>) -> Result<MethodSpec> {
    let name = settings.get("method").map(String::as_str).unwrap_or("ours");
    if name == "ours" {
        let mut cfg = ours_config(settings, tau)?;
        for (k, v) in settings {
            if matches!(k.as_str(), "method" | "preset" | "direction") {
                continue;
            }
            if !cfg.apply(k, v)? {
                return Err(Error::Config(format!("unknown setting {k:?} for the proposed attack")));
            }
        }
        return Ok(MethodSpec::Ours(cfg));
    }
    let method = Method::parse(name).ok_or_else(|| Error::Config(format!("unknown attack method {name:?}")))?;
    let mut cfg = BaselineConfig::new(method, 0.3);
    cfg.tau = tau;
    cfg.style_weight = ours_config(settings, tau)?.gamma;
    if let Some(d) = direction {
        cfg.direction = d;
    }
    let mut step_given = false;
    for (k, v) in settings {
        if k == "preset" {
            continue;
        }
        step_given |= matches!(k.as_str(), "alpha" | "step");
        if !cfg.apply(k, v)? {
            return Err(Error::Config(format!("unknown setting {k:?} for method {name}")));
        }
    }
    if !step_given {
        cfg.step = cfg.epsilon / 3.0;
    }
    cfg.validate()?;
    Ok(MethodSpec::Baseline(cfg))
}
