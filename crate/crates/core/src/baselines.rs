//! Gradient-based comparison attacks adapted to a distance verifier.
//!
//! Every method minimizes `J = s·D + γ_st·L_style` over the pixels, with
//! `s = +1` for false-positive attacks (pull a forgery towards the genuine
//! reference) and `s = −1` for true-negative attacks (push a genuine image
//! away).

use crate::attack::{style_term, GenuineTarget};
use crate::config::{parse_bool, parse_value};
use crate::data::SigImage;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::optim::{Adam, AdamSettings};
use crate::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Foreground threshold: pixels above this value may be perturbed when
/// masking is enabled.
pub const FOREGROUND_LEVEL: f64 = 155.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Fgsm,
    Igs,
    Mim,
    Pgd,
    Cw,
    VmiFgsm,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Igs => "igs",
            Method::Mim => "mim",
            Method::Pgd => "pgd",
            Method::Cw => "cw",
            Method::VmiFgsm => "vmi_fgsm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fgsm" => Some(Method::Fgsm),
            "igs" | "bim" => Some(Method::Igs),
            "mim" => Some(Method::Mim),
            "pgd" => Some(Method::Pgd),
            "cw" | "c&w" => Some(Method::Cw),
            "vmi_fgsm" | "vmi" => Some(Method::VmiFgsm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Make a genuine pair look dissimilar (maximize D).
    Tn,
    /// Make a forged pair look similar (minimize D).
    Fp,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Tn => -1.0,
            Direction::Fp => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Tn => "tn",
            Direction::Fp => "fp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tn" => Some(Direction::Tn),
            "fp" => Some(Direction::Fp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub method: Method,
    pub epsilon: f64,
    /// Per-step size for PGD.
    pub step: f64,
    pub mu: f64,
    pub vmi_beta: f64,
    pub vmi_samples: usize,
    pub cw_c: f64,
    pub cw_lr: f64,
    /// Verification threshold, used by the C&W surrogate.
    pub tau: f64,
    pub iterations: usize,
    pub direction: Direction,
    pub foreground_mask: bool,
    pub with_style: bool,
    pub style_weight: f64,
    pub style_layers: Vec<String>,
    pub random_start: bool,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(method: Method, epsilon: f64) -> Self {
        Self {
            method,
            epsilon,
            step: epsilon / 3.0,
            mu: 0.9,
            vmi_beta: 1.5,
            vmi_samples: 5,
            cw_c: 0.1,
            cw_lr: 1e-2,
            tau: 1.0,
            iterations: 50,
            direction: Direction::Fp,
            foreground_mask: false,
            with_style: false,
            style_weight: 0.0,
            style_layers: vec!["conv1".into(), "conv2".into(), "conv3".into()],
            random_start: false,
            seed: 0,
        }
    }

    /// Applies one config key; returns `false` for keys this config does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "method" => {
                self.method =
                    Method::parse(value).ok_or_else(|| Error::Config(format!("unknown attack method {value:?}")))?
            }
            "epsilon" | "eps" => self.epsilon = parse_value(key, value)?,
            "alpha" | "step" => self.step = parse_value(key, value)?,
            "mu" => self.mu = parse_value(key, value)?,
            "beta" | "vmi_beta" => self.vmi_beta = parse_value(key, value)?,
            "n" | "N" | "vmi_samples" => self.vmi_samples = parse_value(key, value)?,
            "c" => self.cw_c = parse_value(key, value)?,
            "cw_lr" => self.cw_lr = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "iterations" | "epochs" => self.iterations = parse_value(key, value)?,
            "direction" => {
                self.direction = Direction::parse(value)
                    .ok_or_else(|| Error::Config(format!("direction must be tn or fp, got {value:?}")))?
            }
            "foreground" => self.foreground_mask = parse_bool(key, value)?,
            "style" => self.with_style = parse_bool(key, value)?,
            "style_weight" | "gamma_st" => self.style_weight = parse_value(key, value)?,
            "random_start" => self.random_start = parse_bool(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        match self.method {
            Method::Cw => {
                if !(self.cw_c >= 0.0) {
                    return bad(format!("c must be nonnegative, got {}", self.cw_c));
                }
                if !(self.tau > 0.0) {
                    return bad(format!("tau must be positive, got {}", self.tau));
                }
            }
            _ => {
                if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
                    return bad(format!("epsilon must be nonnegative, got {}", self.epsilon));
                }
            }
        }
        if self.method == Method::Pgd && !(self.step >= 0.0) {
            return bad(format!("step must be nonnegative, got {}", self.step));
        }
        if self.method == Method::VmiFgsm && (self.vmi_samples == 0 || !(self.vmi_beta >= 0.0)) {
            return bad(format!("VMI needs N >= 1 and beta >= 0, got N={} beta={}", self.vmi_samples, self.vmi_beta));
        }
        if self.with_style && !(self.style_weight >= 0.0) {
            return bad(format!("style weight must be nonnegative, got {}", self.style_weight));
        }
        Ok(())
    }

    /// Short row label, e.g. `pgd-fg(eps=0.3,alpha=0.1)`.
    pub fn label(&self) -> String {
        let mut name = self.method.as_str().to_string();
        if self.with_style {
            name.push_str("-st");
        }
        if self.foreground_mask {
            name.push_str("-fg");
        }
        let params = match self.method {
            Method::Fgsm | Method::Igs => format!("eps={}", self.epsilon),
            Method::Mim => format!("eps={},mu={}", self.epsilon, self.mu),
            Method::Pgd => format!("eps={},alpha={}", self.epsilon, self.step),
            Method::Cw => format!("c={}", self.cw_c),
            Method::VmiFgsm => format!("eps={},beta={}", self.epsilon, self.vmi_beta),
        };
        format!("{name}({params})")
    }
}

/// Comparison rows: aggressive and conservative settings per method.
pub fn comparison_rows(style_weight: f64) -> Vec<BaselineConfig> {
    let mut rows = Vec::new();
    for (eps, step) in [(0.3, 0.1), (0.05, 0.01)] {
        let base = BaselineConfig {
            step,
            ..BaselineConfig::new(Method::Pgd, eps)
        };
        rows.push(base.clone());
        rows.push(BaselineConfig {
            with_style: true,
            style_weight,
            ..base.clone()
        });
        rows.push(BaselineConfig {
            foreground_mask: true,
            ..base
        });
    }
    for beta in [3.0, 1.5] {
        for eps in [0.3, 0.05] {
            rows.push(BaselineConfig {
                vmi_beta: beta,
                ..BaselineConfig::new(Method::VmiFgsm, eps)
            });
        }
    }
    for c in [0.1, 0.0] {
        rows.push(BaselineConfig {
            cw_c: c,
            ..BaselineConfig::new(Method::Cw, 0.0)
        });
    }
    for method in [Method::Mim, Method::Igs, Method::Fgsm] {
        for eps in [0.3, 0.05] {
            rows.push(BaselineConfig::new(method, eps));
        }
    }
    rows
}

/// Source of distances and pixel gradients for the attacks. Implemented by
/// the real verifier and by small analytic models in tests.
pub trait Victim {
    /// Returns `D(x)` and `∇ₓ(w_d·D + w_s·L_style)`.
    fn evaluate(&self, x: &[f64], distance_weight: f64, style_weight: f64) -> Result<(f64, Vec<f64>)>;
}

/// A frozen verifier with a fixed genuine reference.
pub struct ModelVictim<'a> {
    model: &'a ModelWeights,
    target: GenuineTarget,
    template: SigImage,
}

impl<'a> ModelVictim<'a> {
    pub fn new(model: &'a ModelWeights, genuine: &SigImage, style_layers: &[String]) -> Result<Self> {
        if !model.is_frozen() {
            return Err(Error::Contract("attacks require frozen model weights".into()));
        }
        Ok(Self {
            model,
            target: GenuineTarget::new(model, genuine, style_layers)?,
            template: SigImage::blank(genuine.height, genuine.width),
        })
    }
}

impl Victim for ModelVictim<'_> {
    fn evaluate(&self, x: &[f64], distance_weight: f64, style_weight: f64) -> Result<(f64, Vec<f64>)> {
        let (h, w) = (self.template.height, self.template.width);
        let mut g = Graph::new();
        let image = g.param(Tensor::new(&[1, 1, h, w], x.to_vec())?);
        let trace = self.model.forward(&mut g, image, false)?;
        let d = self.model.arch().embed_dim;
        let emb = g.reshape(trace.embedding, &[d])?;
        let genuine = g.constant(self.target.embedding.clone());
        let dist = g.euclidean_distance(emb, genuine)?;
        let mut loss = g.mul_scalar(dist, distance_weight)?;
        if style_weight != 0.0 {
            let s = style_term(&mut g, &trace.features, &self.target)?;
            let s = g.mul_scalar(s, style_weight)?;
            loss = g.add(loss, s)?;
        }
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("attack objective is {value}")));
        }
        let distance = g.value(dist).item()?;
        g.backward(loss)?;
        let grad = g.grad(image).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((distance, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub pixels: Vec<f64>,
    /// Iterations whose (masked) gradient was identically zero, so no step
    /// was taken.
    pub zero_gradient_steps: usize,
}

impl BaselineOutcome {
    pub fn zero_gradient_warning(&self) -> bool {
        self.zero_gradient_steps > 0
    }
}

/// `1` where a pixel may change, `0` elsewhere.
pub fn foreground_mask(start: &[f64], enabled: bool) -> Vec<f64> {
    start
        .iter()
        .map(|&p| if !enabled || p > FOREGROUND_LEVEL { 1.0 } else { 0.0 })
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Runs the configured method from `start` against `victim`.
pub fn run_baseline<V: Victim>(victim: &V, start: &[f64], cfg: &BaselineConfig) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let mask = foreground_mask(start, cfg.foreground_mask);
    let s = cfg.direction.sign();
    let style_w = if cfg.with_style { cfg.style_weight } else { 0.0 };
    let grad = |x: &[f64]| -> Result<Vec<f64>> {
        let (_, mut g) = victim.evaluate(x, s, style_w)?;
        for (gi, m) in g.iter_mut().zip(&mask) {
            *gi *= m;
        }
        Ok(g)
    };
    match cfg.method {
        Method::Fgsm => sign_iterations(start, start, &mask, cfg.epsilon, cfg.epsilon, 1, None, grad),
        Method::Igs => {
            let t = cfg.iterations;
            sign_iterations(start, start, &mask, cfg.epsilon, cfg.epsilon / t as f64, t, None, grad)
        }
        Method::Pgd => {
            let mut x0 = start.to_vec();
            if cfg.random_start {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                for (x, m) in x0.iter_mut().zip(&mask) {
                    let r = rng.random_range(-1.0..=1.0) * cfg.epsilon;
                    *x = (*x + r * m).clamp(0.0, 1.0);
                }
            }
            sign_iterations(start, &x0, &mask, cfg.epsilon, cfg.step, cfg.iterations, None, grad)
        }
        Method::Mim => {
            let t = cfg.iterations;
            sign_iterations(start, start, &mask, cfg.epsilon, cfg.epsilon / t as f64, t, Some(cfg.mu), grad)
        }
        Method::VmiFgsm => vmi_fgsm(start, &mask, cfg, grad),
        Method::Cw => cw(victim, start, &mask, cfg),
    }
}

fn project(x: &mut [f64], center: &[f64], eps: f64) {
    for (xi, ci) in x.iter_mut().zip(center) {
        *xi = xi.clamp(ci - eps, ci + eps).clamp(0.0, 1.0);
    }
}

/// Sign steps of size `step` from `x0`, projected onto the ε-ball around
/// `start` and the unit box; with `mu` the sign is taken of an L1-normalized
/// momentum.
#[allow(clippy::too_many_arguments)]
fn sign_iterations<G>(
    start: &[f64],
    x0: &[f64],
    mask: &[f64],
    eps: f64,
    step: f64,
    iterations: usize,
    mu: Option<f64>,
    grad: G,
) -> Result<BaselineOutcome>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = x0.to_vec();
    let mut momentum = vec![0.0; x.len()];
    let mut zero = 0;
    for _ in 0..iterations {
        let g = grad(&x)?;
        let norm = l1(&g);
        if norm == 0.0 {
            zero += 1;
        }
        let direction: &[f64] = match mu {
            Some(mu) => {
                for (m, gi) in momentum.iter_mut().zip(&g) {
                    *m = if norm > 0.0 { mu * *m + gi / norm } else { mu * *m };
                }
                &momentum
            }
            None => &g,
        };
        for ((xi, d), m) in x.iter_mut().zip(direction).zip(mask) {
            *xi -= step * sign(*d) * m;
        }
        project(&mut x, start, eps);
    }
    Ok(BaselineOutcome {
        pixels: x,
        zero_gradient_steps: zero,
    })
}

fn vmi_fgsm<G>(start: &[f64], mask: &[f64], cfg: &BaselineConfig, grad: G) -> Result<BaselineOutcome>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = start.len();
    let t = cfg.iterations;
    let step = cfg.epsilon / t as f64;
    let radius = cfg.vmi_beta * cfg.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = start.to_vec();
    let mut momentum = vec![0.0; n];
    let mut variance = vec![0.0; n];
    let mut zero = 0;
    let mut neighbor = vec![0.0; n];
    for _ in 0..t {
        let g = grad(&x)?;
        let tuned: Vec<f64> = g.iter().zip(&variance).map(|(a, b)| a + b).collect();
        let norm = l1(&tuned);
        if norm == 0.0 {
            zero += 1;
        }
        for (m, gi) in momentum.iter_mut().zip(&tuned) {
            *m = if norm > 0.0 { cfg.mu * *m + gi / norm } else { cfg.mu * *m };
        }

        let mut mean = vec![0.0; n];
        for _ in 0..cfg.vmi_samples {
            for (nb, xi) in neighbor.iter_mut().zip(&x) {
                let r = if radius > 0.0 { rng.random_range(-radius..=radius) } else { 0.0 };
                *nb = xi + r;
            }
            for (acc, gi) in mean.iter_mut().zip(grad(&neighbor)?) {
                *acc += gi;
            }
        }
        let k = cfg.vmi_samples as f64;
        for ((v, acc), gi) in variance.iter_mut().zip(&mean).zip(&g) {
            *v = acc / k - gi;
        }

        for ((xi, d), m) in x.iter_mut().zip(&momentum).zip(mask) {
            *xi -= step * sign(*d) * m;
        }
        project(&mut x, start, cfg.epsilon);
    }
    Ok(BaselineOutcome {
        pixels: x,
        zero_gradient_steps: zero,
    })
}

/// Adam on `‖x − start‖² + c·f` with `f = max(0, D − τ)` (FP) or
/// `max(0, τ − D)` (TN), clamped to the unit box.
fn cw<V: Victim>(victim: &V, start: &[f64], mask: &[f64], cfg: &BaselineConfig) -> Result<BaselineOutcome> {
    let mut x = start.to_vec();
    let mut adam = Adam::new(AdamSettings::with_lr(cfg.cw_lr), x.len());
    let mut zero = 0;
    for iter in 0..cfg.iterations {
        let mut grad: Vec<f64> = x.iter().zip(start).map(|(a, b)| 2.0 * (a - b)).collect();
        if cfg.cw_c > 0.0 {
            let s = cfg.direction.sign();
            let (d, gd) = victim.evaluate(&x, s, 0.0)?;
            let active = match cfg.direction {
                Direction::Fp => d > cfg.tau,
                Direction::Tn => d < cfg.tau,
            };
            if active {
                for (gi, di) in grad.iter_mut().zip(&gd) {
                    *gi += cfg.cw_c * di;
                }
            }
        }
        for (gi, m) in grad.iter_mut().zip(mask) {
            *gi *= m;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite C&W gradient in iteration {iter}")));
        }
        if grad.iter().all(|&g| g == 0.0) {
            zero += 1;
        }
        adam.step(&mut x, &grad);
        for xi in &mut x {
            *xi = xi.clamp(0.0, 1.0);
        }
    }
    Ok(BaselineOutcome {
        pixels: x,
        zero_gradient_steps: zero,
    })
}

/// Convenience wrapper: attacks `start` against `genuine` on a frozen model.
pub fn attack_image(model: &ModelWeights, genuine: &SigImage, start: &SigImage, cfg: &BaselineConfig) -> Result<(SigImage, BaselineOutcome)> {
    let layers: &[String] = if cfg.with_style { &cfg.style_layers } else { &[] };
    let victim = ModelVictim::new(model, genuine, layers)?;
    let out = run_baseline(&victim, &start.pixels, cfg)?;
    Ok((start.with_pixels(&out.pixels), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `D = b + Σ aᵢxᵢ`
    struct Linear {
        a: Vec<f64>,
        b: f64,
    }

    impl Victim for Linear {
        fn evaluate(&self, x: &[f64], wd: f64, _ws: f64) -> Result<(f64, Vec<f64>)> {
            let d = self.b + self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>();
            Ok((d, self.a.iter().map(|a| wd * a).collect()))
        }
    }

    /// `D = Σ wᵢ(xᵢ − cᵢ)²`
    struct Bowl {
        c: Vec<f64>,
        w: Vec<f64>,
    }

    impl Victim for Bowl {
        fn evaluate(&self, x: &[f64], wd: f64, _ws: f64) -> Result<(f64, Vec<f64>)> {
            let d = x.iter().zip(&self.c).zip(&self.w).map(|((x, c), w)| w * (x - c) * (x - c)).sum();
            let g = x.iter().zip(&self.c).zip(&self.w).map(|((x, c), w)| wd * 2.0 * w * (x - c)).collect();
            Ok((d, g))
        }
    }

    fn bowl() -> Bowl {
        Bowl {
            c: vec![0.9, 0.1, 0.45, 0.7, 0.2],
            w: vec![1.0, 2.0, 0.5, 3.0, 1.5],
        }
    }

    const START: [f64; 5] = [0.2, 0.8, 0.5, 0.0, 0.65];

    #[test]
    fn fgsm_scalar_step() {
        let v = Linear { a: vec![0.8], b: 0.0 };
        let cfg = BaselineConfig::new(Method::Fgsm, 0.1);
        let out = run_baseline(&v, &[0.5], &cfg).unwrap();
        assert!((out.pixels[0] - 0.4).abs() < 1e-15);
        let cfg = BaselineConfig::new(Method::Fgsm, 0.0);
        assert_eq!(run_baseline(&v, &[0.5], &cfg).unwrap().pixels, vec![0.5]);
    }

    #[test]
    fn zero_gradient_is_flagged() {
        let v = Linear { a: vec![0.0; 3], b: 1.0 };
        for method in [Method::Fgsm, Method::Igs, Method::Mim, Method::Pgd, Method::VmiFgsm] {
            let out = run_baseline(&v, &[0.1, 0.5, 0.9], &BaselineConfig::new(method, 0.3)).unwrap();
            assert_eq!(out.pixels, vec![0.1, 0.5, 0.9], "{method:?}");
            assert!(out.zero_gradient_warning());
        }
        let ok = run_baseline(&bowl(), &START, &BaselineConfig::new(Method::Fgsm, 0.1)).unwrap();
        assert!(!ok.zero_gradient_warning());
    }

    #[test]
    fn direction_flip_negates_first_step() {
        let start = [0.5, 0.5, 0.5, 0.5, 0.5];
        let mut cfg = BaselineConfig::new(Method::Fgsm, 0.1);
        let fp = run_baseline(&bowl(), &start, &cfg).unwrap().pixels;
        cfg.direction = Direction::Tn;
        let tn = run_baseline(&bowl(), &start, &cfg).unwrap().pixels;
        for i in 0..5 {
            assert_eq!(fp[i] - 0.5, -(tn[i] - 0.5));
        }
    }

    #[test]
    fn masked_background_is_bitwise_unchanged() {
        for method in [Method::Fgsm, Method::Igs, Method::Mim, Method::Pgd, Method::VmiFgsm, Method::Cw] {
            let mut cfg = BaselineConfig::new(method, 0.3);
            cfg.foreground_mask = true;
            cfg.cw_c = 10.0;
            cfg.tau = 1e-3;
            let out = run_baseline(&bowl(), &START, &cfg).unwrap();
            for (i, (&p, &s)) in out.pixels.iter().zip(&START).enumerate() {
                if s <= FOREGROUND_LEVEL {
                    assert_eq!(p.to_bits(), s.to_bits(), "{method:?} pixel {i}");
                }
                assert!((0.0..=1.0).contains(&p));
            }
            assert_ne!(out.pixels, START.to_vec(), "{method:?}");
        }
    }

    #[test]
    fn single_iteration_reduces_to_fgsm() {
        let fgsm = run_baseline(&bowl(), &START, &BaselineConfig::new(Method::Fgsm, 0.1)).unwrap();
        let mut igs = BaselineConfig::new(Method::Igs, 0.1);
        igs.iterations = 1;
        assert_eq!(run_baseline(&bowl(), &START, &igs).unwrap(), fgsm);
        let mut pgd = BaselineConfig::new(Method::Pgd, 0.3);
        pgd.step = 0.1;
        pgd.iterations = 1;
        assert_eq!(run_baseline(&bowl(), &START, &pgd).unwrap(), fgsm);
    }

    #[test]
    fn pgd_stays_in_ball() {
        for random_start in [false, true] {
            let mut cfg = BaselineConfig::new(Method::Pgd, 0.05);
            cfg.step = 0.02;
            cfg.random_start = random_start;
            cfg.seed = 4;
            let out = run_baseline(&bowl(), &START, &cfg).unwrap();
            for (p, s) in out.pixels.iter().zip(&START) {
                assert!((p - s).abs() <= 0.05 + 1e-15);
            }
        }
    }

    #[test]
    fn mim_without_momentum_equals_igs() {
        let mut mim = BaselineConfig::new(Method::Mim, 0.3);
        mim.mu = 0.0;
        let igs = BaselineConfig::new(Method::Igs, 0.3);
        let a = run_baseline(&bowl(), &START, &mim).unwrap();
        let b = run_baseline(&bowl(), &START, &igs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vmi_degenerate_cases_match_mim() {
        let mim = run_baseline(&bowl(), &START, &BaselineConfig::new(Method::Mim, 0.3)).unwrap();
        let mut vmi = BaselineConfig::new(Method::VmiFgsm, 0.3);
        vmi.vmi_samples = 1;
        vmi.vmi_beta = 0.0;
        assert_eq!(run_baseline(&bowl(), &START, &vmi).unwrap(), mim);

        let lin = Linear {
            a: vec![0.3, -0.2, 0.7, -0.5, 0.1],
            b: 2.0,
        };
        let mim = run_baseline(&lin, &START, &BaselineConfig::new(Method::Mim, 0.3)).unwrap();
        let mut vmi = BaselineConfig::new(Method::VmiFgsm, 0.3);
        vmi.vmi_beta = 3.0;
        assert_eq!(run_baseline(&lin, &START, &vmi).unwrap(), mim);
    }

    #[test]
    fn vmi_is_seeded() {
        let mut cfg = BaselineConfig::new(Method::VmiFgsm, 0.3);
        cfg.vmi_beta = 3.0;
        cfg.seed = 11;
        let a = run_baseline(&bowl(), &START, &cfg).unwrap();
        assert_eq!(a, run_baseline(&bowl(), &START, &cfg).unwrap());
    }

    #[test]
    fn cw_degenerate_cases_do_not_move() {
        let mut cfg = BaselineConfig::new(Method::Cw, 0.0);
        cfg.cw_c = 0.0;
        let out = run_baseline(&bowl(), &START, &cfg).unwrap();
        assert_eq!(out.pixels, START.to_vec());

        let at_target = bowl().c.clone();
        cfg.cw_c = 5.0;
        cfg.tau = 0.1;
        let out = run_baseline(&bowl(), &at_target, &cfg).unwrap();
        assert_eq!(out.pixels, at_target);
    }

    #[test]
    fn cw_large_c_reaches_the_threshold() {
        let v = bowl();
        let (d0, _) = v.evaluate(&START, 1.0, 0.0).unwrap();
        let mut cfg = BaselineConfig::new(Method::Cw, 0.0);
        cfg.cw_c = 100.0;
        cfg.cw_lr = 0.05;
        cfg.tau = 0.5 * d0;
        let out = run_baseline(&v, &START, &cfg).unwrap();
        let (d, _) = v.evaluate(&out.pixels, 1.0, 0.0).unwrap();
        assert!(d <= cfg.tau + 0.05 * d0, "{d} vs {}", cfg.tau);
    }

    #[test]
    fn config_keys_and_validation() {
        let mut cfg = BaselineConfig::new(Method::Fgsm, 0.3);
        for (k, v) in [("method", "pgd"), ("alpha", "0.1"), ("foreground", "true"), ("direction", "tn")] {
            assert!(cfg.apply(k, v).unwrap());
        }
        assert!(!cfg.apply("gamma", "1").unwrap());
        assert!(cfg.apply("method", "nope").is_err());
        assert_eq!(cfg.label(), "pgd-fg(eps=0.3,alpha=0.1)");
        assert_eq!(cfg.direction, Direction::Tn);
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        let rows = comparison_rows(1.0);
        assert_eq!(rows.len(), 18);
        assert!(rows.iter().all(|r| r.validate().is_ok()));
    }
}
