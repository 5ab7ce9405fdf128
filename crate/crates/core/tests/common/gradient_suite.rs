//! Finite-difference checks of every differentiable primitive and of the full
//! attack objective, 100 seeded trials each. Shared by the core gradient test
//! and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigattack_core::attack::{objective, AttackConfig, GenuineTarget};
use sigattack_core::data::SigImage;
use sigattack_core::model::{Architecture, ModelWeights};
use sigattack_core::tensor::{grad_check, Graph, Tensor, Var};
use sigattack_core::Result;

const TRIALS: u64 = 100;
const STEP: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-6;
const END_TO_END_TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values whose magnitude stays at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalar reduction with distinct random weights per element, so every input
/// coordinate gets its own gradient: `w · vec(y)`.
fn weighted(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let n = weights.numel();
    let flat = g.reshape(y, &[1, n])?;
    let w = g.constant(weights.clone().reshape(&[1, n])?);
    let b = g.constant(Tensor::zeros(&[1]));
    let out = g.linear(flat, w, b)?;
    g.sum(out)
}

/// Worst relative error of one check over all trials.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub worst_seed: u64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

type Out = Vec<Check>;

fn run<F>(out: &mut Out, name: &str, tol: f64, mut trial: F)
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let (mut worst, mut worst_seed) = (0.0f64, 0);
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = trial(&mut rng);
        // NaN must count as a failure.
        if !(err <= worst) {
            worst = err;
            worst_seed = seed;
        }
    }
    out.push(Check {
        name: name.to_string(),
        worst,
        worst_seed,
        tol,
    });
}

/// Every check, primitives first and the full objective last.
pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    conv2d_gradients(&mut out);
    maxpool_gradient_at_untied_points(&mut out);
    pooling_and_activation_gradients(&mut out);
    linear_gradients(&mut out);
    elementwise_gradients(&mut out);
    reduction_gradients(&mut out);
    style_and_shape_gradients(&mut out);
    full_objective_gradient(&mut out);
    out
}

fn conv2d_gradients(out: &mut Out) {
    run(out, "conv2d/input", PRIMITIVE_TOL, |rng| {
        let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[3], -1.0, 1.0);
        let x = uniform(rng, &[1, 2, 5, 5], -1.0, 1.0);
        let stride = if rng.random_bool(0.5) { 1 } else { 2 };
        let pad = if stride == 2 { 1 } else { rng.random_range(0..2) };
        let out = (5 + 2 * pad - 3) / stride + 1;
        let w = uniform(rng, &[3 * out * out], 0.5, 1.5);
        grad_check(
            |g, v| {
                let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
                let y = g.conv2d(v, kv, bv, stride, pad)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
    run(out, "conv2d/kernel", PRIMITIVE_TOL, |rng| {
        let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[3], -1.0, 1.0);
        let x = uniform(rng, &[1, 2, 5, 5], -1.0, 1.0);
        let w = uniform(rng, &[3 * 25], 0.5, 1.5);
        grad_check(
            |g, v| {
                let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
                let y = g.conv2d(xv, v, bv, 1, 1)?;
                weighted(g, y, &w)
            },
            &k,
            STEP,
        )
        .unwrap()
    });
    run(out, "conv2d/bias", PRIMITIVE_TOL, |rng| {
        let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[3], -1.0, 1.0);
        let x = uniform(rng, &[2, 2, 5, 5], -1.0, 1.0);
        let w = uniform(rng, &[2 * 3 * 9], 0.5, 1.5);
        grad_check(
            |g, v| {
                let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
                let y = g.conv2d(xv, kv, v, 1, 0)?;
                weighted(g, y, &w)
            },
            &b,
            STEP,
        )
        .unwrap()
    });
}

fn maxpool_gradient_at_untied_points(out: &mut Out) {
    run(out, "maxpool2", PRIMITIVE_TOL, |rng| {
        // Distinct values on a coarse lattice keep every window's max
        // separated from the runner-up by far more than the step.
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::new(&[1, 2, 4, 4], vals).unwrap();
        let w = uniform(rng, &[8], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.maxpool2(v)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
}

fn pooling_and_activation_gradients(out: &mut Out) {
    run(out, "global_avg_pool", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
        let w = uniform(rng, &[6], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.global_avg_pool(v)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
    run(out, "relu", PRIMITIVE_TOL, |rng| {
        let x = away_from_zero(rng, &[4, 5], 1e-2);
        let w = uniform(rng, &[20], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.relu(v)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
}

fn linear_gradients(out: &mut Out) {
    for (name, which) in [("linear/input", 0), ("linear/weight", 1), ("linear/bias", 2)] {
        run(out, name, PRIMITIVE_TOL, |rng| {
            let args = [
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[5, 4], -1.0, 1.0),
                uniform(rng, &[5], -1.0, 1.0),
            ];
            let w = uniform(rng, &[15], 0.5, 1.5);
            grad_check(
                |g, v| {
                    let vars: Vec<Var> = (0..3)
                        .map(|i| if i == which { v } else { g.constant(args[i].clone()) })
                        .collect();
                    let y = g.linear(vars[0], vars[1], vars[2])?;
                    weighted(g, y, &w)
                },
                &args[which],
                STEP,
            )
            .unwrap()
        });
    }
}

fn elementwise_gradients(out: &mut Out) {
    type Build = fn(&mut Graph, Var, Var) -> Result<Var>;
    let binary: [(&str, Build); 2] = [("add", |g, a, b| g.add(a, b)), ("sub", |g, a, b| g.sub(a, b))];
    for (name, op) in binary {
        for side in 0..2 {
            run(out, &format!("{name}/{}", ["lhs", "rhs"][side]), PRIMITIVE_TOL, |rng| {
                let a = uniform(rng, &[3, 4], -1.0, 1.0);
                let b = uniform(rng, &[3, 4], -1.0, 1.0);
                let w = uniform(rng, &[12], 0.5, 1.5);
                let (x, other) = if side == 0 { (a, b) } else { (b, a) };
                grad_check(
                    |g, v| {
                        let o = g.constant(other.clone());
                        let y = if side == 0 { op(g, v, o)? } else { op(g, o, v)? };
                        weighted(g, y, &w)
                    },
                    &x,
                    STEP,
                )
                .unwrap()
            });
        }
    }
    run(out, "mul_scalar", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[6], -1.0, 1.0);
        let s = rng.random_range(-3.0..3.0);
        let w = uniform(rng, &[6], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.mul_scalar(v, s)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
    run(out, "add_scalar", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[6], -1.0, 1.0);
        let s = rng.random_range(-3.0..3.0);
        let w = uniform(rng, &[6], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.add_scalar(v, s)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
    run(out, "square", PRIMITIVE_TOL, |rng| {
        let x = away_from_zero(rng, &[6], 1e-2);
        let w = uniform(rng, &[6], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.square(v)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
}

fn reduction_gradients(out: &mut Out) {
    run(out, "sum", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
        grad_check(|g, v| g.sum(v), &x, STEP).unwrap()
    });
    run(out, "abs_sum", PRIMITIVE_TOL, |rng| {
        let x = away_from_zero(rng, &[2, 3, 4], 1e-2);
        grad_check(|g, v| g.abs_sum(v), &x, STEP).unwrap()
    });
    run(out, "square_sum", PRIMITIVE_TOL, |rng| {
        let x = away_from_zero(rng, &[2, 3, 4], 1e-2);
        grad_check(|g, v| g.square_sum(v), &x, STEP).unwrap()
    });
    run(out, "mse", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[10], -1.0, 1.0);
        let gap = away_from_zero(rng, &[10], 1e-2);
        let shifted = Tensor::new(&[10], x.data().iter().zip(gap.data()).map(|(a, d)| a - d).collect()).unwrap();
        grad_check(
            |g, v| {
                let c = g.constant(shifted.clone());
                g.mse(v, c)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
    run(out, "euclidean_distance", PRIMITIVE_TOL, |rng| {
        let a = uniform(rng, &[8], -1.0, 1.0);
        let b = uniform(rng, &[8], -1.0, 1.0);
        grad_check(
            |g, v| {
                let c = g.constant(b.clone());
                g.euclidean_distance(v, c)
            },
            &a,
            STEP,
        )
        .unwrap()
    });
}

fn style_and_shape_gradients(out: &mut Out) {
    run(out, "gram", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[3, 4, 5], -1.0, 1.0);
        let w = uniform(rng, &[9], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.gram(v)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
    run(out, "total_variation", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[2, 5, 6], 0.0, 1.0);
        grad_check(|g, v| g.total_variation(v), &x, STEP).unwrap()
    });
    run(out, "reshape", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[2, 6], -1.0, 1.0);
        let w = uniform(rng, &[12], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.reshape(v, &[3, 4])?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
    run(out, "row", PRIMITIVE_TOL, |rng| {
        let x = uniform(rng, &[4, 5], -1.0, 1.0);
        let index = rng.random_range(0..4);
        let w = uniform(rng, &[5], 0.5, 1.5);
        grad_check(
            |g, v| {
                let y = g.row(v, index)?;
                weighted(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SigImage {
    SigImage::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn full_objective_gradient(out: &mut Out) {
    let arch = Architecture {
        height: 8,
        width: 8,
        channels: vec![1, 3, 4],
        embed_dim: 4,
    };
    run(out, "attack objective", END_TO_END_TOL, |rng| {
        let mut model = ModelWeights::init(arch.clone(), rng.random()).unwrap();
        model.freeze();
        let genuine = image(rng, 8, 8);
        let forged = image(rng, 8, 8);
        // Keep the image off the |I_f - I| kink.
        let offsets = away_from_zero(rng, &[64], 0.05);
        let start: Vec<f64> = forged
            .pixels
            .iter()
            .zip(offsets.data())
            .map(|(f, o)| if (0.0..=1.0).contains(&(f + 0.1 * o)) { f + 0.1 * o } else { f - 0.1 * o })
            .collect();
        let x = Tensor::new(&[1, 1, 8, 8], start).unwrap();
        let d0 = {
            let probe = SigImage::new(8, 8, x.data().to_vec()).unwrap();
            model.distance(&genuine, &probe).unwrap()
        };
        let mut cfg = AttackConfig::desk(d0);
        cfg.alpha = 1.0;
        cfg.beta = 1e-2;
        cfg.gamma = 1e2;
        cfg.delta = 1e-2;
        cfg.style_layers = vec!["conv1".into(), "conv2".into()];
        // The attack term stays active for every probe.
        cfg.attack_tau = Some(0.5 * d0);
        let target = GenuineTarget::new(&model, &genuine, &cfg.style_layers).unwrap();
        let forged_t = forged.to_tensor();
        grad_check(
            |g, v| {
                let f = g.constant(forged_t.clone());
                Ok(objective(g, &model, v, f, &target, &cfg)?.0)
            },
            &x,
            STEP,
        )
        .unwrap()
    });
}
