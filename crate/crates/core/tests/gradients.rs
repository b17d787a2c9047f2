//! Central finite-difference checks of every differentiable graph op and of
//! the full model loss, all in 64-bit.

use clex_core::model::TransformerParams;
use clex_core::ode::{position_plan, OdeNet};
use clex_core::positional::{theta_on, ThetaSource};
use clex_core::{forward, Graph, Method, Model, ModelConfig, PositionMode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(w ⊙ f(inputs))` for a fixed random `w`, so every output
/// element contributes with a distinct weight.
fn weighted<F>(g: &mut Graph<f64>, vars: &[Var], f: &F, seed: u64) -> Var
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let out = f(g, vars);
    if g.value(out).is_scalar() {
        return out;
    }
    let shape = g.value(out).shape().to_vec();
    let w = random(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

/// Largest norm-wise relative error between analytic and numeric gradients
/// over all inputs.
fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = weighted(&mut g, &vars, &f, 99);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_data(v).unwrap().to_vec()).collect();

    let eval = |perturbed: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = weighted(&mut g, &vars, &f, 99);
        g.value(loss).data()[0]
    };

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[j] -= H;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        let diff: f64 = numeric
            .iter()
            .zip(&analytic[which])
            .map(|(n, a)| (n - a).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = numeric
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(analytic[which].iter().map(|v| v * v).sum::<f64>().sqrt())
            .max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

const OP_TOL: f64 = 1e-5;

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[4, 2], -1.0, 1.0, &mut rng);
    assert!(grad_check(&[a.clone(), b], |g, v| g.matmul(v[0], v[1]).unwrap()) < OP_TOL);
    let bt = random(&[5, 4], -1.0, 1.0, &mut rng);
    assert!(grad_check(&[a, bt], |g, v| g.matmul_nt(v[0], v[1]).unwrap()) < OP_TOL);
    let batched = random(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[4, 3], -1.0, 1.0, &mut rng);
    assert!(grad_check(&[batched, b], |g, v| g.matmul(v[0], v[1]).unwrap()) < OP_TOL);
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[4, 2], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let av = g.param(a);
    let bv = g.constant(b.clone());
    let y = g.matmul(av, bv).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad_data(av).unwrap();
    for r in 0..3 {
        for c in 0..4 {
            let want: f64 = (0..2).map(|j| b.data()[c * 2 + j]).sum();
            assert!((grad[r * 4 + c] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 5], -2.0, 2.0, &mut rng);
    let y = random(&[2, 5], -2.0, 2.0, &mut rng);
    let s = random(&[1], -2.0, 2.0, &mut rng).reshaped(&[]).unwrap();
    let pos = random(&[2, 5], 0.2, 3.0, &mut rng);
    let pair = [x.clone(), y];
    assert!(grad_check(&pair, |g, v| g.add(v[0], v[1]).unwrap()) < OP_TOL);
    assert!(grad_check(&pair, |g, v| g.sub(v[0], v[1]).unwrap()) < OP_TOL);
    assert!(grad_check(&pair, |g, v| g.mul(v[0], v[1]).unwrap()) < OP_TOL);
    let with_scalar = [x.clone(), s];
    assert!(grad_check(&with_scalar, |g, v| g.mul(v[0], v[1]).unwrap()) < OP_TOL);
    assert!(grad_check(&with_scalar, |g, v| g.add(v[1], v[0]).unwrap()) < OP_TOL);
    let one = [x.clone()];
    assert!(grad_check(&one, |g, v| g.scale(v[0], -1.7).unwrap()) < OP_TOL);
    assert!(grad_check(&one, |g, v| g.exp(v[0]).unwrap()) < OP_TOL);
    assert!(grad_check(&one, |g, v| g.cos(v[0]).unwrap()) < OP_TOL);
    assert!(grad_check(&one, |g, v| g.sin(v[0]).unwrap()) < OP_TOL);
    assert!(grad_check(&one, |g, v| g.silu(v[0]).unwrap()) < OP_TOL);
    assert!(grad_check(&one, |g, v| g.reshape(v[0], &[5, 2]).unwrap()) < OP_TOL);
    assert!(grad_check(&one, |g, v| g.sum(v[0]).unwrap()) < OP_TOL);
    assert!(grad_check(&[pos], |g, v| g.log(v[0]).unwrap()) < OP_TOL);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0f64));
    let s = g.silu(z).unwrap();
    assert_eq!(g.value(s).data()[0], 0.0);

    let x = g.constant(Tensor::vector(vec![0.3f64, 2.0, 17.5]));
    let l = g.log(x).unwrap();
    let e = g.exp(l).unwrap();
    for (a, b) in g.value(e).data().iter().zip([0.3, 2.0, 17.5]) {
        assert!((a - b).abs() < 1e-13 * b);
    }

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(1.0f64));
    let y = g.silu(x).unwrap();
    g.backward(y).unwrap();
    let sig = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g.grad_data(x).unwrap()[0] - sig * (1.0 + (1.0 - sig))).abs() < 1e-14);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0f64));
    let y = g.scale(x, 3.0).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad_data(x).unwrap(), &[3.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(5.0f64));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad_data(x).unwrap(), &[10.0]);
    g.backward(y).unwrap();
    assert_eq!(g.grad_data(x).unwrap(), &[20.0]);
    g.zero_grad();
    g.backward(y).unwrap();
    assert_eq!(g.grad_data(x).unwrap(), &[10.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0f64, 2.0]));
    let y = g.exp(x).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn embedding_gradient_accumulates_repeated_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = random(&[6, 3], -1.0, 1.0, &mut rng);
    assert!(grad_check(&[table], |g, v| g.embedding(v[0], &[2, 0, 2, 5, 2]).unwrap()) < OP_TOL);
}

#[test]
fn rms_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[4, 6], -2.0, 2.0, &mut rng);
    let gain = random(&[6], 0.5, 1.5, &mut rng);
    assert!(grad_check(&[x, gain], |g, v| g.rms_norm(v[0], v[1], 1e-6).unwrap()) < OP_TOL);
}

#[test]
fn rotary_gradients_reach_x_and_theta() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2 * 3, 2 * 4], -1.0, 1.0, &mut rng);
    let theta = random(&[2], 0.05, 1.0, &mut rng);
    let positions = [0.5, 1.75, 4.0];
    let err = grad_check(&[x, theta], |g, v| g.rotary(v[0], v[1], &positions, 4).unwrap());
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (batch, seq, heads, dh) = (2, 4, 2, 3);
    let shape = [batch * seq, heads * dh];
    let q = random(&shape, -1.0, 1.0, &mut rng);
    let k = random(&shape, -1.0, 1.0, &mut rng);
    let v = random(&shape, -1.0, 1.0, &mut rng);
    let err = grad_check(&[q, k, v], |g, x| g.causal_attention(x[0], x[1], x[2], batch, heads, 0.7).unwrap());
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn cross_entropy_gradient_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&[2, 3, 5], -3.0, 3.0, &mut rng);
    let targets = [0, 4, 2, 1, 3, 3];
    let mask = [true, false, true, true, true, false];
    let err = grad_check(&[logits], |g, v| g.softmax_cross_entropy(v[0], &targets, &mask).unwrap());
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn cross_entropy_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&[2, 3, 5], -4.0, 4.0, &mut rng);
    let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
    let mask = [true; 6];
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.softmax_cross_entropy(l, &targets, &mask).unwrap();
    let mut want = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[t];
    }
    want /= 6.0;
    assert!((g.value(loss).data()[0] - want).abs() < 1e-10);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::<f64>::zeros(&[3, 256]));
    let loss = g.softmax_cross_entropy(l, &[0, 17, 255], &[true; 3]).unwrap();
    assert!((g.value(loss).data()[0] - 256f64.ln()).abs() < 1e-12);

    let mut hot = Tensor::<f64>::zeros(&[1, 4]);
    hot.data_mut()[2] = 1000.0;
    let l = g.constant(hot);
    let loss = g.softmax_cross_entropy(l, &[2], &[true]).unwrap();
    assert!(g.value(loss).data()[0].abs() < 1e-12);

    let l = g.constant(Tensor::<f64>::zeros(&[1, 4]));
    assert!(g.softmax_cross_entropy(l, &[4], &[true]).is_err());
}

fn tiny_clex() -> ModelConfig {
    ModelConfig {
        vocab: 13,
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        train_len: 6,
        method: Method::Clex,
        t_train: 4.0,
        ..ModelConfig::default()
    }
}

/// Loss of the full CLEX pipeline: ODE solve at `t`, rotary at scaled
/// positions, attention, tied head and cross entropy.
fn clex_loss(g: &mut Graph<f64>, model: &Model<f64>, tokens: &[usize], targets: &[usize], requires: bool) -> (Var, Vec<Var>) {
    let cfg = &model.config;
    let (p, ode) = model.register(g, requires);
    let plan = position_plan(cfg.train_len, 2.5, cfg.train_len, PositionMode::UniformScaled, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let theta = theta_on(g, cfg, &ThetaSource::Solved(2.5), ode).unwrap();
    let logits = forward(g, &p, cfg, tokens, 2, &plan.positions, theta, 1.0).unwrap();
    let loss = g.softmax_cross_entropy(logits, targets, &vec![true; targets.len()]).unwrap();
    let mut vars = p.flat();
    let ode = ode.unwrap();
    vars.push(ode.w_up);
    vars.push(ode.w_down);
    (loss, vars)
}

#[test]
fn full_clex_model_gradient_matches_finite_differences() {
    let cfg = tiny_clex();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut model = Model::<f64>::init(cfg.clone(), &mut rng).unwrap();
    // Give the dynamics a non-trivial learned part and the norms non-unit gains.
    let ode: &mut OdeNet<f64> = model.ode.as_mut().unwrap();
    for w in ode.w_down.data_mut() {
        *w = rng.random_range(-0.3..0.3);
    }
    for t in model.params.tensors_mut() {
        if t.shape().len() == 1 {
            for w in t.data_mut() {
                *w = rng.random_range(0.7..1.3);
            }
        }
    }
    let tokens: Vec<usize> = (0..12).map(|_| rng.random_range(0..13)).collect();
    let targets: Vec<usize> = (0..12).map(|_| rng.random_range(0..13)).collect();

    let mut g = Graph::new();
    let (loss, vars) = clex_loss(&mut g, &model, &tokens, &targets, true);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_data(v).unwrap().to_vec()).collect();

    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), analytic.len());
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (which, grad) in analytic.iter().enumerate() {
        let mut num = vec![0.0; grad.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let at = |delta: f64| {
                let mut m = model.clone();
                m.tensors_mut()[which].data_mut()[j] += delta;
                let mut g = Graph::new();
                let (l, _) = clex_loss(&mut g, &m, &tokens, &targets, false);
                g.value(l).data()[0]
            };
            *slot = (at(h) - at(-h)) / (2.0 * h);
        }
        for (n, a) in num.iter().zip(grad) {
            let rel = (n - a).abs() / n.abs().max(a.abs()).max(1e-4);
            if rel > worst.0 {
                worst = (rel, names[which].clone());
            }
        }
    }
    assert!(worst.0 < 1e-4, "worst relative error {:.3e} in {}", worst.0, worst.1);
}

#[test]
fn ode_parameters_receive_basis_gradients() {
    let cfg = tiny_clex();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = OdeNet::<f64>::init(cfg.head_dim(), 2, &mut rng).unwrap();
    for w in net.w_down.data_mut() {
        *w = rng.random_range(-0.2..0.2);
    }
    let loss_of = |net: &OdeNet<f64>, requires: bool| {
        let mut g = Graph::new();
        let vars = net.register(&mut g, requires);
        let z1 = clex_core::FrequencyBasis::default_basis(cfg.head_dim(), 1e4).unwrap().to_log();
        let z1 = g.constant(Tensor::from_f64(&[z1.len(), 1], z1.z()).unwrap());
        let z = clex_core::ode::solve_on(&mut g, z1, 5.0, vars, cfg.xi_form, 8).unwrap();
        let th = g.exp(z).unwrap();
        let s = g.sum(th).unwrap();
        (g, s, vars)
    };
    let (mut g, s, vars) = loss_of(&net, true);
    g.backward(s).unwrap();
    for (which, v) in [vars.w_up, vars.w_down].into_iter().enumerate() {
        let grad = g.grad_data(v).unwrap().to_vec();
        assert!(grad.iter().any(|x| *x != 0.0));
        for (j, a) in grad.iter().enumerate() {
            let eval = |d: f64| {
                let mut n = net.clone();
                let t = if which == 0 { &mut n.w_up } else { &mut n.w_down };
                t.data_mut()[j] += d;
                let (g, s, _) = loss_of(&n, false);
                g.value(s).data()[0]
            };
            let num = (eval(H) - eval(-H)) / (2.0 * H);
            assert!((num - a).abs() / num.abs().max(a.abs()).max(1e-6) < 1e-4, "{which}/{j}: {num} vs {a}");
        }
    }
}

#[test]
fn parameter_names_follow_layer_layout() {
    let names = TransformerParams::<f64>::names(2);
    assert_eq!(names.first().unwrap(), "embed");
    assert_eq!(names.last().unwrap(), "final_norm");
    assert_eq!(names.len(), 2 + 2 * 8);
}
