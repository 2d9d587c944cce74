use nalgebra::DMatrix;
use normopt::model::{Model, ModelConfig};
use normopt::norm::{NormConfig, NormKind};
use normopt::optim::{
    newton_schulz, shape_scale, MuonConfig, OptimConfig, Optimizer, OptimizerKind, Route, NS_COEFFICIENTS,
};
use normopt::params::{ParamRole, ParamStore};
use normopt::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[test]
fn newton_schulz_against_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let g = gaussian(40, &mut rng);
        let u = newton_schulz(&g, 8, 5, 5, NS_COEFFICIENTS).u;
        let gm = DMatrix::from_row_slice(8, 5, &g);
        let um = DMatrix::from_row_slice(8, 5, &u);
        for s in um.singular_values().iter() {
            assert!((0.5..=1.5).contains(s), "singular value {s}");
        }
        let svd = gm.svd(true, true);
        let (us, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let aligned = us.transpose() * &um * vt.transpose();
        for i in 0..5 {
            assert!(aligned[(i, i)] > 0.0);
        }
        // well-conditioned inputs converge to the polar factor itself
        let polar = &us * &vt;
        let cubic = DMatrix::from_row_slice(8, 5, &newton_schulz(&g, 8, 5, 40, [1.5, -0.5, 0.0]).u);
        assert!((cubic - polar).abs().max() < 1e-6);
    }
}

#[test]
fn newton_schulz_is_transpose_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = gaussian(12, &mut rng);
    let gt: Vec<f64> = (0..12).map(|i| g[(i % 3) * 4 + i / 3]).collect();
    let a = newton_schulz(&g, 3, 4, 5, NS_COEFFICIENTS).u;
    let b = newton_schulz(&gt, 4, 3, 5, NS_COEFFICIENTS).u;
    for i in 0..12 {
        assert!((a[(i % 3) * 4 + i / 3] - b[i]).abs() < 1e-12);
    }
}

fn matrix_store(rows: usize, cols: usize, grad: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    let id = s.register("w", ParamRole::Matrix, Tensor::zeros(vec![rows, cols]));
    s.get_mut(id).tensor.accumulate_grad(grad).unwrap();
    s
}

fn muon(momentum: f64) -> OptimConfig {
    OptimConfig {
        kind: OptimizerKind::Muon,
        muon: MuonConfig { momentum, ..MuonConfig::default() },
        ..OptimConfig::default()
    }
}

#[test]
fn muon_update_ignores_gradient_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = gaussian(24, &mut rng);
    let step = |factor: f64| {
        let scaled: Vec<f64> = g.iter().map(|v| v * factor).collect();
        let mut s = matrix_store(6, 4, &scaled);
        Optimizer::new(muon(0.95)).unwrap().step(&mut s, 1.0).unwrap();
        s.value(normopt::params::ParamId(0)).to_vec()
    };
    let (a, b) = (step(1.0), step(10.0));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-3 * 0.02);
    }
}

#[test]
fn first_muon_step_without_momentum_is_scaled_polar_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = gaussian(24, &mut rng);
    let mut s = matrix_store(6, 4, &g);
    Optimizer::new(muon(0.0)).unwrap().step(&mut s, 1.0).unwrap();
    let u = newton_schulz(&g, 6, 4, 5, NS_COEFFICIENTS).u;
    let w = s.iter().next().unwrap().1.tensor.data().to_vec();
    for (wi, ui) in w.iter().zip(&u) {
        assert!((wi + 0.02 * shape_scale(6, 4) * ui).abs() < 1e-15);
    }
}

#[test]
fn square_weight_frobenius_growth_tracks_lr_sqrt_dim() {
    let n = 16;
    let lr = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut s = matrix_store(n, n, &vec![0.0; n * n]);
    let mut opt = Optimizer::new(muon(0.0)).unwrap();
    let mut prev = vec![0.0; n * n];
    let mut total = 0.0;
    for _ in 0..50 {
        s.zero_grads();
        let (_, p) = s.iter_mut().next().unwrap();
        p.tensor.accumulate_grad(&gaussian(n * n, &mut rng)).unwrap();
        opt.step(&mut s, 1.0).unwrap();
        let w = s.iter().next().unwrap().1.tensor.data().to_vec();
        total += w.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prev = w;
    }
    let ratio = total / 50.0 / (lr * (n as f64).sqrt());
    // the quintic leaves singular values near, not at, one
    assert!((0.7..1.2).contains(&ratio), "per-step growth ratio {ratio}");
}

fn model() -> Model {
    let cfg = ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        kv_heads: 1,
        intermediate: 20,
        seq_len: 8,
        residual_scaling: true,
        ..ModelConfig::default()
    };
    Model::new(&cfg, &NormConfig { kind: NormKind::AsinhDerf, ..NormConfig::default() }, 1).unwrap()
}

#[test]
fn routing_covers_every_parameter_once() {
    for kind in OptimizerKind::ALL {
        let mut m = model();
        let opt_cfg = OptimConfig { kind, ..OptimConfig::default() };
        let mut opt = Optimizer::new(opt_cfg).unwrap();
        let (mut muon_ids, mut adam_ids) = (Vec::new(), Vec::new());
        for (id, p) in m.store.iter() {
            match opt.route(&m.store, id) {
                Route::Muon { .. } => muon_ids.push(id),
                Route::Adamw { lr, weight_decay } => {
                    if kind == OptimizerKind::Muon {
                        assert_eq!((lr, weight_decay), (3e-4, 0.0), "{}", p.name);
                    } else if p.role != ParamRole::Matrix {
                        assert_eq!(weight_decay, 0.0, "{}", p.name);
                    }
                    adam_ids.push(id)
                }
            }
        }
        assert_eq!(muon_ids.len() + adam_ids.len(), m.store.len());
        for id in &muon_ids {
            assert_eq!(m.store.get(*id).role, ParamRole::Matrix);
        }
        let expected_muon = if kind == OptimizerKind::Muon { 14 } else { 0 };
        assert_eq!(muon_ids.len(), expected_muon);

        for (_, p) in m.store.iter_mut() {
            let ones = vec![1.0; p.tensor.numel()];
            p.tensor.accumulate_grad(&ones).unwrap();
        }
        let stats = opt.step(&mut m.store, 1.0).unwrap();
        assert_eq!(stats.muon_params, expected_muon);
        assert_eq!(stats.adamw_params, m.store.len() - expected_muon);
    }
}

#[test]
fn muon_never_moves_non_matrix_parameters_by_more_than_adam_lr() {
    let mut m = model();
    let before: Vec<Vec<f64>> = m.store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect();
    for (_, p) in m.store.iter_mut() {
        let g: Vec<f64> = (0..p.tensor.numel()).map(|i| (i as f64 * 0.7).sin() + 0.1).collect();
        p.tensor.accumulate_grad(&g).unwrap();
    }
    Optimizer::new(muon(0.95)).unwrap().step(&mut m.store, 1.0).unwrap();
    for ((_, p), old) in m.store.iter().zip(&before) {
        let max_move = p.tensor.data().iter().zip(old).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if p.role == ParamRole::Matrix {
            assert!(max_move > 3e-4, "{}", p.name);
        } else {
            // an Adam step moves each coordinate by at most lr
            assert!(max_move <= 3e-4 * (1.0 + 1e-9), "{} moved {max_move}", p.name);
        }
    }
}

fn scalar_store(role: ParamRole, w: f64) -> ParamStore {
    let mut s = ParamStore::new();
    let shape = if role == ParamRole::Matrix { vec![1, 1] } else { vec![1] };
    s.register("w", role, Tensor::new(shape, vec![w]).unwrap());
    s
}

fn set_grad(s: &mut ParamStore, g: f64) {
    s.zero_grads();
    let (_, p) = s.iter_mut().next().unwrap();
    p.tensor.accumulate_grad(&[g]).unwrap();
}

#[test]
fn adamw_matches_closed_form_moments() {
    let (lr, b1, b2, eps, wd): (f64, f64, f64, f64, f64) = (3e-4, 0.9, 0.95, 1e-8, 0.1);
    let grads: Vec<f64> = (1..=10).map(|t| (t as f64 * 1.3).sin() * 2.0 + 0.5).collect();
    let mut s = scalar_store(ParamRole::Matrix, 1.0);
    let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
    let mut w = 1.0f64;
    for t in 1..=10 {
        set_grad(&mut s, grads[t - 1]);
        opt.step(&mut s, 1.0).unwrap();
        // m_t and v_t as explicit weighted sums over the gradient history
        let m: f64 = (1..=t).map(|i| (1.0 - b1) * b1.powi((t - i) as i32) * grads[i - 1]).sum();
        let v: f64 = (1..=t).map(|i| (1.0 - b2) * b2.powi((t - i) as i32) * grads[i - 1].powi(2)).sum();
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        w = w * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((s.scalar(normopt::params::ParamId(0)) - w).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn adamw_first_step_example() {
    let mut s = scalar_store(ParamRole::Matrix, 1.0);
    let mut cfg = OptimConfig::default();
    cfg.adamw.eps = 0.0;
    set_grad(&mut s, 1.0);
    Optimizer::new(cfg).unwrap().step(&mut s, 1.0).unwrap();
    assert!((s.scalar(normopt::params::ParamId(0)) - (1.0 - 3e-4 - 3e-5)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn adamw_step_size_is_lr_for_constant_gradients(g in prop_oneof![1e-3f64..1e-1, 1.0f64..1e3], steps in 1usize..60) {
        let mut s = scalar_store(ParamRole::NormGain, 0.0);
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        let mut prev = 0.0;
        for _ in 0..steps {
            set_grad(&mut s, g);
            opt.step(&mut s, 1.0).unwrap();
            let w = s.scalar(normopt::params::ParamId(0));
            prop_assert!(((prev - w) / 3e-4 - 1.0).abs() < 1e-5);
            prev = w;
        }
    }

    #[test]
    fn newton_schulz_is_scale_free(scale in 1e-3f64..1e3, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gaussian(12, &mut rng);
        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
        let a = newton_schulz(&g, 4, 3, 5, NS_COEFFICIENTS).u;
        let b = newton_schulz(&scaled, 4, 3, 5, NS_COEFFICIENTS).u;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }
}
