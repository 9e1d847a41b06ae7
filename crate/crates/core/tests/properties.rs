use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustlab::attacks::{
    backward_smoothing_init, is_feasible, odi_init, pgd_attack, pgd_backward_init, project, trades_inner_max,
    trades_inner_max_labeled, AttackSpec, InitKind, Perturbation,
};
use robustlab::autodiff::{cross_entropy, kl_divergence, onehot, softmax, Graph};
use robustlab::attacks::{objective_values, Objective};
use robustlab::data::batch_indices;
use robustlab::diagnostics::hessian_max_eig;
use robustlab::models::{init_model, ModelParams, ModelSpec};
use robustlab::tensor::Tensor;

fn model(sizes: Vec<usize>, seed: u64) -> ModelParams {
    init_model(&ModelSpec::new(sizes, seed).unwrap()).unwrap()
}

fn batch(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor {
    Tensor::matrix(m, d, (0..m * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn init_kind() -> impl Strategy<Value = InitKind> {
    prop_oneof![
        Just(InitKind::Zero),
        Just(InitKind::Random),
        Just(InitKind::BackwardSmoothing),
        Just(InitKind::Odi),
        Just(InitKind::PgdBackward),
    ]
}

prop_compose! {
    fn attack_spec()(
        epsilon in 0.0f64..0.4,
        alpha_frac in 0.05f64..2.0,
        steps in 0usize..6,
        init in init_kind(),
        gamma in 0.0f64..3.0,
        n_psi in 1usize..4,
        clamp in prop::bool::ANY,
        best_iterate in prop::bool::ANY,
        rng_seed in any::<u64>(),
    ) -> AttackSpec {
        AttackSpec {
            epsilon,
            alpha: (alpha_frac * epsilon).max(1e-3),
            steps,
            init,
            gamma,
            n_psi,
            init_alpha: None,
            clamp: clamp.then_some((0.0, 1.0)),
            best_iterate,
            rng_seed,
        }
    }
}

fn all_attacks(params: &ModelParams, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Vec<Perturbation> {
    vec![
        pgd_attack(params, x, y, spec).unwrap(),
        trades_inner_max_labeled(params, x, Some(y), spec).unwrap(),
        backward_smoothing_init(params, x, spec).unwrap(),
        odi_init(params, x, spec).unwrap(),
        pgd_backward_init(params, x, y, spec).unwrap(),
    ]
}

fn within_budget(x: &Tensor, p: &Perturbation, spec: &AttackSpec) -> bool {
    let inside_ball = p.delta.norm_inf() <= spec.epsilon + 1e-12;
    let inside_box = spec
        .clamp
        .is_none_or(|(lo, hi)| p.adv.data().iter().all(|v| (lo..=hi).contains(v)));
    inside_ball && inside_box && p.feasible && is_feasible(x, &p.adv, spec.epsilon, spec.clamp)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn every_attack_is_feasible(spec in attack_spec(), seed in any::<u64>(), m in 1usize..6) {
        let params = model(vec![3, 8, 4], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = batch(&mut rng, m, 3);
        let y: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
        for p in all_attacks(&params, &x, &y, &spec) {
            prop_assert!(within_budget(&x, &p, &spec));
        }
    }

    #[test]
    fn attacks_are_deterministic(spec in attack_spec(), seed in any::<u64>()) {
        let params = model(vec![3, 8, 4], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = batch(&mut rng, 4, 3);
        let y = [0, 1, 2, 3];
        let a = all_attacks(&params, &x, &y, &spec);
        let b = all_attacks(&params, &x, &y, &spec);
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p.adv.data(), q.adv.data());
        }
    }

    #[test]
    fn projection_is_idempotent_and_non_expansive(
        x0 in prop::collection::vec(0.0f64..1.0, 5),
        a in prop::collection::vec(-1.0f64..2.0, 5),
        b in prop::collection::vec(-1.0f64..2.0, 5),
        eps in 0.0f64..0.5,
        clamp in prop::bool::ANY,
    ) {
        let clamp = clamp.then_some((0.0, 1.0));
        let t = |v: &Vec<f64>| Tensor::vector(v.clone()).unwrap();
        let pa = project(&t(&x0), &t(&a), eps, clamp).unwrap();
        let pb = project(&t(&x0), &t(&b), eps, clamp).unwrap();
        prop_assert_eq!(project(&t(&x0), &pa, eps, clamp).unwrap(), pa.clone());
        prop_assert!(pa.max_abs_diff(&pb) <= t(&a).max_abs_diff(&t(&b)));
        prop_assert!(is_feasible(&t(&x0), &pa, eps, clamp));
    }

    #[test]
    fn more_steps_never_lower_the_best_loss(seed in any::<u64>(), k in 0usize..6, extra in 0usize..6, init in init_kind()) {
        let params = model(vec![2, 16, 16, 3], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = batch(&mut rng, 8, 2);
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let spec = AttackSpec { init, steps: k, rng_seed: seed, ..AttackSpec::pgd(0.1, 0.03, k) };
        let more = AttackSpec { steps: k + extra, ..spec.clone() };
        let short = pgd_attack(&params, &x, &y, &spec).unwrap();
        let long = pgd_attack(&params, &x, &y, &more).unwrap();
        let ce = |p: &Perturbation| objective_values(&params, &p.adv, Objective::CrossEntropy(&y)).unwrap();
        for (s, l) in ce(&short).iter().zip(ce(&long)) {
            prop_assert!(l >= *s, "K={k} loss {s} > K'={} loss {l}", k + extra);
        }
    }

    #[test]
    fn softmax_keeps_argmax_and_shift(z in prop::collection::vec(-30.0f64..30.0, 2..8), c in -100.0f64..100.0) {
        let t = Tensor::vector(z.clone()).unwrap();
        let p = softmax(&t).unwrap();
        prop_assert_eq!(p.argmax_rows(), t.argmax_rows());
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&v| v > 0.0));
        let shifted = softmax(&t.map(|v| v + c)).unwrap();
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn cross_entropy_is_kl_from_onehot(z in prop::collection::vec(-20.0f64..20.0, 2..8), pick in any::<prop::sample::Index>()) {
        let t = Tensor::vector(z.clone()).unwrap();
        let y = pick.index(z.len());
        let ce = cross_entropy(&t, y).unwrap();
        let kl = kl_divergence(&onehot(y, z.len()).unwrap(), &softmax(&t).unwrap()).unwrap();
        prop_assert_eq!(ce, kl);
    }

    #[test]
    fn kl_is_non_negative(a in prop::collection::vec(0.01f64..1.0, 4), b in prop::collection::vec(0.01f64..1.0, 4)) {
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            Tensor::vector(v.into_iter().map(|x| x / s).collect()).unwrap()
        };
        prop_assert!(kl_divergence(&norm(a), &norm(b)).unwrap() >= -1e-12);
    }

    #[test]
    fn batches_cover_every_index_once(n in 1usize..300, m in 1usize..64, seed in any::<u64>()) {
        let m = m.min(n);
        let batches = batch_indices(n, m, seed).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(m));
        prop_assert!(batches.iter().all(|b| b.len() <= m && !b.is_empty()));
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn quadratic_dominant_eigenvalue(d in prop::collection::vec(-4.0f64..4.0, 2..6), seed in any::<u64>()) {
        // diagonal with a dominant entry of magnitude 5 and a clear gap
        let mut diag = d;
        diag[0] = if seed % 2 == 0 { 5.0 } else { -5.0 };
        let grad = |x: &Tensor| Tensor::vector(x.data().iter().zip(&diag).map(|(a, b)| a * b).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::vector((0..diag.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let est = hessian_max_eig(grad, &x, 5000, 1e-10).unwrap();
        prop_assert!((est.lambda - diag[0]).abs() < 1e-3, "{} vs {}", est.lambda, diag[0]);
    }
}

#[test]
fn ten_thousand_random_attacks_stay_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFEA5);
    let params: Vec<ModelParams> = (0..5).map(|s| model(vec![4, 6, 3], s)).collect();
    let mut calls = 0;
    while calls < 10_000 {
        let spec = AttackSpec {
            epsilon: rng.random_range(0.0..0.5),
            alpha: rng.random_range(0.01..0.6),
            steps: rng.random_range(0..3),
            init: [InitKind::Zero, InitKind::Random, InitKind::BackwardSmoothing, InitKind::Odi, InitKind::PgdBackward]
                [rng.random_range(0..5)],
            gamma: rng.random_range(0.0..2.0),
            clamp: rng.random_bool(0.8).then_some((0.0, 1.0)),
            rng_seed: rng.random(),
            ..AttackSpec::default()
        };
        let p = &params[rng.random_range(0..5)];
        let x = batch(&mut rng, 4, 4);
        let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        for out in all_attacks(p, &x, &y, &spec) {
            assert!(within_budget(&x, &out, &spec), "{spec:?}");
            calls += 1;
        }
    }
}

#[test]
fn linear_model_logit_change_is_w_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for s in 0..20 {
        let params = model(vec![5, 3], s);
        let w = &params.layers()[0].weight;
        let x = batch(&mut rng, 1, 5);
        let delta = Tensor::matrix(1, 5, (0..5).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap();
        let diff = params.logits(&x.add(&delta).unwrap()).unwrap().sub(&params.logits(&x).unwrap()).unwrap();
        for o in 0..3 {
            let wd: f64 = (0..5).map(|k| w.data()[o * 5 + k] * delta.data()[k]).sum();
            assert!((diff.data()[o] - wd).abs() < 1e-12);
        }
    }
}

#[test]
fn save_load_round_trip_keeps_outputs() {
    let params = model(vec![6, 12, 4], 77);
    let mut buf = Vec::new();
    params.save(&mut buf).unwrap();
    let loaded = ModelParams::load(buf.as_slice()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = batch(&mut rng, 100, 6);
    assert_eq!(params.logits(&x).unwrap(), loaded.logits(&x).unwrap());
}

#[test]
fn backward_is_bit_deterministic() {
    let params = model(vec![4, 16, 3], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = batch(&mut rng, 7, 4);
    let run = || {
        let mut g = Graph::new();
        let m = params.bind(&mut g, true);
        let xv = g.variable(x.clone());
        let z = m.forward(&mut g, xv).unwrap();
        let l = g.softmax_ce(z, &[0, 1, 2, 0, 1, 2, 0]).unwrap();
        let l = g.mean(l);
        let grads = g.backward(l).unwrap();
        let mut out = vec![grads.wrt(xv)];
        out.extend(m.vars().iter().flat_map(|&(w, b)| [grads.wrt(w), grads.wrt(b)]));
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn trades_with_zero_steps_from_zero_init_has_zero_kl() {
    let params = model(vec![3, 8, 4], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = batch(&mut rng, 5, 3);
    let spec = AttackSpec {
        steps: 0,
        init: InitKind::Zero,
        ..AttackSpec::default()
    };
    let p = trades_inner_max(&params, &x, &spec).unwrap();
    assert_eq!(p.adv, x);
}
