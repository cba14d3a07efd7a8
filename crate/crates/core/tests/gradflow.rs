use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfa_core::blocks::*;
use sfa_core::gradflow::*;
use sfa_core::Params;
use sfa_tensor::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sfa(dims: SfaDims, seed: u64) -> SfaParams<f64> {
    SfaParams::new(dims, &mut rng(seed)).unwrap()
}

fn input(l: usize, d: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[l, d], -1.0, 1.0, &mut rng(seed))
}

fn without_selection(dims: SfaDims) -> SfaDims {
    dims.with_flags(AblationFlags::default().with_disabled("selection").unwrap())
}

#[test]
fn single_branch_coefficient_is_one() {
    let p = sfa(SfaDims::new(8, 2, 2, 1), 1);
    let r = direct_path_check(&p, &input(4, 8, 2), &[true; 4]).unwrap();
    assert!(r.pass);
    assert_eq!(r.direct_path.len(), 1);
    assert!(r.direct_path[0].gate.iter().all(|&g| g == 1.0));
    assert_eq!(r.spread, Some(0.0));
}

#[test]
fn tied_exciters_split_evenly() {
    let mut p = sfa(SfaDims::new(8, 2, 2, 2), 3);
    p.tie_exciters();
    let r = direct_path_check(&p, &input(4, 8, 4), &[true; 4]).unwrap();
    assert!(r.pass);
    for b in &r.direct_path {
        assert!(b.gate.iter().all(|&g| (g - 0.5).abs() < 1e-15));
    }
    assert_eq!(r.spread, Some(0.0));
}

#[test]
fn random_three_branch_jacobian_is_the_gate() {
    for seed in 0..5 {
        let p = sfa(SfaDims::new(8, 2, 2, 3), seed);
        let r = direct_path_check(&p, &input(3, 8, seed + 100), &[true; 3]).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.direct_path.len(), 3);
        for b in &r.direct_path {
            assert!(b.jacobian_max_err.unwrap() < DIRECT_PATH_TOL);
        }
        assert!(r.spread.unwrap() > 0.0);
    }
}

#[test]
fn direct_path_needs_selection() {
    let p = sfa(without_selection(SfaDims::new(8, 2, 2, 2)), 0);
    assert!(direct_path_check(&p, &input(3, 8, 0), &[true; 3]).is_err());
}

#[test]
fn single_gate_spread_is_zero() {
    for seed in 0..10 {
        let p = sfa(without_selection(SfaDims::new(8, 2, 2, 3)), seed);
        let x = Tensor::uniform(&[5, 8], -4.0, 4.0, &mut rng(seed + 50));
        assert_eq!(coefficient_spread(&p, &x, &[true; 5]).unwrap(), 0.0);
    }
}

#[test]
fn contrast_reports_both_variants() {
    let dims = SfaDims::new(8, 2, 2, 2);
    let with = sfa(dims, 5);
    let without = sfa(without_selection(dims), 6);
    let r = uniformity_contrast(&with, &without, &input(4, 8, 7), &[true; 4]).unwrap();
    let c = r.contrast.unwrap();
    assert!(c.without_is_uniform && c.with_is_differentiated);
    assert!(c.spread_without_selection < UNIFORM_TOL);
    assert!(c.spread_with_selection > 0.0);
    assert_eq!(r.direct_path.len(), 2);
    assert!(r.pass);

    assert!(uniformity_contrast(&without, &with, &input(4, 8, 7), &[true; 4]).is_err());
    let other = sfa(without_selection(SfaDims::new(8, 2, 2, 3)), 6);
    assert!(uniformity_contrast(&with, &other, &input(4, 8, 7), &[true; 4]).is_err());
}

#[test]
fn full_chain_agrees_for_both_variants() {
    for cfg in [
        BlockConfig::sfa(4, 2, 2),
        BlockConfig::sfa(4, 2, 2).with_ablation(AblationFlags::default().with_disabled("selection").unwrap()),
        BlockConfig::fa(2),
    ] {
        let block = FeatureBlock::<f64>::new(&cfg, 8, &mut rng(8)).unwrap();
        let e = full_chain_fd_check(&block, &input(4, 8, 9), &[true; 4], 1e-5, 1e-4).unwrap();
        assert!(e.pass, "{e:?}");
        assert_eq!(e.coords, 32);
    }
}

#[test]
fn step_size_sweep_is_u_shaped() {
    let block = FeatureBlock::<f64>::new(&BlockConfig::sfa(4, 2, 2), 8, &mut rng(10)).unwrap();
    let steps = [1e-1, 1e-3, 1e-5, 1e-7, 1e-9, 1e-11];
    let sweep = eps_sweep(&block, &input(4, 8, 11), &[true; 4], &steps).unwrap();
    let errs: Vec<f64> = sweep.iter().map(|e| e.max_abs_err).collect();
    let best = errs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    assert!(best > 0 && best < steps.len() - 1, "{errs:?}");
    assert!(errs[0] > errs[best] && errs[steps.len() - 1] > errs[best]);
}

#[test]
fn zero_input_and_zero_gru_leave_only_bias_paths() {
    let dims = SfaDims::new(8, 2, 2, 2);
    let p = SfaParams::<f64>::with_zero_gru(dims, &mut rng(12)).unwrap();
    let x = Tensor::zeros(&[4, 8]).with_grad();
    let c = input(4, 8, 13);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let u = sfa_forward(&mut tape, v, &p, &[true; 4]).unwrap();
    let cv = tape.leaf(&c);
    let w = tape.mul(u, cv).unwrap();
    let loss = tape.sum_all(w);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(&x).unwrap().iter().all(|&v| v == 0.0));
    for (name, t) in p.named_params("") {
        let nonzero = g.wrt(t).is_some_and(|gr| gr.iter().any(|&v| v != 0.0));
        let bias_path = name.ends_with("b_c") || name == "ae_up.bias";
        assert_eq!(nonzero, bias_path, "{name}");
    }
}

#[test]
fn standard_suite_passes_for_default_blocks() {
    for cfg in [BlockConfig::fa(1), BlockConfig::sfa(4, 1, 2), BlockConfig::sfa(4, 1, 3)] {
        let r = run_gradcheck(&cfg, 8, &GradcheckSettings::default()).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(!r.finite_difference.is_empty());
        if cfg.kind == BlockKind::Sfa {
            assert_eq!(r.direct_path.len(), cfg.branches);
            assert!(r.contrast.unwrap().without_is_uniform);
        }
    }
    let wos = BlockConfig::sfa(4, 1, 2).with_ablation(AblationFlags::default().with_disabled("selection").unwrap());
    let r = run_gradcheck(&wos, 8, &GradcheckSettings::default()).unwrap();
    assert!(r.pass && !r.selection);
    assert_eq!(r.spread, Some(0.0));
}

#[test]
fn report_serializes() {
    let r = run_gradcheck(&BlockConfig::sfa(4, 1, 2), 8, &GradcheckSettings::default()).unwrap();
    let text = serde_json::to_string(&r).unwrap();
    let back: GradFlowReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
}
