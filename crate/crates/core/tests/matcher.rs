use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfa_core::blocks::BlockConfig;
use sfa_core::harness::{batch_gradients, AdamState, OptimConfig};
use sfa_core::matcher::*;
use sfa_core::Params;
use sfa_tensor::{compare, finite_diff_gradient, Tape, Tensor};

fn tiny(block: BlockConfig) -> ModelConfig {
    ModelConfig {
        dim: 8,
        vocab: 10,
        max_len: 3,
        labels: 2,
        hidden: 12,
        block,
    }
}

fn small(block: BlockConfig) -> ModelConfig {
    ModelConfig {
        dim: 16,
        vocab: 30,
        max_len: 8,
        labels: 2,
        hidden: 24,
        block,
    }
}

fn pair(a: &[usize], b: &[usize], label: usize) -> ExamplePair {
    ExamplePair {
        tokens_a: a.to_vec(),
        tokens_b: b.to_vec(),
        label,
    }
}

fn blocks() -> [BlockConfig; 3] {
    [BlockConfig::none(), BlockConfig::fa(2), BlockConfig::sfa(2, 2, 2)]
}

#[test]
fn encoder_shapes_and_pads() {
    let m = SiameseModel::<f64>::new(small(BlockConfig::none()), 0).unwrap();
    let mut tape = Tape::new();
    let one = m.embed_encode(&mut tape, &[4], &[true]).unwrap();
    assert_eq!(tape.shape(one), [1, 16]);

    let a = m.embed_encode(&mut tape, &[1, 2, 3], &[true; 3]).unwrap();
    let b = m.embed_encode(&mut tape, &[1, 2, 3], &[true; 3]).unwrap();
    assert_eq!(tape.value(a), tape.value(b));

    let p = m.embed_encode(&mut tape, &[1, 2, 3, 0, 0], &[true, true, true, false, false]).unwrap();
    let v = tape.value(p);
    assert_eq!(&v[..48], tape.value(a));
    assert!(v[48..].iter().all(|&x| x == 0.0));

    assert!(m.embed_encode(&mut tape, &[1, 2], &[false, false]).is_err());
    assert!(m.embed_encode(&mut tape, &[1, 2], &[true]).is_err());
}

#[test]
fn out_of_range_tokens_are_rejected() {
    let m = SiameseModel::<f64>::new(small(BlockConfig::none()), 0).unwrap();
    assert!(m.probabilities(&pair(&[1, 30], &[2], 0)).is_err());
    assert!(m.probabilities(&pair(&[], &[2], 0)).is_err());
    assert!(m.probabilities(&pair(&[1], &[2], 2)).is_err());
    assert!(m.probabilities(&pair(&[1; 9], &[2], 0)).is_err());
}

fn tanh_affine(w: &Tensor<f64>, b: &Tensor<f64>, input: &[f64]) -> Vec<f64> {
    let out = w.shape()[1];
    (0..out)
        .map(|j| {
            let z: f64 = input.iter().enumerate().map(|(i, v)| v * w.data()[i * out + j]).sum::<f64>();
            (z + b.data()[j]).tanh()
        })
        .collect()
}

#[test]
fn single_key_alignment_copies_it() {
    let m = SiameseModel::<f64>::new(small(BlockConfig::none()), 3).unwrap();
    let mut tape = Tape::new();
    let a = m.embed_encode(&mut tape, &[3, 4, 5], &[true; 3]).unwrap();
    let b = m.embed_encode(&mut tape, &[7], &[true]).unwrap();
    let (x, _) = m.interaction(&mut tape, a, b, &[true; 3], &[true]).unwrap();
    let (av, bv) = (tape.value(a).to_vec(), tape.value(b).to_vec());
    let xv = tape.value(x).to_vec();
    for i in 0..3 {
        let ai = &av[i * 16..(i + 1) * 16];
        let mut enh = ai.to_vec();
        enh.extend_from_slice(&bv);
        enh.extend(ai.iter().zip(&bv).map(|(p, q)| p - q));
        enh.extend(ai.iter().zip(&bv).map(|(p, q)| p * q));
        let expected = tanh_affine(&m.proj_x.weight, &m.proj_x.bias, &enh);
        for (got, want) in xv[i * 16..(i + 1) * 16].iter().zip(expected) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }
}

#[test]
fn identical_sentences_project_differently() {
    let m = SiameseModel::<f64>::new(small(BlockConfig::none()), 4).unwrap();
    let mut tape = Tape::new();
    let a = m.embed_encode(&mut tape, &[3, 4, 5], &[true; 3]).unwrap();
    let (x, y) = m.interaction(&mut tape, a, a, &[true; 3], &[true; 3]).unwrap();
    assert_ne!(tape.value(x), tape.value(y));
}

#[test]
fn masked_keys_get_no_attention() {
    let m = SiameseModel::<f64>::new(small(BlockConfig::sfa(2, 2, 2)), 5).unwrap();
    let mask = [true, true, true, false, false];
    let run = |b: &[usize]| {
        let mut tape = Tape::new();
        let t = m
            .forward(&mut tape, &[1, 2, 3, 4], &[true; 4], b, &mask, ForwardOptions::default())
            .unwrap();
        (tape.value(t.x).to_vec(), tape.value(t.logits).to_vec())
    };
    let (x1, l1) = run(&[6, 7, 8, 9, 9]);
    let (x2, l2) = run(&[6, 7, 8, 0, 1]);
    assert_eq!(x1, x2);
    assert_eq!(l1, l2);
}

#[test]
fn padded_and_unpadded_forward_agree() {
    for block in blocks() {
        let m = SiameseModel::<f64>::new(small(block), 6).unwrap();
        let p = pair(&[1, 2, 3], &[4, 5, 6, 7, 8], 1);
        let mut tape = Tape::new();
        let plain = m.forward_pair(&mut tape, &p, ForwardOptions::default()).unwrap();
        let plain = tape.value(plain.logits).to_vec();
        let mut tape = Tape::new();
        let padded = m
            .forward(
                &mut tape,
                &[1, 2, 3, 0, 0, 0, 0, 0],
                &[true, true, true, false, false, false, false, false],
                &[4, 5, 6, 7, 8, 0, 0, 0],
                &[true, true, true, true, true, false, false, false],
                ForwardOptions::default(),
            )
            .unwrap();
        for (a, b) in plain.iter().zip(tape.value(padded.logits)) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }
}

#[test]
fn probabilities_form_a_distribution() {
    let m = SiameseModel::<f64>::new(small(BlockConfig::fa(1)), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let la = rng.gen_range(1..=8);
        let lb = rng.gen_range(1..=8);
        let a: Vec<usize> = (0..la).map(|_| rng.gen_range(0..30)).collect();
        let b: Vec<usize> = (0..lb).map(|_| rng.gen_range(0..30)).collect();
        let p = m.probabilities(&pair(&a, &b, 0)).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(m.predict(&pair(&a, &b, 0)).unwrap() < 2);
    }
}

#[test]
fn swapping_equal_sides_changes_nothing() {
    let m = SiameseModel::<f64>::new(small(BlockConfig::none()), 2).unwrap();
    let mut tape = Tape::new();
    let u = tape.leaf(&Tensor::uniform(&[3, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let uv = m.classify(&mut tape, u, u, &[true; 3], &[true; 3]).unwrap();
    let v = tape.leaf(&Tensor::uniform(&[3, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let vu = m.classify(&mut tape, u, v, &[true; 3], &[true; 3]).unwrap();
    assert_eq!(tape.value(uv), tape.value(vu));
}

#[test]
fn loss_values() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
    let l = cross_entropy(&mut tape, z, 1).unwrap();
    assert_relative_eq!(tape.item(l), std::f64::consts::LN_2, epsilon = 1e-15);
    assert_relative_eq!(nll(&[0.5f64, 0.5], 0), std::f64::consts::LN_2);
    assert_eq!(nll(&[1.0f64, 0.0], 0), 0.0);
    assert!(nll(&[0.9f64, 0.1], 0) > 0.0);
    assert!(cross_entropy(&mut tape, z, 2).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..10 {
        let logits = Tensor::uniform(&[1, 3], -3.0, 3.0, &mut rng).with_grad();
        let label = seed % 3;
        let f = |z: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.leaf(z);
            let l = cross_entropy(&mut tape, v, label).unwrap();
            tape.item(l)
        };
        let mut tape = Tape::new();
        let v = tape.leaf(&logits);
        let l = cross_entropy(&mut tape, v, label).unwrap();
        let g = tape.backward(l).unwrap();
        let numeric = finite_diff_gradient(f, &logits, 1e-6);
        let check = compare(g.wrt(&logits).unwrap(), numeric.data());
        assert!(check.max_rel_err < 1e-6, "{check:?}");
    }
}

fn pair_loss(m: &SiameseModel<f64>, p: &ExamplePair) -> f64 {
    let mut tape = Tape::new();
    let t = m.forward_pair(&mut tape, p, ForwardOptions::default()).unwrap();
    let l = cross_entropy(&mut tape, t.logits, p.label).unwrap();
    tape.item(l)
}

#[test]
fn full_model_matches_finite_differences() {
    for block in blocks() {
        let m = SiameseModel::<f64>::new(tiny(block), 9).unwrap();
        let p = pair(&[1, 4, 7], &[2, 4, 9], 1);
        let mut tape = Tape::new();
        let t = m.forward_pair(&mut tape, &p, ForwardOptions::default()).unwrap();
        let l = cross_entropy(&mut tape, t.logits, p.label).unwrap();
        let grads = tape.backward(l).unwrap();
        for (k, (name, param)) in m.named_params("").into_iter().enumerate() {
            let analytic = grads
                .wrt(param)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; param.numel()]);
            let numeric = finite_diff_gradient(
                |perturbed| {
                    let mut copy = m.clone();
                    let mut idx = 0;
                    copy.visit_mut("", &mut |_, t| {
                        if idx == k {
                            t.data_mut().copy_from_slice(perturbed.data());
                        }
                        idx += 1;
                    });
                    pair_loss(&copy, &p)
                },
                param,
                1e-5,
            );
            let check = compare(&analytic, numeric.data());
            assert!(check.max_rel_err < 1e-4, "{:?} {name}: {check:?}", block.kind);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let a = SiameseModel::<f64>::new(small(BlockConfig::sfa(2, 2, 2)), 11).unwrap();
    let b = SiameseModel::<f64>::new(small(BlockConfig::sfa(2, 2, 2)), 11).unwrap();
    let p = pair(&[1, 2, 3], &[3, 2, 1], 0);
    assert_eq!(a.probabilities(&p).unwrap(), b.probabilities(&p).unwrap());
}

#[test]
fn no_block_is_the_bare_matcher() {
    let base = SiameseModel::<f64>::new(small(BlockConfig::none()), 12).unwrap();
    let fa = SiameseModel::<f64>::new(small(BlockConfig::fa(2)), 12).unwrap();
    assert_eq!(base.block_param_count(), 0);
    assert_eq!(base.param_count(), small(BlockConfig::none()).base_count());
    assert_eq!(fa.base_param_count(), base.param_count());
    for ((n1, t1), (_, t2)) in base
        .named_params("")
        .into_iter()
        .zip(fa.named_params("").into_iter().filter(|(n, _)| !n.starts_with("block_")))
    {
        assert_eq!(t1, t2, "{n1}");
    }
    let mut tape = Tape::new();
    let t = base
        .forward_pair(&mut tape, &pair(&[1, 2], &[3], 0), ForwardOptions::default())
        .unwrap();
    assert_eq!(t.u, t.x);
    assert_eq!(t.v, t.y);
}

#[test]
fn siamese_blocks_are_distinct() {
    for block in [BlockConfig::fa(2), BlockConfig::sfa(2, 2, 2)] {
        let m = SiameseModel::<f64>::new(small(block), 13).unwrap();
        let x = m.block_x.named_params("");
        let y = m.block_y.named_params("");
        assert_eq!(x.len(), y.len());
        for ((_, a), (_, b)) in x.iter().zip(&y) {
            assert_ne!(a.id(), b.id());
            if a.data().iter().any(|&v| v != 0.0) {
                assert_ne!(a.data(), b.data());
            }
        }
    }
}

#[test]
fn detached_second_branch_is_untouched_by_a_step() {
    for block in [BlockConfig::fa(2), BlockConfig::sfa(2, 2, 2)] {
        let mut m = SiameseModel::<f64>::new(small(block), 14).unwrap();
        let batch = [pair(&[1, 2, 3], &[4, 5], 1), pair(&[6, 7], &[8, 9, 10], 0)];
        let refs: Vec<&ExamplePair> = batch.iter().collect();
        let (_, grads) = batch_gradients(&m, &refs, ForwardOptions { detach_y: true }).unwrap();
        let before_y: Vec<_> = m.block_y.named_params("").into_iter().map(|(_, t)| t.clone()).collect();
        let before_py = m.proj_y.weight.clone();
        let before_x = m.block_x.named_params("")[0].1.clone();
        for (_, t) in m.block_y.named_params("") {
            assert!(!grads.reached_tensor(t));
        }
        let mut adam = AdamState::new(&m);
        adam.step(&mut m, &grads, &OptimConfig::default());
        for ((_, now), before) in m.block_y.named_params("").into_iter().zip(&before_y) {
            assert_eq!(now.data(), before.data());
        }
        assert_eq!(m.proj_y.weight.data(), before_py.data());
        assert_ne!(m.block_x.named_params("")[0].1.data(), before_x.data());
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let m = SiameseModel::<f64>::new(small(BlockConfig::sfa(2, 2, 2)), 15).unwrap();
    let ck = Checkpoint::capture(&m);
    assert!(ck.params.contains_key("block_x.W_FC1"));
    assert!(ck.params.contains_key("block_y.exciter2.W_FC2"));
    assert_eq!(ck.params["embedding"].shape, [30, 16]);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let r: SiameseModel<f64> = back.restore().unwrap();
    let p = pair(&[1, 2, 3], &[3, 4], 0);
    assert_eq!(r.probabilities(&p).unwrap(), m.probabilities(&p).unwrap());

    let mut missing = ck.clone();
    missing.params.remove("classifier.out.bias");
    assert!(missing.restore::<f64>().is_err());
    let mut extra = ck.clone();
    extra.params.insert("stray".into(), ck.params["embedding"].clone());
    assert!(extra.restore::<f64>().is_err());
    let mut reshaped = ck;
    reshaped.params.get_mut("embedding").unwrap().shape = vec![16, 30];
    assert!(reshaped.restore::<f64>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probabilities_sum_to_one(seed in 0u64..1000, la in 1usize..9, lb in 1usize..9) {
        let m = SiameseModel::<f64>::new(small(BlockConfig::sfa(2, 2, 2)), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..la).map(|_| rng.gen_range(0..30)).collect();
        let b: Vec<usize> = (0..lb).map(|_| rng.gen_range(0..30)).collect();
        let p = m.probabilities(&pair(&a, &b, 0)).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
