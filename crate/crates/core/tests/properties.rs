//! Randomised invariants of metrics, calibration, fusion, the transformer
//! and the file formats.

mod common;

use gzsl_core::checkpoint::Checkpoint;
use gzsl_core::config::Config;
use gzsl_core::dsvtm::{dsvtm_forward, imse_forward, smid_attention, DsvtmOptions};
use gzsl_core::eval::{cs_predict, gamma_sweep, harmonic_mean, per_class_accuracy, EvalSet, Scored};
use gzsl_core::granularity::{cross_granularity_loss, fuse_values, fusion_weights, ScglMode};
use gzsl_core::params::{DsvtmParams, ModelLayout};
use gzsl_core::tensor::{grad_check, GradCheckOptions, Tape, Tensor, Var};
use gzsl_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random scored test splits over `k` classes of which the first `seen`
/// are seen.
fn random_eval_set(rng: &mut ChaCha8Rng, k: usize, seen: usize, n: usize) -> EvalSet {
    let mask: Vec<bool> = (0..k).map(|c| c < seen).collect();
    let scores = |rng: &mut ChaCha8Rng| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let ts = Scored {
        labels: (0..n).map(|_| rng.gen_range(0..seen)).collect(),
        scores: (0..n).map(|_| scores(rng)).collect(),
    };
    let tu = Scored {
        labels: (0..n).map(|_| rng.gen_range(seen..k)).collect(),
        scores: (0..n).map(|_| scores(rng)).collect(),
    };
    EvalSet::new(mask, ts, tu).unwrap()
}

#[test]
fn harmonic_mean_matches_closed_form_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let s = rng.gen_range(0.0..100.0);
        let u = rng.gen_range(0.0..100.0);
        let h = harmonic_mean(s, u);
        assert!((h - 2.0 * s * u / (s + u)).abs() < 1e-9);
        assert!(h >= s.min(u) - 1e-12 && h <= s.max(u) + 1e-12);
    }
    assert_eq!(harmonic_mean(0.0, 55.0), 0.0);
    assert_eq!(harmonic_mean(37.5, 37.5), 37.5);
}

proptest! {
    #![proptest_config(common::proptest_config(64))]

    #[test]
    fn report_reproduced_from_stored_predictions(seed in any::<u64>(), k in 3usize..8, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seen = rng.gen_range(1..k);
        let set = random_eval_set(&mut rng, k, seen, n);
        let r = set.report(0.0);
        let mask: Vec<bool> = (0..k).map(|c| c < seen).collect();
        let ps: Vec<usize> = set.test_seen.scores.iter().map(|v| cs_predict(v, 0.0, &mask)).collect();
        let pu: Vec<usize> = set.test_unseen.scores.iter().map(|v| cs_predict(v, 0.0, &mask)).collect();
        prop_assert_eq!(per_class_accuracy(&set.test_seen.labels, &ps, k).0, r.seen);
        prop_assert_eq!(per_class_accuracy(&set.test_unseen.labels, &pu, k).0, r.unseen);
        prop_assert!((0.0..=100.0).contains(&r.h) && r.h >= r.seen.min(r.unseen) - 1e-12);
        prop_assert!(r.h <= r.seen.max(r.unseen) + 1e-12);
    }

    #[test]
    fn zsl_accuracy_ignores_seen_prototypes(seed in any::<u64>(), k in 3usize..8, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seen = rng.gen_range(1..k);
        let set = random_eval_set(&mut rng, k, seen, n);
        let mut tu = set.test_unseen.clone();
        for v in &mut tu.scores {
            for s in v.iter_mut().take(seen) {
                *s = rng.gen_range(-5.0..5.0);
            }
        }
        let mask: Vec<bool> = (0..k).map(|c| c < seen).collect();
        let moved = EvalSet::new(mask, set.test_seen.clone(), tu).unwrap();
        prop_assert_eq!(moved.report(0.3).acc, set.report(0.3).acc);
    }

    #[test]
    fn unseen_fraction_monotone_in_gamma(seed in any::<u64>(), k in 3usize..8, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seen = rng.gen_range(1..k);
        let set = random_eval_set(&mut rng, k, seen, n);
        let grid = gzsl_core::eval::gamma_grid(0.0, 2.5, 0.05).unwrap();
        let fr: Vec<f64> = grid.iter().map(|&g| set.unseen_fraction(g)).collect();
        prop_assert!(fr.windows(2).all(|w| w[1] >= w[0]));
        let sweep = gamma_sweep(&set, &grid).unwrap();
        prop_assert!(sweep.reports.iter().all(|r| r.h <= sweep.best_report().h));
    }

    #[test]
    fn calibration_extremes(seed in any::<u64>(), k in 2usize..8, gamma in 2.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seen = rng.gen_range(1..k);
        let mask: Vec<bool> = (0..k).map(|c| c < seen).collect();
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.999..0.999)).collect();
        let mut best = 0;
        for i in 1..k {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        prop_assert_eq!(cs_predict(&scores, 0.0, &mask), best);
        prop_assert!(!mask[cs_predict(&scores, gamma, &mask)]);
    }

    #[test]
    fn fusion_is_a_convex_combination(seed in any::<u64>(), m in 1usize..4, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let certs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
        let w = fusion_weights(&certs).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        let x = common::random_tensor(&mut rng, &[d], 3.0);
        let same = fuse_values(&vec![x.clone(); m], &certs).unwrap();
        prop_assert!(same.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn distillation_nonnegative_and_zero_on_agreement(seed in any::<u64>(), k in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let teacher = common::softmax(&(0..k).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<f64>>());
        for mode in [ScglMode::Ours, ScglMode::L1, ScglMode::L2, ScglMode::Kl, ScglMode::Jsd] {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::vector(logits.clone()), false);
            let v = cross_granularity_loss(&mut tape, &teacher, l, mode).unwrap();
            prop_assert!(tape.value(v).item() >= -1e-12);
            let v = cross_granularity_loss(&mut tape, &common::softmax(&logits), l, mode).unwrap();
            prop_assert!(tape.value(v).item().abs() < 1e-12);
        }
    }

    #[test]
    fn adapted_attributes_ignore_patch_order(seed in any::<u64>(), n_s in 1usize..6, n_v in 2usize..8, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_dsvtm(&mut rng, d, n_s, n_v);
        let s = common::random_tensor(&mut rng, &[n_s, d], 1.0);
        let f = common::random_tensor(&mut rng, &[n_v, d], 1.0);
        let mut perm: Vec<usize> = (0..n_v).collect();
        for i in (1..n_v).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let fp = permute_rows(&f, &perm);
        let opts = DsvtmOptions::default();

        let run = |patches: &Tensor| {
            let mut tape = Tape::new();
            let pv = p.map(|_, t| tape.leaf_ref(t, false));
            let (sv, fv) = (tape.leaf_ref(&s, false), tape.leaf_ref(patches, false));
            let enc = imse_forward(&mut tape, sv, fv, &pv.imse, &opts).unwrap();
            let att = smid_attention(&mut tape, fv, enc.attributes, &pv.smid, false).unwrap();
            (tape.value(enc.attributes).clone(), tape.value(att).clone())
        };
        let (s_a, att_a) = run(&f);
        let (s_b, att_b) = run(&fp);
        prop_assert!(s_a.max_abs_diff(&s_b) < 1e-10);
        prop_assert!(permute_rows(&att_a, &perm).max_abs_diff(&att_b) < 1e-10);
    }

    #[test]
    fn config_text_round_trip(lr in 1e-5f64..1.0, noise in 0.0f64..2.0, epochs in 1usize..100, seeds in proptest::collection::vec(0u64..1000, 1..6)) {
        let mut c = Config::default();
        c.set("lr", &lr.to_string()).unwrap();
        c.set("noise", &noise.to_string()).unwrap();
        c.set("epochs", &epochs.to_string()).unwrap();
        c.set("seeds", &seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")).unwrap();
        let back = Config::parse(&c.to_text(), "round trip").unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = ModelLayout::new(rng.gen_range(4..7), rng.gen_range(2..6), 2, vec![1, 4], 2);
        let params = layout.init(&mut rng, 0.7, 0.35);
        let ck = Checkpoint::new(&params, format!("lr = {}\n", rng.gen::<f64>()), rng.gen_range(0..100), &ChaCha8Rng::seed_from_u64(seed));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.restore(&layout.shapes()).unwrap(), params);
        let at = ((bytes.len() as f64) * cut) as usize;
        let is_corrupt = matches!(Checkpoint::from_bytes(&bytes[..at]), Err(Error::CorruptCheckpoint(_)));
        prop_assert!(is_corrupt);
    }
}

fn random_dsvtm(rng: &mut ChaCha8Rng, d: usize, n_s: usize, n_v: usize) -> DsvtmParams<Tensor> {
    let layout = ModelLayout::new(d, n_s, n_s.min(2), vec![n_v], 2);
    let mut p = layout.init(rng, 1.0, 1.0).dsvtm.remove(0);
    for (_, t) in p.imse.entries_mut().into_iter().chain(p.smid.entries_mut()) {
        *t = common::random_tensor(rng, t.shape(), 0.8);
    }
    p
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn transformer_visual_output_gradients() {
    // d/dθ sum(F̂) for every transformer parameter and both inputs.
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_s, n_v, d) = (4, 4, 3);
        let p = random_dsvtm(&mut rng, d, n_s, n_v);
        let s = common::random_tensor(&mut rng, &[n_s, d], 1.0);
        let f = common::random_tensor(&mut rng, &[n_v, d], 1.0);
        let names: Vec<&str> = p.imse.entries().into_iter().chain(p.smid.entries()).map(|(n, _)| n).collect();
        let mut inputs: Vec<Tensor> = p.imse.entries().into_iter().chain(p.smid.entries()).map(|(_, t)| t.clone()).collect();
        inputs.push(s.clone());
        inputs.push(f.clone());
        let n_imse = p.imse.entries().len();

        let build = |tape: &mut Tape<'_>, vars: &[Var]| -> Var {
            let mut it = vars.iter().copied();
            let pv = DsvtmParams {
                imse: p.imse.map(|_, _| it.next().unwrap()),
                smid: p.smid.map(|_, _| it.next().unwrap()),
            };
            let (sv, fv) = (vars[vars.len() - 2], vars[vars.len() - 1]);
            let out = dsvtm_forward(tape, sv, fv, &pv, &DsvtmOptions::default()).unwrap();
            tape.sum(out.visual)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_ref(t, true)).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
        let fwd = |ps: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|t| tape.leaf_ref(t, false)).collect();
            let l = build(&mut tape, &vars);
            tape.value(l).item()
        };
        // Key biases shift each attention row uniformly, so their gradient
        // is identically zero and finite differences see only rounding.
        let mut checked = analytic.clone();
        for (i, name) in names.iter().enumerate() {
            if *name == "k_b" {
                assert!(analytic[i].data().iter().all(|g| g.abs() < 1e-12), "{name}: {:?}", analytic[i]);
                checked[i] = Tensor::zeros(analytic[i].shape().to_vec());
            }
        }
        let opts = GradCheckOptions { coords_per_param: usize::MAX, ..GradCheckOptions::default() };
        let skip: Vec<usize> = names.iter().enumerate().filter(|(_, n)| **n == "k_b").map(|(i, _)| i).collect();
        let kept: Vec<usize> = (0..inputs.len()).filter(|i| !skip.contains(i)).collect();
        let sub_inputs: Vec<Tensor> = kept.iter().map(|&i| inputs[i].clone()).collect();
        let sub_analytic: Vec<Tensor> = kept.iter().map(|&i| checked[i].clone()).collect();
        let full = inputs.clone();
        let fwd_sub = |ps: &[Tensor]| {
            let mut all = full.clone();
            for (&i, t) in kept.iter().zip(ps) {
                all[i] = t.clone();
            }
            fwd(&all)
        };
        let r = grad_check(fwd_sub, &sub_inputs, &sub_analytic, &opts);
        let label = |i: usize| match kept[i] {
            j if j < names.len() => names[j],
            j if j == n_imse * 2 + 2 => "F",
            _ => "S",
        };
        let worst = r.worst.map(|(i, _)| label(i));
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {:?} at {worst:?}", r);
    }
}
