//! Property tests for the library's structural invariants.

use proptest::prelude::*;

use oodbatch::data::{parse_manifest, subset_sequential, write_manifest};
use oodbatch::metrics::{roc_auc, roc_auc_pairwise, SeedAggregate};
use oodbatch::nn::{wbce_loss, LossWeights};
use oodbatch::sampler::{epoch_plans_balanced, epoch_plans_random, SamplerConfig, SamplerMode};

fn score_strategy() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec(
        ((0u8..16).prop_map(|q| q as f64 / 8.0), any::<bool>()),
        2..120,
    )
}

proptest! {
    #[test]
    fn auc_rank_equals_pairwise(pairs in score_strategy()) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
        let labels: Vec<f64> = pairs.iter().map(|(_, y)| if *y { 1.0 } else { 0.0 }).collect();
        match (roc_auc(&scores, &labels), roc_auc_pairwise(&scores, &labels)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "definedness disagreement: {other:?}"),
        }
    }

    #[test]
    fn auc_permutation_invariant(pairs in score_strategy(), seed in any::<u64>()) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
        let labels: Vec<f64> = pairs.iter().map(|(_, y)| if *y { 1.0 } else { 0.0 }).collect();
        let mut perm: Vec<usize> = (0..pairs.len()).collect();
        // cheap deterministic shuffle
        let mut s = seed | 1;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pl: Vec<f64> = perm.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(roc_auc(&scores, &labels), roc_auc(&ps, &pl));
    }

    #[test]
    fn loss_invariant_under_row_permutation(
        rows in prop::collection::vec(
            (prop::collection::vec(-5.0f64..5.0, 3), prop::collection::vec(any::<bool>(), 3), prop::collection::vec(any::<bool>(), 3)),
            1..20,
        )
    ) {
        let w = LossWeights { pos_weight: vec![1.0, 2.0, 0.5] };
        let flat = |rs: &[(Vec<f64>, Vec<bool>, Vec<bool>)]| {
            let mut z = Vec::new();
            let mut y = Vec::new();
            let mut m = Vec::new();
            for (zr, yr, mr) in rs {
                z.extend(zr.iter().copied());
                y.extend(yr.iter().map(|&b| if b { 1.0 } else { 0.0 }));
                m.extend(mr.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
            (z, y, m)
        };
        let (z, y, m) = flat(&rows);
        let (loss, grad) = wbce_loss(&z, &y, &m, &w);
        let mut rev = rows.clone();
        rev.reverse();
        let (z2, y2, m2) = flat(&rev);
        let (loss2, grad2) = wbce_loss(&z2, &y2, &m2, &w);
        prop_assert!((loss - loss2).abs() <= 1e-12);
        // gradients permute with the rows
        let n = rows.len();
        for r in 0..n {
            for t in 0..3 {
                prop_assert!((grad[r * 3 + t] - grad2[(n - 1 - r) * 3 + t]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn subset_composition(n_records in 1usize..40, fa in 0.0f64..1.0, fb in 0.0f64..1.0) {
        let a = 1 + ((n_records - 1) as f64 * fa) as usize;
        let b = 1 + ((a - 1) as f64 * fb) as usize;
        let mut text = String::from("id,image_ref,T\n");
        for i in 0..n_records {
            text.push_str(&format!("r{i},{i},{}\n", i % 2));
        }
        let m = parse_manifest(&text, "t", n_records).unwrap();
        let via_a = subset_sequential(&subset_sequential(&m, a).unwrap(), b).unwrap();
        let direct = subset_sequential(&m, b).unwrap();
        prop_assert_eq!(via_a, direct);
    }

    #[test]
    fn manifest_roundtrip(n_records in 0usize..30, seed in any::<u64>()) {
        let mut text = String::from("id,image_ref,A,B\n");
        let mut s = seed;
        for i in 0..n_records {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let tok = |v: u64| match v % 3 { 0 => "0", 1 => "1", _ => "" };
            text.push_str(&format!("r{i},{i},{},{}\n", tok(s >> 8), tok(s >> 16)));
        }
        let m = parse_manifest(&text, "t", n_records.max(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_manifest(&m, &p).unwrap();
        prop_assert_eq!(std::fs::read_to_string(&p).unwrap(), text);
    }

    #[test]
    fn sampler_pure_function_of_inputs(
        sizes in prop::collection::vec(8usize..60, 2..5),
        seed in any::<u64>(),
        epoch in 0u64..20,
    ) {
        let n = sizes.len();
        let cfg = SamplerConfig {
            mode: SamplerMode::Balanced,
            batch_size: 2 * n,
            seed,
            drop_last: true,
        };
        prop_assert_eq!(
            epoch_plans_balanced(&sizes, &cfg, epoch).unwrap(),
            epoch_plans_balanced(&sizes, &cfg, epoch).unwrap()
        );
        let rcfg = SamplerConfig { mode: SamplerMode::RandomMerged, ..cfg };
        prop_assert_eq!(
            epoch_plans_random(&sizes, &rcfg, epoch),
            epoch_plans_random(&sizes, &rcfg, epoch)
        );
    }

    #[test]
    fn aggregate_consistent_with_values(values in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let agg = SeedAggregate::from_values(values.clone());
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((agg.mean - mean).abs() <= 1e-12);
        if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
            prop_assert!((agg.std - var.sqrt()).abs() <= 1e-12);
        } else {
            prop_assert_eq!(agg.std, 0.0);
        }
    }
}
