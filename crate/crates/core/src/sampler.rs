//! Batch construction under the two compared strategies: random sampling
//! from a merged pool and balanced per-environment sampling. Batch
//! contents are a pure function of (manifests, seed, epoch); per-row
//! augmentation rng is derived from (seed, epoch, batch, row) so results
//! do not depend on loader parallelism.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{apply_affine, sample_affine, AffineParams, AugmentConfig};
use crate::data::{DatasetManifest, ImagePack, Label};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("batch size {batch_size} not divisible by environment count {envs}")]
    Indivisible { batch_size: usize, envs: usize },
    #[error("no training environments")]
    NoEnvs,
    #[error("empty environment {0}")]
    EmptyEnv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    RandomMerged,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Balanced,
            batch_size: 64,
            seed: 0,
            drop_last: true,
        }
    }
}

/// The unit consumed by one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    pub mask: Vec<f64>,
    pub env_tags: Vec<usize>,
}

/// An index plan for one batch: (environment index, record index) per row.
pub type BatchPlan = Vec<(usize, usize)>;

// Domain-separated seed mixing (splitmix64 chain).
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x853c_49e6_748f_ea9bu64;
    for &p in parts {
        acc = mix(acc ^ p);
    }
    acc
}

fn perm_rng(seed: u64, epoch: u64, tag: u64, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, tag, round]))
}

const ROW_TAG: u64 = 0x0bad_c0de_0000_0001;

/// Rng stream for one (epoch, batch, row) coordinate.
pub fn row_rng(seed: u64, epoch: u64, batch: u64, row: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, ROW_TAG, epoch, batch, row]))
}

/// Index plans for one epoch of random-merged sampling.
pub fn epoch_plans_random(
    env_sizes: &[usize],
    cfg: &SamplerConfig,
    epoch: u64,
) -> Vec<BatchPlan> {
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (e, &n) in env_sizes.iter().enumerate() {
        pool.extend((0..n).map(|i| (e, i)));
    }
    let mut rng = perm_rng(cfg.seed, epoch, 0xfeed_0001, 0);
    pool.shuffle(&mut rng);
    let mut plans = Vec::new();
    let mut i = 0;
    while i + cfg.batch_size <= pool.len() {
        plans.push(pool[i..i + cfg.batch_size].to_vec());
        i += cfg.batch_size;
    }
    if !cfg.drop_last && i < pool.len() {
        plans.push(pool[i..].to_vec());
    }
    plans
}

/// Index plans for one epoch of balanced sampling. Each batch holds
/// batch_size/E rows from every environment; small environments recycle
/// through fresh permutations. Epoch length follows the smallest
/// environment.
pub fn epoch_plans_balanced(
    env_sizes: &[usize],
    cfg: &SamplerConfig,
    epoch: u64,
) -> Result<Vec<BatchPlan>, SamplerError> {
    let n_envs = env_sizes.len();
    if n_envs == 0 {
        return Err(SamplerError::NoEnvs);
    }
    if cfg.batch_size % n_envs != 0 {
        return Err(SamplerError::Indivisible {
            batch_size: cfg.batch_size,
            envs: n_envs,
        });
    }
    let per_env = cfg.batch_size / n_envs;
    let min_size = *env_sizes.iter().min().unwrap();
    let n_batches = min_size / per_env;

    // per-env streams: permutation reshuffled on exhaustion
    struct Stream {
        order: Vec<usize>,
        cursor: usize,
        round: u64,
    }
    let mut streams: Vec<Stream> = env_sizes
        .iter()
        .enumerate()
        .map(|(e, &n)| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut perm_rng(cfg.seed, epoch, 0xba1a_0000 + e as u64, 0));
            Stream {
                order,
                cursor: 0,
                round: 0,
            }
        })
        .collect();

    let mut plans = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut plan = Vec::with_capacity(cfg.batch_size);
        for (e, s) in streams.iter_mut().enumerate() {
            for _ in 0..per_env {
                if s.cursor == s.order.len() {
                    s.round += 1;
                    s.order
                        .shuffle(&mut perm_rng(cfg.seed, epoch, 0xba1a_0000 + e as u64, s.round));
                    s.cursor = 0;
                }
                plan.push((e, s.order[s.cursor]));
                s.cursor += 1;
            }
        }
        plans.push(plan);
    }
    Ok(plans)
}

pub fn epoch_plans(
    env_sizes: &[usize],
    cfg: &SamplerConfig,
    epoch: u64,
) -> Result<Vec<BatchPlan>, SamplerError> {
    match cfg.mode {
        SamplerMode::RandomMerged => Ok(epoch_plans_random(env_sizes, cfg, epoch)),
        SamplerMode::Balanced => epoch_plans_balanced(env_sizes, cfg, epoch),
    }
}

/// Materialize one planned batch: augment (or resize-only) each row's
/// image and copy labels and masks.
pub fn assemble_batch(
    plan: &BatchPlan,
    envs: &[(DatasetManifest, ImagePack)],
    aug: &AugmentConfig,
    seed: u64,
    epoch: u64,
    batch_index: u64,
) -> Batch {
    assert!(!plan.is_empty());
    let n_tasks = envs[0].0.tasks.len();
    let dim = aug.target_size * aug.target_size;
    let mut features = Vec::with_capacity(plan.len() * dim);
    let mut labels = Vec::with_capacity(plan.len() * n_tasks);
    let mut mask = Vec::with_capacity(plan.len() * n_tasks);
    let mut env_tags = Vec::with_capacity(plan.len());

    for (row_idx, &(e, rec_idx)) in plan.iter().enumerate() {
        let (manifest, pack) = &envs[e];
        let record = &manifest.records[rec_idx];
        let image = pack.image(record.image_ref);
        let params = if aug.enabled {
            let mut rng = row_rng(seed, epoch, batch_index, row_idx as u64);
            sample_affine(aug, &mut rng)
        } else {
            AffineParams::IDENTITY
        };
        features.extend(apply_affine(
            image,
            pack.height,
            pack.width,
            &params,
            aug.target_size,
        ));
        for l in &record.labels {
            match l {
                Label::Positive => {
                    labels.push(1.0);
                    mask.push(1.0);
                }
                Label::Negative => {
                    labels.push(0.0);
                    mask.push(1.0);
                }
                Label::Missing => {
                    labels.push(0.0);
                    mask.push(0.0);
                }
            }
        }
        env_tags.push(e);
    }
    Batch {
        rows: plan.len(),
        features,
        labels,
        mask,
        env_tags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn cfg(mode: SamplerMode, batch_size: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            mode,
            batch_size,
            seed,
            drop_last: true,
        }
    }

    #[test]
    fn random_partitions_pool_exactly_once() {
        let plans = epoch_plans_random(&[4, 4], &cfg(SamplerMode::RandomMerged, 4, 1), 0);
        assert_eq!(plans.len(), 2);
        let mut seen: Vec<(usize, usize)> = plans.concat();
        seen.sort_unstable();
        let expect: Vec<(usize, usize)> = (0..2).flat_map(|e| (0..4).map(move |i| (e, i))).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn random_deterministic() {
        let c = cfg(SamplerMode::RandomMerged, 8, 42);
        assert_eq!(epoch_plans_random(&[30, 10], &c, 3), epoch_plans_random(&[30, 10], &c, 3));
        assert_ne!(epoch_plans_random(&[30, 10], &c, 3), epoch_plans_random(&[30, 10], &c, 4));
    }

    #[test]
    fn random_longrun_env_fraction_tracks_pool_skew() {
        let c = cfg(SamplerMode::RandomMerged, 10, 7);
        let mut env0 = 0usize;
        let mut total = 0usize;
        for epoch in 0..200 {
            for plan in epoch_plans_random(&[90, 10], &c, epoch) {
                for (e, _) in plan {
                    if e == 0 {
                        env0 += 1;
                    }
                    total += 1;
                }
            }
        }
        let frac = env0 as f64 / total as f64;
        assert!((frac - 0.9).abs() <= 0.03, "fraction {frac}");
    }

    #[test]
    fn balanced_exact_per_env_counts() {
        for (sizes, batch) in [(vec![40, 40], 64), (vec![30, 30, 30], 6), (vec![20, 20, 20, 20], 8)] {
            let c = cfg(SamplerMode::Balanced, batch, 5);
            let per_env = batch / sizes.len();
            let plans = epoch_plans_balanced(&sizes, &c, 0).unwrap();
            assert!(!plans.is_empty());
            for plan in &plans {
                for e in 0..sizes.len() {
                    assert_eq!(plan.iter().filter(|(pe, _)| *pe == e).count(), per_env);
                }
            }
        }
    }

    #[test]
    fn balanced_two_envs_batch64_is_32_each() {
        let plans = epoch_plans_balanced(&[100, 100], &cfg(SamplerMode::Balanced, 64, 0), 0).unwrap();
        assert_eq!(plans.len(), 3); // floor(100/32)
        for plan in &plans {
            assert_eq!(plan.iter().filter(|(e, _)| *e == 0).count(), 32);
            assert_eq!(plan.iter().filter(|(e, _)| *e == 1).count(), 32);
        }
    }

    #[test]
    fn balanced_small_env_recycles() {
        let plans = epoch_plans_balanced(&[90, 10], &cfg(SamplerMode::Balanced, 10, 2), 0).unwrap();
        assert_eq!(plans.len(), 2); // floor(10/5)
        // env 1 contributes 5 rows per batch from a 10-element set, no recycle needed here;
        // shrink further to force recycling
        let plans = epoch_plans_balanced(&[90, 3], &cfg(SamplerMode::Balanced, 10, 2), 0);
        // min env 3, per_env 5 -> 0 full batches under the min-size rule
        assert_eq!(plans.unwrap().len(), 0);

        // recycling shows up when another env is the limiter
        let plans = epoch_plans_balanced(&[4, 40], &cfg(SamplerMode::Balanced, 4, 2), 0).unwrap();
        assert_eq!(plans.len(), 2);
    }

    #[test]
    fn balanced_recycle_multiplicity() {
        // env sizes 90 and 10, batch 10 -> 9 batches if we let env0 limit;
        // here min is env1 (10), per_env 5 -> 2 batches. To observe the ~9x
        // recycle of the spec example, drive 9 batches by hand across epochs.
        let c = cfg(SamplerMode::Balanced, 10, 3);
        let mut counts0 = vec![0usize; 90];
        let mut counts1 = vec![0usize; 10];
        for epoch in 0..9 {
            for plan in epoch_plans_balanced(&[90, 10], &c, epoch).unwrap() {
                for (e, i) in plan {
                    if e == 0 {
                        counts0[i] += 1;
                    } else {
                        counts1[i] += 1;
                    }
                }
            }
        }
        let total0: usize = counts0.iter().sum();
        let total1: usize = counts1.iter().sum();
        assert_eq!(total0, total1); // 5/5 per batch
        // per-element usage of the small env is ~9x the large env's
        let mean0 = total0 as f64 / 90.0;
        let mean1 = total1 as f64 / 10.0;
        assert!(mean1 / mean0 > 8.0);
        // within one epoch each element appears at most ceil-balanced often
        assert!(counts0.iter().all(|&c| c <= 9));
    }

    #[test]
    fn balanced_rejects_indivisible() {
        let err = epoch_plans_balanced(&[10, 10], &cfg(SamplerMode::Balanced, 63, 0), 0).unwrap_err();
        assert!(matches!(err, SamplerError::Indivisible { .. }));
    }

    #[test]
    fn epochs_use_different_permutations() {
        let c = cfg(SamplerMode::Balanced, 8, 11);
        let a = epoch_plans_balanced(&[64, 64], &c, 0).unwrap();
        let b = epoch_plans_balanced(&[64, 64], &c, 1).unwrap();
        assert_ne!(a[0], b[0]);
    }

    fn synth2() -> Vec<(DatasetManifest, ImagePack)> {
        generate_synthetic(&SynthConfig {
            n_per_env: 20,
            missing_rate: 0.3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn assemble_disabled_aug_is_resize_only() {
        let envs = synth2();
        let aug = AugmentConfig::disabled(16);
        let plan: BatchPlan = vec![(0, 0), (1, 3)];
        let b = assemble_batch(&plan, &envs, &aug, 0, 0, 0);
        assert_eq!(b.rows, 2);
        assert_eq!(b.env_tags, vec![0, 1]);
        // 16x16 source into 16x16 target with identity params = normalized copy
        let img = envs[0].1.image(envs[0].0.records[0].image_ref);
        for (f, p) in b.features[..256].iter().zip(img) {
            assert!((f - crate::data::normalize_pixel(*p)).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_mask_convention() {
        let envs = synth2();
        let aug = AugmentConfig::disabled(16);
        // find a record with at least one missing label
        let (ei, ri) = envs
            .iter()
            .enumerate()
            .find_map(|(e, (m, _))| {
                m.records
                    .iter()
                    .position(|r| r.labels.contains(&Label::Missing))
                    .map(|i| (e, i))
            })
            .expect("missing_rate 0.3 should produce missing labels");
        let b = assemble_batch(&vec![(ei, ri)], &envs, &aug, 0, 0, 0);
        for (t, l) in envs[ei].0.records[ri].labels.iter().enumerate() {
            match l {
                Label::Positive => assert_eq!((b.labels[t], b.mask[t]), (1.0, 1.0)),
                Label::Negative => assert_eq!((b.labels[t], b.mask[t]), (0.0, 1.0)),
                Label::Missing => assert_eq!((b.labels[t], b.mask[t]), (0.0, 0.0)),
            }
        }
    }

    #[test]
    fn assemble_deterministic_per_coordinates() {
        let envs = synth2();
        let aug = AugmentConfig {
            target_size: 16,
            ..AugmentConfig::default()
        };
        let plan: BatchPlan = vec![(0, 1), (1, 2), (0, 5)];
        let a = assemble_batch(&plan, &envs, &aug, 9, 4, 2);
        let b = assemble_batch(&plan, &envs, &aug, 9, 4, 2);
        assert_eq!(a, b);
        let c = assemble_batch(&plan, &envs, &aug, 9, 4, 3);
        assert_ne!(a.features, c.features);
    }
}
