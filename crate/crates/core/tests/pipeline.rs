//! Cross-module behavior of the synthetic shift: a model that latches on
//! to one environment's spurious feature is anti-correlated with the
//! labels of an environment whose spurious sign is flipped.

use oodbatch::augment::AugmentConfig;
use oodbatch::data::{generate_synthetic, SynthConfig};
use oodbatch::metrics::masked_auc_report;
use oodbatch::nn::{
    adam_step, backward, forward, init_model, wbce_loss, LossWeights, ModelSpec, OptimConfig,
};
use oodbatch::sampler::{assemble_batch, Batch};

fn full_batch(envs: &[(oodbatch::data::DatasetManifest, oodbatch::data::ImagePack)], env: usize) -> Batch {
    let plan: Vec<(usize, usize)> = (0..envs[env].0.records.len()).map(|i| (env, i)).collect();
    assemble_batch(&plan, envs, &AugmentConfig::disabled(16), 0, 0, 0)
}

#[test]
fn spurious_sign_flip_inverts_ranking() {
    // spurious-only data: the corner patch is the sole label signal
    let cfg = SynthConfig {
        n_envs: 2,
        n_per_env: 400,
        core_strength: 0.0,
        spurious_strength: vec![0.9, -0.9],
        noise_std: 0.05,
        missing_rate: 0.0,
        seed: 42,
        ..SynthConfig::default()
    };
    let envs = generate_synthetic(&cfg).unwrap();
    let train = full_batch(&envs, 0);
    let spec = ModelSpec::logistic(256, 4);
    let mut state = init_model(&spec, 0);
    let w = LossWeights::uniform(4);
    let optim = OptimConfig::default();
    for _ in 0..300 {
        let logits = forward(&state, &spec, &train.features).unwrap();
        let (_, dlogits) = wbce_loss(&logits, &train.labels, &train.mask, &w);
        let grads = backward(&state, &spec, &train.features, &dlogits).unwrap();
        adam_step(&mut state, &grads, &optim).unwrap();
    }
    let tasks = &envs[0].0.tasks;

    // sanity: the model solves its own environment
    let in_dist = forward(&state, &spec, &train.features).unwrap();
    let rep_in = masked_auc_report(&in_dist, &train.labels, &train.mask, tasks);
    assert!(rep_in.mean_auc.unwrap() > 0.8, "in-dist auc {:?}", rep_in.mean_auc);

    // the flipped-sign environment inverts the ranking
    let test = full_batch(&envs, 1);
    let scores = forward(&state, &spec, &test.features).unwrap();
    let rep = masked_auc_report(&scores, &test.labels, &test.mask, tasks);
    assert!(
        rep.mean_auc.unwrap() < 0.5,
        "flipped-env auc {:?}",
        rep.mean_auc
    );
}
