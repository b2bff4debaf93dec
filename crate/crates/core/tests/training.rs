//! Training loop, checkpoints and open-world evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use setinfer_core::afa::{run_batch_afa, AfaConfig};
use setinfer_core::eval::eval_few_shot;
use setinfer_core::synth::{synth_generate, GeneratorSpec};
use setinfer_core::trainer::{finetune, fit, split_bundle, train_step, validation_nll, TrainConfig, TrainState};
use setinfer_core::{DatasetBundle, Model, ModelConfig};

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        layers: 1,
        aggregate_layers: 1,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

fn quiet(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        lr,
        val_every: 0,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn bundle(family: &str, rows: usize, seed: u64) -> DatasetBundle {
    synth_generate(&GeneratorSpec::by_name(family, rows).unwrap(), seed).unwrap()
}

#[test]
fn every_parameter_moves_within_ten_seeds() {
    let collection = vec![bundle("mixed", 30, 0), bundle("categorical-bayes-net", 30, 1)];
    let base = Model::new(small(0)).unwrap();
    let mut moved = vec![false; base.params.len()];
    for seed in 0..10 {
        let cfg = TrainConfig { seed, ..quiet(1, 1e-2) };
        let mut state = TrainState::new(base.clone(), &cfg);
        train_step(&mut state, &collection, &cfg).unwrap();
        for (k, id) in base.params.ids().enumerate() {
            moved[k] |= state.model.params.get(id).data() != base.params.get(id).data();
        }
    }
    let stuck: Vec<&str> = base
        .params
        .ids()
        .zip(&moved)
        .filter(|(_, &m)| !m)
        .map(|(id, _)| base.params.name(id))
        .collect();
    assert!(stuck.is_empty(), "never updated: {stuck:?}");
}

#[test]
fn zero_learning_rate_finetune_changes_nothing() {
    let model = Model::new(small(1)).unwrap();
    let before = model.param_digest();
    let out = finetune(model.clone(), &model.config, &bundle("mixed", 30, 2), &quiet(5, 0.0)).unwrap();
    assert_eq!(out.model.param_digest(), before);
}

#[test]
fn finetuning_improves_held_out_likelihood() {
    let data = bundle("linear-gaussian", 600, 3);
    let (train, held) = split_bundle(&data, 0.25, 0);
    let model = Model::new(small(2)).unwrap();
    let before = validation_nll(&model, std::slice::from_ref(&held), 0, 150).unwrap();
    let out = finetune(model.clone(), &model.config, &train, &quiet(300, 3e-3)).unwrap();
    let after = validation_nll(&out.model, std::slice::from_ref(&held), 0, 150).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn finetuning_elsewhere_leaves_evaluation_reproducible() {
    let model = Model::new(small(3)).unwrap();
    let (train, test) = split_bundle(&bundle("mixed", 60, 4), 0.25, 1);
    let digest = model.config.digest();
    let first = eval_few_shot(&model, &train, &test, 2, &[0, 1], &digest).unwrap();
    let _ = finetune(model.clone(), &model.config, &bundle("xor-style", 40, 5), &quiet(10, 1e-2)).unwrap();
    let second = eval_few_shot(&model, &train, &test, 2, &[0, 1], &digest).unwrap();
    assert_eq!(first.to_json_pretty().unwrap(), second.to_json_pretty().unwrap());
}

#[test]
fn acquisition_on_an_unseen_bundle_updates_no_parameter() {
    let model = fit(Model::new(small(4)).unwrap(), &[bundle("mixed", 40, 6)], &quiet(5, 1e-3)).unwrap().model;
    let before = model.param_digest();
    let unseen = synth_generate(&GeneratorSpec::by_name("xor-style", 20).unwrap().with_prefix("new_"), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let curve = run_batch_afa(&unseen, &model, &AfaConfig::new("new_y", 2.0), &mut rng, 10).unwrap();
    assert_eq!(curve.rows, 10);
    assert_eq!(model.param_digest(), before);
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = fit(Model::new(small(5)).unwrap(), &[bundle("mixed", 40, 8)], &quiet(5, 1e-3)).unwrap().model;
    model.round_params_f32();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    for id in model.params.ids() {
        let (a, b) = (model.params.get(id).data(), back.params.get(id).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", model.params.name(id));
    }
    back.save(&dir.path().join("again.ckpt")).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("again.ckpt")).unwrap());
    assert!(Model::load_expecting(&path, &small(6)).is_err());
}
