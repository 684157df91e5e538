//! Short two-stage runs: frozen groups stay bit-identical, trainable ones
//! move, and a fixed seed reproduces every byte.

use candle_core::Tensor;

use multiid::model::ModelConfig;
use multiid::synthdata::{load_corpus, write_corpus, CorpusConfig};
use multiid::training::checkpoint::NamedArray;
use multiid::training::{
    model_from_bundle, prepare_corpus, stage1_model_config, train_stage1, train_stage2, CheckpointBundle, FreezePolicy,
    PreparedClip, TrainConfig,
};

fn tiny(stage: u8) -> TrainConfig {
    TrainConfig {
        steps: 3,
        batch_size: 2,
        ..TrainConfig::desk(stage)
    }
}

fn corpus(seed: u64) -> Vec<PreparedClip> {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(
        dir.path(),
        &CorpusConfig {
            num_clips: 3,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let clips = load_corpus(dir.path()).unwrap();
    let cfg = stage1_model_config(&tiny(1), ModelConfig::default());
    prepare_corpus(&clips, &cfg, &tiny(1)).unwrap()
}

fn run(seed: u64) -> (CheckpointBundle, CheckpointBundle) {
    let data = corpus(seed);
    let s1 = train_stage1(&tiny(1), ModelConfig::default(), &data).unwrap().bundle;
    let s2 = train_stage2(&tiny(2), &data, &s1).unwrap().bundle;
    (s1, s2)
}

fn same_bits(a: &NamedArray, b: &NamedArray) -> bool {
    a.shape == b.shape && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn stage2_moves_only_router_and_its_adapter() {
    let (s1, s2) = run(3);
    let policy = FreezePolicy::for_stage(2);
    let before: std::collections::BTreeMap<_, _> = s1.params().collect();
    let mut moved = 0;
    for (name, after) in s2.params() {
        match before.get(name) {
            Some(prev) if !policy.is_trainable(name) => assert!(same_bits(prev, after), "{name} changed"),
            Some(prev) => moved += usize::from(!same_bits(prev, after)),
            None => assert!(policy.is_trainable(name), "{name} appeared but is frozen"),
        }
    }
    assert!(moved > 0, "no trainable parameter moved");

    let (_, store) = model_from_bundle(&s2, 2, 0).unwrap();
    policy.audit(&store, &s1).unwrap();
    let frozen = store.names().find(|n| !policy.is_trainable(n)).unwrap().clone();
    let var = store.get(&frozen).unwrap();
    var.set(&(var.as_tensor() + 1e-3f64).unwrap()).unwrap();
    assert!(policy.audit(&store, &s1).is_err());
}

#[test]
fn fixed_seed_reproduces_checkpoints() {
    let (a1, a2) = run(4);
    let (b1, b2) = run(4);
    assert_eq!(a1.to_bytes().unwrap(), b1.to_bytes().unwrap());
    assert_eq!(a2.to_bytes().unwrap(), b2.to_bytes().unwrap());
    let (c1, _) = run(5);
    assert_ne!(a1.to_bytes().unwrap(), c1.to_bytes().unwrap());
}

#[test]
fn stage1_checkpoint_round_trips_through_model() {
    let (s1, _) = run(6);
    let (_, store) = model_from_bundle(&s1, 1, 0).unwrap();
    for (name, arr) in s1.params() {
        let t: &Tensor = store.get(name).unwrap().as_tensor();
        assert!(same_bits(&NamedArray::from_tensor(t).unwrap(), arr), "{name}");
    }
}
