mod common;

use common::synthetic_tensor;
use uvcgan::checkpoint::*;
use uvcgan::discriminator::DiscriminatorConfig;
use uvcgan::generator::{init_generator, GeneratorConfig};
use uvcgan::losses::LossWeights;
use uvcgan::pretrain::{pretrain_step, MaskSpec, PretrainState, PRETRAIN_ADAM};
use uvcgan::rng::{stream, Stream};
use uvcgan::trainer::{init_train, train_iteration, TrainConfig, TrainState};
use uvcgan::Error;

fn trained_state(iters: usize) -> (TrainState, TrainConfig) {
    let cfg = TrainConfig { total_iters: 100, pool_size: 3, ..Default::default() };
    let mut st = init_train(&cfg, &GeneratorConfig::small(), &DiscriminatorConfig::small(), None, 7).unwrap();
    for i in 0..iters {
        let (a, b) = (synthetic_tensor(i, 0, 32), synthetic_tensor(i, 1, 32));
        train_iteration(&mut st, &cfg, &LossWeights::default(), &a, &b).unwrap();
    }
    (st, cfg)
}

fn assert_same(x: &TrainState, y: &TrainState) {
    assert!(x.gen_ab.params.bit_eq(&y.gen_ab.params));
    assert!(x.gen_ba.params.bit_eq(&y.gen_ba.params));
    assert!(x.disc_a.params.bit_eq(&y.disc_a.params));
    assert!(x.disc_b.params.bit_eq(&y.disc_b.params));
    for (o, p) in [(&x.opt_gen, &y.opt_gen), (&x.opt_disc, &y.opt_disc)] {
        assert_eq!(o.steps(), p.steps());
        assert_eq!(o.config(), p.config());
        assert_eq!(o.moments(), p.moments());
    }
    assert_eq!(x.iteration, y.iteration);
    assert_eq!(x.pool_a, y.pool_a);
    assert_eq!(x.pool_b, y.pool_b);
    assert_eq!(x.rng_data.state(), y.rng_data.state());
    assert_eq!(x.rng_aug.state(), y.rng_aug.state());
    assert_eq!(x.rng_pool.state(), y.rng_pool.state());
    assert_eq!(x.sampler, y.sampler);
}

#[test]
fn train_round_trip_preserves_everything() {
    let (st, _) = trained_state(3);
    assert_eq!(st.pool_a.images.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_train_checkpoint(&st, &path).unwrap();
    let back = load_train_checkpoint(&path, &st.gen_ab.config, &st.disc_a.config).unwrap();
    assert_same(&st, &back);
    // overwriting in place keeps a readable checkpoint
    save_train_checkpoint(&back, &path).unwrap();
    let again = load_train_checkpoint(&path, &st.gen_ab.config, &st.disc_a.config).unwrap();
    assert_same(&st, &again);
    assert_eq!(checkpoint_hash(&path).unwrap(), checkpoint_hash(&path).unwrap());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn corrupted_or_mismatched_checkpoints_are_rejected() {
    let (st, _) = trained_state(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_train_checkpoint(&st, &path).unwrap();
    let other = GeneratorConfig { base_features: 12, ..GeneratorConfig::small() };
    assert!(matches!(load_train_checkpoint(&path, &other, &st.disc_a.config), Err(Error::Load(_))));
    assert!(matches!(load_pretrain_checkpoint(&path), Err(Error::Load(_))));

    let blob = path.join("disc_b.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    let err = load_train_checkpoint(&path, &st.gen_ab.config, &st.disc_a.config).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");

    std::fs::write(path.join("manifest.json"), "{").unwrap();
    assert!(matches!(load_generator(&path, GeneratorSlot::AtoB), Err(Error::Load(_))));
    assert!(matches!(load_generator(&dir.path().join("missing"), GeneratorSlot::AtoB), Err(Error::Load(_))));
}

#[test]
fn pretrain_round_trip_and_generator_slots() {
    let cfg = GeneratorConfig::small();
    let gen = init_generator(&cfg, &mut stream(3, Stream::InitGenAb)).unwrap();
    let mut st = PretrainState::new(gen, PRETRAIN_ADAM);
    let x = synthetic_tensor(0, 0, 32);
    pretrain_step(&mut st, &x, &MaskSpec { patch_size: 8, mask_prob: 0.4, seed: 1 }, 1e-3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre");
    save_pretrain_checkpoint(&st, &path).unwrap();
    let back = load_pretrain_checkpoint(&path).unwrap();
    assert!(back.generator.params.bit_eq(&st.generator.params));
    assert_eq!(back.step, 1);
    assert_eq!(back.optimizer.moments(), st.optimizer.moments());
    let g = load_generator(&path, GeneratorSlot::BtoA).unwrap();
    assert!(g.params.bit_eq(&st.generator.params));

    let (tst, _) = trained_state(1);
    let tpath = dir.path().join("train");
    save_train_checkpoint(&tst, &tpath).unwrap();
    assert!(load_generator(&tpath, GeneratorSlot::AtoB).unwrap().params.bit_eq(&tst.gen_ab.params));
    assert!(load_generator(&tpath, GeneratorSlot::BtoA).unwrap().params.bit_eq(&tst.gen_ba.params));
}
