//! Checkpoint container: round trips, integrity checks and rejection of
//! mismatched contents.

use disentangle::checkpoint::{Checkpoint, CheckpointKind, MAGIC};
use disentangle::factorgen::{build_dataset, Dataset, GeneratorConfig};
use disentangle::model::{
    encoder_layers, pretrain_identity_encoder, Mode, ModelBundle, ModelConfig, PretrainConfig, PretrainOutcome,
    Problem, E_ID,
};
use disentangle::nn::Network;
use disentangle::trainer::{TrainConfig, Trainer};
use disentangle::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset() -> Dataset {
    build_dataset(&GeneratorConfig { n_identities: 5, yaws: vec![0.0, 45.0], ..GeneratorConfig::default() }).unwrap()
}

fn identity() -> Network<f32> {
    let mut net = Network::new(E_ID, encoder_layers(&ModelConfig::default(), 1));
    net.init(&mut ChaCha8Rng::seed_from_u64(5));
    net.freeze();
    net
}

fn trained(ds: &Dataset, mode: Mode) -> Trainer {
    let bundle = ModelBundle::new(ModelConfig::default(), Problem::of(ds), mode, Some(identity()), 3).unwrap();
    let mut t = Trainer::new(TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() }, bundle).unwrap();
    t.run(ds, &mut |_| Ok(()), &mut |_, _| Ok(())).unwrap();
    t
}

#[test]
fn trainer_round_trips_bit_exactly() {
    let ds = dataset();
    for mode in Mode::ALL {
        let t = trained(&ds, mode);
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.header.kind, CheckpointKind::Model);
        assert_eq!(ck.header.mode, Some(mode));
        let back = ck.trainer(None).unwrap();
        assert_eq!(back.bundle, t.bundle);
        assert_eq!(back.optimizers, t.optimizers);
        assert_eq!(back.config, t.config);
        assert_eq!((back.epoch, back.step), (t.epoch, t.step));
        assert_eq!(Checkpoint::from_trainer(&back).to_bytes(), bytes);
    }
}

#[test]
fn bundle_only_checkpoint_has_no_training_state() {
    let ds = dataset();
    let t = trained(&ds, Mode::Ipd);
    let ck = Checkpoint::from_bytes(&Checkpoint::from_bundle(&t.bundle).to_bytes()).unwrap();
    assert_eq!(ck.bundle().unwrap(), t.bundle);
    assert!(matches!(ck.trainer(None), Err(Error::Format(_))));
    assert!(!ck.bundle().unwrap().e_id.unwrap().is_trainable());
}

#[test]
fn identity_checkpoint_restores_frozen_encoder() {
    let ds = dataset();
    let (train, _) = ds.split(0).unwrap();
    let cfg = PretrainConfig { epochs: 1, ..PretrainConfig::default() };
    let outcome: PretrainOutcome = pretrain_identity_encoder(&ds, &train, &ModelConfig::default(), &cfg).unwrap();
    let ck = Checkpoint::identity(&outcome, &ModelConfig::default(), Problem::of(&ds));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("identity.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.header.kind, CheckpointKind::Identity);
    assert_eq!(loaded.header.e_id_digest.as_deref(), Some(outcome.digest.as_str()));
    let net = loaded.identity_encoder().unwrap();
    assert_eq!(net.digest(), outcome.digest);
    assert!(!net.is_trainable());
    assert!(matches!(loaded.bundle(), Err(Error::Format(_))));
}

#[test]
fn every_flipped_byte_is_detected() {
    let ds = dataset();
    let bytes = Checkpoint::from_bundle(&trained(&ds, Mode::Baseline).bundle).to_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..64 {
        let i = rand::Rng::gen_range(&mut rng, 0..bytes.len());
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(Checkpoint::from_bytes(&bad).is_err(), "flip at byte {i} went unnoticed");
    }
}

#[test]
fn truncated_or_foreign_files_are_rejected() {
    let ds = dataset();
    let bytes = Checkpoint::from_bundle(&trained(&ds, Mode::Baseline).bundle).to_bytes();
    for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut foreign = bytes.clone();
    foreign[..8].copy_from_slice(b"NOTACKPT");
    assert!(matches!(Checkpoint::from_bytes(&foreign), Err(Error::Format(_))));
    let mut longer = bytes;
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn tampered_identity_digest_is_rejected() {
    let ds = dataset();
    let mut ck = Checkpoint::from_bundle(&trained(&ds, Mode::Ipd).bundle);
    ck.header.e_id_digest = Some("00".repeat(32));
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert!(matches!(back.bundle(), Err(Error::Format(_))));
}
