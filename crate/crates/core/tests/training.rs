use islab_core::models::Checkpoint;
use islab_core::synthgen::{generate_dataset, SynthConfig};
use islab_core::trainer::{Trainer, TrainConfig};

fn param_bits(t: &Trainer<f64>) -> Vec<u64> {
    t.net.store.ids().flat_map(|id| t.net.store.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&SynthConfig::new(6, 64, 5), dir.path()).unwrap();
    let cfg = TrainConfig { epochs_constant: 1, epochs_decay: 1, steps_per_epoch: 3, ..TrainConfig::test() };

    let mut straight = Trainer::<f64>::new(&cfg, &manifest, None, "run").unwrap();
    let mut interrupted = Trainer::<f64>::new(&cfg, &manifest, None, "run").unwrap();
    for _ in 0..2 {
        straight.step_once().unwrap();
        interrupted.step_once().unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    interrupted.checkpoint().save(&path).unwrap();
    drop(interrupted);
    let mut resumed = Trainer::<f64>::resume(&Checkpoint::load(&path).unwrap(), &manifest).unwrap();
    assert_eq!(resumed.step, 2);
    while !straight.done() {
        let a = straight.step_once().unwrap();
        let b = resumed.step_once().unwrap();
        assert_eq!(a.sample_ids, b.sample_ids);
        assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
    }
    assert!(resumed.done());
    assert_eq!(param_bits(&straight), param_bits(&resumed));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&SynthConfig::new(3, 64, 6), dir.path()).unwrap();
    let mut t = Trainer::<f32>::new(&TrainConfig::test(), &manifest, None, "ck").unwrap();
    t.step_once().unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.meta.step, 1);
    // values are stored as f64, so a checkpoint loads at either precision
    let wide = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    for ((_, a), (_, b)) in ck.params.iter().zip(&wide.params) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x as f64 == *y));
    }
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

