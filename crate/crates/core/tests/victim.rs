use attackprint::data::*;
use attackprint::victim::*;
use attackprint::Error;

#[test]
fn untrained_victim_is_near_chance() {
    let train = synth_dataset(20, 1, Split::Train).unwrap();
    let test = synth_dataset(30, 1, Split::Test).unwrap();
    let cfg = VictimConfig { epochs: 0, ..VictimConfig::default() };
    let (ck, log) = train_victim(&train, None, &cfg).unwrap();
    assert!(log.is_empty());
    let acc = evaluate_victim(&ck.network::<f32>().unwrap(), &test).unwrap().accuracy;
    assert!(acc < 0.3, "{acc}");
}

#[test]
fn short_training_learns_the_glyphs() {
    let train = synth_dataset(300, 1, Split::Train).unwrap();
    let test = synth_dataset(30, 1, Split::Test).unwrap();
    let cfg = VictimConfig { epochs: 3, ..VictimConfig::default() };
    let (ck, log) = train_victim(&train, Some(&test), &cfg).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log[2].loss < log[0].loss);
    let eval = evaluate_victim(&ck.network::<f32>().unwrap(), &test).unwrap();
    assert!(eval.accuracy > 0.8, "{}", eval.accuracy);
    assert_eq!(log[2].val_accuracy, Some(eval.accuracy));
    assert!(log_to_csv(&log).starts_with("epoch,step,loss,val_accuracy\n1,"));
}

#[test]
fn idx_round_trip_quantises_to_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth_dataset(3, 4, Split::Test).unwrap();
    let (ip, lp) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    save_idx_dataset(&d, &ip, &lp).unwrap();
    let back = load_idx_dataset(&ip, &lp, Split::Test).unwrap();
    assert_eq!(back.labels, d.labels);
    assert_eq!(back.ids, d.ids);
    for (a, b) in d.images.data().iter().zip(back.images.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
    std::fs::write(&lp, b"\0\0\x08\x01\0\0\0\x05\0").unwrap();
    assert!(matches!(load_idx_dataset(&ip, &lp, Split::Test), Err(Error::Format { .. })));
}

#[test]
fn empty_training_set_is_rejected() {
    let d = synth_dataset(1, 1, Split::Train).unwrap().first(0);
    assert!(train_victim(&d, None, &VictimConfig::default()).is_err());
}
