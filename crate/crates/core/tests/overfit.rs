use featsplat::autoenc::{self, load_checkpoint, save_checkpoint, LossWeights};

#[test]
fn fixture_overfits_within_step_budget() {
    let (cfg, data) = autoenc::overfit_fixture(0);
    assert_eq!((data.nrows(), data.ncols(), cfg.lr), (256, 64, 1e-4));
    assert!(cfg.epochs * (data.nrows() / cfg.batch_size) <= 2000);
    let (model, history) = autoenc::train(&cfg, &data).unwrap();
    let loss = model.loss(&data).unwrap();
    assert!(loss < 1e-3, "final loss {loss}");
    assert!(history[history.len() - 1] < history[0]);
    assert!(loss < 0.01 * autoenc::mean_predictor_loss(&data, LossWeights::default()));

    // a reloaded checkpoint reproduces the codes up to f32 storage
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fsae");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let (a, b) = (model.encode(&data).unwrap(), back.encode(&data).unwrap());
    assert!((a - b).amax() < 1e-4);
}
