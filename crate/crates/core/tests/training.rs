use abc_core::dataset::{build_windows_tagged, Representation};
use abc_core::expert::{gen_demo, ExpertConfig};
use abc_core::policy::{report_mse, train, PolicyConfig};

#[test]
fn two_demo_delta_training_beats_zero_prediction() {
    let cfg = ExpertConfig::default();
    let train_eps: Vec<_> = (0..2).map(|i| gen_demo(1, i, &cfg).unwrap()).collect();
    let val_ep = gen_demo(1, 2, &cfg).unwrap();
    let mut samples = Vec::new();
    for (i, ep) in train_eps.iter().enumerate() {
        samples.extend(build_windows_tagged(ep, i, 20).unwrap());
    }
    let val = build_windows_tagged(&val_ep, 2, 20).unwrap();

    let zero: f64 = samples
        .iter()
        .map(|s| s.target(Representation::Delta).iter().map(|d| d * d).sum::<f64>() / 6.0)
        .sum::<f64>()
        / samples.len() as f64;

    let policy_cfg = PolicyConfig::default();
    let trained = train(&policy_cfg, &samples, &val).unwrap();
    let fit = report_mse(&trained.policy, &samples).unwrap().mse;
    assert!(fit * 2.0 <= zero, "train MSE {fit:.3e}, zero-prediction MSE {zero:.3e}");
    assert_eq!(trained.log.len(), policy_cfg.epochs);
}
