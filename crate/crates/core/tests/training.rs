use wxdet::dataset::build_pairs;
use wxdet::train::{train, ExperimentConfig, TrainOptions, TrainSample};

#[test]
fn two_hundred_steps_cut_the_loss_by_a_fifth() {
    let config = ExperimentConfig::default();
    let d = &config.data;
    let pairs = build_pairs(&d.scene, d.train_first_seed, 64, d.density).unwrap();
    let samples: Vec<TrainSample> = pairs.iter().map(TrainSample::from).collect();
    let opts = TrainOptions {
        max_steps: Some(200),
        ..TrainOptions::default()
    };
    let (_, report) = train(&config, &samples, None, &opts).unwrap();
    assert_eq!(report.steps.len(), 200);
    let first = report.steps[0].total;
    // Mean of the last ten steps smooths out batch-to-batch noise.
    let last = report.steps[190..].iter().map(|s| s.total).sum::<f64>() / 10.0;
    assert!(last <= 0.8 * first, "step 0 loss {first:.4}, last ten steps {last:.4}");
}
