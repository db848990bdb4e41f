use feedkit_core::nn::{build_paraphraser, build_resnet};
use feedkit_core::Tensor32;
use feedkit_train::recon::fit_paraphraser;
use feedkit_train::{
    compare_recon, train_paraphraser, BlobParams, DataConfig, ReconOptions, TrainError,
};

fn opts(epochs: usize) -> ReconOptions {
    ReconOptions {
        epochs,
        batch_size: 8,
        lr: 0.05,
        seed: 3,
        ..ReconOptions::default()
    }
}

fn small_data() -> feedkit_train::Data {
    DataConfig {
        blobs: BlobParams {
            num_classes: 3,
            samples_per_class: 8,
            image_size: 8,
            noise_sigma: 0.3,
            seed: 2,
        },
        test_samples_per_class: 2,
        ..DataConfig::default()
    }
    .load()
    .unwrap()
}

#[test]
fn zero_features_stay_near_zero_loss() {
    // With all-zero inputs the decoder output is its biases; training drives
    // them to zero and the loss stays small and never grows.
    let mut p = build_paraphraser::<f32>(4, 0.5, 1).unwrap();
    let feats = Tensor32::zeros(&[16, 4, 2, 2]);
    let curve = fit_paraphraser(&mut p, &feats, &opts(15)).unwrap();
    let first = curve[0].mse_per_element;
    let last = curve.last().unwrap().mse_per_element;
    assert!(last <= first, "{first} -> {last}");
    assert!(last < 1e-2, "{last}");
}

#[test]
fn reconstruction_curve_decreases_on_real_features() {
    let data = small_data();
    let net = build_resnet::<f32>(8, 3, 0).unwrap();
    let mut p = build_paraphraser::<f32>(64, 0.5, 1).unwrap();
    let rep = train_paraphraser(&mut p, &net, &data.train, &opts(8), "r8").unwrap();
    assert_eq!(rep.curve.len(), 8);
    assert!(rep.curve.iter().all(|e| e.mse_per_element.is_finite()));
    assert!(rep.final_value().unwrap() < rep.curve[0].mse_per_element);
    let csv = rep.to_csv();
    assert!(csv.starts_with("# checkpoint=r8"));
    assert!(csv.contains("epoch,mse_per_element,sum_sq_error\n"));
    // per-element error times the map size is the per-sample sum
    let e = rep.curve[0];
    assert!(
        (e.mse_per_element * 64.0 * 4.0 - e.sum_sq_error).abs() < 1e-6 * e.sum_sq_error.max(1.0)
    );
}

#[test]
fn compare_handles_empty_self_and_mismatched_inputs() {
    assert!(compare_recon(&[]).unwrap().rows.is_empty());

    let data = small_data();
    let net = build_resnet::<f32>(8, 3, 0).unwrap();
    let run = |seed: u64, id: &str| {
        let mut p = build_paraphraser::<f32>(64, 0.5, seed).unwrap();
        train_paraphraser(&mut p, &net, &data.train, &opts(2), id).unwrap()
    };
    let a = run(1, "a");
    let b = run(1, "b");
    let s = compare_recon(&[a.clone(), b]).unwrap();
    assert_eq!(s.rows.len(), 2);
    assert_eq!(s.rows[0].1, s.rows[1].1);
    assert!(s
        .to_csv()
        .starts_with("checkpoint,final_mse_per_element,final_sum_sq_error\n"));

    let other = run(2, "c");
    assert!(matches!(
        compare_recon(&[a, other]),
        Err(TrainError::Comparability(_))
    ));
}

#[test]
fn channel_mismatch_is_a_config_error() {
    let data = small_data();
    let net = build_resnet::<f32>(8, 3, 0).unwrap();
    let mut p = build_paraphraser::<f32>(32, 0.5, 1).unwrap();
    let err = train_paraphraser(&mut p, &net, &data.train, &opts(1), "x").unwrap_err();
    assert!(err.is_config(), "{err}");
}
