use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lesionscope::attribution::{
    explain, read_explanation, write_explanation, AttributionError, Method, MethodParams,
};
use lesionscope::autodiff::Target;
use lesionscope::evalkit::{
    localization_score, normalize_map, render_heatmap, Colormap, Localization, NormMode,
};
use lesionscope::netgraph::{fold_batchnorm, load_model_files, save_model_files};
use lesionscope::trainer::{
    generate_synthetic, initialize, read_manifest, reference_net, write_dataset,
    SyntheticDatasetSpec,
};

fn small_params() -> MethodParams {
    let mut p = MethodParams::default();
    p.integrated_gradients.steps = 16;
    p.smoothgrad.n_samples = 4;
    p
}

#[test]
fn every_method_explains_a_folded_reference_net() {
    let data = generate_synthetic(&SyntheticDatasetSpec::three_class(1, 3)).unwrap();
    let model = initialize(
        &reference_net([3, 24, 24], 3).unwrap(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let folded = fold_batchnorm(&model).unwrap();
    let sample = &data.samples[0];
    let (class, logits) = model.predict(&sample.image).unwrap();
    let (folded_class, folded_logits) = folded.predict(&sample.image).unwrap();
    assert_eq!(class, folded_class);
    for (a, b) in logits.data().iter().zip(folded_logits.data()) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }

    let target = Target::predicted(&folded, &sample.image).unwrap();
    for method in Method::ALL {
        let map = explain(&folded, &sample.image, &target, method, &small_params()).unwrap();
        assert_eq!(map.raw.shape(), &[3, 24, 24], "{method}");
        assert_eq!(map.reduced.shape(), &[24, 24], "{method}");
        let norm = normalize_map(&map, NormMode::AbsMinmax).unwrap();
        assert!(norm.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let heat = render_heatmap(&norm, Colormap::RedBlue, None, Some(&sample.mask)).unwrap();
        assert_eq!(heat.dimensions(), (24, 24));
        if norm.sum() > 0.0 {
            let mass = localization_score(&norm, &sample.mask, Localization::MassInMask).unwrap();
            assert!((0.0..=1.0).contains(&mass));
        }
    }
}

#[test]
fn relevance_needs_folding_on_batchnorm_models() {
    let model = initialize(
        &reference_net([3, 24, 24], 3).unwrap(),
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let x = generate_synthetic(&SyntheticDatasetSpec::three_class(1, 4))
        .unwrap()
        .samples[1]
        .image
        .clone();
    let target = Target::predicted(&model, &x).unwrap();
    let err = explain(&model, &x, &target, Method::LrpZ, &small_params()).unwrap_err();
    assert!(matches!(err, AttributionError::Unsupported { .. }), "{err}");
    assert!(err.to_string().contains("fold_batchnorm"), "{err}");
    assert!(explain(&model, &x, &target, Method::Saliency, &small_params()).is_ok());
}

#[test]
fn artifacts_survive_the_file_system() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SyntheticDatasetSpec::three_class(2, 5)).unwrap();
    let manifest = write_dataset(dir.path().join("data"), &data).unwrap();
    let (rows, names) = read_manifest(&manifest).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(names, ["spots", "yellowing", "healthy"]);

    let model = initialize(
        &reference_net([3, 24, 24], 3).unwrap(),
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    let (doc, weights) = (dir.path().join("m.json"), dir.path().join("m.weights"));
    save_model_files(&model, &doc, &weights).unwrap();
    let loaded = load_model_files(&doc, &weights).unwrap();
    assert_eq!(loaded, model);

    let folded = fold_batchnorm(&loaded).unwrap();
    let x = &data.samples[0].image;
    let target = Target::predicted(&folded, x).unwrap();
    let map = explain(&folded, x, &target, Method::GuidedBackprop, &small_params()).unwrap();
    let path = dir.path().join("gbp.expl");
    write_explanation(&path, &map).unwrap();
    let back = read_explanation(&path).unwrap();
    assert_eq!(back.raw, map.raw);
    assert_eq!(back.method, Method::GuidedBackprop);
    assert_eq!(back.target, target);
}
