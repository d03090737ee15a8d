use neuralign::data::{
    average_repetitions, generate_synthetic, load_dataset, preprocess_pair, write_dataset, PreprocessConfig,
    Split, SyntheticSpec,
};
use neuralign::embed::{oracle_providers, write_oracle_tables, CatalogEmbeddings, Providers};
use neuralign::zeroshot::TemplateBank;
use neuralign::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_categories: 3,
        n_test_categories: 2,
        images_per_category: 2,
        repetitions: 3,
        test_repetitions: 2,
        subjects: 2,
        channels: 5,
        samples: 30,
        noise_sigma: 0.2,
        seed: 4,
        ..SyntheticSpec::default()
    }
}

#[test]
fn synthetic_dump_round_trips() {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds.train, &ds.test, dir.path()).unwrap();
    let (train, test) = load_dataset(dir.path()).unwrap();
    assert_eq!(train, ds.train);
    assert_eq!(test, ds.test);

    write_oracle_tables(&ds, &dir.path().join("embeddings")).unwrap();
    let from_disk = Providers::from_dir(&dir.path().join("embeddings")).unwrap();
    assert_eq!(from_disk.fingerprint(), oracle_providers(&ds).fingerprint());
}

#[test]
fn shared_categories_are_rejected_on_load() {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut clash = ds.train.clone();
    clash.split = Split::Test;
    write_dataset(&ds.train, &clash, dir.path()).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::ZeroShotViolation { categories }) => assert_eq!(categories.len(), 3),
        other => panic!("expected a zero-shot violation, got {other:?}"),
    }
}

#[test]
fn preprocessing_feeds_the_template_bank() {
    let spec = small_spec();
    let ds = generate_synthetic(&spec).unwrap();
    let cfg = PreprocessConfig {
        window_end_ms: 120.0,
        ..PreprocessConfig::default()
    };
    let (train, test, whitener) = preprocess_pair(&ds.train, &ds.test, &cfg).unwrap();
    assert!(whitener.is_some());
    // One averaged trial per subject and image.
    assert_eq!(train.len(), 2 * 3 * 2);
    // Test categories hold one image each.
    assert_eq!(test.len(), 2 * 2);
    assert!(train.trials.iter().chain(&test.trials).all(|t| t.repetition == 0 && t.is_finite()));
    assert_eq!(train, average_repetitions(&train).unwrap());

    let providers = oracle_providers(&ds);
    let emb = CatalogEmbeddings::build(&train.catalog, &providers).unwrap();
    assert_eq!(emb.dim(), spec.embed_dim);
    let bank = TemplateBank::build(&test.catalog, &providers).unwrap();
    assert_eq!((bank.n_images(), bank.n_categories()), (2, 2));
}
