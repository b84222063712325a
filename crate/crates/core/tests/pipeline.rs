use voicelens::base::{LabelValue, MultiLabel};
use voicelens::distributions::{gmm_fit_em, EmConfig};
use voicelens::flow::{train, train_with_labeler, FlowConfig, TrainConfig};
use voicelens::io::Split;
use voicelens::metrics::{attribute_accuracy, pearson_r};
use voicelens::synthcorpus::{Corpus, Generator, GeneratorSpec};
use voicelens::tacospawn::ConditionalGmm;

fn small_easy(n: usize) -> GeneratorSpec {
    let mut spec = GeneratorSpec::easy();
    spec.d = 8;
    spec.n_items = n;
    spec
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 200,
        patience: 5,
        seed,
        flow: FlowConfig { n_layers: 5, hidden_sizes: Some(vec![32, 32]), ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn corpus_directory_round_trip() {
    let spec = small_easy(120);
    let corpus = Generator::new(&spec).unwrap().generate(3).unwrap().drop_labels(0, 0.5, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path(), &spec.schema().unwrap()).unwrap();
    let (back, schema) = Corpus::load(dir.path()).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(schema, spec.schema().unwrap());
    assert!(back.labels.iter().any(|y| y.get(0).is_missing()));
    assert!(back.truth.iter().all(|y| !y.get(0).is_missing()));
}

#[test]
fn easy_preset_flow_matches_oracle_and_generates_on_target() {
    let spec = small_easy(1500);
    let generator = Generator::new(&spec).unwrap();
    let schema = spec.schema().unwrap();
    let corpus = generator.generate(1).unwrap().drop_labels(0, 0.3, 2).unwrap();
    let train_set = corpus.labeled(Split::Train).unwrap();
    let val_set = corpus.labeled(Split::Val).unwrap();
    let supporting = gmm_fit_em(&train_set.embeddings, 10, &EmConfig::default()).unwrap();
    let outcome = train(&train_set, &val_set, &supporting, &schema, &quick_config(0)).unwrap();
    assert!(outcome.best_epoch >= 1);
    assert_eq!(outcome.history[0].epoch, 1);
    let model = outcome.model;

    let test = generator.generate(50).unwrap();
    let predicted: Vec<usize> = test.embeddings.iter_rows().map(|e| model.predict_class(e, 0).unwrap()).collect();
    let truth: Vec<usize> = test
        .truth
        .iter()
        .map(|y| match y.get(0) {
            LabelValue::Class(c) => c,
            _ => unreachable!(),
        })
        .collect();
    let acc = attribute_accuracy(&predicted, &truth).unwrap();
    let oracle = generator.oracle_accuracy(&test.embeddings, &test.truth, 0).unwrap();
    assert!(acc >= 0.95 * oracle, "flow {acc} oracle {oracle}");

    let mut y = MultiLabel::missing(schema.len());
    y.set(0, LabelValue::Class(1));
    let samples = model.sample(&y, 300, 9).unwrap();
    let hits = samples.iter_rows().filter(|e| generator.oracle_classify(e, 0).unwrap() == LabelValue::Class(1)).count();
    assert!(hits >= 270, "{hits}/300");

    let conditions: Vec<f64> = (0..200).map(|i| 25.0 + 30.0 * i as f64 / 199.0).collect();
    let measured: Vec<f64> = conditions
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut y = MultiLabel::missing(schema.len());
            y.set(2, LabelValue::Value(v));
            generator.oracle_value(model.sample(&y, 1, i as u64).unwrap().row(0), 2).unwrap()
        })
        .collect();
    assert!(pearson_r(&conditions, &measured).unwrap() > 0.8);
}

#[test]
fn training_is_deterministic_per_seed() {
    let spec = small_easy(300);
    let generator = Generator::new(&spec).unwrap();
    let schema = spec.schema().unwrap();
    let corpus = generator.generate(5).unwrap().drop_labels(1, 0.5, 6).unwrap();
    let train_set = corpus.labeled(Split::Train).unwrap();
    let val_set = corpus.labeled(Split::Val).unwrap();
    let supporting = gmm_fit_em(&train_set.embeddings, 4, &EmConfig::default()).unwrap();
    let mut config = quick_config(7);
    config.max_epochs = 3;
    let labeler: &dyn voicelens::flow::PostHocLabeler = &generator;
    let a = train_with_labeler(&train_set, &val_set, &supporting, &schema, &config, Some(labeler)).unwrap();
    let b = train_with_labeler(&train_set, &val_set, &supporting, &schema, &config, Some(labeler)).unwrap();
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
    assert_eq!(a.history, b.history);
    config.seed = 8;
    let c = train(&train_set, &val_set, &supporting, &schema, &config).unwrap();
    assert_ne!(a.model.to_json().unwrap(), c.model.to_json().unwrap());
}

#[test]
fn baseline_generates_each_condition() {
    let spec = small_easy(600);
    let generator = Generator::new(&spec).unwrap();
    let schema = spec.schema().unwrap();
    let corpus = generator.generate(2).unwrap();
    let (model, warnings) =
        ConditionalGmm::fit(&corpus.embeddings, &corpus.truth, &schema, &["gender", "age"], 3, &EmConfig::default()).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(model.tuples().count(), 4);
    for tuple in model.tuples().map(<[usize]>::to_vec).collect::<Vec<_>>() {
        let s = model.sample_conditional(&tuple, 100, 1).unwrap();
        for (k, &c) in tuple.iter().enumerate() {
            let agree = s.iter_rows().filter(|e| generator.oracle_classify(e, k).unwrap() == LabelValue::Class(c)).count();
            assert!(agree >= 95, "tuple {tuple:?} attr {k}: {agree}");
        }
    }
}
