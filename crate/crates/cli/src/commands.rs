use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use voicelens::base::{AttributeKind, LabelSchema, LabelValue, MultiLabel};
use voicelens::distributions::{gmm_fit_em, EmConfig};
use voicelens::flow::{train_with_labeler, EditRequest, FlowConfig, PostHocLabeler, PriorMode, TrainConfig};
use voicelens::io::{encode_embeddings, labels_to_csv, Dtype, Split};
use voicelens::metrics::{clique_number, metrics_csv, metrics_json, nn_distance, pearson_r, DistanceReport};
use voicelens::synthcorpus::{Corpus, Generator, GeneratorSpec};
use voicelens::tacospawn::ConditionalGmm;
use voicelens::Matrix;

use crate::data::{
    check_rows, create_out_dir, load_any_model, load_flow, load_gmm, parse_condition_label,
    read_labels_lenient, read_text, write_file, AnyModel, EmbeddingInput,
};
use crate::manifest;
use crate::{ClassifyArgs, EditArgs, EvalArgs, FitGmmArgs, GmmKind, Priors, SampleArgs, SynthArgs, TrainArgs};

fn load_generator(path: &std::path::Path) -> Result<Generator> {
    let spec = GeneratorSpec::from_json(&read_text(path)?)
        .with_context(|| format!("{} is not a generator spec", path.display()))?;
    Ok(Generator::new(&spec)?)
}

fn write_embeddings_file(path: &std::path::Path, m: &Matrix) -> Result<()> {
    write_file(path, encode_embeddings(m, Dtype::F64)?)
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => GeneratorSpec::from_json(&read_text(p)?).with_context(|| format!("{} is not a generator spec", p.display()))?,
        None => GeneratorSpec::preset(&a.preset)?,
    };
    if let Some(n) = a.n_items {
        spec.n_items = n;
    }
    if let Some(d) = a.dim {
        spec.d = d;
    }
    spec.validate()?;
    for (flag, keep) in [("--keep", a.keep), ("--keep-continuous", a.keep_continuous)] {
        if !(0.0..=1.0).contains(&keep) {
            bail!("{flag} must be in [0, 1], got {keep}");
        }
    }
    let schema = spec.schema()?;
    let mut corpus = Generator::new(&spec)?.generate(seed)?;
    for (i, attr) in schema.attributes().iter().enumerate() {
        let keep = if attr.is_categorical() { a.keep } else { a.keep_continuous };
        if keep < 1.0 {
            corpus = corpus.drop_labels(i, keep, seed.wrapping_add(1 + i as u64))?;
        }
    }
    create_out_dir(&a.out)?;
    corpus.save(&a.out, &schema).with_context(|| format!("cannot write corpus to {}", a.out.display()))?;
    write_file(&a.out.join("generator.json"), spec.to_json()?)?;
    let outputs: Vec<PathBuf> =
        ["embeddings.bin", "labels.csv", "truth.csv", "schema.json", "generator.json"].iter().map(|f| a.out.join(f)).collect();
    let inputs: Vec<PathBuf> = a.spec.iter().cloned().collect();
    manifest::write(&a.out, "synth", seed, &json!({ "args": a, "spec": spec }), &inputs, &outputs)
}

pub fn fit_gmm(a: &FitGmmArgs, seed: u64) -> Result<()> {
    let (corpus, schema) = Corpus::load(&a.corpus).with_context(|| format!("cannot load corpus {}", a.corpus.display()))?;
    let train = corpus.part(Split::Train);
    let em = EmConfig { max_iters: a.max_iters, tol: a.tol, seed, ..Default::default() };
    create_out_dir(&a.out)?;
    let (file, text, conditions) = match a.kind {
        GmmKind::Supporting => {
            let gmm = gmm_fit_em(&train.embeddings, a.components, &em)?;
            ("gmm.json", gmm.to_json()?, Vec::new())
        }
        GmmKind::Conditional => {
            let names: Vec<String> = if a.conditions.is_empty() {
                schema.attributes().iter().filter(|s| s.is_categorical()).map(|s| s.name.clone()).collect()
            } else {
                a.conditions.clone()
            };
            let idx: Vec<usize> = names.iter().map(|n| schema.attribute_index(n)).collect::<voicelens::Result<_>>()?;
            let rows: Vec<usize> =
                (0..train.len()).filter(|&r| idx.iter().all(|&i| !train.labels[r].get(i).is_missing())).collect();
            log::info!("fitting conditional mixture on {} of {} training items", rows.len(), train.len());
            let part = train.subset(&rows);
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let (model, warnings) = ConditionalGmm::fit(&part.embeddings, &part.labels, &schema, &refs, a.components, &em)?;
            for w in &warnings {
                log::warn!("condition {:?}: {} items, using {} components instead of {}", w.tuple, w.used, w.used, w.requested);
            }
            ("conditional_gmm.json", model.to_json()?, names)
        }
    };
    let out = a.out.join(file);
    write_file(&out, text)?;
    manifest::write(&a.out, "fit-gmm", seed, &json!({ "args": a, "conditions": conditions }), &[a.corpus.clone()], &[out])
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let (corpus, schema) = Corpus::load(&a.corpus).with_context(|| format!("cannot load corpus {}", a.corpus.display()))?;
    let gmm = load_gmm(&a.gmm)?;
    let generator = a.generator.as_deref().map(load_generator).transpose()?;
    if let Some(g) = &generator {
        let names: Vec<&str> = g.spec().attributes.iter().map(|e| e.name.as_str()).collect();
        let expected: Vec<&str> = schema.attributes().iter().map(|s| s.name.as_str()).collect();
        if names != expected {
            bail!("generator attributes {names:?} do not match corpus attributes {expected:?}");
        }
    }
    let config = TrainConfig {
        batch_size: a.batch_size,
        reg_batch_size: a.reg_batch_size,
        perturbation_scale: a.eps,
        learning_rate: a.lr,
        max_epochs: a.epochs,
        patience: a.patience,
        seed,
        priors: match a.priors {
            Priors::Empirical => PriorMode::Empirical,
            Priors::Uniform => PriorMode::Uniform,
            Priors::Schema => PriorMode::Schema,
        },
        flow: FlowConfig {
            n_layers: a.layers,
            hidden_sizes: if a.hidden.is_empty() { None } else { Some(a.hidden.clone()) },
            init_seed: seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let labeler = generator.as_ref().map(|g| g as &dyn PostHocLabeler);
    let outcome = train_with_labeler(
        &corpus.labeled(Split::Train)?,
        &corpus.labeled(Split::Val)?,
        &gmm,
        &schema,
        &config,
        labeler,
    )?;
    create_out_dir(&a.out)?;
    let model_path = a.out.join("flow.json");
    write_file(&model_path, outcome.model.to_json()?)?;
    let mut history = String::from("epoch,train_loss,val_loglik\n");
    for h in &outcome.history {
        history.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.val_loglik));
    }
    let history_path = a.out.join("history.csv");
    write_file(&history_path, history)?;
    println!("best epoch {} with validation log-likelihood {}", outcome.best_epoch, outcome.best_val_loglik);
    let mut inputs = vec![a.corpus.clone(), a.gmm.clone()];
    inputs.extend(a.generator.iter().cloned());
    let config_json = json!({
        "args": a,
        "train": config,
        "perturbation_scale": outcome.perturbation_scale,
        "best_epoch": outcome.best_epoch,
    });
    manifest::write(&a.out, "train", seed, &config_json, &inputs, &[model_path, history_path])
}

fn continuous_range(schema: &LabelSchema, attr: usize) -> Option<(f64, f64)> {
    match &schema.attributes()[attr].kind {
        AttributeKind::Continuous { low, high } => Some((*low, *high)),
        AttributeKind::Categorical { .. } => None,
    }
}

pub fn sample(a: &SampleArgs, seed: u64) -> Result<()> {
    if a.count == 0 {
        bail!("-n must be at least 1");
    }
    create_out_dir(&a.out)?;
    let emb_path = a.out.join("embeddings.bin");
    let labels_path = a.out.join("labels.csv");
    let mut outputs = vec![emb_path.clone()];
    match load_any_model(&a.model)? {
        AnyModel::Flow(model) => {
            let schema = model.schema();
            let y = schema.parse_label(&a.label).context("in --label")?;
            let (embeddings, labels) = match &a.sweep {
                Some(name) => {
                    let i = schema.attribute_index(name).context("in --sweep")?;
                    let (low, high) =
                        continuous_range(schema, i).ok_or_else(|| anyhow!("--sweep {name}: not a continuous attribute"))?;
                    if !y.get(i).is_missing() {
                        bail!("--sweep {name} conflicts with a value for {name} in --label");
                    }
                    if a.count < 2 {
                        bail!("--sweep needs -n of at least 2");
                    }
                    let mut out = Matrix::zeros(a.count, model.dim());
                    let mut labels = Vec::with_capacity(a.count);
                    for r in 0..a.count {
                        let mut yr = y.clone();
                        yr.set(i, LabelValue::Value(low + (high - low) * r as f64 / (a.count - 1) as f64));
                        out.row_mut(r).copy_from_slice(model.sample(&yr, 1, seed.wrapping_add(r as u64))?.row(0));
                        labels.push(yr);
                    }
                    (out, labels)
                }
                None => (model.sample(&y, a.count, seed)?, vec![y; a.count]),
            };
            write_embeddings_file(&emb_path, &embeddings)?;
            write_file(&labels_path, labels_to_csv(schema, &labels, None)?)?;
            outputs.push(labels_path);
        }
        AnyModel::Conditional(model) => {
            if a.sweep.is_some() {
                bail!("--sweep needs a flow model");
            }
            let tuple = parse_condition_label(&model, &a.label).context("in --label")?;
            let embeddings = model.sample_conditional(&tuple, a.count, seed)?;
            write_embeddings_file(&emb_path, &embeddings)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["id".to_string()];
            header.extend(model.conditions().iter().map(|c| c.name.clone()));
            w.write_record(&header)?;
            for r in 0..a.count {
                let mut row = vec![r.to_string()];
                row.extend(tuple.iter().zip(model.conditions()).map(|(&c, cond)| cond.classes[c].clone()));
                w.write_record(&row)?;
            }
            write_file(&labels_path, w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
            outputs.push(labels_path);
        }
        AnyModel::Supporting(model) => {
            if a.sweep.is_some() {
                bail!("--sweep needs a flow model");
            }
            let conditioned = a
                .label
                .split(',')
                .filter_map(|p| p.split_once('='))
                .any(|(_, v)| !matches!(v.trim(), "" | "_"));
            if conditioned {
                bail!("the supporting mixture is unconditional; --label must leave every attribute as _");
            }
            write_embeddings_file(&emb_path, &model.sample(a.count, seed)?)?;
        }
    }
    manifest::write(&a.out, "sample", seed, a, &[a.model.clone()], &outputs)
}

pub fn classify(a: &ClassifyArgs, seed: u64) -> Result<()> {
    let model = load_flow(&a.model)?;
    let input = EmbeddingInput::load(&a.input)?;
    if input.embeddings.cols() != model.dim() {
        bail!("{}: embeddings have dimension {}, model expects {}", a.input.display(), input.embeddings.cols(), model.dim());
    }
    let schema = model.schema();
    let (z, _) = model.forward_batch(&input.embeddings)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(schema.attributes().iter().map(|s| s.name.clone()));
    for s in schema.attributes() {
        if let Some(classes) = s.classes() {
            header.extend(classes.iter().map(|c| format!("p({}={c})", s.name)));
        }
    }
    w.write_record(&header)?;
    for (r, zr) in z.iter_rows().enumerate() {
        let mut row = vec![r.to_string()];
        let mut posteriors = Vec::new();
        for (i, s) in schema.attributes().iter().enumerate() {
            if s.is_categorical() {
                let p = schema.classify(zr, i)?;
                row.push(schema.format_value(i, LabelValue::Class(schema.predict_class(zr, i)?)));
                posteriors.extend(p.iter().map(|v| v.to_string()));
            } else {
                row.push(schema.read_continuous(zr, i)?.to_string());
            }
        }
        row.extend(posteriors);
        w.write_record(&row)?;
    }
    create_out_dir(&a.out)?;
    let out = a.out.join("predictions.csv");
    write_file(&out, w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    manifest::write(&a.out, "classify", seed, a, &[a.model.clone(), a.input.clone()], &[out])
}

pub fn edit(a: &EditArgs, seed: u64) -> Result<()> {
    let model = load_flow(&a.model)?;
    let input = EmbeddingInput::load(&a.input)?;
    if input.embeddings.cols() != model.dim() {
        bail!("{}: embeddings have dimension {}, model expects {}", a.input.display(), input.embeddings.cols(), model.dim());
    }
    let schema = model.schema();
    let attr = schema.attribute_index(&a.attr).context("in --attr")?;
    let value = a.set.as_deref().map(|s| schema.parse_value(attr, s)).transpose().context("in --set")?;
    let request = EditRequest::from_parts(value, a.delta)?;
    let n = input.embeddings.rows();
    let rows: Vec<usize> = if a.rows.is_empty() { (0..n).collect() } else { a.rows.clone() };
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        bail!("--rows: index {bad} out of range for {n} embeddings");
    }
    let mut out = Matrix::zeros(rows.len(), model.dim());
    for (k, &r) in rows.iter().enumerate() {
        let edited = model.edit(input.embeddings.row(r), attr, request).with_context(|| format!("editing row {r}"))?;
        out.row_mut(k).copy_from_slice(&edited);
    }
    create_out_dir(&a.out)?;
    let path = a.out.join("embeddings.bin");
    write_embeddings_file(&path, &out)?;
    manifest::write(&a.out, "edit", seed, a, &[a.model.clone(), a.input.clone()], &[path])
}

/// The real set of an evaluation, with ground truth when it is a corpus.
struct RealSet {
    embeddings: Matrix,
    truth: Option<Vec<MultiLabel>>,
    schema: Option<LabelSchema>,
}

fn load_real(a: &EvalArgs) -> Result<RealSet> {
    let split = a.split.as_deref().map(Split::parse).transpose().context("in --split")?;
    if a.real.is_dir() && a.real.join("schema.json").exists() {
        let (corpus, schema) = Corpus::load(&a.real).with_context(|| format!("cannot load corpus {}", a.real.display()))?;
        let corpus = match split {
            Some(s) => corpus.part(s),
            None => corpus,
        };
        return Ok(RealSet { embeddings: corpus.embeddings, truth: Some(corpus.truth), schema: Some(schema) });
    }
    if split.is_some() {
        bail!("--split needs --real to be a corpus directory");
    }
    let input = EmbeddingInput::load(&a.real)?;
    Ok(RealSet { embeddings: input.embeddings, truth: None, schema: None })
}

pub fn eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let real = load_real(a)?;
    let generated = a.generated.as_deref().map(EmbeddingInput::load).transpose()?;
    let recon = a.recon.as_deref().map(EmbeddingInput::load).transpose()?;
    let generator = a.generator.as_deref().map(load_generator).transpose()?;
    let model = a.model.as_deref().map(load_flow).transpose()?;
    let schema: Option<LabelSchema> = match (&generator, &model) {
        (Some(g), _) => Some(g.spec().schema()?),
        (None, Some(m)) => Some(m.schema().clone()),
        (None, None) => real.schema.clone(),
    };
    let d = real.embeddings.cols();
    if let Some(g) = &generated {
        if g.embeddings.cols() != d {
            bail!("generated embeddings have dimension {}, real ones {d}", g.embeddings.cols());
        }
    }

    let mut rows: Vec<(String, Option<f64>)> = Vec::new();
    let s2s = match &generated {
        Some(g) => {
            let report = DistanceReport::compute(&real.embeddings, &g.embeddings, recon.as_ref().map(|r| &r.embeddings))?;
            rows.extend(report.rows().into_iter().map(|(k, v)| (k.to_string(), v)));
            report.s2s
        }
        None => {
            let s2s = nn_distance(&real.embeddings, &real.embeddings, true)?;
            rows.push(("s2s".into(), Some(s2s)));
            if let Some(r) = &recon {
                let report = DistanceReport::compute(&real.embeddings, &real.embeddings, Some(&r.embeddings))?;
                rows.push(("s2t_s".into(), report.s2t_s));
            }
            s2s
        }
    };

    let gen_labels = match (&generated, &schema) {
        (Some(g), Some(s)) => g.sibling("labels.csv").map(|p| read_labels_lenient(&p, s)).transpose()?.map(|l| l.0),
        _ => None,
    };
    if let (Some(g), Some(labels)) = (&generated, &gen_labels) {
        check_rows("generated labels", g.embeddings.rows(), labels.len())?;
    }

    if let (Some(oracle), Some(g), Some(labels), Some(schema)) = (&generator, &generated, &gen_labels, &schema) {
        for (i, spec) in schema.attributes().iter().enumerate() {
            let observed: Vec<usize> = (0..labels.len()).filter(|&r| !labels[r].get(i).is_missing()).collect();
            if observed.is_empty() {
                continue;
            }
            if spec.is_categorical() {
                let mut hits = 0;
                for &r in &observed {
                    if oracle.oracle_classify(g.embeddings.row(r), i)? == labels[r].get(i) {
                        hits += 1;
                    }
                }
                rows.push((format!("agreement_{}", spec.name), Some(hits as f64 / observed.len() as f64)));
            } else {
                let xs: Vec<f64> = observed
                    .iter()
                    .map(|&r| match labels[r].get(i) {
                        LabelValue::Value(v) => v,
                        _ => f64::NAN,
                    })
                    .collect();
                let ys: Vec<f64> =
                    observed.iter().map(|&r| oracle.oracle_value(g.embeddings.row(r), i)).collect::<voicelens::Result<_>>()?;
                let r = match pearson_r(&xs, &ys) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        log::warn!("pearson_{}: {e}", spec.name);
                        None
                    }
                };
                rows.push((format!("pearson_{}", spec.name), r));
            }
        }
    }

    if let (Some(truth), Some(schema)) = (&real.truth, &schema) {
        let z = model.as_ref().map(|m| m.forward_batch(&real.embeddings)).transpose()?;
        for (i, spec) in schema.attributes().iter().enumerate() {
            if !spec.is_categorical() {
                continue;
            }
            let observed: Vec<usize> = (0..truth.len()).filter(|&r| !truth[r].get(i).is_missing()).collect();
            if observed.is_empty() {
                continue;
            }
            if let (Some(m), Some((z, _))) = (&model, &z) {
                let mut hits = 0;
                for &r in &observed {
                    if LabelValue::Class(m.schema().predict_class(z.row(r), i)?) == truth[r].get(i) {
                        hits += 1;
                    }
                }
                rows.push((format!("flow_accuracy_{}", spec.name), Some(hits as f64 / observed.len() as f64)));
            }
            if let Some(oracle) = &generator {
                let mut hits = 0;
                for &r in &observed {
                    if oracle.oracle_classify(real.embeddings.row(r), i)? == truth[r].get(i) {
                        hits += 1;
                    }
                }
                rows.push((format!("oracle_accuracy_{}", spec.name), Some(hits as f64 / observed.len() as f64)));
            }
        }
    }

    create_out_dir(&a.out)?;
    let mut outputs = Vec::new();
    if a.clique {
        let schema = schema.as_ref().ok_or_else(|| anyhow!("--clique needs a schema: pass a corpus, --generator or --model"))?;
        let attr = schema.attribute_index(&a.snr_attr).context("in --snr-attr")?;
        let (low, high) =
            continuous_range(schema, attr).ok_or_else(|| anyhow!("--snr-attr {}: not a continuous attribute", a.snr_attr))?;
        if !(a.snr_bins > 0.0 && a.snr_bins.is_finite()) {
            bail!("--snr-bins must be positive");
        }
        let (points, labels) = match (&generated, &gen_labels) {
            (Some(g), Some(l)) => (&g.embeddings, l),
            (Some(_), None) => bail!("--clique on generated embeddings needs their labels.csv"),
            (None, _) => match &real.truth {
                Some(t) => (&real.embeddings, t),
                None => bail!("--clique needs labelled embeddings"),
            },
        };
        let threshold = a.threshold.unwrap_or(s2s);
        rows.push(("clique_threshold".into(), Some(threshold)));
        let n_bins = ((high - low) / a.snr_bins).ceil().max(1.0) as usize;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
        for (r, y) in labels.iter().enumerate() {
            if let LabelValue::Value(v) = y.get(attr) {
                if (low..=high).contains(&v) {
                    let b = (((v - low) / a.snr_bins).floor() as usize).min(n_bins - 1);
                    members[b].push(r);
                }
            }
        }
        let mut csv = String::from("bin_low,bin_high,count,omega\n");
        for (b, rows_in) in members.iter().enumerate() {
            let lo = low + b as f64 * a.snr_bins;
            let hi = (lo + a.snr_bins).min(high);
            let omega = clique_number(&points.select_rows(rows_in), threshold)?;
            csv.push_str(&format!("{lo},{hi},{},{omega}\n", rows_in.len()));
        }
        let path = a.out.join("clique.csv");
        write_file(&path, csv)?;
        outputs.push(path);
    }

    let json_path = a.out.join("metrics.json");
    let csv_path = a.out.join("metrics.csv");
    write_file(&json_path, metrics_json(&rows)?)?;
    write_file(&csv_path, metrics_csv(&rows)?)?;
    for (k, v) in &rows {
        match v {
            Some(v) => println!("{k}\t{v}"),
            None => println!("{k}\t-"),
        }
    }
    outputs.splice(0..0, [json_path, csv_path]);
    let mut inputs = vec![a.real.clone()];
    inputs.extend([&a.generated, &a.recon, &a.generator, &a.model].into_iter().flatten().cloned());
    manifest::write(&a.out, "eval", seed, a, &inputs, &outputs)
}
