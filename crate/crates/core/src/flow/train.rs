//! Semi-supervised maximum-likelihood training with consistency
//! regularization on samples from a supporting mixture.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::{FlowConfig, FlowGrads, FlowModel, BATCH_ROWS};
use crate::base::{argmax, LabelSchema, LabelValue, MultiLabel, RangePolicy};
use crate::distributions::GmmModel;
use crate::error::{check_dim, invalid, Error, Result};
use crate::matrix::{sq_dist, Matrix};

/// Embeddings paired with (possibly partial) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub embeddings: Matrix,
    pub labels: Vec<MultiLabel>,
}

impl LabeledSet {
    pub fn new(embeddings: Matrix, labels: Vec<MultiLabel>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(invalid(format!(
                "{} embeddings but {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// How class priors of the schema are set before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Observed label frequencies in the training set.
    #[default]
    Empirical,
    Uniform,
    /// Keep whatever priors the schema carries.
    Schema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub reg_batch_size: usize,
    /// `None` uses 0.05 × median nearest-neighbour distance of the training set.
    pub perturbation_scale: Option<f64>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub priors: PriorMode,
    pub flow: FlowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            reg_batch_size: 64,
            perturbation_scale: None,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            adam: AdamConfig::default(),
            priors: PriorMode::Empirical,
            flow: FlowConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.reg_batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(invalid("batch sizes, max_epochs and patience must be >= 1"));
        }
        if let Some(eps) = self.perturbation_scale {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(invalid("perturbation scale must be finite and >= 0"));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be > 0"));
        }
        Ok(())
    }
}

/// Supplies labels for regularization samples that the flow itself does not
/// predict (continuous attributes). Entries left `Missing` stay unobserved.
pub trait PostHocLabeler {
    fn label(&self, e: &[f64], y: &mut MultiLabel);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best validation log-likelihood.
    pub model: FlowModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loglik: f64,
    pub perturbation_scale: f64,
}

/// Predicted labels for a regularization sample: categorical attributes get
/// the Bayes-rule class of `e + eps·η`; continuous ones stay missing.
pub fn pseudo_label<R: Rng + ?Sized>(model: &FlowModel, e: &[f64], eps: f64, rng: &mut R) -> Result<MultiLabel> {
    let perturbed: Vec<f64> = if eps > 0.0 {
        e.iter().map(|&v| v + eps * rng.sample::<f64, _>(StandardNormal)).collect()
    } else {
        e.to_vec()
    };
    let (z, _) = model.forward(&perturbed)?;
    let schema = model.schema();
    let mut y = MultiLabel::missing(schema.len());
    for (i, spec) in schema.attributes().iter().enumerate() {
        if spec.is_categorical() {
            y.set(i, LabelValue::Class(argmax(&schema.classify(&z, i)?)));
        }
    }
    Ok(y)
}

/// [`pseudo_label`] for every row of `data`, drawing the perturbations in
/// row order.
pub fn pseudo_label_batch<R: Rng + ?Sized>(model: &FlowModel, data: &Matrix, eps: f64, rng: &mut R) -> Result<Vec<MultiLabel>> {
    let mut perturbed = data.clone();
    if eps > 0.0 {
        for v in perturbed.as_mut_slice() {
            *v += eps * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let (z, _) = model.forward_batch(&perturbed)?;
    let schema = model.schema();
    z.iter_rows()
        .map(|z| {
            let mut y = MultiLabel::missing(schema.len());
            for (i, spec) in schema.attributes().iter().enumerate() {
                if spec.is_categorical() {
                    y.set(i, LabelValue::Class(argmax(&schema.classify(z, i)?)));
                }
            }
            Ok(y)
        })
        .collect()
}

/// Mean negative log-likelihood over `items` and its gradient. Inputs must be
/// finite, of dimension `d`, and valid for the model schema.
pub fn total_loss_and_grad(model: &FlowModel, items: &[(&[f64], &MultiLabel)]) -> (f64, FlowGrads) {
    let mut grads = FlowGrads::zeros_like(model);
    if items.is_empty() {
        return (0.0, grads);
    }
    let w = -1.0 / items.len() as f64;
    let mut loss = 0.0;
    for chunk in items.chunks(BATCH_ROWS) {
        loss += w * model.loglik_accumulate(chunk, w, &mut grads).iter().sum::<f64>();
    }
    (loss, grads)
}

/// Holds a model and its optimizer state.
pub struct Trainer {
    model: FlowModel,
    adam: Adam,
    lr: f64,
}

impl Trainer {
    pub fn new(model: FlowModel, learning_rate: f64, adam: AdamConfig) -> Self {
        let shapes: Vec<usize> = model.layers().iter().map(|l| l.params().len()).collect();
        Self { model, adam: Adam::new(adam, shapes), lr: learning_rate }
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn into_model(self) -> FlowModel {
        self.model
    }

    pub fn batch_loss(&self, items: &[(&[f64], &MultiLabel)]) -> f64 {
        let w = -1.0 / items.len().max(1) as f64;
        let d = self.model.dim();
        let mut total = 0.0;
        for chunk in items.chunks(BATCH_ROWS) {
            let flat: Vec<f64> = chunk.iter().flat_map(|(e, _)| e.iter().copied()).collect();
            let (z, ld) = self.model.forward_rows(&flat, chunk.len());
            for (r, (_, y)) in chunk.iter().enumerate() {
                total += w * (self.model.schema().loglik_grad(&z[r * d..(r + 1) * d], y, None) + ld[r]);
            }
        }
        total
    }

    /// One optimizer step on `items`; returns the loss before the update.
    /// A non-finite loss or gradient leaves the parameters untouched.
    pub fn step(&mut self, items: &[(&[f64], &MultiLabel)]) -> f64 {
        let (loss, grads) = total_loss_and_grad(&self.model, items);
        if !loss.is_finite() || !grads.norm().is_finite() {
            log::warn!("skipping update with non-finite loss {loss}");
            return loss;
        }
        let blocks = self.model.layers.iter_mut().map(|l| &mut l.net.params[..]).zip(grads.0.iter().map(|g| &g[..]));
        self.adam.step(self.lr, blocks);
        loss
    }
}

/// Median Euclidean distance from each row to its nearest other row; at most
/// 2000 rows are used.
pub fn median_nn_distance(data: &Matrix) -> Result<f64> {
    let n = data.rows().min(2000);
    if n < 2 {
        return Err(Error::EmptyInput("need at least two embeddings for nearest-neighbour distance"));
    }
    let mut nn: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(data.row(i), data.row(j)))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    Ok(if n % 2 == 1 { nn[n / 2] } else { 0.5 * (nn[n / 2 - 1] + nn[n / 2]) })
}

fn check_set(set: &LabeledSet, schema: &LabelSchema, what: &'static str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    check_dim(schema.dim(), set.dim())?;
    if set.embeddings.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    for y in &set.labels {
        schema.validate_label(y, RangePolicy::Strict)?;
    }
    Ok(())
}

fn mean_loglik(model: &FlowModel, set: &LabeledSet) -> f64 {
    let (z, ld) = model.forward_batch(&set.embeddings).expect("validated corpus");
    let total: f64 = z.iter_rows().zip(&set.labels).zip(&ld).map(|((z, y), l)| model.schema().loglik_grad(z, y, None) + l).sum();
    total / set.len() as f64
}

pub fn train(
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    supporting: &GmmModel,
    schema: &LabelSchema,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_labeler(train_set, val_set, supporting, schema, config, None)
}

pub fn train_with_labeler(
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    supporting: &GmmModel,
    schema: &LabelSchema,
    config: &TrainConfig,
    labeler: Option<&dyn PostHocLabeler>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_set(train_set, schema, "training corpus")?;
    check_set(val_set, schema, "validation corpus")?;
    check_dim(schema.dim(), supporting.dim())?;

    let schema = match config.priors {
        PriorMode::Empirical => schema.with_empirical_priors(&train_set.labels),
        PriorMode::Uniform => schema.with_uniform_priors(),
        PriorMode::Schema => schema.clone(),
    };
    let eps = match config.perturbation_scale {
        Some(eps) => eps,
        None => 0.05 * median_nn_distance(&train_set.embeddings)?,
    };
    let mut trainer = Trainer::new(FlowModel::new(schema, &config.flow)?, config.learning_rate, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut best_val = mean_loglik(trainer.model(), val_set);
    let mut best_model = trainer.model().clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let reg = supporting.sample_with(config.reg_batch_size, &mut rng)?;
            let mut reg_labels = pseudo_label_batch(trainer.model(), &reg, eps, &mut rng)?;
            if let Some(l) = labeler {
                for (e, y) in reg.iter_rows().zip(&mut reg_labels) {
                    l.label(e, y);
                }
            }
            let mut items: Vec<(&[f64], &MultiLabel)> = chunk
                .iter()
                .map(|&i| (train_set.embeddings.row(i), &train_set.labels[i]))
                .collect();
            items.extend(reg.iter_rows().zip(&reg_labels));
            loss_sum += trainer.step(&items);
            batches += 1;
        }
        let val = mean_loglik(trainer.model(), val_set);
        let train_loss = loss_sum / batches as f64;
        log::debug!("epoch {epoch}: train loss {train_loss:.4}, val loglik {val:.4}");
        history.push(EpochStats { epoch, train_loss, val_loglik: val });
        if val > best_val {
            best_val = val;
            best_model = trainer.model().clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { model: best_model, history, best_epoch, best_val_loglik: best_val, perturbation_scale: eps })
}
