//! Synthetic embedding corpora with known attribute structure.
//!
//! `e = μ₀ + Σ_categorical o(class) + Σ_continuous κ·(v − mid)·q + σ·η`, where
//! the centre direction, every class offset direction and every continuous
//! direction are mutually orthonormal. That makes the exact Bayes posterior
//! and the least-squares value readout available in closed form.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::base::{argmax, normalize_log_scores, AttributeSpec, LabelSchema, LabelValue, MultiLabel, DEFAULT_CLASS_SHIFT};
use crate::error::{check_dim, invalid, Error, Result};
use crate::flow::{LabeledSet, PostHocLabeler};
use crate::io::{read_embeddings, read_labels, write_embeddings, write_labels, Split};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectKind {
    /// Class offsets are `separation/√2` along orthonormal directions, so
    /// every pair of class centres is `separation` apart.
    Categorical { classes: Vec<String>, proportions: Vec<f64>, separation: f64 },
    /// Values uniform on `[low, high]`, displacement `slope·(v − mid)`.
    Continuous { low: f64, high: f64, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEffect {
    pub name: String,
    #[serde(flatten)]
    pub kind: EffectKind,
}

impl AttributeEffect {
    pub fn categorical(name: &str, classes: &[&str], proportions: &[f64], separation: f64) -> Self {
        Self {
            name: name.into(),
            kind: EffectKind::Categorical {
                classes: classes.iter().map(|c| c.to_string()).collect(),
                proportions: proportions.to_vec(),
                separation,
            },
        }
    }

    pub fn continuous(name: &str, low: f64, high: f64, slope: f64) -> Self {
        Self { name: name.into(), kind: EffectKind::Continuous { low, high, slope } }
    }

    fn directions(&self) -> usize {
        match &self.kind {
            EffectKind::Categorical { classes, .. } => classes.len(),
            EffectKind::Continuous { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub d: usize,
    pub attributes: Vec<AttributeEffect>,
    pub noise_sigma: f64,
    pub n_items: usize,
    /// Norm of the shared centre `μ₀`.
    pub center_norm: f64,
    pub val_fraction: f64,
    /// Seed for the centre and effect directions.
    pub structure_seed: u64,
}

pub const DEFAULT_SLOPE: f64 = 0.4;

impl GeneratorSpec {
    /// Gender and age classes plus an SNR-like value in `[25, 55]`, unit noise,
    /// class centres `separation` noise standard deviations apart.
    pub fn with_separation(separation: f64) -> Self {
        Self {
            d: 64,
            attributes: vec![
                AttributeEffect::categorical("gender", &["F", "M"], &[0.5, 0.5], separation),
                AttributeEffect::categorical("age", &["child", "adult"], &[0.3, 0.7], separation),
                AttributeEffect::continuous("snr", 25.0, 55.0, DEFAULT_SLOPE),
            ],
            noise_sigma: 1.0,
            n_items: 1200,
            center_norm: 10.0,
            val_fraction: 0.1,
            structure_seed: 0,
        }
    }

    /// Class centres 8σ apart.
    pub fn easy() -> Self {
        Self::with_separation(8.0)
    }

    /// Class centres 1.5σ apart: heavily overlapping clusters.
    pub fn hard() -> Self {
        Self::with_separation(1.5)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "easy" => Ok(Self::easy()),
            "hard" => Ok(Self::hard()),
            other => Err(invalid(format!("unknown preset {other:?} (expected easy or hard)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dirs: usize = 1 + self.attributes.iter().map(AttributeEffect::directions).sum::<usize>();
        if self.d <= self.attributes.len() {
            return Err(invalid("d must exceed the number of attributes"));
        }
        if dirs > self.d {
            return Err(invalid(format!("{dirs} effect directions do not fit in d = {}", self.d)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(invalid("noise sigma must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid("validation fraction must be in [0, 1)"));
        }
        if !self.center_norm.is_finite() || self.center_norm < 0.0 {
            return Err(invalid("centre norm must be finite and >= 0"));
        }
        for a in &self.attributes {
            match &a.kind {
                EffectKind::Categorical { classes, proportions, separation } => {
                    check_dim(classes.len(), proportions.len())?;
                    if classes.len() < 2 {
                        return Err(invalid(format!("{} needs >= 2 classes", a.name)));
                    }
                    if proportions.iter().any(|p| !(*p >= 0.0)) || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(invalid(format!("{} proportions must be non-negative and sum to 1", a.name)));
                    }
                    if !separation.is_finite() || *separation < 0.0 {
                        return Err(invalid(format!("{} separation must be >= 0", a.name)));
                    }
                }
                EffectKind::Continuous { low, high, slope } => {
                    if !(low < high) || !slope.is_finite() || *slope == 0.0 {
                        return Err(invalid(format!("{} needs low < high and a non-zero slope", a.name)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Schema with one width-1 section per attribute and the rest residual.
    pub fn schema(&self) -> Result<LabelSchema> {
        let attrs = self
            .attributes
            .iter()
            .map(|a| match &a.kind {
                EffectKind::Categorical { classes, .. } => {
                    let names: Vec<&str> = classes.iter().map(String::as_str).collect();
                    AttributeSpec::categorical(&a.name, &names, DEFAULT_CLASS_SHIFT)
                }
                EffectKind::Continuous { low, high, .. } => AttributeSpec::continuous(&a.name, *low, *high),
            })
            .collect();
        LabelSchema::new(attrs, self.d - self.attributes.len())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Realised generator: centre and orthonormal effect directions.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    center: Vec<f64>,
    /// Per attribute: class offset vectors, or the single unit direction.
    effects: Vec<Vec<Vec<f64>>>,
}

fn gram_schmidt<R: Rng + ?Sized>(count: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

impl Generator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.structure_seed);
        let count = 1 + spec.attributes.iter().map(AttributeEffect::directions).sum::<usize>();
        let mut dirs = gram_schmidt(count, spec.d, &mut rng).into_iter();
        let center: Vec<f64> = dirs.next().expect("centre").iter().map(|v| v * spec.center_norm).collect();
        let effects = spec
            .attributes
            .iter()
            .map(|a| match &a.kind {
                EffectKind::Categorical { classes, separation, .. } => {
                    let scale = separation / std::f64::consts::SQRT_2;
                    (0..classes.len())
                        .map(|_| dirs.next().expect("direction").iter().map(|v| v * scale).collect())
                        .collect()
                }
                EffectKind::Continuous { .. } => vec![dirs.next().expect("direction")],
            })
            .collect();
        Ok(Self { spec: spec.clone(), center, effects })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    fn attribute(&self, attr: usize) -> Result<&AttributeEffect> {
        self.spec
            .attributes
            .get(attr)
            .ok_or_else(|| invalid(format!("attribute index {attr} out of range")))
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.spec
            .attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| invalid(format!("unknown attribute {name:?}")))
    }

    /// Noise-free embedding for a full truth tuple.
    pub fn mean_embedding(&self, truth: &MultiLabel) -> Result<Vec<f64>> {
        check_dim(self.spec.attributes.len(), truth.len())?;
        let mut e = self.center.clone();
        for (i, a) in self.spec.attributes.iter().enumerate() {
            let (offset, scale) = match (&a.kind, truth.get(i)) {
                (EffectKind::Categorical { classes, .. }, LabelValue::Class(c)) if c < classes.len() => {
                    (&self.effects[i][c], 1.0)
                }
                (EffectKind::Continuous { low, high, slope }, LabelValue::Value(v)) if v.is_finite() => {
                    (&self.effects[i][0], slope * (v - 0.5 * (low + high)))
                }
                _ => return Err(Error::InvalidLabel(format!("truth for {} is missing or invalid", a.name))),
            };
            e.iter_mut().zip(offset).for_each(|(x, o)| *x += scale * o);
        }
        Ok(e)
    }

    /// Exact class posterior of a categorical attribute.
    pub fn oracle_posterior(&self, e: &[f64], attr: usize) -> Result<Vec<f64>> {
        check_dim(self.spec.d, e.len())?;
        let a = self.attribute(attr)?;
        let EffectKind::Categorical { proportions, .. } = &a.kind else {
            return Err(invalid(format!("{} is not categorical", a.name)));
        };
        let centred: Vec<f64> = e.iter().zip(&self.center).map(|(x, c)| x - c).collect();
        let s2 = self.spec.noise_sigma * self.spec.noise_sigma;
        let fit: Vec<f64> =
            self.effects[attr].iter().map(|o| dot(&centred, o) - 0.5 * dot(o, o)).collect();
        if s2 == 0.0 {
            let best = fit
                .iter()
                .enumerate()
                .filter(|(c, _)| proportions[*c] > 0.0)
                .max_by(|x, y| x.1.total_cmp(y.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            return Ok((0..fit.len()).map(|c| if c == best { 1.0 } else { 0.0 }).collect());
        }
        let scores: Vec<f64> = fit.iter().zip(proportions).map(|(f, p)| p.ln() + f / s2).collect();
        Ok(normalize_log_scores(&scores))
    }

    /// Least-squares readout of a continuous attribute on the value scale.
    pub fn oracle_value(&self, e: &[f64], attr: usize) -> Result<f64> {
        check_dim(self.spec.d, e.len())?;
        let a = self.attribute(attr)?;
        let EffectKind::Continuous { low, high, slope } = &a.kind else {
            return Err(invalid(format!("{} is not continuous", a.name)));
        };
        let proj: f64 = e.iter().zip(&self.center).zip(&self.effects[attr][0]).map(|((x, c), q)| (x - c) * q).sum();
        Ok(0.5 * (low + high) + proj / slope)
    }

    /// Bayes class for categorical attributes, value readout for continuous.
    pub fn oracle_classify(&self, e: &[f64], attr: usize) -> Result<LabelValue> {
        match &self.attribute(attr)?.kind {
            EffectKind::Categorical { .. } => Ok(LabelValue::Class(argmax(&self.oracle_posterior(e, attr)?))),
            EffectKind::Continuous { .. } => Ok(LabelValue::Value(self.oracle_value(e, attr)?)),
        }
    }

    /// Accuracy of the Bayes oracle itself on `corpus`; this is the ceiling for
    /// any classifier of that attribute.
    pub fn oracle_accuracy(&self, embeddings: &Matrix, truth: &[MultiLabel], attr: usize) -> Result<f64> {
        check_dim(embeddings.rows(), truth.len())?;
        if truth.is_empty() {
            return Err(Error::EmptyInput("oracle accuracy"));
        }
        let mut hits = 0usize;
        for (e, y) in embeddings.iter_rows().zip(truth) {
            if self.oracle_classify(e, attr)? == y.get(attr) {
                hits += 1;
            }
        }
        Ok(hits as f64 / truth.len() as f64)
    }

    pub fn generate(&self, seed: u64) -> Result<Corpus> {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pickers: Vec<Option<WeightedIndex<f64>>> = spec
            .attributes
            .iter()
            .map(|a| match &a.kind {
                EffectKind::Categorical { proportions, .. } => WeightedIndex::new(proportions)
                    .map(Some)
                    .map_err(|e| invalid(format!("{} proportions: {e}", a.name))),
                EffectKind::Continuous { .. } => Ok(None),
            })
            .collect::<Result<_>>()?;
        let mut embeddings = Matrix::zeros(spec.n_items, spec.d);
        let mut truth = Vec::with_capacity(spec.n_items);
        for i in 0..spec.n_items {
            let y = MultiLabel(
                spec.attributes
                    .iter()
                    .zip(&pickers)
                    .map(|(a, p)| match (&a.kind, p) {
                        (_, Some(p)) => LabelValue::Class(p.sample(&mut rng)),
                        (EffectKind::Continuous { low, high, .. }, None) => LabelValue::Value(rng.random_range(*low..*high)),
                        _ => unreachable!("categorical attributes always have a picker"),
                    })
                    .collect(),
            );
            let mean = self.mean_embedding(&y)?;
            for (o, m) in embeddings.row_mut(i).iter_mut().zip(&mean) {
                *o = m + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            truth.push(y);
        }
        let n_val = (spec.val_fraction * spec.n_items as f64).round() as usize;
        let mut order: Vec<usize> = (0..spec.n_items).collect();
        order.shuffle(&mut rng);
        let mut split = vec![Split::Train; spec.n_items];
        for &i in &order[..n_val] {
            split[i] = Split::Val;
        }
        Ok(Corpus { labels: truth.clone(), embeddings, truth, split })
    }
}

impl PostHocLabeler for Generator {
    /// Fills missing continuous slots with the oracle readout, clamped to range.
    fn label(&self, e: &[f64], y: &mut MultiLabel) {
        for (i, a) in self.spec.attributes.iter().enumerate() {
            if let (EffectKind::Continuous { low, high, .. }, LabelValue::Missing) = (&a.kind, y.get(i)) {
                if let Ok(v) = self.oracle_value(e, i) {
                    y.set(i, LabelValue::Value(v.clamp(*low, *high)));
                }
            }
        }
    }
}

pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Corpus> {
    Generator::new(spec)?.generate(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub embeddings: Matrix,
    /// Observed labels; every observed slot equals the truth.
    pub labels: Vec<MultiLabel>,
    pub truth: Vec<MultiLabel>,
    pub split: Vec<Split>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Corpus {
        Corpus {
            embeddings: self.embeddings.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i].clone()).collect(),
            truth: rows.iter().map(|&i| self.truth[i].clone()).collect(),
            split: rows.iter().map(|&i| self.split[i]).collect(),
        }
    }

    pub fn part(&self, split: Split) -> Corpus {
        self.subset(&self.indices(split))
    }

    /// Observed labels of one split as a training set.
    pub fn labeled(&self, split: Split) -> Result<LabeledSet> {
        let part = self.part(split);
        LabeledSet::new(part.embeddings, part.labels)
    }

    /// Hide attribute `attr` on each item independently with probability
    /// `1 − keep`; already hidden slots stay hidden.
    pub fn drop_labels(&self, attr: usize, keep: f64, seed: u64) -> Result<Corpus> {
        if !(0.0..=1.0).contains(&keep) {
            return Err(invalid("keep fraction must be in [0, 1]"));
        }
        if self.truth.first().is_some_and(|y| attr >= y.len()) {
            return Err(invalid(format!("attribute index {attr} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for y in &mut out.labels {
            let u: f64 = rng.random();
            if u >= keep {
                y.set(attr, LabelValue::Missing);
            }
        }
        Ok(out)
    }

    /// Write `embeddings.bin`, `labels.csv` (with split), `truth.csv` and
    /// `schema.json` into `dir`.
    pub fn save(&self, dir: &Path, schema: &LabelSchema) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_embeddings(&dir.join("embeddings.bin"), &self.embeddings)?;
        write_labels(&dir.join("labels.csv"), schema, &self.labels, Some(&self.split))?;
        write_labels(&dir.join("truth.csv"), schema, &self.truth, None)?;
        fs::write(dir.join("schema.json"), schema.to_json()?)?;
        Ok(())
    }

    /// Load a corpus directory; the truth table is optional (missing truth is
    /// replaced by the observed labels).
    pub fn load(dir: &Path) -> Result<(Corpus, LabelSchema)> {
        let schema = LabelSchema::from_json(&fs::read_to_string(dir.join("schema.json"))?)?;
        let embeddings = read_embeddings(&dir.join("embeddings.bin"))?;
        check_dim(schema.dim(), embeddings.cols())?;
        let (labels, split) = read_labels(&dir.join("labels.csv"), &schema)?;
        check_dim(embeddings.rows(), labels.len())?;
        let truth_path = dir.join("truth.csv");
        let truth = if truth_path.exists() { read_labels(&truth_path, &schema)?.0 } else { labels.clone() };
        check_dim(labels.len(), truth.len())?;
        let split = split.unwrap_or_else(|| vec![Split::Train; labels.len()]);
        Ok((Corpus { embeddings, labels, truth, split }, schema))
    }
}
