//! Partitioned conditional base distribution `p(z | y)`.
//!
//! The base vector is split as `z = [z¹, …, zˡ, zᵘ]`: one section per labelled
//! attribute plus a residual section. Every section is a unit-variance isotropic
//! Gaussian whose mean is set by its label. A missing label (∅) integrates the
//! label out in closed form: a Gaussian mixture for categorical attributes and a
//! Bhattacharjee density for continuous ones.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    bhattacharjee_dlogpdf, bhattacharjee_unchecked, logsumexp_nonempty, LN_2PI,
};
use crate::error::{check_dim, invalid, Error, Result};

const SCHEMA_FORMAT_VERSION: u32 = 1;

/// Shift between adjacent class means of a categorical section.
pub const DEFAULT_CLASS_SHIFT: f64 = 6.0;
pub const DEFAULT_SNR_RANGE: (f64, f64) = (25.0, 55.0);

#[derive(Debug, Clone, PartialEq)]
pub enum AttributeKind {
    /// Class `j` has mean `j · shift` in every coordinate of the section.
    Categorical { classes: Vec<String>, prior: Vec<f64>, shift: f64 },
    /// Mean `μ(y) = y` replicated across the section; `y ∈ [low, high]`.
    Continuous { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSpec {
    pub name: String,
    pub width: usize,
    pub kind: AttributeKind,
}

impl AttributeSpec {
    pub fn categorical(name: &str, classes: &[&str], shift: f64) -> Self {
        let c = classes.len().max(1);
        Self {
            name: name.to_string(),
            width: 1,
            kind: AttributeKind::Categorical {
                classes: classes.iter().map(|s| s.to_string()).collect(),
                prior: vec![1.0 / c as f64; classes.len()],
                shift,
            },
        }
    }

    pub fn continuous(name: &str, low: f64, high: f64) -> Self {
        Self { name: name.to_string(), width: 1, kind: AttributeKind::Continuous { low, high } }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_prior(mut self, p: Vec<f64>) -> Self {
        if let AttributeKind::Categorical { prior, .. } = &mut self.kind {
            *prior = p;
        }
        self
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, AttributeKind::Categorical { .. })
    }

    pub fn classes(&self) -> Option<&[String]> {
        match &self.kind {
            AttributeKind::Categorical { classes, .. } => Some(classes),
            AttributeKind::Continuous { .. } => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(invalid(format!("attribute {} has zero width", self.name)));
        }
        match &self.kind {
            AttributeKind::Categorical { classes, prior, shift } => {
                if classes.len() < 2 {
                    return Err(invalid(format!("attribute {} needs >= 2 classes", self.name)));
                }
                check_dim(classes.len(), prior.len())?;
                if prior.iter().any(|p| !(*p >= 0.0)) {
                    return Err(invalid(format!("attribute {} has a negative prior", self.name)));
                }
                let total: f64 = prior.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(invalid(format!(
                        "attribute {} prior sums to {total}, expected 1",
                        self.name
                    )));
                }
                if !shift.is_finite() || *shift == 0.0 {
                    return Err(invalid(format!("attribute {} needs a non-zero shift", self.name)));
                }
                let mut seen = classes.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != classes.len() {
                    return Err(invalid(format!("attribute {} repeats a class", self.name)));
                }
            }
            AttributeKind::Continuous { low, high } => {
                if !(low < high) || !low.is_finite() || !high.is_finite() {
                    return Err(invalid(format!(
                        "attribute {} needs a finite range with low < high",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One slot of a [`MultiLabel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelValue {
    /// ∅: the attribute is unobserved and gets marginalised.
    Missing,
    Class(usize),
    Value(f64),
}

impl LabelValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, LabelValue::Missing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabel(pub Vec<LabelValue>);

impl MultiLabel {
    pub fn missing(len: usize) -> Self {
        Self(vec![LabelValue::Missing; len])
    }

    pub fn values(&self) -> &[LabelValue] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> LabelValue {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: LabelValue) {
        self.0[i] = v;
    }
}

/// Whether observed continuous labels may lie outside their training range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RangePolicy {
    #[default]
    Strict,
    Extrapolate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSchema {
    attributes: Vec<AttributeSpec>,
    residual_width: usize,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AttributeDocument {
    name: String,
    width: usize,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    classes: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    prior: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    shift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    range: Option<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct SchemaDocument {
    version: u32,
    d: usize,
    residual_width: usize,
    attributes: Vec<AttributeDocument>,
}

impl LabelSchema {
    pub fn new(attributes: Vec<AttributeSpec>, residual_width: usize) -> Result<Self> {
        if residual_width == 0 {
            return Err(invalid("residual width must be >= 1"));
        }
        for (i, a) in attributes.iter().enumerate() {
            a.validate()?;
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(invalid(format!("duplicate attribute name {}", a.name)));
            }
        }
        let mut offsets = Vec::with_capacity(attributes.len());
        let mut at = 0;
        for a in &attributes {
            offsets.push(at);
            at += a.width;
        }
        Ok(Self { attributes, residual_width, offsets })
    }

    /// Gender {F, M}, age group {child, adult}, SNR in [25, 55]: width-1
    /// sections, class shift 6, residual `d - 3`.
    pub fn voicelens_default(d: usize) -> Result<Self> {
        if d < 4 {
            return Err(invalid("default schema needs d >= 4"));
        }
        Self::new(
            vec![
                AttributeSpec::categorical("gender", &["F", "M"], DEFAULT_CLASS_SHIFT),
                AttributeSpec::categorical("age", &["child", "adult"], DEFAULT_CLASS_SHIFT),
                AttributeSpec::continuous("snr", DEFAULT_SNR_RANGE.0, DEFAULT_SNR_RANGE.1),
            ],
            d - 3,
        )
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.attributes
    }

    pub fn attribute(&self, i: usize) -> Result<&AttributeSpec> {
        self.attributes
            .get(i)
            .ok_or_else(|| invalid(format!("attribute index {i} out of range")))
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| invalid(format!("unknown attribute {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn residual_width(&self) -> usize {
        self.residual_width
    }

    pub fn dim(&self) -> usize {
        self.residual_range().end
    }

    pub fn section(&self, i: usize) -> Range<usize> {
        let start = self.offsets[i];
        start..start + self.attributes[i].width
    }

    pub fn residual_range(&self) -> Range<usize> {
        let start = self.attributes.iter().map(|a| a.width).sum::<usize>();
        start..start + self.residual_width
    }

    pub fn class_mean(&self, attr: usize, class: usize) -> Result<f64> {
        match &self.attribute(attr)?.kind {
            AttributeKind::Categorical { classes, shift, .. } => {
                if class >= classes.len() {
                    return Err(Error::InvalidLabel(format!(
                        "class index {class} out of range for {}",
                        self.attributes[attr].name
                    )));
                }
                Ok(class as f64 * shift)
            }
            AttributeKind::Continuous { .. } => {
                Err(invalid(format!("attribute {} is continuous", self.attributes[attr].name)))
            }
        }
    }

    /// Replace every categorical prior with the class frequencies among observed
    /// labels; attributes without any observed label get a uniform prior.
    pub fn with_empirical_priors(&self, labels: &[MultiLabel]) -> Self {
        let mut out = self.clone();
        for (i, attr) in out.attributes.iter_mut().enumerate() {
            if let AttributeKind::Categorical { classes, prior, .. } = &mut attr.kind {
                let mut counts = vec![0.0; classes.len()];
                for y in labels {
                    if let Some(LabelValue::Class(c)) = y.0.get(i) {
                        if *c < counts.len() {
                            counts[*c] += 1.0;
                        }
                    }
                }
                let total: f64 = counts.iter().sum();
                *prior = if total > 0.0 {
                    counts.iter().map(|c| c / total).collect()
                } else {
                    vec![1.0 / classes.len() as f64; classes.len()]
                };
            }
        }
        out
    }

    pub fn with_uniform_priors(&self) -> Self {
        self.with_empirical_priors(&[])
    }

    pub fn validate_label(&self, y: &MultiLabel, policy: RangePolicy) -> Result<()> {
        check_dim(self.len(), y.len())?;
        for (attr, v) in self.attributes.iter().zip(y.values()) {
            match (&attr.kind, v) {
                (_, LabelValue::Missing) => {}
                (AttributeKind::Categorical { classes, .. }, LabelValue::Class(c)) => {
                    if *c >= classes.len() {
                        return Err(Error::InvalidLabel(format!(
                            "class index {c} out of range for {}",
                            attr.name
                        )));
                    }
                }
                (AttributeKind::Continuous { low, high }, LabelValue::Value(x)) => {
                    if !x.is_finite() {
                        return Err(Error::InvalidLabel(format!("{} is not finite", attr.name)));
                    }
                    if policy == RangePolicy::Strict && (*x < *low || *x > *high) {
                        return Err(Error::InvalidLabel(format!(
                            "{}={x} outside [{low}, {high}]",
                            attr.name
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidLabel(format!(
                        "label kind does not match attribute {}",
                        attr.name
                    )))
                }
            }
        }
        Ok(())
    }

    /// `log p(z | y)`, marginalising every ∅ slot.
    pub fn log_likelihood(&self, z: &[f64], y: &MultiLabel) -> Result<f64> {
        self.log_likelihood_with(z, y, RangePolicy::Strict)
    }

    pub fn log_likelihood_with(&self, z: &[f64], y: &MultiLabel, policy: RangePolicy) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        self.validate_label(y, policy)?;
        Ok(self.loglik_grad(z, y, None))
    }

    /// Log-likelihood and, if `grad` is given, its gradient with respect to `z`
    /// written into `grad`. Assumes validated inputs.
    pub(crate) fn loglik_grad(&self, z: &[f64], y: &MultiLabel, mut grad: Option<&mut [f64]>) -> f64 {
        let mut total = 0.0;
        let res = self.residual_range();
        for (k, &v) in z[res.clone()].iter().enumerate() {
            total += -0.5 * (LN_2PI + v * v);
            if let Some(g) = grad.as_deref_mut() {
                g[res.start + k] = -v;
            }
        }
        for (i, attr) in self.attributes.iter().enumerate() {
            let range = self.section(i);
            let zs = &z[range.clone()];
            let w = zs.len() as f64;
            match (&attr.kind, y.0[i]) {
                (AttributeKind::Categorical { shift, .. }, LabelValue::Class(c)) => {
                    total += observed_section(zs, c as f64 * shift, grad.as_deref_mut().map(|g| &mut g[range]));
                }
                (AttributeKind::Continuous { .. }, LabelValue::Value(x)) => {
                    total += observed_section(zs, x, grad.as_deref_mut().map(|g| &mut g[range]));
                }
                (AttributeKind::Categorical { prior, shift, .. }, LabelValue::Missing) => {
                    let scores: Vec<f64> = prior
                        .iter()
                        .enumerate()
                        .map(|(j, p)| {
                            let mu = j as f64 * shift;
                            let r2: f64 = zs.iter().map(|v| (v - mu) * (v - mu)).sum();
                            p.ln() - 0.5 * (w * LN_2PI + r2)
                        })
                        .collect();
                    let lse = logsumexp_nonempty(&scores);
                    total += lse;
                    if let Some(g) = grad.as_deref_mut() {
                        let mean_mu: f64 = scores
                            .iter()
                            .enumerate()
                            .map(|(j, s)| (s - lse).exp() * j as f64 * shift)
                            .sum();
                        for (gk, v) in g[range].iter_mut().zip(zs) {
                            *gk = mean_mu - v;
                        }
                    }
                }
                (AttributeKind::Continuous { low, high }, LabelValue::Missing) => {
                    for (k, &v) in zs.iter().enumerate() {
                        total += bhattacharjee_unchecked(v, *low, *high);
                        if let Some(g) = grad.as_deref_mut() {
                            g[range.start + k] = bhattacharjee_dlogpdf(v, *low, *high);
                        }
                    }
                }
                _ => unreachable!("label validated against schema"),
            }
        }
        total
    }

    /// Draw `z ~ p(z | y)`; ∅ slots are sampled ancestrally.
    pub fn sample(&self, y: &MultiLabel, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(y, &mut rng, RangePolicy::Strict)
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        y: &MultiLabel,
        rng: &mut R,
        policy: RangePolicy,
    ) -> Result<Vec<f64>> {
        self.validate_label(y, policy)?;
        let mut z = vec![0.0; self.dim()];
        for (i, attr) in self.attributes.iter().enumerate() {
            let range = self.section(i);
            match (&attr.kind, y.0[i]) {
                (AttributeKind::Categorical { shift, .. }, LabelValue::Class(c)) => {
                    fill_gaussian(&mut z[range], c as f64 * shift, rng);
                }
                (AttributeKind::Continuous { .. }, LabelValue::Value(x)) => {
                    fill_gaussian(&mut z[range], x, rng);
                }
                (AttributeKind::Categorical { prior, shift, .. }, LabelValue::Missing) => {
                    let c = draw_class(prior, rng);
                    fill_gaussian(&mut z[range], c as f64 * shift, rng);
                }
                (AttributeKind::Continuous { low, high }, LabelValue::Missing) => {
                    // Coordinates are marginalised independently, so each gets its own y.
                    for v in &mut z[range] {
                        let mean = rng.random_range(*low..*high);
                        let eps: f64 = rng.sample(StandardNormal);
                        *v = mean + eps;
                    }
                }
                _ => unreachable!("label validated against schema"),
            }
        }
        fill_gaussian(&mut z[self.residual_range()], 0.0, rng);
        Ok(z)
    }

    /// Posterior over the classes of categorical attribute `attr` given `z`.
    pub fn classify(&self, z: &[f64], attr: usize) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        let spec = self.attribute(attr)?;
        let AttributeKind::Categorical { prior, shift, .. } = &spec.kind else {
            return Err(invalid(format!(
                "attribute {} is continuous; use read_continuous",
                spec.name
            )));
        };
        let zs = &z[self.section(attr)];
        let scores: Vec<f64> = prior
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let mu = j as f64 * shift;
                p.ln() - 0.5 * zs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()
            })
            .collect();
        Ok(normalize_log_scores(&scores))
    }

    pub fn predict_class(&self, z: &[f64], attr: usize) -> Result<usize> {
        Ok(argmax(&self.classify(z, attr)?))
    }

    /// Mean of the coordinates of a continuous section; unclipped.
    pub fn read_continuous(&self, z: &[f64], attr: usize) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let spec = self.attribute(attr)?;
        if spec.is_categorical() {
            return Err(invalid(format!("attribute {} is categorical; use classify", spec.name)));
        }
        let zs = &z[self.section(attr)];
        Ok(zs.iter().sum::<f64>() / zs.len() as f64)
    }

    /// Parse `name=value,...`; `_` (or an omitted attribute) means ∅.
    pub fn parse_label(&self, text: &str) -> Result<MultiLabel> {
        let mut y = MultiLabel::missing(self.len());
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidLabel(format!("expected name=value, got {part:?}")))?;
            let i = self.attribute_index(name.trim())?;
            y.0[i] = self.parse_value(i, value.trim())?;
        }
        Ok(y)
    }

    /// Parse one slot; empty text and `_` denote ∅.
    pub fn parse_value(&self, attr: usize, text: &str) -> Result<LabelValue> {
        if text.is_empty() || text == "_" {
            return Ok(LabelValue::Missing);
        }
        let spec = self.attribute(attr)?;
        match &spec.kind {
            AttributeKind::Categorical { classes, .. } => classes
                .iter()
                .position(|c| c == text)
                .map(LabelValue::Class)
                .ok_or_else(|| {
                    Error::InvalidLabel(format!("{text:?} is not a class of {}", spec.name))
                }),
            AttributeKind::Continuous { .. } => text
                .parse::<f64>()
                .map(LabelValue::Value)
                .map_err(|_| Error::InvalidLabel(format!("{text:?} is not a number for {}", spec.name))),
        }
    }

    /// Inverse of [`parse_value`](Self::parse_value); ∅ becomes the empty string.
    pub fn format_value(&self, attr: usize, v: LabelValue) -> String {
        match (v, &self.attributes[attr].kind) {
            (LabelValue::Missing, _) => String::new(),
            (LabelValue::Class(c), AttributeKind::Categorical { classes, .. }) => {
                classes.get(c).cloned().unwrap_or_default()
            }
            (LabelValue::Value(x), _) => format!("{x}"),
            (LabelValue::Class(c), _) => format!("{c}"),
        }
    }

    pub(crate) fn to_document(&self) -> SchemaDocument {
        let attributes = self
            .attributes
            .iter()
            .map(|a| match &a.kind {
                AttributeKind::Categorical { classes, prior, shift } => AttributeDocument {
                    name: a.name.clone(),
                    width: a.width,
                    kind: "categorical".into(),
                    classes: Some(classes.clone()),
                    prior: Some(prior.clone()),
                    shift: Some(*shift),
                    range: None,
                },
                AttributeKind::Continuous { low, high } => AttributeDocument {
                    name: a.name.clone(),
                    width: a.width,
                    kind: "continuous".into(),
                    classes: None,
                    prior: None,
                    shift: None,
                    range: Some([*low, *high]),
                },
            })
            .collect();
        SchemaDocument {
            version: SCHEMA_FORMAT_VERSION,
            d: self.dim(),
            residual_width: self.residual_width,
            attributes,
        }
    }

    pub(crate) fn from_document(doc: SchemaDocument) -> Result<Self> {
        if doc.version != SCHEMA_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported schema version {}", doc.version)));
        }
        let mut attributes = Vec::with_capacity(doc.attributes.len());
        for a in doc.attributes {
            let kind = match a.kind.as_str() {
                "categorical" => {
                    let classes = a
                        .classes
                        .ok_or_else(|| Error::Format(format!("attribute {} lacks classes", a.name)))?;
                    let n = classes.len().max(1);
                    AttributeKind::Categorical {
                        prior: a.prior.unwrap_or_else(|| vec![1.0 / n as f64; classes.len()]),
                        classes,
                        shift: a.shift.unwrap_or(DEFAULT_CLASS_SHIFT),
                    }
                }
                "continuous" => {
                    let [low, high] = a
                        .range
                        .ok_or_else(|| Error::Format(format!("attribute {} lacks range", a.name)))?;
                    AttributeKind::Continuous { low, high }
                }
                other => return Err(Error::Format(format!("unknown attribute kind {other:?}"))),
            };
            attributes.push(AttributeSpec { name: a.name, width: a.width, kind });
        }
        let schema = Self::new(attributes, doc.residual_width)?;
        check_dim(doc.d, schema.dim())?;
        Ok(schema)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

impl fmt::Display for LabelSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .attributes
            .iter()
            .map(|a| format!("{}[{}]", a.name, a.width))
            .collect();
        write!(f, "{} + residual[{}] (d={})", parts.join(" + "), self.residual_width, self.dim())
    }
}

fn observed_section(zs: &[f64], mean: f64, grad: Option<&mut [f64]>) -> f64 {
    let w = zs.len() as f64;
    let r2: f64 = zs.iter().map(|v| (v - mean) * (v - mean)).sum();
    if let Some(g) = grad {
        for (gk, v) in g.iter_mut().zip(zs) {
            *gk = mean - v;
        }
    }
    -0.5 * (w * LN_2PI + r2)
}

fn fill_gaussian<R: Rng + ?Sized>(out: &mut [f64], mean: f64, rng: &mut R) {
    for v in out {
        let eps: f64 = rng.sample(StandardNormal);
        *v = mean + eps;
    }
}

fn draw_class<R: Rng + ?Sized>(prior: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (j, p) in prior.iter().enumerate() {
        if u < *p {
            return j;
        }
        u -= p;
    }
    // Rounding slack lands on the last class with non-zero mass.
    prior.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

pub(crate) fn normalize_log_scores(scores: &[f64]) -> Vec<f64> {
    let lse = logsumexp_nonempty(scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(prior: Vec<f64>) -> LabelSchema {
        LabelSchema::new(
            vec![AttributeSpec::categorical("g", &["F", "M"], 6.0).with_prior(prior)],
            1,
        )
        .unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn default_schema_layout() {
        let s = LabelSchema::voicelens_default(256).unwrap();
        assert_eq!(s.dim(), 256);
        let widths: Vec<usize> = s.attributes().iter().map(|a| a.width).collect();
        assert_eq!(widths, vec![1, 1, 1]);
        assert_eq!(s.residual_width(), 253);
        assert_eq!(s.class_mean(0, 1).unwrap(), 6.0);
        match s.attributes()[2].kind {
            AttributeKind::Continuous { low, high } => assert_eq!((low, high), (25.0, 55.0)),
            _ => panic!("snr should be continuous"),
        }
    }

    #[test]
    fn schema_validation() {
        assert!(LabelSchema::new(vec![AttributeSpec::categorical("a", &["x"], 6.0)], 1).is_err());
        assert!(LabelSchema::new(vec![AttributeSpec::continuous("a", 2.0, 1.0)], 1).is_err());
        assert!(LabelSchema::new(
            vec![AttributeSpec::continuous("a", 0.0, 1.0), AttributeSpec::continuous("a", 0.0, 1.0)],
            1
        )
        .is_err());
        assert!(LabelSchema::new(
            vec![AttributeSpec::categorical("a", &["x", "y"], 6.0).with_prior(vec![0.3, 0.3])],
            1
        )
        .is_err());
        assert!(LabelSchema::new(vec![AttributeSpec::continuous("a", 0.0, 1.0).with_width(0)], 1).is_err());
        assert!(LabelSchema::new(vec![], 0).is_err());
    }

    #[test]
    fn loglik_at_conditional_means() {
        let s = LabelSchema::voicelens_default(8).unwrap();
        let mut z = vec![0.0; 8];
        z[0] = 6.0;
        z[1] = 0.0;
        z[2] = 40.0;
        let y = MultiLabel(vec![LabelValue::Class(1), LabelValue::Class(0), LabelValue::Value(40.0)]);
        let ll = s.log_likelihood(&z, &y).unwrap();
        assert!((ll + 4.0 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn loglik_missing_binary_matches_mixture() {
        let s = binary(vec![0.5, 0.5]);
        // d = 2 here (section + residual); the residual at 0 adds −½ log 2π.
        let ll = s.log_likelihood(&[0.0, 0.0], &MultiLabel::missing(1)).unwrap();
        let section = ll + 0.5 * LN_2PI;
        assert!((section + 1.612_085_698_534_638_4).abs() < 1e-12);
    }

    #[test]
    fn loglik_errors() {
        let s = LabelSchema::voicelens_default(8).unwrap();
        let y = MultiLabel::missing(3);
        assert!(s.log_likelihood(&[0.0; 7], &y).is_err());
        assert!(s.log_likelihood(&[0.0; 8], &MultiLabel::missing(2)).is_err());
        let bad = MultiLabel(vec![LabelValue::Class(2), LabelValue::Missing, LabelValue::Missing]);
        assert!(s.log_likelihood(&[0.0; 8], &bad).is_err());
        let wrong_kind = MultiLabel(vec![LabelValue::Value(1.0), LabelValue::Missing, LabelValue::Missing]);
        assert!(s.log_likelihood(&[0.0; 8], &wrong_kind).is_err());
        let out = MultiLabel(vec![LabelValue::Missing, LabelValue::Missing, LabelValue::Value(70.0)]);
        assert!(s.log_likelihood(&[0.0; 8], &out).is_err());
        assert!(s.log_likelihood_with(&[0.0; 8], &out, RangePolicy::Extrapolate).is_ok());
    }

    #[test]
    fn categorical_marginal_consistency() {
        let s = LabelSchema::new(
            vec![
                AttributeSpec::categorical("c", &["a", "b", "c"], 2.5)
                    .with_width(2)
                    .with_prior(vec![0.2, 0.5, 0.3]),
                AttributeSpec::continuous("v", 0.0, 4.0),
            ],
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 8.0 - 2.0).collect();
            let marg = s
                .log_likelihood(&z, &MultiLabel(vec![LabelValue::Missing, LabelValue::Value(1.5)]))
                .unwrap()
                .exp();
            let brute: f64 = [0.2, 0.5, 0.3]
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    p * s
                        .log_likelihood(&z, &MultiLabel(vec![LabelValue::Class(j), LabelValue::Value(1.5)]))
                        .unwrap()
                        .exp()
                })
                .sum();
            assert!((marg - brute).abs() < 1e-10 * brute.max(1e-300) + 1e-300, "{marg} vs {brute}");
            assert!(((marg.ln() - brute.ln()).abs()) < 1e-10);
        }
    }

    #[test]
    fn continuous_marginal_consistency() {
        let s = LabelSchema::new(vec![AttributeSpec::continuous("snr", 25.0, 55.0)], 1).unwrap();
        for &zv in &[20.0, 25.0, 33.3, 40.0, 54.0, 61.0] {
            let z = [zv, 0.4];
            let marg = s.log_likelihood(&z, &MultiLabel::missing(1)).unwrap().exp();
            let quad = simpson(
                |y| {
                    s.log_likelihood(&z, &MultiLabel(vec![LabelValue::Value(y)])).unwrap().exp() / 30.0
                },
                25.0,
                55.0,
                20_000,
            );
            assert!((marg - quad).abs() < 1e-6, "z={zv}: {marg} vs {quad}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = LabelSchema::new(
            vec![
                AttributeSpec::categorical("c", &["a", "b"], 6.0).with_prior(vec![0.3, 0.7]).with_width(2),
                AttributeSpec::continuous("v", 25.0, 55.0),
            ],
            2,
        )
        .unwrap();
        let z = vec![2.1, 3.4, 57.0, -0.3, 1.2];
        for y in [
            MultiLabel(vec![LabelValue::Missing, LabelValue::Missing]),
            MultiLabel(vec![LabelValue::Class(1), LabelValue::Value(30.0)]),
        ] {
            let mut g = vec![0.0; 5];
            s.loglik_grad(&z, &y, Some(&mut g));
            for k in 0..5 {
                let mut hi = z.clone();
                let mut lo = z.clone();
                hi[k] += 1e-5;
                lo[k] -= 1e-5;
                let fd = (s.loglik_grad(&hi, &y, None) - s.loglik_grad(&lo, &y, None)) / 2e-5;
                assert!((fd - g[k]).abs() < 1e-6 * g[k].abs().max(1.0), "{k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn classify_examples() {
        let s = binary(vec![0.5, 0.5]);
        let p = s.classify(&[3.0, 0.0], 0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let p = s.classify(&[2.0, 9.0], 0).unwrap();
        let expected = 1.0 / (1.0 + (-6.0f64).exp());
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] - 0.99753).abs() < 1e-5);
        let degenerate = binary(vec![1.0, 0.0]);
        for zv in [-3.0, 2.0, 6.0, 40.0] {
            assert_eq!(degenerate.classify(&[zv, 0.0], 0).unwrap(), vec![1.0, 0.0]);
        }
        let cont = LabelSchema::new(vec![AttributeSpec::continuous("v", 0.0, 1.0)], 1).unwrap();
        assert!(cont.classify(&[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn read_continuous_examples() {
        let s = LabelSchema::new(vec![AttributeSpec::continuous("snr", 25.0, 55.0)], 2).unwrap();
        assert_eq!(s.read_continuous(&[40.0, 1.0, 2.0], 0).unwrap(), 40.0);
        let wide =
            LabelSchema::new(vec![AttributeSpec::continuous("snr", 25.0, 55.0).with_width(2)], 1).unwrap();
        assert_eq!(wide.read_continuous(&[29.0, 31.0, 0.0], 0).unwrap(), 30.0);
        assert!(binary(vec![0.5, 0.5]).read_continuous(&[0.0, 0.0], 0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = MultiLabel(vec![LabelValue::Value(30.0)]);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| s.read_continuous(&s.sample_with(&y, &mut rng, RangePolicy::Strict).unwrap(), 0).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 30.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn sampling_moments_and_determinism() {
        let s = LabelSchema::voicelens_default(6).unwrap();
        let y = MultiLabel(vec![LabelValue::Class(1), LabelValue::Class(0), LabelValue::Value(33.0)]);
        assert_eq!(s.sample(&y, 4).unwrap(), s.sample(&y, 4).unwrap());
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sums = vec![0.0; 6];
        for _ in 0..n {
            let z = s.sample_with(&y, &mut rng, RangePolicy::Strict).unwrap();
            sums.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
        }
        let means: Vec<f64> = sums.iter().map(|v| v / n as f64).collect();
        let target = [6.0, 0.0, 33.0, 0.0, 0.0, 0.0];
        for (m, t) in means.iter().zip(target) {
            assert!((m - t).abs() < 0.02, "{means:?}");
        }
        let out = MultiLabel(vec![LabelValue::Missing, LabelValue::Missing, LabelValue::Value(80.0)]);
        assert!(s.sample(&out, 1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(s.sample_with(&out, &mut rng, RangePolicy::Extrapolate).is_ok());
    }

    #[test]
    fn degenerate_prior_equals_observed_class() {
        let s = binary(vec![1.0, 0.0]);
        let n = 10_000;
        let stats = |y: &MultiLabel, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> =
                (0..n).map(|_| s.sample_with(y, &mut rng, RangePolicy::Strict).unwrap()[0]).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            (m, v)
        };
        let (m0, v0) = stats(&MultiLabel::missing(1), 1);
        let (m1, v1) = stats(&MultiLabel(vec![LabelValue::Class(0)]), 2);
        assert!((m0 - m1).abs() < 0.06 && (v0 - v1).abs() < 0.08, "{m0} {v0} {m1} {v1}");
    }

    #[test]
    fn empirical_priors() {
        let s = binary(vec![0.5, 0.5]);
        let labels = vec![
            MultiLabel(vec![LabelValue::Class(0)]),
            MultiLabel(vec![LabelValue::Class(1)]),
            MultiLabel(vec![LabelValue::Class(1)]),
            MultiLabel(vec![LabelValue::Class(1)]),
            MultiLabel(vec![LabelValue::Missing]),
        ];
        match &s.with_empirical_priors(&labels).attributes()[0].kind {
            AttributeKind::Categorical { prior, .. } => assert_eq!(prior, &vec![0.25, 0.75]),
            _ => unreachable!(),
        }
        match &s.with_empirical_priors(&[MultiLabel::missing(1)]).attributes()[0].kind {
            AttributeKind::Categorical { prior, .. } => assert_eq!(prior, &vec![0.5, 0.5]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn parse_and_format_labels() {
        let s = LabelSchema::voicelens_default(8).unwrap();
        let y = s.parse_label("gender=F,age=_,snr=41.5").unwrap();
        assert_eq!(y, MultiLabel(vec![LabelValue::Class(0), LabelValue::Missing, LabelValue::Value(41.5)]));
        assert_eq!(s.parse_label("age=adult").unwrap().get(1), LabelValue::Class(1));
        assert!(s.parse_label("gender=X").is_err());
        assert!(s.parse_label("height=3").is_err());
        assert!(s.parse_label("snr").is_err());
        assert_eq!(s.format_value(0, LabelValue::Class(1)), "M");
        assert_eq!(s.format_value(1, LabelValue::Missing), "");
    }

    #[test]
    fn schema_json_shape() {
        let s = LabelSchema::voicelens_default(16).unwrap();
        let text = s.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["d"], 16);
        assert_eq!(v["residual_width"], 13);
        assert_eq!(v["attributes"][0]["kind"], "categorical");
        assert_eq!(v["attributes"][2]["range"], serde_json::json!([25.0, 55.0]));
        assert!(v["attributes"][2].get("classes").is_none());
        assert_eq!(LabelSchema::from_json(&text).unwrap(), s);
    }

    proptest::proptest! {
        #[test]
        fn posteriors_normalised_and_shift_invariant(zv in -20.0f64..30.0, p in 0.01f64..0.99, c in -50.0f64..50.0) {
            let s = binary(vec![p, 1.0 - p]);
            let post = s.classify(&[zv, 0.0], 0).unwrap();
            proptest::prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let scores: Vec<f64> = (0..2)
                .map(|j| [p, 1.0 - p][j].ln() - 0.5 * (zv - 6.0 * j as f64).powi(2))
                .collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let a = normalize_log_scores(&scores);
            let b = normalize_log_scores(&shifted);
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
            proptest::prop_assert!((a[0] - post[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_missing_density_integrates_to_one() {
        // Importance sampling with a wide Gaussian proposal over d = 3.
        let s = LabelSchema::new(
            vec![
                AttributeSpec::categorical("c", &["a", "b"], 6.0).with_prior(vec![0.4, 0.6]),
                AttributeSpec::continuous("v", 0.0, 5.0),
            ],
            1,
        )
        .unwrap();
        let centre = [3.0, 2.5, 0.0];
        let scale = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 200_000;
        let y = MultiLabel::missing(2);
        let mut total = 0.0;
        for _ in 0..n {
            let mut z = [0.0; 3];
            let mut logq = 0.0;
            for k in 0..3 {
                let eps: f64 = rng.sample(StandardNormal);
                z[k] = centre[k] + scale * eps;
                logq += -0.5 * (LN_2PI + eps * eps) - scale.ln();
            }
            total += (s.log_likelihood(&z, &y).unwrap() - logq).exp();
        }
        let mass = total / n as f64;
        assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
    }
}
