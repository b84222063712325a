//! Conditional mixture baseline: one isotropic GMM per categorical condition
//! tuple, fitted independently by EM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{LabelSchema, LabelValue, MultiLabel};
use crate::distributions::{gmm_fit_em, EmConfig, GmmDocument, GmmModel};
use crate::error::{check_dim, invalid, Error, Result};
use crate::matrix::Matrix;

const CGMM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub classes: Vec<String>,
}

/// A partition that had fewer items than the requested component count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FitWarning {
    pub tuple: Vec<usize>,
    pub requested: usize,
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGmm {
    conditions: Vec<Condition>,
    entries: Vec<(Vec<usize>, GmmModel)>,
}

#[derive(Serialize, Deserialize)]
struct EntryDocument {
    tuple: Vec<String>,
    gmm: GmmDocument,
}

#[derive(Serialize, Deserialize)]
struct ConditionalDocument {
    version: u32,
    conditions: Vec<Condition>,
    entries: Vec<EntryDocument>,
}

impl ConditionalGmm {
    /// Partition `data` by the classes of `conditions` and fit a `k`-component
    /// GMM to each partition. Every item must carry all condition labels.
    pub fn fit(
        data: &Matrix,
        labels: &[MultiLabel],
        schema: &LabelSchema,
        conditions: &[&str],
        k: usize,
        em: &EmConfig,
    ) -> Result<(Self, Vec<FitWarning>)> {
        if data.is_empty() {
            return Err(Error::EmptyInput("conditional gmm data"));
        }
        check_dim(data.rows(), labels.len())?;
        check_dim(schema.dim(), data.cols())?;
        if conditions.is_empty() {
            return Err(invalid("at least one condition attribute is required"));
        }
        if k == 0 {
            return Err(invalid("component count must be >= 1"));
        }
        let mut attrs = Vec::with_capacity(conditions.len());
        let mut conds = Vec::with_capacity(conditions.len());
        for name in conditions {
            let i = schema.attribute_index(name)?;
            let classes = schema
                .attribute(i)?
                .classes()
                .ok_or_else(|| invalid(format!("condition {name} is not categorical")))?;
            attrs.push(i);
            conds.push(Condition { name: name.to_string(), classes: classes.to_vec() });
        }
        let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for (row, y) in labels.iter().enumerate() {
            check_dim(schema.len(), y.len())?;
            let mut tuple = Vec::with_capacity(attrs.len());
            for (&a, cond) in attrs.iter().zip(&conds) {
                match y.get(a) {
                    LabelValue::Class(c) if c < cond.classes.len() => tuple.push(c),
                    LabelValue::Missing => {
                        return Err(Error::InvalidLabel(format!("item {row} has no {} label", cond.name)))
                    }
                    other => {
                        return Err(Error::InvalidLabel(format!("item {row}: invalid {} label {other:?}", cond.name)))
                    }
                }
            }
            match groups.iter_mut().find(|(t, _)| *t == tuple) {
                Some((_, rows)) => rows.push(row),
                None => groups.push((tuple, vec![row])),
            }
        }
        groups.sort_by(|a, b| a.0.cmp(&b.0));
        let mut warnings = Vec::new();
        let mut entries = Vec::with_capacity(groups.len());
        for (tuple, rows) in groups {
            let part = data.select_rows(&rows);
            let used = k.min(rows.len());
            if used < k {
                log::warn!("condition {tuple:?} has {} items; fitting {used} components instead of {k}", rows.len());
                warnings.push(FitWarning { tuple: tuple.clone(), requested: k, used });
            }
            entries.push((tuple, gmm_fit_em(&part, used, em)?));
        }
        Ok((Self { conditions: conds, entries }, warnings))
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn dim(&self) -> usize {
        self.entries[0].1.dim()
    }

    pub fn tuples(&self) -> impl Iterator<Item = &[usize]> {
        self.entries.iter().map(|(t, _)| &t[..])
    }

    pub fn model(&self, tuple: &[usize]) -> Result<&GmmModel> {
        self.entries
            .iter()
            .find(|(t, _)| t == tuple)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidLabel(format!("no model for condition {tuple:?}")))
    }

    /// Condition tuple of `y` restricted to this model's conditions.
    pub fn tuple_for(&self, schema: &LabelSchema, y: &MultiLabel) -> Result<Vec<usize>> {
        self.conditions
            .iter()
            .map(|c| match y.get(schema.attribute_index(&c.name)?) {
                LabelValue::Class(k) => Ok(k),
                _ => Err(Error::InvalidLabel(format!("condition {} must be a class", c.name))),
            })
            .collect()
    }

    /// Parse class names into a tuple.
    pub fn parse_tuple(&self, names: &[&str]) -> Result<Vec<usize>> {
        check_dim(self.conditions.len(), names.len())?;
        self.conditions
            .iter()
            .zip(names)
            .map(|(c, n)| {
                c.classes
                    .iter()
                    .position(|x| x == n)
                    .ok_or_else(|| Error::InvalidLabel(format!("{n:?} is not a class of {}", c.name)))
            })
            .collect()
    }

    pub fn sample_conditional(&self, tuple: &[usize], n: usize, seed: u64) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.model(tuple)?.sample_with(n, &mut rng)
    }

    pub fn to_json(&self) -> Result<String> {
        let entries = self
            .entries
            .iter()
            .map(|(t, m)| EntryDocument {
                tuple: t.iter().zip(&self.conditions).map(|(&c, cond)| cond.classes[c].clone()).collect(),
                gmm: m.to_document(),
            })
            .collect();
        let doc = ConditionalDocument { version: CGMM_FORMAT_VERSION, conditions: self.conditions.clone(), entries };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ConditionalDocument = serde_json::from_str(text)?;
        if doc.version != CGMM_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported conditional gmm version {}", doc.version)));
        }
        if doc.entries.is_empty() || doc.conditions.is_empty() {
            return Err(Error::Format("conditional gmm has no entries".into()));
        }
        let mut model = Self { conditions: doc.conditions, entries: Vec::new() };
        for e in doc.entries {
            let names: Vec<&str> = e.tuple.iter().map(String::as_str).collect();
            let tuple = model.parse_tuple(&names)?;
            let gmm = GmmModel::from_document(e.gmm)?;
            if let Some((_, first)) = model.entries.first() {
                check_dim(first.dim(), gmm.dim())?;
            }
            model.entries.push((tuple, gmm));
        }
        Ok(model)
    }
}
