//! Loading inputs given on the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use voicelens::base::{LabelSchema, MultiLabel};
use voicelens::distributions::GmmModel;
use voicelens::flow::FlowModel;
use voicelens::io::{read_embeddings, Split};
use voicelens::tacospawn::ConditionalGmm;
use voicelens::Matrix;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn create_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create output directory {}", path.display()))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    FlowModel::from_json(&read_text(path)?).with_context(|| format!("{} is not a flow model", path.display()))
}

pub fn load_gmm(path: &Path) -> Result<GmmModel> {
    GmmModel::from_json(&read_text(path)?).with_context(|| format!("{} is not a mixture model", path.display()))
}

pub enum AnyModel {
    Flow(FlowModel),
    Conditional(ConditionalGmm),
    Supporting(GmmModel),
}

/// Load any of the three model files, telling them apart by their keys.
pub fn load_any_model(path: &Path) -> Result<AnyModel> {
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    let ctx = || format!("cannot load model {}", path.display());
    if value.get("layers").is_some() {
        Ok(AnyModel::Flow(FlowModel::from_json(&text).with_context(ctx)?))
    } else if value.get("entries").is_some() {
        Ok(AnyModel::Conditional(ConditionalGmm::from_json(&text).with_context(ctx)?))
    } else if value.get("weights").is_some() {
        Ok(AnyModel::Supporting(GmmModel::from_json(&text).with_context(ctx)?))
    } else {
        bail!("{} is not a flow or mixture model", path.display())
    }
}

/// Embeddings given as a file, or as a directory holding `embeddings.bin`.
pub struct EmbeddingInput {
    pub embeddings: Matrix,
    pub dir: Option<PathBuf>,
}

impl EmbeddingInput {
    pub fn load(path: &Path) -> Result<Self> {
        let (file, dir) = if path.is_dir() {
            (path.join("embeddings.bin"), Some(path.to_path_buf()))
        } else {
            (path.to_path_buf(), None)
        };
        let embeddings = read_embeddings(&file).with_context(|| format!("cannot read embeddings {}", file.display()))?;
        Ok(Self { embeddings, dir })
    }

    /// A table next to the embeddings, if present.
    pub fn sibling(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name)).filter(|p| p.exists())
    }
}

/// Read a label table whose attribute columns may be a subset of the schema;
/// absent columns are ∅. Also returns the split column when present.
pub fn read_labels_lenient(path: &Path, schema: &LabelSchema) -> Result<(Vec<MultiLabel>, Option<Vec<Split>>)> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().with_context(|| format!("cannot read {}", path.display()))?.clone();
    let columns: Vec<Option<usize>> =
        schema.attributes().iter().map(|a| headers.iter().position(|h| h == a.name)).collect();
    let split_col = headers.iter().position(|h| h == "split");
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), line + 1))?;
        let mut y = MultiLabel::missing(schema.len());
        for (a, c) in columns.iter().enumerate() {
            if let Some(c) = c {
                let v = schema
                    .parse_value(a, rec.get(*c).unwrap_or(""))
                    .with_context(|| format!("{} row {}", path.display(), line + 1))?;
                y.set(a, v);
            }
        }
        labels.push(y);
        if let Some(c) = split_col {
            splits.push(Split::parse(rec.get(c).unwrap_or("")).with_context(|| format!("{} row {}", path.display(), line + 1))?);
        }
    }
    Ok((labels, split_col.map(|_| splits)))
}

pub fn check_rows(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(anyhow!("{what}: expected {expected} rows, found {got}"));
    }
    Ok(())
}

/// Parse `name=value,...` against bare condition names, for mixture baselines.
pub fn parse_condition_label(model: &ConditionalGmm, text: &str) -> Result<Vec<usize>> {
    let mut chosen: Vec<Option<String>> = vec![None; model.conditions().len()];
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part.split_once('=').ok_or_else(|| anyhow!("expected name=value in --label, got {part:?}"))?;
        let (name, value) = (name.trim(), value.trim());
        let i = model
            .conditions()
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| anyhow!("the mixture baseline has no condition {name:?}"))?;
        if value != "_" && !value.is_empty() {
            chosen[i] = Some(value.to_string());
        }
    }
    let names: Vec<&str> = chosen
        .iter()
        .zip(model.conditions())
        .map(|(v, c)| v.as_deref().ok_or_else(|| anyhow!("the mixture baseline needs a class for {}", c.name)))
        .collect::<Result<_>>()?;
    Ok(model.parse_tuple(&names)?)
}
