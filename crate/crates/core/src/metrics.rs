//! Embedding-space evaluation statistics.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::matrix::{dot, Matrix};

/// `1 − cos(a, b)`, clamped to `[0, 2]`.
pub fn cos_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (dot(a, a), dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine distance of a zero vector"));
    }
    Ok((1.0 - dot(a, b) / (na * nb).sqrt()).clamp(0.0, 2.0))
}

/// Rows scaled to unit norm; errors on zero or non-finite rows.
fn normalized(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = dot(row, row).sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite("embedding"));
        }
        if n == 0.0 {
            return Err(invalid(format!("row {i} is a zero vector")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

fn unit_cos_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).clamp(0.0, 2.0)
}

/// Per-row nearest-neighbour cosine distances from `a` into `b`.
pub fn nn_distances(a: &Matrix, b: &Matrix, exclude_self: bool) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("nearest-neighbour sets"));
    }
    check_dim(a.cols(), b.cols())?;
    if exclude_self {
        if a != b {
            return Err(invalid("exclude_self requires both sets to be the same"));
        }
        if a.rows() < 2 {
            return Err(invalid("exclude_self needs at least two points"));
        }
    }
    let ua = normalized(a)?;
    let ub = if exclude_self { ua.clone() } else { normalized(b)? };
    Ok(ua
        .iter_rows()
        .enumerate()
        .map(|(i, x)| {
            ub.iter_rows()
                .enumerate()
                .filter(|&(j, _)| !(exclude_self && i == j))
                .map(|(_, y)| unit_cos_distance(x, y))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Mean over `a` of the cosine distance to the nearest row of `b`.
pub fn nn_distance(a: &Matrix, b: &Matrix, exclude_self: bool) -> Result<f64> {
    let d = nn_distances(a, b, exclude_self)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub s2s: f64,
    pub s2g: f64,
    pub g2g: f64,
    /// Mean cosine distance between items and their reconstructions; only
    /// available when a reconstruction map exists, and an approximation.
    pub s2t_s: Option<f64>,
}

impl DistanceReport {
    pub fn compute(real: &Matrix, generated: &Matrix, reconstruction: Option<&Matrix>) -> Result<Self> {
        let s2t_s = match reconstruction {
            Some(r) => {
                check_dim(real.rows(), r.rows())?;
                check_dim(real.cols(), r.cols())?;
                let total: f64 = real
                    .iter_rows()
                    .zip(r.iter_rows())
                    .map(|(a, b)| cos_distance(a, b))
                    .sum::<Result<f64>>()?;
                Some(total / real.rows() as f64)
            }
            None => None,
        };
        Ok(Self {
            s2s: nn_distance(real, real, true)?,
            s2g: nn_distance(real, generated, false)?,
            g2g: nn_distance(generated, generated, true)?,
            s2t_s,
        })
    }

    /// `(metric, value)` rows; an unavailable value is `None`.
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![("s2s", Some(self.s2s)), ("s2g", Some(self.s2g)), ("g2g", Some(self.g2g)), ("s2t_s", self.s2t_s)]
    }
}

/// Greedy lower bound on the clique number of the graph joining points whose
/// cosine distance is at least `threshold`.
pub fn clique_number(points: &Matrix, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(invalid("clique threshold must be > 0"));
    }
    if points.is_empty() {
        return Ok(0);
    }
    let adj = distance_graph(points, threshold)?;
    Ok(greedy_clique(&adj).len())
}

/// Adjacency lists of the threshold graph.
pub fn distance_graph(points: &Matrix, threshold: f64) -> Result<Vec<Vec<bool>>> {
    let u = normalized(points)?;
    let n = u.rows();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let e = unit_cos_distance(u.row(i), u.row(j)) >= threshold;
            adj[i][j] = e;
            adj[j][i] = e;
        }
    }
    Ok(adj)
}

/// Repeatedly take the candidate with the most neighbours among the remaining
/// candidates (lowest index on ties) and keep only its neighbours.
pub fn greedy_clique(adj: &[Vec<bool>]) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..adj.len()).collect();
    let mut clique = Vec::new();
    while !candidates.is_empty() {
        let mut best = candidates[0];
        let mut best_deg = 0;
        for (pos, &v) in candidates.iter().enumerate() {
            let deg = candidates.iter().filter(|&&w| adj[v][w]).count();
            if pos == 0 || deg > best_deg {
                best = v;
                best_deg = deg;
            }
        }
        clique.push(best);
        candidates.retain(|&w| adj[best][w]);
    }
    clique
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_dim(xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(invalid("pearson r needs at least two pairs"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("pearson r of a constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn attribute_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_dim(truth.len(), predicted.len())?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("accuracy inputs"));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Flat JSON object of named metrics; `None` becomes `null`.
pub fn metrics_json(rows: &[(String, Option<f64>)]) -> Result<String> {
    let map: serde_json::Map<String, serde_json::Value> = rows
        .iter()
        .map(|(k, v)| (k.clone(), v.map_or(serde_json::Value::Null, serde_json::Value::from)))
        .collect();
    Ok(serde_json::to_string_pretty(&serde_json::Value::Object(map))?)
}

/// `metric,value` CSV; `None` becomes an empty cell.
pub fn metrics_csv(rows: &[(String, Option<f64>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k.as_str(), &v.map(|x| x.to_string()).unwrap_or_default()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
