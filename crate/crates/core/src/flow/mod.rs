//! Masked affine autoregressive flow over embeddings with a partitioned
//! conditional base distribution.
//!
//! The forward direction maps data `e` to base `z` and is the fast, parallel
//! direction; the inverse is sequential along each layer's ordering.

mod adam;
mod made;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{argmax, AttributeKind, LabelSchema, LabelValue, MultiLabel, RangePolicy, SchemaDocument};
use crate::error::{check_dim, invalid, Error, Result};
use crate::matrix::Matrix;

pub use adam::AdamConfig;
pub use train::{
    pseudo_label, pseudo_label_batch, total_loss_and_grad, train, train_with_labeler, EpochStats, LabeledSet, PostHocLabeler,
    PriorMode, TrainConfig, TrainOutcome, Trainer,
};

use made::{MaskedNetwork, NetCache};

const FLOW_FORMAT_VERSION: u32 = 1;

pub const DEFAULT_LAYERS: usize = 5;
pub const DEFAULT_LOG_SCALE_BOUND: f64 = 5.0;
/// Rows evaluated together by batched passes.
pub(crate) const BATCH_ROWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_layers: usize,
    /// Hidden widths of each masked network; `None` means two layers of `max(2d, 64)`.
    pub hidden_sizes: Option<Vec<usize>>,
    pub log_scale_bound: f64,
    /// Scale of the random output-head initialisation. Zero starts every layer
    /// as the identity map.
    pub output_init_scale: f64,
    pub init_seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_layers: DEFAULT_LAYERS,
            hidden_sizes: None,
            log_scale_bound: DEFAULT_LOG_SCALE_BOUND,
            output_init_scale: 0.0,
            init_seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn hidden_for(&self, d: usize) -> Vec<usize> {
        self.hidden_sizes.clone().unwrap_or_else(|| vec![(2 * d).max(64); 2])
    }
}

/// One masked affine autoregressive transform:
/// `z_i = (e_i − m_i(e_<i)) · exp(−s_i(e_<i))` along `ordering`.
#[derive(Debug, Clone, PartialEq)]
pub struct MafLayer {
    ordering: Vec<usize>,
    net: MaskedNetwork,
    bound: f64,
}

/// Per-layer forward state for backpropagation.
#[derive(Debug, Default)]
struct LayerCache {
    /// Input in ordering positions.
    u: Vec<f64>,
    net: NetCache,
    scale: Vec<f64>,
    /// Output in ordering positions.
    out: Vec<f64>,
}

impl MafLayer {
    fn new(ordering: Vec<usize>, hidden: &[usize], bound: f64) -> Self {
        let net = MaskedNetwork::new(ordering.len(), hidden);
        Self { ordering, net, bound }
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.net.hidden_sizes()
    }

    pub fn params(&self) -> &[f64] {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }

    #[inline]
    fn clamp(&self, raw: f64) -> f64 {
        self.bound * (raw / self.bound).tanh()
    }

    /// Conditioner outputs `(m_i, s_i)` indexed by coordinate, after clamping.
    pub fn conditioner(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u: Vec<f64> = self.ordering.iter().map(|&c| x[c]).collect();
        let mut cache = NetCache::default();
        self.net.forward(&u, &mut cache);
        let d = u.len();
        let mut shift = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for (p, &c) in self.ordering.iter().enumerate() {
            shift[c] = cache.shift[p];
            scale[c] = self.clamp(cache.raw_scale[p]);
        }
        (shift, scale)
    }

    /// Transform `rows` inputs stored row-major in `x`; adds each row's
    /// `log|det J|` to `logdet`.
    fn forward_cached(&self, x: &[f64], rows: usize, logdet: &mut [f64], cache: &mut LayerCache) -> Vec<f64> {
        let d = self.ordering.len();
        cache.u.clear();
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            cache.u.extend(self.ordering.iter().map(|&c| xr[c]));
        }
        self.net.forward_batch(&cache.u, rows, &mut cache.net);
        cache.scale.clear();
        cache.out.clear();
        let mut y = vec![0.0; rows * d];
        for r in 0..rows {
            let mut ld = 0.0;
            for (p, &c) in self.ordering.iter().enumerate() {
                let k = r * d + p;
                let s = self.clamp(cache.net.raw_scale[k]);
                let v = (cache.u[k] - cache.net.shift[k]) * (-s).exp();
                cache.scale.push(s);
                cache.out.push(v);
                y[r * d + c] = v;
                ld -= s;
            }
            logdet[r] += ld;
        }
        y
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut ld = [0.0];
        let y = self.forward_cached(x, 1, &mut ld, &mut LayerCache::default());
        (y, ld[0])
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        let zp: Vec<f64> = self.ordering.iter().map(|&c| z[c]).collect();
        let u = self
            .net
            .invert_sequential(|p, shift, raw| zp[p] * self.clamp(raw).exp() + shift);
        let mut x = vec![0.0; z.len()];
        for (p, &c) in self.ordering.iter().enumerate() {
            x[c] = u[p];
        }
        x
    }

    /// Given `∂L/∂y` (row-major coordinates) and `∂L/∂logdet` per row,
    /// accumulate parameter gradients and return `∂L/∂x`.
    fn backward(&self, cache: &LayerCache, d_y: &[f64], d_logdet: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = self.ordering.len();
        let n = cache.u.len();
        let mut d_shift = vec![0.0; n];
        let mut d_raw = vec![0.0; n];
        let mut d_u = vec![0.0; n];
        for (r, &dl) in d_logdet.iter().enumerate() {
            for (p, &c) in self.ordering.iter().enumerate() {
                let k = r * d + p;
                let g = d_y[r * d + c];
                let inv = (-cache.scale[k]).exp();
                d_u[k] = g * inv;
                d_shift[k] = -g * inv;
                let d_s = -g * cache.out[k] - dl;
                let t = cache.scale[k] / self.bound;
                d_raw[k] = d_s * (1.0 - t * t);
            }
        }
        let d_u_net = self.net.backward(&cache.u, &cache.net, &d_shift, &d_raw, grad);
        let mut d_x = vec![0.0; n];
        for r in 0..d_logdet.len() {
            for (p, &c) in self.ordering.iter().enumerate() {
                d_x[r * d + c] = d_u[r * d + p] + d_u_net[r * d + p];
            }
        }
        d_x
    }
}

/// Attribute edit applied in base space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EditRequest {
    /// Overwrite the section with the mean for this label.
    Set(LabelValue),
    /// Add to every coordinate of a continuous section.
    Delta(f64),
}

impl EditRequest {
    /// Build from optional CLI-style inputs; exactly one must be present.
    pub fn from_parts(value: Option<LabelValue>, delta: Option<f64>) -> Result<Self> {
        match (value, delta) {
            (Some(_), Some(_)) => Err(invalid("edit takes either a new value or a delta, not both")),
            (None, None) => Err(invalid("edit needs a new value or a delta")),
            (Some(v), None) => Ok(EditRequest::Set(v)),
            (None, Some(d)) => Ok(EditRequest::Delta(d)),
        }
    }
}

/// Gradient buffers matching [`FlowModel`] parameters, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads(pub Vec<Vec<f64>>);

impl FlowGrads {
    pub fn zeros_like(model: &FlowModel) -> Self {
        Self(model.layers.iter().map(|l| vec![0.0; l.params().len()]).collect())
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn add(&mut self, other: &FlowGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    schema: LabelSchema,
    layers: Vec<MafLayer>,
}

impl FlowModel {
    pub fn new(schema: LabelSchema, config: &FlowConfig) -> Result<Self> {
        if config.n_layers == 0 {
            return Err(invalid("flow needs at least one layer"));
        }
        if !(config.log_scale_bound > 0.0) {
            return Err(invalid("log-scale bound must be > 0"));
        }
        let d = schema.dim();
        let hidden = config.hidden_for(d);
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(invalid("hidden sizes must be non-empty and positive"));
        }
        let canonical: Vec<usize> = (0..d).collect();
        let reversed: Vec<usize> = (0..d).rev().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let layers = (0..config.n_layers)
            .map(|k| {
                // Alternate orderings, ending on the canonical one.
                let ordering =
                    if (config.n_layers - 1 - k) % 2 == 0 { canonical.clone() } else { reversed.clone() };
                let mut layer = MafLayer::new(ordering, &hidden, config.log_scale_bound);
                layer.net.initialize(&mut rng, config.output_init_scale);
                layer
            })
            .collect();
        Ok(Self { schema, layers })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn dim(&self) -> usize {
        self.schema.dim()
    }

    pub fn layers(&self) -> &[MafLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MafLayer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.params().len()).sum()
    }

    fn check_input(&self, v: &[f64], what: &'static str) -> Result<()> {
        check_dim(self.dim(), v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    /// Map data to base space; returns `(z, log|det J|)`.
    pub fn forward(&self, e: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_input(e, "flow input")?;
        Ok(self.forward_unchecked(e))
    }

    fn forward_unchecked(&self, e: &[f64]) -> (Vec<f64>, f64) {
        let (z, ld) = self.forward_rows(e, 1);
        (z, ld[0])
    }

    /// Map every row of `e` to base space; returns `(z, log|det J|)` per row.
    /// Results are identical to calling [`forward`](Self::forward) row by row.
    pub fn forward_batch(&self, e: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        check_dim(self.dim(), e.cols())?;
        if e.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow input"));
        }
        let mut z = Matrix::zeros(e.rows(), self.dim());
        let mut logdet = Vec::with_capacity(e.rows());
        let step = BATCH_ROWS * self.dim();
        for (chunk, out) in e.as_slice().chunks(step).zip(z.as_mut_slice().chunks_mut(step)) {
            let (zc, ld) = self.forward_rows(chunk, chunk.len() / self.dim());
            out.copy_from_slice(&zc);
            logdet.extend(ld);
        }
        Ok((z, logdet))
    }

    pub(crate) fn forward_rows(&self, e: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = e.to_vec();
        let mut logdet = vec![0.0; rows];
        let mut cache = LayerCache::default();
        for layer in &self.layers {
            x = layer.forward_cached(&x, rows, &mut logdet, &mut cache);
        }
        (x, logdet)
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z, "flow base input")?;
        Ok(self.inverse_unchecked(z))
    }

    fn inverse_unchecked(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        for layer in self.layers.iter().rev() {
            x = layer.inverse(&x);
        }
        x
    }

    /// `log p(e | y) = log p(f(e) | y) + log|det J_f(e)|`.
    pub fn loglik(&self, e: &[f64], y: &MultiLabel) -> Result<f64> {
        self.check_input(e, "flow input")?;
        self.schema.validate_label(y, RangePolicy::Strict)?;
        let (z, logdet) = self.forward_unchecked(e);
        Ok(self.schema.loglik_grad(&z, y, None) + logdet)
    }

    /// Log-likelihoods of a batch of pairs, accumulating
    /// `scale · Σ ∂loglik/∂θ` into `grads`. Inputs must already be validated.
    pub(crate) fn loglik_accumulate(&self, items: &[(&[f64], &MultiLabel)], scale: f64, grads: &mut FlowGrads) -> Vec<f64> {
        let rows = items.len();
        let d = self.dim();
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        let mut x: Vec<f64> = Vec::with_capacity(rows * d);
        for (e, _) in items {
            x.extend_from_slice(e);
        }
        let mut logdet = vec![0.0; rows];
        for layer in &self.layers {
            let mut cache = LayerCache::default();
            x = layer.forward_cached(&x, rows, &mut logdet, &mut cache);
            caches.push(cache);
        }
        let mut g = vec![0.0; rows * d];
        let mut out = Vec::with_capacity(rows);
        for (r, (_, y)) in items.iter().enumerate() {
            let gr = &mut g[r * d..(r + 1) * d];
            out.push(self.schema.loglik_grad(&x[r * d..(r + 1) * d], y, Some(gr)) + logdet[r]);
            gr.iter_mut().for_each(|v| *v *= scale);
        }
        let d_logdet = vec![scale; rows];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&caches[l], &g, &d_logdet, &mut grads.0[l]);
        }
        out
    }

    /// Bayes posterior over the classes of a categorical attribute.
    pub fn classify(&self, e: &[f64], attr: usize) -> Result<Vec<f64>> {
        let (z, _) = self.forward(e)?;
        self.schema.classify(&z, attr)
    }

    pub fn predict_class(&self, e: &[f64], attr: usize) -> Result<usize> {
        Ok(argmax(&self.classify(e, attr)?))
    }

    pub fn read_continuous(&self, e: &[f64], attr: usize) -> Result<f64> {
        let (z, _) = self.forward(e)?;
        self.schema.read_continuous(&z, attr)
    }

    /// Draw `n` embeddings from `p(e | y)`.
    pub fn sample(&self, y: &MultiLabel, n: usize, seed: u64) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(y, n, &mut rng, RangePolicy::Strict)
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        y: &MultiLabel,
        n: usize,
        rng: &mut R,
        policy: RangePolicy,
    ) -> Result<Matrix> {
        if n == 0 {
            return Err(invalid("sample count must be >= 1"));
        }
        let mut out = Matrix::zeros(n, self.dim());
        for i in 0..n {
            let z = self.schema.sample_with(y, rng, policy)?;
            out.row_mut(i).copy_from_slice(&self.inverse_unchecked(&z));
        }
        Ok(out)
    }

    /// Replace one attribute section of `forward(e).z` and map back; every
    /// other coordinate, including the residual, is left untouched.
    pub fn edit(&self, e: &[f64], attr: usize, request: EditRequest) -> Result<Vec<f64>> {
        let (mut z, _) = self.forward(e)?;
        let spec = self.schema.attribute(attr)?;
        let range = self.schema.section(attr);
        match (request, &spec.kind) {
            (EditRequest::Set(LabelValue::Class(c)), AttributeKind::Categorical { .. }) => {
                let mu = self.schema.class_mean(attr, c)?;
                z[range].iter_mut().for_each(|v| *v = mu);
            }
            (EditRequest::Set(LabelValue::Value(x)), AttributeKind::Continuous { .. }) => {
                if !x.is_finite() {
                    return Err(Error::InvalidLabel(format!("{} edit value is not finite", spec.name)));
                }
                z[range].iter_mut().for_each(|v| *v = x);
            }
            (EditRequest::Delta(dv), AttributeKind::Continuous { .. }) => {
                if !dv.is_finite() {
                    return Err(Error::InvalidLabel("edit delta is not finite".into()));
                }
                z[range].iter_mut().for_each(|v| *v += dv);
            }
            (EditRequest::Set(LabelValue::Missing), _) => {
                return Err(Error::InvalidLabel(format!("cannot edit {} to ∅", spec.name)));
            }
            (EditRequest::Delta(_), AttributeKind::Categorical { .. }) => {
                return Err(Error::InvalidLabel(format!(
                    "{} is categorical; a delta edit needs a continuous attribute",
                    spec.name
                )));
            }
            _ => {
                return Err(Error::InvalidLabel(format!("edit value does not match attribute {}", spec.name)))
            }
        }
        Ok(self.inverse_unchecked(&z))
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let net = &l.net;
                let p = &net.params;
                let hidden = net
                    .hidden
                    .iter()
                    .map(|h| TensorDocument {
                        weights: h
                            .weight_offsets
                            .iter()
                            .zip(&h.fan_in)
                            .map(|(&o, &f)| p[o..o + f].to_vec())
                            .collect(),
                        bias: p[h.bias_offset..h.bias_offset + h.width()].to_vec(),
                    })
                    .collect();
                let head = |head: &made::Head| TensorDocument {
                    weights: head
                        .weight_offsets
                        .iter()
                        .zip(&net.out_fan_in)
                        .map(|(&o, &f)| p[o..o + f].to_vec())
                        .collect(),
                    bias: p[head.bias_offset..head.bias_offset + net.dim()].to_vec(),
                };
                LayerDocument {
                    ordering: l.ordering.clone(),
                    hidden_sizes: net.hidden_sizes(),
                    log_scale_bound: l.bound,
                    hidden,
                    shift: head(&net.shift_head),
                    log_scale: head(&net.scale_head),
                }
            })
            .collect();
        let doc = FlowDocument {
            version: FLOW_FORMAT_VERSION,
            d: self.dim(),
            schema: self.schema.to_document(),
            layers,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FlowDocument = serde_json::from_str(text)?;
        if doc.version != FLOW_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported flow version {}", doc.version)));
        }
        let schema = LabelSchema::from_document(doc.schema)?;
        check_dim(doc.d, schema.dim())?;
        let d = schema.dim();
        if doc.layers.is_empty() {
            return Err(Error::Format("flow has no layers".into()));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (idx, ld) in doc.layers.into_iter().enumerate() {
            let bad = |what: &str| Error::Format(format!("layer {idx}: {what}"));
            let mut sorted = ld.ordering.clone();
            sorted.sort_unstable();
            if sorted != (0..d).collect::<Vec<_>>() {
                return Err(bad("ordering is not a permutation of 0..d"));
            }
            if ld.hidden_sizes.is_empty() || ld.hidden_sizes.contains(&0) || ld.hidden.len() != ld.hidden_sizes.len() {
                return Err(bad("hidden sizes"));
            }
            if !(ld.log_scale_bound > 0.0) {
                return Err(bad("log-scale bound"));
            }
            let mut layer = MafLayer::new(ld.ordering, &ld.hidden_sizes, ld.log_scale_bound);
            let net = &mut layer.net;
            let mut fill = |t: &TensorDocument, offsets: &[usize], fans: &[usize], bias_off: usize, width: usize| -> Result<()> {
                if t.weights.len() != offsets.len() || t.bias.len() != width {
                    return Err(bad("tensor shape"));
                }
                for ((row, &o), &f) in t.weights.iter().zip(offsets).zip(fans) {
                    if row.len() != f {
                        return Err(bad("tensor row length"));
                    }
                    net.params[o..o + f].copy_from_slice(row);
                }
                net.params[bias_off..bias_off + width].copy_from_slice(&t.bias);
                Ok(())
            };
            let hidden_meta: Vec<_> = net
                .hidden
                .iter()
                .map(|h| (h.weight_offsets.clone(), h.fan_in.clone(), h.bias_offset, h.width()))
                .collect();
            for (t, (offs, fans, b, w)) in ld.hidden.iter().zip(&hidden_meta) {
                fill(t, offs, fans, *b, *w)?;
            }
            let out_fan = net.out_fan_in.clone();
            let (so, sb) = (net.shift_head.weight_offsets.clone(), net.shift_head.bias_offset);
            let (lo, lb) = (net.scale_head.weight_offsets.clone(), net.scale_head.bias_offset);
            fill(&ld.shift, &so, &out_fan, sb, d)?;
            fill(&ld.log_scale, &lo, &out_fan, lb, d)?;
            if layer.net.params.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("flow parameters"));
            }
            layers.push(layer);
        }
        Ok(Self { schema, layers })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDocument {
    /// Row-major, one row per output unit holding only its admissible inputs.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerDocument {
    ordering: Vec<usize>,
    hidden_sizes: Vec<usize>,
    log_scale_bound: f64,
    hidden: Vec<TensorDocument>,
    shift: TensorDocument,
    log_scale: TensorDocument,
}

#[derive(Serialize, Deserialize)]
struct FlowDocument {
    version: u32,
    d: usize,
    schema: SchemaDocument,
    layers: Vec<LayerDocument>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::AttributeSpec;

    pub(crate) fn random_model(d: usize, layers: usize, hidden: Vec<usize>, scale: f64, seed: u64) -> FlowModel {
        let schema = LabelSchema::new(
            vec![
                AttributeSpec::categorical("g", &["F", "M"], 6.0),
                AttributeSpec::continuous("snr", 25.0, 55.0),
            ],
            d - 2,
        )
        .unwrap();
        FlowModel::new(
            schema,
            &FlowConfig {
                n_layers: layers,
                hidden_sizes: Some(hidden),
                output_init_scale: scale,
                init_seed: seed,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn numeric_log_abs_det(model: &FlowModel, e: &[f64]) -> f64 {
        let d = e.len();
        let h = 1e-6;
        let mut jac = vec![vec![0.0; d]; d];
        for k in 0..d {
            let mut a = e.to_vec();
            let mut b = e.to_vec();
            a[k] += h;
            b[k] -= h;
            let za = model.forward(&a).unwrap().0;
            let zb = model.forward(&b).unwrap().0;
            for i in 0..d {
                jac[i][k] = (za[i] - zb[i]) / (2.0 * h);
            }
        }
        // Partial-pivot LU for log|det|.
        let mut logdet = 0.0;
        for c in 0..d {
            let piv = (c..d).max_by(|&i, &j| jac[i][c].abs().total_cmp(&jac[j][c].abs())).unwrap();
            jac.swap(c, piv);
            let p = jac[c][c];
            logdet += p.abs().ln();
            for r in c + 1..d {
                let f = jac[r][c] / p;
                for k in c..d {
                    jac[r][k] -= f * jac[c][k];
                }
            }
        }
        logdet
    }

    #[test]
    fn identity_initialisation() {
        let model = random_model(6, 3, vec![16, 16], 0.0, 1);
        let e = [0.3, -1.2, 40.0, 0.5, 2.0, -0.7];
        let (z, logdet) = model.forward(&e).unwrap();
        assert_eq!(z, e.to_vec());
        assert_eq!(logdet, 0.0);
        assert_eq!(model.inverse(&e).unwrap(), e.to_vec());
        let y = MultiLabel(vec![LabelValue::Class(1), LabelValue::Missing]);
        assert_eq!(model.loglik(&e, &y).unwrap(), model.schema().log_likelihood(&e, &y).unwrap());
    }

    #[test]
    fn single_layer_closed_form_affine() {
        let schema = LabelSchema::new(vec![], 1).unwrap();
        let mut model = FlowModel::new(
            schema,
            &FlowConfig { n_layers: 1, hidden_sizes: Some(vec![4]), ..Default::default() },
        )
        .unwrap();
        // d = 1: the conditioner is just its output biases.
        let net = &mut model.layers[0].net;
        let (sb, lb) = (net.shift_head.bias_offset, net.scale_head.bias_offset);
        net.params[sb] = 1.5;
        net.params[lb] = 0.4;
        let s_hat = 5.0 * (0.4f64 / 5.0).tanh();
        let (z, logdet) = model.forward(&[3.0]).unwrap();
        assert!((z[0] - (3.0 - 1.5) * (-s_hat).exp()).abs() < 1e-15);
        assert!((logdet + s_hat).abs() < 1e-15);
    }

    #[test]
    fn logdet_matches_numeric_jacobian() {
        for (d, seed) in [(4usize, 1u64), (6, 2), (8, 3)] {
            let model = random_model(d, 5, vec![32, 32], 0.5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            for _ in 0..5 {
                let e: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let (_, logdet) = model.forward(&e).unwrap();
                let numeric = numeric_log_abs_det(&model, &e);
                let rel = (logdet - numeric).abs() / logdet.abs().max(1.0);
                assert!(rel < 1e-5, "d={d}: {logdet} vs {numeric}");
            }
        }
    }

    #[test]
    fn round_trip_both_directions() {
        let model = random_model(16, 5, vec![32, 32], 0.5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let e: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let back = model.inverse(&model.forward(&e).unwrap().0).unwrap();
            let err = e.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "err {err}");
            let fwd = model.forward(&model.inverse(&e).unwrap()).unwrap().0;
            let err = e.iter().zip(&fwd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "err {err}");
        }
    }

    #[test]
    fn batch_forward_matches_rows_bitwise() {
        let model = random_model(9, 3, vec![20, 12], 0.7, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..150).map(|_| (0..9).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect()).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let (z, ld) = model.forward_batch(&m).unwrap();
        for (i, e) in rows.iter().enumerate() {
            let (zi, li) = model.forward(e).unwrap();
            assert_eq!(z.row(i), &zi[..]);
            assert_eq!(ld[i], li);
        }
        let mut bad = m.clone();
        bad.row_mut(70)[3] = f64::NAN;
        assert!(model.forward_batch(&bad).is_err());
    }

    #[test]
    fn layer_mask_property() {
        let model = random_model(7, 4, vec![20, 20], 1.0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for layer in model.layers() {
            let x: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
            let (m0, s0) = layer.conditioner(&x);
            for (pos, &k) in layer.ordering().iter().enumerate() {
                let mut probe = x.clone();
                probe[k] -= 2.5;
                let (m1, s1) = layer.conditioner(&probe);
                for &i in &layer.ordering()[..=pos] {
                    assert_eq!(m0[i], m1[i]);
                    assert_eq!(s0[i], s1[i]);
                }
            }
            assert!(s0.iter().all(|s| s.abs() <= DEFAULT_LOG_SCALE_BOUND));
        }
    }

    #[test]
    fn orderings_alternate_and_end_canonical() {
        let model = random_model(5, 5, vec![8], 0.0, 0);
        let canonical: Vec<usize> = (0..5).collect();
        let reversed: Vec<usize> = (0..5).rev().collect();
        let orders: Vec<&[usize]> = model.layers().iter().map(|l| l.ordering()).collect();
        assert_eq!(orders[4], &canonical[..]);
        assert_eq!(orders[3], &reversed[..]);
        assert_eq!(orders[0], &canonical[..]);
    }

    #[test]
    fn marginal_consistency_under_flow() {
        let model = random_model(6, 3, vec![16, 16], 0.5, 8);
        let prior = [0.5, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let e: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 6.0).collect();
            let marg = model.loglik(&e, &MultiLabel(vec![LabelValue::Missing, LabelValue::Value(30.0)])).unwrap();
            let brute: f64 = (0..2)
                .map(|j| {
                    prior[j]
                        * model
                            .loglik(&e, &MultiLabel(vec![LabelValue::Class(j), LabelValue::Value(30.0)]))
                            .unwrap()
                            .exp()
                })
                .sum();
            assert!((marg.exp() - brute).abs() <= 1e-10 * brute, "{} vs {brute}", marg.exp());
        }
    }

    #[test]
    fn loglik_total_on_random_inputs() {
        let model = random_model(5, 3, vec![16], 0.5, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = MultiLabel::missing(2);
        for _ in 0..10_000 {
            let e: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 200.0 - 100.0).collect();
            assert!(model.loglik(&e, &y).unwrap().is_finite());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = random_model(4, 2, vec![8], 0.0, 0);
        assert!(model.forward(&[0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(model.inverse(&[0.0, f64::INFINITY, 0.0, 0.0]).is_err());
        assert!(model.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn edit_semantics() {
        let model = random_model(6, 3, vec![16], 0.5, 11);
        let e = [0.2, 0.1, 35.0, -0.4, 0.9, 1.3];
        let noop = model.edit(&e, 1, EditRequest::Delta(0.0)).unwrap();
        assert!(e.iter().zip(&noop).all(|(a, b)| (a - b).abs() < 1e-8));
        let current = model.read_continuous(&e, 1).unwrap();
        let same = model.edit(&e, 1, EditRequest::Set(LabelValue::Value(current))).unwrap();
        assert!(e.iter().zip(&same).all(|(a, b)| (a - b).abs() < 1e-8));

        let (z0, _) = model.forward(&e).unwrap();
        let edited = model.edit(&e, 1, EditRequest::Delta(15.0)).unwrap();
        let (z1, _) = model.forward(&edited).unwrap();
        assert!((z1[1] - z0[1] - 15.0).abs() < 1e-8);
        for k in [0, 2, 3, 4, 5] {
            assert!((z1[k] - z0[k]).abs() < 1e-8);
        }
        let flipped = model.edit(&e, 0, EditRequest::Set(LabelValue::Class(1))).unwrap();
        assert!((model.forward(&flipped).unwrap().0[0] - 6.0).abs() < 1e-8);
        assert!(model.edit(&e, 0, EditRequest::Delta(1.0)).is_err());
        assert!(model.edit(&e, 0, EditRequest::Set(LabelValue::Class(5))).is_err());
        assert!(model.edit(&e, 1, EditRequest::Set(LabelValue::Class(0))).is_err());
        assert!(EditRequest::from_parts(Some(LabelValue::Value(1.0)), Some(2.0)).is_err());
        assert!(EditRequest::from_parts(None, None).is_err());
    }

    #[test]
    fn identity_sampling_matches_base() {
        let model = random_model(4, 2, vec![8], 0.0, 0);
        let y = MultiLabel(vec![LabelValue::Class(1), LabelValue::Value(40.0)]);
        let s = model.sample(&y, 10_000, 3).unwrap();
        let means = s.column_means();
        for (m, t) in means.iter().zip([6.0, 40.0, 0.0, 0.0]) {
            assert!((m - t).abs() < 0.05, "{means:?}");
        }
        let var: f64 = s.iter_rows().map(|r| (r[0] - means[0]).powi(2)).sum::<f64>() / 10_000.0;
        assert!((var - 1.0).abs() < 0.05);
        assert_eq!(s, model.sample(&y, 10_000, 3).unwrap());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let model = random_model(6, 3, vec![12, 10], 0.7, 12);
        let text = model.to_json().unwrap();
        let back = FlowModel::from_json(&text).unwrap();
        assert_eq!(back, model);
        let e = [0.1, 0.2, 30.0, 0.4, 0.5, 0.6];
        assert_eq!(back.forward(&e).unwrap(), model.forward(&e).unwrap());
        assert!(FlowModel::from_json(&text.replace("\"version\":1", "\"version\":9")).is_err());
    }
}
