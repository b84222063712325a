//! Masked feed-forward conditioner (MADE) with packed autoregressive weights.
//!
//! Inputs are indexed by their position in the layer ordering. Hidden unit
//! degrees are assigned in ascending order, so every admissible connection set
//! is a prefix of the previous layer: a unit of degree `m` reads inputs
//! `0..=m`, a deeper unit of degree `m` reads the previous-layer units with
//! degree `<= m`, and output `p` reads last-layer units with degree `< p`.
//! Only those prefixes are stored, so masked weights do not exist at all.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::matrix::dot_acc;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HiddenLayer {
    pub degrees: Vec<usize>,
    /// Number of previous-layer entries read by each unit.
    pub fan_in: Vec<usize>,
    pub weight_offsets: Vec<usize>,
    pub bias_offset: usize,
}

impl HiddenLayer {
    pub fn width(&self) -> usize {
        self.degrees.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Head {
    pub weight_offsets: Vec<usize>,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MaskedNetwork {
    dim: usize,
    pub hidden: Vec<HiddenLayer>,
    /// Per output position: number of last-hidden-layer units it reads.
    pub out_fan_in: Vec<usize>,
    pub shift_head: Head,
    pub scale_head: Head,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass, for a batch of inputs. Every
/// buffer is row-major with one row per input.
#[derive(Debug, Clone, Default)]
pub(crate) struct NetCache {
    pub rows: usize,
    pub hidden: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
    pub raw_scale: Vec<f64>,
}

impl MaskedNetwork {
    pub fn new(dim: usize, hidden_sizes: &[usize]) -> Self {
        assert!(dim >= 1 && !hidden_sizes.is_empty());
        let max_degree = dim.saturating_sub(1);
        let mut offset = 0;
        let mut hidden: Vec<HiddenLayer> = Vec::with_capacity(hidden_sizes.len());
        for (l, &width) in hidden_sizes.iter().enumerate() {
            assert!(width >= 1);
            let degrees: Vec<usize> = (0..width).map(|j| j * max_degree / width).collect();
            let fan_in: Vec<usize> = match l {
                0 => degrees.iter().map(|&m| m + 1).collect(),
                _ => {
                    let prev = &hidden[l - 1].degrees;
                    degrees.iter().map(|&m| prev.partition_point(|&q| q <= m)).collect()
                }
            };
            let mut weight_offsets = Vec::with_capacity(width);
            for &f in &fan_in {
                weight_offsets.push(offset);
                offset += f;
            }
            let bias_offset = offset;
            offset += width;
            hidden.push(HiddenLayer { degrees, fan_in, weight_offsets, bias_offset });
        }
        let last = &hidden[hidden.len() - 1].degrees;
        let out_fan_in: Vec<usize> = (0..dim).map(|p| last.partition_point(|&q| q < p)).collect();
        let mut head = || {
            let mut weight_offsets = Vec::with_capacity(dim);
            for &f in &out_fan_in {
                weight_offsets.push(offset);
                offset += f;
            }
            let bias_offset = offset;
            offset += dim;
            Head { weight_offsets, bias_offset }
        };
        let shift_head = head();
        let scale_head = head();
        Self { dim, hidden, out_fan_in, shift_head, scale_head, params: vec![0.0; offset] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.hidden.iter().map(HiddenLayer::width).collect()
    }

    #[cfg(test)]
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Gaussian hidden weights scaled by `1/sqrt(fan_in)`; output heads scaled
    /// by `output_scale` (zero makes the conditioner emit exactly zero).
    pub fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R, output_scale: f64) {
        self.params.iter_mut().for_each(|p| *p = 0.0);
        for layer in &self.hidden {
            for (&off, &fan) in layer.weight_offsets.iter().zip(&layer.fan_in) {
                let sd = 1.0 / (fan as f64).sqrt();
                for w in &mut self.params[off..off + fan] {
                    let eps: f64 = rng.sample(StandardNormal);
                    *w = sd * eps;
                }
            }
        }
        if output_scale != 0.0 {
            for head in [&self.shift_head, &self.scale_head] {
                for (&off, &fan) in head.weight_offsets.iter().zip(&self.out_fan_in) {
                    let sd = output_scale / (fan.max(1) as f64).sqrt();
                    for w in &mut self.params[off..off + fan] {
                        let eps: f64 = rng.sample(StandardNormal);
                        *w = sd * eps;
                    }
                }
                for b in &mut self.params[head.bias_offset..head.bias_offset + self.dim] {
                    let eps: f64 = rng.sample(StandardNormal);
                    *b = 0.1 * output_scale * eps;
                }
            }
        }
    }

    #[inline]
    fn unit(&self, layer: usize, j: usize, prev: &[f64]) -> f64 {
        let h = &self.hidden[layer];
        let off = h.weight_offsets[j];
        let w = &self.params[off..off + h.fan_in[j]];
        dot_acc(self.params[h.bias_offset + j], w, prev).tanh()
    }

    #[inline]
    fn head_output(&self, head: &Head, p: usize, last: &[f64]) -> f64 {
        let off = head.weight_offsets[p];
        let w = &self.params[off..off + self.out_fan_in[p]];
        dot_acc(self.params[head.bias_offset + p], w, last)
    }

    /// Evaluate every output in one pass.
    pub fn forward(&self, u: &[f64], cache: &mut NetCache) {
        self.forward_batch(u, 1, cache);
    }

    /// Evaluate `rows` inputs stored row-major in `u`. Each output is computed
    /// with exactly the arithmetic of the single-input path.
    pub fn forward_batch(&self, u: &[f64], rows: usize, cache: &mut NetCache) {
        debug_assert_eq!(u.len(), rows * self.dim);
        cache.rows = rows;
        cache.hidden.resize(self.hidden.len(), Vec::new());
        for l in 0..self.hidden.len() {
            let width = self.hidden[l].width();
            let mut out = std::mem::take(&mut cache.hidden[l]);
            out.clear();
            out.resize(rows * width, 0.0);
            {
                let (prev, pw): (&[f64], usize) =
                    if l == 0 { (u, self.dim) } else { (&cache.hidden[l - 1], self.hidden[l - 1].width()) };
                for j in 0..width {
                    for b in 0..rows {
                        out[b * width + j] = self.unit(l, j, &prev[b * pw..(b + 1) * pw]);
                    }
                }
            }
            cache.hidden[l] = out;
        }
        let last = &cache.hidden[self.hidden.len() - 1];
        let lw = self.hidden[self.hidden.len() - 1].width();
        let d = self.dim;
        cache.shift.clear();
        cache.shift.resize(rows * d, 0.0);
        cache.raw_scale.clear();
        cache.raw_scale.resize(rows * d, 0.0);
        for p in 0..d {
            for b in 0..rows {
                let h = &last[b * lw..(b + 1) * lw];
                cache.shift[b * d + p] = self.head_output(&self.shift_head, p, h);
                cache.raw_scale[b * d + p] = self.head_output(&self.scale_head, p, h);
            }
        }
    }

    /// Sequentially recover the inputs from the outputs of an autoregressive
    /// transform. `solve(p, shift, raw_scale)` must return input `p`. Each
    /// hidden unit is evaluated once, as soon as all of its inputs are known,
    /// with the same arithmetic as [`forward`](Self::forward).
    pub fn invert_sequential(&self, mut solve: impl FnMut(usize, f64, f64) -> f64) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.dim);
        let mut acts: Vec<Vec<f64>> =
            self.hidden.iter().map(|h| Vec::with_capacity(h.width())).collect();
        for p in 0..self.dim {
            for l in 0..self.hidden.len() {
                let width = self.hidden[l].width();
                while acts[l].len() < width && self.hidden[l].degrees[acts[l].len()] < p {
                    let j = acts[l].len();
                    let v = if l == 0 { self.unit(0, j, &u) } else { self.unit(l, j, &acts[l - 1]) };
                    acts[l].push(v);
                }
            }
            let last = &acts[self.hidden.len() - 1];
            let shift = self.head_output(&self.shift_head, p, last);
            let raw = self.head_output(&self.scale_head, p, last);
            u.push(solve(p, shift, raw));
        }
        u
    }

    /// Accumulate parameter gradients into `grad` and return `∂L/∂u`, given
    /// `∂L/∂shift` and `∂L/∂raw_scale` at every output position. All buffers
    /// are row-major over the batch held in `cache`.
    pub fn backward(
        &self,
        u: &[f64],
        cache: &NetCache,
        d_shift: &[f64],
        d_raw: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let rows = cache.rows;
        let d = self.dim;
        let n_hidden = self.hidden.len();
        let last = &cache.hidden[n_hidden - 1];
        let lw = self.hidden[n_hidden - 1].width();
        let mut d_act = vec![0.0; rows * lw];
        for (head, d_out) in [(&self.shift_head, d_shift), (&self.scale_head, d_raw)] {
            for p in 0..d {
                let fan = self.out_fan_in[p];
                let off = head.weight_offsets[p];
                let w = &self.params[off..off + fan];
                let (gw, gb) = split_grad(grad, off, fan, head.bias_offset + p);
                for b in 0..rows {
                    let g = d_out[b * d + p];
                    if g == 0.0 {
                        continue;
                    }
                    *gb += g;
                    axpy(gw, g, &last[b * lw..b * lw + fan]);
                    axpy(&mut d_act[b * lw..b * lw + fan], g, w);
                }
            }
        }
        for l in (0..n_hidden).rev() {
            let layer = &self.hidden[l];
            let width = layer.width();
            let acts = &cache.hidden[l];
            let (prev, pw): (&[f64], usize) = if l == 0 { (u, d) } else { (&cache.hidden[l - 1], self.hidden[l - 1].width()) };
            let mut d_prev = vec![0.0; rows * pw];
            for j in 0..width {
                let fan = layer.fan_in[j];
                let off = layer.weight_offsets[j];
                let w = &self.params[off..off + fan];
                let (gw, gb) = split_grad(grad, off, fan, layer.bias_offset + j);
                for b in 0..rows {
                    let a = acts[b * width + j];
                    let d_pre = d_act[b * width + j] * (1.0 - a * a);
                    if d_pre == 0.0 {
                        continue;
                    }
                    *gb += d_pre;
                    axpy(gw, d_pre, &prev[b * pw..b * pw + fan]);
                    axpy(&mut d_prev[b * pw..b * pw + fan], d_pre, w);
                }
            }
            d_act = d_prev;
        }
        d_act
    }
}

/// Disjoint views of a weight row and a bias entry (biases follow weights).
#[inline]
fn split_grad(grad: &mut [f64], off: usize, fan: usize, bias: usize) -> (&mut [f64], &mut f64) {
    debug_assert!(bias >= off + fan);
    let (head, tail) = grad.split_at_mut(off + fan);
    (&mut head[off..], &mut tail[bias - off - fan])
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
