//! The slice-set selector network and its training loop.
//!
//! Per slice: three conv blocks `1 -> 32 -> 64 -> 128` (two 3x3 convs with
//! ReLU each, 2x2 max-pool after the first two blocks, mask pooled
//! alongside), a 1x1 scorer and masked spatial attention give `z` (128).
//! Side statistics `xi = (ln l, ln(range + 1e-6), ln(iqr + 1e-6))` are
//! embedded linearly to 16 and appended. Slices are pooled with a softmax
//! over a shared linear scorer, `psi_d(ln d)` (1) is appended, and after
//! dropout two heads `145 -> 128 -> |A|` give regression outputs and
//! catastrophe logits.
//!
//! All trainable tensors live in one flat vector described by a named
//! layout; gradients, optimiser moments and checkpoints share that layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    self, adam_step, bce_with_logits, conv3x3_backward, conv3x3_forward, dropout_mask, gemm,
    linear_backward, linear_forward, masked_softmax_sum, masked_softmax_sum_backward,
    maxpool2x2_backward, maxpool2x2_forward, maxpool2x2_mask, relu_backward_inplace, relu_inplace,
    smooth_l1, AdamConfig, Attention, ConvCache, Extent, OptimizerState,
};
use crate::error::{Error, Result};
use crate::probing::{Slice, SliceSet};
use crate::seed::{mix, open01, stream, tag};

pub const VISUAL_DIM: usize = 128;
pub const SIDE_DIM: usize = 16;
pub const DIMENSION_DIM: usize = 1;
pub const HIDDEN_DIM: usize = 128;
pub const SIDE_EPSILON: f64 = 1e-6;
pub const DROPOUT_RATE: f64 = 0.2;

const CONV_CHANNELS: [(usize, usize); 6] = [(1, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128)];

/// Components that can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_side_conditioning: bool,
    pub no_dimension_conditioning: bool,
    pub no_catastrophe_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_algorithms: usize,
    pub ablation: Ablation,
}

impl Architecture {
    pub fn new(n_algorithms: usize) -> Self {
        Self {
            n_algorithms,
            ablation: Ablation::default(),
        }
    }

    /// Width of a conditioned slice embedding.
    pub fn conditioned_dim(&self) -> usize {
        VISUAL_DIM + if self.ablation.no_side_conditioning { 0 } else { SIDE_DIM }
    }

    /// Width of the instance representation `Z`.
    pub fn representation_dim(&self) -> usize {
        self.conditioned_dim() + if self.ablation.no_dimension_conditioning { 0 } else { DIMENSION_DIM }
    }

    /// Named tensor shapes in storage order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            specs.push(ParamSpec { name, shape, offset });
            offset += len;
        };
        for (i, (cin, cout)) in CONV_CHANNELS.iter().enumerate() {
            let name = format!("conv{}{}", i / 2 + 1, if i % 2 == 0 { 'a' } else { 'b' });
            push(format!("{name}.weight"), vec![*cout, *cin, 3, 3]);
            push(format!("{name}.bias"), vec![*cout]);
        }
        push("spatial_scorer.weight".into(), vec![1, VISUAL_DIM]);
        push("spatial_scorer.bias".into(), vec![1]);
        if !self.ablation.no_side_conditioning {
            push("side_embed.weight".into(), vec![SIDE_DIM, 3]);
            push("side_embed.bias".into(), vec![SIDE_DIM]);
        }
        push("slice_scorer.weight".into(), vec![1, self.conditioned_dim()]);
        push("slice_scorer.bias".into(), vec![1]);
        if !self.ablation.no_dimension_conditioning {
            push("dimension_embed.weight".into(), vec![DIMENSION_DIM, 1]);
            push("dimension_embed.bias".into(), vec![DIMENSION_DIM]);
        }
        let heads: &[&str] = if self.ablation.no_catastrophe_head {
            &["regression"]
        } else {
            &["regression", "catastrophe"]
        };
        for head in heads {
            push(format!("{head}.hidden.weight"), vec![HIDDEN_DIM, self.representation_dim()]);
            push(format!("{head}.hidden.bias"), vec![HIDDEN_DIM]);
            push(format!("{head}.out.weight"), vec![self.n_algorithms, HIDDEN_DIM]);
            push(format!("{head}.out.bias"), vec![self.n_algorithms]);
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(ParamSpec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
    fn fan_in(&self) -> usize {
        self.shape.iter().skip(1).product::<usize>().max(1)
    }
}

#[derive(Debug, Clone)]
struct Affine {
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Debug, Clone)]
struct Head {
    hidden: Affine,
    out: Affine,
}

#[derive(Debug, Clone)]
struct Slots {
    conv: Vec<Affine>,
    spatial: Affine,
    side: Option<Affine>,
    slice: Affine,
    dimension: Option<Affine>,
    regression: Head,
    catastrophe: Option<Head>,
}

impl Slots {
    fn new(layout: &[ParamSpec]) -> Self {
        let find = |name: &str| layout.iter().find(|s| s.name == name).map(ParamSpec::range);
        let affine = |prefix: &str| {
            Some(Affine {
                w: find(&format!("{prefix}.weight"))?,
                b: find(&format!("{prefix}.bias"))?,
            })
        };
        let head = |prefix: &str| {
            Some(Head {
                hidden: affine(&format!("{prefix}.hidden"))?,
                out: affine(&format!("{prefix}.out"))?,
            })
        };
        let conv = (0..CONV_CHANNELS.len())
            .map(|i| {
                affine(&format!("conv{}{}", i / 2 + 1, if i % 2 == 0 { 'a' } else { 'b' }))
                    .expect("conv layer in layout")
            })
            .collect();
        Self {
            conv,
            spatial: affine("spatial_scorer").expect("spatial scorer in layout"),
            side: affine("side_embed"),
            slice: affine("slice_scorer").expect("slice scorer in layout"),
            dimension: affine("dimension_embed"),
            regression: head("regression").expect("regression head in layout"),
            catastrophe: head("catastrophe"),
        }
    }
}

/// Trainable parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub data: Vec<f64>,
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation with an open-interval
/// draw, so every weight satisfies `|w| < 1`.
pub fn init_parameters(n_algorithms: usize, seed: u64) -> Result<ModelParams> {
    ModelParams::init(Architecture::new(n_algorithms), seed)
}

/// Side statistics fed to the slice conditioner.
pub fn side_features(scale: f64, range: f64, iqr: f64) -> [f64; 3] {
    [scale.ln(), (range + SIDE_EPSILON).ln(), (iqr + SIDE_EPSILON).ln()]
}

/// Output of one forward pass over a batch of slice sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub regression: Vec<f64>,
    pub catastrophe_logits: Option<Vec<f64>>,
}

struct Encoded {
    /// Post-ReLU activations after each conv (CNHW).
    acts: Vec<Vec<f64>>,
    conv_caches: Vec<ConvCache>,
    pool_args: [Vec<usize>; 2],
    pool_inputs: [usize; 2],
    cells: usize,
    attention: Vec<Attention>,
    /// `N x 128`.
    z: Vec<f64>,
}

struct Cache {
    batch: usize,
    slices: usize,
    offsets: Vec<usize>,
    encoded: Encoded,
    xi: Vec<f64>,
    conditioned: Vec<f64>,
    pool_weights: Vec<f64>,
    log_dims: Vec<f64>,
    /// Representation after dropout, `B x R`.
    z_dropped: Vec<f64>,
    dropout: Option<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        if architecture.n_algorithms < 2 {
            return Err(Error::Config(format!(
                "a portfolio needs at least 2 algorithms, got {}",
                architecture.n_algorithms
            )));
        }
        let layout = architecture.layout();
        let total = layout.iter().map(ParamSpec::len).sum();
        let mut data = vec![0.0; total];
        let mut rng = stream(mix(&[tag::INIT, seed]));
        for spec in &layout {
            let fan_in = if spec.shape.len() == 1 {
                // Biases share the fan-in of the weight declared just before them.
                layout
                    .iter()
                    .find(|s| s.offset + s.len() == spec.offset)
                    .map_or(1, ParamSpec::fan_in)
            } else {
                spec.fan_in()
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut data[spec.range()] {
                *v = bound * (2.0 * open01(&mut rng) - 1.0);
            }
        }
        Ok(Self { architecture, data })
    }

    pub fn from_data(architecture: Architecture, data: Vec<f64>) -> Result<Self> {
        let expected = architecture.parameter_count();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, architecture needs {expected}",
                data.len()
            )));
        }
        Ok(Self { architecture, data })
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        self.architecture.layout()
    }

    pub fn parameter_count(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    fn slots(&self) -> Slots {
        Slots::new(&self.layout())
    }

    /// Slice embedding `z` for one value map and mask.
    pub fn encode_slice(&self, values: &[f64], mask: &[bool], resolution: usize) -> Result<Vec<f64>> {
        let slice = Slice {
            resolution,
            values: values.to_vec(),
            mask: mask.to_vec(),
            scale: 1.0,
            range: 0.0,
            iqr: 0.0,
        };
        let enc = self.encode(&self.slots(), &[&slice])?;
        Ok(enc.z)
    }

    /// `[z | psi_xi(xi)]`, or `z` alone when side conditioning is ablated.
    pub fn condition_slice(&self, z: &[f64], scale: f64, range: f64, iqr: f64) -> Result<Vec<f64>> {
        if z.len() != VISUAL_DIM {
            return Err(Error::Shape(format!("slice embedding must have {VISUAL_DIM} entries")));
        }
        let slots = self.slots();
        let mut out = z.to_vec();
        if let Some(side) = &slots.side {
            let xi = side_features(scale, range, iqr);
            out.extend(linear_forward(&xi, 1, &self.data[side.w.clone()], &self.data[side.b.clone()])?);
        }
        Ok(out)
    }

    /// Attention pooling over conditioned slice embeddings plus the
    /// dimension embedding; returns `Z`.
    pub fn aggregate(&self, conditioned: &[Vec<f64>], dimension: usize) -> Result<Vec<f64>> {
        let width = self.architecture.conditioned_dim();
        if conditioned.is_empty() || conditioned.iter().any(|z| z.len() != width) {
            return Err(Error::Shape(format!(
                "aggregate needs k >= 1 embeddings of width {width}"
            )));
        }
        let slots = self.slots();
        let flat: Vec<f64> = conditioned.concat();
        let (pooled, _) = self.pool_slices(&slots, &flat, &[0, conditioned.len()]);
        let mut z = pooled;
        if let Some(dim) = &slots.dimension {
            z.push(self.data[dim.w.start] * (dimension as f64).ln() + self.data[dim.b.start]);
        }
        Ok(z)
    }

    /// Head outputs for one representation (dropout inactive).
    pub fn predict(&self, representation: &[f64]) -> Result<Prediction> {
        if representation.len() != self.architecture.representation_dim() {
            return Err(Error::Shape(format!(
                "representation must have {} entries",
                self.architecture.representation_dim()
            )));
        }
        let slots = self.slots();
        let (regression, _) = self.head(&slots.regression, representation, 1)?;
        let catastrophe_logits = match &slots.catastrophe {
            Some(h) => Some(self.head(h, representation, 1)?.0),
            None => None,
        };
        Ok(Prediction {
            regression,
            catastrophe_logits,
        })
    }

    /// Full inference for a batch of slice sets (dropout inactive).
    pub fn forward(&self, sets: &[&SliceSet]) -> Result<Prediction> {
        let (pred, _) = self.forward_cached(sets, None)?;
        Ok(pred)
    }

    fn encode(&self, slots: &Slots, slices: &[&Slice]) -> Result<Encoded> {
        let r = slices[0].resolution;
        if r < 4 || r % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 4, got {r}"
            )));
        }
        if slices.iter().any(|s| s.resolution != r || s.values.len() != r * r || s.mask.len() != r * r) {
            return Err(Error::Shape("all slices of a batch must share one resolution".into()));
        }
        let n = slices.len();
        let mut input = Vec::with_capacity(n * r * r);
        let mut mask = Vec::with_capacity(n * r * r);
        for s in slices {
            input.extend_from_slice(&s.values);
            mask.extend_from_slice(&s.mask);
        }
        let mut extent = Extent {
            channels: 1,
            batch: n,
            height: r,
            width: r,
        };
        let mut acts = Vec::with_capacity(6);
        let mut conv_caches = Vec::with_capacity(6);
        let mut pool_args: [Vec<usize>; 2] = Default::default();
        let mut pool_inputs = [0; 2];
        let mut x = input;
        for (i, slot) in slots.conv.iter().enumerate() {
            let (mut y, cache) = conv3x3_forward(&x, extent, &self.data[slot.w.clone()], &self.data[slot.b.clone()])?;
            relu_inplace(&mut y);
            extent.channels = CONV_CHANNELS[i].1;
            conv_caches.push(cache);
            if i == 1 || i == 3 {
                let planes = extent.channels * n;
                let (pooled, arg) = maxpool2x2_forward(&y, planes, extent.height, extent.width)?;
                mask = maxpool2x2_mask(&mask, n, extent.height, extent.width)?;
                pool_args[i / 2] = arg;
                pool_inputs[i / 2] = y.len();
                acts.push(y);
                extent.height /= 2;
                extent.width /= 2;
                x = pooled;
            } else {
                acts.push(y.clone());
                x = y;
            }
        }
        let cells = extent.plane();
        let t = &acts[5];
        let np = n * cells;
        let mut scores = vec![self.data[slots.spatial.b.start]; np];
        gemm(1, VISUAL_DIM, np, 1.0, &self.data[slots.spatial.w.clone()], false, t, false, 1.0, &mut scores);
        let mut attention = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n * VISUAL_DIM);
        let mut feats = vec![0.0; VISUAL_DIM * cells];
        for s in 0..n {
            gather_features(t, s, n, cells, &mut feats);
            let att = masked_softmax_sum(
                &scores[s * cells..(s + 1) * cells],
                &feats,
                &mask[s * cells..(s + 1) * cells],
                autodiff::ATTENTION_EPSILON,
            );
            z.extend_from_slice(&att.output);
            attention.push(att);
        }
        Ok(Encoded {
            acts,
            conv_caches,
            pool_args,
            pool_inputs,
            cells,
            attention,
            z,
        })
    }

    /// Softmax pooling of `conditioned` (rows of width `conditioned_dim`)
    /// within each `offsets` segment. Returns pooled rows and weights.
    fn pool_slices(&self, slots: &Slots, conditioned: &[f64], offsets: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let width = self.architecture.conditioned_dim();
        let w = &self.data[slots.slice.w.clone()];
        let bias = self.data[slots.slice.b.start];
        let n = conditioned.len() / width;
        let scores: Vec<f64> = (0..n)
            .map(|i| bias + dot(w, &conditioned[i * width..(i + 1) * width]))
            .collect();
        let mut weights = vec![0.0; n];
        let mut pooled = vec![0.0; (offsets.len() - 1) * width];
        for (b, seg) in offsets.windows(2).enumerate() {
            let top = scores[seg[0]..seg[1]].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in seg[0]..seg[1] {
                weights[i] = (scores[i] - top).exp();
                total += weights[i];
            }
            let out = &mut pooled[b * width..(b + 1) * width];
            for i in seg[0]..seg[1] {
                weights[i] /= total;
                for (o, v) in out.iter_mut().zip(&conditioned[i * width..(i + 1) * width]) {
                    *o += weights[i] * v;
                }
            }
        }
        (pooled, weights)
    }

    fn head(&self, head: &Head, input: &[f64], batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut hidden = linear_forward(input, batch, &self.data[head.hidden.w.clone()], &self.data[head.hidden.b.clone()])?;
        relu_inplace(&mut hidden);
        let out = linear_forward(&hidden, batch, &self.data[head.out.w.clone()], &self.data[head.out.b.clone()])?;
        Ok((out, hidden))
    }

    /// Forward pass keeping everything the backward pass needs. With
    /// `dropout_seeds` (one per set) dropout is active on `Z`.
    fn forward_cached(&self, sets: &[&SliceSet], dropout_seeds: Option<&[u64]>) -> Result<(Prediction, Cache)> {
        if sets.is_empty() || sets.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("forward needs at least one non-empty slice set".into()));
        }
        let slots = self.slots();
        let arch = self.architecture;
        let batch = sets.len();
        let mut offsets = vec![0];
        let mut slices = Vec::new();
        for s in sets {
            slices.extend(s.slices.iter());
            offsets.push(slices.len());
        }
        let n = slices.len();
        let encoded = self.encode(&slots, &slices)?;
        let xi: Vec<f64> = slices
            .iter()
            .flat_map(|s| side_features(s.scale, s.range, s.iqr))
            .collect();
        let width = arch.conditioned_dim();
        let conditioned = match &slots.side {
            Some(side) => {
                let emb = linear_forward(&xi, n, &self.data[side.w.clone()], &self.data[side.b.clone()])?;
                let mut c = Vec::with_capacity(n * width);
                for i in 0..n {
                    c.extend_from_slice(&encoded.z[i * VISUAL_DIM..(i + 1) * VISUAL_DIM]);
                    c.extend_from_slice(&emb[i * SIDE_DIM..(i + 1) * SIDE_DIM]);
                }
                c
            }
            None => encoded.z.clone(),
        };
        let (pooled, pool_weights) = self.pool_slices(&slots, &conditioned, &offsets);
        let log_dims: Vec<f64> = sets.iter().map(|s| (s.dimension as f64).ln()).collect();
        let rep = arch.representation_dim();
        let mut z = Vec::with_capacity(batch * rep);
        for b in 0..batch {
            z.extend_from_slice(&pooled[b * width..(b + 1) * width]);
            if let Some(dim) = &slots.dimension {
                z.push(self.data[dim.w.start] * log_dims[b] + self.data[dim.b.start]);
            }
        }
        let dropout = dropout_seeds.map(|seeds| {
            seeds
                .iter()
                .flat_map(|&s| dropout_mask(rep, DROPOUT_RATE, &mut stream(s)))
                .collect::<Vec<f64>>()
        });
        if let Some(mask) = &dropout {
            for (v, m) in z.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        let (regression, h_reg) = self.head(&slots.regression, &z, batch)?;
        let mut hidden = vec![h_reg];
        let catastrophe_logits = match &slots.catastrophe {
            Some(h) => {
                let (out, h_cat) = self.head(h, &z, batch)?;
                hidden.push(h_cat);
                Some(out)
            }
            None => None,
        };
        let cache = Cache {
            batch,
            slices: n,
            offsets,
            encoded,
            xi,
            conditioned,
            pool_weights,
            log_dims,
            z_dropped: z,
            dropout,
            hidden,
        };
        Ok((
            Prediction {
                regression,
                catastrophe_logits,
            },
            cache,
        ))
    }

    fn head_backward(&self, head: &Head, cache: &Cache, hidden: &[f64], dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let b = cache.batch;
        let (dw, db) = two_mut(grad, &head.out.w, &head.out.b);
        let mut dh = linear_backward(dout, hidden, b, &self.data[head.out.w.clone()], dw, db, true).expect("input grad");
        relu_backward_inplace(&mut dh, hidden);
        let (dw, db) = two_mut(grad, &head.hidden.w, &head.hidden.b);
        linear_backward(&dh, &cache.z_dropped, b, &self.data[head.hidden.w.clone()], dw, db, true).expect("input grad")
    }

    /// Accumulates `d loss / d params` into `grad` given output gradients.
    fn backward(&self, cache: &Cache, d_reg: &[f64], d_cat: Option<&[f64]>, grad: &mut [f64]) {
        let slots = self.slots();
        let arch = self.architecture;
        let rep = arch.representation_dim();
        let width = arch.conditioned_dim();
        let (batch, n) = (cache.batch, cache.slices);

        let mut dz = self.head_backward(&slots.regression, cache, &cache.hidden[0], d_reg, grad);
        if let (Some(head), Some(dc)) = (&slots.catastrophe, d_cat) {
            let extra = self.head_backward(head, cache, &cache.hidden[1], dc, grad);
            for (a, b) in dz.iter_mut().zip(extra) {
                *a += b;
            }
        }
        if let Some(mask) = &cache.dropout {
            for (g, m) in dz.iter_mut().zip(mask) {
                *g *= m;
            }
        }

        let mut d_pooled = vec![0.0; batch * width];
        for b in 0..batch {
            d_pooled[b * width..(b + 1) * width].copy_from_slice(&dz[b * rep..b * rep + width]);
            if let Some(dim) = &slots.dimension {
                let g = dz[b * rep + width];
                grad[dim.w.start] += g * cache.log_dims[b];
                grad[dim.b.start] += g;
            }
        }

        // Slice pooling: dC_i = beta_i g + ds_i w, ds_i = beta_i (g.C_i - g.pooled).
        let w_slice = &self.data[slots.slice.w.clone()];
        let mut d_cond = vec![0.0; n * width];
        let mut d_wslice = vec![0.0; width];
        for (b, seg) in cache.offsets.windows(2).enumerate() {
            let g = &d_pooled[b * width..(b + 1) * width];
            let mut pooled = vec![0.0; width];
            for i in seg[0]..seg[1] {
                for (p, v) in pooled.iter_mut().zip(&cache.conditioned[i * width..(i + 1) * width]) {
                    *p += cache.pool_weights[i] * v;
                }
            }
            let g_pooled = dot(g, &pooled);
            for i in seg[0]..seg[1] {
                let row = &cache.conditioned[i * width..(i + 1) * width];
                let beta = cache.pool_weights[i];
                let ds = beta * (dot(g, row) - g_pooled);
                let drow = &mut d_cond[i * width..(i + 1) * width];
                for j in 0..width {
                    drow[j] = beta * g[j] + ds * w_slice[j];
                    d_wslice[j] += ds * row[j];
                }
            }
        }
        for (a, b) in grad[slots.slice.w.clone()].iter_mut().zip(&d_wslice) {
            *a += b;
        }
        // The slice-scorer bias cancels in the softmax; its gradient is zero.

        let mut d_z = vec![0.0; n * VISUAL_DIM];
        for i in 0..n {
            d_z[i * VISUAL_DIM..(i + 1) * VISUAL_DIM].copy_from_slice(&d_cond[i * width..i * width + VISUAL_DIM]);
        }
        if let Some(side) = &slots.side {
            let d_emb: Vec<f64> = (0..n)
                .flat_map(|i| d_cond[i * width + VISUAL_DIM..(i + 1) * width].iter().copied())
                .collect();
            let (dw, db) = two_mut(grad, &side.w, &side.b);
            linear_backward(&d_emb, &cache.xi, n, &self.data[side.w.clone()], dw, db, false);
        }

        self.encode_backward(&slots, &cache.encoded, n, &d_z, grad);
    }

    fn encode_backward(&self, slots: &Slots, enc: &Encoded, n: usize, d_z: &[f64], grad: &mut [f64]) {
        let cells = enc.cells;
        let np = n * cells;
        let t = &enc.acts[5];
        let mut d_t = vec![0.0; VISUAL_DIM * np];
        let mut d_scores = vec![0.0; np];
        let mut feats = vec![0.0; VISUAL_DIM * cells];
        for s in 0..n {
            gather_features(t, s, n, cells, &mut feats);
            let (ds, df) = masked_softmax_sum_backward(&enc.attention[s], &feats, &d_z[s * VISUAL_DIM..(s + 1) * VISUAL_DIM]);
            d_scores[s * cells..(s + 1) * cells].copy_from_slice(&ds);
            for c in 0..VISUAL_DIM {
                let dst = &mut d_t[c * np + s * cells..c * np + (s + 1) * cells];
                for (d, v) in dst.iter_mut().zip(&df[c * cells..(c + 1) * cells]) {
                    *d += v;
                }
            }
        }
        // Spatial scorer: scores = w T + b.
        {
            let (dw, db) = two_mut(grad, &slots.spatial.w, &slots.spatial.b);
            gemm(1, np, VISUAL_DIM, 1.0, &d_scores, false, t, true, 1.0, dw);
            db[0] += d_scores.iter().sum::<f64>();
            gemm(VISUAL_DIM, 1, np, 1.0, &self.data[slots.spatial.w.clone()], true, &d_scores, false, 1.0, &mut d_t);
        }
        let mut d = d_t;
        for i in (0..CONV_CHANNELS.len()).rev() {
            if i == 1 || i == 3 {
                d = maxpool2x2_backward(&d, &enc.pool_args[i / 2], enc.pool_inputs[i / 2]);
            }
            relu_backward_inplace(&mut d, &enc.acts[i]);
            let slot = &slots.conv[i];
            let (dw, db) = two_mut(grad, &slot.w, &slot.b);
            match conv3x3_backward(&d, &enc.conv_caches[i], &self.data[slot.w.clone()], dw, db, i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    /// Joint loss and its gradient on one batch.
    pub fn loss_and_gradient(
        &self,
        sets: &[&SliceSet],
        targets: &BatchTargets,
        lambda_cls: f64,
        dropout_seeds: Option<&[u64]>,
    ) -> Result<(LossParts, Vec<f64>)> {
        let a = self.architecture.n_algorithms;
        if targets.regression.len() != sets.len() * a || targets.catastrophe.len() != sets.len() * a {
            return Err(Error::Shape("targets do not match batch x |A|".into()));
        }
        let (pred, cache) = self.forward_cached(sets, dropout_seeds)?;
        let (reg_loss, d_reg) = smooth_l1(&pred.regression, &targets.regression);
        let (cls_loss, d_cat) = match &pred.catastrophe_logits {
            Some(logits) => {
                let (l, mut g) = bce_with_logits(logits, &targets.catastrophe);
                g.iter_mut().for_each(|v| *v *= lambda_cls);
                (l, Some(g))
            }
            None => (0.0, None),
        };
        let mut grad = vec![0.0; self.data.len()];
        self.backward(&cache, &d_reg, d_cat.as_deref(), &mut grad);
        Ok((
            LossParts {
                regression: reg_loss,
                classification: cls_loss,
                total: reg_loss + lambda_cls * cls_loss,
            },
            grad,
        ))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Copies slice `s` of a `C x N x P` tensor into a contiguous `C x P` block.
fn gather_features(t: &[f64], s: usize, n: usize, cells: usize, out: &mut [f64]) {
    for c in 0..VISUAL_DIM {
        let src = &t[c * n * cells + s * cells..c * n * cells + (s + 1) * cells];
        out[c * cells..(c + 1) * cells].copy_from_slice(src);
    }
}

/// Disjoint mutable views of a weight range and the bias range that follows it.
fn two_mut<'a>(v: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub regression: f64,
    pub classification: f64,
    pub total: f64,
}

/// Row-major `B x |A|` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub regression: Vec<f64>,
    pub catastrophe: Vec<f64>,
}

/// One labelled datapoint: slice set, capped relERT row and catastrophe row.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub slices: &'a SliceSet,
    pub relert: &'a [f64],
    pub catastrophe: &'a [bool],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_cls: f64,
    pub seed: u64,
    pub dropout: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda_cls: 10.0,
            seed: 0,
            dropout: true,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    /// Mean total loss per epoch (training mode).
    pub loss_trace: Vec<f64>,
}

fn batch_targets(batch: &[&Example<'_>]) -> BatchTargets {
    BatchTargets {
        regression: batch.iter().flat_map(|e| e.relert.iter().map(|v| v.ln())).collect(),
        catastrophe: batch
            .iter()
            .flat_map(|e| e.catastrophe.iter().map(|&c| if c { 1.0 } else { 0.0 }))
            .collect(),
    }
}

/// Mean joint loss over `data` in evaluation mode.
pub fn evaluate_loss(params: &ModelParams, data: &[Example<'_>], lambda_cls: f64, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let sets: Vec<&SliceSet> = chunk.iter().map(|e| e.slices).collect();
        let (loss, _) = params.loss_and_gradient(&sets, &batch_targets(&refs), lambda_cls, None)?;
        total += loss.total * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Minibatch Adam on the joint loss `mean SmoothL1(log relERT) + lambda_cls mean BCE`.
///
/// Batches are reshuffled each epoch from `(seed, epoch)`; the dropout mask of
/// datapoint `j` in epoch `e` comes from `(seed, e, j)`.
pub fn train(data: &[Example<'_>], n_algorithms: usize, cfg: &TrainConfig) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if !(cfg.lambda_cls >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("lambda_cls must be >= 0 and batch_size >= 1".into()));
    }
    if let Some(bad) = data
        .iter()
        .find(|e| e.relert.len() != n_algorithms || e.catastrophe.len() != n_algorithms)
    {
        return Err(Error::Shape(format!(
            "label row for {:?} does not have {n_algorithms} entries",
            bad.slices.id
        )));
    }
    if data.iter().any(|e| e.relert.iter().any(|v| !(v.is_finite() && *v > 0.0))) {
        return Err(Error::Data("training labels must be finite and positive (cap-imputed)".into()));
    }
    let arch = Architecture {
        n_algorithms,
        ablation: cfg.ablation,
    };
    let mut params = ModelParams::init(arch, cfg.seed)?;
    let mut state = OptimizerState::new(
        params.data.len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(mix(&[tag::TRAIN, cfg.seed, epoch as u64]));
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&j| &data[j]).collect();
            let sets: Vec<&SliceSet> = batch.iter().map(|e| e.slices).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&j| mix(&[tag::TRAIN, cfg.seed, epoch as u64, j as u64, 1]))
                .collect();
            let (loss, grad) = params.loss_and_gradient(
                &sets,
                &batch_targets(&batch),
                cfg.lambda_cls,
                cfg.dropout.then_some(&seeds[..]),
            )?;
            adam_step(&mut params.data, &grad, &mut state)?;
            epoch_loss += loss.total * chunk.len() as f64;
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    Ok(Trained {
        params,
        loss_trace: trace,
    })
}

/// Fisher–Yates with the given stream.
pub fn shuffle<T, R: rand::Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::DatapointId;

    fn toy_set(seed: u64, k: usize, r: usize, dimension: usize) -> SliceSet {
        let mut rng = stream(seed);
        let slices = (0..k)
            .map(|_| {
                let values: Vec<f64> = (0..r * r).map(|_| open01(&mut rng)).collect();
                let mask: Vec<bool> = (0..r * r).map(|_| open01(&mut rng) < 0.8).collect();
                Slice {
                    resolution: r,
                    values,
                    mask,
                    scale: 0.02 + 0.6 * open01(&mut rng),
                    range: 10.0 * open01(&mut rng),
                    iqr: 2.0 * open01(&mut rng),
                }
            })
            .collect();
        SliceSet {
            id: DatapointId {
                function_id: 1,
                dimension: dimension as u32,
                instance_id: 1,
                repetition: 0,
            },
            dimension,
            slices,
        }
    }

    #[test]
    fn parameter_count_matches_hand_sum() {
        let conv = 1 * 32 * 9 + 32 + 32 * 32 * 9 + 32 + 32 * 64 * 9 + 64 + 64 * 64 * 9 + 64 + 64 * 128 * 9 + 128 + 128 * 128 * 9 + 128;
        let head = 145 * 128 + 128 + 128 * 12 + 12;
        let hand = conv + (128 + 1) + (3 * 16 + 16) + (144 + 1) + (1 + 1) + 2 * head;
        assert_eq!(hand, 327_244);
        let arch = Architecture::new(12);
        assert_eq!(arch.parameter_count(), hand);
        assert_eq!(arch.representation_dim(), 145);
        assert_eq!(init_parameters(12, 0).unwrap().parameter_count(), hand);
    }

    #[test]
    fn ablations_remove_exactly_their_component() {
        let mut arch = Architecture::new(12);
        arch.ablation.no_side_conditioning = true;
        assert_eq!(arch.representation_dim(), 129);
        assert_eq!(arch.parameter_count(), 327_244 - 64 - 16 - 16 * 128 * 2);
        let mut arch = Architecture::new(12);
        arch.ablation.no_dimension_conditioning = true;
        assert_eq!(arch.representation_dim(), 144);
        let mut arch = Architecture::new(12);
        arch.ablation.no_catastrophe_head = true;
        assert_eq!(arch.parameter_count(), 327_244 - (145 * 128 + 128 + 128 * 12 + 12));
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let a = init_parameters(12, 3).unwrap();
        let b = init_parameters(12, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|w| w.is_finite() && w.abs() < 1.0));
        assert_ne!(a, init_parameters(12, 4).unwrap());
        assert!(init_parameters(1, 0).is_err());
    }

    #[test]
    fn encoder_shapes() {
        let p = init_parameters(4, 1).unwrap();
        let z = p.encode_slice(&[0.5; 64], &[true; 64], 8).unwrap();
        assert_eq!(z.len(), 128);
        assert!(z.iter().all(|v| v.is_finite()));
        let set = toy_set(1, 3, 8, 2);
        let slots = p.slots();
        let refs: Vec<&Slice> = set.slices.iter().collect();
        let enc = p.encode(&slots, &refs).unwrap();
        assert_eq!(enc.cells, 4);
        assert!(enc.attention.iter().all(|a| !a.fallback));
        assert!(matches!(p.encode_slice(&[0.5; 36], &[true; 36], 6), Err(Error::Config(_))));
    }

    #[test]
    fn conditioning_uses_side_epsilon() {
        let p = init_parameters(4, 1).unwrap();
        assert_eq!(side_features(1.0, 0.0, 0.0), [0.0, 1e-6f64.ln(), 1e-6f64.ln()]);
        assert!((1e-6f64.ln() + 13.8155).abs() < 1e-4);
        let zt = p.condition_slice(&[0.1; 128], 0.5, 1.0, 0.3).unwrap();
        assert_eq!(zt.len(), 144);
        assert_eq!(&zt[..128], &[0.1; 128][..]);
    }

    #[test]
    fn aggregation_identities() {
        let p = init_parameters(4, 2).unwrap();
        let mut rng = stream(9);
        let one: Vec<f64> = (0..144).map(|_| open01(&mut rng)).collect();
        let z = p.aggregate(&[one.clone()], 3).unwrap();
        assert_eq!(z.len(), 145);
        assert_eq!(&z[..144], &one[..]);
        let z4 = p.aggregate(&vec![one.clone(); 4], 3).unwrap();
        for (a, b) in z4.iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_forward_matches_single_path() {
        let p = init_parameters(3, 5).unwrap();
        let set = toy_set(2, 3, 8, 4);
        let batch = p.forward(&[&set]).unwrap();
        let cond: Vec<Vec<f64>> = set
            .slices
            .iter()
            .map(|s| {
                let z = p.encode_slice(&s.values, &s.mask, 8).unwrap();
                p.condition_slice(&z, s.scale, s.range, s.iqr).unwrap()
            })
            .collect();
        let single = p.predict(&p.aggregate(&cond, 4).unwrap()).unwrap();
        for (a, b) in batch.regression.iter().zip(&single.regression) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(batch.catastrophe_logits.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn zero_lambda_leaves_catastrophe_head_untouched() {
        let p = init_parameters(3, 5).unwrap();
        let set = toy_set(3, 2, 4, 2);
        let targets = BatchTargets {
            regression: vec![0.0, 1.0, 2.0],
            catastrophe: vec![1.0, 0.0, 1.0],
        };
        let (_, grad) = p.loss_and_gradient(&[&set], &targets, 0.0, None).unwrap();
        for spec in p.layout().iter().filter(|s| s.name.starts_with("catastrophe")) {
            assert!(grad[spec.range()].iter().all(|&g| g == 0.0), "{}", spec.name);
        }
        assert!(grad.iter().any(|&g| g != 0.0));
    }
}
