//! Finite-difference helpers shared by the gradient tests and the acceptance harness.
#![allow(dead_code)]

use geoprobe::autodiff::{
    bce_with_logits, conv3x3_backward, conv3x3_forward, linear_backward, linear_forward, masked_softmax_sum,
    masked_softmax_sum_backward, maxpool2x2_backward, maxpool2x2_forward, relu_backward_inplace, relu_inplace,
    smooth_l1, Extent, ATTENTION_EPSILON,
};
use geoprobe::model::{BatchTargets, ModelParams};
use geoprobe::probing::{DatapointId, Slice, SliceSet};
use geoprobe::seed::{open01, stream};
use rand::Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error of `grad` against central differences of `f` at `x`.
pub fn fd_worst(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let fp = f(&probe);
        probe[i] = x[i] - STEP;
        let fm = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(grad[i], (fp - fm) / (2.0 * STEP)));
    }
    worst
}

fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst FD error of every primitive, each under a random linear read-out.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = stream(seed);
    let mut out = Vec::new();

    let e = Extent { channels: 2, batch: 2, height: 4, width: 4 };
    let x = randn(&mut rng, e.len());
    let w = randn(&mut rng, 3 * 2 * 9);
    let b = randn(&mut rng, 3);
    let g = randn(&mut rng, 3 * e.columns());
    let (_, cache) = conv3x3_forward(&x, e, &w, &b).unwrap();
    let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; 3]);
    let dx = conv3x3_backward(&g, &cache, &w, &mut dw, &mut db, true).unwrap();
    let conv = |x: &[f64], w: &[f64], b: &[f64]| dot(&conv3x3_forward(x, e, w, b).unwrap().0, &g);
    out.push(("conv3x3 input", fd_worst(&x, &dx, |v| conv(v, &w, &b))));
    out.push(("conv3x3 weight", fd_worst(&w, &dw, |v| conv(&x, v, &b))));
    out.push(("conv3x3 bias", fd_worst(&b, &db, |v| conv(&x, &w, v))));

    // Distinct values spaced far beyond the step keep the argmax fixed.
    let mut x: Vec<f64> = (0..2 * 16).map(|i| i as f64 * 0.01).collect();
    for i in (1..x.len()).rev() {
        let j = rng.random_range(0..=i);
        x.swap(i, j);
    }
    let g = randn(&mut rng, 2 * 4);
    let (_, arg) = maxpool2x2_forward(&x, 2, 4, 4).unwrap();
    let dx = maxpool2x2_backward(&g, &arg, x.len());
    out.push(("maxpool2x2", fd_worst(&x, &dx, |v| dot(&maxpool2x2_forward(v, 2, 4, 4).unwrap().0, &g))));

    let x: Vec<f64> = randn(&mut rng, 20).into_iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
    let g = randn(&mut rng, 20);
    let mut y = x.clone();
    relu_inplace(&mut y);
    let mut dx = g.clone();
    relu_backward_inplace(&mut dx, &y);
    out.push((
        "relu",
        fd_worst(&x, &dx, |v| {
            let mut y = v.to_vec();
            relu_inplace(&mut y);
            dot(&y, &g)
        }),
    ));

    let (batch, n, m) = (3, 5, 4);
    let x = randn(&mut rng, batch * n);
    let w = randn(&mut rng, m * n);
    let b = randn(&mut rng, m);
    let g = randn(&mut rng, batch * m);
    let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; m]);
    let dx = linear_backward(&g, &x, batch, &w, &mut dw, &mut db, true).unwrap();
    let lin = |x: &[f64], w: &[f64], b: &[f64]| dot(&linear_forward(x, batch, w, b).unwrap(), &g);
    out.push(("linear input", fd_worst(&x, &dx, |v| lin(v, &w, &b))));
    out.push(("linear weight", fd_worst(&w, &dw, |v| lin(&x, v, &b))));
    out.push(("linear bias", fd_worst(&b, &db, |v| lin(&x, &w, v))));

    let (cells, channels) = (9, 4);
    let s = randn(&mut rng, cells);
    let t = randn(&mut rng, channels * cells);
    let mask: Vec<bool> = (0..cells).map(|p| p % 4 != 1).collect();
    let g = randn(&mut rng, channels);
    let att = masked_softmax_sum(&s, &t, &mask, ATTENTION_EPSILON);
    let (ds, dt) = masked_softmax_sum_backward(&att, &t, &g);
    out.push((
        "attention scores",
        fd_worst(&s, &ds, |v| dot(&masked_softmax_sum(v, &t, &mask, ATTENTION_EPSILON).output, &g)),
    ));
    out.push((
        "attention features",
        fd_worst(&t, &dt, |v| dot(&masked_softmax_sum(&s, v, &mask, ATTENTION_EPSILON).output, &g)),
    ));

    // Dropout with a frozen mask is a diagonal linear map.
    let x = randn(&mut rng, 16);
    let g = randn(&mut rng, 16);
    let keep = geoprobe::autodiff::dropout_mask(16, 0.2, &mut rng);
    let dx: Vec<f64> = g.iter().zip(&keep).map(|(a, b)| a * b).collect();
    out.push((
        "dropout",
        fd_worst(&x, &dx, |v| v.iter().zip(&keep).zip(&g).map(|((x, k), g)| x * k * g).sum()),
    ));

    let p: Vec<f64> = randn(&mut rng, 12).into_iter().map(|v| 2.0 * v).collect();
    let mut t = randn(&mut rng, 12);
    for (ti, pi) in t.iter_mut().zip(&p) {
        let e = pi - *ti;
        if (e.abs() - 1.0).abs() < 0.05 {
            *ti += 0.2;
        }
    }
    let (_, dp) = smooth_l1(&p, &t);
    out.push(("smooth_l1", fd_worst(&p, &dp, |v| smooth_l1(v, &t).0)));

    let z = randn(&mut rng, 12);
    let y: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let (_, dz) = bce_with_logits(&z, &y);
    out.push(("bce_with_logits", fd_worst(&z, &dz, |v| bce_with_logits(v, &y).0)));
    out
}

pub fn micro_set(seed: u64, r: usize, dimension: usize) -> SliceSet {
    let mut rng = stream(seed);
    let slices = (0..2)
        .map(|i| Slice {
            resolution: r,
            values: (0..r * r).map(|_| open01(&mut rng)).collect(),
            mask: (0..r * r).map(|j| i == 0 || j % 3 != 0).collect(),
            scale: 0.1 + 0.5 * open01(&mut rng),
            range: 5.0 * open01(&mut rng),
            iqr: open01(&mut rng),
        })
        .collect();
    SliceSet {
        id: DatapointId { function_id: 3, dimension: dimension as u32, instance_id: 1, repetition: 0 },
        dimension,
        slices,
    }
}

/// Outcome of the sampled end-to-end check.
#[derive(Debug, Clone, Copy)]
pub struct EndToEnd {
    pub worst: f64,
    pub kinks: usize,
    pub checked: usize,
    /// The slice-scorer bias has an exactly zero gradient (softmax shift).
    pub zero_bias_ok: bool,
}

/// Samples up to 12 coordinates of every tensor of a 2-slice, r = 4 batch.
pub fn end_to_end(params: &ModelParams, seed: u64) -> EndToEnd {
    let a = params.architecture.n_algorithms;
    let sets = [micro_set(seed, 4, 3), micro_set(seed + 1, 4, 5)];
    let refs: Vec<&SliceSet> = sets.iter().collect();
    let mut rng = stream(seed + 7);
    let targets = BatchTargets {
        regression: (0..2 * a).map(|_| 3.0 * open01(&mut rng)).collect(),
        catastrophe: (0..2 * a).map(|i| (i % 3 == 0) as u8 as f64).collect(),
    };
    let loss = |p: &ModelParams| p.loss_and_gradient(&refs, &targets, 10.0, None).unwrap().0.total;
    let (_, grad) = params.loss_and_gradient(&refs, &targets, 10.0, None).unwrap();
    let mut res = EndToEnd { worst: 0.0, kinks: 0, checked: 0, zero_bias_ok: true };
    let mut probe = params.clone();
    for spec in params.layout() {
        let range = spec.range();
        for _ in 0..12.min(range.len()) {
            let i = rng.random_range(range.clone());
            let x = params.data[i];
            probe.data[i] = x + STEP;
            let fp = loss(&probe);
            probe.data[i] = x - STEP;
            let fm = loss(&probe);
            probe.data[i] = x;
            let f0 = loss(&probe);
            let numeric = (fp - fm) / (2.0 * STEP);
            if spec.name == "slice_scorer.bias" {
                res.zero_bias_ok &= grad[i] == 0.0 && numeric.abs() < 1e-8;
                continue;
            }
            let (fwd, bwd) = ((fp - f0) / STEP, (f0 - fm) / STEP);
            let mut err = relative_error(grad[i], numeric);
            if relative_error(fwd, bwd) > 1e-3 {
                // The step crossed a ReLU or pooling switch: the analytic
                // gradient must then agree with one of the one-sided slopes.
                res.kinks += 1;
                err = relative_error(grad[i], fwd).min(relative_error(grad[i], bwd));
            }
            res.worst = res.worst.max(err);
            res.checked += 1;
        }
    }
    res
}
