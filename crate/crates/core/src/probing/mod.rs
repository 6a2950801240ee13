//! Multi-scale geometric probing.
//!
//! A slice is an oriented square `x(u) = c + l O u`, `u in [-1/2, 1/2]^2`, in
//! the normalised cube `[0, 1]^d`. Its `r x r` grid uses endpoint-inclusive
//! nodes `u_a = -1/2 + a / (r - 1)`, so `l` is the exact side length. Grid
//! points outside the cube are flagged invalid in the mask, clipped
//! coordinatewise back into the cube, mapped to the physical domain and
//! evaluated so that the raw tensor stays dense.
//!
//! Centres come from one scrambled Sobol stream per slice set; each slice
//! draws its orientation and then its scale from its own geometry stream
//! `mix([GEOMETRY, seed, slice_index])`.

pub mod frame;
pub mod sobol;

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbob::{to_physical, ProblemInstance};
use crate::error::{Error, Result};
use crate::seed::{mix, open01, stream, tag};
use crate::stats::{quantile_sorted, sorted_copy};

pub use frame::Frame;
pub use sobol::sample_centres;

pub const SCALE_MIN: f64 = 0.02;
pub const SCALE_MAX: f64 = 0.7;

/// Something that can be probed: a function on a box.
pub trait Objective {
    fn dimension(&self) -> usize;
    fn bounds(&self) -> &[(f64, f64)];
    fn evaluate(&self, point: &[f64]) -> Result<f64>;
}

impl Objective for ProblemInstance {
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
    fn evaluate(&self, point: &[f64]) -> Result<f64> {
        ProblemInstance::evaluate(self, point)
    }
}

/// Wraps an objective and counts evaluations.
pub struct Counted<'a, O: Objective> {
    inner: &'a O,
    calls: Cell<u64>,
}

impl<'a, O: Objective> Counted<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }
    pub fn calls(&self) -> u64 {
        self.calls.get()
    }
}

impl<O: Objective> Objective for Counted<'_, O> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn bounds(&self) -> &[(f64, f64)] {
        self.inner.bounds()
    }
    fn evaluate(&self, point: &[f64]) -> Result<f64> {
        self.calls.set(self.calls.get() + 1);
        self.inner.evaluate(point)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleLaw {
    #[default]
    LogUniform,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub min: f64,
    pub max: f64,
    pub law: ScaleLaw,
}

impl Default for ScaleRange {
    fn default() -> Self {
        Self {
            min: SCALE_MIN,
            max: SCALE_MAX,
            law: ScaleLaw::LogUniform,
        }
    }
}

impl ScaleRange {
    /// Draws a side length; the default law is `log l ~ U(log min, log max)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = open01(rng);
        let l = match self.law {
            ScaleLaw::LogUniform => (self.min.ln() + u * (self.max.ln() - self.min.ln())).exp(),
            ScaleLaw::Uniform => self.min + u * (self.max - self.min),
        };
        l.clamp(self.min, self.max)
    }
}

/// Log-uniform side length in `[SCALE_MIN, SCALE_MAX]`.
pub fn sample_scale<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ScaleRange::default().sample(rng)
}

/// Haar-distributed `d x 2` orientation frame.
pub fn sample_orientation<R: Rng + ?Sized>(dimension: usize, rng: &mut R) -> Result<Frame> {
    if dimension < 2 {
        return Err(Error::Config(format!(
            "orientation needs dimension >= 2, got {dimension}"
        )));
    }
    Ok(frame::haar_frame(dimension, 2, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceParams {
    pub centre: Vec<f64>,
    pub orientation: Frame,
    pub scale: f64,
}

impl SliceParams {
    /// Grid node `(a, b)` in the normalised cube, before clipping.
    pub fn grid_point(&self, a: usize, b: usize, resolution: usize) -> Vec<f64> {
        let ua = grid_coordinate(a, resolution);
        let ub = grid_coordinate(b, resolution);
        let o = &self.orientation;
        self.centre
            .iter()
            .enumerate()
            .map(|(i, c)| c + self.scale * (o.get(i, 0) * ua + o.get(i, 1) * ub))
            .collect()
    }
}

#[inline]
pub fn grid_coordinate(index: usize, resolution: usize) -> f64 {
    -0.5 + index as f64 / (resolution - 1) as f64
}

/// Samples a normalised `r x r` slice of `objective`.
///
/// Returns the raw values and the validity mask, both row-major with the
/// first grid index `a` (along the first frame column) as the row.
pub fn rasterize_slice<O: Objective + ?Sized>(
    objective: &O,
    params: &SliceParams,
    resolution: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if resolution < 2 {
        return Err(Error::Config(format!("resolution must be >= 2, got {resolution}")));
    }
    if params.centre.len() != objective.dimension() {
        return Err(Error::Input("slice centre does not match objective dimension".into()));
    }
    let n = resolution * resolution;
    let mut raw = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for a in 0..resolution {
        for b in 0..resolution {
            let mut x = params.grid_point(a, b, resolution);
            let inside = x.iter().all(|v| (0.0..=1.0).contains(v));
            if !inside {
                x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            let value = objective.evaluate(&to_physical(&x, objective.bounds()))?;
            if !value.is_finite() {
                return Err(Error::Data(format!("objective returned {value} inside a slice")));
            }
            raw.push(value);
            mask.push(inside);
        }
    }
    Ok((raw, mask))
}

/// Min–max normalisation over valid entries.
///
/// Returns `(X, range, iqr)`. Invalid entries and every entry of a
/// zero-range slice are set to 0.5; both statistics are 0 when nothing is
/// valid.
pub fn normalize_slice(raw: &[f64], mask: &[bool]) -> (Vec<f64>, f64, f64) {
    assert_eq!(raw.len(), mask.len());
    let valid: Vec<f64> = raw
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if valid.is_empty() {
        return (vec![0.5; raw.len()], 0.0, 0.0);
    }
    let sorted = sorted_copy(&valid);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let range = hi - lo;
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let values = raw
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m || range == 0.0 {
                0.5
            } else {
                ((v - lo) / range).clamp(0.0, 1.0)
            }
        })
        .collect();
    (values, range, iqr)
}

/// One probed view: normalised values, validity mask and side statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub resolution: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub scale: f64,
    pub range: f64,
    pub iqr: f64,
}

impl Slice {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DatapointId {
    pub function_id: u32,
    pub dimension: u32,
    pub instance_id: u32,
    pub repetition: u32,
}

impl DatapointId {
    pub fn problem(&self) -> (u32, u32) {
        (self.function_id, self.dimension)
    }
    pub fn group(&self) -> (u32, u32, u32) {
        (self.function_id, self.dimension, self.instance_id)
    }
    /// Seed used for this datapoint's slice set under `global_seed`.
    pub fn seed(&self, global_seed: u64) -> u64 {
        mix(&[
            tag::DATAPOINT,
            global_seed,
            self.function_id as u64,
            self.dimension as u64,
            self.instance_id as u64,
            self.repetition as u64,
        ])
    }
}

/// The model input for one datapoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSet {
    pub id: DatapointId,
    pub dimension: usize,
    pub slices: Vec<Slice>,
}

impl SliceSet {
    pub fn resolution(&self) -> usize {
        self.slices.first().map_or(0, |s| s.resolution)
    }
    pub fn len(&self) -> usize {
        self.slices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub slices: usize,
    pub resolution: usize,
    pub scale: ScaleRange,
}

impl ProbeSpec {
    pub fn new(slices: usize, resolution: usize) -> Self {
        Self {
            slices,
            resolution,
            scale: ScaleRange::default(),
        }
    }

    pub fn evaluations(&self) -> u64 {
        (self.slices * self.resolution * self.resolution) as u64
    }
}

/// Draws the `(c, O, l)` triples of one slice set.
pub fn sample_params(dimension: usize, spec: &ProbeSpec, seed: u64) -> Result<Vec<SliceParams>> {
    let centres = sample_centres(spec.slices, dimension, mix(&[tag::SOBOL, seed]))?;
    centres
        .into_iter()
        .enumerate()
        .map(|(i, centre)| {
            let mut rng = stream(mix(&[tag::GEOMETRY, seed, i as u64]));
            let orientation = sample_orientation(dimension, &mut rng)?;
            let scale = spec.scale.sample(&mut rng);
            Ok(SliceParams {
                centre,
                orientation,
                scale,
            })
        })
        .collect()
}

/// Probes `objective` with `spec.slices` slices; performs exactly
/// `slices * resolution^2` evaluations.
pub fn build_probe_set_with<O: Objective + ?Sized>(
    objective: &O,
    spec: &ProbeSpec,
    seed: u64,
    id: DatapointId,
) -> Result<SliceSet> {
    if spec.slices == 0 {
        return Err(Error::Config("a slice set needs at least one slice".into()));
    }
    if spec.resolution < 2 {
        return Err(Error::Config("resolution must be >= 2".into()));
    }
    let params = sample_params(objective.dimension(), spec, seed)?;
    let slices = params
        .iter()
        .map(|p| {
            let (raw, mask) = rasterize_slice(objective, p, spec.resolution)?;
            let (values, range, iqr) = normalize_slice(&raw, &mask);
            Ok(Slice {
                resolution: spec.resolution,
                values,
                mask,
                scale: p.scale,
                range,
                iqr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SliceSet {
        id,
        dimension: objective.dimension(),
        slices,
    })
}

/// Default-law slice set for a BBOB instance (repetition 0).
pub fn build_probe_set(instance: &ProblemInstance, k: usize, r: usize, seed: u64) -> Result<SliceSet> {
    let id = DatapointId {
        function_id: instance.function_id,
        dimension: instance.dimension as u32,
        instance_id: instance.instance_id,
        repetition: 0,
    };
    build_probe_set_with(instance, &ProbeSpec::new(k, r), seed, id)
}
