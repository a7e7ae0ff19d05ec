//! Statistical constraint inference: target-modality priors, differentiable
//! histogram and moment losses, and the constraint-guided reverse sampler.
//!
//! Losses are evaluated on the clean-image estimate mapped to `[0, 1]`.
//! Gradients are analytic and computed in `f64`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    assemble_input, assemble_input_without_edges, DirectionLabel, EdgeMap, ImageTensor, ModalityTag,
    SOURCE_CHANNELS, TARGET_CHANNELS,
};
use crate::data_io::write_atomic;
use crate::denoiser::Denoiser;
use crate::error::{ensure, Error, Result};
use crate::metrics::{chi2_distance, hard_histogram, HistogramMetric};
use crate::nn::Tensor;
use crate::schedule::{DiffusionSchedule, PosteriorForm};
use crate::seed::{indexed_rng, Stream};

pub const DEFAULT_BINS: usize = 32;
pub const DEFAULT_LAMBDA: f64 = 20.0;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Target-modality priors and guidance settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    /// Modality the priors were fitted on; guided sampling must target it.
    pub modality: ModalityTag,
    pub bins: usize,
    /// One normalized histogram per channel over `[0, 1]`.
    pub prior_hist: Vec<Vec<f64>>,
    pub prior_mean: Vec<f64>,
    pub prior_std: Vec<f64>,
    pub lambda_ccl: f64,
    pub lambda_scl: f64,
    pub eps: f64,
    pub metric: HistogramMetric,
    pub guidance_scale: f64,
}

impl ConstraintSpec {
    pub fn channels(&self) -> usize {
        self.prior_hist.len()
    }

    pub fn with_lambdas(mut self, ccl: f64, scl: f64) -> Self {
        self.lambda_ccl = ccl;
        self.lambda_scl = scl;
        self
    }

    pub fn with_metric(mut self, metric: HistogramMetric) -> Self {
        self.metric = metric;
        self
    }

    /// True when guidance leaves the posterior mean untouched.
    pub fn is_inert(&self) -> bool {
        self.guidance_scale == 0.0 || (self.lambda_ccl == 0.0 && self.lambda_scl == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.bins < 2 {
            return cfg(format!("histograms need at least 2 bins, got {}", self.bins));
        }
        let c = self.prior_hist.len();
        if c == 0 || self.prior_mean.len() != c || self.prior_std.len() != c {
            return cfg("prior histogram, mean and std must cover the same non-zero channel count".into());
        }
        for (ch, h) in self.prior_hist.iter().enumerate() {
            if h.len() != self.bins {
                return cfg(format!("channel {ch} histogram has {} bins, expected {}", h.len(), self.bins));
            }
            let sum: f64 = h.iter().sum();
            if h.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return cfg(format!("channel {ch} histogram must be non-negative and sum to 1, sums to {sum}"));
            }
        }
        if self.prior_std.iter().any(|s| !(*s >= 0.0)) || self.prior_mean.iter().any(|m| !m.is_finite()) {
            return cfg("prior moments must be finite with non-negative std".into());
        }
        if !(self.lambda_ccl >= 0.0 && self.lambda_scl >= 0.0) || !self.lambda_ccl.is_finite() || !self.lambda_scl.is_finite() {
            return cfg("constraint weights must be finite and non-negative".into());
        }
        if !(self.eps > 0.0) || !self.guidance_scale.is_finite() {
            return cfg("eps must be positive and the guidance scale finite".into());
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn to_unit(v: f32) -> f64 {
    ((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Pools the given images' pixels per channel into priors: hard histograms
/// with `bins` bins plus population mean and std, all on `[0, 1]`.
pub fn fit_constraints<'a>(
    images: impl IntoIterator<Item = &'a ImageTensor>,
    modality: ModalityTag,
    bins: usize,
) -> Result<ConstraintSpec> {
    if bins < 2 {
        return Err(Error::Config(format!("histograms need at least 2 bins, got {bins}")));
    }
    let mut counts: Vec<Vec<u64>> = Vec::new();
    // Per channel: pooled count, mean and sum of squared deviations, merged image by image.
    let mut moments: Vec<(f64, f64, f64)> = Vec::new();
    for img in images {
        let c = img.channels();
        if counts.is_empty() {
            counts = vec![vec![0; bins]; c];
            moments = vec![(0.0, 0.0, 0.0); c];
        } else if counts.len() != c {
            return Err(Error::Config(format!("images mix {} and {c} channels", counts.len())));
        }
        for ch in 0..c {
            let plane: Vec<f64> = img.channel(ch).iter().map(|&v| to_unit(v)).collect();
            for &u in &plane {
                counts[ch][((u * bins as f64).floor() as usize).min(bins - 1)] += 1;
            }
            let n_b = plane.len() as f64;
            let mean_b = plane.iter().sum::<f64>() / n_b;
            let m2_b: f64 = plane.iter().map(|u| (u - mean_b).powi(2)).sum();
            let (n_a, mean_a, m2_a) = moments[ch];
            let n = n_a + n_b;
            let delta = mean_b - mean_a;
            moments[ch] = (n, mean_a + delta * n_b / n, m2_a + m2_b + delta * delta * n_a * n_b / n);
        }
    }
    if counts.is_empty() {
        return Err(Error::Config("cannot fit constraints on an empty dataset".into()));
    }
    let prior_hist = counts
        .iter()
        .map(|c| {
            let n: u64 = c.iter().sum();
            c.iter().map(|&k| k as f64 / n as f64).collect()
        })
        .collect();
    Ok(ConstraintSpec {
        modality,
        bins,
        prior_hist,
        prior_mean: moments.iter().map(|m| m.1).collect(),
        prior_std: moments.iter().map(|m| (m.2 / m.0).sqrt()).collect(),
        lambda_ccl: DEFAULT_LAMBDA,
        lambda_scl: DEFAULT_LAMBDA,
        eps: DEFAULT_EPS,
        metric: HistogramMetric::Chi2,
        guidance_scale: 1.0,
    })
}

/// Lower bin and weight of the upper bin for one value under the triangular
/// kernel. Values are first clamped to `[0, 1]`, then to the outer bin
/// centres so every pixel carries unit mass.
fn soft_assign(x: f64, bins: usize) -> (usize, f64, bool) {
    let b = bins as f64;
    let pos = x.clamp(0.0, 1.0) * b - 0.5;
    let interior = pos > 0.0 && pos < b - 1.0;
    let pos = pos.clamp(0.0, b - 1.0);
    let k = (pos.floor() as usize).min(bins - 2);
    (k, pos - k as f64, interior)
}

/// Normalized triangular-kernel histogram with bin centres `(i + 0.5) / B`.
/// Piecewise linear in every value.
pub fn soft_histogram(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::Config(format!("histograms need at least 2 bins, got {bins}")));
    }
    let mut h = vec![0.0; bins];
    for &x in values {
        let (k, frac, _) = soft_assign(x, bins);
        h[k] += 1.0 - frac;
        h[k + 1] += frac;
    }
    if !values.is_empty() {
        let n = values.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
    }
    Ok(h)
}

/// Histogram distance used inside the constraint loss and its derivative
/// with respect to the predicted histogram.
///
/// The Bhattacharyya variant adds `eps` under the square root so the
/// derivative stays finite on empty bins.
pub fn histogram_loss(pred: &[f64], prior: &[f64], metric: HistogramMetric, eps: f64) -> (f64, Vec<f64>) {
    match metric {
        HistogramMetric::Chi2 => {
            let grad = pred
                .iter()
                .zip(prior)
                .map(|(&p, &q)| {
                    let (d, s) = (p - q, p + q + eps);
                    (2.0 * d * s - d * d) / (s * s)
                })
                .collect();
            (chi2_distance(pred, prior, eps), grad)
        }
        HistogramMetric::Euclidean => {
            let value = pred.iter().zip(prior).map(|(p, q)| (p - q).powi(2)).sum();
            (value, pred.iter().zip(prior).map(|(p, q)| 2.0 * (p - q)).collect())
        }
        HistogramMetric::Bhattacharyya => {
            let bc: f64 = pred.iter().zip(prior).map(|(p, q)| ((p + eps) * (q + eps)).sqrt()).sum();
            let grad = pred
                .iter()
                .zip(prior)
                .map(|(p, q)| -0.5 * ((q + eps) / (p + eps)).sqrt() / bc)
                .collect();
            (-bc.ln(), grad)
        }
    }
}

/// Loss terms and the gradient of the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValue {
    /// `lambda_ccl * ccl + lambda_scl * scl`.
    pub total: f64,
    pub ccl: f64,
    pub scl: f64,
    /// Derivative of `total` with respect to each input value, same layout.
    pub grad: Vec<f64>,
}

fn channel_planes<'a>(unit: &'a [f64], spec: &ConstraintSpec) -> Result<std::slice::ChunksExact<'a, f64>> {
    let c = spec.channels();
    ensure(c > 0 && !unit.is_empty() && unit.len() % c == 0, || {
        format!("{} values do not split into {c} channel planes", unit.len())
    })?;
    Ok(unit.chunks_exact(unit.len() / c))
}

fn check_bins(spec: &ConstraintSpec) -> Result<()> {
    if spec.bins < 2 || spec.prior_hist.iter().any(|h| h.len() != spec.bins) {
        return Err(Error::Config(format!(
            "constraint bins ({}) disagree with the prior histograms",
            spec.bins
        )));
    }
    Ok(())
}

/// Per-channel histogram distance between the soft histogram of `unit`
/// (planar, values on `[0, 1]`) and the priors, summed over channels.
pub fn channel_constraint_loss(unit: &[f64], spec: &ConstraintSpec) -> Result<f64> {
    check_bins(spec)?;
    let mut total = 0.0;
    for (plane, prior) in channel_planes(unit, spec)?.zip(&spec.prior_hist) {
        total += histogram_loss(&soft_histogram(plane, spec.bins)?, prior, spec.metric, spec.eps).0;
    }
    Ok(total)
}

fn mean_std(plane: &[f64]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `sum_c |mean_c - prior_mean_c| + |std_c - prior_std_c|` with population std.
pub fn statistical_constraint_loss(unit: &[f64], spec: &ConstraintSpec) -> Result<f64> {
    let mut total = 0.0;
    for (c, plane) in channel_planes(unit, spec)?.enumerate() {
        let (m, s) = mean_std(plane);
        total += (m - spec.prior_mean[c]).abs() + (s - spec.prior_std[c]).abs();
    }
    Ok(total)
}

/// Weighted constraint loss on a planar `[0, 1]` image with its analytic gradient.
pub fn constraint_loss(unit: &[f64], spec: &ConstraintSpec) -> Result<ConstraintValue> {
    check_bins(spec)?;
    let bins = spec.bins;
    let mut grad = vec![0.0; unit.len()];
    let (mut ccl, mut scl) = (0.0, 0.0);
    let plane_len = unit.len() / spec.channels().max(1);
    for (c, plane) in channel_planes(unit, spec)?.enumerate() {
        let n = plane.len() as f64;
        let g = &mut grad[c * plane_len..(c + 1) * plane_len];

        let (value, dh) = histogram_loss(&soft_histogram(plane, bins)?, &spec.prior_hist[c], spec.metric, spec.eps);
        ccl += value;
        if spec.lambda_ccl != 0.0 {
            let scale = spec.lambda_ccl * bins as f64 / n;
            for (gi, &x) in g.iter_mut().zip(plane) {
                let (k, _, interior) = soft_assign(x, bins);
                if interior && (0.0..=1.0).contains(&x) {
                    *gi += scale * (dh[k + 1] - dh[k]);
                }
            }
        }

        let (m, s) = mean_std(plane);
        let (dm, ds) = (m - spec.prior_mean[c], s - spec.prior_std[c]);
        scl += dm.abs() + ds.abs();
        if spec.lambda_scl != 0.0 {
            let mean_term = spec.lambda_scl * sign(dm) / n;
            let std_term = if s > 0.0 { spec.lambda_scl * sign(ds) / (n * s) } else { 0.0 };
            for (gi, &x) in g.iter_mut().zip(plane) {
                *gi += mean_term + std_term * (x - m);
            }
        }
    }
    Ok(ConstraintValue {
        total: spec.lambda_ccl * ccl + spec.lambda_scl * scl,
        ccl,
        scl,
        grad,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Constraint loss of a clean-image estimate on `[-1, 1]`, with the gradient
/// taken with respect to that estimate.
pub fn constraint_loss_signed(x0_hat: &[f32], spec: &ConstraintSpec) -> Result<ConstraintValue> {
    let unit: Vec<f64> = x0_hat.iter().map(|&v| to_unit(v)).collect();
    let mut value = constraint_loss(&unit, spec)?;
    for (g, &v) in value.grad.iter_mut().zip(x0_hat) {
        *g *= if (-1.0..=1.0).contains(&v) { 0.5 } else { 0.0 };
    }
    Ok(value)
}

/// Result of one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseStep {
    pub x_prev: Vec<f32>,
    pub x0_hat: Vec<f32>,
    /// Whether the constraint gradient was applied.
    pub guided: bool,
}

/// One ancestral step `x_t -> x_{t-1}` given the model's noise estimate.
///
/// The clean-image estimate is clamped to `[-1, 1]`. With constraints, the
/// posterior mean becomes `mean - s * var * grad`, where `grad` is the
/// constraint gradient at the estimate. Noise is drawn for every `t > 1`
/// whether or not guidance is active, so inert constraints reproduce the
/// unguided step exactly under the same rng.
pub fn guided_reverse_step<R: Rng + ?Sized>(
    x_t: &[f32],
    eps_pred: &[f32],
    t: usize,
    constraints: Option<&ConstraintSpec>,
    schedule: &DiffusionSchedule,
    form: PosteriorForm,
    rng: &mut R,
) -> Result<ReverseStep> {
    let xt: Vec<f64> = x_t.iter().map(|&v| v as f64).collect();
    let ep: Vec<f64> = eps_pred.iter().map(|&v| v as f64).collect();
    let x0 = schedule.predict_x0(&xt, &ep, t, true)?;
    let (mut mean, var) = schedule.posterior_params_with(&xt, &x0, t, form)?;
    let x0_hat: Vec<f32> = x0.iter().map(|&v| v as f32).collect();

    let mut guided = false;
    if let Some(spec) = constraints.filter(|s| !s.is_inert()) {
        let value = constraint_loss_signed(&x0_hat, spec)?;
        if value.grad.iter().all(|g| g.is_finite()) {
            let step = spec.guidance_scale * var;
            mean.iter_mut().zip(&value.grad).for_each(|(m, g)| *m -= step * g);
            guided = true;
        } else {
            log::warn!("non-finite constraint gradient at t={t}; step taken without guidance");
        }
    }

    let x_prev = if t > 1 {
        let sd = var.sqrt();
        mean.iter()
            .map(|&m| (m + sd * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    } else {
        mean.iter().map(|&m| m as f32).collect()
    };
    Ok(ReverseStep { x_prev, x0_hat, guided })
}

/// Conditioning for one trajectory: a source image and optional edge map.
#[derive(Debug, Clone)]
pub struct Condition {
    pub source: ImageTensor,
    pub edges: Option<EdgeMap>,
}

/// Reverse-process sampler over a trained denoiser.
#[derive(Debug, Clone, Copy)]
pub struct Sampler<'a> {
    pub model: &'a Denoiser,
    pub schedule: &'a DiffusionSchedule,
    pub constraints: Option<&'a ConstraintSpec>,
    pub posterior_form: PosteriorForm,
}

/// Trajectory index `i` draws from `indexed_rng(seed, Sampling, i)`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    indexed_rng(seed, Stream::Sampling, index)
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Denoiser, schedule: &'a DiffusionSchedule) -> Self {
        Self {
            model,
            schedule,
            constraints: None,
            posterior_form: PosteriorForm::Bayes,
        }
    }

    pub fn with_constraints(mut self, constraints: Option<&'a ConstraintSpec>) -> Self {
        self.constraints = constraints;
        self
    }

    /// Runs the full reverse loop `t = T..1` for a batch of conditions. The
    /// encoder for `source_modality` reads the sources and `label` feeds the
    /// direction embedding; the two are deliberately independent here.
    /// Trajectory `k` uses the rng of index `first_index + k`.
    pub fn sample(
        &self,
        conditions: &[Condition],
        source_modality: ModalityTag,
        label: DirectionLabel,
        seed: u64,
        first_index: u64,
    ) -> Result<Vec<ImageTensor>> {
        self.run(conditions, source_modality, label, seed, first_index, |_, _, _| {})
    }

    /// Like [`Sampler::sample`] for one condition, also returning `x_t` after
    /// every step (the first entry is the initial noise).
    pub fn trajectory(
        &self,
        condition: &Condition,
        source_modality: ModalityTag,
        label: DirectionLabel,
        seed: u64,
        index: u64,
    ) -> Result<(ImageTensor, Vec<Vec<f32>>)> {
        let mut states = Vec::new();
        let out = self.run(std::slice::from_ref(condition), source_modality, label, seed, index, |_, _, x| {
            states.push(x.to_vec())
        })?;
        Ok((out.into_iter().next().expect("one trajectory"), states))
    }

    fn run(
        &self,
        conditions: &[Condition],
        source_modality: ModalityTag,
        label: DirectionLabel,
        seed: u64,
        first_index: u64,
        mut observe: impl FnMut(usize, usize, &[f32]),
    ) -> Result<Vec<ImageTensor>> {
        if conditions.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(spec) = self.constraints {
            spec.validate()?;
            ensure(spec.channels() == TARGET_CHANNELS, || {
                format!("constraints cover {} channels, outputs have {TARGET_CHANNELS}", spec.channels())
            })?;
        }
        let cfg = self.model.config();
        let with_edges = !cfg.disable_cfc;
        let (h, w) = (conditions[0].source.height(), conditions[0].source.width());
        for c in conditions {
            ensure(c.source.channels() == SOURCE_CHANNELS, || "sources must have 3 channels".into())?;
            ensure(c.source.same_size(h, w) && h == cfg.image_size && w == cfg.image_size, || {
                format!(
                    "checkpoint expects {0}x{0} inputs, got {1}x{2}",
                    cfg.image_size,
                    c.source.height(),
                    c.source.width()
                )
            })?;
            ensure(!with_edges || c.edges.is_some(), || "this checkpoint needs an edge map per input".into())?;
        }

        let n = conditions.len();
        let plane = TARGET_CHANNELS * h * w;
        let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|k| trajectory_rng(seed, first_index + k as u64)).collect();
        let mut xs: Vec<Vec<f32>> = rngs
            .iter_mut()
            .map(|r| (0..plane).map(|_| r.sample::<f32, _>(StandardNormal)).collect())
            .collect();
        for (k, x) in xs.iter().enumerate() {
            observe(self.schedule.steps(), k, x);
        }

        let sources: Vec<f32> = conditions.iter().flat_map(|c| c.source.data().iter().copied()).collect();
        let pyramid = self
            .model
            .encode_source(&Tensor::new(&[n, SOURCE_CHANNELS, h, w], sources), source_modality)?;
        let labels = vec![label; n];

        for t in (1..=self.schedule.steps()).rev() {
            let mut z = Vec::with_capacity(n * cfg.input_channels() * h * w);
            for (x, c) in xs.iter().zip(conditions) {
                let noisy = ImageTensor::new(h, w, TARGET_CHANNELS, x.clone())?;
                let input = match (&c.edges, with_edges) {
                    (Some(e), true) => assemble_input(&noisy, &c.source, e)?,
                    _ => assemble_input_without_edges(&noisy, &c.source)?,
                };
                z.extend_from_slice(input.data());
            }
            let zt = Tensor::new(&[n, cfg.input_channels(), h, w], z);
            let eps = self.model.predict(&zt, pyramid.as_ref(), &labels, &vec![t; n])?;
            for (k, (x, rng)) in xs.iter_mut().zip(&mut rngs).enumerate() {
                let step = guided_reverse_step(
                    x,
                    eps.sample(k),
                    t,
                    self.constraints,
                    self.schedule,
                    self.posterior_form,
                    rng,
                )?;
                *x = step.x_prev;
                observe(t - 1, k, x);
            }
        }
        xs.into_iter().map(|x| ImageTensor::new(h, w, TARGET_CHANNELS, x)).collect()
    }
}

/// Translates sources of `source_modality` along `direction`. Trajectory `k`
/// uses the rng of index `first_index + k`.
pub fn translate_batch(
    sampler: &Sampler<'_>,
    conditions: &[Condition],
    direction: DirectionLabel,
    source_modality: ModalityTag,
    seed: u64,
    first_index: u64,
) -> Result<Vec<ImageTensor>> {
    if direction.source_modality() != source_modality {
        return Err(Error::Argument(format!(
            "direction {direction} expects a {} source, got {source_modality}",
            direction.source_modality()
        )));
    }
    if let Some(spec) = sampler.constraints {
        if spec.modality != direction.target_modality() {
            return Err(Error::Argument(format!(
                "constraints were fitted on {} but {direction} generates {}",
                spec.modality,
                direction.target_modality()
            )));
        }
    }
    sampler.sample(conditions, source_modality, direction, seed, first_index)
}

/// Translates one source image. See [`translate_batch`].
#[allow(clippy::too_many_arguments)]
pub fn translate(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    source: &ImageTensor,
    edges: Option<&EdgeMap>,
    direction: DirectionLabel,
    source_modality: ModalityTag,
    constraints: Option<&ConstraintSpec>,
    seed: u64,
) -> Result<ImageTensor> {
    let sampler = Sampler::new(model, schedule).with_constraints(constraints);
    let cond = Condition {
        source: source.clone(),
        edges: edges.cloned(),
    };
    let mut out = translate_batch(&sampler, std::slice::from_ref(&cond), direction, source_modality, seed, 0)?;
    Ok(out.remove(0))
}

/// Channel means of a planar `[-1, 1]` image on the `[0, 1]` scale.
pub fn unit_channel_means(img: &ImageTensor) -> Vec<f64> {
    (0..img.channels())
        .map(|c| {
            let p = img.channel(c);
            p.iter().map(|&v| to_unit(v)).sum::<f64>() / p.len() as f64
        })
        .collect()
}

/// Hard per-channel histograms of a planar `[-1, 1]` image.
pub fn unit_channel_histograms(img: &ImageTensor, bins: usize) -> Vec<Vec<f64>> {
    (0..img.channels())
        .map(|c| hard_histogram(img.channel(c).iter().map(|&v| to_unit(v)), bins))
        .collect()
}
