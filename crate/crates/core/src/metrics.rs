//! Image-quality and distribution metrics.
//!
//! PSNR and SSIM work on 8-bit values. FID consumes feature vectors produced
//! elsewhere; [`smoke_features`] is a tiny stand-in extractor whose numbers are
//! not comparable with Inception-based FID. LPIPS is only an interface.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::conditioning::ImageTensor;
use crate::data_io::write_atomic;
use crate::error::{ensure, Error, Result};

/// Stabilizer in the chi-square denominator.
pub const CHI2_EPS: f64 = 1e-6;

/// Peak signal-to-noise ratio in dB over all elements. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &[u8], b: &[u8]) -> Result<f64> {
    ensure(a.len() == b.len() && !a.is_empty(), || {
        format!("psnr needs equal non-empty inputs, got {} and {} values", a.len(), b.len())
    })?;
    let sse: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (a.len() as f64 * 255.0 * 255.0 / sse).log10())
}

pub fn psnr_images(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    psnr(&a.to_u8_interleaved(), &b.to_u8_interleaved())
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    ensure(
        (a.height(), a.width(), a.channels()) == (b.height(), b.width(), b.channels()),
        || {
            format!(
                "shape mismatch: {}x{}x{} vs {}x{}x{}",
                a.height(),
                a.width(),
                a.channels(),
                b.height(),
                b.width(),
                b.channels()
            )
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimWindow {
    /// One window covering the whole image.
    Global,
    /// 11x11 Gaussian windows with sigma 1.5, averaged over valid positions.
    #[default]
    Gaussian11,
}

const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// SSIM of two single-channel 8-bit planes of size `h x w`.
pub fn ssim_plane(a: &[u8], b: &[u8], h: usize, w: usize, window: SsimWindow) -> Result<f64> {
    ensure(a.len() == h * w && b.len() == h * w && h * w > 0, || "ssim: plane size mismatch".into())?;
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    match window {
        SsimWindow::Global => {
            let n = fa.len() as f64;
            let (mx, my) = (fa.iter().sum::<f64>() / n, fb.iter().sum::<f64>() / n);
            let vx = fa.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
            let vy = fb.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
            let cxy = fa.iter().zip(&fb).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
            Ok(ssim_formula(mx, my, vx, vy, cxy))
        }
        SsimWindow::Gaussian11 => {
            const K: usize = 11;
            ensure(h >= K && w >= K, || format!("ssim gaussian11 needs at least 11x11 pixels, got {h}x{w}"))?;
            let g: Vec<f64> = (0..K).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
            let norm: f64 = g.iter().sum::<f64>().powi(2);
            let mut total = 0.0;
            let mut count = 0usize;
            for y0 in 0..=h - K {
                for x0 in 0..=w - K {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..K {
                        for dx in 0..K {
                            let wgt = g[dy] * g[dx] / norm;
                            let i = (y0 + dy) * w + x0 + dx;
                            let (x, y) = (fa[i], fb[i]);
                            mx += wgt * x;
                            my += wgt * y;
                            sxx += wgt * x * x;
                            syy += wgt * y * y;
                            sxy += wgt * x * y;
                        }
                    }
                    total += ssim_formula(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my);
                    count += 1;
                }
            }
            Ok(total / count as f64)
        }
    }
}

/// Channel-averaged SSIM of two images.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, window: SsimWindow) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let (ia, ib) = (a.to_u8_interleaved(), b.to_u8_interleaved());
    let plane = |buf: &[u8], ch: usize| -> Vec<u8> { buf.iter().skip(ch).step_by(c).copied().collect() };
    let mut sum = 0.0;
    for ch in 0..c {
        sum += ssim_plane(&plane(&ia, ch), &plane(&ib, ch), h, w, window)?;
    }
    Ok(sum / c as f64)
}

fn mean_and_covariance(feats: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (feats.len(), feats[0].len());
    let mut mean = vec![0.0; d];
    for f in feats {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (f[j] - mean[j]);
            }
        }
    }
    (mean, cov / (n as f64 - 1.0))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| if l > 0.0 { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the matrix square root is computed as the sum of square roots
/// of the eigenvalues of `S_a^(1/2) S_b S_a^(1/2)`, with negative eigenvalues
/// clamped to zero.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    ensure(a.len() >= 2 && b.len() >= 2, || "fid needs at least two vectors per set".into())?;
    let d = a[0].len();
    ensure(d > 0 && a.iter().chain(b).all(|f| f.len() == d), || {
        "fid feature vectors must share one non-zero dimension".into()
    })?;
    let (ma, sa) = mean_and_covariance(a);
    let (mb, sb) = mean_and_covariance(b);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| if l > 1e-8 { l.sqrt() } else { 0.0 }).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistogramMetric {
    #[default]
    Chi2,
    Euclidean,
    Bhattacharyya,
}

impl HistogramMetric {
    pub const ALL: [HistogramMetric; 3] = [HistogramMetric::Chi2, HistogramMetric::Euclidean, HistogramMetric::Bhattacharyya];

    pub fn name(self) -> &'static str {
        match self {
            HistogramMetric::Chi2 => "chi2",
            HistogramMetric::Euclidean => "euclidean",
            HistogramMetric::Bhattacharyya => "bhattacharyya",
        }
    }
}

impl fmt::Display for HistogramMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HistogramMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HistogramMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown histogram metric {s:?}, expected chi2, euclidean or bhattacharyya")))
    }
}

/// `sum_i (p_i - q_i)^2 / (p_i + q_i + eps)`.
pub fn chi2_distance(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).powi(2) / (a + b + eps)).sum()
}

/// Distance between two equally long histograms. Bhattacharyya distance of
/// histograms without overlap is `f64::INFINITY`.
pub fn histogram_distance(p: &[f64], q: &[f64], metric: HistogramMetric) -> Result<f64> {
    ensure(p.len() == q.len(), || format!("histogram lengths differ: {} vs {}", p.len(), q.len()))?;
    Ok(match metric {
        HistogramMetric::Chi2 => chi2_distance(p, q, CHI2_EPS),
        HistogramMetric::Euclidean => p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum(),
        HistogramMetric::Bhattacharyya => {
            let bc: f64 = p.iter().zip(q).map(|(a, b)| (a * b).max(0.0).sqrt()).sum();
            if bc <= 0.0 {
                f64::INFINITY
            } else {
                (-bc.ln()).max(0.0)
            }
        }
    })
}

/// Normalized hard histogram of values on `[0, 1]`; bin `i` covers
/// `[i / B, (i + 1) / B)` and 1.0 falls into the last bin.
pub fn hard_histogram(values: impl IntoIterator<Item = f64>, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let mut n = 0usize;
    for v in values {
        let i = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        h[i] += 1.0;
        n += 1;
    }
    if n > 0 {
        h.iter_mut().for_each(|x| *x /= n as f64);
    }
    h
}

/// Per-channel hard histograms of an image's 8-bit values scaled to `[0, 1]`.
pub fn channel_histograms(img: &ImageTensor, bins: usize) -> Vec<Vec<f64>> {
    let bytes = img.to_u8_interleaved();
    let c = img.channels();
    (0..c)
        .map(|ch| hard_histogram(bytes.iter().skip(ch).step_by(c).map(|&b| b as f64 / 255.0), bins))
        .collect()
}

/// Per-channel means of an image's 8-bit values scaled to `[0, 1]`.
pub fn channel_means(img: &ImageTensor) -> Vec<f64> {
    let bytes = img.to_u8_interleaved();
    let c = img.channels();
    let n = (bytes.len() / c) as f64;
    (0..c)
        .map(|ch| bytes.iter().skip(ch).step_by(c).map(|&b| b as f64 / 255.0).sum::<f64>() / n)
        .collect()
}

/// Tiny feature extractor for smoke tests only: the mean over all
/// non-overlapping 8x8 luminance patches, flattened to 64 values.
/// Distances built on it are not comparable with Inception-based FID.
pub fn smoke_features(img: &ImageTensor) -> Vec<f64> {
    const P: usize = 8;
    let lum = img.luminance_unit();
    let (h, w) = (img.height(), img.width());
    let mut feat = vec![0.0; P * P];
    let mut count = 0usize;
    for y0 in (0..h.saturating_sub(P - 1)).step_by(P) {
        for x0 in (0..w.saturating_sub(P - 1)).step_by(P) {
            for dy in 0..P {
                for dx in 0..P {
                    feat[dy * P + dx] += lum[(y0 + dy) * w + x0 + dx] as f64;
                }
            }
            count += 1;
        }
    }
    if count > 0 {
        feat.iter_mut().for_each(|v| *v /= count as f64);
    }
    feat
}

/// Learned perceptual distance between two images. No implementation ships
/// with this crate; plug in a model that carries pretrained weights.
pub trait PerceptualDistance {
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// Reads a feature CSV with header `dim_0,...,dim_{k-1}`, one vector per row.
pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    for (i, h) in headers.iter().enumerate() {
        if h != format!("dim_{i}") {
            return Err(Error::Ingestion(format!(
                "{}: column {i} is {h:?}, expected \"dim_{i}\"",
                path.display()
            )));
        }
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let v: std::result::Result<Vec<f64>, _> = row.iter().map(str::parse::<f64>).collect();
        out.push(v.map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

pub fn write_features(path: &Path, feats: &[Vec<f64>]) -> Result<()> {
    let dim = feats.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record((0..dim).map(|i| format!("dim_{i}")))?;
    for f in feats {
        w.write_record(f.iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Metrics of one predicted image against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Channel-averaged distance between predicted and reference histograms.
    pub hist_chi2: f64,
    pub hist_euclidean: f64,
    pub hist_bhattacharyya: f64,
}

impl SampleMetrics {
    pub fn compute(sample_id: &str, pred: &ImageTensor, truth: &ImageTensor, bins: usize) -> Result<Self> {
        let hp = channel_histograms(pred, bins);
        let ht = channel_histograms(truth, bins);
        let mean_dist = |m: HistogramMetric| -> Result<f64> {
            let mut s = 0.0;
            for (p, q) in hp.iter().zip(&ht) {
                s += histogram_distance(p, q, m)?;
            }
            Ok(s / hp.len() as f64)
        };
        Ok(Self {
            sample_id: sample_id.to_string(),
            psnr_db: psnr_images(pred, truth)?,
            ssim: ssim(pred, truth, SsimWindow::default())?,
            hist_chi2: mean_dist(HistogramMetric::Chi2)?,
            hist_euclidean: mean_dist(HistogramMetric::Euclidean)?,
            hist_bhattacharyya: mean_dist(HistogramMetric::Bhattacharyya)?,
        })
    }
}

/// Per-image metrics plus set-level aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub fid: Option<f64>,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            skipped += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::NAN }, skipped)
}

impl MetricReport {
    pub fn count(&self) -> usize {
        self.samples.len()
    }

    /// Mean PSNR over finite values and the number of identical pairs left out.
    pub fn mean_psnr(&self) -> (f64, usize) {
        finite_mean(self.samples.iter().map(|s| s.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        finite_mean(self.samples.iter().map(|s| s.ssim)).0
    }

    pub fn mean_hist(&self, metric: HistogramMetric) -> f64 {
        finite_mean(self.samples.iter().map(|s| match metric {
            HistogramMetric::Chi2 => s.hist_chi2,
            HistogramMetric::Euclidean => s.hist_euclidean,
            HistogramMetric::Bhattacharyya => s.hist_bhattacharyya,
        }))
        .0
    }

    /// CSV with one row per sample and a final `summary` row holding means,
    /// FID and a note on excluded or missing values.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let fmt = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.6}") };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "sample_id",
            "psnr_db",
            "ssim",
            "hist_chi2",
            "hist_euclidean",
            "hist_bhattacharyya",
            "fid",
            "note",
        ])?;
        for s in &self.samples {
            w.write_record([
                s.sample_id.clone(),
                fmt(s.psnr_db),
                fmt(s.ssim),
                fmt(s.hist_chi2),
                fmt(s.hist_euclidean),
                fmt(s.hist_bhattacharyya),
                String::new(),
                String::new(),
            ])?;
        }
        let (psnr, skipped) = self.mean_psnr();
        let mut notes = Vec::new();
        if skipped > 0 {
            notes.push(format!("{skipped} identical pairs excluded from the psnr mean"));
        }
        if self.fid.is_none() {
            notes.push("fid omitted: no feature files supplied".to_string());
        }
        w.write_record([
            "summary".to_string(),
            fmt(psnr),
            fmt(self.mean_ssim()),
            fmt(self.mean_hist(HistogramMetric::Chi2)),
            fmt(self.mean_hist(HistogramMetric::Euclidean)),
            fmt(self.mean_hist(HistogramMetric::Bhattacharyya)),
            self.fid.map(fmt).unwrap_or_default(),
            notes.join("; "),
        ])?;
        w.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn psnr_hand_values() {
        let a = vec![100u8; 256];
        let b = vec![116u8; 256];
        assert!((psnr(&a, &b).unwrap() - 24.0486).abs() < 1e-3);
        let mut c = vec![0u8; 256];
        c[17] = 255;
        assert!((psnr(&vec![0u8; 256], &c).unwrap() - 24.0824).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b[..10]).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let a: Vec<u8> = (0..400).map(|i| (i % 200) as u8 + 20).collect();
        let mut last = f64::INFINITY;
        for amp in [2i32, 6, 12] {
            let b: Vec<u8> = a
                .iter()
                .enumerate()
                .map(|(i, &v)| (v as i32 + if i % 2 == 0 { amp } else { -amp }) as u8)
                .collect();
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_global_matches_direct_formula() {
        let a = [10u8, 50, 90, 200];
        let b = [20u8, 40, 100, 180];
        let (mx, my) = (87.5, 85.0);
        let vx = ((10.0f64 - mx).powi(2) + (50.0f64 - mx).powi(2) + (90.0f64 - mx).powi(2) + (200.0f64 - mx).powi(2)) / 4.0;
        let vy = ((20.0f64 - my).powi(2) + (40.0f64 - my).powi(2) + (100.0f64 - my).powi(2) + (180.0f64 - my).powi(2)) / 4.0;
        let cxy = ((10.0 - mx) * (20.0 - my) + (50.0 - mx) * (40.0 - my) + (90.0 - mx) * (100.0 - my) + (200.0 - mx) * (180.0 - my)) / 4.0;
        let c1 = 6.5025;
        let c2 = 58.5225;
        let want = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        let got = ssim_plane(&a, &b, 2, 2, SsimWindow::Global).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_inverse_and_small_input() {
        let a: Vec<u8> = (0..16 * 16).map(|i| ((i * 37) % 256) as u8).collect();
        assert_eq!(ssim_plane(&a, &a, 16, 16, SsimWindow::Gaussian11).unwrap(), 1.0);
        assert_eq!(ssim_plane(&a, &a, 16, 16, SsimWindow::Global).unwrap(), 1.0);
        let inv: Vec<u8> = a.iter().map(|v| 255 - v).collect();
        assert!(ssim_plane(&a, &inv, 16, 16, SsimWindow::Global).unwrap() < 1.0);
        assert!(ssim_plane(&a[..100], &a[..100], 10, 10, SsimWindow::Gaussian11).is_err());
    }

    #[test]
    fn fid_scalar_cases() {
        let s = 0.5f64.sqrt();
        let unit = vec![vec![-s], vec![s]];
        let shifted = vec![vec![1.0 - s], vec![1.0 + s]];
        let wide = vec![vec![-2.0 * s], vec![2.0 * s]];
        assert!((fid_from_features(&unit, &shifted).unwrap() - 1.0).abs() < 1e-8);
        assert!((fid_from_features(&unit, &wide).unwrap() - 1.0).abs() < 1e-8);
        assert!(fid_from_features(&unit, &unit).unwrap().abs() < 1e-8);
        assert!(fid_from_features(&unit[..1], &unit).is_err());
        assert!(fid_from_features(&unit, &[vec![0.0, 1.0], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn fid_is_symmetric() {
        let a: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 * 0.1]).collect();
        let b: Vec<Vec<f64>> = (0..15).map(|i| vec![(i as f64).cos(), 0.5 * i as f64 / 15.0, (i as f64).sin() * 2.0]).collect();
        let ab = fid_from_features(&a, &b).unwrap();
        let ba = fid_from_features(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        assert!(ab > 0.0);
    }

    #[test]
    fn histogram_hand_values() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        assert!((histogram_distance(&p, &q, HistogramMetric::Chi2).unwrap() - 0.4 / 3.0).abs() < 1e-6);
        assert!((histogram_distance(&p, &q, HistogramMetric::Euclidean).unwrap() - 0.125).abs() < 1e-12);
        let want = -(0.125f64.sqrt() + 0.375f64.sqrt()).ln();
        assert!((histogram_distance(&p, &q, HistogramMetric::Bhattacharyya).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.034668).abs() < 1e-6);
        assert_eq!(
            histogram_distance(&[1.0, 0.0], &[0.0, 1.0], HistogramMetric::Bhattacharyya).unwrap(),
            f64::INFINITY
        );
        assert!(histogram_distance(&p, &[1.0], HistogramMetric::Chi2).is_err());
        assert!("hellinger".parse::<HistogramMetric>().is_err());
    }

    #[test]
    fn report_csv_has_summary() {
        let img = ImageTensor::constant(16, 16, 3, 0.2);
        let other = ImageTensor::constant(16, 16, 3, 0.1);
        let report = MetricReport {
            samples: vec![
                SampleMetrics::compute("a", &img, &img, 32).unwrap(),
                SampleMetrics::compute("b", &img, &other, 32).unwrap(),
            ],
            fid: None,
        };
        let text = String::from_utf8(report.to_csv().unwrap()).unwrap();
        let last = text.lines().last().unwrap();
        assert!(last.starts_with("summary,"));
        assert!(last.contains("1 identical pairs excluded"));
        assert!(last.contains("fid omitted"));
        assert_eq!(report.samples[0].ssim, 1.0);
    }

    #[test]
    fn feature_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let feats = vec![vec![0.5, -1.25], vec![3.0, 0.0]];
        write_features(&path, &feats).unwrap();
        assert_eq!(read_features(&path).unwrap(), feats);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().next(), Some("dim_0,dim_1"));
    }

    proptest! {
        #[test]
        fn distances_vanish_at_equality_and_are_nonnegative(raw in proptest::collection::vec(0.01f64..1.0, 2..12), raw2 in proptest::collection::vec(0.01f64..1.0, 12)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum::<f64>(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let p = norm(&raw);
            let q = norm(&raw2[..p.len()]);
            for m in HistogramMetric::ALL {
                prop_assert!(histogram_distance(&p, &p, m).unwrap().abs() < 1e-9);
                prop_assert!(histogram_distance(&p, &q, m).unwrap() >= 0.0);
            }
            let a = chi2_distance(&p, &q, CHI2_EPS);
            let b = chi2_distance(&q, &p, CHI2_EPS);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn ssim_stays_in_range(a in proptest::collection::vec(any::<u8>(), 144), b in proptest::collection::vec(any::<u8>(), 144)) {
            for w in [SsimWindow::Global, SsimWindow::Gaussian11] {
                let s = ssim_plane(&a, &b, 12, 12, w).unwrap();
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }
    }
}
