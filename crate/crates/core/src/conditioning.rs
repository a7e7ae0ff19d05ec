//! Image containers, modality bookkeeping, edge maps and assembly of the
//! channel-stacked denoiser input.
//!
//! Images are stored planar (`C x H x W`, row-major within a plane) with
//! values in `[-1, 1]`. Edge maps are single-plane with values in `[0, 1]`.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Channels of the noisy target block.
pub const TARGET_CHANNELS: usize = 3;
/// Channels of the source block (infrared is replicated to three).
pub const SOURCE_CHANNELS: usize = 3;
/// Edge channels appended after the source block.
pub const EDGE_CHANNELS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityTag {
    Ir,
    Vis,
}

impl ModalityTag {
    pub fn other(self) -> Self {
        match self {
            ModalityTag::Ir => ModalityTag::Vis,
            ModalityTag::Vis => ModalityTag::Ir,
        }
    }

    /// Directory name used in dataset layouts.
    pub fn dir_name(self) -> &'static str {
        match self {
            ModalityTag::Ir => "ir",
            ModalityTag::Vis => "vis",
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for ModalityTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ir" => Ok(ModalityTag::Ir),
            "vis" => Ok(ModalityTag::Vis),
            other => Err(Error::Argument(format!("unknown modality {other:?}, expected ir or vis"))),
        }
    }
}

/// Translation direction. The id is the row of the direction embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirectionLabel {
    #[serde(rename = "ir2vis")]
    IrToVis,
    #[serde(rename = "vis2ir")]
    VisToIr,
}

impl DirectionLabel {
    pub const ALL: [DirectionLabel; 2] = [DirectionLabel::IrToVis, DirectionLabel::VisToIr];

    pub fn id(self) -> usize {
        match self {
            DirectionLabel::IrToVis => 0,
            DirectionLabel::VisToIr => 1,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(DirectionLabel::IrToVis),
            1 => Ok(DirectionLabel::VisToIr),
            _ => Err(Error::Argument(format!("direction label {id} is not 0 or 1"))),
        }
    }

    pub fn target_modality(self) -> ModalityTag {
        match self {
            DirectionLabel::IrToVis => ModalityTag::Vis,
            DirectionLabel::VisToIr => ModalityTag::Ir,
        }
    }

    pub fn source_modality(self) -> ModalityTag {
        self.target_modality().other()
    }

    pub fn from_target(target: ModalityTag) -> Self {
        match target {
            ModalityTag::Vis => DirectionLabel::IrToVis,
            ModalityTag::Ir => DirectionLabel::VisToIr,
        }
    }
}

impl fmt::Display for DirectionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectionLabel::IrToVis => "ir2vis",
            DirectionLabel::VisToIr => "vis2ir",
        })
    }
}

impl FromStr for DirectionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ir2vis" => Ok(DirectionLabel::IrToVis),
            "vis2ir" => Ok(DirectionLabel::VisToIr),
            other => Err(Error::Argument(format!("unknown direction {other:?}, expected ir2vis or vis2ir"))),
        }
    }
}

/// Planar image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure(channels == 1 || channels == 3, || format!("images have 1 or 3 channels, got {channels}"))?;
        ensure(height > 0 && width > 0, || "image dimensions must be positive".into())?;
        ensure(data.len() == height * width * channels, || {
            format!("{}x{}x{} image needs {} values, got {}", height, width, channels, height * width * channels, data.len())
        })?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("valid constant image")
    }

    /// From interleaved 8-bit samples (`HWC`), mapping `v -> v / 127.5 - 1`.
    pub fn from_u8_interleaved(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        ensure(bytes.len() == height * width * channels, || "byte buffer size mismatch".into())?;
        let plane = height * width;
        let mut data = vec![0.0; bytes.len()];
        for (i, px) in bytes.chunks_exact(channels).enumerate() {
            for (c, &b) in px.iter().enumerate() {
                data[c * plane + i] = byte_to_signed(b);
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Interleaved 8-bit samples, `v -> round((clamp(v) + 1) * 127.5)` with halves rounded up.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0u8; self.data.len()];
        for c in 0..self.channels {
            for i in 0..plane {
                out[i * self.channels + c] = signed_to_byte(self.data[c * plane + i]);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn same_size(&self, other_h: usize, other_w: usize) -> bool {
        self.height == other_h && self.width == other_w
    }

    /// Per-pixel luminance on `[0, 1]` (Rec. 601 weights for colour images).
    pub fn luminance_unit(&self) -> Vec<f32> {
        let to_unit = |v: f32| ((v + 1.0) * 0.5).clamp(0.0, 1.0);
        if self.channels == 1 {
            return self.data.iter().map(|&v| to_unit(v)).collect();
        }
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * to_unit(r) + 0.587 * to_unit(g) + 0.114 * to_unit(b))
            .collect()
    }
}

pub(crate) fn byte_to_signed(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub(crate) fn signed_to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v as f64 + 1.0) * 127.5 + 0.5).floor().min(255.0) as u8
}

/// Copies a single-channel image into three identical channels.
pub fn replicate_gray_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    ensure(img.channels == 1, || {
        format!("replication expects a 1-channel image, got {} channels", img.channels)
    })?;
    let mut data = Vec::with_capacity(img.data.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&img.data);
    }
    ImageTensor::new(img.height, img.width, 3, data)
}

/// Single-channel edge strength map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure(data.len() == height * width, || "edge map size mismatch".into())?;
        ensure(data.iter().all(|v| (0.0..=1.0).contains(v)), || "edge values must lie in [0, 1]".into())?;
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EdgeDetector {
    #[default]
    Sobel,
    Canny,
    /// Precomputed maps read from `edges_ir/` or `edges_vis/`.
    External,
}

impl FromStr for EdgeDetector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobel" => Ok(EdgeDetector::Sobel),
            "canny" => Ok(EdgeDetector::Canny),
            "external" => Ok(EdgeDetector::External),
            other => Err(Error::Argument(format!("unknown edge detector {other:?}"))),
        }
    }
}

impl fmt::Display for EdgeDetector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeDetector::Sobel => "sobel",
            EdgeDetector::Canny => "canny",
            EdgeDetector::External => "external",
        })
    }
}

/// Hysteresis thresholds on the normalised gradient magnitude, where a unit
/// luminance step gives magnitude 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyThresholds {
    pub low: f32,
    pub high: f32,
}

impl Default for CannyThresholds {
    fn default() -> Self {
        Self { low: 0.1, high: 0.3 }
    }
}

/// Location of a precomputed edge map for one sample.
#[derive(Debug, Clone, Copy)]
pub struct ExternalEdge<'a> {
    pub sample_id: &'a str,
    pub path: &'a Path,
}

/// Edge map of `img`.
///
/// Sobel returns the gradient magnitude of the luminance divided by 4 and
/// clipped to 1; Canny returns a binary map. External maps are read from
/// `external` and rescaled to `[0, 1]`.
pub fn detect_edges(img: &ImageTensor, detector: EdgeDetector, external: Option<ExternalEdge<'_>>) -> Result<EdgeMap> {
    match detector {
        EdgeDetector::Sobel => Ok(sobel(img)),
        EdgeDetector::Canny => Ok(canny(img, CannyThresholds::default())),
        EdgeDetector::External => {
            let ext = external.ok_or_else(|| Error::Ingestion("external edge detector selected without a sidecar file".into()))?;
            if !ext.path.is_file() {
                return Err(Error::Ingestion(format!(
                    "sample {}: external edge map {} not found",
                    ext.sample_id,
                    ext.path.display()
                )));
            }
            let gray = crate::data_io::load_gray_unit(ext.path)?;
            let gray = if gray.height() != img.height || gray.width() != img.width {
                let resized = crate::data_io::resize_plane(gray.data(), gray.height(), gray.width(), img.height, img.width);
                EdgeMap::new(img.height, img.width, resized.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?
            } else {
                gray
            };
            Ok(gray)
        }
    }
}

fn sobel_gradients(lum: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        lum[y * w + x]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Normalised Sobel gradient magnitude of the luminance.
pub fn sobel(img: &ImageTensor) -> EdgeMap {
    let (h, w) = (img.height, img.width);
    let (gx, gy) = sobel_gradients(&img.luminance_unit(), h, w);
    let data = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| ((a * a + b * b).sqrt() / 4.0).min(1.0))
        .collect();
    EdgeMap { height: h, width: w, data }
}

fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = (x as isize + j as isize - radius).clamp(0, w as isize - 1) as usize;
                s += k * plane[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = (y as isize + j as isize - radius).clamp(0, h as isize - 1) as usize;
                s += k * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Binary Canny edges: Gaussian smoothing (sigma 1), Sobel gradients,
/// non-maximum suppression and 8-connected hysteresis.
pub fn canny(img: &ImageTensor, thresholds: CannyThresholds) -> EdgeMap {
    let (h, w) = (img.height, img.width);
    let smooth = gaussian_blur(&img.luminance_unit(), h, w, 1.0);
    let (gx, gy) = sobel_gradients(&smooth, h, w);
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt() / 4.0).collect();
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (yi, xi) = (y as isize, x as isize);
            if m >= at(yi + dy, xi + dx) && m >= at(yi - dy, xi - dx) {
                thin[i] = m;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= thresholds.high {
            out[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= thresholds.low {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    EdgeMap { height: h, width: w, data: out }
}

/// Channel-stacked denoiser input: noisy target, then source, then edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInput {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ConditionedInput {
    pub const TARGET: Range<usize> = 0..TARGET_CHANNELS;
    pub const SOURCE: Range<usize> = TARGET_CHANNELS..TARGET_CHANNELS + SOURCE_CHANNELS;
    pub const EDGES: Range<usize> =
        TARGET_CHANNELS + SOURCE_CHANNELS..TARGET_CHANNELS + SOURCE_CHANNELS + EDGE_CHANNELS;

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn has_edges(&self) -> bool {
        self.channels == TARGET_CHANNELS + SOURCE_CHANNELS + EDGE_CHANNELS
    }

    /// Planes `range` as one contiguous slice.
    pub fn planes(&self, range: Range<usize>) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[range.start * plane..range.end * plane]
    }
}

fn check_pair(noisy: &ImageTensor, source: &ImageTensor) -> Result<()> {
    ensure(noisy.channels == TARGET_CHANNELS, || {
        format!("noisy target must have {TARGET_CHANNELS} channels, got {}", noisy.channels)
    })?;
    ensure(source.channels == SOURCE_CHANNELS, || {
        format!("source must have {SOURCE_CHANNELS} channels, got {}", source.channels)
    })?;
    ensure(noisy.same_size(source.height, source.width), || {
        format!(
            "noisy target is {}x{}, source is {}x{}",
            noisy.height, noisy.width, source.height, source.width
        )
    })
}

/// Stacks noisy target, source and edge map along the channel axis.
pub fn assemble_input(noisy_target: &ImageTensor, source: &ImageTensor, edges: &EdgeMap) -> Result<ConditionedInput> {
    check_pair(noisy_target, source)?;
    ensure(noisy_target.same_size(edges.height, edges.width), || {
        format!(
            "edge map is {}x{}, images are {}x{}",
            edges.height, edges.width, noisy_target.height, noisy_target.width
        )
    })?;
    let mut data = Vec::with_capacity(noisy_target.data.len() + source.data.len() + edges.data.len());
    data.extend_from_slice(&noisy_target.data);
    data.extend_from_slice(&source.data);
    data.extend_from_slice(&edges.data);
    Ok(ConditionedInput {
        height: noisy_target.height,
        width: noisy_target.width,
        channels: TARGET_CHANNELS + SOURCE_CHANNELS + EDGE_CHANNELS,
        data,
    })
}

/// Six-channel input used when cross-modality feature control is disabled.
pub fn assemble_input_without_edges(noisy_target: &ImageTensor, source: &ImageTensor) -> Result<ConditionedInput> {
    check_pair(noisy_target, source)?;
    let mut data = Vec::with_capacity(noisy_target.data.len() + source.data.len());
    data.extend_from_slice(&noisy_target.data);
    data.extend_from_slice(&source.data);
    Ok(ConditionedInput {
        height: noisy_target.height,
        width: noisy_target.width,
        channels: TARGET_CHANNELS + SOURCE_CHANNELS,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImageTensor {
        let n = h * w * c;
        ImageTensor::new(h, w, c, (0..n).map(|i| i as f32 / n as f32 * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn replication_copies_channel() {
        let c = ImageTensor::constant(3, 3, 1, 0.25);
        let r = replicate_gray_to_rgb(&c).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.25));
        let g = ramp(2, 2, 1);
        let r = replicate_gray_to_rgb(&g).unwrap();
        for ch in 0..3 {
            assert_eq!(r.channel(ch), g.data());
        }
        assert!(matches!(replicate_gray_to_rgb(&r), Err(Error::Argument(_))));
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let e = detect_edges(&ImageTensor::constant(6, 6, 3, 0.3), EdgeDetector::Sobel, None).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        let c = detect_edges(&ImageTensor::constant(6, 6, 3, 0.3), EdgeDetector::Canny, None).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_vertical_step() {
        // Columns 0..4 black, 4..8 white: kernel sums give |Gx| = 4 beside the step.
        let (h, w) = (8, 8);
        let data: Vec<f32> = (0..h * w).map(|i| if i % w >= 4 { 1.0 } else { -1.0 }).collect();
        let img = ImageTensor::new(h, w, 1, data).unwrap();
        let e = sobel(&img);
        for y in 0..h {
            for x in 0..w {
                let v = e.data()[y * w + x];
                match x {
                    3 | 4 => assert!((v - 1.0).abs() < 1e-6),
                    0 | 1 | 6 | 7 => assert_eq!(v, 0.0),
                    _ => assert!(v <= 1.0),
                }
            }
        }
    }

    #[test]
    fn canny_marks_step_with_binary_values() {
        let (h, w) = (16, 16);
        let data: Vec<f32> = (0..h * w).map(|i| if i % w >= 8 { 1.0 } else { -1.0 }).collect();
        let e = canny(&ImageTensor::new(h, w, 1, data).unwrap(), CannyThresholds::default());
        assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for y in 2..h - 2 {
            let row = &e.data()[y * w..(y + 1) * w];
            assert!(row[7] == 1.0 || row[8] == 1.0, "row {y}: {row:?}");
            assert_eq!(row[2], 0.0);
            assert_eq!(row[13], 0.0);
        }
    }

    #[test]
    fn external_edges_require_a_file() {
        let img = ImageTensor::constant(4, 4, 3, 0.0);
        let missing = Path::new("/nonexistent/edges_ir/abc.png");
        let err = detect_edges(
            &img,
            EdgeDetector::External,
            Some(ExternalEdge {
                sample_id: "abc",
                path: missing,
            }),
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Ingestion(m) if m.contains("abc")));
    }

    #[test]
    fn assembled_layout() {
        let noisy = ramp(8, 8, 3);
        let source = ImageTensor::constant(8, 8, 3, -0.5);
        let edges = EdgeMap::new(8, 8, vec![0.75; 64]).unwrap();
        let z = assemble_input(&noisy, &source, &edges).unwrap();
        assert_eq!((z.height(), z.width(), z.channels()), (8, 8, 7));
        assert_eq!(z.planes(ConditionedInput::TARGET), noisy.data());
        assert_eq!(z.planes(ConditionedInput::SOURCE), source.data());
        assert_eq!(z.planes(ConditionedInput::EDGES), edges.data());
        let small = ImageTensor::constant(4, 4, 3, 0.0);
        assert!(matches!(assemble_input(&small, &source, &edges), Err(Error::Argument(_))));
        let six = assemble_input_without_edges(&noisy, &source).unwrap();
        assert_eq!(six.channels(), 6);
    }

    #[test]
    fn byte_round_trip_is_exact() {
        for b in 0..=255u8 {
            assert_eq!(signed_to_byte(byte_to_signed(b)), b);
        }
        assert_eq!(signed_to_byte(5.0), 255);
        assert_eq!(signed_to_byte(-3.0), 0);
        // (0 + 1) * 127.5 lies exactly halfway and rounds up.
        assert_eq!(signed_to_byte(0.0), 128);
    }

    proptest! {
        #[test]
        fn assembly_matches_index_map(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let n = h * w;
            let val = |k: usize| (((k as u64 * 2654435761 + seed) % 1000) as f32 / 500.0) - 1.0;
            let noisy = ImageTensor::new(h, w, 3, (0..3 * n).map(val).collect()).unwrap();
            let source = ImageTensor::new(h, w, 3, (0..3 * n).map(|k| val(k + 7)).collect()).unwrap();
            let edges = EdgeMap::new(h, w, (0..n).map(|k| (val(k + 3) + 1.0) / 2.0).collect()).unwrap();
            let z = assemble_input(&noisy, &source, &edges).unwrap();
            for c in 0..7 {
                for p in 0..n {
                    let expected = match c {
                        0..=2 => noisy.data()[c * n + p],
                        3..=5 => source.data()[(c - 3) * n + p],
                        _ => edges.data()[p],
                    };
                    prop_assert_eq!(z.data()[c * n + p], expected);
                }
            }
        }

        #[test]
        fn sobel_is_translation_equivariant(seed in 0u64..500) {
            let (h, w) = (10, 10);
            let val = |k: usize| ((((k as u64) * 7919 + seed * 31) % 97) as f32 / 48.5) - 1.0;
            let base: Vec<f32> = (0..h * w).map(val).collect();
            let mut shifted = vec![0.0; h * w];
            for y in 0..h {
                for x in 1..w {
                    shifted[y * w + x] = base[y * w + x - 1];
                }
            }
            let a = sobel(&ImageTensor::new(h, w, 1, base).unwrap());
            let b = sobel(&ImageTensor::new(h, w, 1, shifted).unwrap());
            for y in 1..h - 1 {
                for x in 2..w - 2 {
                    prop_assert!((a.data()[y * w + x - 1] - b.data()[y * w + x]).abs() < 1e-6);
                }
            }
        }
    }
}
