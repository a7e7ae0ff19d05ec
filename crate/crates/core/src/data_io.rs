//! Paired dataset ingestion, the synthetic scene generator and image files.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   manifest.json
//!   ir/<id>.png        8-bit grayscale (or RGB)
//!   vis/<id>.png       8-bit RGB
//!   edges_ir/<id>.png  optional precomputed edge maps
//!   edges_vis/<id>.png
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    byte_to_signed, detect_edges, replicate_gray_to_rgb, signed_to_byte, EdgeDetector, EdgeMap, ExternalEdge,
    ImageTensor, ModalityTag,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

/// One aligned infrared/visible pair, both stored with three channels.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub ir: ImageTensor,
    pub vis: ImageTensor,
    pub edges_ir: EdgeMap,
    pub edges_vis: EdgeMap,
}

impl PairedSample {
    pub fn image(&self, modality: ModalityTag) -> &ImageTensor {
        match modality {
            ModalityTag::Ir => &self.ir,
            ModalityTag::Vis => &self.vis,
        }
    }

    pub fn edges(&self, modality: ModalityTag) -> &EdgeMap {
        match modality {
            ModalityTag::Ir => &self.edges_ir,
            ModalityTag::Vis => &self.edges_vis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory the manifest was read from or written to. Not stored in the
    /// file, so a dataset tree can be moved or compared byte for byte.
    #[serde(skip)]
    pub root: PathBuf,
    pub resolution: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.test)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        Ok(Self {
            root: dir.to_path_buf(),
            ..manifest
        })
    }
}

/// Splits sorted ids into a train prefix and test suffix. With two or more
/// ids both sides are non-empty.
pub fn split_ids(mut ids: Vec<String>, train_fraction: f64) -> (Vec<String>, Vec<String>) {
    ids.sort();
    let n = ids.len();
    let mut n_train = (n as f64 * train_fraction).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    } else {
        n_train = n;
    }
    let test = ids.split_off(n_train);
    (ids, test)
}

/// A dataset on disk, resized to a square resolution on load.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub manifest: DatasetManifest,
    pub detector: EdgeDetector,
}

/// Stems of the `.png` files directly inside `dir`.
pub fn list_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

/// Scans `root/ir` and `root/vis`, checks that every file has a partner and
/// builds a manifest. An existing `manifest.json` decides the split.
pub fn load_paired_dataset(root: &Path, resolution: usize, detector: EdgeDetector) -> Result<PairedDataset> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let ir = list_ids(&root.join("ir"))?;
    let vis = list_ids(&root.join("vis"))?;
    let orphans: Vec<String> = ir
        .symmetric_difference(&vis)
        .map(|id| {
            let side = if ir.contains(id) { "ir" } else { "vis" };
            format!("{side}/{id}.png")
        })
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Ingestion(format!("unpaired files: {}", orphans.join(", "))));
    }
    if ir.is_empty() {
        return Err(Error::Ingestion(format!("no image pairs under {}", root.display())));
    }
    let (train, test) = match DatasetManifest::read(root) {
        Ok(m) => {
            let listed: BTreeSet<String> = m.all_ids().cloned().collect();
            if listed != ir {
                return Err(Error::Ingestion(format!(
                    "manifest in {} does not match the image files",
                    root.display()
                )));
            }
            (m.train, m.test)
        }
        Err(_) => split_ids(ir.into_iter().collect(), DEFAULT_TRAIN_FRACTION),
    };
    Ok(PairedDataset {
        manifest: DatasetManifest {
            root: root.to_path_buf(),
            resolution,
            train,
            test,
        },
        detector,
    })
}

impl PairedDataset {
    pub fn root(&self) -> &Path {
        &self.manifest.root
    }

    pub fn load_sample(&self, id: &str) -> Result<PairedSample> {
        let res = self.manifest.resolution;
        let root = self.root();
        let load = |modality: ModalityTag| -> Result<ImageTensor> {
            let path = root.join(modality.dir_name()).join(format!("{id}.png"));
            let img = resize_image(&load_image(&path)?, res, res);
            if img.channels() == 1 {
                replicate_gray_to_rgb(&img)
            } else {
                Ok(img)
            }
        };
        let ir = load(ModalityTag::Ir)?;
        let vis = load(ModalityTag::Vis)?;
        let edges = |img: &ImageTensor, modality: ModalityTag| -> Result<EdgeMap> {
            let path = edge_path(root, modality, id);
            detect_edges(
                img,
                self.detector,
                Some(ExternalEdge {
                    sample_id: id,
                    path: &path,
                }),
            )
        };
        Ok(PairedSample {
            id: id.to_string(),
            edges_ir: edges(&ir, ModalityTag::Ir)?,
            edges_vis: edges(&vis, ModalityTag::Vis)?,
            ir,
            vis,
        })
    }

    /// Samples of the listed ids, in order.
    pub fn iter_ids<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = Result<PairedSample>> + 'a {
        ids.iter().map(move |id| self.load_sample(id))
    }

    /// All samples in sorted-id order.
    pub fn iter(&self) -> impl Iterator<Item = Result<PairedSample>> + '_ {
        let mut ids: Vec<&String> = self.manifest.all_ids().collect();
        ids.sort();
        ids.into_iter().map(move |id| self.load_sample(id))
    }

    pub fn load_split(&self, test: bool) -> Result<Vec<PairedSample>> {
        let ids = if test { &self.manifest.test } else { &self.manifest.train };
        self.iter_ids(ids).collect()
    }
}

pub fn edge_path(root: &Path, modality: ModalityTag, id: &str) -> PathBuf {
    root.join(format!("edges_{}", modality.dir_name())).join(format!("{id}.png"))
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit PNG. Grayscale files give one channel, everything else three.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) => {
            ImageTensor::from_u8_interleaved(h, w, 1, img.to_luma8().as_raw())
        }
        other => ImageTensor::from_u8_interleaved(h, w, 3, other.to_rgb8().as_raw()),
    }
}

/// Grayscale PNG as an edge map on `[0, 1]`.
pub fn load_gray_unit(path: &Path) -> Result<EdgeMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| image_error(path, e))?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    EdgeMap::new(h, w, gray.as_raw().iter().map(|&b| b as f32 / 255.0).collect())
}

fn png_bytes(img: DynamicImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| image_error(path, e))?;
    Ok(buf.into_inner())
}

/// Writes an 8-bit PNG; values are clamped to `[-1, 1]` and rounded half-up.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let raw = img.to_u8_interleaved();
    let dynimg = if img.channels() == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer matches dimensions"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer matches dimensions"))
    };
    write_atomic(path, &png_bytes(dynimg, path)?)
}

pub fn save_edge_map(edges: &EdgeMap, path: &Path) -> Result<()> {
    let raw = edges.data().iter().map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8).collect();
    let img = GrayImage::from_raw(edges.width() as u32, edges.height() as u32, raw).expect("buffer matches dimensions");
    write_atomic(path, &png_bytes(DynamicImage::ImageLuma8(img), path)?)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling of one plane with pixel-centre alignment.
pub fn resize_plane(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    if h == nh && w == nw {
        return src.to_vec();
    }
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..nw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * nw + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

pub fn resize_image(img: &ImageTensor, nh: usize, nw: usize) -> ImageTensor {
    if img.same_size(nh, nw) {
        return img.clone();
    }
    let mut data = Vec::with_capacity(nh * nw * img.channels());
    for c in 0..img.channels() {
        data.extend(resize_plane(img.channel(c), img.height(), img.width(), nh, nw));
    }
    ImageTensor::new(nh, nw, img.channels(), data).expect("resized dimensions are consistent")
}

/// Visible colours of the two background types and four object classes, on `[0, 1]`.
pub const BACKGROUND_RGB: [[f32; 3]; 2] = [[0.40, 0.65, 0.45], [0.70, 0.70, 0.72]];
pub const BACKGROUND_EMISSIVITY: [f32; 2] = [0.10, 0.22];
pub const CLASS_RGB: [[f32; 3]; 4] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.95, 0.95, 0.95],
];
/// Infrared gray level of each object class.
pub const CLASS_EMISSIVITY: [f32; 4] = [0.55, 0.68, 0.80, 0.92];
pub const IR_NOISE_STD: f32 = 0.02;
const VIS_NOISE_STD: f32 = 0.01;

/// A rendered synthetic scene with the per-pixel labels used to draw it.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub size: usize,
    /// Visible image on `[0, 1]`, planar RGB.
    pub vis: Vec<f32>,
    /// Infrared image on `[0, 1]`, one plane.
    pub ir: Vec<f32>,
    /// Noise-free infrared emissivity before blurring.
    pub emissivity: Vec<f32>,
    /// Object class per pixel, `None` for background.
    pub class_map: Vec<Option<usize>>,
}

/// Procedural scene: textured background plus 2 to 4 rectangles or discs.
/// The infrared image is the class emissivity map, 3x3 box blurred, with
/// Gaussian noise of std [`IR_NOISE_STD`].
pub fn render_scene(size: usize, rng: &mut ChaCha8Rng) -> SyntheticScene {
    let n = size * size;
    let bg = rng.random_range(0..BACKGROUND_RGB.len());
    let (fx, fy) = (rng.random_range(1..=3) as f32, rng.random_range(1..=3) as f32);
    let (px, py) = (rng.random_range(0.0..std::f32::consts::TAU), rng.random_range(0.0..std::f32::consts::TAU));
    let mut class_map: Vec<Option<usize>> = vec![None; n];
    let objects = rng.random_range(2..=4);
    let (rmin, rmax) = ((size as f32 / 8.0).max(1.0), (size as f32 / 4.0).max(2.0));
    for _ in 0..objects {
        let class = rng.random_range(0..CLASS_RGB.len());
        let disc = rng.random_bool(0.5);
        let cx = rng.random_range(0.0..size as f32);
        let cy = rng.random_range(0.0..size as f32);
        let rx = rng.random_range(rmin..rmax);
        let ry = if disc { rx } else { rng.random_range(rmin..rmax) };
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= rx * rx
                } else {
                    dx.abs() <= rx && dy.abs() <= ry
                };
                if inside {
                    class_map[y * size + x] = Some(class);
                }
            }
        }
    }
    let mut vis = vec![0.0; 3 * n];
    let mut emissivity = vec![0.0; n];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let u = x as f32 / size as f32;
            let v = y as f32 / size as f32;
            let texture =
                (std::f32::consts::TAU * fx * u + px).sin() * (std::f32::consts::TAU * fy * v + py).sin();
            match class_map[i] {
                Some(k) => {
                    for c in 0..3 {
                        vis[c * n + i] = CLASS_RGB[k][c];
                    }
                    emissivity[i] = CLASS_EMISSIVITY[k];
                }
                None => {
                    for c in 0..3 {
                        vis[c * n + i] = BACKGROUND_RGB[bg][c] + 0.05 * texture;
                    }
                    emissivity[i] = BACKGROUND_EMISSIVITY[bg] + 0.03 * texture;
                }
            }
        }
    }
    let vis_noise = Normal::new(0.0, VIS_NOISE_STD).expect("valid std");
    for v in vis.iter_mut() {
        *v = (*v + vis_noise.sample(rng)).clamp(0.0, 1.0);
    }
    let ir_noise = Normal::new(0.0, IR_NOISE_STD).expect("valid std");
    let mut ir = vec![0.0; n];
    for y in 0..size {
        for x in 0..size {
            let mut s = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, size as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, size as isize - 1) as usize;
                    s += emissivity[yy * size + xx];
                }
            }
            ir[y * size + x] = (s / 9.0 + ir_noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    SyntheticScene {
        size,
        vis,
        ir,
        emissivity,
        class_map,
    }
}

fn unit_to_tensor(planes: &[f32], size: usize, channels: usize) -> ImageTensor {
    let data = planes.iter().map(|&v| v * 2.0 - 1.0).collect();
    ImageTensor::new(size, size, channels, data).expect("scene planes are consistent")
}

/// Writes `count` synthetic pairs plus precomputed edge maps and a manifest
/// under `out`. Identical seeds produce identical files.
pub fn generate_synthetic_pairs(count: usize, resolution: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one pair".into()));
    }
    if resolution < 8 {
        return Err(Error::Config(format!("resolution {resolution} too small, need at least 8")));
    }
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{i:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let scene = render_scene(resolution, &mut rng);
        let vis = unit_to_tensor(&scene.vis, resolution, 3);
        let ir = unit_to_tensor(&scene.ir, resolution, 1);
        save_image(&vis, &out.join("vis").join(format!("{id}.png")))?;
        save_image(&ir, &out.join("ir").join(format!("{id}.png")))?;
        // Reference edges from the noise-free label maps stand in for an
        // external edge network.
        let clean_ir = unit_to_tensor(&scene.emissivity, resolution, 1);
        let edges_ir = detect_edges(&clean_ir, EdgeDetector::Sobel, None)?;
        let mut clean_vis = vec![0.0; 3 * resolution * resolution];
        let n = resolution * resolution;
        for (i, k) in scene.class_map.iter().enumerate() {
            for c in 0..3 {
                clean_vis[c * n + i] = match k {
                    Some(k) => CLASS_RGB[*k][c],
                    None => scene.vis[c * n + i],
                };
            }
        }
        let edges_vis = detect_edges(&unit_to_tensor(&clean_vis, resolution, 3), EdgeDetector::Sobel, None)?;
        save_edge_map(&edges_ir, &edge_path(out, ModalityTag::Ir, &id))?;
        save_edge_map(&edges_vis, &edge_path(out, ModalityTag::Vis, &id))?;
        ids.push(id);
    }
    let (train, test) = split_ids(ids, DEFAULT_TRAIN_FRACTION);
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        resolution,
        train,
        test,
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// 8-bit interleaved bytes to a `[-1, 1]` value, exposed for metric code.
pub fn normalize_byte(b: u8) -> f32 {
    byte_to_signed(b)
}

pub fn denormalize_to_byte(v: f32) -> u8 {
    signed_to_byte(v)
}
