//! Noise-prediction U-Net with a learned direction embedding and
//! cross-attention onto features from per-modality source encoders.
//!
//! The network sees the assembled conditioning input (noisy target, source,
//! edges), the diffusion step and a direction label. The label selects a row
//! of a two-row embedding table which is projected and added to the time
//! embedding. At every configured attention resolution the denoiser features
//! attend to the source encoder's features of the same size:
//!
//! ```text
//! out = F_g + softmax(Q K^T / sqrt(d)) V,   Q = Conv_q(F_g),  K, V = Conv_kv(F_d)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    ConditionedInput, DirectionLabel, ImageTensor, ModalityTag, EDGE_CHANNELS, SOURCE_CHANNELS, TARGET_CHANNELS,
};
use crate::data_io::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{Conv, GroupNorm, Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Spatial size of the (square) images the network accepts.
    pub image_size: usize,
    pub base_width: usize,
    /// Channel multiplier per resolution level; its length is the depth.
    pub channel_mult: Vec<usize>,
    pub attention_resolutions: BTreeSet<usize>,
    /// Width of one attention head.
    pub attention_channels: usize,
    pub embed_dim: usize,
    pub output_channels: usize,
    #[serde(default)]
    pub disable_tdg: bool,
    #[serde(default)]
    pub disable_cfc: bool,
}

impl DenoiserConfig {
    /// Full-resolution profile: 256x256 inputs, width 128, attention at 32, 16 and 8.
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            base_width: 128,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            attention_resolutions: [8, 16, 32].into(),
            attention_channels: 64,
            embed_dim: 512,
            output_channels: 3,
            disable_tdg: false,
            disable_cfc: false,
        }
    }

    /// Desk-scale profile: 32x32 inputs, width 32, three levels, attention at 16 and 8.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            base_width: 32,
            channel_mult: vec![1, 2, 2],
            attention_resolutions: [8, 16].into(),
            attention_channels: 32,
            embed_dim: 128,
            output_channels: 3,
            disable_tdg: false,
            disable_cfc: false,
        }
    }

    /// The desk profile at a reduced width, for tests and quick runs.
    pub fn tiny() -> Self {
        Self {
            base_width: 16,
            attention_channels: 16,
            embed_dim: 64,
            ..Self::desk()
        }
    }

    pub fn depth(&self) -> usize {
        self.channel_mult.len()
    }

    /// 7 with edge conditioning, 6 without.
    pub fn input_channels(&self) -> usize {
        TARGET_CHANNELS + SOURCE_CHANNELS + if self.disable_cfc { 0 } else { EDGE_CHANNELS }
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        (0..self.depth()).map(|k| self.image_size >> k).collect()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_width).collect()
    }

    fn has_attention(&self, size: usize) -> bool {
        !self.disable_cfc && self.attention_resolutions.contains(&size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth() == 0 || self.channel_mult.contains(&0) {
            return bad("channel_mult must be non-empty and positive".into());
        }
        if self.base_width == 0 || self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad("base_width must be positive and embed_dim positive and even".into());
        }
        if self.output_channels != TARGET_CHANNELS {
            return bad(format!("output_channels must be {TARGET_CHANNELS}"));
        }
        if self.image_size % (1 << (self.depth() - 1)) != 0 {
            return bad(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size,
                self.depth() - 1
            ));
        }
        let sizes = self.level_sizes();
        if let Some(r) = self.attention_resolutions.iter().find(|r| !sizes.contains(r)) {
            return bad(format!("attention resolution {r} is not one of the feature sizes {sizes:?}"));
        }
        for (size, ch) in sizes.iter().zip(self.level_channels()) {
            if self.attention_resolutions.contains(size) && (self.attention_channels == 0 || ch % self.attention_channels != 0)
            {
                return bad(format!(
                    "{ch} channels at resolution {size} do not split into heads of {}",
                    self.attention_channels
                ));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer steps: `[sin(t f_i), cos(t f_i)]` with
/// frequencies `f_i = 10000^(-i / half)`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let mut row = vec![0.0f32; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            row[i] = arg.sin() as f32;
            row[half + i] = arg.cos() as f32;
        }
        data.extend(row);
    }
    Tensor::new(&[t.len(), dim], data)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, embed: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb: Linear::new(store, &format!("{name}.emb"), embed, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, emb: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let e = self.emb.forward(g, emb);
        let h = g.add_channel(h, e);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Residual cross-attention from denoiser features onto source features.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub heads: usize,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, name: &str, channels: usize, source_channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: Conv::new(store, &format!("{name}.q"), channels, channels, 1, 1, rng),
            key: Conv::new(store, &format!("{name}.k"), source_channels, channels, 1, 1, rng),
            value: Conv::new(store, &format!("{name}.v"), source_channels, channels, 1, 1, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, f_g: Var, f_d: Var) -> Var {
        let q = self.query.forward(g, f_g);
        let k = self.key.forward(g, f_d);
        let v = self.value.forward(g, f_d);
        let attended = g.attention(q, k, v, self.heads);
        g.add(f_g, attended)
    }
}

/// `F_g + softmax(Q K^T / sqrt(d)) V` on plain tensors.
///
/// `f_g: [N, C, Hg, Wg]` and `f_d: [N, Cd, Hd, Wd]` are flattened into one
/// token per pixel. The projections are 1x1 convolutions given as
/// `[out, in]` matrices without bias.
pub fn cross_attention(f_g: &Tensor, f_d: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, c, hg, wg) = f_g.dims4();
    let (nd, cd, hd, wd) = f_d.dims4();
    if hg * wg == 0 || hd * wd == 0 {
        return Err(Error::Argument("cross-attention needs at least one token on each side".into()));
    }
    if n != nd {
        return Err(Error::Argument(format!("batch sizes differ: {n} vs {nd}")));
    }
    let expect = [(w_q, c, c, "query"), (w_k, c, cd, "key"), (w_v, c, cd, "value")];
    for (w, out, inp, what) in expect {
        if w.shape() != [out, inp] {
            return Err(Error::Argument(format!("{what} projection must be [{out}, {inp}], got {:?}", w.shape())));
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Argument(format!("{c} channels do not split into {heads} heads")));
    }
    let mut store = ParamStore::new();
    let as_conv = |w: &Tensor| w.clone().reshape(&[w.dim(0), w.dim(1), 1, 1]);
    let (pq, pk, pv) = (
        store.insert("q", as_conv(w_q)),
        store.insert("k", as_conv(w_k)),
        store.insert("v", as_conv(w_v)),
    );
    let mut g = Graph::new(&store);
    let (xg, xd) = (g.input(f_g.clone()), g.input(f_d.clone()));
    let (wq, wk, wv) = (g.param(pq), g.param(pk), g.param(pv));
    let q = g.conv2d(xg, wq, None, 1, 0);
    let k = g.conv2d(xd, wk, None, 1, 0);
    let v = g.conv2d(xd, wv, None, 1, 0);
    let a = g.attention(q, k, v, heads);
    let out = g.add(xg, a);
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    down: Option<Conv>,
    conv: Conv,
    norm: GroupNorm,
}

/// Convolutional encoder producing one feature map per resolution level.
#[derive(Debug, Clone)]
struct SourceEncoder {
    stem: Conv,
    levels: Vec<EncoderLevel>,
}

impl SourceEncoder {
    fn new(store: &mut ParamStore, name: &str, config: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let chans = config.level_channels();
        let stem = Conv::new(store, &format!("{name}.stem"), SOURCE_CHANNELS, chans[0], 3, 1, rng);
        let mut levels = Vec::new();
        let mut prev = chans[0];
        for (k, &ch) in chans.iter().enumerate() {
            let down = (k > 0).then(|| Conv::new(store, &format!("{name}.level{k}.down"), prev, ch, 3, 2, rng));
            levels.push(EncoderLevel {
                down,
                conv: Conv::new(store, &format!("{name}.level{k}.conv"), ch, ch, 3, 1, rng),
                norm: GroupNorm::new(store, &format!("{name}.level{k}.norm"), ch),
            });
            prev = ch;
        }
        Self { stem, levels }
    }

    fn forward(&self, g: &mut Graph, source: Var) -> Vec<Var> {
        let mut h = self.stem.forward(g, source);
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            if let Some(d) = &level.down {
                h = d.forward(g, h);
            }
            let c = level.conv.forward(g, h);
            let c = level.norm.forward(g, c);
            h = g.silu(c);
            out.push(h);
        }
        out
    }
}

/// Source-encoder features, one `[N, C_k, H / 2^k, W / 2^k]` map per level.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub modality: ModalityTag,
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.dim(2)).collect()
    }
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Option<Conv>,
    block: ResBlock,
    attn: Option<CrossAttention>,
}

#[derive(Debug, Clone)]
struct DownLevel {
    down: Option<Conv>,
    block: ResBlock,
    attn: Option<CrossAttention>,
}

#[derive(Debug, Clone)]
struct Layout {
    time1: Linear,
    time2: Linear,
    direction_table: Option<ParamId>,
    direction_proj: Option<Linear>,
    encoders: Option<[SourceEncoder; 2]>,
    stem: Conv,
    down: Vec<DownLevel>,
    mid: ResBlock,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

/// The noise predictor together with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    layout: Layout,
}

fn encoder_index(m: ModalityTag) -> usize {
    match m {
        ModalityTag::Ir => 0,
        ModalityTag::Vis => 1,
    }
}

impl Denoiser {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = config.embed_dim;
        let chans = config.level_channels();
        let sizes = config.level_sizes();
        let heads = |ch: usize| ch / config.attention_channels;

        let time1 = Linear::new(&mut store, "time.fc1", e, e, &mut rng);
        let time2 = Linear::new(&mut store, "time.fc2", e, e, &mut rng);
        let (direction_table, direction_proj) = if config.disable_tdg {
            (None, None)
        } else {
            let table = store.uniform("direction.table", &[DirectionLabel::ALL.len(), e], 1, 3f32.sqrt(), &mut rng);
            (Some(table), Some(Linear::new(&mut store, "direction.proj", e, e, &mut rng)))
        };
        let encoders = (!config.disable_cfc).then(|| {
            [
                SourceEncoder::new(&mut store, "encoder.ir", &config, &mut rng),
                SourceEncoder::new(&mut store, "encoder.vis", &config, &mut rng),
            ]
        });
        let stem = Conv::new(&mut store, "stem", config.input_channels(), chans[0], 3, 1, &mut rng);

        let mut down = Vec::new();
        let mut prev = chans[0];
        for (k, (&ch, &size)) in chans.iter().zip(&sizes).enumerate() {
            let name = format!("down{k}");
            down.push(DownLevel {
                down: (k > 0).then(|| Conv::new(&mut store, &format!("{name}.downsample"), prev, prev, 3, 2, &mut rng)),
                block: ResBlock::new(&mut store, &format!("{name}.block"), prev, ch, e, &mut rng),
                attn: config
                    .has_attention(size)
                    .then(|| CrossAttention::new(&mut store, &format!("{name}.attn"), ch, ch, heads(ch), &mut rng)),
            });
            prev = ch;
        }
        let mid = ResBlock::new(&mut store, "mid.block", prev, prev, e, &mut rng);
        let mut up = Vec::new();
        for k in (0..config.depth()).rev() {
            let (ch, size) = (chans[k], sizes[k]);
            let name = format!("up{k}");
            up.push(UpLevel {
                up: (k + 1 < config.depth())
                    .then(|| Conv::new(&mut store, &format!("{name}.upsample"), prev, prev, 3, 1, &mut rng)),
                block: ResBlock::new(&mut store, &format!("{name}.block"), prev + ch, ch, e, &mut rng),
                attn: config
                    .has_attention(size)
                    .then(|| CrossAttention::new(&mut store, &format!("{name}.attn"), ch, ch, heads(ch), &mut rng)),
            });
            prev = ch;
        }
        let out_norm = GroupNorm::new(&mut store, "out.norm", prev);
        let out_conv = Conv::new(&mut store, "out.conv", prev, config.output_channels, 3, 1, &mut rng);
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                time1,
                time2,
                direction_table,
                direction_proj,
                encoders,
                stem,
                down,
                mid,
                up,
                out_norm,
                out_conv,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn uses_direction(&self) -> bool {
        self.layout.direction_table.is_some()
    }

    pub fn uses_source_features(&self) -> bool {
        self.layout.encoders.is_some()
    }

    /// Parameter id of the direction embedding table, if present.
    pub fn direction_table(&self) -> Option<ParamId> {
        self.layout.direction_table
    }

    /// Parameter ids of every cross-attention projection.
    pub fn attention_params(&self) -> Vec<ParamId> {
        let l = &self.layout;
        let attns = l.down.iter().filter_map(|d| d.attn.as_ref()).chain(l.up.iter().filter_map(|u| u.attn.as_ref()));
        attns
            .flat_map(|a| [&a.query, &a.key, &a.value])
            .flat_map(|c| std::iter::once(c.weight).chain(c.bias))
            .collect()
    }

    /// Raw direction embedding row for a label.
    pub fn direction_embedding(&self, label: DirectionLabel) -> Option<Vec<f32>> {
        self.layout.direction_table.map(|id| {
            let t = self.params.get(id);
            let d = t.dim(1);
            t.data()[label.id() * d..(label.id() + 1) * d].to_vec()
        })
    }

    /// Records the encoder for `modality` on a `[N, 3, H, W]` source batch.
    pub fn encode(&self, g: &mut Graph, source: Var, modality: ModalityTag) -> Option<Vec<Var>> {
        let encoders = self.layout.encoders.as_ref()?;
        Some(encoders[encoder_index(modality)].forward(g, source))
    }

    /// Encoder features without gradient tracking. `None` when CFC is disabled.
    pub fn encode_source(&self, source: &Tensor, modality: ModalityTag) -> Result<Option<FeaturePyramid>> {
        self.check_spatial(source, SOURCE_CHANNELS)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(source.clone());
        Ok(self.encode(&mut g, x, modality).map(|levels| FeaturePyramid {
            modality,
            levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
        }))
    }

    fn check_spatial(&self, t: &Tensor, channels: usize) -> Result<()> {
        let s = self.config.image_size;
        if t.shape().len() != 4 || t.dim(1) != channels || t.dim(2) != s || t.dim(3) != s {
            return Err(Error::Argument(format!(
                "expected a [N, {channels}, {s}, {s}] tensor, got {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Records one forward pass. `z: [N, C_in, H, W]`, one label and step per
    /// batch element, and source features from [`Denoiser::encode`] when CFC
    /// is enabled. Returns the `[N, 3, H, W]` noise prediction.
    pub fn forward(&self, g: &mut Graph, z: Var, features: Option<&[Var]>, labels: &[DirectionLabel], t: &[usize]) -> Var {
        let l = &self.layout;
        let n = g.value(z).dim(0);
        assert_eq!(t.len(), n, "one step per batch element");
        let temb = g.input(timestep_embedding(t, self.config.embed_dim));
        let h = l.time1.forward(g, temb);
        let h = g.silu(h);
        let mut emb = l.time2.forward(g, h);
        if let (Some(table), Some(proj)) = (l.direction_table, &l.direction_proj) {
            assert_eq!(labels.len(), n, "one label per batch element");
            let table = g.param(table);
            let ids: Vec<usize> = labels.iter().map(|d| d.id()).collect();
            let j = g.rows(table, &ids);
            let j = proj.forward(g, j);
            emb = g.add(emb, j);
        }
        let emb = g.silu(emb);
        let feature = |k: usize| -> Var {
            let f = features.expect("source features are required when CFC is enabled");
            f[k]
        };

        let mut h = l.stem.forward(g, z);
        let mut skips = Vec::with_capacity(l.down.len());
        for (k, level) in l.down.iter().enumerate() {
            if let Some(d) = &level.down {
                h = d.forward(g, h);
            }
            h = level.block.forward(g, h, emb);
            if let Some(a) = &level.attn {
                h = a.forward(g, h, feature(k));
            }
            skips.push(h);
        }
        h = l.mid.forward(g, h, emb);
        for (i, level) in l.up.iter().enumerate() {
            let k = l.down.len() - 1 - i;
            if let Some(u) = &level.up {
                h = g.upsample2x(h);
                h = u.forward(g, h);
            }
            h = g.concat(h, skips[k]);
            h = level.block.forward(g, h, emb);
            if let Some(a) = &level.attn {
                h = a.forward(g, h, feature(k));
            }
        }
        let h = l.out_norm.forward(g, h);
        let h = g.silu(h);
        l.out_conv.forward(g, h)
    }

    /// Batched noise prediction without gradient tracking.
    pub fn predict(&self, z: &Tensor, pyramid: Option<&FeaturePyramid>, labels: &[DirectionLabel], t: &[usize]) -> Result<Tensor> {
        self.check_spatial(z, self.config.input_channels())?;
        let n = z.dim(0);
        if t.len() != n || labels.len() != n {
            return Err(Error::Argument(format!("{n} inputs but {} steps and {} labels", t.len(), labels.len())));
        }
        let mut g = Graph::new(&self.params);
        let features = match (self.uses_source_features(), pyramid) {
            (false, _) => None,
            (true, None) => return Err(Error::Argument("source features are required when CFC is enabled".into())),
            (true, Some(p)) => {
                if p.levels.len() != self.config.depth() || p.levels[0].dim(0) != n {
                    return Err(Error::Argument("feature pyramid does not match the input batch".into()));
                }
                Some(p.levels.iter().map(|t| g.input(t.clone())).collect::<Vec<_>>())
            }
        };
        let zv = g.input(z.clone());
        let out = self.forward(&mut g, zv, features.as_deref(), labels, t);
        Ok(g.value(out).clone())
    }

    /// Noise prediction for one assembled input. The source planes of `z`
    /// feed the encoder for `source_modality`; `label` selects the direction
    /// embedding and is ignored when TDG is disabled.
    pub fn epsilon_predict(
        &self,
        z: &ConditionedInput,
        source_modality: ModalityTag,
        label: DirectionLabel,
        t: usize,
    ) -> Result<ImageTensor> {
        if z.channels() != self.config.input_channels() {
            return Err(Error::Argument(format!(
                "model expects {} input channels, got {}",
                self.config.input_channels(),
                z.channels()
            )));
        }
        let (h, w) = (z.height(), z.width());
        let zt = Tensor::new(&[1, z.channels(), h, w], z.data().to_vec());
        let pyramid = if self.uses_source_features() {
            let src = Tensor::new(&[1, SOURCE_CHANNELS, h, w], z.planes(ConditionedInput::SOURCE).to_vec());
            self.encode_source(&src, source_modality)?
        } else {
            None
        };
        let out = self.predict(&zt, pyramid.as_ref(), &[label], &[t])?;
        ImageTensor::new(h, w, self.config.output_channels, out.into_data())
    }
}

pub const PARAMS_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "model.json";

/// Pixel normalization applied before the network: `x / scale + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            scale: 127.5,
            offset: -1.0,
        }
    }
}

/// Sidecar JSON stored next to a parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub normalization: Normalization,
    pub input_channels: usize,
    pub direction_embedding: bool,
    pub iteration: u64,
    pub seed: u64,
}

pub fn save_checkpoint(dir: &Path, model: &Denoiser, schedule: &ScheduleConfig, iteration: u64, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    model.params.write_to(&mut blob).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(PARAMS_FILE), &blob)?;
    let manifest = CheckpointManifest {
        denoiser: model.config.clone(),
        schedule: schedule.clone(),
        normalization: Normalization::default(),
        input_channels: model.config.input_channels(),
        direction_embedding: model.uses_direction(),
        iteration,
        seed,
    };
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Denoiser, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = Denoiser::new(manifest.denoiser.clone(), manifest.seed)?;
    let path: PathBuf = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let stored = ParamStore::read_from(&mut bytes.as_slice())?;
    model.params.load_values(&stored)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamW, AdamWConfig};
    use rand::Rng;

    fn micro() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            base_width: 4,
            channel_mult: vec![1, 2],
            attention_resolutions: [4, 8].into(),
            attention_channels: 4,
            embed_dim: 8,
            ..DenoiserConfig::desk()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn profiles_validate() {
        for c in [DenoiserConfig::paper(), DenoiserConfig::desk(), DenoiserConfig::tiny(), micro()] {
            c.validate().unwrap();
        }
        let bad = DenoiserConfig {
            attention_resolutions: [3].into(),
            ..micro()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert_eq!(DenoiserConfig::desk().input_channels(), 7);
        let no_cfc = DenoiserConfig {
            disable_cfc: true,
            ..micro()
        };
        assert_eq!(no_cfc.input_channels(), 6);
    }

    #[test]
    fn hand_softmax_example() {
        let f_g = Tensor::new(&[1, 1, 1, 1], vec![1.0]);
        let f_d = Tensor::new(&[1, 1, 1, 2], vec![0.0, 3f32.ln()]);
        let one = Tensor::new(&[1, 1], vec![1.0]);
        let wv = Tensor::new(&[1, 1], vec![1.0 / 3f32.ln()]);
        let out = cross_attention(&f_g, &f_d, &one, &one, &wv, 1).unwrap();
        assert!((out.item() - 1.75).abs() < 1e-6);
    }

    #[test]
    fn zero_values_and_single_token() {
        let f_g = random(&[2, 4, 3, 3], 1);
        let f_d = random(&[2, 2, 2, 2], 2);
        let wq = random(&[4, 4], 3);
        let wk = random(&[4, 2], 4);
        let out = cross_attention(&f_g, &f_d, &wq, &wk, &Tensor::zeros(&[4, 2]), 2).unwrap();
        assert_eq!(out, f_g);

        let single = random(&[1, 2, 1, 1], 5);
        let wv = random(&[4, 2], 6);
        let f_g1 = random(&[1, 4, 2, 2], 7);
        let out = cross_attention(&f_g1, &single, &wq, &wk, &wv, 1).unwrap();
        for c in 0..4 {
            let v: f32 = (0..2).map(|j| wv.data()[c * 2 + j] * single.data()[j]).sum();
            for p in 0..4 {
                let i = c * 4 + p;
                assert!((out.data()[i] - f_g1.data()[i] - v).abs() < 1e-6);
            }
        }
        let empty = Tensor::zeros(&[1, 2, 0, 1]);
        assert!(matches!(
            cross_attention(&f_g1, &empty, &wq, &wk, &wv, 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn direction_rows_are_distinct_and_isolated() {
        let mut model = Denoiser::new(micro(), 3).unwrap();
        let a = model.direction_embedding(DirectionLabel::IrToVis).unwrap();
        let b = model.direction_embedding(DirectionLabel::VisToIr).unwrap();
        assert_eq!(a, model.direction_embedding(DirectionLabel::IrToVis).unwrap());
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));

        let z = random(&[1, 7, 8, 8], 9);
        let src = random(&[1, 3, 8, 8], 10);
        let probe = random(&[1, 3, 8, 8], 11);
        let grads = probe_grads(&model, &z, &src, &probe, &[DirectionLabel::IrToVis], &[5]);
        let table = model.direction_table().unwrap();
        let gt = grads[table.0].as_ref().unwrap();
        let d = gt.dim(1);
        assert!(gt.data()[..d].iter().any(|v| *v != 0.0));
        assert!(gt.data()[d..].iter().all(|v| *v == 0.0));
        // Plain SGD through the optimizer with no decay leaves row 1 alone.
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            model.params(),
        );
        opt.update(model.params_mut(), &grads, 1e-2);
        assert_eq!(model.direction_embedding(DirectionLabel::VisToIr).unwrap(), b);
        assert_ne!(model.direction_embedding(DirectionLabel::IrToVis).unwrap(), a);
    }

    #[test]
    fn encoders_are_deterministic_and_independent() {
        let model = Denoiser::new(micro(), 4).unwrap();
        let src = random(&[1, 3, 8, 8], 1);
        let a = model.encode_source(&src, ModalityTag::Ir).unwrap().unwrap();
        let b = model.encode_source(&src, ModalityTag::Ir).unwrap().unwrap();
        let c = model.encode_source(&src, ModalityTag::Vis).unwrap().unwrap();
        assert_eq!(a.levels, b.levels);
        assert_ne!(a.levels[0], c.levels[0]);
        assert_eq!(a.sizes(), vec![8, 4]);
        let desk = Denoiser::new(DenoiserConfig::tiny(), 0).unwrap();
        let p = desk.encode_source(&random(&[1, 3, 32, 32], 2), ModalityTag::Vis).unwrap().unwrap();
        assert_eq!(p.sizes(), vec![32, 16, 8]);
    }

    #[test]
    fn output_shape_and_determinism() {
        for size in [32usize, 64, 256] {
            let config = DenoiserConfig {
                image_size: size,
                base_width: 4,
                attention_channels: 4,
                embed_dim: 8,
                attention_resolutions: [size / 4].into(),
                ..DenoiserConfig::desk()
            };
            let model = Denoiser::new(config, 1).unwrap();
            let src = ImageTensor::new(size, size, 3, random(&[3 * size * size], 2).into_data()).unwrap();
            let noisy = ImageTensor::new(size, size, 3, random(&[3 * size * size], 3).into_data()).unwrap();
            let edges = crate::conditioning::sobel(&src);
            let z = crate::conditioning::assemble_input(&noisy, &src, &edges).unwrap();
            let a = model.epsilon_predict(&z, ModalityTag::Vis, DirectionLabel::VisToIr, 7).unwrap();
            let b = model.epsilon_predict(&z, ModalityTag::Vis, DirectionLabel::VisToIr, 7).unwrap();
            assert_eq!((a.height(), a.width(), a.channels()), (size, size, 3));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let model = Denoiser::new(micro(), 1).unwrap();
        let z = random(&[1, 7, 16, 16], 1);
        assert!(matches!(model.predict(&z, None, &[DirectionLabel::IrToVis], &[1]), Err(Error::Argument(_))));
        let z = random(&[1, 6, 8, 8], 1);
        assert!(model.predict(&z, None, &[DirectionLabel::IrToVis], &[1]).is_err());
    }

    #[test]
    fn disabling_cfc_changes_the_output() {
        let with = Denoiser::new(micro(), 5).unwrap();
        let without = Denoiser::new(
            DenoiserConfig {
                disable_cfc: true,
                ..micro()
            },
            5,
        )
        .unwrap();
        assert!(without.params().num_scalars() < with.params().num_scalars());
        let z7 = random(&[1, 7, 8, 8], 1);
        let z6 = Tensor::new(&[1, 6, 8, 8], z7.data()[..6 * 64].to_vec());
        let src = Tensor::new(&[1, 3, 8, 8], z7.data()[3 * 64..6 * 64].to_vec());
        let p = with.encode_source(&src, ModalityTag::Ir).unwrap();
        let a = with.predict(&z7, p.as_ref(), &[DirectionLabel::IrToVis], &[3]).unwrap();
        let b = without.predict(&z6, None, &[DirectionLabel::IrToVis], &[3]).unwrap();
        assert_ne!(a, b);
        // Source features alone also matter: zeroing them changes the prediction.
        let zeros = FeaturePyramid {
            modality: ModalityTag::Ir,
            levels: p.as_ref().unwrap().levels.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        };
        let c = with.predict(&z7, Some(&zeros), &[DirectionLabel::IrToVis], &[3]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn disabling_tdg_ignores_the_label() {
        let config = DenoiserConfig {
            disable_tdg: true,
            ..micro()
        };
        let model = Denoiser::new(config, 6).unwrap();
        assert!(model.direction_table().is_none());
        let z = random(&[1, 7, 8, 8], 1);
        let p = model.encode_source(&random(&[1, 3, 8, 8], 2), ModalityTag::Vis).unwrap();
        let a = model.predict(&z, p.as_ref(), &[DirectionLabel::IrToVis], &[9]).unwrap();
        let b = model.predict(&z, p.as_ref(), &[DirectionLabel::VisToIr], &[9]).unwrap();
        assert_eq!(a, b);
        let tdg = Denoiser::new(micro(), 6).unwrap();
        let p = tdg.encode_source(&random(&[1, 3, 8, 8], 2), ModalityTag::Vis).unwrap();
        let a = tdg.predict(&z, p.as_ref(), &[DirectionLabel::IrToVis], &[9]).unwrap();
        let b = tdg.predict(&z, p.as_ref(), &[DirectionLabel::VisToIr], &[9]).unwrap();
        assert_ne!(a, b);
    }

    fn probe_grads(model: &Denoiser, z: &Tensor, src: &Tensor, probe: &Tensor, labels: &[DirectionLabel], steps: &[usize]) -> Vec<Option<Tensor>> {
        let mut g = Graph::new(model.params());
        let s = g.input(src.clone());
        let f = model.encode(&mut g, s, ModalityTag::Ir).unwrap();
        let zv = g.input(z.clone());
        let out = model.forward(&mut g, zv, Some(&f), labels, steps);
        let loss = g.dot(out, probe);
        g.backward(loss).into_params()
    }

    /// Double-precision reference of `sum(probe * (F_g + attention))` for one
    /// sample, written with plain loops.
    #[allow(clippy::too_many_arguments)]
    fn attention_probe_f64(
        f_g: &[f64],
        f_d: &[f64],
        (c, cd, tg, td, heads): (usize, usize, usize, usize, usize),
        wq: &[f64],
        bq: &[f64],
        wk: &[f64],
        bk: &[f64],
        wv: &[f64],
        bv: &[f64],
        probe: &[f64],
    ) -> f64 {
        let project = |w: &[f64], b: &[f64], x: &[f64], cin: usize, tokens: usize| -> Vec<f64> {
            let mut out = vec![0.0; c * tokens];
            for o in 0..c {
                for p in 0..tokens {
                    out[o * tokens + p] = b[o] + (0..cin).map(|i| w[o * cin + i] * x[i * tokens + p]).sum::<f64>();
                }
            }
            out
        };
        let q = project(wq, bq, f_g, c, tg);
        let k = project(wk, bk, f_d, cd, td);
        let v = project(wv, bv, f_d, cd, td);
        let d = c / heads;
        let mut total = 0.0;
        for hd in 0..heads {
            for i in 0..tg {
                let logits: Vec<f64> = (0..td)
                    .map(|j| (0..d).map(|ch| q[(hd * d + ch) * tg + i] * k[(hd * d + ch) * td + j]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for ch in 0..d {
                    let row = hd * d + ch;
                    let a: f64 = (0..td).map(|j| (logits[j] - m).exp() / z * v[row * td + j]).sum();
                    total += probe[row * tg + i] * (f_g[row * tg + i] + a);
                }
            }
        }
        total
    }

    #[test]
    fn attention_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let (c, cd, heads) = (4, 3, 2);
        let block = CrossAttention::new(&mut store, "attn", c, cd, heads, &mut rng);
        let f_g = random(&[1, c, 3, 3], 1);
        let f_d = random(&[1, cd, 2, 2], 2);
        let probe = random(&[1, c, 3, 3], 3);
        let grads = {
            let mut g = Graph::new(&store);
            let (a, b) = (g.input(f_g.clone()), g.input(f_d.clone()));
            let out = block.forward(&mut g, a, b);
            let loss = g.dot(out, &probe);
            g.backward(loss).into_params()
        };
        let wide = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let ids = [
            block.query.weight,
            block.query.bias.unwrap(),
            block.key.weight,
            block.key.bias.unwrap(),
            block.value.weight,
            block.value.bias.unwrap(),
        ];
        let mut values: Vec<Vec<f64>> = ids.iter().map(|&id| wide(store.get(id))).collect();
        let (fg, fd, pr) = (wide(&f_g), wide(&f_d), wide(&probe));
        let eval = |v: &[Vec<f64>]| {
            attention_probe_f64(&fg, &fd, (c, cd, 9, 4, heads), &v[0], &v[1], &v[2], &v[3], &v[4], &v[5], &pr)
        };
        let h = 1e-3;
        for (slot, &id) in ids.iter().enumerate() {
            for i in 0..values[slot].len() {
                let analytic = grads[id.0].as_ref().map_or(0.0, |t| t.data()[i] as f64);
                let orig = values[slot][i];
                values[slot][i] = orig + h;
                let up = eval(&values);
                values[slot][i] = orig - h;
                let down = eval(&values);
                values[slot][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                if Some(id) == block.key.bias {
                    // A per-channel key offset shifts all logits of a query
                    // equally, which softmax ignores.
                    assert!(analytic.abs() < 1e-5 && numeric.abs() < 1e-9);
                    continue;
                }
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                assert!(rel < 1e-3, "{}[{i}]: analytic {analytic}, numeric {numeric}", store.name(id));
            }
        }
    }

    #[test]
    fn network_attention_gradients_track_finite_differences() {
        // End-to-end wiring check through the full network. Single precision
        // rounding in the forward pass limits agreement to about 1e-2 here.
        let mut model = Denoiser::new(micro(), 8).unwrap();
        let z = random(&[2, 7, 8, 8], 1);
        let src = random(&[2, 3, 8, 8], 2);
        let probe = random(&[2, 3, 8, 8], 3);
        let labels = [DirectionLabel::IrToVis, DirectionLabel::VisToIr];
        let steps = [4, 17];
        let loss_of = |m: &Denoiser| -> f64 {
            let p = m.encode_source(&src, ModalityTag::Ir).unwrap();
            let out = m.predict(&z, p.as_ref(), &labels, &steps).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let grads = probe_grads(&model, &z, &src, &probe, &labels, &steps);
        let h = 1e-2f32;
        for id in model.attention_params() {
            let analytic = grads[id.0].as_ref().map_or(0.0, |t| t.data()[0] as f64);
            if analytic.abs() < 0.05 {
                continue;
            }
            let orig = model.params().get(id).data()[0];
            model.params_mut().get_mut(id).data_mut()[0] = orig + h;
            let up = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[0] = orig - h;
            let down = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[0] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            let rel = (analytic - numeric).abs() / analytic.abs();
            assert!(rel < 5e-2, "{}: analytic {analytic}, numeric {numeric}", model.params().name(id));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Denoiser::new(micro(), 2).unwrap();
        save_checkpoint(dir.path(), &model, &ScheduleConfig::desk(), 10, 2).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.input_channels, 7);
        assert!(manifest.direction_embedding);
        assert_eq!(manifest.iteration, 10);
        for id in model.params().ids() {
            assert_eq!(model.params().get(id), loaded.params().get(id));
        }
    }
}
