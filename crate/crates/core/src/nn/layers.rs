use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, 3f32.sqrt(), rng);
        let bias = Some(store.uniform(&format!("{name}.bias"), &[cout], fan_in, 1.0, rng));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            weight: store.uniform(&format!("{name}.weight"), &[dout, din], din, 3f32.sqrt(), rng),
            bias: store.uniform(&format!("{name}.bias"), &[dout], din, 1.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Up to 8 groups, fewer when the channel count does not allow it.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let groups = (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gm, bt, self.groups)
    }
}
