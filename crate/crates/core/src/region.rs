//! Region learning: patch-wise weight-shared convolutions and the blocks built from them.
//!
//! * [`PlainBlock`] `P(l1, l2, c1)`: stacked 3x3/1/1 convolutions.
//! * [`RegionBlock`] `R(l1, l2, c1)`: a plain convolution to `4 c1` channels, then one 8x8
//!   patch-wise convolution, summed residually with the first.
//! * [`HmrBlock`] `R_hm(l1, l2, c1)`: a plain convolution to `4 c1` channels, then 8x8, 4x4 and
//!   2x2 patch-wise convolutions in sequence (`4c1 -> 2c1 -> c1 -> c1`). Their outputs are
//!   concatenated back to `4 c1` channels and summed residually with the first.
//!
//! Every convolution is followed by batch normalization and ReLU.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{Builder, ConvBnRelu, Forward};
use crate::ops::{ConvRegion, Rect};
use crate::params::{Module, ParamStore};
use crate::tensor::ConvSpec;

/// Uniform grid of patches; each patch owns its own filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub const WHOLE: PatchGrid = PatchGrid { rows: 1, cols: 1 };

    pub fn square(n: usize) -> Self {
        PatchGrid { rows: n, cols: n }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Patch rectangles for an `h x w` map, row-major. Each patch maps onto itself.
    pub fn regions(&self, h: usize, w: usize) -> Result<Vec<ConvRegion>> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("patch grid must be at least 1x1".into()));
        }
        if !h.is_multiple_of(self.rows) || !w.is_multiple_of(self.cols) {
            return Err(Error::shape(
                "patchwise_conv",
                format!(
                    "{h}x{w} map cannot be divided uniformly into {}x{} patches",
                    self.rows, self.cols
                ),
            ));
        }
        let (ph, pw) = (h / self.rows, w / self.cols);
        let mut out = Vec::with_capacity(self.count());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let rect = Rect {
                    y0: r * ph,
                    x0: c * pw,
                    h: ph,
                    w: pw,
                };
                out.push(ConvRegion {
                    input: rect,
                    output: rect,
                });
            }
        }
        Ok(out)
    }
}

/// Block dimensions `(l1, l2, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "block dimensions must be positive: {self:?}"
            )));
        }
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "region block of {}x{} is not divisible into 8x8 patches",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// `P(l1, l2, c1)`: `depth` stacked 3x3/1/1 convolutions producing `c1` channels.
#[derive(Debug, Clone)]
pub struct PlainBlock {
    pub layers: Vec<ConvBnRelu>,
}

impl PlainBlock {
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        module: Module,
        in_channels: usize,
        out_channels: usize,
        depth: usize,
    ) -> Self {
        let layers = (0..depth.max(1))
            .map(|i| {
                let cin = if i == 0 { in_channels } else { out_channels };
                b.conv_bn_relu(
                    &format!("{name}.{}", i + 1),
                    module,
                    ConvSpec::same3(cin, out_channels),
                    PatchGrid::WHOLE,
                )
            })
            .collect();
        PlainBlock { layers }
    }

    pub fn forward(&self, f: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(f, x)?;
        }
        Ok(x)
    }
}

/// Plain blocks, each followed by 2x2/2/0 max pooling (odd sides are floored).
#[derive(Debug, Clone)]
pub struct PlainStack {
    pub stages: Vec<PlainBlock>,
}

impl PlainStack {
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        module: Module,
        in_channels: usize,
        widths: &[usize],
        depth: usize,
    ) -> Self {
        let mut cin = in_channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let blk =
                    PlainBlock::build(b, &format!("{name}.p{}", i + 1), module, cin, w, depth);
                cin = w;
                blk
            })
            .collect();
        PlainStack { stages }
    }

    pub fn forward(&self, f: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        for s in &self.stages {
            x = s.forward(f, x)?;
            x = f.graph.maxpool2_floor(x)?;
        }
        Ok(x)
    }

    /// Spatial side after all poolings.
    pub fn output_side(&self, side: usize) -> usize {
        self.stages.iter().fold(side, |s, _| s / 2)
    }
}

/// `R(l1, l2, c1)`: the single-scale region layer baseline.
#[derive(Debug, Clone)]
pub struct RegionBlock {
    pub conv1: ConvBnRelu,
    pub patch: ConvBnRelu,
}

impl RegionBlock {
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        module: Module,
        in_channels: usize,
        c1: usize,
    ) -> Self {
        let wide = 4 * c1;
        RegionBlock {
            conv1: b.conv_bn_relu(
                &format!("{name}.conv1"),
                module,
                ConvSpec::same3(in_channels, wide),
                PatchGrid::WHOLE,
            ),
            patch: b.conv_bn_relu(
                &format!("{name}.conv2"),
                module,
                ConvSpec::same3(wide, wide),
                PatchGrid::square(8),
            ),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let x1 = self.conv1.forward(f, x)?;
        let x2 = self.patch.forward(f, x1)?;
        f.graph.add(x1, x2)
    }

    /// Weights and biases of the patch-wise layer (everything except the first convolution).
    pub fn region_param_count(&self, store: &ParamStore) -> usize {
        self.patch.conv.param_count(store)
    }
}

/// `R_hm(l1, l2, c1)`: the hierarchical multi-scale region layer.
#[derive(Debug, Clone)]
pub struct HmrBlock {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
    pub conv3: ConvBnRelu,
    pub conv4: ConvBnRelu,
}

impl HmrBlock {
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        module: Module,
        in_channels: usize,
        c1: usize,
    ) -> Self {
        let mut layer = |i: usize, spec: ConvSpec, grid: usize| {
            b.conv_bn_relu(
                &format!("{name}.conv{i}"),
                module,
                spec,
                PatchGrid::square(grid),
            )
        };
        HmrBlock {
            conv1: layer(1, ConvSpec::same3(in_channels, 4 * c1), 1),
            conv2: layer(2, ConvSpec::same3(4 * c1, 2 * c1), 8),
            conv3: layer(3, ConvSpec::same3(2 * c1, c1), 4),
            conv4: layer(4, ConvSpec::same3(c1, c1), 2),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let x1 = self.conv1.forward(f, x)?;
        let x2 = self.conv2.forward(f, x1)?;
        let x3 = self.conv3.forward(f, x2)?;
        let x4 = self.conv4.forward(f, x3)?;
        let multi = f.graph.concat_channels(&[x2, x3, x4])?;
        f.graph.add(x1, multi)
    }

    /// Weights and biases of the three hierarchical layers (everything except the first
    /// convolution).
    pub fn region_param_count(&self, store: &ParamStore) -> usize {
        [&self.conv2, &self.conv3, &self.conv4]
            .iter()
            .map(|l| l.conv.param_count(store))
            .sum()
    }
}

/// Closed form of [`RegionBlock::region_param_count`]: `(9*4c1 + 1) * 4c1 * 64`.
pub fn region_param_formula(c1: usize) -> usize {
    9216 * c1 * c1 + 256 * c1
}

/// Closed form of [`HmrBlock::region_param_count`].
pub fn hmr_param_formula(c1: usize) -> usize {
    4932 * c1 * c1 + 148 * c1
}

/// Which region block the shared trunk uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    /// Hierarchical multi-scale region layer.
    #[default]
    Hmr,
    /// Single-scale region layer.
    R,
}

#[derive(Debug, Clone)]
pub enum AnyRegionBlock {
    Hmr(Box<HmrBlock>),
    R(Box<RegionBlock>),
}

impl AnyRegionBlock {
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        match self {
            AnyRegionBlock::Hmr(b) => b.forward(f, x),
            AnyRegionBlock::R(b) => b.forward(f, x),
        }
    }
}

/// The shared trunk: two region blocks at `(l, c)` and `(l/2, 2c)`, each followed by max pooling.
/// Output ("pool2") is `[N, 8c, l/4, l/4]`.
#[derive(Debug, Clone)]
pub struct RegionModule {
    pub block1: AnyRegionBlock,
    pub block2: AnyRegionBlock,
}

impl RegionModule {
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        l: usize,
        c: usize,
        kind: RegionKind,
    ) -> Result<Self> {
        if !l.is_multiple_of(16) || l == 0 {
            return Err(Error::Config(format!(
                "input side {l} must be a positive multiple of 16"
            )));
        }
        BlockSpec {
            height: l,
            width: l,
            channels: c,
        }
        .validate()?;
        BlockSpec {
            height: l / 2,
            width: l / 2,
            channels: 2 * c,
        }
        .validate()?;
        let mk = |b: &mut Builder<'_, R>, name: &str, cin: usize, c1: usize| match kind {
            RegionKind::Hmr => {
                AnyRegionBlock::Hmr(Box::new(HmrBlock::build(b, name, Module::Region, cin, c1)))
            }
            RegionKind::R => AnyRegionBlock::R(Box::new(RegionBlock::build(
                b,
                name,
                Module::Region,
                cin,
                c1,
            ))),
        };
        Ok(RegionModule {
            block1: mk(b, "region.block1", 3, c),
            block2: mk(b, "region.block2", 4 * c, 2 * c),
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, image: Var) -> Result<Var> {
        let x = self.block1.forward(f, image)?;
        let x = f.graph.maxpool2(x)?;
        let x = self.block2.forward(f, x)?;
        f.graph.maxpool2(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_indivisible_maps() {
        assert!(PatchGrid::square(8).regions(12, 16).is_err());
        let r = PatchGrid::square(2).regions(4, 6).unwrap();
        assert_eq!(r.len(), 4);
        assert_eq!(
            r[3].input,
            Rect {
                y0: 2,
                x0: 3,
                h: 2,
                w: 3
            }
        );
    }

    #[test]
    fn formulas_at_c8() {
        assert_eq!(region_param_formula(8), 591_872);
        assert_eq!(hmr_param_formula(8), 316_832);
    }
}
