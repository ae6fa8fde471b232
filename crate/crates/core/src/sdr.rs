//! Sparse-to-dense regression head over the BEV grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{conv2d_forward, ConvBlock, LayerParams, Mode};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdrVariant {
    /// Concatenation and element-wise addition.
    Sdr,
    /// No cross-scale concatenation.
    Sr,
    /// No element-wise addition.
    Dr,
}

impl SdrVariant {
    fn concatenates(self) -> bool {
        self != SdrVariant::Sr
    }

    fn adds(self) -> bool {
        self != SdrVariant::Dr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdrConfig {
    pub in_channels: usize,
    pub block_channels: [usize; 3],
    pub convs_per_block: usize,
    pub branch_channels: usize,
    pub branch_convs: usize,
    pub merged_channels: usize,
    pub anchors_per_cell: usize,
    pub variant: SdrVariant,
}

impl Default for SdrConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            block_channels: [64, 128, 256],
            convs_per_block: 4,
            branch_channels: 128,
            branch_convs: 2,
            merged_channels: 128,
            anchors_per_cell: 2,
            variant: SdrVariant::Sdr,
        }
    }
}

fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn conv_bn_count(cin: usize, cout: usize, k: usize) -> usize {
    conv_count(cin, cout, k) + 2 * cout
}

impl SdrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.convs_per_block == 0 || self.branch_convs == 0 {
            return Err(Error::Config("SDR blocks and branches need at least one conv".into()));
        }
        if self.anchors_per_cell == 0 || self.in_channels == 0 {
            return Err(Error::Config("SDR head needs input channels and anchors".into()));
        }
        Ok(())
    }

    /// Checks that an `h x w` grid survives three halvings.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("BEV grid {h}x{w} is not divisible by 8")));
        }
        Ok(())
    }

    fn branch_inputs(&self) -> [usize; 3] {
        let [c1, c2, c3] = self.block_channels;
        if self.variant.concatenates() {
            [c1 + c2, c2 + c3, c3]
        } else {
            [c1, c2, c3]
        }
    }

    /// Analytic trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut cin = self.in_channels;
        for &c in &self.block_channels {
            n += conv_bn_count(cin, c, 3) + (self.convs_per_block - 1) * conv_bn_count(c, c, 3);
            cin = c;
        }
        let b = self.branch_channels;
        for ci in self.branch_inputs() {
            n += conv_bn_count(ci, b, 3) + (self.branch_convs - 1) * conv_bn_count(b, b, 3);
        }
        if self.variant.adds() {
            n += self.block_channels.iter().map(|&c| conv_count(c, b, 1)).sum::<usize>();
        }
        n += conv_bn_count(3 * b, self.merged_channels, 3);
        let a = self.anchors_per_cell;
        n + conv_count(self.merged_channels, a, 1) + conv_count(self.merged_channels, 7 * a, 1)
    }
}

#[derive(Clone, Debug)]
pub struct SdrHead {
    pub config: SdrConfig,
    pub blocks: [Vec<ConvBlock>; 3],
    pub branches: [Vec<ConvBlock>; 3],
    pub align: Option<[LayerParams; 3]>,
    pub merge: ConvBlock,
    pub cls: LayerParams,
    pub reg: LayerParams,
}

/// `cls: [A, H1, W1]` logits and `reg: [7A, H1, W1]` residuals.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub cls: Var,
    pub reg: Var,
}

impl SdrHead {
    pub fn new(store: &mut ParamStore, name: &str, config: SdrConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        let mut blocks: [Vec<ConvBlock>; 3] = Default::default();
        for (i, &c) in config.block_channels.iter().enumerate() {
            for j in 0..config.convs_per_block {
                let (fin, stride) = if j == 0 { (cin, 2) } else { (c, 1) };
                blocks[i].push(ConvBlock::new(store, &format!("{name}.block{i}.{j}"), fin, c, 3, stride, 1, rng)?);
            }
            cin = c;
        }
        let b = config.branch_channels;
        let mut branches: [Vec<ConvBlock>; 3] = Default::default();
        for (i, ci) in config.branch_inputs().into_iter().enumerate() {
            for j in 0..config.branch_convs {
                let fin = if j == 0 { ci } else { b };
                branches[i].push(ConvBlock::new(store, &format!("{name}.branch{i}.{j}"), fin, b, 3, 1, 1, rng)?);
            }
        }
        let align = if config.variant.adds() {
            let mk = |store: &mut ParamStore, rng: &mut _, i: usize| {
                LayerParams::conv2d(store, &format!("{name}.align{i}"), config.block_channels[i], b, 1, 1, 0, rng)
            };
            Some([mk(store, rng, 0)?, mk(store, rng, 1)?, mk(store, rng, 2)?])
        } else {
            None
        };
        let merge = ConvBlock::new(store, &format!("{name}.merge"), 3 * b, config.merged_channels, 3, 1, 1, rng)?;
        let a = config.anchors_per_cell;
        let cls = LayerParams::conv2d(store, &format!("{name}.cls"), config.merged_channels, a, 1, 1, 0, rng)?;
        let reg = LayerParams::conv2d(store, &format!("{name}.reg"), config.merged_channels, 7 * a, 1, 1, 0, rng)?;
        Ok(Self {
            config,
            blocks,
            branches,
            align,
            merge,
            cls,
            reg,
        })
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        let convs = self.blocks.iter().chain(&self.branches).flatten().chain([&self.merge]);
        convs.map(|c| c.trainable_count(store)).sum::<usize>()
            + self.align.iter().flatten().map(|l| l.trainable_count(store)).sum::<usize>()
            + self.cls.trainable_count(store)
            + self.reg.trainable_count(store)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<HeadOutput> {
        let b = self.blocks_forward(g, store, x, mode)?;
        let f = self.cross_scale_fuse(g, store, b, mode)?;
        let fs = self.sparse_dense_merge(g, store, b, f, mode)?;
        self.detection_heads(g, store, fs)
    }

    /// Three downsampling blocks; outputs at 1/2, 1/4 and 1/8 resolution.
    pub fn blocks_forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<[Var; 3]> {
        let shape = g.shape(x).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("SDR input must be [C, H, W], got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "SDR input has {c} channels, expected {}",
                self.config.in_channels
            )));
        }
        self.config.check_extent(h, w)?;
        let mut h = x;
        let mut out = Vec::with_capacity(3);
        for block in &self.blocks {
            for conv in block {
                h = conv.forward(g, store, h, mode)?;
            }
            out.push(h);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Cross-scale concatenation and the three parallel branches, all
    /// returned at the `b1` resolution.
    pub fn cross_scale_fuse(&self, g: &mut Graph, store: &ParamStore, b: [Var; 3], mode: Mode) -> Result<[Var; 3]> {
        let [b1, b2, b3] = b;
        let inputs = if self.config.variant.concatenates() {
            let up2 = g.upsample2x(b2)?;
            let up3 = g.upsample2x(b3)?;
            for (name, lo, hi) in [("branch 1", b1, up2), ("branch 2", b2, up3)] {
                if g.shape(lo)[1..] != g.shape(hi)[1..] {
                    return Err(Error::Shape(format!(
                        "{name}: cannot concatenate {:?} with {:?}",
                        g.shape(lo),
                        g.shape(hi)
                    )));
                }
            }
            [g.concat(&[b1, up2], 0)?, g.concat(&[b2, up3], 0)?, b3]
        } else {
            [b1, b2, b3]
        };
        let mut out = Vec::with_capacity(3);
        for (i, (branch, input)) in self.branches.iter().zip(inputs).enumerate() {
            let mut h = input;
            for conv in branch {
                h = conv.forward(g, store, h, mode)?;
            }
            for _ in 0..i {
                h = g.upsample2x(h)?;
            }
            out.push(h);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Adds channel-aligned block outputs to the branch maps, concatenates
    /// them and applies the final 3x3 conv.
    pub fn sparse_dense_merge(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: [Var; 3],
        f: [Var; 3],
        mode: Mode,
    ) -> Result<Var> {
        let mut sums = Vec::with_capacity(3);
        for i in 0..3 {
            let s = match &self.align {
                Some(align) => {
                    let mut a = conv2d_forward(g, store, b[i], &align[i])?;
                    for _ in 0..i {
                        a = g.upsample2x(a)?;
                    }
                    if g.shape(a) != g.shape(f[i]) {
                        return Err(Error::Shape(format!(
                            "merge {}: aligned {:?} vs branch {:?}",
                            i + 1,
                            g.shape(a),
                            g.shape(f[i])
                        )));
                    }
                    g.add(f[i], a)?
                }
                None => f[i],
            };
            sums.push(s);
        }
        let cat = g.concat(&sums, 0)?;
        self.merge.forward(g, store, cat, mode)
    }

    pub fn detection_heads(&self, g: &mut Graph, store: &ParamStore, fs: Var) -> Result<HeadOutput> {
        Ok(HeadOutput {
            cls: conv2d_forward(g, store, fs, &self.cls)?,
            reg: conv2d_forward(g, store, fs, &self.reg)?,
        })
    }
}
