use islab_tensor::{Graph, ParamId, ParamStore, Var};
use serde::{Deserialize, Serialize};

use super::layers::{norm_relu, Conv, Initializer, ParamMode, UpConv};
use crate::domain::{Organelle, CHANNEL_ORDER};
use crate::{IslError, Result, Scalar};

/// Per-organelle head outputs, each `(batch, 1, H, W)`; `None` for heads that
/// were not evaluated.
pub type HeadOutputs = [Option<Var>; 4];

/// Weights of the first convolution.
pub enum FirstConvParams {
    /// The model's own parameters.
    Static,
    /// One generated `(weight, bias)` pair per batch item.
    PerSample(Vec<(Var, Var)>),
}

fn apply_first<T: Scalar>(
    conv: &Conv,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    mode: ParamMode,
    x: Var,
    first: &FirstConvParams,
) -> Result<Var> {
    match first {
        FirstConvParams::Static => conv.forward(g, store, mode, x),
        FirstConvParams::PerSample(ws) => {
            let n = g.shape(x)[0];
            if ws.len() != n {
                return Err(IslError::Shape(format!("{} generated first-conv sets for batch of {n}", ws.len())));
            }
            let mut outs = Vec::with_capacity(n);
            for (b, &(w, bias)) in ws.iter().enumerate() {
                let xb = g.gather_batch(x, &[b])?;
                outs.push(conv.forward_with(g, xb, w, bias)?);
            }
            Ok(g.concat_batch(&outs)?)
        }
    }
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, divisor: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 1 {
        return Err(IslError::Shape(format!("generator expects (batch, 1, H, W), got {s:?}")));
    }
    if s[2] % divisor != 0 || s[3] % divisor != 0 {
        return Err(IslError::Shape(format!("input {}x{} not divisible by {divisor}", s[2], s[3])));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub base_width: usize,
    pub n_resblocks: usize,
    pub patch_size: usize,
}

impl GeneratorSpec {
    pub const N_HEADS: usize = 4;

    pub fn paper() -> Self {
        Self { base_width: 64, n_resblocks: 9, patch_size: 512 }
    }

    pub fn test() -> Self {
        Self { base_width: 8, n_resblocks: 2, patch_size: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_resblocks == 0 || self.base_width == 0 {
            return Err(IslError::Config("generator needs n_resblocks >= 1 and base_width >= 1".into()));
        }
        if self.patch_size % 4 != 0 {
            return Err(IslError::Config(format!("patch size {} not divisible by 4", self.patch_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub ups: [UpConv; 2],
    pub out: Conv,
}

impl DecoderHead {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.ups.iter().flat_map(|u| u.params()).collect();
        p.extend(self.out.params());
        p
    }
}

/// Shared ResNet trunk (stem, two stride-2 downsamplers, residual blocks)
/// feeding four independent decoder heads with tanh outputs.
#[derive(Clone, Debug)]
pub struct ResnetGenerator {
    pub spec: GeneratorSpec,
    pub stem: Conv,
    pub down: [Conv; 2],
    pub blocks: Vec<[Conv; 2]>,
    pub heads: [DecoderHead; 4],
}

impl ResnetGenerator {
    pub fn build<T: Scalar>(spec: GeneratorSpec, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let stem = Conv::new(store, init, "gen.stem", 1, w, 7, 1, 0, 3)?;
        let down = [
            Conv::new(store, init, "gen.down0", w, 2 * w, 3, 2, 1, 0)?,
            Conv::new(store, init, "gen.down1", 2 * w, 4 * w, 3, 2, 1, 0)?,
        ];
        let mut blocks = Vec::with_capacity(spec.n_resblocks);
        for i in 0..spec.n_resblocks {
            blocks.push([
                Conv::new(store, init, &format!("gen.block{i}.conv0"), 4 * w, 4 * w, 3, 1, 0, 1)?,
                Conv::new(store, init, &format!("gen.block{i}.conv1"), 4 * w, 4 * w, 3, 1, 0, 1)?,
            ]);
        }
        let mut heads = Vec::with_capacity(4);
        for o in CHANNEL_ORDER {
            let name = format!("gen.head.{o}");
            heads.push(DecoderHead {
                ups: [
                    UpConv::new(store, init, &format!("{name}.up0"), 4 * w, 2 * w)?,
                    UpConv::new(store, init, &format!("{name}.up1"), 2 * w, w)?,
                ],
                out: Conv::new(store, init, &format!("{name}.out"), w, 1, 7, 1, 0, 3)?,
            });
        }
        let heads: [DecoderHead; 4] = heads.try_into().expect("four heads");
        Ok(Self { spec, stem, down, blocks, heads })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mode: ParamMode,
        x: Var,
        first: &FirstConvParams,
        heads: &[Organelle],
    ) -> Result<HeadOutputs> {
        check_input(g, x, 4)?;
        let h = apply_first(&self.stem, g, store, mode, x, first)?;
        let mut h = norm_relu(g, h)?;
        for d in &self.down {
            let y = d.forward(g, store, mode, h)?;
            h = norm_relu(g, y)?;
        }
        for [c0, c1] in &self.blocks {
            let r = c0.forward(g, store, mode, h)?;
            let r = norm_relu(g, r)?;
            let r = c1.forward(g, store, mode, r)?;
            let r = g.instance_norm(r, T::lit(super::layers::NORM_EPS))?;
            h = g.add(h, r)?;
        }
        let mut out: HeadOutputs = [None; 4];
        for &o in heads {
            let head = &self.heads[o.index()];
            let mut y = h;
            for up in &head.ups {
                let u = up.forward(g, store, mode, y)?;
                y = norm_relu(g, u)?;
            }
            let y = head.out.forward(g, store, mode, y)?;
            out[o.index()] = Some(g.tanh(y));
        }
        Ok(out)
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.stem.params().to_vec();
        p.extend(self.down.iter().flat_map(|d| d.params()));
        p.extend(self.blocks.iter().flat_map(|b| b.iter().flat_map(|c| c.params())));
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetPPSpec {
    pub depth: usize,
    pub base_width: usize,
    pub patch_size: usize,
}

impl UnetPPSpec {
    pub fn paper() -> Self {
        Self { depth: 4, base_width: 32, patch_size: 512 }
    }

    pub fn test() -> Self {
        Self { depth: 2, base_width: 8, patch_size: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 {
            return Err(IslError::Config("UNet++ needs depth >= 1 and base_width >= 1".into()));
        }
        if self.patch_size % (1 << self.depth) != 0 {
            return Err(IslError::Config(format!(
                "patch size {} not divisible by 2^{}",
                self.patch_size, self.depth
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Two 3x3 conv + instance norm + ReLU stages.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub convs: [Conv; 2],
}

impl ConvBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv::new(store, init, &format!("{name}.conv0"), cin, cout, 3, 1, 1, 0)?,
                Conv::new(store, init, &format!("{name}.conv1"), cout, cout, 3, 1, 1, 0)?,
            ],
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
}

/// UNet++: nested dense skip pathways between encoder level `i` and every
/// intermediate decoder node `X(i, j)`; four 1x1 tanh heads on `X(0, depth)`.
#[derive(Clone, Debug)]
pub struct UnetPlusPlus {
    pub spec: UnetPPSpec,
    /// `nodes[i][j]` is the block computing `X(i, j)`, for `i + j <= depth`.
    pub nodes: Vec<Vec<ConvBlock>>,
    pub heads: [Conv; 4],
}

impl UnetPlusPlus {
    pub fn build<T: Scalar>(spec: UnetPPSpec, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<Self> {
        spec.validate()?;
        let depth = spec.depth;
        let mut nodes = Vec::with_capacity(depth + 1);
        for i in 0..=depth {
            let mut row = Vec::new();
            for j in 0..=depth - i {
                let cin = if j == 0 {
                    if i == 0 { 1 } else { spec.width(i - 1) }
                } else {
                    j * spec.width(i) + spec.width(i + 1)
                };
                row.push(ConvBlock::new(store, init, &format!("gen.x{i}_{j}"), cin, spec.width(i))?);
            }
            nodes.push(row);
        }
        let heads: Vec<Conv> = CHANNEL_ORDER
            .iter()
            .map(|o| Conv::new(store, init, &format!("gen.head.{o}.out"), spec.width(0), 1, 1, 1, 0, 0))
            .collect::<Result<_>>()?;
        Ok(Self { spec, nodes, heads: heads.try_into().expect("four heads") })
    }

    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mode: ParamMode,
        b: &ConvBlock,
        x: Var,
        first: Option<&FirstConvParams>,
    ) -> Result<Var> {
        let y = match first {
            Some(f) => apply_first(&b.convs[0], g, store, mode, x, f)?,
            None => b.convs[0].forward(g, store, mode, x)?,
        };
        let y = norm_relu(g, y)?;
        let y = b.convs[1].forward(g, store, mode, y)?;
        norm_relu(g, y)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mode: ParamMode,
        x: Var,
        first: &FirstConvParams,
        heads: &[Organelle],
    ) -> Result<HeadOutputs> {
        let depth = self.spec.depth;
        check_input(g, x, 1 << depth)?;
        let mut xs: Vec<Vec<Var>> = vec![Vec::new(); depth + 1];
        let x00 = self.block(g, store, mode, &self.nodes[0][0], x, Some(first))?;
        xs[0].push(x00);
        for i in 1..=depth {
            let p = g.max_pool2(xs[i - 1][0])?;
            let v = self.block(g, store, mode, &self.nodes[i][0], p, None)?;
            xs[i].push(v);
        }
        for j in 1..=depth {
            for i in 0..=depth - j {
                let up = g.upsample2(xs[i + 1][j - 1])?;
                let mut parts = xs[i][..j].to_vec();
                parts.push(up);
                let cat = g.concat_channels(&parts)?;
                let v = self.block(g, store, mode, &self.nodes[i][j], cat, None)?;
                xs[i].push(v);
            }
        }
        let top = xs[0][depth];
        let mut out: HeadOutputs = [None; 4];
        for &o in heads {
            let y = self.heads[o.index()].forward(g, store, mode, top)?;
            out[o.index()] = Some(g.tanh(y));
        }
        Ok(out)
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        self.nodes.iter().flatten().flat_map(|b| b.params()).collect()
    }
}

/// Either backbone, behind one forward contract:
/// `(batch, 1, H, W)` in [-1, 1] to four `(batch, 1, H, W)` tanh heads.
#[derive(Clone, Debug)]
pub enum GeneratorModel {
    Resnet(ResnetGenerator),
    UnetPP(UnetPlusPlus),
}

impl GeneratorModel {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mode: ParamMode,
        x: Var,
        first: &FirstConvParams,
        heads: &[Organelle],
    ) -> Result<HeadOutputs> {
        match self {
            GeneratorModel::Resnet(m) => m.forward(g, store, mode, x, first, heads),
            GeneratorModel::UnetPP(m) => m.forward(g, store, mode, x, first, heads),
        }
    }

    /// All four heads concatenated in channel order: `(batch, 4, H, W)`.
    pub fn forward_all<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mode: ParamMode,
        x: Var,
        first: &FirstConvParams,
    ) -> Result<Var> {
        let heads = self.forward(g, store, mode, x, first, &CHANNEL_ORDER)?;
        let vars: Vec<Var> = heads.iter().map(|h| h.expect("all heads requested")).collect();
        Ok(g.concat_channels(&vars)?)
    }

    pub fn first_conv(&self) -> &Conv {
        match self {
            GeneratorModel::Resnet(m) => &m.stem,
            GeneratorModel::UnetPP(m) => &m.nodes[0][0].convs[0],
        }
    }

    /// Parameters used only by organelle `o`'s decoder head.
    pub fn head_params(&self, o: Organelle) -> Vec<ParamId> {
        match self {
            GeneratorModel::Resnet(m) => m.heads[o.index()].params(),
            GeneratorModel::UnetPP(m) => m.heads[o.index()].params().to_vec(),
        }
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        match self {
            GeneratorModel::Resnet(m) => m.shared_params(),
            GeneratorModel::UnetPP(m) => m.shared_params(),
        }
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut p = self.shared_params();
        for o in CHANNEL_ORDER {
            p.extend(self.head_params(o));
        }
        p
    }

    /// Spatial dims of the input must be multiples of this.
    pub fn divisor(&self) -> usize {
        match self {
            GeneratorModel::Resnet(_) => 4,
            GeneratorModel::UnetPP(m) => 1 << m.spec.depth,
        }
    }
}
