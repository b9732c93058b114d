//! Two-stage residual backbone and hierarchy feature fusion.
//!
//! The backbone downsamples to a stride-16 map (`f16`) and a stride-32 map
//! (`f32map`). Fusion upsamples the stride-32 map with a learnable 2x2
//! transposed convolution, projects both maps with 1x1 convolutions and adds
//! them element-wise.

use rand::Rng;

use crate::error::{Result, RtnError};
use crate::gridmath::{uniform_fan_in, BoundParams, Grid, ParamStore, Tape, Var};

pub const STRIDE_FINE: usize = 16;
pub const STRIDE_COARSE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage16_channels: usize,
    pub stage32_channels: usize,
    pub fused_channels: usize,
    /// Residual blocks per stage, each `x + relu(conv3x3(x))`.
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage16_channels: 64,
            stage32_channels: 96,
            fused_channels: 64,
            blocks_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    fn stem_channels(&self) -> (usize, usize) {
        ((self.stage16_channels / 4).max(1), (self.stage16_channels / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage16_channels == 0 || self.stage32_channels == 0 || self.fused_channels == 0 {
            return Err(RtnError::Config("backbone channel counts must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(RtnError::Config("blocks_per_stage must be positive".into()));
        }
        Ok(())
    }
}

/// Adds freshly initialized backbone and fusion parameters to `store`.
pub fn init_params<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (c4, c8) = cfg.stem_channels();
    let (c16, c32, f) = (cfg.stage16_channels, cfg.stage32_channels, cfg.fused_channels);
    let mut conv = |store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize| -> Result<()> {
        store.insert(format!("{name}.weight"), uniform_fan_in(&[out, inp, k, k], inp * k * k, rng))?;
        store.insert(format!("{name}.bias"), Grid::zeros(&[out]))
    };
    conv(store, "backbone.stem", c4, 1, 4)?;
    conv(store, "backbone.down8", c8, c4, 3)?;
    conv(store, "backbone.down16", c16, c8, 3)?;
    for i in 0..cfg.blocks_per_stage {
        conv(store, &format!("backbone.s16.block{i}"), c16, c16, 3)?;
    }
    conv(store, "backbone.down32", c32, c16, 3)?;
    for i in 0..cfg.blocks_per_stage {
        conv(store, &format!("backbone.s32.block{i}"), c32, c32, 3)?;
    }
    conv(store, "fusion.proj16", f, c16, 1)?;
    conv(store, "fusion.proj32", f, c32, 1)?;
    // nearest-neighbour upsampling: each input channel copied to its own
    // output channel over the 2x2 footprint
    let mut up = Grid::zeros(&[c32, c32, 2, 2]);
    for c in 0..c32 {
        for k in 0..4 {
            up.values_mut()[(c * c32 + c) * 4 + k] = 1.0;
        }
    }
    store.insert("fusion.upsample.weight", up)?;
    Ok(())
}

/// Extents of `(h, w)` rounded up to multiples of 32.
pub fn padded_extent(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(STRIDE_COARSE) * STRIDE_COARSE, w.div_ceil(STRIDE_COARSE) * STRIDE_COARSE)
}

/// Stride-16 feature extent for an image of `(h, w)` pixels.
pub fn feature_shape_for(extent: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = extent;
    if h < STRIDE_COARSE || w < STRIDE_COARSE {
        return Err(RtnError::InputTooSmall { height: h, width: w });
    }
    let (ph, pw) = padded_extent(h, w);
    Ok((ph / STRIDE_FINE, pw / STRIDE_FINE))
}

/// Zero-pads a `[N, C, H, W]` grid at the bottom and right so both sides are
/// multiples of 32. Returns the padded grid and the `(rows, cols)` added.
pub fn pad_to_stride(image: &Grid) -> Result<(Grid, (usize, usize))> {
    let (n, c, h, w) = image.dims4()?;
    let (ph, pw) = padded_extent(h, w);
    if (ph, pw) == (h, w) {
        return Ok((image.clone(), (0, 0)));
    }
    let mut out = vec![0.0; n * c * ph * pw];
    for plane in 0..n * c {
        for y in 0..h {
            let src = &image.values()[(plane * h + y) * w..(plane * h + y + 1) * w];
            out[(plane * ph + y) * pw..(plane * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    Ok((Grid::new(vec![n, c, ph, pw], out)?, (ph - h, pw - w)))
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    pub f16: Var,
    pub f32map: Var,
    /// Rows and columns of zero padding added at the bottom/right.
    pub pad: (usize, usize),
}

fn conv_relu(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, b, stride, pad)?;
    Ok(tape.relu(y))
}

fn residual_block(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = conv_relu(tape, p, name, x, 1, 1)?;
    tape.add(x, y)
}

/// Runs the backbone on `image` (`[N, 1, H, W]`), padding it first when its
/// sides are not multiples of 32.
pub fn backbone_forward(tape: &mut Tape, p: &BoundParams, cfg: &BackboneConfig, image: &Grid) -> Result<BackboneOutput> {
    let (_, _, h, w) = image.dims4()?;
    if h < STRIDE_COARSE || w < STRIDE_COARSE {
        return Err(RtnError::InputTooSmall { height: h, width: w });
    }
    let (padded, pad) = pad_to_stride(image)?;
    let x = tape.leaf(padded);
    let x = conv_relu(tape, p, "backbone.stem", x, 4, 0)?;
    let x = conv_relu(tape, p, "backbone.down8", x, 2, 1)?;
    let mut x = conv_relu(tape, p, "backbone.down16", x, 2, 1)?;
    for i in 0..cfg.blocks_per_stage {
        x = residual_block(tape, p, &format!("backbone.s16.block{i}"), x)?;
    }
    let f16 = x;
    let mut x = conv_relu(tape, p, "backbone.down32", f16, 2, 1)?;
    for i in 0..cfg.blocks_per_stage {
        x = residual_block(tape, p, &format!("backbone.s32.block{i}"), x)?;
    }
    Ok(BackboneOutput { f16, f32map: x, pad })
}

/// Hierarchy feature on the stride-16 grid.
#[derive(Debug, Clone, Copy)]
pub struct FusedFeature {
    pub var: Var,
    pub source_strides: (usize, usize),
}

/// `proj16(f16) + proj32(upsample(f32map))`.
pub fn fuse_hierarchy(tape: &mut Tape, p: &BoundParams, f16: Var, f32map: Var) -> Result<FusedFeature> {
    let up = tape.transposed_conv2d(f32map, p.var("fusion.upsample.weight")?, 2)?;
    let (s16, sup) = (tape.value(f16).shape(), tape.value(up).shape());
    if s16.len() != 4 || sup.len() != 4 || s16[0] != sup[0] || s16[2..] != sup[2..] {
        return Err(RtnError::FusionShape {
            expected: s16.to_vec(),
            actual: sup.to_vec(),
        });
    }
    let a = tape.conv2d(f16, p.var("fusion.proj16.weight")?, p.var("fusion.proj16.bias")?, 1, 0)?;
    let b = tape.conv2d(up, p.var("fusion.proj32.weight")?, p.var("fusion.proj32.bias")?, 1, 0)?;
    let var = tape.add(a, b)?;
    Ok(FusedFeature {
        var,
        source_strides: (STRIDE_FINE, STRIDE_COARSE),
    })
}
