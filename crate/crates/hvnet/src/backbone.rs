//! 2D convolutional backbone: a main stream that ingests the pseudo-images
//! at matching resolutions, a feature fusion pyramid that concatenates all
//! block outputs at full resolution, and per-class strided conv chains that
//! emit class-specific feature maps in a single forward pass.

use crate::error::{HvError, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, Conv2dParams, DenseGrid,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Static architecture description. Block 1 keeps the input resolution;
/// every later block opens with a stride-2 conv that halves it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub block_channels: Vec<usize>,
    pub convs_per_block: usize,
    pub ffpn_channels: usize,
    pub head_channels: usize,
    /// Output stride of each class pyramid relative to full resolution.
    pub class_strides: Vec<usize>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() {
            return Err(HvError::Config("backbone needs at least one block".into()));
        }
        if self.convs_per_block == 0 {
            return Err(HvError::Config("convs_per_block must be positive".into()));
        }
        if self.class_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(HvError::Config(
                "class pyramid strides must be 1 or 2".into(),
            ));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }
}

/// All backbone weights. Gradients reuse this layout via [`zeros_like`].
///
/// [`zeros_like`]: BackboneParams::zeros_like
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub blocks: Vec<Vec<Conv2dParams>>,
    /// Deconvs aligning block i+1 up to block i's resolution.
    pub laterals: Vec<Conv2dParams>,
    /// Per-branch 3x3 convs applied before the final concatenation.
    pub fuse_convs: Vec<Conv2dParams>,
    /// Per-branch deconv chains aligning each branch to full resolution.
    pub fuse_upsamples: Vec<Vec<Conv2dParams>>,
    /// Per-class conv chains (first conv carries the class stride).
    pub class_heads: Vec<Vec<Conv2dParams>>,
}

impl BackboneParams {
    /// `image_channels` is the pseudo-image channel count; `num_images`
    /// how many pseudo-images the main stream will inject (<= blocks).
    pub fn init<R: Rng>(
        cfg: &BackboneConfig,
        image_channels: usize,
        num_images: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let n_b = cfg.num_blocks();
        if num_images == 0 || num_images > n_b {
            return Err(HvError::Config(format!(
                "{num_images} pseudo-images for {n_b} blocks"
            )));
        }
        let mut blocks = Vec::with_capacity(n_b);
        for i in 0..n_b {
            let c_out = cfg.block_channels[i];
            let mut convs = Vec::with_capacity(cfg.convs_per_block);
            for k in 0..cfg.convs_per_block {
                let (c_in, stride) = if k == 0 {
                    if i == 0 {
                        (image_channels, 1)
                    } else {
                        (cfg.block_channels[i - 1], 2)
                    }
                } else if k == 1 && i > 0 && i < num_images {
                    // The i-th pseudo-image concatenates after the strided conv.
                    (c_out + image_channels, 1)
                } else {
                    (c_out, 1)
                };
                convs.push(
                    Conv2dParams::init(c_out, c_in, (3, 3), rng)
                        .with_stride(stride)
                        .with_padding(1),
                );
            }
            blocks.push(convs);
        }

        let mut laterals = Vec::new();
        for i in 0..n_b.saturating_sub(1) {
            let c = cfg.block_channels[i + 1];
            laterals.push(Conv2dParams::init(c, c, (2, 2), rng).with_stride(2));
        }

        let mut fuse_convs = Vec::new();
        let mut fuse_upsamples = Vec::new();
        for i in 0..n_b {
            let c_in = if i + 1 < n_b {
                cfg.block_channels[i] + cfg.block_channels[i + 1]
            } else {
                cfg.block_channels[i]
            };
            fuse_convs
                .push(Conv2dParams::init(cfg.ffpn_channels, c_in, (3, 3), rng).with_padding(1));
            let chain = (0..i)
                .map(|_| {
                    Conv2dParams::init(cfg.ffpn_channels, cfg.ffpn_channels, (2, 2), rng)
                        .with_stride(2)
                })
                .collect();
            fuse_upsamples.push(chain);
        }

        let fused_channels = n_b * cfg.ffpn_channels;
        let mut class_heads = Vec::new();
        for &stride in &cfg.class_strides {
            class_heads.push(vec![
                Conv2dParams::init(cfg.head_channels, fused_channels, (3, 3), rng)
                    .with_stride(stride)
                    .with_padding(1),
                Conv2dParams::init(cfg.head_channels, cfg.head_channels, (3, 3), rng)
                    .with_padding(1),
            ]);
        }

        Ok(BackboneParams {
            blocks,
            laterals,
            fuse_convs,
            fuse_upsamples,
            class_heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &Conv2dParams| Conv2dParams {
            weight: DenseGrid::zeros(p.weight.shape()),
            bias: DenseGrid::zeros(p.bias.shape()),
            stride: p.stride,
            padding: p.padding,
        };
        BackboneParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(z).collect())
                .collect(),
            laterals: self.laterals.iter().map(z).collect(),
            fuse_convs: self.fuse_convs.iter().map(z).collect(),
            fuse_upsamples: self
                .fuse_upsamples
                .iter()
                .map(|c| c.iter().map(z).collect())
                .collect(),
            class_heads: self
                .class_heads
                .iter()
                .map(|c| c.iter().map(z).collect())
                .collect(),
        }
    }
}

/// Channel-wise concatenation of rank-3 grids with equal spatial extents.
pub fn concat_channels(parts: &[&DenseGrid]) -> Result<DenseGrid> {
    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
    let total: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(total * h * w);
    for p in parts {
        if p.shape()[1] != h || p.shape()[2] != w {
            return Err(HvError::dim(
                "concat_channels",
                format!("spatial {:?} vs [{h}, {w}]", &p.shape()[1..]),
            ));
        }
        data.extend_from_slice(p.data());
    }
    DenseGrid::from_vec(&[total, h, w], data)
}

fn split_channels(grid: &DenseGrid, sizes: &[usize]) -> Vec<DenseGrid> {
    let (h, w) = (grid.shape()[1], grid.shape()[2]);
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &c in sizes {
        let slice = &grid.data()[at * h * w..(at + c) * h * w];
        out.push(DenseGrid::from_vec(&[c, h, w], slice.to_vec()).unwrap());
        at += c;
    }
    out
}

/// Forward state of the full backbone.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    /// Per block, per conv: (input, output).
    pub conv_io: Vec<Vec<(DenseGrid, DenseGrid)>>,
    /// Index of the pseudo-image concatenated in each block, if any.
    pub injected: Vec<Option<usize>>,
    pub block_outputs: Vec<DenseGrid>,
    /// Per branch: lateral deconv output (input is the next block output).
    pub lateral_outputs: Vec<Option<DenseGrid>>,
    pub branch_inputs: Vec<DenseGrid>,
    pub fuse_outputs: Vec<DenseGrid>,
    /// Per branch, per upsample deconv: (input, output).
    pub upsample_io: Vec<Vec<(DenseGrid, DenseGrid)>>,
    pub fused: DenseGrid,
    /// Per class, per conv: (input, output).
    pub head_io: Vec<Vec<(DenseGrid, DenseGrid)>>,
}

impl BackboneTrace {
    fn empty() -> Self {
        BackboneTrace {
            conv_io: Vec::new(),
            injected: Vec::new(),
            block_outputs: Vec::new(),
            lateral_outputs: Vec::new(),
            branch_inputs: Vec::new(),
            fuse_outputs: Vec::new(),
            upsample_io: Vec::new(),
            fused: DenseGrid::zeros(&[1, 1, 1]),
            head_io: Vec::new(),
        }
    }
}

/// Run the main stream: image 0 feeds block 1, later images concatenate
/// after each block's strided first conv. Returns all block outputs.
fn main_stream(
    images: &[&DenseGrid],
    params: &BackboneParams,
    trace: &mut BackboneTrace,
) -> Result<Vec<DenseGrid>> {
    let mut current = images[0].clone();
    let mut outputs = Vec::with_capacity(params.blocks.len());
    for (i, convs) in params.blocks.iter().enumerate() {
        let mut io = Vec::with_capacity(convs.len());
        let mut injected = None;
        for (k, conv) in convs.iter().enumerate() {
            let out = conv2d_forward(&current, conv, true)?;
            io.push((current.clone(), out.clone()));
            current = out;
            if k == 0 && i > 0 && i < images.len() {
                current = concat_channels(&[&current, images[i]])?;
                injected = Some(i);
            }
        }
        trace.conv_io.push(io);
        trace.injected.push(injected);
        outputs.push(current.clone());
    }
    Ok(outputs)
}

/// Fuse block outputs at full resolution: every branch concatenates its
/// block with the upsampled next block, runs one 3x3 conv, then deconvs up
/// to full resolution; the fused map concatenates all branches.
fn ffpn_fuse(
    block_outputs: &[DenseGrid],
    params: &BackboneParams,
    trace: &mut BackboneTrace,
) -> Result<DenseGrid> {
    let n_b = block_outputs.len();
    let mut aligned = Vec::with_capacity(n_b);
    for i in 0..n_b {
        let branch_input = if i + 1 < n_b {
            let up = deconv2d_forward(&block_outputs[i + 1], &params.laterals[i], true)?;
            if up.shape()[1..] != block_outputs[i].shape()[1..] {
                return Err(HvError::dim(
                    "ffpn_fuse",
                    format!(
                        "lateral {:?} vs block {:?}",
                        up.shape(),
                        block_outputs[i].shape()
                    ),
                ));
            }
            let cat = concat_channels(&[&block_outputs[i], &up])?;
            trace.lateral_outputs.push(Some(up));
            cat
        } else {
            trace.lateral_outputs.push(None);
            block_outputs[i].clone()
        };
        let fused_branch = conv2d_forward(&branch_input, &params.fuse_convs[i], true)?;
        trace.branch_inputs.push(branch_input);
        trace.fuse_outputs.push(fused_branch.clone());

        let mut current = fused_branch;
        let mut ups = Vec::new();
        for up_conv in &params.fuse_upsamples[i] {
            let out = deconv2d_forward(&current, up_conv, true)?;
            ups.push((current.clone(), out.clone()));
            current = out;
        }
        trace.upsample_io.push(ups);
        aligned.push(current);
    }
    let refs: Vec<&DenseGrid> = aligned.iter().collect();
    concat_channels(&refs)
}

/// Per-class conv chains over the fused map.
fn class_pyramids(
    fused: &DenseGrid,
    heads: &[Vec<Conv2dParams>],
    trace: &mut BackboneTrace,
) -> Result<Vec<DenseGrid>> {
    let mut outputs = Vec::with_capacity(heads.len());
    for chain in heads {
        let mut current = fused.clone();
        let mut io = Vec::with_capacity(chain.len());
        for conv in chain {
            let out = conv2d_forward(&current, conv, true)?;
            io.push((current.clone(), out.clone()));
            current = out;
        }
        trace.head_io.push(io);
        outputs.push(current);
    }
    Ok(outputs)
}

/// Full backbone forward: pseudo-images (ascending scale, so descending
/// resolution) to per-class feature maps.
pub fn backbone_forward(
    images: &[&DenseGrid],
    params: &BackboneParams,
) -> Result<(Vec<DenseGrid>, BackboneTrace)> {
    if images.is_empty() {
        return Err(HvError::Config("backbone needs at least one image".into()));
    }
    if images.len() > params.blocks.len() {
        return Err(HvError::dim(
            "backbone_forward",
            format!(
                "{} pseudo-images but only {} blocks",
                images.len(),
                params.blocks.len()
            ),
        ));
    }
    let mut trace = BackboneTrace::empty();
    let block_outputs = main_stream(images, params, &mut trace)?;
    trace.block_outputs = block_outputs;
    let fused = ffpn_fuse(&trace.block_outputs.clone(), params, &mut trace)?;
    trace.fused = fused;
    let class_maps = class_pyramids(&trace.fused.clone(), &params.class_heads, &mut trace)?;
    Ok((class_maps, trace))
}

/// Backward through the whole backbone. Returns parameter gradients plus
/// the gradient w.r.t. each input pseudo-image.
pub fn backbone_backward(
    params: &BackboneParams,
    trace: &BackboneTrace,
    upstream_class_maps: &[DenseGrid],
    num_images: usize,
) -> Result<(BackboneParams, Vec<DenseGrid>)> {
    let mut grads = params.zeros_like();
    let n_b = params.blocks.len();

    // Class pyramids -> fused map.
    let mut d_fused = DenseGrid::zeros(trace.fused.shape());
    for (ci, up) in upstream_class_maps.iter().enumerate() {
        let chain = &params.class_heads[ci];
        let io = &trace.head_io[ci];
        let mut d_out = up.clone();
        for k in (0..chain.len()).rev() {
            let (x, y) = &io[k];
            let g = conv2d_backward(x, &chain[k], true, y, &d_out)?;
            grads.class_heads[ci][k].weight.add_assign(&g.weight)?;
            grads.class_heads[ci][k].bias.add_assign(&g.bias)?;
            d_out = g.input;
        }
        d_fused.add_assign(&d_out)?;
    }

    // Fused map -> branches -> block output gradients.
    let ffpn_c = trace.fuse_outputs[0].shape()[0];
    let branch_grads = split_channels(&d_fused, &vec![ffpn_c; n_b]);
    let mut d_blocks: Vec<DenseGrid> = trace
        .block_outputs
        .iter()
        .map(|b| DenseGrid::zeros(b.shape()))
        .collect();
    for i in 0..n_b {
        // Reverse the upsample chain.
        let mut d_out = branch_grads[i].clone();
        let ups = &trace.upsample_io[i];
        for k in (0..ups.len()).rev() {
            let (x, y) = &ups[k];
            let g = deconv2d_backward(x, &params.fuse_upsamples[i][k], true, y, &d_out)?;
            grads.fuse_upsamples[i][k].weight.add_assign(&g.weight)?;
            grads.fuse_upsamples[i][k].bias.add_assign(&g.bias)?;
            d_out = g.input;
        }
        // Fuse conv.
        let g = conv2d_backward(
            &trace.branch_inputs[i],
            &params.fuse_convs[i],
            true,
            &trace.fuse_outputs[i],
            &d_out,
        )?;
        grads.fuse_convs[i].weight.add_assign(&g.weight)?;
        grads.fuse_convs[i].bias.add_assign(&g.bias)?;
        // Split the branch input gradient back into block + lateral parts.
        if let Some(up) = &trace.lateral_outputs[i] {
            let c_block = trace.block_outputs[i].shape()[0];
            let c_up = up.shape()[0];
            let parts = split_channels(&g.input, &[c_block, c_up]);
            d_blocks[i].add_assign(&parts[0])?;
            let gl = deconv2d_backward(
                &trace.block_outputs[i + 1],
                &params.laterals[i],
                true,
                up,
                &parts[1],
            )?;
            grads.laterals[i].weight.add_assign(&gl.weight)?;
            grads.laterals[i].bias.add_assign(&gl.bias)?;
            d_blocks[i + 1].add_assign(&gl.input)?;
        } else {
            d_blocks[i].add_assign(&g.input)?;
        }
    }

    // Main stream, deepest block first.
    let mut d_images = vec![DenseGrid::zeros(&[1]); num_images];
    for i in (0..n_b).rev() {
        let convs = &params.blocks[i];
        let io = &trace.conv_io[i];
        let mut d_out = d_blocks[i].clone();
        for k in (0..convs.len()).rev() {
            // Undo the concat that followed conv k, if any.
            if k == 0 {
                if let Some(img_idx) = trace.injected[i] {
                    let c_conv = io[0].1.shape()[0];
                    let c_img = d_out.shape()[0] - c_conv;
                    let parts = split_channels(&d_out, &[c_conv, c_img]);
                    d_images[img_idx] = parts[1].clone();
                    d_out = parts[0].clone();
                }
            }
            let (x, y) = &io[k];
            let g = conv2d_backward(x, &convs[k], true, y, &d_out)?;
            grads.blocks[i][k].weight.add_assign(&g.weight)?;
            grads.blocks[i][k].bias.add_assign(&g.bias)?;
            d_out = g.input;
        }
        if i == 0 {
            d_images[0] = d_out;
        } else {
            d_blocks[i - 1].add_assign(&d_out)?;
        }
    }
    Ok((grads, d_images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(blocks: &[usize]) -> BackboneConfig {
        BackboneConfig {
            block_channels: blocks.to_vec(),
            convs_per_block: 2,
            ffpn_channels: 4,
            head_channels: 4,
            class_strides: vec![1, 2, 2],
        }
    }

    #[test]
    fn resolutions_halve_per_block() {
        let mut rng = crate::rng(8);
        let c = cfg(&[4, 6, 8]);
        let params = BackboneParams::init(&c, 3, 3, &mut rng).unwrap();
        let images = [
            DenseGrid::zeros(&[3, 16, 16]),
            DenseGrid::zeros(&[3, 8, 8]),
            DenseGrid::zeros(&[3, 4, 4]),
        ];
        let refs: Vec<&DenseGrid> = images.iter().collect();
        let (maps, trace) = backbone_forward(&refs, &params).unwrap();
        assert_eq!(trace.block_outputs[0].shape(), &[4, 16, 16]);
        assert_eq!(trace.block_outputs[1].shape(), &[6, 8, 8]);
        assert_eq!(trace.block_outputs[2].shape(), &[8, 4, 4]);
        // Fused map at full resolution with one channel group per block.
        assert_eq!(trace.fused.shape(), &[12, 16, 16]);
        // Class strides 1, 2, 2.
        assert_eq!(maps[0].shape(), &[4, 16, 16]);
        assert_eq!(maps[1].shape(), &[4, 8, 8]);
        assert_eq!(maps[2].shape(), &[4, 8, 8]);
    }

    #[test]
    fn single_image_plain_chain() {
        let mut rng = crate::rng(9);
        let c = cfg(&[4, 6, 8]);
        let params = BackboneParams::init(&c, 3, 1, &mut rng).unwrap();
        let img = DenseGrid::zeros(&[3, 8, 8]);
        let (_, trace) = backbone_forward(&[&img], &params).unwrap();
        assert!(trace.injected.iter().all(|x| x.is_none()));
    }

    #[test]
    fn zero_inputs_zero_biases_give_zero_maps() {
        let mut rng = crate::rng(10);
        let c = cfg(&[4, 6]);
        let params = BackboneParams::init(&c, 2, 2, &mut rng).unwrap();
        let images = [DenseGrid::zeros(&[2, 8, 8]), DenseGrid::zeros(&[2, 4, 4])];
        let refs: Vec<&DenseGrid> = images.iter().collect();
        let (maps, _) = backbone_forward(&refs, &params).unwrap();
        for m in maps {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn degenerate_single_block_fuse_is_plain_conv() {
        let mut rng = crate::rng(11);
        let mut c = cfg(&[4]);
        c.class_strides = vec![1];
        let params = BackboneParams::init(&c, 2, 1, &mut rng).unwrap();
        assert!(params.laterals.is_empty());
        let img =
            DenseGrid::from_vec(&[2, 4, 4], (0..32).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (_, trace) = backbone_forward(&[&img], &params).unwrap();
        assert_eq!(trace.fused.shape(), &[4, 4, 4]);
        let psi = conv2d_forward(&trace.block_outputs[0], &params.fuse_convs[0], true).unwrap();
        assert_eq!(trace.fused, psi);
    }

    #[test]
    fn identity_pyramid_passes_channels_through() {
        // A 1x1 identity conv chain maps the (non-negative) fused grid to
        // itself.
        let fused = {
            let mut g = DenseGrid::zeros(&[3, 4, 4]);
            for (k, v) in g.data_mut().iter_mut().enumerate() {
                *v = (k % 7) as f64 * 0.5;
            }
            g
        };
        let mut ident = Conv2dParams::zeros(3, 3, (1, 1));
        for c in 0..3 {
            ident.weight.data_mut()[c * 3 + c] = 1.0;
        }
        let mut trace = BackboneTrace::empty();
        let maps = class_pyramids(&fused, &[vec![ident]], &mut trace).unwrap();
        assert_eq!(maps[0], fused);
    }

    #[test]
    fn injected_zero_image_keeps_extents() {
        let mut rng = crate::rng(12);
        let c = cfg(&[4, 6]);
        let params = BackboneParams::init(&c, 2, 2, &mut rng).unwrap();
        let mut img0 = DenseGrid::zeros(&[2, 8, 8]);
        for (k, v) in img0.data_mut().iter_mut().enumerate() {
            *v = (k % 5) as f64 * 0.2;
        }
        let img1 = DenseGrid::zeros(&[2, 4, 4]);
        let (maps, _) = backbone_forward(&[&img0, &img1], &params).unwrap();
        assert_eq!(maps[0].shape()[1..], [8, 8]);
        assert_eq!(maps[1].shape()[1..], [4, 4]);
    }

    #[test]
    fn concat_resolution_mismatch_is_error() {
        let mut rng = crate::rng(13);
        let c = cfg(&[4, 6]);
        let params = BackboneParams::init(&c, 2, 2, &mut rng).unwrap();
        let img0 = DenseGrid::zeros(&[2, 8, 8]);
        let bad = DenseGrid::zeros(&[2, 6, 6]);
        assert!(backbone_forward(&[&img0, &bad], &params).is_err());
    }
}
