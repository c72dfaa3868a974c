//! Hybrid voxel feature extraction: per-scale attentive encoding of point
//! features, point-wise aggregation across feature scales, and dynamic
//! projection into pseudo-images at an independent set of scales.
//!
//! Feature scales and projection scales are decoupled: the aggregated
//! point-wise feature depends only on the feature scales, while each
//! projection scale needs just its own cursors and attention knowledge.
//! One encoder parameter set is shared by all feature scales and one
//! projection parameter set by all projection scales.

use crate::error::{HvError, Result};
use crate::pointcloud::PointCloud;
use crate::tensor::{linear_backward, linear_forward, DenseGrid, LinearParams};
use crate::voxel::{
    build_groups, compute_cursors, gather, scatter_max, scatter_max_backward, scatter_mean,
    scatter_sum, VoxelGridSpec, VoxelGroups,
};
use rand::Rng;

/// All trainable parameters of the extractor.
///
/// `point_embed` lifts raw points (width d) to the encoder width q;
/// `attention_embed` lifts the 2d-wide attention knowledge to q and is
/// shared by every scale in both scale sets. The `avfe_*` pair encodes
/// feature scales, the `avfeo_*` pair drives projection; their outputs
/// multiply elementwise, so they stay pre-activation and the rectifier
/// applies after the product.
#[derive(Debug, Clone, PartialEq)]
pub struct HvfeParams {
    pub point_embed: LinearParams,
    pub attention_embed: LinearParams,
    pub avfe_feature: LinearParams,
    pub avfe_attention: LinearParams,
    pub avfeo_feature: LinearParams,
    pub avfeo_attention: LinearParams,
}

impl HvfeParams {
    pub fn init<R: Rng>(
        point_dim: usize,
        q: usize,
        n_h: usize,
        num_feature_scales: usize,
        rng: &mut R,
    ) -> Self {
        let e = 2 * q * num_feature_scales;
        HvfeParams {
            point_embed: LinearParams::init(q, point_dim, rng),
            attention_embed: LinearParams::init(q, 2 * point_dim, rng),
            avfe_feature: LinearParams::init(q, q, rng),
            avfe_attention: LinearParams::init(q, q, rng),
            avfeo_feature: LinearParams::init(n_h, e, rng),
            avfeo_attention: LinearParams::init(n_h, q, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &LinearParams| LinearParams::zeros(p.out_dim(), p.in_dim());
        HvfeParams {
            point_embed: z(&self.point_embed),
            attention_embed: z(&self.attention_embed),
            avfe_feature: z(&self.avfe_feature),
            avfe_attention: z(&self.avfe_attention),
            avfeo_feature: z(&self.avfeo_feature),
            avfeo_attention: z(&self.avfeo_attention),
        }
    }

    pub fn point_dim(&self) -> usize {
        self.point_embed.in_dim()
    }

    pub fn encoder_width(&self) -> usize {
        self.point_embed.out_dim()
    }

    pub fn projection_channels(&self) -> usize {
        self.avfeo_feature.out_dim()
    }

    /// Number of feature scales baked into the aggregate width e = 2q*N_T.
    pub fn num_feature_scales(&self) -> usize {
        self.avfeo_feature.in_dim() / (2 * self.encoder_width())
    }
}

/// Dense pseudo-image: `[channels x ny x nx]` plus its grid geometry.
#[derive(Debug, Clone)]
pub struct PseudoImage {
    pub grid: VoxelGridSpec,
    pub image: DenseGrid,
}

/// Raw point matrix `[N x d]` of a cloud.
pub fn point_matrix(cloud: &PointCloud) -> DenseGrid {
    let mut data = Vec::with_capacity(cloud.len() * cloud.dim());
    for p in cloud.iter() {
        data.extend_from_slice(p);
    }
    DenseGrid::from_vec(&[cloud.len(), cloud.dim()], data).expect("cloud is rectangular")
}

/// Attention knowledge per point at one scale: centered coordinates,
/// the point's own extra features, then the voxel mean of the raw point
/// vector; width 2d.
pub fn attention_knowledge(raw: &DenseGrid, groups: &VoxelGroups) -> Result<DenseGrid> {
    let n = raw.shape()[0];
    let d = raw.shape()[1];
    let means = scatter_mean(raw, &groups.ordinals, groups.num_groups())?;
    let per_point = gather(&means, &groups.ordinals)?;
    let mut out = DenseGrid::zeros(&[n, 2 * d]);
    for i in 0..n {
        let p = raw.row(i);
        let m = per_point.row(i);
        let o = out.row_mut(i);
        for k in 0..3 {
            o[k] = p[k] - m[k];
        }
        o[3..d].copy_from_slice(&p[3..d]);
        o[d..2 * d].copy_from_slice(m);
    }
    Ok(out)
}

/// Column-wise concatenation of equal-height 2D grids.
pub fn concat_cols(parts: &[&DenseGrid]) -> Result<DenseGrid> {
    let n = parts.first().map_or(0, |p| p.shape()[0]);
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = DenseGrid::zeros(&[n, total]);
    for i in 0..n {
        let orow = out.row_mut(i);
        let mut at = 0;
        for p in parts {
            if p.shape()[0] != n {
                return Err(HvError::dim(
                    "concat_cols",
                    format!("row count {} vs {}", p.shape()[0], n),
                ));
            }
            let w = p.shape()[1];
            orow[at..at + w].copy_from_slice(p.row(i));
            at += w;
        }
    }
    Ok(out)
}

fn relu_of_product(a: &DenseGrid, b: &DenseGrid) -> Result<DenseGrid> {
    let mut m = a.hadamard(b)?;
    for v in m.data_mut() {
        *v = v.max(0.0);
    }
    Ok(m)
}

/// Forward state of one feature scale.
#[derive(Debug, Clone)]
pub struct ScaleTrace {
    pub groups: VoxelGroups,
    pub attention_raw: DenseGrid,
    pub attention_emb: DenseGrid,
    pub feature_lin: DenseGrid,
    pub attention_lin: DenseGrid,
    pub gated: DenseGrid,
    pub argmax: Vec<usize>,
}

/// Forward state of one projection scale.
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    pub grid: VoxelGridSpec,
    pub groups: VoxelGroups,
    pub attention_raw: DenseGrid,
    pub attention_emb: DenseGrid,
    pub feature_lin: DenseGrid,
    pub attention_lin: DenseGrid,
    pub gated: DenseGrid,
    pub argmax: Vec<usize>,
}

/// Everything the backward pass needs from a forward run.
#[derive(Debug, Clone)]
pub struct HvfeTrace {
    pub raw: DenseGrid,
    pub point_emb: DenseGrid,
    pub scales: Vec<ScaleTrace>,
    pub aggregated: DenseGrid,
    pub projections: Vec<ProjectionTrace>,
}

/// One attentive encoding stream: gate the embedded point features with
/// embedded attention knowledge, max-reduce per voxel, and concatenate the
/// per-point and per-voxel halves.
pub fn avfe_forward(
    point_emb: &DenseGrid,
    attention_emb: &DenseGrid,
    groups: &VoxelGroups,
    params: &HvfeParams,
) -> Result<(DenseGrid, DenseGrid, DenseGrid, DenseGrid, Vec<usize>)> {
    let a = linear_forward(point_emb, &params.avfe_feature, false)?;
    let b = linear_forward(attention_emb, &params.avfe_attention, false)?;
    let m = relu_of_product(&a, &b)?;
    let (vox, argmax) = scatter_max(&m, &groups.ordinals, groups.num_groups())?;
    let per_point_max = gather(&vox, &groups.ordinals)?;
    let h = concat_cols(&[&m, &per_point_max])?;
    Ok((h, a, b, m, argmax))
}

/// Encode a cloud over the feature scales into the aggregated point-wise
/// feature `[N x e]`. Independent of any projection scale.
pub fn encode_points(
    cloud: &PointCloud,
    feature_grids: &[VoxelGridSpec],
    params: &HvfeParams,
) -> Result<(DenseGrid, DenseGrid, DenseGrid, Vec<ScaleTrace>)> {
    if feature_grids.is_empty() {
        return Err(HvError::Config("feature scale set is empty".into()));
    }
    if feature_grids.len() != params.num_feature_scales() {
        return Err(HvError::dim(
            "encode_points",
            format!(
                "{} feature scales vs parameters sized for {}",
                feature_grids.len(),
                params.num_feature_scales()
            ),
        ));
    }
    let raw = point_matrix(cloud);
    let point_emb = linear_forward(&raw, &params.point_embed, true)?;
    let mut traces = Vec::with_capacity(feature_grids.len());
    let mut blocks = Vec::with_capacity(feature_grids.len());
    for grid in feature_grids {
        let cursors = compute_cursors(cloud, grid)?;
        let groups = build_groups(&cursors);
        let attention_raw = attention_knowledge(&raw, &groups)?;
        let attention_emb = linear_forward(&attention_raw, &params.attention_embed, true)?;
        let (h, a, b, m, argmax) = avfe_forward(&point_emb, &attention_emb, &groups, params)?;
        blocks.push(h);
        traces.push(ScaleTrace {
            groups,
            attention_raw,
            attention_emb,
            feature_lin: a,
            attention_lin: b,
            gated: m,
            argmax,
        });
    }
    let refs: Vec<&DenseGrid> = blocks.iter().collect();
    let aggregated = concat_cols(&refs)?;
    Ok((raw, point_emb, aggregated, traces))
}

/// Project the aggregated feature through one projection scale into a
/// pseudo-image. Pixels whose voxel holds no point stay exactly zero.
pub fn avfeo_project(
    cloud: &PointCloud,
    aggregated: &DenseGrid,
    raw: &DenseGrid,
    grid: &VoxelGridSpec,
    params: &HvfeParams,
) -> Result<(PseudoImage, ProjectionTrace)> {
    let cursors = compute_cursors(cloud, grid)?;
    let groups = build_groups(&cursors);
    let attention_raw = attention_knowledge(raw, &groups)?;
    let attention_emb = linear_forward(&attention_raw, &params.attention_embed, true)?;
    let a = linear_forward(aggregated, &params.avfeo_feature, false)?;
    let b = linear_forward(&attention_emb, &params.avfeo_attention, false)?;
    let m = relu_of_product(&a, &b)?;
    let (vox, argmax) = scatter_max(&m, &groups.ordinals, groups.num_groups())?;

    let n_h = params.projection_channels();
    let (nx, ny) = (grid.num_x(), grid.num_y());
    let mut image = DenseGrid::zeros(&[n_h, ny, nx]);
    for (g, &vid) in groups.voxel_ids.iter().enumerate() {
        let (xi, yi) = grid.pixel_of(vid);
        if xi >= nx || yi >= ny {
            return Err(HvError::Contract(format!(
                "voxel {vid} projects to pixel ({xi}, {yi}) outside {nx} x {ny}"
            )));
        }
        let row = vox.row(g);
        for ch in 0..n_h {
            image.data_mut()[(ch * ny + yi) * nx + xi] = row[ch];
        }
    }
    Ok((
        PseudoImage { grid: *grid, image },
        ProjectionTrace {
            grid: *grid,
            groups,
            attention_raw,
            attention_emb,
            feature_lin: a,
            attention_lin: b,
            gated: m,
            argmax,
        },
    ))
}

/// Full extractor forward pass: encode over the feature scales, then
/// project through every projection scale.
pub fn hvfe_forward(
    cloud: &PointCloud,
    feature_grids: &[VoxelGridSpec],
    projection_grids: &[VoxelGridSpec],
    params: &HvfeParams,
) -> Result<(Vec<PseudoImage>, HvfeTrace)> {
    if projection_grids.is_empty() {
        return Err(HvError::Config("projection scale set is empty".into()));
    }
    let (raw, point_emb, aggregated, scales) = encode_points(cloud, feature_grids, params)?;
    let mut images = Vec::with_capacity(projection_grids.len());
    let mut projections = Vec::with_capacity(projection_grids.len());
    for grid in projection_grids {
        let (img, trace) = avfeo_project(cloud, &aggregated, &raw, grid, params)?;
        images.push(img);
        projections.push(trace);
    }
    Ok((
        images,
        HvfeTrace {
            raw,
            point_emb,
            scales,
            aggregated,
            projections,
        },
    ))
}

fn relu_mask_apply(upstream: &mut DenseGrid, gated: &DenseGrid) {
    for (u, &m) in upstream.data_mut().iter_mut().zip(gated.data()) {
        if m <= 0.0 {
            *u = 0.0;
        }
    }
}

/// Backward through the whole extractor. `upstream` carries one gradient
/// grid per pseudo-image; returns parameter gradients in params layout.
pub fn hvfe_backward(
    params: &HvfeParams,
    trace: &HvfeTrace,
    upstream: &[DenseGrid],
) -> Result<HvfeParams> {
    if upstream.len() != trace.projections.len() {
        return Err(HvError::dim(
            "hvfe_backward",
            format!(
                "{} upstream images vs {} projections",
                upstream.len(),
                trace.projections.len()
            ),
        ));
    }
    let n = trace.raw.shape()[0];
    let q = params.encoder_width();
    let n_h = params.projection_channels();
    let mut grads = params.zeros_like();
    let mut d_aggregated = DenseGrid::zeros(trace.aggregated.shape());

    // Projection scales: image -> voxel rows -> gated product -> linears.
    for (pt, up_img) in trace.projections.iter().zip(upstream) {
        let (nx, ny) = (pt.grid.num_x(), pt.grid.num_y());
        if up_img.shape() != [n_h, ny, nx] {
            return Err(HvError::dim(
                "hvfe_backward",
                format!("upstream image {:?} vs [{n_h}, {ny}, {nx}]", up_img.shape()),
            ));
        }
        let num_groups = pt.groups.num_groups();
        let mut d_vox = DenseGrid::zeros(&[num_groups, n_h]);
        for (g, &vid) in pt.groups.voxel_ids.iter().enumerate() {
            let (xi, yi) = pt.grid.pixel_of(vid);
            let row = d_vox.row_mut(g);
            for ch in 0..n_h {
                row[ch] = up_img.data()[(ch * ny + yi) * nx + xi];
            }
        }
        let mut d_gated = scatter_max_backward(&d_vox, &pt.argmax, n)?;
        relu_mask_apply(&mut d_gated, &pt.gated);
        let d_a = d_gated.hadamard(&pt.attention_lin)?;
        let d_b = d_gated.hadamard(&pt.feature_lin)?;

        let ga = linear_backward(
            &trace.aggregated,
            &params.avfeo_feature,
            false,
            &pt.feature_lin,
            &d_a,
        )?;
        d_aggregated.add_assign(&ga.input)?;
        grads.avfeo_feature.weight.add_assign(&ga.weight)?;
        grads.avfeo_feature.bias.add_assign(&ga.bias)?;

        let gb = linear_backward(
            &pt.attention_emb,
            &params.avfeo_attention,
            false,
            &pt.attention_lin,
            &d_b,
        )?;
        grads.avfeo_attention.weight.add_assign(&gb.weight)?;
        grads.avfeo_attention.bias.add_assign(&gb.bias)?;

        let ge = linear_backward(
            &pt.attention_raw,
            &params.attention_embed,
            true,
            &pt.attention_emb,
            &gb.input,
        )?;
        grads.attention_embed.weight.add_assign(&ge.weight)?;
        grads.attention_embed.bias.add_assign(&ge.bias)?;
    }

    // Feature scales: split the aggregate gradient into per-scale blocks.
    let mut d_point_emb = DenseGrid::zeros(trace.point_emb.shape());
    for (t, st) in trace.scales.iter().enumerate() {
        let mut d_direct = DenseGrid::zeros(&[n, q]);
        let mut d_from_max = DenseGrid::zeros(&[n, q]);
        let base = t * 2 * q;
        for i in 0..n {
            let drow = d_aggregated.row(i);
            d_direct.row_mut(i).copy_from_slice(&drow[base..base + q]);
            d_from_max
                .row_mut(i)
                .copy_from_slice(&drow[base + q..base + 2 * q]);
        }
        // Gather adjoint: per-point gradients sum into their voxel row,
        // then route through the max to the winning point.
        let d_vox = scatter_sum(&d_from_max, &st.groups.ordinals, st.groups.num_groups())?;
        let routed = scatter_max_backward(&d_vox, &st.argmax, n)?;
        let mut d_gated = d_direct;
        d_gated.add_assign(&routed)?;
        relu_mask_apply(&mut d_gated, &st.gated);

        let d_a = d_gated.hadamard(&st.attention_lin)?;
        let d_b = d_gated.hadamard(&st.feature_lin)?;

        let ga = linear_backward(
            &trace.point_emb,
            &params.avfe_feature,
            false,
            &st.feature_lin,
            &d_a,
        )?;
        d_point_emb.add_assign(&ga.input)?;
        grads.avfe_feature.weight.add_assign(&ga.weight)?;
        grads.avfe_feature.bias.add_assign(&ga.bias)?;

        let gb = linear_backward(
            &st.attention_emb,
            &params.avfe_attention,
            false,
            &st.attention_lin,
            &d_b,
        )?;
        grads.avfe_attention.weight.add_assign(&gb.weight)?;
        grads.avfe_attention.bias.add_assign(&gb.bias)?;

        let ge = linear_backward(
            &st.attention_raw,
            &params.attention_embed,
            true,
            &st.attention_emb,
            &gb.input,
        )?;
        grads.attention_embed.weight.add_assign(&ge.weight)?;
        grads.attention_embed.bias.add_assign(&ge.bias)?;
    }

    let gp = linear_backward(
        &trace.raw,
        &params.point_embed,
        true,
        &trace.point_emb,
        &d_point_emb,
    )?;
    grads.point_embed.weight.add_assign(&gp.weight)?;
    grads.point_embed.bias.add_assign(&gp.bias)?;
    Ok(grads)
}

/// Deterministic fixture: every weight 0.1, zero biases. Positive inputs
/// produce strictly positive features, handy for occupancy tests.
pub fn uniform_params(point_dim: usize, q: usize, n_h: usize, n_t: usize) -> HvfeParams {
    let fill = |out_dim: usize, in_dim: usize| {
        let mut p = LinearParams::zeros(out_dim, in_dim);
        for v in p.weight.data_mut() {
            *v = 0.1;
        }
        p
    };
    HvfeParams {
        point_embed: fill(q, point_dim),
        attention_embed: fill(q, 2 * point_dim),
        avfe_feature: fill(q, q),
        avfe_attention: fill(q, q),
        avfeo_feature: fill(n_h, 2 * q * n_t),
        avfeo_attention: fill(n_h, q),
    }
}
