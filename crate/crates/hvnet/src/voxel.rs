//! Hybrid-scale voxelization and the index-based gather/scatter kernels.
//!
//! Voxels are 2D pillars spanning the full scene height. Each point keeps
//! only a cursor (flat voxel id) per scale; no per-voxel buffers exist and
//! no point is ever dropped. Scatter reductions are indexed by dense
//! occupied-group ordinals with a separate ordinal-to-voxel-id map, and
//! argmax ties break to the smallest point index so every kernel is
//! bit-reproducible.

use crate::error::{HvError, Result};
use crate::pointcloud::{PointCloud, SceneSpec};
use crate::tensor::DenseGrid;
use std::collections::BTreeMap;

/// Absolute slack added before flooring grid quotients, so metric sizes
/// that are exact in decimal (64 / 0.2) land on their intended integer.
const GRID_EPS: f64 = 1e-9;

fn floor_cells(extent: f64, cell: f64) -> usize {
    ((extent / cell) + GRID_EPS).floor() as usize
}

/// Voxel grid geometry at one scale: base cell size times a scale factor.
/// Cells are half-open, so a point exactly on a boundary belongs to the
/// higher-index voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub scene: SceneSpec,
    pub cell_x: f64,
    pub cell_y: f64,
    pub scale: f64,
}

impl VoxelGridSpec {
    pub fn new(scene: SceneSpec, cell_x: f64, cell_y: f64, scale: f64) -> Result<Self> {
        if !(cell_x > 0.0 && cell_y > 0.0 && scale > 0.0) {
            return Err(HvError::Config(format!(
                "voxel cell {cell_x} x {cell_y} and scale {scale} must be positive"
            )));
        }
        let spec = VoxelGridSpec {
            scene,
            cell_x,
            cell_y,
            scale,
        };
        if spec.num_x() == 0 || spec.num_y() == 0 {
            return Err(HvError::Config(format!(
                "grid at scale {scale} has no cells"
            )));
        }
        Ok(spec)
    }

    /// Cell count along x (the scene length L axis).
    pub fn num_x(&self) -> usize {
        let (l, _, _) = self.scene.extents();
        floor_cells(l, self.cell_x * self.scale)
    }

    /// Cell count along y (the scene width W axis); also the cursor stride.
    pub fn num_y(&self) -> usize {
        let (_, w, _) = self.scene.extents();
        floor_cells(w, self.cell_y * self.scale)
    }

    pub fn num_voxels(&self) -> usize {
        self.num_x() * self.num_y()
    }

    /// Flat voxel id of a point: `floor(dx/cell) * num_y + floor(dy/cell)`.
    pub fn cursor_of(&self, x: f64, y: f64) -> Result<usize> {
        let ix = ((x - self.scene.min[0]) / (self.cell_x * self.scale) + GRID_EPS).floor();
        let iy = ((y - self.scene.min[1]) / (self.cell_y * self.scale) + GRID_EPS).floor();
        let (nx, ny) = (self.num_x(), self.num_y());
        if ix < 0.0 || iy < 0.0 || ix >= nx as f64 || iy >= ny as f64 {
            return Err(HvError::Contract(format!(
                "point ({x}, {y}) maps to cell ({ix}, {iy}) outside {nx} x {ny} grid; \
                 crop the cloud first"
            )));
        }
        Ok(ix as usize * ny + iy as usize)
    }

    /// Inverse of the cursor packing: (x_index, y_index) of a voxel id.
    pub fn pixel_of(&self, cursor: usize) -> (usize, usize) {
        (cursor / self.num_y(), cursor % self.num_y())
    }
}

/// Per-point voxel ids for a cropped cloud at one scale.
pub fn compute_cursors(cloud: &PointCloud, grid: &VoxelGridSpec) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let (x, y, _) = cloud.xyz(i);
        out.push(grid.cursor_of(x, y)?);
    }
    Ok(out)
}

/// Occupied voxels of one scale: ascending voxel ids, the point-index set
/// of each, and each point's dense group ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGroups {
    pub voxel_ids: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub ordinals: Vec<usize>,
}

impl VoxelGroups {
    pub fn num_groups(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.len()).collect()
    }
}

/// Group points by cursor value; members ascend within each group.
pub fn build_groups(cursors: &[usize]) -> VoxelGroups {
    let mut by_voxel: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cursors.iter().enumerate() {
        by_voxel.entry(c).or_default().push(i);
    }
    let mut voxel_ids = Vec::with_capacity(by_voxel.len());
    let mut members = Vec::with_capacity(by_voxel.len());
    let mut ordinals = vec![0usize; cursors.len()];
    for (ord, (vid, pts)) in by_voxel.into_iter().enumerate() {
        for &p in &pts {
            ordinals[p] = ord;
        }
        voxel_ids.push(vid);
        members.push(pts);
    }
    VoxelGroups {
        voxel_ids,
        members,
        ordinals,
    }
}

/// Row slice: `out[m] = values[indices[m]]`.
pub fn gather(values: &DenseGrid, indices: &[usize]) -> Result<DenseGrid> {
    let k = values.shape()[0];
    let q = values.shape()[1];
    let mut out = DenseGrid::zeros(&[indices.len(), q]);
    for (m, &idx) in indices.iter().enumerate() {
        if idx >= k {
            return Err(HvError::Bounds {
                op: "gather",
                index: idx,
                bound: k,
            });
        }
        out.row_mut(m).copy_from_slice(values.row(idx));
    }
    Ok(out)
}

/// Per-group columnwise max with argmax point indices. Ties break to the
/// smallest point index, making the reduction order-independent.
pub fn scatter_max(
    src: &DenseGrid,
    ordinals: &[usize],
    num_groups: usize,
) -> Result<(DenseGrid, Vec<usize>)> {
    let n = src.shape()[0];
    let q = src.shape()[1];
    if ordinals.len() != n {
        return Err(HvError::dim(
            "scatter_max",
            format!("{} ordinals vs {} rows", ordinals.len(), n),
        ));
    }
    let mut out = DenseGrid::from_vec(&[num_groups, q], vec![f64::NEG_INFINITY; num_groups * q])?;
    let mut argmax = vec![usize::MAX; num_groups * q];
    for i in 0..n {
        let g = ordinals[i];
        if g >= num_groups {
            return Err(HvError::Bounds {
                op: "scatter_max",
                index: g,
                bound: num_groups,
            });
        }
        let row = src.row(i);
        let orow = out.row_mut(g);
        for c in 0..q {
            if row[c] > orow[c] {
                orow[c] = row[c];
                argmax[g * q + c] = i;
            }
        }
    }
    // Unoccupied groups (possible only if the caller over-allocates) read 0.
    for (v, a) in out.data_mut().iter_mut().zip(&argmax) {
        if *a == usize::MAX {
            *v = 0.0;
        }
    }
    Ok((out, argmax))
}

/// Subgradient of [`scatter_max`]: upstream routes to each argmax entry.
pub fn scatter_max_backward(
    upstream: &DenseGrid,
    argmax: &[usize],
    num_points: usize,
) -> Result<DenseGrid> {
    let q = upstream.shape()[1];
    if upstream.numel() != argmax.len() {
        return Err(HvError::dim(
            "scatter_max_backward",
            format!("{} upstream vs {} argmax", upstream.numel(), argmax.len()),
        ));
    }
    let mut out = DenseGrid::zeros(&[num_points, q]);
    for (flat, &winner) in argmax.iter().enumerate() {
        if winner == usize::MAX {
            continue;
        }
        let c = flat % q;
        out.row_mut(winner)[c] += upstream.data()[flat];
    }
    Ok(out)
}

/// Per-group columnwise arithmetic mean.
pub fn scatter_mean(src: &DenseGrid, ordinals: &[usize], num_groups: usize) -> Result<DenseGrid> {
    let (mut out, counts) = scatter_sum_counts(src, ordinals, num_groups)?;
    for g in 0..num_groups {
        if counts[g] > 0 {
            let inv = 1.0 / counts[g] as f64;
            for v in out.row_mut(g).iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`scatter_mean`]: each member receives upstream / group size.
pub fn scatter_mean_backward(
    upstream: &DenseGrid,
    ordinals: &[usize],
    group_sizes: &[usize],
) -> Result<DenseGrid> {
    let q = upstream.shape()[1];
    let mut out = DenseGrid::zeros(&[ordinals.len(), q]);
    for (i, &g) in ordinals.iter().enumerate() {
        let inv = 1.0 / group_sizes[g] as f64;
        let urow = upstream.row(g);
        for (c, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = urow[c] * inv;
        }
    }
    Ok(out)
}

/// Per-group columnwise sum (the adjoint of [`gather`] by ordinals).
pub fn scatter_sum(src: &DenseGrid, ordinals: &[usize], num_groups: usize) -> Result<DenseGrid> {
    Ok(scatter_sum_counts(src, ordinals, num_groups)?.0)
}

fn scatter_sum_counts(
    src: &DenseGrid,
    ordinals: &[usize],
    num_groups: usize,
) -> Result<(DenseGrid, Vec<usize>)> {
    let n = src.shape()[0];
    let q = src.shape()[1];
    if ordinals.len() != n {
        return Err(HvError::dim(
            "scatter_sum",
            format!("{} ordinals vs {} rows", ordinals.len(), n),
        ));
    }
    let mut out = DenseGrid::zeros(&[num_groups, q]);
    let mut counts = vec![0usize; num_groups];
    for i in 0..n {
        let g = ordinals[i];
        if g >= num_groups {
            return Err(HvError::Bounds {
                op: "scatter_sum",
                index: g,
                bound: num_groups,
            });
        }
        counts[g] += 1;
        let row = src.row(i);
        let orow = out.row_mut(g);
        for c in 0..q {
            orow[c] += row[c];
        }
    }
    Ok((out, counts))
}
