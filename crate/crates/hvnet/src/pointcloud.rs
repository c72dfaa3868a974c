//! Point cloud ingestion: KITTI velodyne `.bin` files, KITTI label text,
//! scene cropping, global augmentation and synthetic toy scenes.

use crate::error::{HvError, Result};
use crate::geometry::{riou, wrap_yaw, Box3D, RotatedBoxBEV};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

/// Unordered point set with `dim` values per point (x, y, z followed by
/// `dim - 3` extra features; KITTI carries one reflectance value).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 3, "points need at least xyz");
        PointCloud {
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.dim);
        self.data.extend_from_slice(p);
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn xyz(&self, i: usize) -> (f64, f64, f64) {
        let p = self.point(i);
        (p[0], p[1], p[2])
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Axis-aligned detection range, half-open `[min, max)` on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneSpec {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for k in 0..3 {
            if !(max[k] > min[k]) {
                return Err(HvError::Config(format!(
                    "scene max must exceed min on every axis: {min:?} vs {max:?}"
                )));
            }
        }
        Ok(SceneSpec { min, max })
    }

    /// (L, W, H) extents in meters.
    pub fn extents(&self) -> (f64, f64, f64) {
        (
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.min[0]
            && x < self.max[0]
            && y >= self.min[1]
            && y < self.max[1]
            && z >= self.min[2]
            && z < self.max[2]
    }
}

/// Ground-truth box with its class name.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox {
    pub class: String,
    pub box3: Box3D,
}

/// A point cloud together with its ground-truth boxes.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    pub boxes: Vec<LabeledBox>,
}

/// Result of reading a `.bin` file: the finite points plus a count of
/// records rejected for non-finite values.
#[derive(Debug)]
pub struct BinRead {
    pub cloud: PointCloud,
    pub rejected: usize,
}

/// Parse a KITTI velodyne file: consecutive 16-byte records of four
/// little-endian f32 values (x, y, z, reflectance).
pub fn read_kitti_bin(path: &Path) -> Result<BinRead> {
    let bytes = fs::read(path)?;
    parse_kitti_bin(&bytes, &path.display().to_string())
}

pub fn parse_kitti_bin(bytes: &[u8], origin: &str) -> Result<BinRead> {
    if bytes.len() % 16 != 0 {
        return Err(HvError::Format {
            path: origin.to_string(),
            detail: format!(
                "length {} not divisible by 16; truncated record at byte offset {}",
                bytes.len(),
                bytes.len() - bytes.len() % 16
            ),
        });
    }
    let mut cloud = PointCloud::new(4);
    let mut rejected = 0;
    for rec in bytes.chunks_exact(16) {
        let mut vals = [0.0f64; 4];
        for (k, v) in vals.iter_mut().enumerate() {
            let raw: [u8; 4] = rec[k * 4..k * 4 + 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
        }
        if vals.iter().all(|v| v.is_finite()) {
            cloud.push(&vals);
        } else {
            rejected += 1;
        }
    }
    Ok(BinRead { cloud, rejected })
}

pub fn write_kitti_bin(cloud: &PointCloud, path: &Path) -> Result<()> {
    if cloud.dim() != 4 {
        return Err(HvError::dim(
            "write_kitti_bin",
            format!("format wants 4 values per point, cloud has {}", cloud.dim()),
        ));
    }
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.iter() {
        for &v in p {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Keep exactly the points inside the half-open scene bounds, in order.
pub fn crop_to_scene(cloud: &PointCloud, scene: &SceneSpec) -> PointCloud {
    let mut out = PointCloud::new(cloud.dim());
    for p in cloud.iter() {
        if scene.contains(p[0], p[1], p[2]) {
            out.push(p);
        }
    }
    out
}

/// One sampled global augmentation: mirror across y, rotate about z,
/// uniformly scale, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTransform {
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl GlobalTransform {
    pub fn identity() -> Self {
        GlobalTransform {
            flip_y: false,
            rotation: 0.0,
            scale: 1.0,
            translation: [0.0; 3],
        }
    }

    pub fn apply_point(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let y = if self.flip_y { -y } else { y };
        let (s, c) = self.rotation.sin_cos();
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        (
            self.scale * rx + self.translation[0],
            self.scale * ry + self.translation[1],
            self.scale * z + self.translation[2],
        )
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let (cx, cy, cz) = self.apply_point(b.bev.cx, b.bev.cy, b.z_center);
        let yaw = if self.flip_y { -b.bev.yaw } else { b.bev.yaw } + self.rotation;
        Box3D::new(
            RotatedBoxBEV::new(
                cx,
                cy,
                b.bev.length * self.scale,
                b.bev.width * self.scale,
                yaw,
            ),
            cz,
            b.height * self.scale,
        )
    }
}

/// Parameter ranges for global augmentation sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub rotation_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub translation_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            rotation_range: [-PI / 2.0, PI / 2.0],
            scale_range: [0.95, 1.05],
            translation_std: [0.2, 0.2, 0.2],
        }
    }
}

pub fn sample_transform<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> GlobalTransform {
    let flip_y = rng.gen_bool(cfg.flip_probability);
    let rotation = rng.gen_range(cfg.rotation_range[0]..=cfg.rotation_range[1]);
    let scale = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    let mut translation = [0.0; 3];
    for k in 0..3 {
        if cfg.translation_std[k] > 0.0 {
            let n = Normal::new(0.0, cfg.translation_std[k]).unwrap();
            translation[k] = n.sample(rng);
        }
    }
    GlobalTransform {
        flip_y,
        rotation,
        scale,
        translation,
    }
}

/// Apply one transform to every point and every box of a scene.
pub fn apply_global_transform(scene: &LabeledScene, t: &GlobalTransform) -> LabeledScene {
    let mut cloud = PointCloud::new(scene.cloud.dim());
    for p in scene.cloud.iter() {
        let (x, y, z) = t.apply_point(p[0], p[1], p[2]);
        let mut q = p.to_vec();
        q[0] = x;
        q[1] = y;
        q[2] = z;
        cloud.push(&q);
    }
    let boxes = scene
        .boxes
        .iter()
        .map(|b| LabeledBox {
            class: b.class.clone(),
            box3: t.apply_box(&b.box3),
        })
        .collect();
    LabeledScene { cloud, boxes }
}

/// Sample a global flip/rotation/scale/translation and apply it.
pub fn augment_global<R: Rng>(
    scene: &LabeledScene,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> LabeledScene {
    apply_global_transform(scene, &sample_transform(rng, cfg))
}

/// Cuboid template for one object class in synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectTemplate {
    pub class: String,
    /// (w, l, h) in meters, matching anchor size order.
    pub size: [f64; 3],
    pub z_center: f64,
}

/// Synthetic scene recipe: templates plus point budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub scene: SceneSpec,
    pub templates: Vec<ObjectTemplate>,
    pub boxes_per_class: usize,
    pub points_per_box: usize,
    pub clutter_points: usize,
}

/// Generate a labeled toy scene: one cuboid per template instance with
/// surface-sampled points, non-overlapping BEV footprints, plus uniform
/// ground clutter outside every box. All coordinates are quantized through
/// f32 so `.bin` round trips are exact.
pub fn synth_toy_scene<R: Rng>(rng: &mut R, spec: &SynthSpec) -> Result<LabeledScene> {
    let mut boxes: Vec<LabeledBox> = Vec::new();
    for tpl in &spec.templates {
        let (w, l, h) = (tpl.size[0], tpl.size[1], tpl.size[2]);
        for _ in 0..spec.boxes_per_class {
            let margin = 0.5 * (l * l + w * w).sqrt() + 0.2;
            let (xlo, xhi) = (spec.scene.min[0] + margin, spec.scene.max[0] - margin);
            let (ylo, yhi) = (spec.scene.min[1] + margin, spec.scene.max[1] - margin);
            if xhi <= xlo || yhi <= ylo {
                return Err(HvError::Domain(format!(
                    "scene too small for a {} template",
                    tpl.class
                )));
            }
            let mut placed = false;
            for _ in 0..1000 {
                let cx = rng.gen_range(xlo..xhi);
                let cy = rng.gen_range(ylo..yhi);
                let yaw = rng.gen_range(0.0..PI);
                let z = tpl.z_center + rng.gen_range(-0.2..0.2);
                let cand = Box3D::new(RotatedBoxBEV::new(cx, cy, l, w, yaw), z, h);
                let overlaps = boxes
                    .iter()
                    .map(|b| riou(&cand.bev, &b.box3.bev))
                    .collect::<Result<Vec<_>>>()?
                    .iter()
                    .any(|&v| v > 0.0);
                if !overlaps {
                    boxes.push(LabeledBox {
                        class: tpl.class.clone(),
                        box3: cand,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(HvError::Domain(
                    "could not place non-overlapping boxes; scene too crowded".into(),
                ));
            }
        }
    }

    let mut cloud = PointCloud::new(4);
    let q32 = |v: f64| v as f32 as f64;
    for b in &boxes {
        let bx = &b.box3;
        let (l, w, h) = (bx.bev.length, bx.bev.width, bx.height);
        let ins = 1e-3;
        // Faces weighted by area: two length sides, two width sides, top.
        let areas = [l * h, l * h, w * h, w * h, l * w];
        let total: f64 = areas.iter().sum();
        for _ in 0..spec.points_per_box {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let (u, v, dz) = match face {
                0 | 1 => {
                    let side = if face == 0 { 1.0 } else { -1.0 };
                    (
                        rng.gen_range(-l / 2.0 + ins..l / 2.0 - ins),
                        side * (w / 2.0 - ins),
                        rng.gen_range(-h / 2.0 + ins..h / 2.0 - ins),
                    )
                }
                2 | 3 => {
                    let side = if face == 2 { 1.0 } else { -1.0 };
                    (
                        side * (l / 2.0 - ins),
                        rng.gen_range(-w / 2.0 + ins..w / 2.0 - ins),
                        rng.gen_range(-h / 2.0 + ins..h / 2.0 - ins),
                    )
                }
                _ => (
                    rng.gen_range(-l / 2.0 + ins..l / 2.0 - ins),
                    rng.gen_range(-w / 2.0 + ins..w / 2.0 - ins),
                    h / 2.0 - ins,
                ),
            };
            let (s, c) = bx.bev.yaw.sin_cos();
            let x = bx.bev.cx + c * u - s * v;
            let y = bx.bev.cy + s * u + c * v;
            let z = bx.z_center + dz;
            let r = rng.gen_range(0.0..1.0);
            cloud.push(&[q32(x), q32(y), q32(z), q32(r)]);
        }
    }

    let mut placed = 0;
    while placed < spec.clutter_points {
        let x = rng.gen_range(spec.scene.min[0]..spec.scene.max[0] - 1e-3);
        let y = rng.gen_range(spec.scene.min[1]..spec.scene.max[1] - 1e-3);
        let z = rng.gen_range(spec.scene.min[2] + 0.01..spec.scene.min[2] + 0.3);
        if boxes.iter().any(|b| b.box3.bev.contains(x, y)) {
            continue;
        }
        let r = rng.gen_range(0.0..1.0);
        cloud.push(&[q32(x), q32(y), q32(z), q32(r)]);
        placed += 1;
    }

    Ok(LabeledScene { cloud, boxes })
}

/// One KITTI label line: a class-named box, optionally scored.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEntry {
    pub class: String,
    pub box3: Box3D,
    pub score: Option<f64>,
}

/// Map an internal yaw in [0, pi) to the KITTI output range [-pi/2, pi/2).
fn yaw_to_ry(yaw: f64) -> f64 {
    if yaw < PI / 2.0 {
        yaw
    } else {
        yaw - PI
    }
}

/// Serialize boxes as KITTI label text. Truncation, occlusion, alpha and
/// the 2D bbox are emitted as zeros; coordinates stay in the LiDAR frame.
pub fn format_kitti_labels(entries: &[LabelEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let b = &e.box3;
        out.push_str(&format!(
            "{} 0.00 0 0.00 0.00 0.00 0.00 0.00 {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            e.class,
            b.height,
            b.bev.width,
            b.bev.length,
            b.bev.cx,
            b.bev.cy,
            b.z_center,
            yaw_to_ry(b.bev.yaw),
        ));
        if let Some(s) = e.score {
            out.push_str(&format!(" {:.6}", s));
        }
        out.push('\n');
    }
    out
}

pub fn write_kitti_labels(entries: &[LabelEntry], path: &Path) -> Result<()> {
    fs::write(path, format_kitti_labels(entries))?;
    Ok(())
}

pub fn read_kitti_labels(path: &Path) -> Result<Vec<LabelEntry>> {
    let text = fs::read_to_string(path)?;
    parse_kitti_labels(&text, &path.display().to_string())
}

pub fn parse_kitti_labels(text: &str, origin: &str) -> Result<Vec<LabelEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err(HvError::Format {
                path: origin.to_string(),
                detail: format!("line {}: {} fields, expected >= 15", lineno + 1, fields.len()),
            });
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| HvError::Format {
                path: origin.to_string(),
                detail: format!("line {}: bad number {:?}", lineno + 1, fields[idx]),
            })
        };
        let (h, w, l) = (num(8)?, num(9)?, num(10)?);
        let (x, y, z) = (num(11)?, num(12)?, num(13)?);
        let ry = num(14)?;
        let score = if fields.len() >= 16 {
            Some(num(15)?)
        } else {
            None
        };
        out.push(LabelEntry {
            class: fields[0].to_string(),
            box3: Box3D::new(RotatedBoxBEV::new(x, y, l, w, wrap_yaw(ry)), z, h),
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneSpec {
        SceneSpec::new([0.0, -32.0, -3.0], [64.0, 32.0, 2.0]).unwrap()
    }

    #[test]
    fn bin_parse_two_points() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let r = parse_kitti_bin(&bytes, "mem").unwrap();
        assert_eq!(r.cloud.len(), 2);
        assert_eq!(r.cloud.point(0), &[1.0, 2.0, 3.0, 0.5]);
        assert_eq!(r.cloud.point(1), &[4.0, 5.0, 6.0, 0.25]);
        assert_eq!(r.rejected, 0);
    }

    #[test]
    fn bin_parse_empty() {
        let r = parse_kitti_bin(&[], "mem").unwrap();
        assert_eq!(r.cloud.len(), 0);
    }

    #[test]
    fn bin_parse_truncated_is_error() {
        let err = parse_kitti_bin(&[0u8; 17], "mem").unwrap_err();
        assert!(err.to_string().contains("byte offset 16"), "{err}");
    }

    #[test]
    fn bin_parse_rejects_nonfinite() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, f32::NAN, 5.0, 6.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let r = parse_kitti_bin(&bytes, "mem").unwrap();
        assert_eq!(r.cloud.len(), 1);
        assert_eq!(r.rejected, 1);
    }

    #[test]
    fn crop_keeps_inside_drops_outside() {
        let mut cloud = PointCloud::new(4);
        cloud.push(&[10.0, 0.0, 0.0, 0.1]);
        cloud.push(&[-1.0, 0.0, 0.0, 0.2]);
        cloud.push(&[64.0, 0.0, 0.0, 0.3]); // exactly at max -> dropped
        let c = crop_to_scene(&cloud, &scene());
        assert_eq!(c.len(), 1);
        assert_eq!(c.point(0)[0], 10.0);
    }

    #[test]
    fn crop_is_idempotent() {
        let mut cloud = PointCloud::new(4);
        let mut rng = crate::rng(2);
        for _ in 0..200 {
            cloud.push(&[
                rng.gen_range(-10.0..70.0),
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.0..1.0),
            ]);
        }
        let once = crop_to_scene(&cloud, &scene());
        let twice = crop_to_scene(&once, &scene());
        assert_eq!(once, twice);
    }

    #[test]
    fn identity_transform_is_identity() {
        let mut cloud = PointCloud::new(4);
        cloud.push(&[1.0, 2.0, 3.0, 0.5]);
        let b = Box3D::new(RotatedBoxBEV::new(1.0, 2.0, 2.0, 1.0, 0.3), -1.0, 1.5);
        let sc = LabeledScene {
            cloud,
            boxes: vec![LabeledBox {
                class: "Car".into(),
                box3: b,
            }],
        };
        let out = apply_global_transform(&sc, &GlobalTransform::identity());
        assert_eq!(out.cloud, sc.cloud);
        assert_eq!(out.boxes[0].box3, b);
    }

    #[test]
    fn flip_mirrors_y_and_negates_yaw() {
        let t = GlobalTransform {
            flip_y: true,
            ..GlobalTransform::identity()
        };
        let (x, y, z) = t.apply_point(1.0, 2.0, 0.0);
        assert_eq!((x, y, z), (1.0, -2.0, 0.0));
        let b = Box3D::new(RotatedBoxBEV::new(0.0, 0.0, 2.0, 1.0, 0.4), -1.0, 1.5);
        let fb = t.apply_box(&b);
        assert!((fb.bev.yaw - wrap_yaw(-0.4)).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_rotates_points_and_yaw() {
        let t = GlobalTransform {
            rotation: PI / 2.0,
            ..GlobalTransform::identity()
        };
        let (x, y, _) = t.apply_point(1.0, 0.0, 0.0);
        assert!((x - 0.0).abs() < 1e-12 && (y - 1.0).abs() < 1e-12);
        let b = Box3D::new(RotatedBoxBEV::new(0.0, 0.0, 2.0, 1.0, 0.4), -1.0, 1.5);
        let rb = t.apply_box(&b);
        assert!((rb.bev.yaw - wrap_yaw(0.4 + PI / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn augmentation_preserves_box_membership() {
        let mut rng = crate::rng(9);
        let spec = SynthSpec {
            scene: scene(),
            templates: vec![ObjectTemplate {
                class: "Car".into(),
                size: [2.0, 6.0, 1.56],
                z_center: -1.0,
            }],
            boxes_per_class: 2,
            points_per_box: 50,
            clutter_points: 50,
        };
        let sc = synth_toy_scene(&mut rng, &spec).unwrap();
        let before: Vec<Vec<bool>> = sc
            .cloud
            .iter()
            .map(|p| {
                sc.boxes
                    .iter()
                    .map(|b| b.box3.contains(p[0], p[1], p[2]))
                    .collect()
            })
            .collect();
        for _ in 0..5 {
            let aug = augment_global(&sc, &mut rng, &AugmentConfig::default());
            let after: Vec<Vec<bool>> = aug
                .cloud
                .iter()
                .map(|p| {
                    aug.boxes
                        .iter()
                        .map(|b| b.box3.contains(p[0], p[1], p[2]))
                        .collect()
                })
                .collect();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn synth_boxes_do_not_overlap() {
        let mut rng = crate::rng(4);
        let spec = SynthSpec {
            scene: scene(),
            templates: vec![
                ObjectTemplate {
                    class: "Car".into(),
                    size: [2.0, 6.0, 1.56],
                    z_center: -1.0,
                },
                ObjectTemplate {
                    class: "Pedestrian".into(),
                    size: [0.8, 0.8, 1.7],
                    z_center: -1.0,
                },
            ],
            boxes_per_class: 1,
            points_per_box: 30,
            clutter_points: 10,
        };
        let sc = synth_toy_scene(&mut rng, &spec).unwrap();
        assert_eq!(sc.boxes.len(), 2);
        let r = riou(&sc.boxes[0].box3.bev, &sc.boxes[1].box3.bev).unwrap();
        assert_eq!(r, 0.0);
        // Surface points land inside their own box and inside the scene.
        for p in sc.cloud.iter() {
            assert!(spec.scene.contains(p[0], p[1], p[2]));
        }
    }

    #[test]
    fn synth_zero_objects_is_clutter_only() {
        let mut rng = crate::rng(4);
        let spec = SynthSpec {
            scene: scene(),
            templates: vec![],
            boxes_per_class: 1,
            points_per_box: 30,
            clutter_points: 25,
        };
        let sc = synth_toy_scene(&mut rng, &spec).unwrap();
        assert!(sc.boxes.is_empty());
        assert_eq!(sc.cloud.len(), 25);
    }

    #[test]
    fn bin_round_trip_identity() {
        let mut rng = crate::rng(31);
        let spec = SynthSpec {
            scene: scene(),
            templates: vec![ObjectTemplate {
                class: "Cyclist".into(),
                size: [0.8, 1.8, 1.5],
                z_center: -1.0,
            }],
            boxes_per_class: 1,
            points_per_box: 40,
            clutter_points: 20,
        };
        let sc = synth_toy_scene(&mut rng, &spec).unwrap();
        let dir = std::env::temp_dir().join("hvnet_bin_roundtrip");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bin");
        write_kitti_bin(&sc.cloud, &path).unwrap();
        let back = read_kitti_bin(&path).unwrap();
        assert_eq!(back.cloud, sc.cloud);
        assert_eq!(back.rejected, 0);
    }

    #[test]
    fn label_text_round_trip() {
        let b = Box3D::new(RotatedBoxBEV::new(3.5, -1.25, 3.5, 1.7, 2.0), -1.0, 1.56);
        let entries = vec![LabelEntry {
            class: "Car".into(),
            box3: b,
            score: Some(0.75),
        }];
        let text = format_kitti_labels(&entries);
        let parsed = parse_kitti_labels(&text, "mem").unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].class, "Car");
        let pb = &parsed[0].box3;
        assert!((pb.bev.cx - 3.5).abs() < 1e-5);
        assert!((pb.bev.yaw - 2.0).abs() < 1e-5);
        assert_eq!(parsed[0].score, Some(0.75));
    }
}
