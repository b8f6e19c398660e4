//! Overlap and surface-distance metrics on binary volumes.
//!
//! Distances are Euclidean in millimetres. A voxel's position is its index
//! scaled by the per-axis spacing, ordered `(z, y, x)`.
//!
//! HD95 pools the directed nearest-surface distances of both directions and
//! takes their 95th percentile. The default percentile is nearest-rank, i.e. the
//! top 5% of the pooled distances are dropped and the largest remaining one is
//! reported. Linear interpolation is available through [`Percentile::Linear`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("volume shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("voxel buffer of {len} does not match shape {shape:?}")]
    DataLength { shape: [usize; 3], len: usize },
    #[error("spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("voxel {index} has non-binary value {value}")]
    NonBinary { index: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Binary voxel grid `[D, H, W]` with physical spacing `(z, y, x)` in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVolume {
    shape: [usize; 3],
    voxels: Vec<bool>,
    spacing_mm: [f64; 3],
}

impl BinaryVolume {
    pub fn new(shape: [usize; 3], voxels: Vec<bool>, spacing_mm: [f64; 3]) -> Result<Self> {
        if shape.iter().product::<usize>() != voxels.len() {
            return Err(MetricError::DataLength {
                shape,
                len: voxels.len(),
            });
        }
        if !spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(MetricError::BadSpacing(spacing_mm));
        }
        Ok(Self {
            shape,
            voxels,
            spacing_mm,
        })
    }

    pub fn empty(shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        Self::new(shape, vec![false; shape.iter().product()], spacing_mm)
    }

    /// Builds a volume from a tensor whose values are exactly 0 or 1.
    pub fn from_tensor(t: &Tensor, spacing_mm: [f64; 3]) -> Result<Self> {
        let shape = match *t.shape() {
            [d, h, w] => [d, h, w],
            [h, w] => [1, h, w],
            _ => {
                return Err(MetricError::DataLength {
                    shape: [0, 0, 0],
                    len: t.len(),
                })
            }
        };
        let voxels = t
            .data()
            .iter()
            .enumerate()
            .map(|(index, &value)| match value {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(MetricError::NonBinary { index, value }),
            })
            .collect::<Result<_>>()?;
        Self::new(shape, voxels, spacing_mm)
    }

    /// Stacks 2D slices `[H, W]` in order along z.
    pub fn from_slices(slices: &[Vec<bool>], rows: usize, cols: usize, spacing_mm: [f64; 3]) -> Result<Self> {
        let mut voxels = Vec::with_capacity(slices.len() * rows * cols);
        for s in slices {
            if s.len() != rows * cols {
                return Err(MetricError::DataLength {
                    shape: [1, rows, cols],
                    len: s.len(),
                });
            }
            voxels.extend_from_slice(s);
        }
        Self::new([slices.len(), rows, cols], voxels, spacing_mm)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.voxels[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn slice(&self, z: usize) -> &[bool] {
        let n = self.shape[1] * self.shape[2];
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn with_spacing(&self, spacing_mm: [f64; 3]) -> Result<Self> {
        Self::new(self.shape, self.voxels.clone(), spacing_mm)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.to_vec(),
            self.voxels.iter().map(|&v| f64::from(u8::from(v))).collect(),
        )
        .expect("shape validated at construction")
    }
}

/// `1` where `p >= threshold`, else `0`.
pub fn binarize(probabilities: &Tensor, threshold: f64) -> Tensor {
    probabilities.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// Dice similarity coefficient. Two empty volumes agree perfectly (1.0).
pub fn dsc(x: &BinaryVolume, y: &BinaryVolume) -> Result<f64> {
    if x.shape != y.shape {
        return Err(MetricError::ShapeMismatch(x.shape, y.shape));
    }
    let (mut inter, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.voxels.iter().zip(&y.voxels) {
        inter += usize::from(a && b);
        nx += usize::from(a);
        ny += usize::from(b);
    }
    if nx + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (nx + ny) as f64)
}

/// Neighbourhood used to decide whether a foreground voxel lies on the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMode {
    /// 6-neighbourhood in 3D; voxels on the first/last slice are boundary.
    #[default]
    Volume,
    /// 4-neighbourhood within each slice (per-slice diagnostics).
    InPlane,
}

/// Boundary voxels, with their positions in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub voxels: Vec<[usize; 3]>,
    pub points_mm: Vec<[f64; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.points_mm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_mm.is_empty()
    }
}

pub fn voxel_position_mm(voxel: [usize; 3], spacing_mm: [f64; 3]) -> [f64; 3] {
    [
        voxel[0] as f64 * spacing_mm[0],
        voxel[1] as f64 * spacing_mm[1],
        voxel[2] as f64 * spacing_mm[2],
    ]
}

/// Foreground voxels with at least one background or out-of-bounds 6-neighbour.
pub fn extract_surface(v: &BinaryVolume) -> SurfaceSet {
    extract_surface_with(v, SurfaceMode::Volume)
}

pub fn extract_surface_with(v: &BinaryVolume, mode: SurfaceMode) -> SurfaceSet {
    let [d, h, w] = v.shape;
    let mut voxels = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !v.get(z, y, x) {
                    continue;
                }
                let in_plane = x == 0
                    || x + 1 == w
                    || y == 0
                    || y + 1 == h
                    || !v.get(z, y, x - 1)
                    || !v.get(z, y, x + 1)
                    || !v.get(z, y - 1, x)
                    || !v.get(z, y + 1, x);
                let boundary = in_plane
                    || (mode == SurfaceMode::Volume
                        && (z == 0 || z + 1 == d || !v.get(z - 1, y, x) || !v.get(z + 1, y, x)));
                if boundary {
                    voxels.push([z, y, x]);
                }
            }
        }
    }
    let points_mm = voxels.iter().map(|&vx| voxel_position_mm(vx, v.spacing_mm)).collect();
    SurfaceSet { voxels, points_mm }
}

#[inline]
fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dz = a[0] - b[0];
    let dy = a[1] - b[1];
    let dx = a[2] - b[2];
    dz * dz + dy * dy + dx * dx
}

const LEAF_SIZE: usize = 8;

/// Static 3-d tree over a point set, stored as a permuted array where each
/// subtree is a contiguous slice split at its median.
///
/// Queries return the exact minimum of [`squared_distance`] over the set: a
/// subtree is skipped only when its splitting-plane gap alone is already no
/// smaller than the best distance found, and the squared sum of three
/// non-negative terms can never round below any one of them.
struct KdTree {
    points: Vec<[f64; 3]>,
}

impl KdTree {
    fn new(points: &[[f64; 3]]) -> Self {
        let mut points = points.to_vec();
        Self::build(&mut points, 0);
        Self { points }
    }

    fn build(points: &mut [[f64; 3]], depth: usize) {
        if points.len() <= LEAF_SIZE {
            return;
        }
        let axis = depth % 3;
        let mid = points.len() / 2;
        points.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let (left, right) = points.split_at_mut(mid);
        Self::build(left, depth + 1);
        Self::build(&mut right[1..], depth + 1);
    }

    fn nearest_squared(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        Self::search(&self.points, 0, q, &mut best);
        best
    }

    fn search(points: &[[f64; 3]], depth: usize, q: &[f64; 3], best: &mut f64) {
        if points.len() <= LEAF_SIZE {
            for p in points {
                let d = squared_distance(q, p);
                if d < *best {
                    *best = d;
                }
            }
            return;
        }
        let axis = depth % 3;
        let mid = points.len() / 2;
        let pivot = &points[mid];
        let d = squared_distance(q, pivot);
        if d < *best {
            *best = d;
        }
        let gap = q[axis] - pivot[axis];
        let (near, far) = if gap < 0.0 {
            (&points[..mid], &points[mid + 1..])
        } else {
            (&points[mid + 1..], &points[..mid])
        };
        Self::search(near, depth + 1, q, best);
        if gap * gap < *best {
            Self::search(far, depth + 1, q, best);
        }
    }
}

/// Distance from every point of `from` to its nearest point in `to`.
pub fn directed_distances(from: &SurfaceSet, to: &SurfaceSet) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let tree = KdTree::new(&to.points_mm);
    from.points_mm.iter().map(|p| tree.nearest_squared(p).sqrt()).collect()
}

/// Symmetric Hausdorff distance in mm; `None` when either surface is empty.
pub fn hausdorff(sx: &SurfaceSet, sy: &SurfaceSet) -> Option<f64> {
    if sx.is_empty() || sy.is_empty() {
        return None;
    }
    let max = |v: Vec<f64>| v.into_iter().fold(0.0f64, f64::max);
    Some(max(directed_distances(sx, sy)).max(max(directed_distances(sy, sx))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Percentile {
    /// Smallest value with at least the requested fraction of the data at or below it.
    #[default]
    NearestRank,
    /// Linear interpolation between order statistics at rank `q·(n-1)`.
    Linear,
}

/// `q`-quantile (`q` in `[0, 1]`) of a non-empty sample.
pub fn percentile(values: &[f64], q: f64, method: Percentile) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match method {
        Percentile::NearestRank => {
            // Snap products like 0.95 * 20 that land a rounding error above an integer.
            let x = q * n as f64;
            let nearest = x.round();
            let rank = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
                nearest
            } else {
                x.ceil()
            } as usize;
            v[rank.clamp(1, n) - 1]
        }
        Percentile::Linear => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        }
    }
}

/// 95th percentile of the pooled directed surface distances; `None` when either
/// surface is empty.
pub fn hd95(sx: &SurfaceSet, sy: &SurfaceSet) -> Option<f64> {
    hd95_with(sx, sy, Percentile::NearestRank)
}

pub fn hd95_with(sx: &SurfaceSet, sy: &SurfaceSet, method: Percentile) -> Option<f64> {
    if sx.is_empty() || sy.is_empty() {
        return None;
    }
    let mut pooled = directed_distances(sx, sy);
    pooled.extend(directed_distances(sy, sx));
    Some(percentile(&pooled, 0.95, method))
}

/// All three metrics for one (ground truth, prediction) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub surface: SurfaceMode,
    pub percentile: Percentile,
}

pub fn evaluate_pair(truth: &BinaryVolume, prediction: &BinaryVolume, opts: MetricOptions) -> Result<PairMetrics> {
    let dsc = dsc(truth, prediction)?;
    let sx = extract_surface_with(truth, opts.surface);
    let sy = extract_surface_with(prediction, opts.surface);
    Ok(PairMetrics {
        dsc,
        hd_mm: hausdorff(&sx, &sy),
        hd95_mm: hd95_with(&sx, &sy, opts.percentile),
    })
}

/// Per-slice 2D metrics (in-plane surfaces), for diagnosing where a volume fails.
pub fn per_slice_metrics(truth: &BinaryVolume, prediction: &BinaryVolume) -> Result<Vec<PairMetrics>> {
    if truth.shape != prediction.shape {
        return Err(MetricError::ShapeMismatch(truth.shape, prediction.shape));
    }
    let [d, h, w] = truth.shape;
    let opts = MetricOptions {
        surface: SurfaceMode::InPlane,
        ..MetricOptions::default()
    };
    (0..d)
        .map(|z| {
            let a = BinaryVolume::new([1, h, w], truth.slice(z).to_vec(), truth.spacing_mm)?;
            let b = BinaryVolume::new([1, h, w], prediction.slice(z).to_vec(), prediction.spacing_mm)?;
            evaluate_pair(&a, &b, opts)
        })
        .collect()
}
