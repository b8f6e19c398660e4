//! CT preprocessing and the on-disk dataset format.
//!
//! Slices are windowed to `[-160, 240]` HU and quantised to 8 bits before they
//! reach the network; the network sees `byte / 255`.
//!
//! # Manifest
//!
//! A dataset is one JSON manifest plus raw slice files, with paths relative to
//! the manifest's directory:
//!
//! ```json
//! {
//!   "patients": [{
//!     "id": "P0001",
//!     "acquisition_date": "2011-01-01",
//!     "spacing_mm": [5.0, 1.2, 1.2],
//!     "rows": 64, "cols": 64,
//!     "slices": [
//!       {"image": "P0001/slice_000.hu16", "mask": "P0001/slice_000.mask", "z_mm": 0.0}
//!     ]
//!   }]
//! }
//! ```
//!
//! Image files hold `rows × cols` little-endian `i16` HU values, row-major.
//! Mask files hold `rows × cols` bytes, each 0 or 1. Instead of `mask`, a slice
//! may carry `contours`: a list of closed polygons in mm, each a list of `[x, y]`
//! vertices, rasterised against the patient's optional `origin_mm` (`[x, y]` of
//! the centre of pixel (0, 0), default `[0, 0]`) and in-plane spacing. This is
//! the boundary for converters from DICOM-RT structure sets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{BinaryVolume, MetricError};
use crate::tensor::Tensor;
use crate::trainer::Sample;

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;
pub const WINDOW_LOW: i32 = -160;
pub const WINDOW_HIGH: i32 = 240;

/// Slice counts outside this range are legal but logged.
pub const EXPECTED_SLICE_RANGE: std::ops::RangeInclusive<usize> = 164..=534;

/// Clamp to the soft-tissue window and map linearly onto `0..=255`, rounding
/// half up.
pub fn window_hu(hu: i32) -> u8 {
    let width = WINDOW_HIGH - WINDOW_LOW;
    let offset = hu.clamp(WINDOW_LOW, WINDOW_HIGH) - WINDOW_LOW;
    // round(offset * 255 / width) with ties up, in exact integer arithmetic
    ((offset * 255 * 2 + width) / (2 * width)) as u8
}

fn window_lut() -> &'static [u8] {
    static LUT: OnceLock<Vec<u8>> = OnceLock::new();
    LUT.get_or_init(|| (i32::from(HU_MIN)..=i32::from(HU_MAX)).map(window_hu).collect())
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: expected {expected} bytes, found {found}")]
    ShapeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {reason}")]
    InvalidValue { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile { path: path.into() }
        } else {
            DatasetError::Io {
                path: path.into(),
                source,
            }
        }
    }
}

/// One axial CT slice in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct HuSlice {
    pub rows: usize,
    pub cols: usize,
    pub hu: Vec<i16>,
    /// `(y, x)` pixel spacing.
    pub pixel_spacing_mm: [f64; 2],
    pub z_mm: f64,
}

impl HuSlice {
    pub fn check_range(&self) -> std::result::Result<(), (usize, i16)> {
        match self.hu.iter().position(|v| !(HU_MIN..=HU_MAX).contains(v)) {
            Some(i) => Err((i, self.hu[i])),
            None => Ok(()),
        }
    }
}

/// An 8-bit windowed slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl WindowedImage {
    /// `[1, rows, cols]` network input with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.rows, self.cols],
            self.pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
        .expect("pixel count matches rows × cols")
    }
}

pub fn window_slice(s: &HuSlice) -> WindowedImage {
    let lut = window_lut();
    let pixels =
        s.hu.iter()
            .map(|&v| {
                let clamped = v.clamp(HU_MIN, HU_MAX);
                lut[(i32::from(clamped) - i32::from(HU_MIN)) as usize]
            })
            .collect();
    WindowedImage {
        rows: s.rows,
        cols: s.cols,
        pixels,
    }
}

/// Closed polygon on one slice; vertices are `[x, y]` in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContourPolygon {
    pub vertices: Vec<[f64; 2]>,
}

impl ContourPolygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        acc / 2.0
    }

    pub fn is_degenerate(&self) -> bool {
        self.vertices.len() < 3 || self.signed_area() == 0.0 || !self.vertices.iter().flatten().all(|v| v.is_finite())
    }
}

/// Pixel grid of a slice: pixel `(r, c)` has its centre at
/// `(origin_x + c·spacing_x, origin_y + r·spacing_y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceGeometry {
    pub origin_mm: [f64; 2],
    /// `(y, x)` spacing.
    pub spacing_mm: [f64; 2],
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rasterized {
    pub mask: Vec<bool>,
    /// Polygons skipped for having fewer than three vertices or zero area.
    pub degenerate: usize,
}

/// Even-odd scanline fill of one or more polygons.
///
/// A pixel is inside when a ray from its centre towards `+x` crosses the
/// polygon edges an odd number of times; edges are half-open in `y`, so a
/// centre lying exactly on a horizontal line through a vertex is counted once.
/// Crossings from all polygons are pooled, which XORs them and lets a polygon
/// nested inside another cut a hole.
pub fn rasterize_contours(polygons: &[ContourPolygon], geom: &SliceGeometry) -> Rasterized {
    let mut mask = vec![false; geom.rows * geom.cols];
    let mut degenerate = 0;
    let usable: Vec<&ContourPolygon> = polygons
        .iter()
        .filter(|p| {
            let bad = p.is_degenerate();
            if bad {
                log::warn!("skipping degenerate contour with {} vertices", p.vertices.len());
                degenerate += 1;
            }
            !bad
        })
        .collect();
    let mut crossings = Vec::new();
    for r in 0..geom.rows {
        let py = geom.origin_mm[1] + r as f64 * geom.spacing_mm[0];
        crossings.clear();
        for poly in &usable {
            let n = poly.vertices.len();
            for i in 0..n {
                let [xi, yi] = poly.vertices[i];
                let [xj, yj] = poly.vertices[(i + n - 1) % n];
                if (yi > py) != (yj > py) {
                    crossings.push((xj - xi) * (py - yi) / (yj - yi) + xi);
                }
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        // Inside iff an odd number of crossings lie strictly right of the centre,
        // i.e. the centre falls in [x_2k, x_2k+1).
        let row = &mut mask[r * geom.cols..(r + 1) * geom.cols];
        for pair in crossings.chunks_exact(2) {
            let (x0, x1) = (pair[0], pair[1]);
            let first = ((x0 - geom.origin_mm[0]) / geom.spacing_mm[1]).ceil().max(0.0) as usize;
            let mut c = first.saturating_sub(1);
            while c < geom.cols {
                let px = geom.origin_mm[0] + c as f64 * geom.spacing_mm[1];
                if px >= x1 {
                    break;
                }
                if px >= x0 {
                    row[c] = !row[c];
                }
                c += 1;
            }
        }
    }
    Rasterized { mask, degenerate }
}

/// One patient: an ordered slice stack and its ground-truth target mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub acquisition_date: NaiveDate,
    /// `(z, y, x)` voxel spacing.
    pub spacing_mm: [f64; 3],
    pub slices: Vec<HuSlice>,
    pub mask: BinaryVolume,
}

impl PatientRecord {
    pub fn rows(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.mask.shape()[2]
    }

    /// Network-ready `(image, mask)` pairs, one per slice.
    pub fn samples(&self) -> Vec<Sample> {
        let (rows, cols) = (self.rows(), self.cols());
        self.slices
            .iter()
            .enumerate()
            .map(|(z, s)| Sample {
                image: window_slice(s).to_tensor(),
                mask: Tensor::new(
                    vec![1, rows, cols],
                    self.mask.slice(z).iter().map(|&b| f64::from(u8::from(b))).collect(),
                )
                .expect("mask slice matches image"),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub patients: Vec<ManifestPatient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPatient {
    pub id: String,
    pub acquisition_date: NaiveDate,
    pub spacing_mm: [f64; 3],
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_mm: Option<[f64; 2]>,
    pub slices: Vec<ManifestSlice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSlice {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contours: Option<Vec<ContourPolygon>>,
    pub z_mm: f64,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_hu_file(path: &Path, rows: usize, cols: usize) -> Result<Vec<i16>> {
    let bytes = read_file(path)?;
    let expected = rows * cols * 2;
    if bytes.len() != expected {
        return Err(DatasetError::ShapeMismatch {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect())
}

pub fn read_mask_file(path: &Path, rows: usize, cols: usize) -> Result<Vec<bool>> {
    let bytes = read_file(path)?;
    if bytes.len() != rows * cols {
        return Err(DatasetError::ShapeMismatch {
            path: path.into(),
            expected: rows * cols,
            found: bytes.len(),
        });
    }
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(DatasetError::InvalidValue {
                path: path.into(),
                reason: format!("mask byte {i} is {other}, expected 0 or 1"),
            }),
        })
        .collect()
}

fn malformed(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        path: path.into(),
        reason: reason.into(),
    }
}

fn metric_err(path: &Path) -> impl FnOnce(MetricError) -> DatasetError + '_ {
    move |e| DatasetError::InvalidValue {
        path: path.into(),
        reason: e.to_string(),
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))
}

/// Loads and validates every patient in a manifest, sorted by patient id.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<PatientRecord>> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        if !seen.insert(p.id.clone()) {
            return Err(malformed(manifest_path, format!("duplicate patient id {:?}", p.id)));
        }
        records.push(load_patient(manifest_path, root, p)?);
    }
    records.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let unusual = records
        .iter()
        .filter(|r| !EXPECTED_SLICE_RANGE.contains(&r.slices.len()))
        .count();
    if unusual > 0 {
        log::warn!(
            "{unusual} of {} patients have a slice count outside {}..={}",
            records.len(),
            EXPECTED_SLICE_RANGE.start(),
            EXPECTED_SLICE_RANGE.end()
        );
    }
    Ok(records)
}

fn load_patient(manifest_path: &Path, root: &Path, p: &ManifestPatient) -> Result<PatientRecord> {
    if p.id.is_empty() {
        return Err(malformed(manifest_path, "empty patient id"));
    }
    if p.rows == 0 || p.cols == 0 {
        return Err(malformed(manifest_path, format!("patient {}: zero image extent", p.id)));
    }
    if p.slices.is_empty() {
        return Err(malformed(manifest_path, format!("patient {}: no slices", p.id)));
    }
    let geom = SliceGeometry {
        origin_mm: p.origin_mm.unwrap_or([0.0, 0.0]),
        spacing_mm: [p.spacing_mm[1], p.spacing_mm[2]],
        rows: p.rows,
        cols: p.cols,
    };
    let mut slices = Vec::with_capacity(p.slices.len());
    let mut masks = Vec::with_capacity(p.slices.len());
    for s in &p.slices {
        let image_path = root.join(&s.image);
        let hu = read_hu_file(&image_path, p.rows, p.cols)?;
        let slice = HuSlice {
            rows: p.rows,
            cols: p.cols,
            hu,
            pixel_spacing_mm: geom.spacing_mm,
            z_mm: s.z_mm,
        };
        if let Err((i, v)) = slice.check_range() {
            return Err(DatasetError::InvalidValue {
                path: image_path,
                reason: format!("pixel {i} has HU {v}, outside [{HU_MIN}, {HU_MAX}]"),
            });
        }
        let mask = match (&s.mask, &s.contours) {
            (Some(m), None) => read_mask_file(&root.join(m), p.rows, p.cols)?,
            (None, Some(polys)) => rasterize_contours(polys, &geom).mask,
            _ => {
                return Err(malformed(
                    manifest_path,
                    format!(
                        "patient {}: slice {} needs exactly one of mask or contours",
                        p.id, s.image
                    ),
                ))
            }
        };
        slices.push(slice);
        masks.push(mask);
    }
    let mask = BinaryVolume::from_slices(&masks, p.rows, p.cols, p.spacing_mm).map_err(metric_err(manifest_path))?;
    Ok(PatientRecord {
        patient_id: p.id.clone(),
        acquisition_date: p.acquisition_date,
        spacing_mm: p.spacing_mm,
        slices,
        mask,
    })
}

pub fn slice_file_names(patient_id: &str, index: usize) -> (String, String) {
    (
        format!("{patient_id}/slice_{index:03}.hu16"),
        format!("{patient_id}/slice_{index:03}.mask"),
    )
}

/// Writes `records` as raw slice files plus `manifest.json` under `dir`, and
/// returns the manifest path. Output bytes depend only on the records.
pub fn write_dataset(records: &[PatientRecord], dir: &Path) -> Result<PathBuf> {
    let mut patients = Vec::with_capacity(records.len());
    for rec in records {
        let (rows, cols) = (rec.rows(), rec.cols());
        let mut slices = Vec::with_capacity(rec.slices.len());
        for (z, s) in rec.slices.iter().enumerate() {
            let (image, mask) = slice_file_names(&rec.patient_id, z);
            let bytes: Vec<u8> = s.hu.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_file(&dir.join(&image), &bytes)?;
            let mbytes: Vec<u8> = rec.mask.slice(z).iter().map(|&b| u8::from(b)).collect();
            write_file(&dir.join(&mask), &mbytes)?;
            slices.push(ManifestSlice {
                image,
                mask: Some(mask),
                contours: None,
                z_mm: s.z_mm,
            });
        }
        patients.push(ManifestPatient {
            id: rec.patient_id.clone(),
            acquisition_date: rec.acquisition_date,
            spacing_mm: rec.spacing_mm,
            rows,
            cols,
            origin_mm: None,
            slices,
        });
    }
    let manifest_path = dir.join("manifest.json");
    write_manifest(&Manifest { patients }, &manifest_path)?;
    Ok(manifest_path)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| malformed(path, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Model-ready export: 8-bit windowed images (`*.u8`, one byte per pixel) and
/// masks, described by `prepared.json` with the same schema as the input
/// manifest except that `image` points at the windowed file.
pub fn write_prepared(records: &[PatientRecord], dir: &Path) -> Result<PathBuf> {
    let mut patients = Vec::with_capacity(records.len());
    for rec in records {
        let mut slices = Vec::with_capacity(rec.slices.len());
        for (z, s) in rec.slices.iter().enumerate() {
            let image = format!("{}/slice_{z:03}.u8", rec.patient_id);
            let (_, mask) = slice_file_names(&rec.patient_id, z);
            write_file(&dir.join(&image), &window_slice(s).pixels)?;
            let mbytes: Vec<u8> = rec.mask.slice(z).iter().map(|&b| u8::from(b)).collect();
            write_file(&dir.join(&mask), &mbytes)?;
            slices.push(ManifestSlice {
                image,
                mask: Some(mask),
                contours: None,
                z_mm: s.z_mm,
            });
        }
        patients.push(ManifestPatient {
            id: rec.patient_id.clone(),
            acquisition_date: rec.acquisition_date,
            spacing_mm: rec.spacing_mm,
            rows: rec.rows(),
            cols: rec.cols(),
            origin_mm: None,
            slices,
        });
    }
    let path = dir.join("prepared.json");
    write_manifest(&Manifest { patients }, &path)?;
    Ok(path)
}
