//! Deterministic synthetic CT phantoms with known target masks.
//!
//! Each patient is a stack of axial slices showing an elliptical body at
//! soft-tissue density, a few dense "bone" ellipses and one "organ" blob. The
//! target is the union of the bones expanded by `bone_margin_mm` and the organ
//! expanded by `organ_margin_mm`, mirroring how a planning target is grown from
//! the clinical target by an isotropic margin. Everything is a pure function of
//! `(seed, patient index)`.
//!
//! Thin, branching structures (lymph-node chains) are not modelled.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataprep::{HuSlice, PatientRecord, HU_MAX, HU_MIN};
use crate::metrics::BinaryVolume;

pub const AIR_HU: f64 = -1000.0;
pub const SOFT_TISSUE_HU: f64 = 40.0;
pub const ORGAN_HU: f64 = 120.0;
pub const BONE_HU: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_patients: usize,
    pub min_slices: usize,
    pub max_slices: usize,
    /// Square slice extent in pixels.
    pub size: usize,
    /// `(z, y, x)` voxel spacing.
    pub spacing_mm: [f64; 3],
    pub bone_margin_mm: f64,
    pub organ_margin_mm: f64,
    /// Standard deviation of additive HU noise.
    pub noise_hu: f64,
    /// Acquisition date of patient 0; patient `i` is `i` days later.
    pub first_date: NaiveDate,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_patients: 20,
            min_slices: 4,
            max_slices: 6,
            size: 64,
            spacing_mm: [5.0, 1.2, 1.2],
            bone_margin_mm: 2.0,
            organ_margin_mm: 5.0,
            noise_hu: 10.0,
            first_date: NaiveDate::from_ymd_opt(2011, 1, 1).expect("valid date"),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return bad(format!("size {} must be a positive multiple of 16", self.size));
        }
        if self.min_slices == 0 || self.min_slices > self.max_slices {
            return bad(format!(
                "slice range {}..={} is empty",
                self.min_slices, self.max_slices
            ));
        }
        if !self.spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if !(self.bone_margin_mm >= 0.0 && self.organ_margin_mm >= 0.0) {
            return bad("margins must be non-negative".into());
        }
        if !(self.noise_hu >= 0.0 && self.noise_hu.is_finite()) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }
}

/// Axis-aligned-then-rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    fn scaled(&self, k: f64, shift_y: f64, shift_x: f64) -> Self {
        Self {
            cy: self.cy + shift_y,
            cx: self.cx + shift_x,
            ry: self.ry * k,
            rx: self.rx * k,
            angle: self.angle,
        }
    }

    fn rasterize(&self, rows: usize, cols: usize) -> Vec<bool> {
        let mut m = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                m[r * cols + c] = self.contains(r as f64, c as f64);
            }
        }
        m
    }
}

fn patient_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:04}")
}

/// Binary dilation of one `rows × cols` slice by a Euclidean disc of physical
/// radius `radius_mm`: an offset is in the disc iff its centre lies within the
/// radius under the `(y, x)` spacing.
pub fn dilate_mask(mask: &[bool], rows: usize, cols: usize, radius_mm: f64, spacing_mm: [f64; 2]) -> Vec<bool> {
    assert_eq!(mask.len(), rows * cols);
    let ry = (radius_mm / spacing_mm[0]).floor() as isize;
    let rx = (radius_mm / spacing_mm[1]).floor() as isize;
    let r2 = radius_mm * radius_mm;
    let mut offsets = Vec::new();
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            let d2 = (dy as f64 * spacing_mm[0]).powi(2) + (dx as f64 * spacing_mm[1]).powi(2);
            if d2 <= r2 {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for r in 0..rows {
        for c in 0..cols {
            if !mask[r * cols + c] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (y, x) = (r as isize + dy, c as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols {
                    out[y as usize * cols + x as usize] = true;
                }
            }
        }
    }
    out
}

/// Generates patient `index`; identical inputs give identical records.
pub fn generate_patient(spec: &PhantomSpec, index: usize) -> Result<PatientRecord, PhantomError> {
    spec.validate()?;
    let mut rng = Pcg64::seed_from_u64(patient_seed(spec.seed, index));
    let n = spec.size as f64;
    let (rows, cols) = (spec.size, spec.size);

    let body = Ellipse {
        cy: n / 2.0 + rng.random_range(-0.03..0.03) * n,
        cx: n / 2.0 + rng.random_range(-0.03..0.03) * n,
        ry: rng.random_range(0.30..0.36) * n,
        rx: rng.random_range(0.38..0.44) * n,
        angle: rng.random_range(-0.15..0.15),
    };
    let inside_body = |rng: &mut Pcg64, reach: f64| {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let r = reach * rng.random_range(0.0f64..1.0).sqrt();
        (body.cy + r * body.ry * t.sin(), body.cx + r * body.rx * t.cos())
    };
    let n_bones = rng.random_range(2..=5);
    let bones: Vec<Ellipse> = (0..n_bones)
        .map(|_| {
            let (cy, cx) = inside_body(&mut rng, 0.7);
            Ellipse {
                cy,
                cx,
                ry: rng.random_range(0.05..0.09) * n,
                rx: rng.random_range(0.05..0.09) * n,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();
    let (oy, ox) = inside_body(&mut rng, 0.5);
    let organ = Ellipse {
        cy: oy,
        cx: ox,
        ry: rng.random_range(0.10..0.15) * n,
        rx: rng.random_range(0.12..0.18) * n,
        angle: rng.random_range(0.0..std::f64::consts::PI),
    };
    let n_slices = rng.random_range(spec.min_slices..=spec.max_slices);
    let drift_y = rng.random_range(-0.02..0.02) * n;
    let drift_x = rng.random_range(-0.02..0.02) * n;
    let noise = Normal::new(0.0, spec.noise_hu.max(f64::MIN_POSITIVE)).expect("finite std");

    let in_plane = [spec.spacing_mm[1], spec.spacing_mm[2]];
    let mut slices = Vec::with_capacity(n_slices);
    let mut masks = Vec::with_capacity(n_slices);
    for k in 0..n_slices {
        let t = if n_slices > 1 {
            k as f64 / (n_slices - 1) as f64
        } else {
            0.5
        };
        // Shapes swell towards the middle of the stack and drift slowly.
        let swell = 0.85 + 0.3 * (std::f64::consts::PI * t).sin();
        let (sy, sx) = (drift_y * t, drift_x * t);
        let body_k = body.scaled(0.95 + 0.05 * swell, 0.0, 0.0);
        let bones_k: Vec<Ellipse> = bones.iter().map(|b| b.scaled(swell, sy, sx)).collect();
        let organ_k = organ.scaled(swell, sy, sx);

        let body_m = body_k.rasterize(rows, cols);
        let organ_m: Vec<bool> = organ_k
            .rasterize(rows, cols)
            .iter()
            .zip(&body_m)
            .map(|(&a, &b)| a && b)
            .collect();
        let mut bone_m = vec![false; rows * cols];
        for b in &bones_k {
            for (dst, (&v, &inb)) in bone_m.iter_mut().zip(b.rasterize(rows, cols).iter().zip(&body_m)) {
                *dst |= v && inb;
            }
        }

        let mut hu = Vec::with_capacity(rows * cols);
        for i in 0..rows * cols {
            let base = if bone_m[i] {
                BONE_HU
            } else if organ_m[i] {
                ORGAN_HU
            } else if body_m[i] {
                SOFT_TISSUE_HU
            } else {
                AIR_HU
            };
            let v = if spec.noise_hu > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            };
            hu.push(v.round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16);
        }

        let bone_ptv = dilate_mask(&bone_m, rows, cols, spec.bone_margin_mm, in_plane);
        let organ_ptv = dilate_mask(&organ_m, rows, cols, spec.organ_margin_mm, in_plane);
        masks.push(
            bone_ptv
                .iter()
                .zip(&organ_ptv)
                .map(|(&a, &b)| a || b)
                .collect::<Vec<bool>>(),
        );
        slices.push(HuSlice {
            rows,
            cols,
            hu,
            pixel_spacing_mm: in_plane,
            z_mm: k as f64 * spec.spacing_mm[0],
        });
    }

    let mask = BinaryVolume::from_slices(&masks, rows, cols, spec.spacing_mm)
        .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
    let acquisition_date = spec
        .first_date
        .checked_add_days(Days::new(index as u64))
        .ok_or_else(|| PhantomError::InvalidSpec("acquisition date overflow".into()))?;
    Ok(PatientRecord {
        patient_id: patient_id(index),
        acquisition_date,
        spacing_mm: spec.spacing_mm,
        slices,
        mask,
    })
}

pub fn generate_dataset(spec: &PhantomSpec) -> Result<Vec<PatientRecord>, PhantomError> {
    (0..spec.n_patients).map(|i| generate_patient(spec, i)).collect()
}
