//! Synthetic phantom generator properties.

use std::time::Instant;

use proptest::prelude::*;
use ptvseg::dataprep::{window_slice, write_dataset, HU_MAX, HU_MIN};
use ptvseg::phantom::*;

fn dilate_oracle(mask: &[bool], rows: usize, cols: usize, radius: f64, sp: [f64; 2]) -> Vec<bool> {
    let mut out = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = (0..rows).any(|r2| {
                (0..cols).any(|c2| {
                    let dy = (r as f64 - r2 as f64) * sp[0];
                    let dx = (c as f64 - c2 as f64) * sp[1];
                    mask[r2 * cols + c2] && dy * dy + dx * dx <= radius * radius
                })
            });
        }
    }
    out
}

proptest! {
    #[test]
    fn dilation_matches_distance_oracle(
        bits in prop::collection::vec(prop::bool::weighted(0.1), 12 * 10),
        radius in 0.0f64..5.0, sy in 0.5f64..2.0, sx in 0.5f64..2.0,
    ) {
        let d = dilate_mask(&bits, 12, 10, radius, [sy, sx]);
        prop_assert_eq!(&d, &dilate_oracle(&bits, 12, 10, radius, [sy, sx]));
        prop_assert!(bits.iter().zip(&d).all(|(&a, &b)| !a || b));
    }
}

#[test]
fn same_seed_and_index_is_identical() {
    let spec = PhantomSpec {
        n_patients: 3,
        size: 32,
        ..PhantomSpec::default()
    };
    let a = generate_dataset(&spec).unwrap();
    let b = generate_dataset(&spec).unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_dataset(&a, da.path()).unwrap();
    let mb = write_dataset(&b, db.path()).unwrap();
    assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
    let other = generate_patient(
        &PhantomSpec {
            seed: 1,
            ..spec.clone()
        },
        0,
    )
    .unwrap();
    assert_ne!(other.slices, a[0].slices);
}

#[test]
fn larger_margin_strictly_contains_smaller() {
    for index in 0..5 {
        let zero = PhantomSpec {
            bone_margin_mm: 0.0,
            organ_margin_mm: 0.0,
            ..PhantomSpec::default()
        };
        let five = PhantomSpec {
            bone_margin_mm: 5.0,
            organ_margin_mm: 5.0,
            ..PhantomSpec::default()
        };
        let a = generate_patient(&zero, index).unwrap();
        let b = generate_patient(&five, index).unwrap();
        assert_eq!(a.slices, b.slices);
        assert!(a.mask.voxels().iter().zip(b.mask.voxels()).all(|(&x, &y)| !x || y));
        assert!(b.mask.count() > a.mask.count());
    }
}

#[test]
fn foreground_fraction_stays_in_band() {
    let spec = PhantomSpec {
        n_patients: 100,
        ..PhantomSpec::default()
    };
    for p in generate_dataset(&spec).unwrap() {
        let f = p.mask.count() as f64 / p.mask.voxels().len() as f64;
        assert!((0.02..=0.40).contains(&f), "{}: {f}", p.patient_id);
    }
}

#[test]
fn values_are_legal_and_window_saturates_both_ends() {
    let spec = PhantomSpec::default();
    let p = generate_patient(&spec, 4).unwrap();
    for s in &p.slices {
        assert!(s.hu.iter().all(|v| (HU_MIN..=HU_MAX).contains(v)));
        let w = window_slice(s);
        assert!(w.pixels.contains(&0));
        assert!(w.pixels.contains(&255));
    }
    assert_eq!(p.patient_id, "P0004");
    assert_eq!(p.acquisition_date.to_string(), "2011-01-05");
    assert_eq!(p.mask.shape()[1..], [64, 64]);
}

#[test]
fn hundred_patients_of_twenty_slices_is_quick() {
    let spec = PhantomSpec {
        n_patients: 100,
        min_slices: 20,
        max_slices: 20,
        ..PhantomSpec::default()
    };
    let t = Instant::now();
    let data = generate_dataset(&spec).unwrap();
    assert_eq!(data.len(), 100);
    assert!(t.elapsed().as_secs_f64() < 10.0, "took {:?}", t.elapsed());
}
