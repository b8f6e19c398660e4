//! k-fold cross-validation: date-stratified fold assignment, one training run
//! per rotation and per-patient evaluation on the held-out fold.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataprep::{window_slice, PatientRecord};
use crate::metrics::{binarize, evaluate_pair, BinaryVolume, MetricOptions};
use crate::report::{write_metrics_csv, MetricRow, ReportError};
use crate::tensor::Tensor;
use crate::trainer::{fit, write_epoch_csv, Sample, TrainConfig, TrainError, TrainOutcome};
use crate::unet::{build_unet, save_checkpoint, ModelError, UNetConfig, UNetModel};

#[derive(Debug, Error)]
pub enum CvError {
    #[error("need k >= 3 folds (train, validation and test), got {0}")]
    TooFewFolds(usize),
    #[error("{n} patients cannot fill {k} folds")]
    TooFewPatients { n: usize, k: usize },
    #[error("duplicate patient id {0:?}")]
    DuplicateId(String),
    #[error("patient {0:?} is not in the fold plan")]
    UnknownPatient(String),
    #[error("invalid parallelism: {0}")]
    Jobs(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, CvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rotation {
    pub test_fold: usize,
    pub val_fold: usize,
}

impl Rotation {
    pub fn train_folds(&self, k: usize) -> Vec<usize> {
        (0..k).filter(|&f| f != self.test_fold && f != self.val_fold).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub rotations: Vec<Rotation>,
}

impl FoldPlan {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignments.get(patient_id).copied()
    }

    /// Patient ids in fold `f`, ascending.
    pub fn members(&self, f: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &g)| g == f)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Sorts patients by `(acquisition_date, patient_id)` and deals them
/// round-robin into `k` folds. Rotation `r` tests on fold `r` and validates on
/// fold `(r + 1) mod k`.
pub fn assign_folds(patients: &[PatientRecord], k: usize) -> Result<FoldPlan> {
    let keys: Vec<_> = patients
        .iter()
        .map(|p| (p.acquisition_date, p.patient_id.as_str()))
        .collect();
    assign_folds_by_date(&keys, k)
}

pub fn assign_folds_by_date(patients: &[(chrono::NaiveDate, &str)], k: usize) -> Result<FoldPlan> {
    if k < 3 {
        return Err(CvError::TooFewFolds(k));
    }
    if patients.len() < k {
        return Err(CvError::TooFewPatients { n: patients.len(), k });
    }
    let mut order = patients.to_vec();
    order.sort();
    let mut assignments = BTreeMap::new();
    for (rank, (_, id)) in order.iter().enumerate() {
        if assignments.insert(id.to_string(), rank % k).is_some() {
            return Err(CvError::DuplicateId(id.to_string()));
        }
    }
    let rotations = (0..k)
        .map(|r| Rotation {
            test_fold: r,
            val_fold: (r + 1) % k,
        })
        .collect();
    Ok(FoldPlan {
        k,
        assignments,
        rotations,
    })
}

/// Places a (possibly smaller) prediction at the centre of a `rows × cols`
/// canvas, matching how targets are cropped for valid-padded networks.
fn uncrop(mask: &Tensor, rows: usize, cols: usize) -> Vec<bool> {
    let (_, h, w) = mask.dims3().expect("prediction is rank 3");
    let (top, left) = ((rows - h) / 2, (cols - w) / 2);
    let mut out = vec![false; rows * cols];
    for r in 0..h {
        for c in 0..w {
            out[(r + top) * cols + c + left] = mask.data()[r * w + c] != 0.0;
        }
    }
    out
}

/// Slice-wise inference stacked in z order with the patient's spacing.
pub fn predict_patient(model: &UNetModel, patient: &PatientRecord, threshold: f64) -> Result<BinaryVolume> {
    let (rows, cols) = (patient.rows(), patient.cols());
    let slices = patient
        .slices
        .iter()
        .map(|s| {
            let (prob, _) = model.forward(&window_slice(s).to_tensor())?;
            Ok(uncrop(&binarize(&prob, threshold), rows, cols))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BinaryVolume::from_slices(&slices, rows, cols, patient.spacing_mm)?)
}

pub fn evaluate_patient(
    model: &UNetModel,
    patient: &PatientRecord,
    fold: usize,
    threshold: f64,
    opts: MetricOptions,
) -> Result<MetricRow> {
    let pred = predict_patient(model, patient, threshold)?;
    let m = evaluate_pair(&patient.mask, &pred, opts)?;
    let mut warnings = Vec::new();
    if pred.count() == 0 {
        warnings.push("empty_prediction");
    }
    if patient.mask.count() == 0 {
        warnings.push("empty_ground_truth");
    }
    if m.hd95_mm.is_none() {
        warnings.push("undefined_distance");
    }
    Ok(MetricRow {
        patient_id: patient.patient_id.clone(),
        fold,
        dsc: m.dsc,
        hd95_mm: m.hd95_mm,
        hd_mm: m.hd_mm,
        warnings: warnings.join(";"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub threshold: f64,
    /// Rotations trained concurrently.
    pub jobs: usize,
    pub metrics: MetricOptions,
    /// When set, per-rotation artefacts and the merged CSV are written here.
    pub out_dir: Option<PathBuf>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            jobs: 1,
            metrics: MetricOptions::default(),
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RotationResult {
    pub rotation: usize,
    pub test_fold: usize,
    pub val_fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub outcome: TrainOutcome,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug)]
pub struct CvRun {
    /// One entry per rotation, in rotation order; a failure affects only its own slot.
    pub rotations: Vec<std::result::Result<RotationResult, CvError>>,
}

impl CvRun {
    /// Per-patient rows of all successful rotations, in rotation order.
    pub fn rows(&self) -> Vec<MetricRow> {
        self.rotations
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .flat_map(|r| r.rows.iter().cloned())
            .collect()
    }

    pub fn failures(&self) -> Vec<(usize, &CvError)> {
        self.rotations
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e)))
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CvError + '_ {
    move |source| CvError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn samples_of(patients: &[&PatientRecord]) -> Vec<Sample> {
    patients.iter().flat_map(|p| p.samples()).collect()
}

pub fn run_rotation(
    dataset: &[PatientRecord],
    plan: &FoldPlan,
    rotation: usize,
    model_config: UNetConfig,
    train_config: &TrainConfig,
    opts: &CvOptions,
) -> Result<RotationResult> {
    let rot = plan.rotations[rotation];
    let mut by_role: [Vec<&PatientRecord>; 3] = Default::default();
    for p in dataset {
        let f = plan
            .fold_of(&p.patient_id)
            .ok_or_else(|| CvError::UnknownPatient(p.patient_id.clone()))?;
        let role = if f == rot.test_fold {
            2
        } else if f == rot.val_fold {
            1
        } else {
            0
        };
        by_role[role].push(p);
    }
    let [train, val, test] = by_role;
    let config = TrainConfig {
        seed: train_config.seed.wrapping_add(rotation as u64),
        ..*train_config
    };
    log::info!(
        "rotation {rotation}: train {} / val {} / test {} patients",
        train.len(),
        val.len(),
        test.len()
    );
    let model = build_unet(model_config, config.seed)?;
    let outcome = fit(model, &samples_of(&train), &samples_of(&val), &config, |_| {})?;
    let rows = test
        .iter()
        .map(|p| evaluate_patient(&outcome.best_model, p, rot.test_fold, opts.threshold, opts.metrics))
        .collect::<Result<Vec<_>>>()?;

    if let Some(out) = &opts.out_dir {
        let dir = out.join(format!("rotation_{rotation}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let ck = dir.join("checkpoint.bin");
        save_checkpoint(&outcome.best_model, &ck).map_err(io_err(&ck))?;
        let ep = dir.join("epochs.csv");
        write_epoch_csv(&outcome.history, &ep).map_err(io_err(&ep))?;
        write_metrics_csv(&rows, &dir.join("metrics.csv"))?;
    }
    let ids = |v: &[&PatientRecord]| v.iter().map(|p| p.patient_id.clone()).collect();
    Ok(RotationResult {
        rotation,
        test_fold: rot.test_fold,
        val_fold: rot.val_fold,
        train_ids: ids(&train),
        val_ids: ids(&val),
        test_ids: ids(&test),
        outcome,
        rows,
    })
}

/// Runs every rotation of `plan`. Rotation `r` seeds both weight init and
/// shuffling with `train_config.seed + r`, so results do not depend on `jobs`.
pub fn run_cross_validation(
    dataset: &[PatientRecord],
    plan: &FoldPlan,
    model_config: UNetConfig,
    train_config: &TrainConfig,
    opts: &CvOptions,
) -> Result<CvRun> {
    if opts.jobs == 0 {
        return Err(CvError::Jobs("jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| CvError::Jobs(e.to_string()))?;
    let rotations: Vec<_> = pool.install(|| {
        (0..plan.rotations.len())
            .into_par_iter()
            .map(|r| {
                let res = run_rotation(dataset, plan, r, model_config, train_config, opts);
                if let Err(e) = &res {
                    log::error!("rotation {r} failed: {e}");
                }
                res
            })
            .collect()
    });
    let run = CvRun { rotations };
    if let Some(out) = &opts.out_dir {
        write_metrics_csv(&run.rows(), &out.join("metrics.csv"))?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn keys(n: usize) -> Vec<(NaiveDate, String)> {
        let d0 = NaiveDate::from_ymd_opt(2012, 3, 1).unwrap();
        // Dates deliberately out of id order.
        (0..n)
            .map(|i| (d0 + chrono::Days::new(((i * 7) % n) as u64), format!("P{i:04}")))
            .collect()
    }

    fn plan(n: usize, k: usize) -> Result<FoldPlan> {
        let k2 = keys(n);
        let refs: Vec<_> = k2.iter().map(|(d, s)| (*d, s.as_str())).collect();
        assign_folds_by_date(&refs, k)
    }

    #[test]
    fn hundred_patients_five_equal_folds() {
        let p = plan(100, 5).unwrap();
        for f in 0..5 {
            assert_eq!(p.members(f).len(), 20);
        }
    }

    #[test]
    fn five_patients_one_per_fold() {
        let p = plan(5, 5).unwrap();
        for f in 0..5 {
            assert_eq!(p.members(f).len(), 1);
        }
    }

    #[test]
    fn rotations_partition_folds() {
        let p = plan(12, 5).unwrap();
        for rot in &p.rotations {
            let mut all = rot.train_folds(5);
            all.push(rot.val_fold);
            all.push(rot.test_fold);
            all.sort();
            assert_eq!(all, vec![0, 1, 2, 3, 4]);
        }
        let tests: Vec<_> = p.rotations.iter().map(|r| r.test_fold).collect();
        assert_eq!(tests, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn errors() {
        assert!(matches!(plan(4, 5), Err(CvError::TooFewPatients { .. })));
        assert!(matches!(plan(10, 2), Err(CvError::TooFewFolds(2))));
        let d = NaiveDate::from_ymd_opt(2012, 1, 1).unwrap();
        assert!(matches!(
            assign_folds_by_date(&[(d, "a"), (d, "a"), (d, "b")], 3),
            Err(CvError::DuplicateId(_))
        ));
    }
}
