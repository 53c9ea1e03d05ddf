//! Patient/exam data model, exam labeling, patient-level splitting and
//! construction of time-to-event records.
//!
//! Labeling follows the patient-group diagram:
//!
//! * patients whose earliest exam shows AF form the baseline-AF group and only
//!   contribute their AF exams;
//! * patients whose earliest exam is normal but a later one shows AF form the
//!   future-AF group: normal exams at least `threshold` days before the first
//!   AF exam are `FutureAF`, the rest of their normal exams are excluded;
//! * patients with several exams and no AF form the no-AF group: the last exam
//!   and anything closer than `threshold` days to it are excluded, the rest are
//!   `NoAF`.

pub mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use manifest::{read_labeled, read_manifest, write_labeled, write_manifest};

/// Default spacing, in days, for an exam to count as follow-up.
pub const FOLLOW_UP_THRESHOLD_DAYS: i64 = 7;

/// Default number of binary covariates per exam.
pub const DEFAULT_COVARIATES: usize = 16;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error(
        "patient {patient_id}: exam times are not strictly increasing (day {prev} then day {next})"
    )]
    UnorderedExams {
        patient_id: String,
        prev: i64,
        next: i64,
    },
    #[error("patient history {0} has no exams")]
    EmptyHistory(String),
    #[error("exam {exam_id}: expected {expected} covariates, found {found}")]
    CovariateLength {
        exam_id: String,
        expected: usize,
        found: usize,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("no FutureAF probability for exam {0}")]
    MissingProbability(String),
    #[error("exam {exam_id}: {reason}")]
    InvalidRecord { exam_id: String, reason: String },
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CohortError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn is_male(self) -> bool {
        self == Sex::Male
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "M",
            Sex::Female => "F",
        })
    }
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "M" | "m" | "male" => Ok(Sex::Male),
            "F" | "f" | "female" => Ok(Sex::Female),
            other => Err(format!("unknown sex `{other}`")),
        }
    }
}

/// One 12-lead ECG exam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamRecord {
    pub exam_id: String,
    pub patient_id: String,
    /// Integer day from an arbitrary epoch.
    pub exam_day: i64,
    pub af_flag: bool,
    pub age: f64,
    pub sex: Sex,
    pub covariates: Vec<bool>,
    /// Locator of the stored waveform, relative to the waveform directory.
    pub signal_path: String,
}

/// Exam class predicted by the network. The discriminant is the output index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExamClass {
    NoAF = 0,
    WithAF = 1,
    FutureAF = 2,
}

impl ExamClass {
    pub const ALL: [ExamClass; 3] = [ExamClass::NoAF, ExamClass::WithAF, ExamClass::FutureAF];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ExamClass::NoAF => "NoAF",
            ExamClass::WithAF => "WithAF",
            ExamClass::FutureAF => "FutureAF",
        }
    }
}

impl fmt::Display for ExamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExamClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "NoAF" => Ok(ExamClass::NoAF),
            "WithAF" => Ok(ExamClass::WithAF),
            "FutureAF" => Ok(ExamClass::FutureAF),
            other => Err(format!("unknown class `{other}`")),
        }
    }
}

/// Dataset partition. `Unassigned` marks labeled exams before splitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Unassigned,
    Train,
    Validation,
    Test,
    Excluded,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Unassigned => "Unassigned",
            Split::Train => "Train",
            Split::Validation => "Validation",
            Split::Test => "Test",
            Split::Excluded => "Excluded",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "Unassigned" => Ok(Split::Unassigned),
            "Train" => Ok(Split::Train),
            "Validation" => Ok(Split::Validation),
            "Test" => Ok(Split::Test),
            "Excluded" => Ok(Split::Excluded),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// An exam with its class. Excluded exams carry `label: None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExam {
    pub exam: ExamRecord,
    pub label: Option<ExamClass>,
    pub split: Split,
}

impl LabeledExam {
    fn excluded(exam: ExamRecord) -> Self {
        Self {
            exam,
            label: None,
            split: Split::Excluded,
        }
    }

    fn labeled(exam: ExamRecord, label: ExamClass) -> Self {
        Self {
            exam,
            label: Some(label),
            split: Split::Unassigned,
        }
    }

    pub fn is_excluded(&self) -> bool {
        self.split == Split::Excluded
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatientGroup {
    NoAFGroup,
    BaselineAF,
    FutureAFGroup,
}

/// All exams of one patient in strictly increasing time order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientHistory {
    patient_id: String,
    exams: Vec<ExamRecord>,
    group: PatientGroup,
}

impl PatientHistory {
    /// Validates ordering; exams must already be sorted by day.
    pub fn new(patient_id: impl Into<String>, exams: Vec<ExamRecord>) -> Result<Self> {
        let patient_id = patient_id.into();
        if exams.is_empty() {
            return Err(CohortError::EmptyHistory(patient_id));
        }
        for w in exams.windows(2) {
            if w[1].exam_day <= w[0].exam_day {
                return Err(CohortError::UnorderedExams {
                    patient_id,
                    prev: w[0].exam_day,
                    next: w[1].exam_day,
                });
            }
        }
        let group = if exams[0].af_flag {
            PatientGroup::BaselineAF
        } else if exams.iter().any(|e| e.af_flag) {
            PatientGroup::FutureAFGroup
        } else {
            PatientGroup::NoAFGroup
        };
        Ok(Self {
            patient_id,
            exams,
            group,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn exams(&self) -> &[ExamRecord] {
        &self.exams
    }

    pub fn group(&self) -> PatientGroup {
        self.group
    }

    pub fn first_af_day(&self) -> Option<i64> {
        self.exams.iter().find(|e| e.af_flag).map(|e| e.exam_day)
    }

    pub fn last_day(&self) -> i64 {
        self.exams.last().map(|e| e.exam_day).unwrap_or_default()
    }
}

/// Groups flat exam records by patient, sorting each patient's exams by day.
/// Two exams of a patient on the same day are rejected.
pub fn group_by_patient(records: Vec<ExamRecord>) -> Result<Vec<PatientHistory>> {
    let mut by_patient: BTreeMap<String, Vec<ExamRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(r.patient_id.clone()).or_default().push(r);
    }
    by_patient
        .into_iter()
        .map(|(pid, mut exams)| {
            exams.sort_by_key(|e| e.exam_day);
            PatientHistory::new(pid, exams)
        })
        .collect()
}

/// Checks that every exam carries `expected` covariates.
pub fn validate_covariates<'a>(
    exams: impl IntoIterator<Item = &'a ExamRecord>,
    expected: usize,
) -> Result<()> {
    for e in exams {
        if e.covariates.len() != expected {
            return Err(CohortError::CovariateLength {
                exam_id: e.exam_id.clone(),
                expected,
                found: e.covariates.len(),
            });
        }
    }
    Ok(())
}

/// Assigns a class (or exclusion) to every exam. Output order follows the
/// input histories, exams in time order.
pub fn classify_exams(
    histories: &[PatientHistory],
    follow_up_threshold_days: i64,
) -> Result<Vec<LabeledExam>> {
    let mut out = Vec::with_capacity(histories.iter().map(|h| h.exams.len()).sum());
    for h in histories {
        // Re-validate: histories may have been built by hand.
        let h = PatientHistory::new(h.patient_id.clone(), h.exams.clone())?;
        match h.group {
            PatientGroup::BaselineAF => {
                for e in h.exams {
                    out.push(if e.af_flag {
                        LabeledExam::labeled(e, ExamClass::WithAF)
                    } else {
                        LabeledExam::excluded(e)
                    });
                }
            }
            PatientGroup::FutureAFGroup => {
                let first_af = h.first_af_day().expect("future-AF group has an AF exam");
                for e in h.exams {
                    let labeled = if e.af_flag {
                        LabeledExam::labeled(e, ExamClass::WithAF)
                    } else if e.exam_day < first_af
                        && first_af - e.exam_day >= follow_up_threshold_days
                    {
                        LabeledExam::labeled(e, ExamClass::FutureAF)
                    } else {
                        LabeledExam::excluded(e)
                    };
                    out.push(labeled);
                }
            }
            PatientGroup::NoAFGroup => {
                let last = h.last_day();
                let n = h.exams.len();
                for (i, e) in h.exams.into_iter().enumerate() {
                    let keep = n >= 2 && i + 1 < n && last - e.exam_day >= follow_up_threshold_days;
                    out.push(if keep {
                        LabeledExam::labeled(e, ExamClass::NoAF)
                    } else {
                        LabeledExam::excluded(e)
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            validation: 0.1,
            test: 0.3,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(CohortError::InvalidFractions(format!(
                "fractions must be non-negative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CohortError::InvalidFractions(format!(
                "fractions sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` patients.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let quotas = [
            self.train * n as f64,
            self.validation * n as f64,
            self.test * n as f64,
        ];
        let mut counts = quotas.map(|q| q.floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        // stable: ties resolved in train, validation, test order
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

/// Seeded 64-bit key of a string; stable across platforms and releases.
pub fn seeded_key(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Assigns every non-excluded exam a split such that all exams of a patient
/// share it. Patients are ranked by a seeded hash of their id, so the result
/// does not depend on input order.
pub fn split_by_patient(
    labeled: &[LabeledExam],
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<LabeledExam>> {
    if labeled.is_empty() {
        return Err(CohortError::EmptyInput);
    }
    fractions.validate()?;

    let mut patients: Vec<&str> = labeled
        .iter()
        .filter(|l| !l.is_excluded())
        .map(|l| l.exam.patient_id.as_str())
        .collect();
    patients.sort_unstable();
    patients.dedup();
    let mut keyed: Vec<(u64, &str)> = patients.iter().map(|p| (seeded_key(seed, p), *p)).collect();
    keyed.sort_unstable();

    let [n_train, n_val, _] = fractions.apportion(keyed.len());
    let assignment: HashMap<&str, Split> = keyed
        .iter()
        .enumerate()
        .map(|(rank, (_, pid))| {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            (*pid, split)
        })
        .collect();

    Ok(labeled
        .iter()
        .map(|l| {
            let mut l = l.clone();
            if !l.is_excluded() {
                l.split = assignment[l.exam.patient_id.as_str()];
            }
            l
        })
        .collect())
}

/// Time-to-event unit built from one NoAF or FutureAF exam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord<T = f64> {
    pub exam_id: String,
    pub patient_id: String,
    pub duration_weeks: T,
    /// `true` when AF was observed at the end of the duration.
    pub event: bool,
    /// Classifier FutureAF probability (two-class renormalized).
    pub risk_prob: T,
    pub age: T,
    pub sex_male: bool,
    pub covariates: Vec<bool>,
}

impl SurvivalRecord<f64> {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| CohortError::InvalidRecord {
            exam_id: self.exam_id.clone(),
            reason: reason.to_string(),
        };
        if !(self.duration_weeks >= 0.0) {
            return Err(bad("negative duration"));
        }
        if self.event && self.duration_weeks <= 0.0 {
            return Err(bad("event at zero duration"));
        }
        if !(0.0..=1.0).contains(&self.risk_prob) {
            return Err(bad("risk probability outside [0, 1]"));
        }
        Ok(())
    }
}

/// Builds survival records for the NoAF and FutureAF exams of `labeled`
/// (optionally restricted to one split). FutureAF exams end in an event at the
/// patient's first AF exam; NoAF exams are censored at the patient's last
/// recorded exam, including an excluded one.
pub fn build_survival_records(
    labeled: &[LabeledExam],
    probs: &HashMap<String, f64>,
    split: Option<Split>,
) -> Result<Vec<SurvivalRecord>> {
    let mut first_af: HashMap<&str, i64> = HashMap::new();
    let mut last_day: HashMap<&str, i64> = HashMap::new();
    for l in labeled {
        let pid = l.exam.patient_id.as_str();
        let d = l.exam.exam_day;
        last_day
            .entry(pid)
            .and_modify(|x| *x = (*x).max(d))
            .or_insert(d);
        if l.exam.af_flag {
            first_af
                .entry(pid)
                .and_modify(|x| *x = (*x).min(d))
                .or_insert(d);
        }
    }

    let mut out = Vec::new();
    for l in labeled {
        let label = match l.label {
            Some(c @ (ExamClass::NoAF | ExamClass::FutureAF)) => c,
            _ => continue,
        };
        if split.is_some_and(|s| s != l.split) {
            continue;
        }
        let e = &l.exam;
        let prob = *probs
            .get(&e.exam_id)
            .ok_or_else(|| CohortError::MissingProbability(e.exam_id.clone()))?;
        let pid = e.patient_id.as_str();
        let (end_day, event) = match label {
            ExamClass::FutureAF => (
                *first_af
                    .get(pid)
                    .ok_or_else(|| CohortError::InvalidRecord {
                        exam_id: e.exam_id.clone(),
                        reason: "FutureAF exam without a later AF exam".into(),
                    })?,
                true,
            ),
            _ => (last_day[pid], false),
        };
        let rec = SurvivalRecord {
            exam_id: e.exam_id.clone(),
            patient_id: e.patient_id.clone(),
            duration_weeks: (end_day - e.exam_day) as f64 / 7.0,
            event,
            risk_prob: prob,
            age: e.age,
            sex_male: e.sex.is_male(),
            covariates: e.covariates.clone(),
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn exam(pid: &str, day: i64, af: bool) -> ExamRecord {
        ExamRecord {
            exam_id: format!("{pid}-{day}"),
            patient_id: pid.to_string(),
            exam_day: day,
            af_flag: af,
            age: 60.0,
            sex: Sex::Female,
            covariates: vec![false; DEFAULT_COVARIATES],
            signal_path: format!("{pid}-{day}.afw"),
        }
    }

    fn labels(h: PatientHistory) -> Vec<(i64, Option<ExamClass>, Split)> {
        classify_exams(&[h], FOLLOW_UP_THRESHOLD_DAYS)
            .unwrap()
            .into_iter()
            .map(|l| (l.exam.exam_day, l.label, l.split))
            .collect()
    }

    #[test]
    fn future_af_patient() {
        let h = PatientHistory::new(
            "p",
            vec![
                exam("p", 0, false),
                exam("p", 100, false),
                exam("p", 400, true),
            ],
        )
        .unwrap();
        assert_eq!(h.group(), PatientGroup::FutureAFGroup);
        let l = labels(h);
        assert_eq!(l[0].1, Some(ExamClass::FutureAF));
        assert_eq!(l[1].1, Some(ExamClass::FutureAF));
        assert_eq!(l[2].1, Some(ExamClass::WithAF));
    }

    #[test]
    fn no_af_patient_drops_tail() {
        let h = PatientHistory::new(
            "p",
            vec![
                exam("p", 0, false),
                exam("p", 4, false),
                exam("p", 10, false),
            ],
        )
        .unwrap();
        let l = labels(h);
        assert_eq!(l[0], (0, Some(ExamClass::NoAF), Split::Unassigned));
        assert_eq!(l[1], (4, None, Split::Excluded));
        assert_eq!(l[2], (10, None, Split::Excluded));
    }

    #[test]
    fn seven_days_is_already_follow_up() {
        let h = PatientHistory::new(
            "p",
            vec![
                exam("p", 0, false),
                exam("p", 3, false),
                exam("p", 10, false),
            ],
        )
        .unwrap();
        let l = labels(h);
        assert_eq!(l[1], (3, Some(ExamClass::NoAF), Split::Unassigned));
    }

    #[test]
    fn exam_inside_pre_af_window_is_excluded() {
        let h = PatientHistory::new("p", vec![exam("p", 0, false), exam("p", 4, true)]).unwrap();
        let l = labels(h);
        assert_eq!(l[0].2, Split::Excluded);
        assert_eq!(l[1].1, Some(ExamClass::WithAF));
    }

    #[test]
    fn unordered_history_is_rejected() {
        let err = PatientHistory::new("p", vec![exam("p", 5, false), exam("p", 2, false)]);
        assert!(matches!(err, Err(CohortError::UnorderedExams { .. })));
        let err = PatientHistory::new("p", vec![exam("p", 5, false), exam("p", 5, true)]);
        assert!(matches!(err, Err(CohortError::UnorderedExams { .. })));
    }

    #[test]
    fn apportion_ten_patients() {
        assert_eq!(SplitFractions::default().apportion(10), [6, 1, 3]);
        assert_eq!(SplitFractions::default().apportion(0), [0, 0, 0]);
        let counts = SplitFractions::default().apportion(15);
        assert_eq!(counts.iter().sum::<usize>(), 15);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_by_patient(&[], SplitFractions::default(), 1),
            Err(CohortError::EmptyInput)
        ));
        let h = PatientHistory::new("p", vec![exam("p", 0, false), exam("p", 30, false)]).unwrap();
        let l = classify_exams(&[h], 7).unwrap();
        let bad = SplitFractions {
            train: 1.2,
            validation: -0.2,
            test: 0.0,
        };
        assert!(matches!(
            split_by_patient(&l, bad, 1),
            Err(CohortError::InvalidFractions(_))
        ));
        let bad = SplitFractions {
            train: 0.5,
            validation: 0.1,
            test: 0.1,
        };
        assert!(matches!(
            split_by_patient(&l, bad, 1),
            Err(CohortError::InvalidFractions(_))
        ));
    }

    fn survival_for(exams: Vec<ExamRecord>) -> Vec<SurvivalRecord> {
        let h = PatientHistory::new(exams[0].patient_id.clone(), exams).unwrap();
        let l = classify_exams(&[h], 7).unwrap();
        let probs = l.iter().map(|l| (l.exam.exam_id.clone(), 0.5)).collect();
        build_survival_records(&l, &probs, None).unwrap()
    }

    #[test]
    fn survival_durations() {
        let r = survival_for(vec![exam("a", 0, false), exam("a", 280, true)]);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].duration_weeks, 40.0);
        assert!(r[0].event);

        let r = survival_for(vec![exam("b", 0, false), exam("b", 1736, false)]);
        assert_eq!(r[0].duration_weeks, 248.0);
        assert!(!r[0].event);

        let r = survival_for(vec![exam("c", 0, false), exam("c", 7, false)]);
        assert_eq!(r[0].duration_weeks, 1.0);
        assert!(!r[0].event);
    }

    #[test]
    fn missing_probability_names_exam() {
        let h = PatientHistory::new("a", vec![exam("a", 0, false), exam("a", 280, true)]).unwrap();
        let l = classify_exams(&[h], 7).unwrap();
        let err = build_survival_records(&l, &HashMap::new(), None).unwrap_err();
        assert_eq!(err.to_string(), "no FutureAF probability for exam a-0");
    }

    #[test]
    fn covariate_length_is_checked() {
        let mut e = exam("a", 0, false);
        e.covariates.pop();
        assert!(validate_covariates([&e], DEFAULT_COVARIATES).is_err());
    }
}
