//! Classification metrics: ROC/AUC, PR/AP, F1-optimal thresholds,
//! confusion counts and percentile bootstrap intervals.

pub mod report;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedMul, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuralnet::ClassProbs;
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("both classes are required ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("at least one positive is required")]
    NoPositives,
    #[error("degenerate instance: p_futureaf + p_noaf = 0")]
    DegenerateProbs,
    #[error("score {0} outside [0, 1] or not finite")]
    BadScore(f64),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("need at least {need} exams, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("invalid option: {0}")]
    Option(String),
    #[error("metric failed on every bootstrap replicate")]
    BootstrapExhausted,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One exam's score for the positive class under evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExam<T = f64> {
    pub exam_id: String,
    /// Whether the true label is the positive class.
    pub positive: bool,
    pub score: T,
}

impl<T: Scalar> ScoredExam<T> {
    pub fn new(exam_id: impl Into<String>, positive: bool, score: T) -> Result<Self> {
        if !(score >= T::zero() && score <= T::one()) {
            return Err(MetricsError::BadScore(score.as_f64()));
        }
        Ok(Self {
            exam_id: exam_id.into(),
            positive,
            score,
        })
    }
}

/// `p_futureaf / (p_futureaf + p_noaf)`.
pub fn renormalize_two_class(p: &ClassProbs) -> Result<f64> {
    let z = p.p_futureaf + p.p_noaf;
    if !(z > 0.0) {
        return Err(MetricsError::DegenerateProbs);
    }
    Ok((p.p_futureaf / z).clamp(0.0, 1.0))
}

fn class_counts<T>(scored: &[ScoredExam<T>]) -> (usize, usize) {
    let p = scored.iter().filter(|s| s.positive).count();
    (p, scored.len() - p)
}

/// Cumulative `(threshold, tp, fp)` at each distinct score, descending;
/// an exam is predicted positive when its score is `>=` the threshold.
pub fn cumulative_counts<T: Scalar>(scored: &[ScoredExam<T>]) -> Vec<(T, usize, usize)> {
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| {
        scored[b]
            .score
            .partial_cmp(&scored[a].score)
            .expect("finite scores")
    });
    let mut out: Vec<(T, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in idx.iter().enumerate() {
        if scored[i].positive {
            tp += 1;
        } else {
            fp += 1;
        }
        let last = k + 1 == idx.len() || scored[idx[k + 1]].score != scored[i].score;
        if last {
            out.push((scored[i].score, tp, fp));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `+inf` for the (0, 0) endpoint.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// Trapezoidal area as an exact fraction.
    pub auc_exact: Ratio<u128>,
    pub positives: usize,
    pub negatives: usize,
}

pub fn roc_auc<T: Scalar>(scored: &[ScoredExam<T>]) -> Result<RocCurve> {
    let (p, n) = class_counts(scored);
    if p == 0 || n == 0 {
        return Err(MetricsError::SingleClass {
            positives: p,
            negatives: n,
        });
    }
    let counts = cumulative_counts(scored);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // twice the area in units of one (1/N x 1/P) cell
    let mut twice = 0u128;
    let (mut ptp, mut pfp) = (0u128, 0u128);
    for &(t, tp, fp) in &counts {
        let (tp, fp) = (tp as u128, fp as u128);
        twice += (fp - pfp) * (tp + ptp);
        points.push(RocPoint {
            threshold: t.as_f64(),
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
        ptp = tp;
        pfp = fp;
    }
    let auc_exact = Ratio::new(twice, 2 * p as u128 * n as u128);
    let auc = *auc_exact.numer() as f64 / *auc_exact.denom() as f64;
    Ok(RocCurve {
        points,
        auc,
        auc_exact,
        positives: p,
        negatives: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Step-wise `Σ (Rₙ − Rₙ₋₁) Pₙ`.
    pub ap: f64,
    pub positives: usize,
}

pub fn pr_ap<T: Scalar>(scored: &[ScoredExam<T>]) -> Result<PrCurve> {
    let (p, _) = class_counts(scored);
    if p == 0 {
        return Err(MetricsError::NoPositives);
    }
    let counts = cumulative_counts(scored);
    let mut points = Vec::with_capacity(counts.len());
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for &(t, tp, fp) in &counts {
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (tp - prev_tp) as f64 / p as f64 * precision;
        prev_tp = tp;
        points.push(PrPoint {
            threshold: t.as_f64(),
            recall: tp as f64 / p as f64,
            precision,
        });
    }
    Ok(PrCurve {
        points,
        ap,
        positives: p,
    })
}

/// Step-wise average precision as an exact fraction; `None` on overflow.
pub fn average_precision_exact<T: Scalar>(scored: &[ScoredExam<T>]) -> Result<Option<Ratio<u128>>> {
    let (p, _) = class_counts(scored);
    if p == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut sum = Ratio::<u128>::zero();
    let mut prev_tp = 0;
    for (_, tp, fp) in cumulative_counts(scored) {
        if tp > prev_tp {
            let dr = Ratio::new((tp - prev_tp) as u128, p as u128);
            let prec = Ratio::new(tp as u128, (tp + fp) as u128);
            let Some(term) = dr.checked_mul(&prec) else {
                return Ok(None);
            };
            let Some(s) = sum.checked_add(&term) else {
                return Ok(None);
            };
            sum = s;
        }
        prev_tp = tp;
    }
    Ok(Some(sum))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: f64,
    pub ppv: f64,
    pub specificity: f64,
    pub f1: f64,
}

fn ratio_or_zero(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl ThresholdMetrics {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Self {
            threshold,
            tp,
            fp,
            tn,
            fn_,
            sensitivity: ratio_or_zero(tp, tp + fn_),
            ppv: ratio_or_zero(tp, tp + fp),
            specificity: ratio_or_zero(tn, tn + fp),
            f1: ratio_or_zero(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

/// Confusion counts and rates with `score >= threshold` as positive.
pub fn threshold_metrics<T: Scalar>(
    scored: &[ScoredExam<T>],
    threshold: f64,
) -> Result<ThresholdMetrics> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for s in scored {
        match (s.score.as_f64() >= threshold, s.positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ThresholdMetrics::from_counts(threshold, tp, fp, tn, fn_))
}

/// Distinct score maximizing F1; ties go to the smallest threshold.
pub fn select_threshold_max_f1<T: Scalar>(validation: &[ScoredExam<T>]) -> Result<T> {
    let (p, n) = class_counts(validation);
    if p == 0 || n == 0 {
        return Err(MetricsError::SingleClass {
            positives: p,
            negatives: n,
        });
    }
    // F1 = 2tp / (2tp + fp + fn) = 2tp / (tp + fp + P); compared by cross-multiplication.
    let mut best: Option<(T, u128, u128)> = None;
    for (t, tp, fp) in cumulative_counts(validation) {
        let (num, den) = (2 * tp as u128, (tp + fp + p) as u128);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd >= bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    Ok(best.expect("nonempty").0)
}

/// One-vs-rest scores of class `k` from three-class probabilities.
pub fn one_vs_rest(
    ids: &[String],
    probs: &[ClassProbs],
    labels: &[usize],
    k: usize,
) -> Vec<ScoredExam> {
    ids.iter()
        .zip(probs)
        .zip(labels)
        .map(|((id, p), &y)| ScoredExam {
            exam_id: id.clone(),
            positive: y == k,
            score: p.as_array()[k].clamp(0.0, 1.0),
        })
        .collect()
}

/// Micro-averaged PR: every (exam, class) pair pooled into one binary
/// problem.
pub fn micro_average_pr(probs: &[ClassProbs], labels: &[usize]) -> Result<PrCurve> {
    let pooled: Vec<ScoredExam> = probs
        .iter()
        .zip(labels)
        .flat_map(|(p, &y)| {
            p.as_array()
                .into_iter()
                .enumerate()
                .map(move |(k, s)| ScoredExam {
                    exam_id: String::new(),
                    positive: y == k,
                    score: s.clamp(0.0, 1.0),
                })
        })
        .collect();
    pr_ap(&pooled)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub half_width: f64,
    pub level: f64,
    pub replicates: usize,
    /// Replicates dropped after exhausting redraws.
    pub failed: usize,
}

pub const MAX_REDRAWS: usize = 10;

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap over exams. Each replicate draws from its own
/// seeded stream; a resample lacking either class is redrawn up to
/// [`MAX_REDRAWS`] times.
pub fn bootstrap_ci<T, F>(
    scored: &[ScoredExam<T>],
    metric: F,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi>
where
    T: Scalar,
    F: Fn(&[ScoredExam<T>]) -> Result<f64>,
{
    if scored.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            got: scored.len(),
        });
    }
    if !(level > 0.0 && level < 1.0) || n_boot == 0 {
        return Err(MetricsError::Option(format!(
            "need 0 < level < 1 and n_boot > 0, got {level}, {n_boot}"
        )));
    }
    let point = metric(scored)?;
    let n = scored.len();
    let mut values = Vec::with_capacity(n_boot);
    let mut failed = 0;
    let mut sample = Vec::with_capacity(n);
    for r in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut got = None;
        for _ in 0..=MAX_REDRAWS {
            sample.clear();
            sample.extend((0..n).map(|_| scored[rng.random_range(0..n)].clone()));
            let (p, q) = class_counts(&sample);
            if p == 0 || q == 0 {
                continue;
            }
            if let Ok(v) = metric(&sample) {
                got = Some(v);
                break;
            }
        }
        match got {
            Some(v) => values.push(v),
            None => failed += 1,
        }
    }
    if values.is_empty() {
        return Err(MetricsError::BootstrapExhausted);
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let alpha = 1.0 - level;
    let low = quantile(&values, alpha / 2.0);
    let high = quantile(&values, 1.0 - alpha / 2.0);
    Ok(BootstrapCi {
        point,
        low,
        high,
        half_width: (high - low) / 2.0,
        level,
        replicates: values.len(),
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[(f64, bool)]) -> Vec<ScoredExam> {
        v.iter()
            .enumerate()
            .map(|(i, &(s, p))| ScoredExam::new(format!("e{i}"), p, s).unwrap())
            .collect()
    }

    #[test]
    fn four_point_auc_and_ap() {
        let s = set(&[(0.1, false), (0.4, false), (0.35, true), (0.8, true)]);
        let roc = roc_auc(&s).unwrap();
        assert_eq!(roc.auc_exact, Ratio::new(3, 4));
        assert_eq!(roc.points.first().unwrap().tpr, 0.0);
        assert_eq!(
            (
                roc.points.last().unwrap().fpr,
                roc.points.last().unwrap().tpr
            ),
            (1.0, 1.0)
        );
        let pr = pr_ap(&s).unwrap();
        assert!((pr.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision_exact(&s).unwrap(), Some(Ratio::new(5, 6)));
    }

    #[test]
    fn renormalization() {
        let p = ClassProbs {
            p_noaf: 0.6,
            p_withaf: 0.3,
            p_futureaf: 0.1,
        };
        assert!((renormalize_two_class(&p).unwrap() - 0.1 / 0.7).abs() < 1e-15);
        let p = ClassProbs {
            p_noaf: 0.0,
            p_withaf: 0.5,
            p_futureaf: 0.5,
        };
        assert_eq!(renormalize_two_class(&p).unwrap(), 1.0);
        let p = ClassProbs {
            p_noaf: 0.0,
            p_withaf: 1.0,
            p_futureaf: 0.0,
        };
        assert_eq!(
            renormalize_two_class(&p),
            Err(MetricsError::DegenerateProbs)
        );
    }

    #[test]
    fn f1_threshold_on_separated_set() {
        let s = set(&[(0.9, true), (0.6, true), (0.5, false), (0.2, false)]);
        let t = select_threshold_max_f1(&s).unwrap();
        assert_eq!(t, 0.6);
        let m = threshold_metrics(&s, t).unwrap();
        assert_eq!(
            (m.sensitivity, m.ppv, m.specificity, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let all = threshold_metrics(&s, 0.0).unwrap();
        assert_eq!((all.sensitivity, all.specificity), (1.0, 0.0));
    }

    #[test]
    fn f1_ties_prefer_smallest_threshold() {
        // thresholds 0.8 and 0.3 both give F1 = 2/3
        let s = set(&[
            (0.8, true),
            (0.5, false),
            (0.4, false),
            (0.3, true),
            (0.1, false),
        ]);
        let f1 = |t| threshold_metrics(&s, t).unwrap().f1;
        assert!((f1(0.8) - f1(0.3)).abs() < 1e-15);
        assert_eq!(select_threshold_max_f1(&s).unwrap(), 0.3);
    }

    #[test]
    fn single_class_errors() {
        let s = set(&[(0.1, true), (0.2, true)]);
        assert!(matches!(roc_auc(&s), Err(MetricsError::SingleClass { .. })));
        assert!(matches!(
            pr_ap(&set(&[(0.1, false)])),
            Err(MetricsError::NoPositives)
        ));
        assert!(ScoredExam::new("x", true, 1.5).is_err());
    }

    #[test]
    fn bootstrap_constant_metric_has_zero_width() {
        let s = set(&[
            (0.9, true),
            (0.8, true),
            (0.1, false),
            (0.2, false),
            (0.3, false),
        ]);
        let ci = bootstrap_ci(&s, |x| roc_auc(x).map(|r| r.auc), 200, 0.95, 3).unwrap();
        assert_eq!((ci.point, ci.half_width), (1.0, 0.0));
        let again = bootstrap_ci(&s, |x| roc_auc(x).map(|r| r.auc), 200, 0.95, 3).unwrap();
        assert_eq!(ci, again);
    }
}
