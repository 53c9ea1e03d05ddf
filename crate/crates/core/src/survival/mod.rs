//! Time-to-event analysis: Kaplan-Meier with exponential Greenwood bounds,
//! Efron/Breslow Cox regression with Wald inference, and the scaled
//! Schoenfeld-residual score test of proportional hazards.

mod cox;
mod phtest;
pub mod report;

pub use cox::{
    cox_fit, cox_fit_data, cox_loglik_grad, CovariateSpec, CoxData, CoxFit, CoxOptions, LogLik,
    RiskEncoding, Ties,
};
pub use phtest::{ph_test, PhCovariate, PhTestResult};

use num_rational::Ratio;
use num_traits::{CheckedMul, One};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::SurvivalRecord;
use crate::scalar::Z_95;
use crate::Scalar;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum SurvivalError {
    #[error("no records")]
    Empty,
    #[error("all durations are zero")]
    AllZero,
    #[error("invalid duration {0}")]
    BadDuration(f64),
    #[error("risk probability {0} outside [0, 1]")]
    BadRisk(f64),
    #[error("invalid risk-bin edges {0:?}")]
    BadEdges(Vec<f64>),
    #[error("no events")]
    NoEvents,
    #[error("interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("collinear covariates: {0}")]
    Collinear(String),
    #[error("no usable covariates")]
    NoCovariates,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("proportional-hazards test needs at least 3 events, got {0}")]
    TooFewEvents(usize),
    #[error("fit did not converge after {0} iterations")]
    NotConverged(usize),
}

pub type Result<T> = std::result::Result<T, SurvivalError>;

/// Risk-probability bins; bin `i` is `[edges[i-1], edges[i])` with the top
/// bin closed at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskBins {
    /// Interior edges, strictly increasing inside (0, 1).
    pub edges: Vec<f64>,
}

impl Default for RiskBins {
    fn default() -> Self {
        Self {
            edges: vec![0.1, 0.4, 0.7],
        }
    }
}

impl RiskBins {
    pub fn validate(&self) -> Result<()> {
        let inside = self.edges.iter().all(|&e| e > 0.0 && e < 1.0);
        let increasing = self.edges.windows(2).all(|w| w[0] < w[1]);
        if inside && increasing {
            Ok(())
        } else {
            Err(SurvivalError::BadEdges(self.edges.clone()))
        }
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn assign(&self, p: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&p) {
            return Err(SurvivalError::BadRisk(p));
        }
        Ok(self.edges.iter().take_while(|&&e| p >= e).count())
    }

    pub fn label(&self, bin: usize) -> String {
        let lo = if bin == 0 { 0.0 } else { self.edges[bin - 1] };
        if bin == self.edges.len() {
            format!("[{lo},1.0]")
        } else {
            format!("[{lo},{})", self.edges[bin])
        }
    }
}

/// Bin index under the default `[0,0.1) [0.1,0.4) [0.4,0.7) [0.7,1.0]` edges.
pub fn assign_risk_group(p: f64) -> Result<usize> {
    RiskBins::default().assign(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmCurve<T = f64> {
    /// Distinct event times, ascending.
    pub times: Vec<T>,
    pub survival: Vec<T>,
    pub ci_low: Vec<T>,
    pub ci_high: Vec<T>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub n: usize,
}

impl<T: Scalar> KmCurve<T> {
    /// Right-continuous estimate at `t`.
    pub fn survival_at(&self, t: T) -> T {
        match self.times.iter().rposition(|&x| x <= t) {
            Some(i) => self.survival[i],
            None => T::one(),
        }
    }
}

fn check_times<T: Scalar>(times: &[T], events: &[bool]) -> Result<()> {
    if times.len() != events.len() {
        return Err(SurvivalError::Shape(format!(
            "{} times, {} event flags",
            times.len(),
            events.len()
        )));
    }
    if times.is_empty() {
        return Err(SurvivalError::Empty);
    }
    if let Some(&t) = times.iter().find(|t| !(**t >= T::zero()) || !t.is_finite()) {
        return Err(SurvivalError::BadDuration(t.as_f64()));
    }
    Ok(())
}

/// Largest integer below which every integer is an exact `f64`.
const EXACT_F64: u128 = 1 << 53;

/// Product-limit estimate. Subjects censored at an event time count as at
/// risk through that event.
pub fn kaplan_meier_raw<T: Scalar>(times: &[T], events: &[bool]) -> Result<KmCurve<T>> {
    check_times(times, events)?;
    if times.iter().all(|t| *t == T::zero()) {
        return Err(SurvivalError::AllZero);
    }
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).expect("finite"));
    let z = T::lit(Z_95);
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        ci_low: Vec::new(),
        ci_high: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        n: times.len(),
    };
    let mut s = T::one();
    // exact running product while it stays representable
    let mut exact = Some(Ratio::<u128>::one());
    let mut gw = T::zero();
    let mut remaining = times.len();
    let mut k = 0;
    while k < idx.len() {
        let t = times[idx[k]];
        let mut j = k;
        let mut d = 0;
        while j < idx.len() && times[idx[j]] == t {
            d += usize::from(events[idx[j]]);
            j += 1;
        }
        if d > 0 {
            let n = remaining;
            let (nt, dt) = (T::from_usize_lossy(n), T::from_usize_lossy(d));
            exact = exact.and_then(|r| r.checked_mul(&Ratio::new((n - d) as u128, n as u128)));
            s = match exact {
                Some(r) if *r.denom() <= EXACT_F64 => T::lit(*r.numer() as f64 / *r.denom() as f64),
                _ => {
                    exact = None;
                    s * (T::one() - dt / nt)
                }
            };
            if d < n {
                gw += dt / (nt * (nt - dt));
            }
            let (lo, hi) = if s <= T::zero() {
                (T::zero(), T::zero())
            } else if s >= T::one() {
                (T::one(), T::one())
            } else {
                let ls = s.ln();
                let theta = (-ls).ln();
                let se = gw.sqrt() / ls.abs();
                (
                    (-(theta + z * se).exp()).exp(),
                    (-(theta - z * se).exp()).exp(),
                )
            };
            curve.times.push(t);
            curve.survival.push(s);
            curve.ci_low.push(lo.max(T::zero()).min(s));
            curve.ci_high.push(hi.min(T::one()).max(s));
            curve.at_risk.push(n);
            curve.events.push(d);
        }
        remaining -= j - k;
        k = j;
    }
    Ok(curve)
}

pub fn kaplan_meier<T: Scalar>(records: &[SurvivalRecord<T>]) -> Result<KmCurve<T>> {
    let times: Vec<T> = records.iter().map(|r| r.duration_weeks).collect();
    let events: Vec<bool> = records.iter().map(|r| r.event).collect();
    kaplan_meier_raw(&times, &events)
}

/// Smallest event time with `S(t) <= 0.5`; infinity when never reached.
pub fn median_survival<T: Scalar>(curve: &KmCurve<T>) -> T {
    let half = T::lit(0.5);
    curve
        .times
        .iter()
        .zip(&curve.survival)
        .find(|(_, &s)| s <= half)
        .map_or(T::infinity(), |(&t, _)| t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtRiskRow {
    pub start: f64,
    pub end: f64,
    /// Subjects with duration `>= start`.
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

/// Subjects at risk at each interval start plus events and censorings
/// inside `[start, end)`, for intervals starting below `horizon`.
pub fn at_risk_table_raw<T: Scalar>(
    times: &[T],
    events: &[bool],
    interval: f64,
    horizon: f64,
) -> Result<Vec<AtRiskRow>> {
    if !(interval > 0.0) || !interval.is_finite() {
        return Err(SurvivalError::BadInterval(interval));
    }
    if times.len() != events.len() {
        return Err(SurvivalError::Shape(format!(
            "{} times, {} event flags",
            times.len(),
            events.len()
        )));
    }
    let mut rows = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * interval;
        if start >= horizon && k > 0 {
            break;
        }
        let end = start + interval;
        let mut row = AtRiskRow {
            start,
            end,
            at_risk: 0,
            events: 0,
            censored: 0,
        };
        for (t, &e) in times.iter().map(|t| t.as_f64()).zip(events) {
            if t >= start {
                row.at_risk += 1;
                if t < end {
                    if e {
                        row.events += 1;
                    } else {
                        row.censored += 1;
                    }
                }
            }
        }
        rows.push(row);
        k += 1;
    }
    Ok(rows)
}

pub fn at_risk_table<T: Scalar>(
    records: &[SurvivalRecord<T>],
    interval: f64,
    horizon: f64,
) -> Result<Vec<AtRiskRow>> {
    let times: Vec<T> = records.iter().map(|r| r.duration_weeks).collect();
    let events: Vec<bool> = records.iter().map(|r| r.event).collect();
    at_risk_table_raw(&times, &events, interval, horizon)
}
