use serde::{Deserialize, Serialize};

use super::{Result, RiskBins, SurvivalError};
use crate::cohort::SurvivalRecord;
use crate::scalar::{normal_two_sided_p, Z_95};
use crate::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

/// Durations, event flags and a row-major `n x p` covariate matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CoxData<T = f64> {
    pub times: Vec<T>,
    pub events: Vec<bool>,
    pub x: Vec<T>,
    pub names: Vec<String>,
}

impl<T: Scalar> CoxData<T> {
    pub fn new(times: Vec<T>, events: Vec<bool>, x: Vec<T>, names: Vec<String>) -> Result<Self> {
        let n = times.len();
        if events.len() != n || x.len() != n * names.len() {
            return Err(SurvivalError::Shape(format!(
                "{n} times, {} events, {} covariate values for {} names",
                events.len(),
                x.len(),
                names.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !(**t >= T::zero()) || !t.is_finite()) {
            return Err(SurvivalError::BadDuration(t.as_f64()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SurvivalError::Shape("non-finite covariate value".into()));
        }
        Ok(Self {
            times,
            events,
            x,
            names,
        })
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn p(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    fn select(&self, cols: &[usize]) -> Self {
        let x = (0..self.n())
            .flat_map(|i| cols.iter().map(move |&j| self.x[i * self.p() + j]))
            .collect();
        Self {
            times: self.times.clone(),
            events: self.events.clone(),
            x,
            names: cols.iter().map(|&j| self.names[j].clone()).collect(),
        }
    }

    /// Subjects grouped by equal time, in descending time order.
    pub(crate) fn descending_groups(&self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.sort_by(|&a, &b| self.times[b].partial_cmp(&self.times[a]).expect("finite"));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in idx {
            match groups.last_mut() {
                Some(g) if self.times[g[0]] == self.times[i] => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        groups
    }
}

/// Log partial likelihood with its gradient and (row-major) Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLik<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub hess: Vec<T>,
}

/// Running `Σ w`, `Σ w x`, `Σ w x xᵀ` over a set of subjects.
struct Moments<T> {
    s0: T,
    s1: Vec<T>,
    s2: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    fn new(p: usize) -> Self {
        Self {
            s0: T::zero(),
            s1: vec![T::zero(); p],
            s2: vec![T::zero(); p * p],
        }
    }

    fn add(&mut self, w: T, x: &[T]) {
        let p = x.len();
        self.s0 += w;
        for a in 0..p {
            let wa = w * x[a];
            self.s1[a] += wa;
            for (s, &xb) in self.s2[a * p..(a + 1) * p].iter_mut().zip(x) {
                *s += wa * xb;
            }
        }
    }
}

/// Efron (or Breslow) log partial likelihood. Linear predictors are shifted
/// by their maximum before exponentiation.
pub fn cox_loglik_grad<T: Scalar>(beta: &[T], data: &CoxData<T>, ties: Ties) -> LogLik<T> {
    let p = data.p();
    assert_eq!(beta.len(), p, "coefficient length");
    let eta: Vec<T> = (0..data.n())
        .map(|i| data.row(i).iter().zip(beta).map(|(&x, &b)| x * b).sum())
        .collect();
    let shift = eta.iter().copied().fold(T::neg_infinity(), T::max);
    let shift = if shift.is_finite() { shift } else { T::zero() };
    let w: Vec<T> = eta.iter().map(|&e| (e - shift).exp()).collect();

    let mut out = LogLik {
        value: T::zero(),
        grad: vec![T::zero(); p],
        hess: vec![T::zero(); p * p],
    };
    let mut risk = Moments::new(p);
    let mut a1 = vec![T::zero(); p];
    for group in data.descending_groups() {
        let mut tied = Moments::new(p);
        let mut d = 0usize;
        for &i in &group {
            risk.add(w[i], data.row(i));
            if data.events[i] {
                tied.add(w[i], data.row(i));
                d += 1;
                out.value += eta[i];
                for (g, &x) in out.grad.iter_mut().zip(data.row(i)) {
                    *g += x;
                }
            }
        }
        let dt = T::from_usize_lossy(d);
        for l in 0..d {
            let phi = match ties {
                Ties::Efron => T::from_usize_lossy(l) / dt,
                Ties::Breslow => T::zero(),
            };
            let a0 = risk.s0 - phi * tied.s0;
            for ((m, &r), &t) in a1.iter_mut().zip(&risk.s1).zip(&tied.s1) {
                *m = (r - phi * t) / a0;
            }
            out.value -= a0.ln() + shift;
            for a in 0..p {
                out.grad[a] -= a1[a];
                for b in 0..p {
                    let a2 = (risk.s2[a * p + b] - phi * tied.s2[a * p + b]) / a0;
                    out.hess[a * p + b] -= a2 - a1[a] * a1[b];
                }
            }
        }
    }
    out
}

/// Lower Cholesky factor of a symmetric positive-definite matrix; `Err(j)`
/// names the first pivot that is not positive relative to its diagonal.
pub(crate) fn cholesky<T: Scalar>(
    a: &[T],
    p: usize,
    rel_tol: T,
) -> std::result::Result<Vec<T>, usize> {
    let mut l = vec![T::zero(); p * p];
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > rel_tol * a[j * p + j].abs()) || !(d > T::zero()) {
            return Err(j);
        }
        let dj = d.sqrt();
        l[j * p + j] = dj;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / dj;
        }
    }
    Ok(l)
}

pub(crate) fn chol_solve<T: Scalar>(l: &[T], p: usize, b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            let v = l[i * p + k] * y[k];
            y[i] -= v;
        }
        y[i] /= l[i * p + i];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            let v = l[k * p + i] * y[k];
            y[i] -= v;
        }
        y[i] /= l[i * p + i];
    }
    y
}

pub(crate) fn chol_inverse<T: Scalar>(l: &[T], p: usize) -> Vec<T> {
    let mut inv = vec![T::zero(); p * p];
    for j in 0..p {
        let mut e = vec![T::zero(); p];
        e[j] = T::one();
        for (i, v) in chol_solve(l, p, &e).into_iter().enumerate() {
            inv[i * p + j] = v;
        }
    }
    inv
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub ties: Ties,
    pub max_iter: usize,
    /// Converged when every coefficient moves less than this.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            ties: Ties::Efron,
            max_iter: 100,
            tol: 1e-7,
            max_halvings: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoxFit<T = f64> {
    pub names: Vec<String>,
    /// Columns of the input data that entered the model.
    pub columns: Vec<usize>,
    pub beta: Vec<T>,
    pub se: Vec<T>,
    pub hazard_ratio: Vec<T>,
    pub ci_low: Vec<T>,
    pub ci_high: Vec<T>,
    pub z: Vec<T>,
    pub p_value: Vec<T>,
    /// Inverse observed information at the estimate (row-major).
    pub covariance: Vec<T>,
    pub loglik: T,
    pub loglik_null: T,
    pub converged: bool,
    pub iterations: usize,
    pub ties: Ties,
    pub n: usize,
    pub n_events: usize,
    /// Diagnostics such as dropped degenerate covariates.
    pub notes: Vec<String>,
}

fn information_factor<T: Scalar>(ll: &LogLik<T>, p: usize) -> std::result::Result<Vec<T>, usize> {
    let info: Vec<T> = ll.hess.iter().map(|&h| -h).collect();
    cholesky(&info, p, T::lit(1e-10))
}

/// Newton-Raphson with step halving on the log partial likelihood.
/// Constant covariates are dropped with a note; collinear ones are an error.
pub fn cox_fit_data<T: Scalar>(data: &CoxData<T>, opts: &CoxOptions) -> Result<CoxFit<T>> {
    let n_events = data.n_events();
    if data.n() == 0 {
        return Err(SurvivalError::Empty);
    }
    if n_events == 0 {
        return Err(SurvivalError::NoEvents);
    }
    let mut notes = Vec::new();
    let mut columns = Vec::new();
    for j in 0..data.p() {
        let first = data.x[j];
        if (0..data.n()).all(|i| data.x[i * data.p() + j] == first) {
            notes.push(format!(
                "covariate '{}' is constant ({first}) and was excluded",
                data.names[j]
            ));
        } else {
            columns.push(j);
        }
    }
    if columns.is_empty() {
        return Err(SurvivalError::NoCovariates);
    }
    let d = data.select(&columns);
    let p = d.p();

    let mut beta = vec![T::zero(); p];
    let mut ll = cox_loglik_grad(&beta, &d, opts.ties);
    let loglik_null = ll.value;
    if let Err(j) = information_factor(&ll, p) {
        return Err(SurvivalError::Collinear(format!(
            "'{}' is (nearly) a linear combination of {:?}",
            d.names[j],
            &d.names[..j]
        )));
    }

    let tol = T::lit(opts.tol);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let Ok(l) = information_factor(&ll, p) else {
            notes.push(format!(
                "information matrix lost positive definiteness at iteration {iterations}"
            ));
            break;
        };
        let mut step = chol_solve(&l, p, &ll.grad);
        let slack = T::lit(1e-12) * (T::one() + ll.value.abs());
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<T> = beta.iter().zip(&step).map(|(&b, &s)| b + s).collect();
            let next = cox_loglik_grad(&cand, &d, opts.ties);
            if next.value.is_finite() && next.value >= ll.value - slack {
                accepted = Some((cand, next));
                break;
            }
            step.iter_mut().for_each(|s| *s /= T::lit(2.0));
        }
        let Some((cand, next)) = accepted else {
            notes.push(format!("step halving exhausted at iteration {iterations}"));
            break;
        };
        let moved = step.iter().fold(T::zero(), |m, s| m.max(s.abs()));
        beta = cand;
        ll = next;
        if moved < tol {
            converged = true;
            break;
        }
    }
    if !converged && !notes.iter().any(|n| n.contains("iteration")) {
        notes.push(format!(
            "no convergence within {} iterations (possible separation)",
            opts.max_iter
        ));
    }

    let covariance = match information_factor(&ll, p) {
        Ok(l) => chol_inverse(&l, p),
        Err(_) => vec![T::nan(); p * p],
    };
    let z95 = T::lit(Z_95);
    let se: Vec<T> = (0..p).map(|j| covariance[j * p + j].sqrt()).collect();
    let z: Vec<T> = beta.iter().zip(&se).map(|(&b, &s)| b / s).collect();
    Ok(CoxFit {
        names: d.names.clone(),
        columns,
        hazard_ratio: beta.iter().map(|b| b.exp()).collect(),
        ci_low: beta
            .iter()
            .zip(&se)
            .map(|(&b, &s)| (b - z95 * s).exp())
            .collect(),
        ci_high: beta
            .iter()
            .zip(&se)
            .map(|(&b, &s)| (b + z95 * s).exp())
            .collect(),
        p_value: z
            .iter()
            .map(|&v| T::lit(normal_two_sided_p(v.as_f64())))
            .collect(),
        z,
        se,
        beta,
        covariance,
        loglik: ll.value,
        loglik_null,
        converged,
        iterations,
        ties: opts.ties,
        n: d.n(),
        n_events,
        notes,
    })
}

/// How the classifier probability enters the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskEncoding {
    /// Indicators for every bin but the first, which is the reference.
    Groups(RiskBins),
    /// The probability itself as a continuous covariate.
    Raw,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub risk: RiskEncoding,
    pub age: bool,
    pub sex: bool,
    /// Indices of binary record covariates to include.
    pub binary: Vec<usize>,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        Self {
            risk: RiskEncoding::Groups(RiskBins::default()),
            age: true,
            sex: true,
            binary: Vec::new(),
        }
    }
}

impl CovariateSpec {
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.risk {
            RiskEncoding::Groups(bins) => {
                names.extend((1..bins.n_bins()).map(|b| format!("risk {}", bins.label(b))))
            }
            RiskEncoding::Raw => names.push("risk_prob".into()),
            RiskEncoding::None => {}
        }
        if self.age {
            names.push("age".into());
        }
        if self.sex {
            names.push("sex_male".into());
        }
        names.extend(self.binary.iter().map(|i| format!("cov_{i}")));
        names
    }

    pub fn design<T: Scalar>(&self, records: &[SurvivalRecord<T>]) -> Result<CoxData<T>> {
        if let RiskEncoding::Groups(bins) = &self.risk {
            bins.validate()?;
        }
        let names = self.names();
        let mut x = Vec::with_capacity(records.len() * names.len());
        let flag = |b: bool| if b { T::one() } else { T::zero() };
        for r in records {
            match &self.risk {
                RiskEncoding::Groups(bins) => {
                    let g = bins.assign(r.risk_prob.as_f64())?;
                    x.extend((1..bins.n_bins()).map(|b| flag(g == b)));
                }
                RiskEncoding::Raw => x.push(r.risk_prob),
                RiskEncoding::None => {}
            }
            if self.age {
                x.push(r.age);
            }
            if self.sex {
                x.push(flag(r.sex_male));
            }
            for &i in &self.binary {
                let v = r.covariates.get(i).ok_or_else(|| {
                    SurvivalError::Shape(format!("record {} has no covariate {i}", r.exam_id))
                })?;
                x.push(flag(*v));
            }
        }
        CoxData::new(
            records.iter().map(|r| r.duration_weeks).collect(),
            records.iter().map(|r| r.event).collect(),
            x,
            names,
        )
    }
}

pub fn cox_fit<T: Scalar>(
    records: &[SurvivalRecord<T>],
    spec: &CovariateSpec,
    opts: &CoxOptions,
) -> Result<CoxFit<T>> {
    cox_fit_data(&spec.design(records)?, opts)
}
