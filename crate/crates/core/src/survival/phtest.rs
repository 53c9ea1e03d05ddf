use serde::{Deserialize, Serialize};

use super::cox::{chol_solve, cholesky, CoxData};
use super::{CoxFit, Result, SurvivalError, Ties};
use crate::scalar::chi2_1df_sf;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhCovariate {
    pub name: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhTestResult {
    pub covariates: Vec<PhCovariate>,
    pub n_events: usize,
    pub time_transform: String,
}

/// Per event time: the summed Schoenfeld residuals `x_i - E[x | risk set]`
/// of the tied events and the summed risk-set covariance, both using the
/// Efron fractions.
struct EventGroup {
    time: f64,
    resid: Vec<f64>,
    var: Vec<f64>,
}

fn event_groups<T: Scalar>(beta: &[T], data: &CoxData<T>, ties: Ties) -> Vec<EventGroup> {
    let p = data.p();
    let eta: Vec<T> = (0..data.n())
        .map(|i| data.row(i).iter().zip(beta).map(|(&x, &b)| x * b).sum())
        .collect();
    let shift = eta.iter().copied().fold(T::neg_infinity(), T::max);
    let w: Vec<T> = eta.iter().map(|&e| (e - shift).exp()).collect();
    let (mut s0, mut s1, mut s2) = (T::zero(), vec![T::zero(); p], vec![T::zero(); p * p]);
    let mut out = Vec::new();
    for group in data.descending_groups() {
        let (mut t0, mut t1, mut t2) = (T::zero(), vec![T::zero(); p], vec![T::zero(); p * p]);
        let mut resid = vec![T::zero(); p];
        let mut d = 0usize;
        for &i in &group {
            let x = data.row(i);
            let add = |m0: &mut T, m1: &mut [T], m2: &mut [T]| {
                *m0 += w[i];
                for a in 0..p {
                    m1[a] += w[i] * x[a];
                    for b in 0..p {
                        m2[a * p + b] += w[i] * x[a] * x[b];
                    }
                }
            };
            add(&mut s0, &mut s1, &mut s2);
            if data.events[i] {
                add(&mut t0, &mut t1, &mut t2);
                resid.iter_mut().zip(x).for_each(|(r, &v)| *r += v);
                d += 1;
            }
        }
        if d == 0 {
            continue;
        }
        let mut var = vec![T::zero(); p * p];
        let mut mean = vec![T::zero(); p];
        for l in 0..d {
            let phi = match ties {
                Ties::Efron => T::from_usize_lossy(l) / T::from_usize_lossy(d),
                Ties::Breslow => T::zero(),
            };
            let a0 = s0 - phi * t0;
            for a in 0..p {
                mean[a] = (s1[a] - phi * t1[a]) / a0;
                resid[a] -= mean[a];
            }
            for a in 0..p {
                for b in 0..p {
                    var[a * p + b] +=
                        (s2[a * p + b] - phi * t2[a * p + b]) / a0 - mean[a] * mean[b];
                }
            }
        }
        out.push(EventGroup {
            time: data.times[group[0]].as_f64(),
            resid: resid.iter().map(|v| v.as_f64()).collect(),
            var: var.iter().map(|v| v.as_f64()).collect(),
        });
    }
    out
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut j = k;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[k]] {
            j += 1;
        }
        let r = (k + j) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=j] {
            ranks[i] = r;
        }
        k = j + 1;
    }
    ranks
}

/// Score test, per covariate, for an added `x_j * g(t)` term where `g` is
/// the rank of event time, with all fitted coefficients as nuisance
/// parameters. The score is the rank-weighted sum of Schoenfeld residuals;
/// one chi-square (1 df) per covariate. `data` is the design the fit was
/// computed from, including any columns the fit excluded.
pub fn ph_test<T: Scalar>(fit: &CoxFit<T>, data: &CoxData<T>) -> Result<PhTestResult> {
    let n_events = data.n_events();
    if n_events < 3 {
        return Err(SurvivalError::TooFewEvents(n_events));
    }
    if !fit.converged {
        return Err(SurvivalError::NotConverged(fit.iterations));
    }
    if fit.columns.iter().any(|&j| j >= data.p()) || data.n() != fit.n {
        return Err(SurvivalError::Shape(
            "data does not match the fitted design".into(),
        ));
    }
    let reduced = CoxData {
        times: data.times.clone(),
        events: data.events.clone(),
        x: (0..data.n())
            .flat_map(|i| fit.columns.iter().map(move |&j| data.x[i * data.p() + j]))
            .collect(),
        names: fit.names.clone(),
    };
    let p = reduced.p();
    let groups = event_groups(&fit.beta, &reduced, fit.ties);

    // every event in a tied group shares the group's average rank
    let mut event_times = Vec::with_capacity(n_events);
    let mut sizes = Vec::with_capacity(groups.len());
    for (k, g) in groups.iter().enumerate() {
        let d = reduced
            .times
            .iter()
            .zip(&reduced.events)
            .filter(|(&t, &e)| e && t.as_f64() == g.time)
            .count();
        event_times.extend(std::iter::repeat_n(g.time, d));
        sizes.push((k, d));
    }
    let ranks = average_ranks(&event_times);
    let mut rank_of = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for &(_, d) in &sizes {
        rank_of.push(ranks[offset]);
        offset += d;
    }
    let g_mean = ranks.iter().sum::<f64>() / ranks.len() as f64;

    let mut u = vec![0.0; p];
    let mut i_bb = vec![0.0; p * p];
    let mut i_gb = vec![0.0; p * p];
    let mut i_gg = vec![0.0; p * p];
    for (grp, &r) in groups.iter().zip(&rank_of) {
        let g = r - g_mean;
        for a in 0..p {
            u[a] += g * grp.resid[a];
            for b in 0..p {
                let v = grp.var[a * p + b];
                i_bb[a * p + b] += v;
                i_gb[a * p + b] += g * v;
                i_gg[a * p + b] += g * g * v;
            }
        }
    }
    let l =
        cholesky(&i_bb, p, 1e-12).map_err(|j| SurvivalError::Collinear(fit.names[j].clone()))?;
    let covariates = (0..p)
        .map(|j| {
            let row: Vec<f64> = (0..p).map(|b| i_gb[j * p + b]).collect();
            let solved = chol_solve(&l, p, &row);
            let schur = i_gg[j * p + j] - row.iter().zip(&solved).map(|(a, b)| a * b).sum::<f64>();
            let statistic = if schur > 0.0 {
                u[j] * u[j] / schur
            } else {
                0.0
            };
            PhCovariate {
                name: fit.names[j].clone(),
                statistic,
                df: 1,
                p_value: chi2_1df_sf(statistic).clamp(0.0, 1.0),
            }
        })
        .collect();
    Ok(PhTestResult {
        covariates,
        n_events,
        time_transform: "rank".into(),
    })
}
