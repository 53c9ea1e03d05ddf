//! CSV, JSON and SVG renderings of survival results.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{AtRiskRow, CoxFit, KmCurve};
use crate::plot::{Plot, Series};
use crate::Scalar;

fn comment_line<W: Write>(w: &mut W, comment: Option<&str>) -> io::Result<()> {
    match comment {
        Some(c) => writeln!(w, "# {c}"),
        None => Ok(()),
    }
}

/// Step-function rows starting with `t = 0`.
pub fn km_rows<T: Scalar>(km: &KmCurve<T>) -> Vec<(f64, f64, f64, f64, usize)> {
    let mut rows = vec![(0.0, 1.0, 1.0, 1.0, km.n)];
    for i in 0..km.times.len() {
        let t = km.times[i].as_f64();
        let row = (
            t,
            km.survival[i].as_f64(),
            km.ci_low[i].as_f64(),
            km.ci_high[i].as_f64(),
            km.at_risk[i],
        );
        if t == 0.0 {
            rows[0] = row;
        } else {
            rows.push(row);
        }
    }
    rows
}

pub fn write_km_csv<W: Write, T: Scalar>(
    mut w: W,
    km: &KmCurve<T>,
    comment: Option<&str>,
) -> io::Result<()> {
    comment_line(&mut w, comment)?;
    writeln!(w, "time_weeks,survival,ci_low,ci_high,at_risk")?;
    for (t, s, lo, hi, n) in km_rows(km) {
        writeln!(w, "{t},{s},{lo},{hi},{n}")?;
    }
    Ok(())
}

/// Several labelled curves in one long-format file.
pub fn write_km_groups_csv<W: Write, T: Scalar>(
    mut w: W,
    curves: &[(String, KmCurve<T>)],
    comment: Option<&str>,
) -> io::Result<()> {
    comment_line(&mut w, comment)?;
    writeln!(w, "group,time_weeks,survival,ci_low,ci_high,at_risk")?;
    for (name, km) in curves {
        for (t, s, lo, hi, n) in km_rows(km) {
            writeln!(w, "\"{name}\",{t},{s},{lo},{hi},{n}")?;
        }
    }
    Ok(())
}

pub fn write_at_risk_csv<W: Write>(
    mut w: W,
    tables: &[(String, Vec<AtRiskRow>)],
    comment: Option<&str>,
) -> io::Result<()> {
    comment_line(&mut w, comment)?;
    writeln!(
        w,
        "group,interval_start,interval_end,at_risk,events,censored"
    )?;
    for (name, rows) in tables {
        for r in rows {
            writeln!(
                w,
                "\"{name}\",{},{},{},{},{}",
                r.start, r.end, r.at_risk, r.events, r.censored
            )?;
        }
    }
    Ok(())
}

pub fn km_svg<T: Scalar>(title: &str, curves: &[(String, KmCurve<T>)]) -> String {
    let mut x_max: f64 = 1.0;
    let series = curves
        .iter()
        .map(|(name, km)| {
            let mut rows = km_rows(km);
            // extend each step to the last observed duration
            let last = km.times.last().map_or(0.0, |t| t.as_f64());
            x_max = x_max.max(last);
            if let Some(&(t, s, lo, hi, n)) = rows.last() {
                if t < last {
                    rows.push((last, s, lo, hi, n));
                }
            }
            let mut s = Series::line(name.clone(), rows.iter().map(|r| (r.0, r.1)).collect());
            s.step = true;
            s.band = rows.iter().map(|r| (r.0, r.2, r.3)).collect();
            s
        })
        .collect();
    Plot {
        title: title.into(),
        x_label: "Time (weeks)".into(),
        y_label: "AF-free survival".into(),
        x_range: (0.0, x_max),
        y_range: (0.0, 1.0),
        series,
    }
    .to_svg()
}

/// One covariate row of a Cox table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxRow {
    pub group: String,
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxTable {
    pub model: String,
    pub reference: Option<String>,
    pub ties: super::Ties,
    pub n: usize,
    pub n_events: usize,
    pub loglik: f64,
    pub loglik_null: f64,
    pub converged: bool,
    pub iterations: usize,
    pub notes: Vec<String>,
    pub rows: Vec<CoxRow>,
}

impl CoxTable {
    pub fn new<T: Scalar>(
        model: impl Into<String>,
        reference: Option<String>,
        fit: &CoxFit<T>,
    ) -> Self {
        let rows = (0..fit.beta.len())
            .map(|j| CoxRow {
                group: fit.names[j].clone(),
                beta: fit.beta[j].as_f64(),
                se: fit.se[j].as_f64(),
                hazard_ratio: fit.hazard_ratio[j].as_f64(),
                ci_low: fit.ci_low[j].as_f64(),
                ci_high: fit.ci_high[j].as_f64(),
                p_value: fit.p_value[j].as_f64(),
            })
            .collect();
        Self {
            model: model.into(),
            reference,
            ties: fit.ties,
            n: fit.n,
            n_events: fit.n_events,
            loglik: fit.loglik.as_f64(),
            loglik_null: fit.loglik_null.as_f64(),
            converged: fit.converged,
            iterations: fit.iterations,
            notes: fit.notes.clone(),
            rows,
        }
    }
}
