//! CSV, JSON and SVG renderings of metric results.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{BootstrapCi, PrCurve, RocCurve};
use crate::plot::{Plot, Series};

fn comment_line<W: Write>(w: &mut W, comment: Option<&str>) -> io::Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    Ok(())
}

pub fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        t.to_string()
    }
}

pub fn write_roc_csv<W: Write>(mut w: W, roc: &RocCurve, comment: Option<&str>) -> io::Result<()> {
    comment_line(&mut w, comment)?;
    writeln!(w, "threshold,fpr,tpr")?;
    for p in &roc.points {
        writeln!(w, "{},{},{}", fmt_threshold(p.threshold), p.fpr, p.tpr)?;
    }
    Ok(())
}

pub fn write_pr_csv<W: Write>(mut w: W, pr: &PrCurve, comment: Option<&str>) -> io::Result<()> {
    comment_line(&mut w, comment)?;
    writeln!(w, "threshold,recall,precision")?;
    for p in &pr.points {
        writeln!(
            w,
            "{},{},{}",
            fmt_threshold(p.threshold),
            p.recall,
            p.precision
        )?;
    }
    Ok(())
}

pub fn roc_svg(title: &str, curves: &[(&str, &RocCurve)]) -> String {
    let mut series: Vec<Series> = curves
        .iter()
        .map(|(name, c)| {
            Series::line(
                format!("{name} (AUC {:.3})", c.auc),
                c.points.iter().map(|p| (p.fpr, p.tpr)).collect(),
            )
        })
        .collect();
    let mut chance = Series::line("chance", vec![(0.0, 0.0), (1.0, 1.0)]);
    chance.dashed = true;
    series.push(chance);
    Plot {
        title: title.into(),
        x_label: "False positive rate".into(),
        y_label: "True positive rate".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series,
    }
    .to_svg()
}

pub fn pr_svg(title: &str, curves: &[(&str, &PrCurve)]) -> String {
    let series = curves
        .iter()
        .map(|(name, c)| {
            let mut pts = vec![(0.0, c.points.first().map_or(1.0, |p| p.precision))];
            pts.extend(c.points.iter().map(|p| (p.recall, p.precision)));
            let mut s = Series::line(format!("{name} (AP {:.3})", c.ap), pts);
            s.step = true;
            s
        })
        .collect();
    Plot {
        title: title.into(),
        x_label: "Recall".into(),
        y_label: "Precision".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series,
    }
    .to_svg()
}

/// Point estimate with an optional bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub point: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
}

impl MetricValue {
    pub fn point(v: f64) -> Self {
        Self {
            point: v,
            ci_low: None,
            ci_high: None,
            half_width: None,
        }
    }
}

impl From<BootstrapCi> for MetricValue {
    fn from(ci: BootstrapCi) -> Self {
        Self {
            point: ci.point,
            ci_low: Some(ci.low),
            ci_high: Some(ci.high),
            half_width: Some(ci.half_width),
        }
    }
}

/// Metrics keyed by name; ordered for stable output.
pub type MetricsTable = BTreeMap<String, MetricValue>;
