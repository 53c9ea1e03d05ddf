//! Markdown summary assembled only from the run's JSON artifacts.

use std::fmt::Write as _;

use serde_json::Value;

use crate::pipeline::{Ctx, COX, METRICS, PH_TEST, SURVIVAL_SUMMARY};
use crate::Result;

fn num(v: &Value, digits: usize) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:.digits$}"),
        None => "n/a".into(),
    }
}

fn pval(v: &Value) -> String {
    match v.as_f64() {
        Some(p) if p < 1e-4 => format!("{p:.1e}"),
        Some(p) => format!("{p:.4}"),
        None => "n/a".into(),
    }
}

fn counts_line(v: &Value) -> String {
    v.as_object()
        .map(|m| {
            m.iter()
                .map(|(k, n)| format!("{k} {n}"))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .unwrap_or_default()
}

/// Renders `report.md`. `timestamp` appears only in the header.
pub fn render(ctx: &Ctx, timestamp: &str) -> Result<String> {
    let cohort = ctx.read_json("cohort_summary.json")?;
    let labels = ctx.read_json("label_summary.json")?;
    let splits = ctx.read_json("split_summary.json")?;
    let train = ctx.read_json("train_summary.json")?;
    let metrics = ctx.read_json(METRICS)?;
    let surv = ctx.read_json(SURVIVAL_SUMMARY)?;
    let cox = ctx.read_json(COX)?;
    let ph = ctx.read_json(PH_TEST)?;

    let mut s = String::new();
    let _ = writeln!(s, "# AF risk pipeline report\n");
    let _ = writeln!(
        s,
        "Generated {timestamp}. Config hash `{}`, seed {}.\n",
        ctx.hash, ctx.cfg.seed
    );

    let _ = writeln!(s, "## Cohort\n");
    let _ = writeln!(
        s,
        "Source: `cohort_summary.json`, `label_summary.json`, `split_summary.json`.\n"
    );
    let _ = writeln!(
        s,
        "- Patients: {}; exams: {}",
        cohort["n_patients"], cohort["n_exams"]
    );
    let _ = writeln!(
        s,
        "- Patients by group: {}",
        counts_line(&cohort["patients_by_group"])
    );
    let _ = writeln!(
        s,
        "- Exams by class: {}",
        counts_line(&labels["exams_by_class"])
    );
    let _ = writeln!(s, "\n| Split | Patients | Exams by class |\n|---|---|---|");
    if let Some(m) = splits["splits"].as_object() {
        for (name, v) in m {
            let _ = writeln!(
                s,
                "| {name} | {} | {} |",
                v["patients"],
                counts_line(&v["exams_by_class"])
            );
        }
    }

    let _ = writeln!(s, "\n## Training\n");
    let _ = writeln!(s, "Source: `train_summary.json`, `history.csv`.\n");
    let _ = writeln!(
        s,
        "- Trainable parameters: {}\n- Epochs run: {}; best epoch: {}; best validation loss: {}\n- Final learning rate: {}",
        train["n_trainable"],
        train["epochs_run"],
        train["best_epoch"],
        num(&train["best_val_loss"], 4),
        train["final_lr"]
    );

    let two = &metrics["two_class"];
    let _ = writeln!(s, "\n## Classification\n");
    let _ = writeln!(s, "Source: `metrics.json`. FutureAF against NoAF, probabilities renormalized over the two classes.\n");
    if let Some(m) = two["by_split"].as_object() {
        let _ = writeln!(
            s,
            "| Split | AUC | AP | FutureAF | NoAF |\n|---|---|---|---|---|"
        );
        for (name, v) in m {
            let _ = writeln!(
                s,
                "| {name} | {} | {} | {} | {} |",
                num(&v["auc"], 4),
                num(&v["ap"], 4),
                v["positives"],
                v["negatives"]
            );
        }
    }
    let _ = writeln!(
        s,
        "\nThreshold {} (max F1 on {}). Metrics on {} with {} bootstrap replicates, {}% intervals:\n",
        num(&two["threshold"], 4),
        two["threshold_split"].as_str().unwrap_or("?"),
        two["report_split"].as_str().unwrap_or("?"),
        two["bootstrap_replicates"],
        two["ci_level"].as_f64().map_or("?".into(), |l| format!("{}", l * 100.0))
    );
    let _ = writeln!(
        s,
        "| Metric | Value | CI low | CI high |\n|---|---|---|---|"
    );
    for name in ["auc", "ap", "sensitivity", "ppv", "specificity", "f1"] {
        let v = &two["report"][name];
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} |",
            num(&v["point"], 3),
            num(&v["ci_low"], 3),
            num(&v["ci_high"], 3)
        );
    }
    let three = &metrics["three_class"];
    if let Some(m) = three["one_vs_rest"].as_object() {
        let _ = writeln!(
            s,
            "\nOne-vs-rest (three-class):\n\n| Class | AUC | AP |\n|---|---|---|"
        );
        for (name, v) in m {
            let _ = writeln!(
                s,
                "| {name} | {} | {} |",
                num(&v["auc"], 4),
                num(&v["ap"], 4)
            );
        }
        let _ = writeln!(
            s,
            "\nMicro-average AP: {}",
            num(&three["micro_average_ap"], 4)
        );
    }

    let _ = writeln!(s, "\n## Survival\n");
    let _ = writeln!(
        s,
        "Source: `{SURVIVAL_SUMMARY}`, `{COX}`, `{PH_TEST}`. Split: {}.\n",
        surv["split"].as_str().unwrap_or("?")
    );
    let _ = writeln!(s, "### Kaplan-Meier median time to AF\n");
    let _ = writeln!(
        s,
        "| Risk group | Exams | Events | Median (weeks) |\n|---|---|---|---|"
    );
    let groups = surv["groups"].as_array().cloned().unwrap_or_default();
    for g in &groups {
        let median = if g["median_weeks"].is_null() {
            "not reached".to_string()
        } else {
            num(&g["median_weeks"], 1)
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {median} |",
            g["group"].as_str().unwrap_or("?"),
            g["n"],
            g["events"]
        );
    }
    let _ = writeln!(
        s,
        "\n### At risk (interval start, at risk / censored / events)\n"
    );
    for g in &groups {
        let cells: Vec<String> = g["at_risk"]
            .as_array()
            .map(|rows| {
                rows.iter()
                    .map(|r| {
                        format!(
                            "{}w: {}/{}/{}",
                            r["start"], r["at_risk"], r["censored"], r["events"]
                        )
                    })
                    .collect()
            })
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "- {}: {}",
            g["group"].as_str().unwrap_or("?"),
            cells.join(", ")
        );
    }

    let _ = writeln!(s, "\n### Cox proportional hazards\n");
    for m in cox["models"].as_array().cloned().unwrap_or_default() {
        if let Some(err) = m["error"].as_str() {
            let _ = writeln!(
                s,
                "**{}**: fit failed ({err}).\n",
                m["model"].as_str().unwrap_or("?")
            );
            continue;
        }
        let _ = writeln!(
            s,
            "**{}** ({} exams, {} events, {} ties, converged: {}, reference: {}):\n",
            m["model"].as_str().unwrap_or("?"),
            m["n"],
            m["n_events"],
            m["ties"].as_str().unwrap_or("?"),
            m["converged"],
            m["reference"].as_str().unwrap_or("none")
        );
        let converged = m["converged"].as_bool().unwrap_or(false);
        if !converged {
            let _ = writeln!(s, "Not converged: the estimates below are not usable.\n");
        }
        let _ = writeln!(
            s,
            "| Covariate | HR | CI low | CI high | p |\n|---|---|---|---|---|"
        );
        for r in m["rows"].as_array().cloned().unwrap_or_default() {
            let diverging = !converged && r["beta"].as_f64().is_some_and(|b| b.abs() > 20.0);
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r["group"].as_str().unwrap_or("?"),
                if diverging { "diverging".to_string() } else { num(&r["hazard_ratio"], 3) },
                num(&r["ci_low"], 3),
                num(&r["ci_high"], 3),
                pval(&r["p_value"])
            );
        }
        for n in m["notes"].as_array().cloned().unwrap_or_default() {
            let _ = writeln!(s, "\n_Note: {}_", n.as_str().unwrap_or(""));
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "### Proportional-hazards test (rank time)\n");
    for m in ph["models"].as_array().cloned().unwrap_or_default() {
        let name = m["model"].as_str().unwrap_or("?");
        if let Some(err) = m["error"].as_str() {
            let _ = writeln!(s, "- {name}: not computed ({err})");
            continue;
        }
        let cells: Vec<String> = m["result"]["covariates"]
            .as_array()
            .map(|cs| {
                cs.iter()
                    .map(|c| {
                        format!(
                            "{} χ²={} p={}",
                            c["name"].as_str().unwrap_or("?"),
                            num(&c["statistic"], 2),
                            pval(&c["p_value"])
                        )
                    })
                    .collect()
            })
            .unwrap_or_default();
        let _ = writeln!(s, "- {name}: {}", cells.join("; "));
    }
    Ok(s)
}
