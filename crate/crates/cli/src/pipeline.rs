//! The eight stages. Each reads its inputs from the run directory and writes
//! its artifacts back; every artifact carries the configuration hash.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use af_horizon_core::cohort::{
    classify_exams, group_by_patient, read_labeled, read_manifest, seeded_key, split_by_patient,
    validate_covariates, write_labeled, write_manifest, ExamClass, LabeledExam, Split,
    SurvivalRecord,
};
use af_horizon_core::ecgsig::generate_cohort;
use af_horizon_core::metrics::report::{
    pr_svg, roc_svg, write_pr_csv, write_roc_csv, MetricValue, MetricsTable,
};
use af_horizon_core::metrics::{
    bootstrap_ci, micro_average_pr, one_vs_rest, pr_ap, renormalize_two_class, roc_auc,
    select_threshold_max_f1, threshold_metrics, MetricsError, ScoredExam,
};
use af_horizon_core::neuralnet::weights::{self, WeightMeta};
use af_horizon_core::neuralnet::{predict, train, ClassProbs, NetError, Network};
use af_horizon_core::survival::report::{km_svg, write_at_risk_csv, write_km_groups_csv, CoxTable};
use af_horizon_core::survival::{
    at_risk_table, cox_fit_data, kaplan_meier, median_survival, ph_test, AtRiskRow, CoxOptions,
    KmCurve, SurvivalError,
};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Format, RiskCovariate, RunConfig};
use crate::sources::{FileSource, StoredExam};
use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Generate,
    Label,
    Split,
    Train,
    Eval,
    Survival,
    Report,
    All,
}

pub const LABELED: &str = "labeled.csv";
pub const SPLITS: &str = "splits.csv";
pub const SCORES: &str = "scores.csv";
pub const METRICS: &str = "metrics.json";
pub const SURVIVAL_RECORDS: &str = "survival_records.csv";
pub const SURVIVAL_SUMMARY: &str = "survival_summary.json";
pub const COX: &str = "cox.json";
pub const PH_TEST: &str = "ph_test.json";
pub const REPORT: &str = "report.md";

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn net_error(e: NetError) -> CliError {
    match e {
        NetError::NonFinite { .. } | NetError::NonFiniteGradient(_) => {
            CliError::Numerical(e.to_string())
        }
        other => validation(other),
    }
}

fn metrics_error(e: MetricsError) -> CliError {
    match e {
        MetricsError::DegenerateProbs => CliError::Numerical(e.to_string()),
        other => validation(other),
    }
}

/// Resolved configuration plus its hash.
pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Self {
        let hash = cfg.hash();
        Self { cfg, hash }
    }

    pub fn provenance(&self) -> String {
        format!("config_hash={} seed={}", self.hash, self.cfg.seed)
    }

    fn format(&self) -> Format {
        self.cfg.report.format
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.out(rel)
    }

    fn require(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact(p))
        }
    }

    fn open(&self, rel: impl AsRef<Path>) -> Result<BufReader<File>> {
        Ok(BufReader::new(File::open(self.require(rel)?)?))
    }

    fn create(&self, rel: impl AsRef<Path>) -> Result<BufWriter<File>> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(BufWriter::new(File::create(p)?))
    }

    fn write_bytes(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let mut w = self.create(rel)?;
        w.write_all(bytes)?;
        w.flush()?;
        Ok(())
    }

    /// Pretty JSON with `config_hash` and `seed` merged into the top level.
    fn write_json<T: Serialize>(&self, rel: &str, body: &T) -> Result<()> {
        let mut v = serde_json::to_value(body).map_err(validation)?;
        if !v.is_object() {
            v = json!({ "data": v });
        }
        let obj = v.as_object_mut().expect("object");
        obj.insert("config_hash".into(), json!(self.hash));
        obj.insert("seed".into(), json!(self.cfg.seed));
        let mut text = serde_json::to_string_pretty(&v).map_err(validation)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    fn write_svg(&self, rel: &str, svg: &str) -> Result<()> {
        let (head, rest) = svg.split_once('\n').unwrap_or((svg, ""));
        let text = format!("{head}\n<!-- {} -->\n{rest}", self.provenance());
        self.write_bytes(rel, text.as_bytes())
    }

    fn csv_writer(&self, rel: &str) -> Result<csv::Writer<BufWriter<File>>> {
        let mut w = self.create(rel)?;
        writeln!(w, "# {}", self.provenance())?;
        Ok(csv::Writer::from_writer(w))
    }

    pub fn read_json(&self, rel: &str) -> Result<Value> {
        serde_json::from_reader(self.open(rel)?).map_err(|e| validation(format!("{rel}: {e}")))
    }
}

fn csv_error(e: csv::Error) -> CliError {
    validation(e)
}

/// Runs one stage (or all of them in order).
pub fn run(stage: Stage, cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let ctx = Ctx::new(cfg);
    info!("config hash {}", ctx.hash);
    match stage {
        Stage::Generate => generate(&ctx),
        Stage::Label => label(&ctx),
        Stage::Split => split(&ctx),
        Stage::Train => train_stage(&ctx),
        Stage::Eval => eval(&ctx),
        Stage::Survival => survival(&ctx),
        Stage::Report => report(&ctx),
        Stage::All => {
            generate(&ctx)?;
            label(&ctx)?;
            split(&ctx)?;
            train_stage(&ctx)?;
            eval(&ctx)?;
            // a numerical failure in survival still leaves its artifacts for the report
            let surv = survival(&ctx);
            if let Err(
                e @ (CliError::MissingArtifact(_) | CliError::Validation(_) | CliError::Io(_)),
            ) = surv
            {
                return Err(e);
            }
            report(&ctx)?;
            surv
        }
    }
}

fn generate(ctx: &Ctx) -> Result<()> {
    let t0 = Instant::now();
    let cohort = generate_cohort(&ctx.cfg.synth).map_err(validation)?;
    let exams: Vec<_> = cohort.exams().cloned().collect();
    let mut w = ctx.create(&ctx.cfg.paths.manifest)?;
    write_manifest(&mut w, &exams, Some(&ctx.provenance())).map_err(validation)?;
    w.flush()?;
    cohort
        .write_waveforms(&ctx.path(&ctx.cfg.paths.waveform_dir))
        .map_err(validation)?;
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for h in &cohort.histories {
        *groups.entry(format!("{:?}", h.group())).or_default() += 1;
    }
    ctx.write_json(
        "cohort_summary.json",
        &json!({ "n_patients": cohort.histories.len(), "n_exams": exams.len(), "patients_by_group": groups }),
    )?;
    info!(
        "generated {} patients, {} exams in {:.1}s",
        cohort.histories.len(),
        exams.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn class_counts<'a>(exams: impl Iterator<Item = &'a LabeledExam>) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for l in exams {
        let key = l
            .label
            .map_or("Excluded".to_string(), |c| c.name().to_string());
        *counts.entry(key).or_default() += 1;
    }
    counts
}

fn label(ctx: &Ctx) -> Result<()> {
    let exams = read_manifest(ctx.open(&ctx.cfg.paths.manifest)?).map_err(validation)?;
    let histories = group_by_patient(exams).map_err(validation)?;
    validate_covariates(
        histories.iter().flat_map(|h| h.exams()),
        ctx.cfg.synth.n_covariates,
    )
    .map_err(validation)?;
    let labeled =
        classify_exams(&histories, ctx.cfg.label.follow_up_threshold_days).map_err(validation)?;
    let mut w = ctx.create(LABELED)?;
    write_labeled(&mut w, &labeled, Some(&ctx.provenance())).map_err(validation)?;
    w.flush()?;
    let in_study = {
        let mut p: Vec<&str> = labeled
            .iter()
            .filter(|l| !l.is_excluded())
            .map(|l| l.exam.patient_id.as_str())
            .collect();
        p.sort_unstable();
        p.dedup();
        p.len()
    };
    ctx.write_json(
        "label_summary.json",
        &json!({ "exams_by_class": class_counts(labeled.iter()), "patients_in_study": in_study }),
    )
}

const SPLITS_IN_ORDER: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

fn split(ctx: &Ctx) -> Result<()> {
    let labeled = read_labeled(ctx.open(LABELED)?).map_err(validation)?;
    let assigned =
        split_by_patient(&labeled, ctx.cfg.split.fractions(), ctx.cfg.seed).map_err(validation)?;
    let mut w = ctx.create(SPLITS)?;
    write_labeled(&mut w, &assigned, Some(&ctx.provenance())).map_err(validation)?;
    w.flush()?;
    let mut summary = BTreeMap::new();
    for s in SPLITS_IN_ORDER {
        let members: Vec<&LabeledExam> = assigned.iter().filter(|l| l.split == s).collect();
        let mut patients: Vec<&str> = members.iter().map(|l| l.exam.patient_id.as_str()).collect();
        patients.sort_unstable();
        patients.dedup();
        summary.insert(s.to_string(), json!({ "patients": patients.len(), "exams_by_class": class_counts(members.into_iter()) }));
    }
    let excluded = assigned.iter().filter(|l| l.is_excluded()).count();
    ctx.write_json(
        "split_summary.json",
        &json!({ "splits": summary, "excluded_exams": excluded }),
    )
}

fn source(ctx: &Ctx, labeled: &[LabeledExam], splits: &[Split]) -> Result<FileSource> {
    let root = ctx.path(&ctx.cfg.paths.waveform_dir);
    let mut exams = Vec::new();
    for l in labeled.iter().filter(|l| splits.contains(&l.split)) {
        let Some(class) = l.label else { continue };
        let path = root.join(&l.exam.signal_path);
        if !path.is_file() {
            return Err(CliError::MissingArtifact(path));
        }
        exams.push(StoredExam {
            exam_id: l.exam.exam_id.clone(),
            path,
            label: class.index(),
        });
    }
    Ok(FileSource { exams })
}

fn train_stage(ctx: &Ctx) -> Result<()> {
    let labeled = read_labeled(ctx.open(SPLITS)?).map_err(validation)?;
    let train_src = source(ctx, &labeled, &[Split::Train])?;
    let val_src = source(ctx, &labeled, &[Split::Validation])?;
    let net = Network::new(ctx.cfg.net.clone()).map_err(net_error)?;
    info!(
        "training on {} exams, validating on {}",
        train_src.exams.len(),
        val_src.exams.len()
    );
    let t0 = Instant::now();
    let outcome = train::<f32, _, _>(&net, &ctx.cfg.train, &train_src, &val_src, &mut |r| {
        info!(
            "epoch {:>2}  train {:.4}  val {:.4}  lr {:.0e}{}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            if r.improved { "  *" } else { "" },
            t0.elapsed().as_secs_f64()
        )
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let err = net_error(e);
            if matches!(err, CliError::Numerical(_)) {
                ctx.write_json(
                    "train_diagnostics.json",
                    &json!({ "error": err.to_string() }),
                )?;
            }
            return Err(err);
        }
    };
    info!("training finished in {:.1}s", t0.elapsed().as_secs_f64());
    let meta = WeightMeta {
        net_config: ctx.cfg.net.clone(),
        train_config: ctx.cfg.train.clone(),
        config_hash: Some(ctx.hash.clone()),
        best_epoch: Some(outcome.best_epoch),
    };
    let model = ctx.path(&ctx.cfg.paths.model);
    if let Some(dir) = model.parent() {
        std::fs::create_dir_all(dir)?;
    }
    weights::save(&model, &outcome.params, &meta).map_err(net_error)?;

    let mut w = ctx.csv_writer("history.csv")?;
    for r in &outcome.history {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    let best = &outcome.history[outcome.best_epoch - 1];
    let last = outcome.history.last().expect("one epoch");
    ctx.write_json(
        "train_summary.json",
        &json!({
            "best_epoch": outcome.best_epoch,
            "best_val_loss": best.val_loss,
            "epochs_run": outcome.history.len(),
            "final_lr": last.lr,
            "n_trainable": outcome.params.n_trainable(),
            "n_train_exams": train_src.exams.len(),
            "n_validation_exams": val_src.exams.len(),
        }),
    )
}

/// One scored exam as written to `scores.csv`.
#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct ScoreRow {
    pub exam_id: String,
    pub patient_id: String,
    pub split: Split,
    pub label: ExamClass,
    pub p_noaf: f64,
    pub p_withaf: f64,
    pub p_futureaf: f64,
    /// FutureAF probability renormalized against NoAF.
    pub risk_prob: f64,
}

pub fn read_scores(ctx: &Ctx) -> Result<Vec<ScoreRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(ctx.open(SCORES)?);
    r.deserialize()
        .collect::<std::result::Result<Vec<ScoreRow>, _>>()
        .map_err(csv_error)
}

/// FutureAF (positive) against NoAF exams.
fn two_class(rows: &[&ScoreRow]) -> Result<Vec<ScoredExam>> {
    rows.iter()
        .filter(|r| matches!(r.label, ExamClass::NoAF | ExamClass::FutureAF))
        .map(|r| {
            ScoredExam::new(
                r.exam_id.clone(),
                r.label == ExamClass::FutureAF,
                r.risk_prob,
            )
            .map_err(metrics_error)
        })
        .collect()
}

fn eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let labeled = read_labeled(ctx.open(SPLITS)?).map_err(validation)?;
    let model = ctx.require(&cfg.paths.model)?;
    let (params, meta) = weights::load(&model).map_err(validation)?;
    if meta.net_config != cfg.net {
        return Err(validation(format!(
            "{} was trained with a different network configuration",
            model.display()
        )));
    }
    let net = Network::new(meta.net_config).map_err(net_error)?;
    net.check_params(&params).map_err(net_error)?;

    let mut splits = vec![
        cfg.eval.threshold_split,
        cfg.eval.report_split,
        cfg.survival.split,
    ];
    splits.sort();
    splits.dedup();
    let src = source(ctx, &labeled, &splits)?;
    let probs = predict(&net, &params, &src, cfg.eval.batch_size).map_err(net_error)?;
    let by_id: HashMap<&str, &LabeledExam> = labeled
        .iter()
        .map(|l| (l.exam.exam_id.as_str(), l))
        .collect();
    let mut rows = Vec::with_capacity(probs.len());
    for (e, p) in src.exams.iter().zip(&probs) {
        let l = by_id[e.exam_id.as_str()];
        rows.push(ScoreRow {
            exam_id: e.exam_id.clone(),
            patient_id: l.exam.patient_id.clone(),
            split: l.split,
            label: l.label.expect("labeled"),
            p_noaf: p.p_noaf,
            p_withaf: p.p_withaf,
            p_futureaf: p.p_futureaf,
            risk_prob: renormalize_two_class(p).map_err(metrics_error)?,
        });
    }
    let mut w = ctx.csv_writer(SCORES)?;
    for r in &rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;

    let in_split = |s: Split| -> Vec<&ScoreRow> { rows.iter().filter(|r| r.split == s).collect() };
    let mut by_split = BTreeMap::new();
    for &s in &splits {
        let scored = two_class(&in_split(s))?;
        let roc = roc_auc(&scored).map_err(metrics_error)?;
        let pr = pr_ap(&scored).map_err(metrics_error)?;
        by_split.insert(s.to_string(), json!({ "auc": roc.auc, "ap": pr.ap, "positives": roc.positives, "negatives": roc.negatives }));
    }

    let threshold = select_threshold_max_f1(&two_class(&in_split(cfg.eval.threshold_split))?)
        .map_err(metrics_error)?;
    let report_rows = in_split(cfg.eval.report_split);
    let rep = two_class(&report_rows)?;
    let roc = roc_auc(&rep).map_err(metrics_error)?;
    let pr = pr_ap(&rep).map_err(metrics_error)?;
    let tm = threshold_metrics(&rep, threshold).map_err(metrics_error)?;

    type MetricFn = fn(&[ScoredExam], f64) -> std::result::Result<f64, MetricsError>;
    let defs: [(&str, MetricFn); 6] = [
        ("auc", |s, _| roc_auc(s).map(|r| r.auc)),
        ("ap", |s, _| pr_ap(s).map(|r| r.ap)),
        ("sensitivity", |s, t| {
            threshold_metrics(s, t).map(|m| m.sensitivity)
        }),
        ("ppv", |s, t| threshold_metrics(s, t).map(|m| m.ppv)),
        ("specificity", |s, t| {
            threshold_metrics(s, t).map(|m| m.specificity)
        }),
        ("f1", |s, t| threshold_metrics(s, t).map(|m| m.f1)),
    ];
    let mut table = MetricsTable::new();
    for (name, f) in defs {
        let seed = seeded_key(cfg.seed, &format!("bootstrap-{name}"));
        let ci = bootstrap_ci(
            &rep,
            |s| f(s, threshold),
            cfg.eval.bootstrap_replicates,
            cfg.eval.ci_level,
            seed,
        )
        .map_err(metrics_error)?;
        table.insert(name.to_string(), MetricValue::from(ci));
    }

    // three-class view of the report split
    let ids: Vec<String> = report_rows.iter().map(|r| r.exam_id.clone()).collect();
    let cprobs: Vec<ClassProbs> = report_rows
        .iter()
        .map(|r| ClassProbs {
            p_noaf: r.p_noaf,
            p_withaf: r.p_withaf,
            p_futureaf: r.p_futureaf,
        })
        .collect();
    let labels: Vec<usize> = report_rows.iter().map(|r| r.label.index()).collect();
    let mut ovr = BTreeMap::new();
    let mut ovr_curves = Vec::new();
    for c in ExamClass::ALL {
        let scored = one_vs_rest(&ids, &cprobs, &labels, c.index());
        match (roc_auc(&scored), pr_ap(&scored)) {
            (Ok(r), Ok(p)) => {
                ovr.insert(c.name().to_string(), json!({ "auc": r.auc, "ap": p.ap }));
                ovr_curves.push((c.name(), r, p));
            }
            (Err(e), _) | (_, Err(e)) => {
                ovr.insert(c.name().to_string(), json!({ "error": e.to_string() }));
            }
        }
    }
    let micro = micro_average_pr(&cprobs, &labels).map_err(metrics_error)?;
    let mut confusion = [[0usize; 3]; 3];
    for (p, &y) in cprobs.iter().zip(&labels) {
        let a = p.as_array();
        let pred = (0..3).fold(0, |b, k| if a[k] > a[b] { k } else { b });
        confusion[y][pred] += 1;
    }

    ctx.write_json(
        METRICS,
        &json!({
            "two_class": {
                "positive": "FutureAF",
                "negative": "NoAF",
                "threshold": threshold,
                "threshold_split": cfg.eval.threshold_split,
                "report_split": cfg.eval.report_split,
                "by_split": by_split,
                "report": table,
                "counts": { "tp": tm.tp, "fp": tm.fp, "tn": tm.tn, "fn": tm.fn_ },
                "bootstrap_replicates": cfg.eval.bootstrap_replicates,
                "ci_level": cfg.eval.ci_level,
            },
            "three_class": {
                "one_vs_rest": ovr,
                "micro_average_ap": micro.ap,
                "confusion": { "classes": ExamClass::ALL.map(|c| c.name()), "rows_true_cols_predicted": confusion },
            },
        }),
    )?;

    let fmt = ctx.format();
    if fmt.csv() {
        let mut w = ctx.create("roc.csv")?;
        write_roc_csv(&mut w, &roc, Some(&ctx.provenance()))?;
        w.flush()?;
        let mut w = ctx.create("pr.csv")?;
        write_pr_csv(&mut w, &pr, Some(&ctx.provenance()))?;
        w.flush()?;
        let mut w = ctx.csv_writer("confusion.csv")?;
        w.write_record(["true_class", "pred_NoAF", "pred_WithAF", "pred_FutureAF"])
            .map_err(csv_error)?;
        for c in ExamClass::ALL {
            let row = confusion[c.index()];
            w.write_record([
                c.name().to_string(),
                row[0].to_string(),
                row[1].to_string(),
                row[2].to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    if fmt.svg() {
        let mut rocs = vec![("FutureAF vs NoAF", &roc)];
        rocs.extend(ovr_curves.iter().map(|(n, r, _)| (*n, r)));
        ctx.write_svg("roc.svg", &roc_svg("ROC", &rocs))?;
        let mut prs = vec![("FutureAF vs NoAF", &pr)];
        prs.extend(ovr_curves.iter().map(|(n, _, p)| (*n, p)));
        ctx.write_svg("pr.svg", &pr_svg("Precision-recall", &prs))?;
    }
    info!(
        "{} two-class AUC {:.4}, AP {:.4}",
        cfg.eval.report_split, roc.auc, pr.ap
    );
    Ok(())
}

#[derive(Serialize)]
struct BinSummary {
    group: String,
    n: usize,
    events: usize,
    /// `None` when the curve never reaches 0.5.
    median_weeks: Option<f64>,
    at_risk: Vec<AtRiskRow>,
}

fn survival_error(e: SurvivalError) -> CliError {
    match e {
        SurvivalError::Collinear(_)
        | SurvivalError::NotConverged(_)
        | SurvivalError::NoCovariates
        | SurvivalError::NoEvents => CliError::Numerical(e.to_string()),
        other => validation(other),
    }
}

fn survival(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let labeled = read_labeled(ctx.open(SPLITS)?).map_err(validation)?;
    let scores = read_scores(ctx)?;
    let probs: HashMap<String, f64> = scores
        .iter()
        .filter(|r| r.split == cfg.survival.split)
        .map(|r| (r.exam_id.clone(), r.risk_prob))
        .collect();
    let records =
        af_horizon_core::cohort::build_survival_records(&labeled, &probs, Some(cfg.survival.split))
            .map_err(validation)?;
    if records.is_empty() {
        return Err(validation(format!(
            "no survival records in the {} split",
            cfg.survival.split
        )));
    }
    let bins = cfg.survival.bins();
    let assigned: Vec<usize> = records
        .iter()
        .map(|r| bins.assign(r.risk_prob))
        .collect::<std::result::Result<_, _>>()
        .map_err(validation)?;

    let n_cov = cfg.synth.n_covariates;
    let mut w = ctx.csv_writer(SURVIVAL_RECORDS)?;
    let mut header: Vec<String> = [
        "exam_id",
        "patient_id",
        "duration_weeks",
        "event",
        "risk_prob",
        "risk_group",
        "age",
        "sex_male",
    ]
    .map(String::from)
    .to_vec();
    header.extend((0..n_cov).map(|i| format!("cov_{i}")));
    w.write_record(&header).map_err(csv_error)?;
    for (r, &b) in records.iter().zip(&assigned) {
        let mut row = vec![
            r.exam_id.clone(),
            r.patient_id.clone(),
            r.duration_weeks.to_string(),
            u8::from(r.event).to_string(),
            r.risk_prob.to_string(),
            bins.label(b),
            r.age.to_string(),
            u8::from(r.sex_male).to_string(),
        ];
        row.extend(r.covariates.iter().map(|&c| u8::from(c).to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;

    let mut curves: Vec<(String, KmCurve)> = Vec::new();
    let mut tables = Vec::new();
    let mut summaries = Vec::new();
    let (interval, horizon) = (
        cfg.survival.at_risk_interval_weeks,
        cfg.survival.horizon_weeks,
    );
    let mut groups: Vec<(String, Vec<SurvivalRecord>)> = (0..bins.n_bins())
        .map(|b| {
            (
                bins.label(b),
                records
                    .iter()
                    .zip(&assigned)
                    .filter(|(_, &a)| a == b)
                    .map(|(r, _)| r.clone())
                    .collect(),
            )
        })
        .collect();
    groups.push(("all".into(), records.clone()));
    for (name, members) in &groups {
        let events = members.iter().filter(|r| r.event).count();
        let at_risk = at_risk_table(members, interval, horizon).map_err(validation)?;
        let median = match kaplan_meier(members) {
            Ok(km) => {
                let m = median_survival(&km);
                curves.push((name.clone(), km));
                m.is_finite().then_some(m)
            }
            Err(SurvivalError::Empty | SurvivalError::AllZero) => None,
            Err(e) => return Err(validation(e)),
        };
        tables.push((name.clone(), at_risk.clone()));
        summaries.push(BinSummary {
            group: name.clone(),
            n: members.len(),
            events,
            median_weeks: median,
            at_risk,
        });
    }
    ctx.write_json(
        SURVIVAL_SUMMARY,
        &json!({
            "split": cfg.survival.split,
            "risk_bin_edges": bins.edges,
            "at_risk_interval_weeks": interval,
            "groups": summaries,
        }),
    )?;
    let fmt = ctx.format();
    if fmt.csv() {
        let mut w = ctx.create("km.csv")?;
        write_km_groups_csv(&mut w, &curves, Some(&ctx.provenance()))?;
        w.flush()?;
        let mut w = ctx.create("at_risk.csv")?;
        write_at_risk_csv(&mut w, &tables, Some(&ctx.provenance()))?;
        w.flush()?;
    }
    if fmt.svg() {
        let by_bin: Vec<(String, KmCurve)> =
            curves.iter().filter(|(n, _)| n != "all").cloned().collect();
        ctx.write_svg("km.svg", &km_svg("AF-free survival by risk group", &by_bin))?;
    }

    let opts = CoxOptions {
        ties: cfg.survival.ties,
        ..CoxOptions::default()
    };
    let mut cox_models = Vec::new();
    let mut ph_models = Vec::new();
    let mut failures = Vec::new();
    for m in &cfg.survival.models {
        let spec = m.spec(&bins, n_cov);
        let reference = (m.risk == RiskCovariate::Groups).then(|| bins.label(0));
        let fitted = spec
            .design(&records)
            .and_then(|d| cox_fit_data(&d, &opts).map(|f| (d, f)));
        match fitted {
            Ok((data, fit)) => {
                if !fit.converged {
                    failures.push(format!(
                        "model `{}` did not converge after {} iterations: {}",
                        m.name,
                        fit.iterations,
                        fit.notes.last().map_or("", String::as_str)
                    ));
                }
                let ph = match ph_test(&fit, &data) {
                    Ok(r) => json!({ "model": m.name, "result": r }),
                    Err(e) => json!({ "model": m.name, "error": e.to_string() }),
                };
                ph_models.push(ph);
                cox_models.push(
                    serde_json::to_value(CoxTable::new(m.name.clone(), reference, &fit))
                        .map_err(validation)?,
                );
            }
            Err(e) => {
                if let CliError::Numerical(msg) = survival_error(e.clone()) {
                    failures.push(format!("model `{}`: {msg}", m.name));
                } else {
                    return Err(validation(format!("model `{}`: {e}", m.name)));
                }
                cox_models.push(json!({ "model": m.name, "error": e.to_string() }));
                ph_models.push(json!({ "model": m.name, "error": "no fit" }));
            }
        }
    }
    ctx.write_json(
        COX,
        &json!({ "split": cfg.survival.split, "models": cox_models }),
    )?;
    ctx.write_json(
        PH_TEST,
        &json!({ "time_transform": "rank", "models": ph_models }),
    )?;
    ctx.write_json(
        "survival_diagnostics.json",
        &json!({ "failures": failures }),
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failures.join("; ")))
    }
}

fn report(ctx: &Ctx) -> Result<()> {
    let text = crate::report::render(
        ctx,
        &chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
    )?;
    ctx.write_bytes(REPORT, text.as_bytes())
}
