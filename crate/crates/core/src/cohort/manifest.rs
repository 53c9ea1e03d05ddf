//! Exam manifest CSV: `exam_id,patient_id,exam_day,af_flag,age,sex,cov_0..cov_N,signal_path`,
//! with `label,split` appended for labeled manifests. Lines starting with `#`
//! are comments.

use std::io::{Read, Write};

use super::{CohortError, ExamClass, ExamRecord, LabeledExam, Result, Split};

fn header(n_cov: usize, labeled: bool) -> Vec<String> {
    let mut h: Vec<String> = ["exam_id", "patient_id", "exam_day", "af_flag", "age", "sex"]
        .map(String::from)
        .to_vec();
    h.extend((0..n_cov).map(|i| format!("cov_{i}")));
    h.push("signal_path".into());
    if labeled {
        h.push("label".into());
        h.push("split".into());
    }
    h
}

fn exam_fields(e: &ExamRecord) -> Vec<String> {
    let mut f = vec![
        e.exam_id.clone(),
        e.patient_id.clone(),
        e.exam_day.to_string(),
        u8::from(e.af_flag).to_string(),
        format!("{:.1}", e.age),
        e.sex.to_string(),
    ];
    f.extend(e.covariates.iter().map(|&c| u8::from(c).to_string()));
    f.push(e.signal_path.clone());
    f
}

fn write_rows<W: Write>(
    mut w: W,
    comment: Option<&str>,
    n_cov: usize,
    labeled: bool,
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header(n_cov, labeled))?;
    for r in rows {
        out.write_record(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_manifest<W: Write>(w: W, exams: &[ExamRecord], comment: Option<&str>) -> Result<()> {
    let n_cov = exams
        .first()
        .map_or(super::DEFAULT_COVARIATES, |e| e.covariates.len());
    super::validate_covariates(exams, n_cov)?;
    write_rows(w, comment, n_cov, false, exams.iter().map(exam_fields))
}

pub fn write_labeled<W: Write>(w: W, exams: &[LabeledExam], comment: Option<&str>) -> Result<()> {
    let n_cov = exams
        .first()
        .map_or(super::DEFAULT_COVARIATES, |e| e.exam.covariates.len());
    super::validate_covariates(exams.iter().map(|l| &l.exam), n_cov)?;
    write_rows(
        w,
        comment,
        n_cov,
        true,
        exams.iter().map(|l| {
            let mut f = exam_fields(&l.exam);
            f.push(
                l.label
                    .map_or_else(|| "Excluded".to_string(), |c| c.to_string()),
            );
            f.push(l.split.to_string());
            f
        }),
    )
}

struct Columns {
    n_cov: usize,
    labeled: bool,
}

fn parse_header(h: &csv::StringRecord) -> Result<Columns> {
    let bad = |reason: String| CohortError::Parse { line: 1, reason };
    let fields: Vec<&str> = h.iter().collect();
    let n_cov = fields.iter().filter(|f| f.starts_with("cov_")).count();
    let labeled = fields.last() == Some(&"split");
    let expected = header(n_cov, labeled);
    if fields != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(bad(format!("unexpected header {fields:?}")));
    }
    Ok(Columns { n_cov, labeled })
}

fn parse_exam(rec: &csv::StringRecord, cols: &Columns, line: usize) -> Result<ExamRecord> {
    let bad = |reason: String| CohortError::Parse { line, reason };
    let get = |i: usize| rec.get(i).ok_or_else(|| bad(format!("missing column {i}")));
    let flag = |s: &str| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(bad(format!("expected 0/1, found `{other}`"))),
    };
    let covariates = (0..cols.n_cov)
        .map(|i| flag(get(6 + i)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExamRecord {
        exam_id: get(0)?.to_string(),
        patient_id: get(1)?.to_string(),
        exam_day: get(2)?.parse().map_err(|e| bad(format!("exam_day: {e}")))?,
        af_flag: flag(get(3)?)?,
        age: get(4)?.parse().map_err(|e| bad(format!("age: {e}")))?,
        sex: get(5)?.parse().map_err(bad)?,
        covariates,
        signal_path: get(6 + cols.n_cov)?.to_string(),
    })
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r)
}

pub fn read_manifest<R: Read>(r: R) -> Result<Vec<ExamRecord>> {
    let mut rdr = reader(r);
    let cols = parse_header(rdr.headers()?)?;
    rdr.records()
        .enumerate()
        .map(|(i, rec)| parse_exam(&rec?, &cols, i + 2))
        .collect()
}

pub fn read_labeled<R: Read>(r: R) -> Result<Vec<LabeledExam>> {
    let mut rdr = reader(r);
    let cols = parse_header(rdr.headers()?)?;
    if !cols.labeled {
        return Err(CohortError::Parse {
            line: 1,
            reason: "missing label/split columns".into(),
        });
    }
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let line = i + 2;
            let exam = parse_exam(&rec, &cols, line)?;
            let bad = |reason: String| CohortError::Parse { line, reason };
            let label_col = 7 + cols.n_cov;
            let label = match rec.get(label_col) {
                Some("Excluded") => None,
                Some(s) => Some(s.parse::<ExamClass>().map_err(bad)?),
                None => return Err(bad("missing label".into())),
            };
            let split: Split = rec
                .get(label_col + 1)
                .ok_or_else(|| bad("missing split".into()))?
                .parse()
                .map_err(bad)?;
            Ok(LabeledExam { exam, label, split })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{classify_exams, group_by_patient, Sex};
    use super::*;

    fn sample() -> Vec<ExamRecord> {
        (0..4)
            .map(|i| ExamRecord {
                exam_id: format!("e{i}"),
                patient_id: format!("p{}", i / 2),
                exam_day: 10 * i as i64,
                af_flag: i == 3,
                age: 40.5 + i as f64,
                sex: if i % 2 == 0 { Sex::Male } else { Sex::Female },
                covariates: (0..16).map(|c| (c + i) % 3 == 0).collect(),
                signal_path: format!("waveforms/e{i}.afw"),
            })
            .collect()
    }

    #[test]
    fn manifest_round_trip() {
        let exams = sample();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &exams, Some("config_hash=abc")).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .starts_with("# config_hash=abc\nexam_id,patient_id,exam_day,af_flag,age,sex,cov_0,"));
        assert!(text.lines().nth(1).unwrap().ends_with("cov_15,signal_path"));
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), exams);
    }

    #[test]
    fn labeled_round_trip() {
        let hist = group_by_patient(sample()).unwrap();
        let labeled = classify_exams(&hist, 7).unwrap();
        let mut buf = Vec::new();
        write_labeled(&mut buf, &labeled, None).unwrap();
        assert_eq!(read_labeled(buf.as_slice()).unwrap(), labeled);
    }

    #[test]
    fn bad_flag_reports_line() {
        let text = "exam_id,patient_id,exam_day,af_flag,age,sex,signal_path\ne,p,0,2,1.0,M,x\n";
        let err = read_manifest(text.as_bytes()).unwrap_err();
        assert!(matches!(err, CohortError::Parse { line: 2, .. }), "{err}");
    }
}
