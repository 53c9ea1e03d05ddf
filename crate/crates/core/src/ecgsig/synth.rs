//! Synthetic 12-lead ECG cohort.
//!
//! Beats are sums of Gaussian bumps (P, Q, R, S, T) projected onto the leads
//! with per-patient gains. Pre-AF exams get an attenuated P wave and a little
//! extra RR variability; AF exams drop the P wave, add fibrillatory waves and
//! strongly irregular RR intervals. Every exam's waveform is a pure function of
//! its [`WaveformSpec`], so waveforms can be rendered lazily.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Weibull};
use serde::{Deserialize, Serialize};

use super::{wavefile, EcgWaveform, Result, SignalError, N_LEADS};
use crate::cohort::{seeded_key, ExamRecord, PatientHistory, Sex};

/// Target shares of labeled exams per class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassShares {
    pub noaf: f64,
    pub withaf: f64,
    pub futureaf: f64,
}

impl Default for ClassShares {
    fn default() -> Self {
        Self {
            noaf: 0.92,
            withaf: 0.06,
            futureaf: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub class_shares: ClassShares,
    pub heart_rate_bpm: [f64; 2],
    /// Multiplier applied to the P-wave amplitude of pre-AF exams.
    pub p_wave_attenuation: f64,
    /// Extra RR coefficient of variation on pre-AF exams.
    pub pre_af_rr_jitter: f64,
    /// RR coefficient of variation during AF.
    pub af_rr_jitter: f64,
    /// RR coefficient of variation in sinus rhythm.
    pub sinus_rr_jitter: f64,
    pub noise_amplitude_mv: f64,
    pub f_wave_amplitude_mv: f64,
    pub event_weibull_shape: f64,
    pub event_weibull_scale_weeks: f64,
    pub censoring_horizon_weeks: f64,
    pub n_covariates: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 5000,
            class_shares: ClassShares::default(),
            heart_rate_bpm: [55.0, 95.0],
            p_wave_attenuation: 0.5,
            pre_af_rr_jitter: 0.04,
            af_rr_jitter: 0.25,
            sinus_rr_jitter: 0.02,
            noise_amplitude_mv: 0.03,
            f_wave_amplitude_mv: 0.04,
            event_weibull_shape: 1.1,
            event_weibull_scale_weeks: 120.0,
            censoring_horizon_weeks: 400.0,
            n_covariates: crate::cohort::DEFAULT_COVARIATES,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SignalError::Config(m));
        let s = self.class_shares;
        let shares = [s.noaf, s.withaf, s.futureaf];
        if shares.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad(format!("negative class share in {shares:?}"));
        }
        let sum: f64 = shares.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class shares sum to {sum}, not 1"));
        }
        // every future-AF patient also contributes one WithAF exam per two FutureAF exams
        if s.withaf + 1e-12 < s.futureaf / 2.0 {
            return bad("withaf share must be at least half the futureaf share".into());
        }
        let [lo, hi] = self.heart_rate_bpm;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("heart rate range {lo}..{hi}"));
        }
        for (name, v) in [
            ("p_wave_attenuation", self.p_wave_attenuation),
            ("event_weibull_shape", self.event_weibull_shape),
            ("event_weibull_scale_weeks", self.event_weibull_scale_weeks),
            ("censoring_horizon_weeks", self.censoring_horizon_weeks),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("pre_af_rr_jitter", self.pre_af_rr_jitter),
            ("af_rr_jitter", self.af_rr_jitter),
            ("sinus_rr_jitter", self.sinus_rr_jitter),
            ("noise_amplitude_mv", self.noise_amplitude_mv),
            ("f_wave_amplitude_mv", self.f_wave_amplitude_mv),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.censoring_horizon_weeks < 8.0 {
            return bad("censoring horizon shorter than 8 weeks".into());
        }
        Ok(())
    }

    /// Patients per group `[no-AF, baseline-AF, future-AF]` chosen so the
    /// expected labeled-exam shares match the configuration.
    pub fn group_counts(&self) -> [usize; 3] {
        let s = self.class_shares;
        // expected labeled exams per patient: no-AF 3 (2..=6 visits, last dropped),
        // baseline-AF 1.5 WithAF, future-AF 2 FutureAF + 1 WithAF
        let base_share = (s.withaf - s.futureaf / 2.0).max(0.0);
        let per_exam = [s.noaf / 3.0, base_share / 1.5, s.futureaf / 2.0];
        let total: f64 = per_exam.iter().sum();
        let n = self.n_patients;
        let quotas = per_exam.map(|q| q / total * n as f64);
        let mut counts = quotas.map(|q| q.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor()))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rhythm {
    Sinus,
    PreAF,
    AF,
}

/// Everything needed to render one exam's waveform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    pub exam_id: String,
    pub seed: u64,
    pub rhythm: Rhythm,
    pub sample_rate_hz: f32,
    pub duration_s: f64,
    pub heart_rate_bpm: f64,
    pub rr_cv: f64,
    /// P-wave amplitude multiplier (0 for AF).
    pub p_scale: f64,
    pub f_wave_amplitude_mv: f64,
    pub noise_amplitude_mv: f64,
    /// Per-lead gains for the P, QRS and T components.
    pub gains: [[f32; N_LEADS]; 3],
}

/// Rendered waveform with its beat annotations.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub waveform: EcgWaveform,
    /// R-peak times in seconds that fall inside the recording.
    pub r_peaks_s: Vec<f64>,
}

// Beat template relative to the R peak: (offset s, width s, amplitude mV).
const P_WAVE: (f64, f64, f64) = (-0.16, 0.022, 0.15);
const Q_WAVE: (f64, f64, f64) = (-0.03, 0.010, -0.10);
const R_WAVE: (f64, f64, f64) = (0.0, 0.011, 1.0);
const S_WAVE: (f64, f64, f64) = (0.03, 0.011, -0.25);
const T_WAVE: (f64, f64, f64) = (0.26, 0.045, 0.30);

/// Offset of the P peak from the R peak, seconds.
pub const P_OFFSET_S: f64 = P_WAVE.0;

// Nominal lead projections for I, II, III, aVR, aVL, aVF, V1..V6.
const P_GAINS: [f32; N_LEADS] = [0.6, 1.0, 0.4, -0.8, 0.1, 0.7, 0.5, 0.6, 0.6, 0.6, 0.6, 0.5];
const QRS_GAINS: [f32; N_LEADS] = [0.7, 1.0, 0.4, -0.8, 0.2, 0.7, -0.4, 0.5, 0.8, 1.0, 1.0, 0.8];
const T_GAINS: [f32; N_LEADS] = [0.5, 0.8, 0.3, -0.6, 0.2, 0.5, 0.2, 0.5, 0.7, 0.8, 0.7, 0.6];

fn add_bump(buf: &mut [f32], rate: f64, center_s: f64, width_s: f64, amp: f64) {
    if amp == 0.0 {
        return;
    }
    let n = buf.len() as isize;
    let c = center_s * rate;
    let half = (4.0 * width_s * rate).ceil() as isize;
    let lo = ((c.floor() as isize) - half).max(0);
    let hi = ((c.ceil() as isize) + half).min(n - 1);
    let inv = 1.0 / (width_s * rate);
    for i in lo..=hi {
        let z = (i as f64 - c) * inv;
        buf[i as usize] += (amp * (-0.5 * z * z).exp()) as f32;
    }
}

/// Renders the waveform described by `spec`.
pub fn render(spec: &WaveformSpec) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rate = spec.sample_rate_hz as f64;
    let n = (spec.duration_s * rate).round() as usize;
    let rr_mean = 60.0 / spec.heart_rate_bpm;

    let mut beats = Vec::new();
    let mut t = -rng.random::<f64>() * rr_mean;
    while t < spec.duration_s + 0.5 {
        beats.push(t);
        let z: f64 = StandardNormal.sample(&mut rng);
        t += (rr_mean * (1.0 + spec.rr_cv * z)).clamp(0.3, 2.0);
    }

    let mut p = vec![0.0f32; n];
    let mut qrs = vec![0.0f32; n];
    let mut tw = vec![0.0f32; n];
    let t_shift = rr_mean.sqrt();
    for &r in &beats {
        add_bump(
            &mut p,
            rate,
            r + P_WAVE.0,
            P_WAVE.1,
            P_WAVE.2 * spec.p_scale,
        );
        for w in [Q_WAVE, R_WAVE, S_WAVE] {
            add_bump(&mut qrs, rate, r + w.0, w.1, w.2);
        }
        add_bump(&mut tw, rate, r + T_WAVE.0 * t_shift, T_WAVE.1, T_WAVE.2);
    }
    if spec.rhythm == Rhythm::AF && spec.f_wave_amplitude_mv > 0.0 {
        // fibrillatory baseline shares the atrial projection
        let f = 5.0 + 2.0 * rng.random::<f64>();
        let phase = std::f64::consts::TAU * rng.random::<f64>();
        let a = spec.f_wave_amplitude_mv;
        for (i, v) in p.iter_mut().enumerate() {
            let ti = i as f64 / rate;
            *v += (a * (std::f64::consts::TAU * f * ti + phase).sin()) as f32;
        }
    }

    let noise = spec.noise_amplitude_mv as f32;
    let mut samples = Vec::with_capacity(n * N_LEADS);
    for l in 0..N_LEADS {
        let (gp, gq, gt) = (spec.gains[0][l], spec.gains[1][l], spec.gains[2][l]);
        for i in 0..n {
            let z: f32 = StandardNormal.sample(&mut rng);
            samples.push(gp * p[i] + gq * qrs[i] + gt * tw[i] + noise * z);
        }
    }
    let waveform =
        EcgWaveform::new(N_LEADS, spec.sample_rate_hz, samples).expect("consistent shape");
    let r_peaks_s = beats
        .into_iter()
        .filter(|&r| r >= 0.0 && r < spec.duration_s)
        .collect();
    Rendered {
        waveform,
        r_peaks_s,
    }
}

/// Synthetic cohort: patient histories plus one waveform spec per exam.
#[derive(Clone, Debug)]
pub struct GeneratedCohort {
    pub histories: Vec<PatientHistory>,
    pub specs: Vec<WaveformSpec>,
    index: HashMap<String, usize>,
}

impl GeneratedCohort {
    pub fn exams(&self) -> impl Iterator<Item = &ExamRecord> {
        self.histories.iter().flat_map(|h| h.exams())
    }

    pub fn spec(&self, exam_id: &str) -> Option<&WaveformSpec> {
        self.index.get(exam_id).map(|&i| &self.specs[i])
    }

    pub fn render(&self, exam_id: &str) -> Option<Rendered> {
        self.spec(exam_id).map(render)
    }

    /// Writes one waveform file per exam under `dir`, at each exam's
    /// `signal_path`.
    pub fn write_waveforms(&self, dir: &Path) -> Result<()> {
        for e in self.exams() {
            let path = dir.join(&e.signal_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let spec = self.spec(&e.exam_id).expect("spec per exam");
            wavefile::write_waveform(&path, &render(spec).waveform)?;
        }
        Ok(())
    }
}

/// `count` sorted day offsets starting at 0, at most `span` days, with
/// consecutive visits at least a week apart.
fn spaced_days(rng: &mut impl Rng, count: usize, span: i64) -> Vec<i64> {
    let slack = (span - 7 * (count as i64 - 1)).max(0);
    let mut u: Vec<i64> = (1..count).map(|_| rng.random_range(0..=slack)).collect();
    u.sort_unstable();
    std::iter::once(0)
        .chain(u.iter().enumerate().map(|(i, &x)| x + 7 * (i as i64 + 1)))
        .collect()
}

fn jittered_gains(rng: &mut impl Rng) -> [[f32; N_LEADS]; 3] {
    let mut out = [P_GAINS, QRS_GAINS, T_GAINS];
    for row in out.iter_mut() {
        for g in row.iter_mut() {
            let z: f32 = StandardNormal.sample(rng);
            *g *= 1.0 + 0.1 * z;
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Group {
    NoAF,
    BaselineAF,
    FutureAF,
}

/// Generates the synthetic cohort. Deterministic in `cfg.seed`; each patient
/// draws from its own stream keyed by `(seed, patient_id)`.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<GeneratedCohort> {
    cfg.validate()?;
    let counts = cfg.group_counts();
    let mut groups: Vec<Group> = std::iter::repeat_n(Group::NoAF, counts[0])
        .chain(std::iter::repeat_n(Group::BaselineAF, counts[1]))
        .chain(std::iter::repeat_n(Group::FutureAF, counts[2]))
        .collect();
    // interleave groups over patient ids
    let mut order_rng = ChaCha8Rng::seed_from_u64(seeded_key(cfg.seed, "group-order"));
    for i in (1..groups.len()).rev() {
        let j = order_rng.random_range(0..=i);
        groups.swap(i, j);
    }

    let width = cfg.n_patients.to_string().len().max(5);
    let mut histories = Vec::with_capacity(cfg.n_patients);
    let mut specs = Vec::new();
    for (idx, &group) in groups.iter().enumerate() {
        let pid = format!("P{:0width$}", idx + 1);
        let (exams, pspecs) = generate_patient(cfg, &pid, group);
        histories.push(PatientHistory::new(pid, exams).expect("generator keeps visits ordered"));
        specs.extend(pspecs);
    }
    let index = specs
        .iter()
        .enumerate()
        .map(|(i, s)| (s.exam_id.clone(), i))
        .collect();
    Ok(GeneratedCohort {
        histories,
        specs,
        index,
    })
}

fn generate_patient(
    cfg: &SynthConfig,
    pid: &str,
    group: Group,
) -> (Vec<ExamRecord>, Vec<WaveformSpec>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seeded_key(cfg.seed, pid));
    let horizon = (cfg.censoring_horizon_weeks * 7.0).round() as i64;
    let entry = rng.random_range(0..=horizon / 2);

    // (day offset from entry, rhythm)
    let visits: Vec<(i64, Rhythm)> = match group {
        Group::NoAF => {
            let k = rng.random_range(2..=6usize);
            let min_span = 7 * (k as i64 - 1);
            let span = rng.random_range(28.max(min_span)..=(horizon - entry).max(min_span).max(28));
            spaced_days(&mut rng, k, span)
                .into_iter()
                .map(|d| (d, Rhythm::Sinus))
                .collect()
        }
        Group::BaselineAF => {
            let mut v = vec![(0, Rhythm::AF)];
            if rng.random_bool(0.5) {
                v.push((7 + rng.random_range(0..=300), Rhythm::AF));
            }
            v
        }
        Group::FutureAF => {
            let m = rng.random_range(1..=3usize);
            let weibull = Weibull::new(cfg.event_weibull_scale_weeks, cfg.event_weibull_shape)
                .expect("validated parameters");
            let limit = (horizon - entry) as f64 / 7.0;
            let mut weeks = weibull.sample(&mut rng);
            for _ in 0..100 {
                if weeks <= limit {
                    break;
                }
                weeks = weibull.sample(&mut rng);
            }
            let event_day = ((weeks.min(limit) * 7.0).round() as i64).max(7 * m as i64);
            let mut v: Vec<(i64, Rhythm)> = spaced_days(&mut rng, m, event_day - 7)
                .into_iter()
                .map(|d| (d, Rhythm::PreAF))
                .collect();
            v.push((event_day, Rhythm::AF));
            v
        }
    };

    let sex = if rng.random_bool(0.5) {
        Sex::Male
    } else {
        Sex::Female
    };
    let (age_mean, age_sd) = if group == Group::NoAF {
        (52.0, 17.0)
    } else {
        (65.0, 12.0)
    };
    let z: f64 = StandardNormal.sample(&mut rng);
    let base_age = (age_mean + age_sd * z).clamp(18.0, 95.0);
    let boost = if group == Group::NoAF { 1.0 } else { 1.5 };
    let covariates: Vec<bool> = (0..cfg.n_covariates)
        .map(|j| {
            let prev = 0.05 + 0.25 * (j % 5) as f64 / 4.0;
            let prev = if j < 5 { (prev * boost).min(0.9) } else { prev };
            rng.random_bool(prev)
        })
        .collect();

    let [hr_lo, hr_hi] = cfg.heart_rate_bpm;
    let heart_rate = if hr_hi > hr_lo {
        rng.random_range(hr_lo..hr_hi)
    } else {
        hr_lo
    };
    let p_factor = rng.random_range(0.85..1.15);
    let gains = jittered_gains(&mut rng);

    let mut exams = Vec::with_capacity(visits.len());
    let mut specs = Vec::with_capacity(visits.len());
    for (v, &(offset, rhythm)) in visits.iter().enumerate() {
        let exam_id = format!("{pid}-E{:02}", v + 1);
        let day = entry + offset;
        let sample_rate = [300.0f32, 400.0, 500.0, 600.0][rng.random_range(0..4)];
        let duration = rng.random_range(7.0..10.0);
        let (rr_cv, p_scale, hr) = match rhythm {
            Rhythm::Sinus => (cfg.sinus_rr_jitter, p_factor, heart_rate),
            Rhythm::PreAF => (
                (cfg.sinus_rr_jitter.powi(2) + cfg.pre_af_rr_jitter.powi(2)).sqrt(),
                p_factor * cfg.p_wave_attenuation,
                heart_rate,
            ),
            Rhythm::AF => (cfg.af_rr_jitter, 0.0, heart_rate * 1.2),
        };
        specs.push(WaveformSpec {
            exam_id: exam_id.clone(),
            seed: seeded_key(cfg.seed, &exam_id),
            rhythm,
            sample_rate_hz: sample_rate,
            duration_s: duration,
            heart_rate_bpm: hr,
            rr_cv,
            p_scale,
            f_wave_amplitude_mv: cfg.f_wave_amplitude_mv,
            noise_amplitude_mv: cfg.noise_amplitude_mv,
            gains,
        });
        exams.push(ExamRecord {
            signal_path: format!("waveforms/{exam_id}.afw"),
            exam_id,
            patient_id: pid.to_string(),
            exam_day: day,
            af_flag: rhythm == Rhythm::AF,
            age: ((base_age + offset as f64 / 365.25) * 10.0).round() / 10.0,
            sex,
            covariates: covariates.clone(),
        });
    }
    (exams, specs)
}
