//! ECG waveform preprocessing and the synthetic cohort generator.

pub mod synth;
pub mod wavefile;

use thiserror::Error;

pub use synth::{generate_cohort, ClassShares, GeneratedCohort, Rhythm, SynthConfig, WaveformSpec};
pub use wavefile::{read_waveform, write_waveform};

/// Number of leads of a standard ECG.
pub const N_LEADS: usize = 12;
/// Network input rate.
pub const TARGET_RATE_HZ: f32 = 400.0;
/// Network input length per lead.
pub const TENSOR_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("target sample rate must be positive, got {0}")]
    BadTargetRate(f32),
    #[error("input sample rate {0} Hz outside supported range [300, 600]")]
    UnsupportedRate(f32),
    #[error("leads must hold at least {min} samples, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("signal of {0} samples exceeds {TENSOR_LEN}; truncation is refused")]
    TooLong(usize),
    #[error("waveform expected at {expected} Hz, got {got} Hz")]
    WrongRate { expected: f32, got: f32 },
    #[error("inconsistent waveform: {0}")]
    Shape(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("waveform file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Multi-lead recording, lead-major samples in millivolts.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgWaveform {
    n_leads: usize,
    n_samples: usize,
    sample_rate_hz: f32,
    samples: Vec<f32>,
}

impl EcgWaveform {
    pub fn new(n_leads: usize, sample_rate_hz: f32, samples: Vec<f32>) -> Result<Self> {
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(SignalError::Shape(format!("sample rate {sample_rate_hz}")));
        }
        if n_leads == 0 || !samples.len().is_multiple_of(n_leads) {
            return Err(SignalError::Shape(format!(
                "{} samples do not split into {n_leads} leads",
                samples.len()
            )));
        }
        Ok(Self {
            n_leads,
            n_samples: samples.len() / n_leads,
            sample_rate_hz,
            samples,
        })
    }

    pub fn from_leads(leads: Vec<Vec<f32>>, sample_rate_hz: f32) -> Result<Self> {
        let n = leads.first().map_or(0, Vec::len);
        if leads.iter().any(|l| l.len() != n) {
            return Err(SignalError::Shape("leads differ in length".into()));
        }
        let n_leads = leads.len();
        Self::new(n_leads, sample_rate_hz, leads.concat())
    }

    pub fn n_leads(&self) -> usize {
        self.n_leads
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn sample_rate_hz(&self) -> f32 {
        self.sample_rate_hz
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        &self.samples[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }
}

/// Fixed-size network input: 12 leads of 4096 samples at 400 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgTensor {
    data: Vec<f32>,
}

impl EcgTensor {
    pub const LEN: usize = N_LEADS * TENSOR_LEN;

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(SignalError::Shape(format!(
                "tensor of {} values",
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; Self::LEN],
        }
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        &self.data[i * TENSOR_LEN..(i + 1) * TENSOR_LEN]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

/// Linear-interpolation resampling to `target_hz`.
pub fn resample(w: &EcgWaveform, target_hz: f32) -> Result<EcgWaveform> {
    if !(target_hz > 0.0) || !target_hz.is_finite() {
        return Err(SignalError::BadTargetRate(target_hz));
    }
    let rate = w.sample_rate_hz;
    if !(300.0..=600.0).contains(&rate) {
        return Err(SignalError::UnsupportedRate(rate));
    }
    let n_in = w.n_samples;
    if n_in < 2 {
        return Err(SignalError::TooShort { min: 2, got: n_in });
    }
    let ratio = rate as f64 / target_hz as f64;
    let n_out = (n_in as f64 * target_hz as f64 / rate as f64).round() as usize;

    // Interpolation stencil is shared by all leads.
    let stencil: Vec<(usize, f32)> = (0..n_out)
        .map(|j| {
            let x = j as f64 * ratio;
            let i0 = x.floor() as usize;
            if i0 >= n_in - 1 {
                (n_in - 2, 1.0)
            } else {
                (i0, (x - i0 as f64) as f32)
            }
        })
        .collect();

    let mut out = Vec::with_capacity(n_out * w.n_leads);
    for l in 0..w.n_leads {
        let src = w.lead(l);
        out.extend(stencil.iter().map(|&(i0, f)| {
            let (a, b) = (src[i0], src[i0 + 1]);
            if f == 0.0 {
                a
            } else if f == 1.0 {
                b
            } else {
                a + (b - a) * f
            }
        }));
    }
    EcgWaveform::new(w.n_leads, target_hz, out)
}

/// Leading zeros used when padding a lead of length `len`.
pub fn pad_offset(len: usize) -> usize {
    (TENSOR_LEN - len) / 2
}

/// Centers every lead in a 4096-sample frame; the odd zero goes at the end.
pub fn zero_pad(w: &EcgWaveform) -> Result<EcgTensor> {
    if w.sample_rate_hz != TARGET_RATE_HZ {
        return Err(SignalError::WrongRate {
            expected: TARGET_RATE_HZ,
            got: w.sample_rate_hz,
        });
    }
    if w.n_leads != N_LEADS {
        return Err(SignalError::Shape(format!(
            "{} leads, expected {N_LEADS}",
            w.n_leads
        )));
    }
    let len = w.n_samples;
    if len > TENSOR_LEN {
        return Err(SignalError::TooLong(len));
    }
    let lead_pad = pad_offset(len);
    let mut data = vec![0.0f32; EcgTensor::LEN];
    for l in 0..N_LEADS {
        let start = l * TENSOR_LEN + lead_pad;
        data[start..start + len].copy_from_slice(w.lead(l));
    }
    Ok(EcgTensor { data })
}

/// Resample to 400 Hz (when needed) then zero-pad.
pub fn preprocess(w: &EcgWaveform) -> Result<EcgTensor> {
    if w.sample_rate_hz == TARGET_RATE_HZ {
        zero_pad(w)
    } else {
        zero_pad(&resample(w, TARGET_RATE_HZ)?)
    }
}
