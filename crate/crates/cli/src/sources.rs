//! Exam sources that read stored waveforms and preprocess them on demand.

use std::path::PathBuf;

use af_horizon_core::ecgsig::{preprocess, read_waveform};
use af_horizon_core::neuralnet::{self, ExamSource, NetError};

/// One stored exam: waveform location and class index.
#[derive(Clone, Debug)]
pub struct StoredExam {
    pub exam_id: String,
    pub path: PathBuf,
    pub label: usize,
}

/// Reads `.afw` files and returns the resampled, zero-padded tensor.
#[derive(Clone, Debug, Default)]
pub struct FileSource {
    pub exams: Vec<StoredExam>,
}

impl ExamSource for FileSource {
    fn len(&self) -> usize {
        self.exams.len()
    }

    fn label(&self, i: usize) -> usize {
        self.exams[i].label
    }

    fn input(&self, i: usize) -> neuralnet::Result<Vec<f32>> {
        let e = &self.exams[i];
        let wave = read_waveform(&e.path)
            .map_err(|err| NetError::Source(format!("{}: {err}", e.path.display())))?;
        let t =
            preprocess(&wave).map_err(|err| NetError::Source(format!("{}: {err}", e.exam_id)))?;
        Ok(t.into_vec())
    }
}
