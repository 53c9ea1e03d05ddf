use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Role of a parameter tensor; decides trainability and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution kernel or dense weight matrix; decayed.
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn decayed(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn filled(name: impl Into<String>, kind: ParamKind, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            kind,
            shape,
            data: vec![v; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// First/second moment estimates and step count of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Ordered network parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: Vec<Tensor<T>>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(tensors: Vec<Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            adam: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
            tensors,
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind.trainable())
            .map(Tensor::len)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients(
            self.tensors
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
        )
    }

    /// Converts every tensor and moment to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &Vec<T>| {
            v.iter()
                .map(|x| U::from_f64(x.as_f64()).unwrap_or(U::nan()))
                .collect()
        };
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    kind: t.kind,
                    shape: t.shape.clone(),
                    data: conv(&t.data),
                })
                .collect(),
            adam: AdamState {
                step: self.adam.step,
                m: self.adam.m.iter().map(conv).collect(),
                v: self.adam.v.iter().map(conv).collect(),
            },
        }
    }
}

/// Gradient buffers aligned with [`ModelParams::tensors`]; entries for
/// non-trainable tensors stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> Vec<T> {
        self.0.concat()
    }
}
