use super::params::{Gradients, ModelParams};
use super::{NetError, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay:
/// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. Decay touches only convolution and
/// dense weights; running statistics are never updated.
pub fn adam_update<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if grads.0.len() != params.tensors.len() {
        return Err(NetError::Shape {
            layer: "adam".into(),
            detail: "gradient count differs from tensor count".into(),
        });
    }
    for (t, g) in params.tensors.iter().zip(&grads.0) {
        if g.len() != t.len() {
            return Err(NetError::Shape {
                layer: t.name.clone(),
                detail: "gradient length".into(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteGradient(t.name.clone()));
        }
    }
    let st = &mut params.adam;
    st.step += 1;
    let step = st.step as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let c1 = T::lit(1.0 - hyper.beta1.powi(step));
    let c2 = T::lit(1.0 - hyper.beta2.powi(step));
    let lr_t = T::lit(lr);
    let eps = T::lit(hyper.eps);
    let shrink = T::lit(1.0 - lr * weight_decay);
    for (i, t) in params.tensors.iter_mut().enumerate() {
        if !t.kind.trainable() {
            continue;
        }
        let decay = t.kind.decayed() && weight_decay != 0.0;
        let (m, v) = (&mut st.m[i], &mut st.v[i]);
        for (j, x) in t.data.iter_mut().enumerate() {
            let gj = grads.0[i][j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            if decay {
                *x *= shrink;
            }
            *x -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
