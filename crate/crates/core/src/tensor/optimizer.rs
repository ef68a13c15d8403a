//! RMSprop: acc <- decay*acc + (1-decay)*g^2; p <- p - lr*g/sqrt(acc+eps).

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter accumulator of squared gradients, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct RmsPropState {
    pub acc: BTreeMap<String, Tensor>,
}

impl RmsPropState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One optimizer step over named (param, grad) pairs. Accumulators are
/// created lazily as zeros. A non-finite gradient aborts the step before
/// any parameter is touched, naming the offending parameter.
pub fn rmsprop_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, &Tensor>,
    state: &mut RmsPropState,
    lr: f64,
    decay: f64,
    epsilon: f64,
) -> Result<()> {
    assert!(epsilon > 0.0, "rmsprop epsilon must be positive");
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                context: "rmsprop gradient".into(),
                detail: format!("parameter {name}"),
            });
        }
        if params
            .get(name.as_str())
            .map(|p| p.shape() != g.shape())
            .unwrap_or(true)
        {
            return Err(Error::dim(format!(
                "rmsprop: gradient for unknown or mismatched parameter {name}"
            )));
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name.as_str()).expect("validated above");
        let acc = state
            .acc
            .entry((*name).clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        for ((pv, av), gv) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
            *av = decay * *av + (1.0 - decay) * gv * gv;
            *pv -= lr * gv / (*av + epsilon).sqrt();
        }
    }
    Ok(())
}
