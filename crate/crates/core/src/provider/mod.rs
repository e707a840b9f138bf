//! The embedding-provider boundary `f = c ∘ h`.
//!
//! A provider maps excerpt texts to non-negative activations `h(x) ∈ ℝᵖ`
//! and maps activation matrices to class logits `c(·)`. The builtin
//! [`ToyModel`] runs in-process; [`WireProvider`] talks to an external model
//! server over newline-delimited JSON.

mod cache;
pub mod conformance;
mod toy;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::CachedProvider;
pub use toy::{tokenize, ToyConfig, ToyModel, TrainReport};
pub use wire::{Endpoint, WireProvider};

use crate::error::{Error, Result};
use crate::matrixio::DenseMatrix;

/// Static description of a provider, as returned by the `describe` operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub p: usize,
    #[serde(rename = "classes")]
    pub class_names: Vec<String>,
    #[serde(rename = "nonneg")]
    pub nonneg_certified: bool,
    pub mask_token: String,
}

impl ProviderDescriptor {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Provider { code: "descriptor".into(), message: "activation dimension p is 0".into() });
        }
        if self.class_names.len() < 2 {
            return Err(Error::Provider {
                code: "descriptor".into(),
                message: format!("at least 2 classes required, provider reports {}", self.class_names.len()),
            });
        }
        Ok(())
    }

    /// Required before factorizing activations with NMF.
    pub fn require_nonneg(&self) -> Result<()> {
        if self.nonneg_certified {
            Ok(())
        } else {
            Err(Error::NonNegativity("provider does not certify non-negative activations".into()))
        }
    }

    /// Resolves a class given by name or by index.
    pub fn class_index(&self, class: &str) -> Result<usize> {
        if let Some(i) = self.class_names.iter().position(|c| c == class) {
            return Ok(i);
        }
        match class.parse::<usize>() {
            Ok(i) if i < self.class_names.len() => Ok(i),
            _ => Err(Error::Config(format!("unknown class `{class}`; provider classes are {:?}", self.class_names))),
        }
    }
}

pub trait Provider: Send + Sync {
    fn describe(&self) -> Result<ProviderDescriptor>;

    /// Stable identifier of the provider state, used as a cache namespace.
    fn id(&self) -> String;

    /// Activations for each text, one row per text in input order.
    fn embed(&self, texts: &[String]) -> Result<DenseMatrix>;

    /// Logits (n×C) for an activation matrix (n×p).
    fn classify(&self, activations: &DenseMatrix) -> Result<DenseMatrix>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn describe(&self) -> Result<ProviderDescriptor> {
        (**self).describe()
    }
    fn id(&self) -> String {
        (**self).id()
    }
    fn embed(&self, texts: &[String]) -> Result<DenseMatrix> {
        (**self).embed(texts)
    }
    fn classify(&self, activations: &DenseMatrix) -> Result<DenseMatrix> {
        (**self).classify(activations)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn describe(&self) -> Result<ProviderDescriptor> {
        (**self).describe()
    }
    fn id(&self) -> String {
        (**self).id()
    }
    fn embed(&self, texts: &[String]) -> Result<DenseMatrix> {
        (**self).embed(texts)
    }
    fn classify(&self, activations: &DenseMatrix) -> Result<DenseMatrix> {
        (**self).classify(activations)
    }
}

impl<P: Provider + ?Sized> Provider for Arc<P> {
    fn describe(&self) -> Result<ProviderDescriptor> {
        (**self).describe()
    }
    fn id(&self) -> String {
        (**self).id()
    }
    fn embed(&self, texts: &[String]) -> Result<DenseMatrix> {
        (**self).embed(texts)
    }
    fn classify(&self, activations: &DenseMatrix) -> Result<DenseMatrix> {
        (**self).classify(activations)
    }
}

/// Fails with [`Error::NonNegativity`] on the first negative activation.
pub fn check_nonnegative(activations: &DenseMatrix) -> Result<()> {
    let found = activations.as_array().indexed_iter().find(|(_, &v)| v < 0.0);
    match found {
        Some(((i, j), v)) => Err(Error::NonNegativity(format!("activation ({i}, {j}) is {v}"))),
        None => Ok(()),
    }
}

/// Embeds and checks non-negativity, as required before NMF.
pub fn embed_nonneg<P: Provider + ?Sized>(provider: &P, texts: &[String]) -> Result<DenseMatrix> {
    let a = provider.embed(texts)?;
    check_nonnegative(&a)?;
    Ok(a)
}

/// End-to-end logits `c(h(x))`.
pub fn forward<P: Provider + ?Sized>(provider: &P, texts: &[String]) -> Result<DenseMatrix> {
    provider.classify(&provider.embed(texts)?)
}

/// Argmax class per text; ties resolve to the lower class index.
pub fn predict<P: Provider + ?Sized>(provider: &P, texts: &[String]) -> Result<Vec<usize>> {
    let logits = forward(provider, texts)?;
    Ok(logits.as_array().outer_iter().map(|row| argmax(row.iter().copied())).collect())
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean of one logit column, the scalar model output used by ranking and fidelity.
pub fn mean_class_logit(logits: &DenseMatrix, class_id: usize) -> f64 {
    let n = logits.rows();
    if n == 0 {
        return 0.0;
    }
    logits.as_array().column(class_id).sum() / n as f64
}
