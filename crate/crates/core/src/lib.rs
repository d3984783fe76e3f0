//! Forward-only neural-network training with push-out likelihood-ratio (LR)
//! gradient estimators.
//!
//! Noise is injected into a layer's logits or weights during the forward
//! pass; the gradient of the expected loss is then estimated from the
//! correlation between the injected noise and the final loss, with no
//! backward pass. Dense, convolutional, recurrent (vanilla, GRU, LSTM), graph
//! (GCN, GAT) and spiking (LIF) layers are supported, along with antithetic
//! pairing, quasi-Monte Carlo noise and layer-wise injection for variance
//! reduction.

pub mod data;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod layers;
pub mod numerics;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};
