//! Tensors, reproducible random streams, Gaussian sampling from pseudo- and
//! quasi-random sources, and antithetic pairing.

mod noise;
mod normal;
mod rng;
mod sobol;
mod tensor;

pub use noise::{antithetic_expand, NoiseBlock, NoiseSource, QmcNoise, Recording, Replay, ZeroNoise};
pub use normal::gaussian_from_uniform;
pub use rng::{mix64, uniform_stream, RngStream, Source};
pub use sobol::{sobol_points, SobolSequence, SOBOL_MAX_DIM};
pub use tensor::{argmax, Tensor};

pub(crate) use rng::open_unit;
pub(crate) use tensor::{matmul, matmul_tn, matvec, matvec_t, outer_acc};
