//! Dense `f64` tensors, a reverse-mode autodiff tape, a finite-difference
//! gradient checker, Adam and the seeded PRNG.

mod gradcheck;
mod graph;
mod optim;
mod rng;
mod tensor;


pub use gradcheck::fd_gradcheck;
pub use graph::{Grads, Graph, PairRotation, Var, LAYERNORM_EPS};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use rng::{Rng, RNG_ALGORITHM};
pub use tensor::Tensor;
