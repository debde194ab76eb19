//! Dense linear algebra, small-network autodiff, optimizers and seeded RNG.

pub mod gradcheck;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_fn};
pub use linalg::{affine_residual, solve_least_squares};
pub use nn::{Activation, Cache, DenseNet, Layer, Net, NetGrads};
pub use optim::{AdamConfig, OptState};
pub use rng::{child_seed, rng_normal, splitmix64, RngState};
pub use tensor::{matmul_nn, matmul_nt, matmul_tn, mse, Real, Tensor};
