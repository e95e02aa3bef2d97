//! Dense arithmetic, the fixed-architecture MLP, and deterministic random streams.

mod mlp;
mod rng;
mod tensor;

pub use mlp::{
    fd_check, time_features, FD_SCALE_FLOOR, MlpArch, MlpGrad, MlpParams, Trace, TIME_FEATURES,
};
pub use rng::RngStream;
pub use tensor::Tensor2;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
