//! Reference and competitor filters: the dense Kalman filter and RTS
//! smoother, and the stochastic and transform ensemble Kalman filters.

pub mod dense;
pub mod ensemble;

pub use dense::{
    dense_backward_kernel, dense_kf_pass, dense_rts_pass, DenseGaussian, DenseKalmanFilter, DenseStepRecord,
    DenseTrace, DenseTransition, DenseTransitionSource, ExactDenseDynamics, FixedDenseDynamics,
};
pub use ensemble::{
    enkf_pass, etkf_pass, noise_sampling_factor, Ensemble, EnsembleFilter, EnsembleKind, EnsembleTrace,
    ExactNoiseDynamics,
};
