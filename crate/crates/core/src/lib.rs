//! Multi-task self-supervised pre-training at desk scale.

pub mod autodiff;
pub mod eval;
pub mod experiment;
pub mod lasso;
pub mod params;
pub mod pretext;
pub mod rng;
pub mod trainer;
pub mod trunk;
