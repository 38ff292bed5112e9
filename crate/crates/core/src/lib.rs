//! Federated linear prediction when every client observes a different subset
//! of the covariates (blockwise MCAR missingness).
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: feature patterns, federations, masked datasets, moment pairs,
//!   client-wise predictors and communication logs.
//! * [`popgen`]: synthetic populations, Bernoulli observation patterns and
//!   masked dataset sampling.
//! * [`moments`]: zero-imputed local statistics, their aggregation, and the
//!   inverse-propensity (debiased) and component-wise corrections.
//! * [`plugin`]: cropped plug-in predictors, including the norm-constrained
//!   variant solved by projected gradient descent.
//! * [`impute`]: zero, optimal-linear and federated chained-equation imputers.
//! * [`ridge`]: closed-form and FedAvg ridge on imputed data, truncation and
//!   the local-learning baseline.
//! * [`oracle`]: exact population risks, effective dimensions, ridge biases,
//!   risk bounds and Monte Carlo risk estimation.
//! * [`fedsim`]: explicit client/server message passing with exact float
//!   accounting.
//!
//! Feature indices are 0-based in this API. Anything user-facing (pattern
//! display, configuration files) uses 1-based indices; the conversion happens
//! in [`model::FeaturePattern::from_one_based`] and
//! [`model::FeaturePattern::one_based`].

pub mod error;
pub mod fedsim;
pub mod impute;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod oracle;
pub mod plugin;
pub mod popgen;
pub mod ridge;
pub mod seed;

pub use error::{Error, Result};
pub use model::{
    ClientSpec, ClientwisePredictor, CommDirection, CommEntry, CommLog, Dataset, FeaturePattern,
    Federation, MaskedSample, MomentPair, Predict, Provenance,
};
