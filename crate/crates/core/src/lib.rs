//! Evolutionary spectral band selection for forest / deforestation
//! superpixel classification.
//!
//! The pipeline builds a labeled superpixel dataset from multiband rasters
//! ([`raster`], [`slic`], [`segset`]), describes every segment with Haralick
//! texture features per band ([`texture`]), and searches band subsets with a
//! univariate marginal distribution algorithm ([`umda`]) whose fitness is
//! the balanced accuracy of a linear SVM ([`svm`]). [`pipeline`] wires the
//! stages together with persisted, config-hashed artifacts.

pub mod exec;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod segset;
pub mod slic;
pub mod svm;
pub mod synth;
pub mod texture;
pub mod umda;

pub use exec::Exec;
