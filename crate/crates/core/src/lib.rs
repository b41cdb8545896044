//! Earth-observation dataset builder: point sampling, catalog download,
//! conversion, cleaning and patch extraction over an on-disk dataset store.

pub mod catalog;
pub mod clean;
pub mod convert;
pub mod month;
pub mod patches;
pub mod pipeline;
pub mod raster;
pub mod sampler;
pub mod satellite;
pub mod service;
pub mod stage;
pub mod store;

pub use month::YearMonth;
pub use sampler::{BBox, GeoPoint, SceneFootprint};
pub use satellite::Satellite;
pub use stage::{Stage, StageStatus};
pub use store::{DatasetManifest, DatasetStore};
