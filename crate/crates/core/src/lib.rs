pub mod bundle;
pub mod camera;
pub mod deform;
pub mod error;
pub mod field;
pub mod hyper;
pub mod image;
pub mod io;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod scene;
pub mod synthetic;
pub mod tracks;

pub use error::{Error, Result};
