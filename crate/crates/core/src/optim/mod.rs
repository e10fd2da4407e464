pub mod adam;
pub mod config;
pub mod densify;
pub mod fit;
pub mod grad;
pub mod loss;
pub mod params;
