//! On-disk layout of a fitted scene.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_cameras, read_field, read_primitives, write_cameras, write_field, write_primitives, CAMERAS_FILE};
use crate::optim::config::FitConfig;
use crate::optim::fit::LossTrace;
use crate::render::RenderOptions;
use crate::scene::Scene;

pub const PRIMITIVES_FILE: &str = "primitives.bin";
pub const FIELD_FILE: &str = "field.txt";
pub const CONFIG_FILE: &str = "fit.txt";
pub const TRACE_FILE: &str = "trace.csv";
pub const PREDICTED_TRACKS_FILE: &str = "tracks_pred.txt";

/// Writes primitives, field, cameras, the configuration and (if given) the trace.
pub fn save_fit(dir: &Path, scene: &Scene, config: &FitConfig, trace: Option<&LossTrace>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_primitives(&dir.join(PRIMITIVES_FILE), &scene.primitives)?;
    write_field(&dir.join(FIELD_FILE), &scene.field)?;
    write_cameras(&dir.join(CAMERAS_FILE), &scene.cameras)?;
    let cfg = dir.join(CONFIG_FILE);
    std::fs::write(&cfg, config.to_text()).map_err(|e| Error::io(&cfg, e))?;
    if let Some(trace) = trace {
        trace.write_csv(&dir.join(TRACE_FILE))?;
    }
    Ok(())
}

pub fn load_fit(dir: &Path) -> Result<(Scene, FitConfig)> {
    let config = FitConfig::read(&dir.join(CONFIG_FILE))?;
    let prims = read_primitives(&dir.join(PRIMITIVES_FILE))?;
    let field = read_field(&dir.join(FIELD_FILE))?;
    let cameras = read_cameras(&dir.join(CAMERAS_FILE))?;
    let scene = Scene::new(cameras, field, prims, RenderOptions::default(), config.variant, config.skin_k)?;
    Ok((scene, config))
}
