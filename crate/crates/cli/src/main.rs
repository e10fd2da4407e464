use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Arg, ArgAction, ArgMatches, Command};

use origs::bundle::{load_fit, save_fit, PREDICTED_TRACKS_FILE};
use origs::field::{FieldConfig, OrientationField};
use origs::image::Image;
use origs::io::{
    frame_file_name, load_scene_inputs_with_window, read_cameras, read_tracks, resolve_tracks, write_field,
    write_tracks, TrackSet,
};
use origs::metrics::PCK_THRESHOLD;
use origs::optim::config::{FitConfig, CONFIG_KEYS};
use origs::optim::fit::{fit, initialize_scene, predicted_tracks, LossTrace};
use origs::synthetic::{generate_synthetic_scene, save_synthetic_scene, SceneSpec};
use origs::tracks::lift_track;
use origs::Error;

const SPEC_KEYS: &[&str] = &[
    "motion",
    "omega_deg",
    "amplitude_deg",
    "speed",
    "frames",
    "tracks",
    "width",
    "height",
    "seed",
];

/// Failure of a subcommand: bad usage (exit 1) or bad data (exit 2).
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CmdResult = Result<(), Failure>;

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").value_parser(clap::value_parser!(PathBuf)).help(help)
}

fn command() -> Command {
    let fit_keys: Vec<Arg> = CONFIG_KEYS
        .iter()
        .map(|k| Arg::new(*k).long(*k).value_name("VALUE").hide(true))
        .collect();
    let spec_keys: Vec<Arg> = SPEC_KEYS.iter().map(|k| Arg::new(*k).long(*k).value_name("VALUE")).collect();
    Command::new("origs")
        .about("Orientation-anchored dynamic Gaussian splatting on the CPU")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("lift")
                .about("Lift pixel tracks with depth to world trajectories")
                .arg(path_arg("tracks", "pixel track file (mode=2d)").required(true))
                .arg(path_arg("cameras", "camera file").required(true))
                .arg(path_arg("out", "output trajectory file (mode=3d)").required(true)),
        )
        .subcommand(
            Command::new("build-field")
                .about("Build and propagate the orientation field; write a field dump")
                .arg(path_arg("tracks", "track file, world or pixel").required(true))
                .arg(path_arg("cameras", "camera file, required for pixel tracks"))
                .arg(path_arg("out", "output field dump").required(true))
                .arg(Arg::new("k").long("k").value_name("N").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("window").long("window").value_name("N").value_parser(clap::value_parser!(usize))),
        )
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic scene directory")
                .arg(path_arg("spec", "scene description file (key=value)"))
                .args(spec_keys)
                .arg(path_arg("out", "output scene directory").required(true)),
        )
        .subcommand(
            Command::new("fit")
                .about("Fit primitives to a scene directory; every configuration key is also a flag")
                .after_help(format!("Configuration keys: {}", CONFIG_KEYS.join(", ")))
                .arg(path_arg("input", "scene directory").required(true))
                .arg(path_arg("config", "configuration file (key=value)"))
                .arg(path_arg("out", "output fit directory").required(true))
                .args(fit_keys),
        )
        .subcommand(
            Command::new("render")
                .about("Render a fitted scene to PPM")
                .arg(path_arg("fit", "fit directory").required(true))
                .arg(path_arg("cameras", "camera file (defaults to the fit's cameras)"))
                .arg(
                    Arg::new("frame")
                        .long("frame")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .help("frame index: its camera and its normalized time"),
                )
                .arg(
                    Arg::new("t")
                        .long("t")
                        .value_name("T")
                        .value_parser(clap::value_parser!(f64))
                        .help("normalized time in [0, 1]; needs --camera"),
                )
                .arg(
                    Arg::new("camera")
                        .long("camera")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .help("camera index used with --t"),
                )
                .arg(
                    Arg::new("all-frames")
                        .long("all-frames")
                        .action(ArgAction::SetTrue)
                        .help("render every frame into the --out directory"),
                )
                .arg(path_arg("out", "output PPM file (or directory with --all-frames)").required(true)),
        )
        .subcommand(
            Command::new("eval")
                .about("Score renders against a scene directory; write an evaluation CSV")
                .arg(path_arg("input", "scene directory (ground-truth frames and tracks)").required(true))
                .arg(path_arg("renders", "directory of rendered frames").required(true))
                .arg(path_arg("fit", "fit directory, for predicted tracks, frame split and primitive count"))
                .arg(
                    Arg::new("frames")
                        .long("frames")
                        .value_name("SET")
                        .default_value("all")
                        .value_parser(["all", "train", "held"])
                        .help("frames to score; train/held use the fit's split"),
                )
                .arg(
                    Arg::new("pck_threshold")
                        .long("pck_threshold")
                        .value_name("FRAC")
                        .value_parser(clap::value_parser!(f64))
                        .help("PCK-T threshold as a fraction of the image diagonal"),
                )
                .arg(path_arg("out", "output CSV").required(true)),
        )
}

fn required<'a>(m: &'a ArgMatches, name: &str) -> &'a PathBuf {
    m.get_one::<PathBuf>(name).expect("required by clap")
}

fn lift(m: &ArgMatches) -> CmdResult {
    let cameras = read_cameras(required(m, "cameras"))?;
    let TrackSet::Pixel(tracks) = read_tracks(required(m, "tracks"))? else {
        return Err(Failure::Data(Error::Consistency("lift expects pixel tracks (mode=2d)".into())));
    };
    let world = tracks.iter().map(|t| lift_track(t, &cameras)).collect::<Result<Vec<_>, _>>()?;
    write_tracks(required(m, "out"), &TrackSet::World(world))?;
    Ok(())
}

fn build_field(m: &ArgMatches) -> CmdResult {
    let tracks = read_tracks(required(m, "tracks"))?;
    let trajectories = match (tracks, m.get_one::<PathBuf>("cameras")) {
        (TrackSet::World(t), _) => t,
        (tracks @ TrackSet::Pixel(_), Some(c)) => resolve_tracks(tracks, &read_cameras(c)?)?.0,
        (TrackSet::Pixel(_), None) => return Err(Failure::Usage("pixel tracks need --cameras".into())),
    };
    let mut config = FieldConfig::default();
    if let Some(k) = m.get_one::<usize>("k") {
        config.k = *k;
    }
    if let Some(w) = m.get_one::<usize>("window") {
        config.window = *w;
    }
    let field = OrientationField::build(&trajectories, config)?;
    for w in field.warnings() {
        eprintln!("warning: {w:?}");
    }
    write_field(required(m, "out"), &field)?;
    Ok(())
}

fn synth(m: &ArgMatches) -> CmdResult {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(p) = m.get_one::<PathBuf>("spec") {
        let spec = SceneSpec::read(p)?;
        for line in spec.to_text().lines() {
            let (k, v) = line.split_once('=').expect("key=value line");
            pairs.push((k.to_string(), v.to_string()));
        }
    }
    for k in SPEC_KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            pairs.retain(|(pk, _)| pk != k);
            pairs.push((k.to_string(), v.clone()));
        }
    }
    if !pairs.iter().any(|(k, _)| k == "motion") {
        return Err(Failure::Usage("synth needs --spec or --motion".into()));
    }
    let spec = SceneSpec::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let scene = generate_synthetic_scene(&spec)?;
    save_synthetic_scene(required(m, "out"), &scene)?;
    Ok(())
}

fn fit_cmd(m: &ArgMatches) -> CmdResult {
    let mut config = match m.get_one::<PathBuf>("config") {
        Some(p) => FitConfig::read(p)?,
        None => FitConfig::default(),
    };
    for k in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            config.set(k, v)?;
        }
    }
    config.validate()?;
    let inputs = load_scene_inputs_with_window(required(m, "input"), config.field.window)?;
    let out = required(m, "out");
    let start = Instant::now();
    let mut scene = initialize_scene(&inputs, &config)?;
    let mut trace = LossTrace::default();
    let result = fit(&mut scene, &inputs, &config, &mut trace);
    if let Err(e) = result {
        // Keep whatever trace exists for diagnosis.
        std::fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        trace.write_csv(&out.join(origs::bundle::TRACE_FILE))?;
        return Err(e.into());
    }
    save_fit(out, &scene, &config, Some(&trace))?;
    let pred = predicted_tracks(&scene, inputs.observations.len())?;
    write_tracks(&out.join(PREDICTED_TRACKS_FILE), &TrackSet::Pixel(pred))?;
    if let Some(last) = trace.rows.last() {
        println!(
            "iterations={} loss={:.6e} primitives={} seconds={:.2}",
            trace.rows.len(),
            last.loss.total,
            scene.primitives.len(),
            start.elapsed().as_secs_f64()
        );
    } else {
        println!("iterations=0 primitives={}", scene.primitives.len());
    }
    Ok(())
}

fn render_cmd(m: &ArgMatches) -> CmdResult {
    let (scene, _) = load_fit(required(m, "fit"))?;
    let cameras = match m.get_one::<PathBuf>("cameras") {
        Some(p) => read_cameras(p)?,
        None => scene.cameras.clone(),
    };
    let out = required(m, "out");
    let camera = |i: usize| {
        cameras.get(i).copied().ok_or(Failure::Data(Error::IndexOutOfRange {
            index: i,
            len: cameras.len(),
        }))
    };
    if m.get_flag("all-frames") {
        std::fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        for f in 0..scene.frames() {
            let img = scene.render_at(scene.field.frame_time(f), &camera(f.min(cameras.len().saturating_sub(1)))?)?;
            img.write_ppm(&out.join(frame_file_name(f)))?;
        }
        return Ok(());
    }
    let img = match (m.get_one::<usize>("frame"), m.get_one::<f64>("t"), m.get_one::<usize>("camera")) {
        (Some(&f), None, None) => {
            if f >= scene.frames() {
                return Err(Failure::Data(Error::IndexOutOfRange {
                    index: f,
                    len: scene.frames(),
                }));
            }
            scene.render_at(scene.field.frame_time(f), &camera(f)?)?
        }
        (None, Some(&t), Some(&c)) => scene.render_at(t, &camera(c)?)?,
        _ => return Err(Failure::Usage("render needs --frame=N, or --t=T with --camera=N, or --all-frames".into())),
    };
    img.write_ppm(out)?;
    Ok(())
}

fn eval_cmd(m: &ArgMatches) -> CmdResult {
    let start = Instant::now();
    let input = required(m, "input");
    let fitted = match m.get_one::<PathBuf>("fit") {
        Some(p) => Some(load_fit(p)?),
        None => None,
    };
    let window = fitted.as_ref().map_or(FieldConfig::default().window, |(_, c)| c.field.window);
    let inputs = load_scene_inputs_with_window(input, window)?;
    let n = inputs.frames.len();
    let frames: Vec<usize> = match (m.get_one::<String>("frames").map(String::as_str), &fitted) {
        (Some("all") | None, _) => (0..n).collect(),
        (Some(set), Some((_, cfg))) => {
            let (train, held) = cfg.split_frames(n);
            if set == "train" {
                train
            } else {
                held
            }
        }
        (Some(_), None) => return Err(Failure::Usage("--frames=train|held needs --fit".into())),
    };
    let renders = required(m, "renders");
    let threshold = m.get_one::<f64>("pck_threshold").copied().unwrap_or(PCK_THRESHOLD);
    let mut report = origs::metrics::EvalReport {
        frames: Vec::new(),
        pck_t: None,
        seconds: 0.0,
        num_gaussians: None,
    };
    for &f in &frames {
        let img = Image::read_ppm(&renders.join(frame_file_name(f)))?;
        let target = inputs.frames.get(f)?;
        report.frames.push(origs::metrics::FrameScore {
            frame: f,
            psnr: origs::metrics::psnr(&img, target)?,
            ssim: origs::metrics::ssim(&img, target)?,
        });
    }
    if let (Some((scene, _)), Some(dir)) = (&fitted, m.get_one::<PathBuf>("fit")) {
        report.num_gaussians = Some(scene.primitives.len());
        let pred_path = dir.join(PREDICTED_TRACKS_FILE);
        if pred_path.exists() && !inputs.observations.is_empty() {
            let TrackSet::Pixel(pred) = read_tracks(&pred_path)? else {
                return Err(Failure::Data(Error::Consistency("predicted tracks must be pixel tracks".into())));
            };
            let diagonal = inputs.cameras[0].diagonal();
            report.pck_t = Some(origs::metrics::pck_t(&pred, &inputs.observations, threshold, diagonal)?);
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    report.write_csv(required(m, "out"))?;
    println!("frames={} psnr={:.3} ssim={:.4}", report.frames.len(), report.mean_psnr(), report.mean_ssim());
    Ok(())
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "lift" => lift(sub),
        "build-field" => build_field(sub),
        "synth" => synth(sub),
        "fit" => fit_cmd(sub),
        "render" => render_cmd(sub),
        "eval" => eval_cmd(sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", command().render_usage());
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_well_formed() {
        command().debug_assert();
    }

    #[test]
    fn config_flags_mirror_config_keys() {
        let m = command()
            .try_get_matches_from(["origs", "fit", "--input=a", "--out=b", "--iters=3", "--lambda_cor=0"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        assert_eq!(sub.get_one::<String>("iters").map(String::as_str), Some("3"));
        assert_eq!(sub.get_one::<String>("lambda_cor").map(String::as_str), Some("0"));
    }
}
