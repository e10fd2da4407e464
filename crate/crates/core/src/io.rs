//! Text and binary formats for scene inputs, field dumps and primitive dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix4, Vector2, Vector3};

use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, OrientationField, OrientedAnchor, DEFAULT_WINDOW};
use crate::hyper::{DynamicStateMean, FactoredCovariance, HyperGaussian, Mat9x4};
use crate::image::{FrameSet, Image};
use crate::math::{RigidTransform, Rotation, TangentVector3};
use crate::tracks::{lift_track, project_trajectory, Track2d, Trajectory};

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const TRACKS_FILE: &str = "tracks.txt";
pub const FRAMES_DIR: &str = "frames";

const UNIT_TOLERANCE: f64 = 1e-6;

pub fn frame_file_name(frame: usize) -> String {
    format!("frame_{frame:05}.ppm")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

struct Fields<'a> {
    path: &'a str,
    line: usize,
    tokens: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn new(path: &'a str, line: usize, text: &'a str, expected: usize) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != expected {
            return Err(Error::parse(path, line, format!("expected {expected} fields, found {}", tokens.len())));
        }
        Ok(Fields { path, line, tokens })
    }

    fn get<T: FromStr>(&self, index: usize, name: &str) -> Result<T> {
        self.tokens[index]
            .parse()
            .map_err(|_| Error::parse(self.path, self.line, format!("field `{name}`: cannot parse `{}`", self.tokens[index])))
    }

    fn finite(&self, index: usize, name: &str) -> Result<f64> {
        let v: f64 = self.get(index, name)?;
        if !v.is_finite() {
            return Err(Error::parse(self.path, self.line, format!("field `{name}` is not finite")));
        }
        Ok(v)
    }

    fn flag(&self, index: usize, name: &str) -> Result<bool> {
        match self.tokens[index] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::parse(self.path, self.line, format!("field `{name}` must be 0 or 1, found `{other}`"))),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, msg)
    }
}

fn unit_rotation(f: &Fields, first: usize) -> Result<Rotation> {
    let q = [
        f.finite(first, "qw")?,
        f.finite(first + 1, "qx")?,
        f.finite(first + 2, "qy")?,
        f.finite(first + 3, "qz")?,
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(f.err(format!("quaternion norm {n} is not 1")));
    }
    Rotation::from_wxyz(q[0], q[1], q[2], q[3]).map_err(|e| f.err(e.to_string()))
}

/// `t fx fy cx cy qw qx qy qz tx ty tz width height`, frames numbered from 0.
pub fn parse_cameras(text: &str, path: &str) -> Result<Vec<Camera>> {
    let mut cameras = Vec::new();
    for (line, l) in content_lines(text) {
        let f = Fields::new(path, line, l, 14)?;
        let t: usize = f.get(0, "t")?;
        if t != cameras.len() {
            return Err(f.err(format!("frame index {t} out of sequence, expected {}", cameras.len())));
        }
        let intr = Intrinsics::new(f.finite(1, "fx")?, f.finite(2, "fy")?, f.finite(3, "cx")?, f.finite(4, "cy")?)
            .map_err(|e| f.err(e.to_string()))?;
        let rotation = unit_rotation(&f, 5)?;
        let translation = Vector3::new(f.finite(9, "tx")?, f.finite(10, "ty")?, f.finite(11, "tz")?);
        let width: usize = f.get(12, "width")?;
        let height: usize = f.get(13, "height")?;
        let cam = Camera::new(intr, RigidTransform::new(rotation, translation), width, height).map_err(|e| f.err(e.to_string()))?;
        cameras.push(cam);
    }
    if cameras.is_empty() {
        return Err(Error::parse(path, 0, "no camera records"));
    }
    Ok(cameras)
}

pub fn format_cameras(cameras: &[Camera]) -> String {
    let mut s = String::from("# t fx fy cx cy qw qx qy qz tx ty tz width height\n");
    for (t, c) in cameras.iter().enumerate() {
        let k = c.intrinsics;
        let q = c.pose.rotation.wxyz();
        let p = c.pose.translation;
        let _ = writeln!(
            s,
            "{t} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            k.fx, k.fy, k.cx, k.cy, q[0], q[1], q[2], q[3], p.x, p.y, p.z, c.width, c.height
        );
    }
    s
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    parse_cameras(&read_text(path)?, &path.display().to_string())
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    write_text(path, &format_cameras(cameras))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackMode {
    /// `t x y z valid` world positions.
    World,
    /// `t u v d valid` pixels and z-depths.
    Pixel,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrackSet {
    World(Vec<Trajectory>),
    Pixel(Vec<Track2d>),
}

impl TrackSet {
    pub fn len(&self) -> usize {
        match self {
            TrackSet::World(v) => v.len(),
            TrackSet::Pixel(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        match self {
            TrackSet::World(v) => v.first().map_or(0, |t| t.len()),
            TrackSet::Pixel(v) => v.first().map_or(0, |t| t.len()),
        }
    }

    pub fn mode(&self) -> TrackMode {
        match self {
            TrackSet::World(_) => TrackMode::World,
            TrackSet::Pixel(_) => TrackMode::Pixel,
        }
    }
}

/// Header `T N mode=2d|3d`, then `N` blocks of `T` lines.
pub fn parse_tracks(text: &str, path: &str) -> Result<TrackSet> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or_else(|| Error::parse(path, 0, "missing header"))?;
    let h = Fields::new(path, hline, header, 3)?;
    let frames: usize = h.get(0, "T")?;
    let count: usize = h.get(1, "N")?;
    let mode = match h.tokens[2] {
        "mode=3d" => TrackMode::World,
        "mode=2d" => TrackMode::Pixel,
        other => return Err(h.err(format!("unknown track mode `{other}`"))),
    };
    if frames < 2 {
        return Err(h.err(format!("at least 2 frames are required, got {frames}")));
    }
    let mut world = Vec::new();
    let mut pixel = Vec::new();
    for n in 0..count {
        let mut vals = Vec::with_capacity(frames);
        let mut valid = Vec::with_capacity(frames);
        for t in 0..frames {
            let (line, l) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("track {n} ends before frame {t}")))?;
            let f = Fields::new(path, line, l, 5)?;
            let ft: usize = f.get(0, "t")?;
            if ft != t {
                return Err(f.err(format!("frame index {ft} out of sequence, expected {t}")));
            }
            let v = Vector3::new(f.finite(1, "x")?, f.finite(2, "y")?, f.finite(3, "z")?);
            let ok = f.flag(4, "valid")?;
            if mode == TrackMode::Pixel && ok && v.z <= 0.0 {
                return Err(f.err(format!("depth {} must be positive on a valid frame", v.z)));
            }
            vals.push(v);
            valid.push(ok);
        }
        match mode {
            TrackMode::World => world.push(Trajectory { positions: vals, valid }),
            TrackMode::Pixel => pixel.push(Track2d {
                pixels: vals.iter().map(|v| Vector2::new(v.x, v.y)).collect(),
                depths: vals.iter().map(|v| v.z).collect(),
                valid,
            }),
        }
    }
    if let Some((line, _)) = lines.next() {
        return Err(Error::parse(path, line, format!("unexpected data after {count} tracks")));
    }
    Ok(match mode {
        TrackMode::World => TrackSet::World(world),
        TrackMode::Pixel => TrackSet::Pixel(pixel),
    })
}

pub fn format_tracks(tracks: &TrackSet) -> String {
    let mut s = String::new();
    let mode = match tracks.mode() {
        TrackMode::World => "3d",
        TrackMode::Pixel => "2d",
    };
    let _ = writeln!(s, "{} {} mode={mode}", tracks.frames(), tracks.len());
    let mut row = |t: usize, a: f64, b: f64, c: f64, v: bool| {
        let _ = writeln!(s, "{t} {a} {b} {c} {}", v as u8);
    };
    match tracks {
        TrackSet::World(v) => {
            for tr in v {
                for t in 0..tr.len() {
                    let p = tr.positions[t];
                    row(t, p.x, p.y, p.z, tr.valid[t]);
                }
            }
        }
        TrackSet::Pixel(v) => {
            for tr in v {
                for t in 0..tr.len() {
                    let u = tr.pixels[t];
                    row(t, u.x, u.y, tr.depths[t], tr.valid[t]);
                }
            }
        }
    }
    s
}

pub fn read_tracks(path: &Path) -> Result<TrackSet> {
    parse_tracks(&read_text(path)?, &path.display().to_string())
}

pub fn write_tracks(path: &Path, tracks: &TrackSet) -> Result<()> {
    write_text(path, &format_tracks(tracks))
}

/// Everything a fit consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    pub cameras: Vec<Camera>,
    pub trajectories: Vec<Trajectory>,
    /// Pixel observations of each trajectory (given, or projected from world tracks).
    pub observations: Vec<Track2d>,
    pub frames: FrameSet,
}

impl SceneInputs {
    /// Checks frame counts and sizes across cameras, tracks and images, and the
    /// leading valid window of every trajectory.
    pub fn validate(&self, window: usize) -> Result<()> {
        let t = self.cameras.len();
        if self.frames.len() != t {
            return Err(Error::Consistency(format!("{t} cameras but {} frames", self.frames.len())));
        }
        for (i, tr) in self.trajectories.iter().enumerate() {
            if tr.len() != t {
                return Err(Error::Consistency(format!("track {i} spans {} frames, cameras span {t}", tr.len())));
            }
            if tr.leading_valid() < window.min(t) {
                return Err(Error::Consistency(format!(
                    "track {i} has only {} leading valid frames, {window} required",
                    tr.leading_valid()
                )));
            }
        }
        let (w, h) = self.frames.dims();
        for (i, c) in self.cameras.iter().enumerate() {
            if (c.width, c.height) != (w, h) {
                return Err(Error::Consistency(format!(
                    "camera {i} is {}x{} but frames are {w}x{h}",
                    c.width, c.height
                )));
            }
        }
        Ok(())
    }
}

/// Converts either track flavour into world trajectories plus pixel observations.
pub fn resolve_tracks(tracks: TrackSet, cameras: &[Camera]) -> Result<(Vec<Trajectory>, Vec<Track2d>)> {
    if tracks.frames() != cameras.len() && !tracks.is_empty() {
        return Err(Error::Consistency(format!(
            "tracks span {} frames but there are {} cameras",
            tracks.frames(),
            cameras.len()
        )));
    }
    match tracks {
        TrackSet::World(trajs) => {
            let obs = trajs.iter().map(|t| project_trajectory(t, cameras)).collect::<Result<_>>()?;
            Ok((trajs, obs))
        }
        TrackSet::Pixel(obs) => {
            let trajs = obs.iter().map(|t| lift_track(t, cameras)).collect::<Result<_>>()?;
            Ok((trajs, obs))
        }
    }
}

pub fn read_frames(dir: &Path, count: usize) -> Result<FrameSet> {
    let images = (0..count)
        .map(|t| Image::read_ppm(&dir.join(frame_file_name(t))))
        .collect::<Result<Vec<_>>>()?;
    FrameSet::new(images)
}

pub fn write_frames(dir: &Path, frames: &FrameSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, img) in frames.iter().enumerate() {
        img.write_ppm(&dir.join(frame_file_name(t)))?;
    }
    Ok(())
}

pub fn load_scene_inputs(dir: &Path) -> Result<SceneInputs> {
    load_scene_inputs_with_window(dir, DEFAULT_WINDOW)
}

pub fn load_scene_inputs_with_window(dir: &Path, window: usize) -> Result<SceneInputs> {
    let cameras = read_cameras(&dir.join(CAMERAS_FILE))?;
    let tracks = read_tracks(&dir.join(TRACKS_FILE))?;
    let (trajectories, observations) = resolve_tracks(tracks, &cameras)?;
    let frames = read_frames(&dir.join(FRAMES_DIR), cameras.len())?;
    let inputs = SceneInputs {
        cameras,
        trajectories,
        observations,
        frames,
    };
    inputs.validate(window)?;
    Ok(inputs)
}

/// Writes cameras, world tracks and frames under `dir`.
pub fn save_scene_inputs(dir: &Path, inputs: &SceneInputs) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_cameras(&dir.join(CAMERAS_FILE), &inputs.cameras)?;
    write_tracks(&dir.join(TRACKS_FILE), &TrackSet::World(inputs.trajectories.clone()))?;
    write_frames(&dir.join(FRAMES_DIR), &inputs.frames)
}

/// `key=value` lines; `#` starts a comment line. Duplicate keys are errors.
pub fn parse_key_values(text: &str, path: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (line, l) in content_lines(text) {
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::parse(path, line, format!("expected key=value, found `{l}`")))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::parse(path, line, "empty key"));
        }
        if out.insert(k.clone(), (line, v.trim().to_string())).is_some() {
            return Err(Error::parse(path, line, format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, (usize, String)>> {
    parse_key_values(&read_text(path)?, &path.display().to_string())
}

const FIELD_MAGIC: &str = "# origs-field";

/// Header line then `id t qw qx qy qz x y z valid` per anchor and frame.
pub fn format_field(field: &OrientationField) -> String {
    let cfg = field.config();
    let mut s = format!(
        "{FIELD_MAGIC} anchors={} frames={} k={} window={}\n",
        field.len(),
        field.frames(),
        cfg.k,
        cfg.window
    );
    for a in field.anchors() {
        for t in 0..field.frames() {
            let q = a.orientations[t].wxyz();
            let p = a.positions[t];
            let _ = writeln!(
                s,
                "{} {t} {} {} {} {} {} {} {} {}",
                a.id, q[0], q[1], q[2], q[3], p.x, p.y, p.z, a.valid[t] as u8
            );
        }
    }
    s
}

pub fn parse_field(text: &str, path: &str) -> Result<OrientationField> {
    let mut all = text.lines();
    let header = all.next().ok_or_else(|| Error::parse(path, 1, "empty field dump"))?;
    let rest = header
        .strip_prefix(FIELD_MAGIC)
        .ok_or_else(|| Error::parse(path, 1, "not an orientation-field dump"))?;
    let mut meta = BTreeMap::new();
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(path, 1, format!("bad header token `{tok}`")))?;
        let v: usize = v.parse().map_err(|_| Error::parse(path, 1, format!("bad header value `{tok}`")))?;
        meta.insert(k, v);
    }
    let get = |k: &str| meta.get(k).copied().ok_or_else(|| Error::parse(path, 1, format!("header lacks `{k}`")));
    let (count, frames) = (get("anchors")?, get("frames")?);
    let config = FieldConfig {
        k: get("k")?,
        window: get("window")?,
    };
    let mut lines = content_lines(text);
    let mut anchors = Vec::with_capacity(count);
    for n in 0..count {
        let mut a = OrientedAnchor {
            id: 0,
            positions: Vec::with_capacity(frames),
            orientations: Vec::with_capacity(frames),
            valid: Vec::with_capacity(frames),
        };
        for t in 0..frames {
            let (line, l) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("anchor {n} ends before frame {t}")))?;
            let f = Fields::new(path, line, l, 10)?;
            let id: usize = f.get(0, "id")?;
            if t == 0 {
                a.id = id;
            } else if id != a.id {
                return Err(f.err(format!("anchor id changed from {} to {id} within a block", a.id)));
            }
            let ft: usize = f.get(1, "t")?;
            if ft != t {
                return Err(f.err(format!("frame index {ft} out of sequence, expected {t}")));
            }
            a.orientations.push(unit_rotation(&f, 2)?);
            a.positions.push(Vector3::new(f.finite(6, "x")?, f.finite(7, "y")?, f.finite(8, "z")?));
            a.valid.push(f.flag(9, "valid")?);
        }
        anchors.push(a);
    }
    if let Some((line, _)) = lines.next() {
        return Err(Error::parse(path, line, "unexpected data after the last anchor"));
    }
    OrientationField::from_parts(anchors, config)
}

pub fn write_field(path: &Path, field: &OrientationField) -> Result<()> {
    write_text(path, &format_field(field))
}

pub fn read_field(path: &Path) -> Result<OrientationField> {
    parse_field(&read_text(path)?, &path.display().to_string())
}

const PRIMITIVE_MAGIC: &[u8; 8] = b"ORIGSHG1";
/// f64 values per primitive after the id and track words.
pub const PRIMITIVE_RECORD_VALUES: usize = 74;

fn push_primitive(out: &mut Vec<f64>, hg: &HyperGaussian) {
    out.extend(hg.mu_p.iter());
    out.extend(hg.scale.iter());
    out.extend(hg.rotation.wxyz());
    out.push(hg.opacity);
    out.extend(hg.color.iter());
    out.extend(hg.state.dp.iter());
    out.extend(hg.state.dscale.iter());
    out.extend(hg.state.drot.0.iter());
    out.push(hg.state.t);
    out.extend(hg.state.orientation.wxyz());
    out.extend(hg.cov.packed());
    for r in 0..9 {
        for c in 0..4 {
            out.push(hg.cov.cross[(r, c)]);
        }
    }
}

fn v3(v: &[f64]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn pop_primitive(id: u64, track: Option<usize>, v: &[f64]) -> Result<HyperGaussian> {
    let rot = |s: &[f64]| Rotation::from_wxyz(s[0], s[1], s[2], s[3]);
    let mut cov = FactoredCovariance::new(Matrix4::zeros(), Mat9x4::zeros());
    cov.set_packed(&v[28..38]);
    for r in 0..9 {
        for c in 0..4 {
            cov.cross[(r, c)] = v[38 + r * 4 + c];
        }
    }
    Ok(HyperGaussian {
        id,
        track,
        mu_p: v3(&v[0..3]),
        scale: v3(&v[3..6]),
        rotation: rot(&v[6..10])?,
        opacity: v[10],
        color: v3(&v[11..14]),
        state: DynamicStateMean {
            dp: v3(&v[14..17]),
            dscale: v3(&v[17..20]),
            drot: TangentVector3(v3(&v[20..23])),
            t: v[23],
            orientation: rot(&v[24..28])?,
        },
        cov,
    })
}

/// Little-endian binary dump: magic, count, then per primitive `id: u64`,
/// `track: i64` (-1 for none) and [`PRIMITIVE_RECORD_VALUES`] f64 values.
pub fn encode_primitives(prims: &[HyperGaussian]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + prims.len() * (16 + 8 * PRIMITIVE_RECORD_VALUES));
    out.extend_from_slice(PRIMITIVE_MAGIC);
    out.extend_from_slice(&(prims.len() as u64).to_le_bytes());
    let mut vals = Vec::with_capacity(PRIMITIVE_RECORD_VALUES);
    for hg in prims {
        out.extend_from_slice(&hg.id.to_le_bytes());
        out.extend_from_slice(&hg.track.map_or(-1i64, |t| t as i64).to_le_bytes());
        vals.clear();
        push_primitive(&mut vals, hg);
        debug_assert_eq!(vals.len(), PRIMITIVE_RECORD_VALUES);
        for v in &vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_primitives(bytes: &[u8], path: &str) -> Result<Vec<HyperGaussian>> {
    let bad = |msg: &str| Error::parse(path, 0, msg);
    if bytes.len() < 16 || &bytes[0..8] != PRIMITIVE_MAGIC {
        return Err(bad("not a primitive dump"));
    }
    let word = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().expect("8 bytes") };
    let count = u64::from_le_bytes(word(8)) as usize;
    let record = 16 + 8 * PRIMITIVE_RECORD_VALUES;
    if bytes.len() != 16 + count * record {
        return Err(bad("primitive dump has the wrong length"));
    }
    let mut prims = Vec::with_capacity(count);
    let mut vals = vec![0.0; PRIMITIVE_RECORD_VALUES];
    for n in 0..count {
        let base = 16 + n * record;
        let id = u64::from_le_bytes(word(base));
        let track = i64::from_le_bytes(word(base + 8));
        let track = if track < 0 { None } else { Some(track as usize) };
        for (k, v) in vals.iter_mut().enumerate() {
            *v = f64::from_le_bytes(word(base + 16 + 8 * k));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, 0, format!("primitive {n} holds non-finite values")));
        }
        prims.push(pop_primitive(id, track, &vals).map_err(|e| Error::parse(path, 0, format!("primitive {n}: {e}")))?);
    }
    Ok(prims)
}

pub fn write_primitives(path: &Path, prims: &[HyperGaussian]) -> Result<()> {
    fs::write(path, encode_primitives(prims)).map_err(|e| Error::io(path, e))
}

pub fn read_primitives(path: &Path) -> Result<Vec<HyperGaussian>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_primitives(&bytes, &path.display().to_string())
}
