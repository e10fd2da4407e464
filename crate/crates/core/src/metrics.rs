//! Image and correspondence quality metrics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tracks::Track2d;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Default PCK-T threshold as a fraction of the image diagonal.
pub const PCK_THRESHOLD: f64 = 0.0005;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_size(b)?;
    let n = a.data().len();
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian; the 2D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable weighted window sums over valid positions for one channel.
fn filter(src: &[f64], width: usize, height: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, w) in win.iter().enumerate() {
                s += w * src[y * width + x + k];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, w) in win.iter().enumerate() {
                s += w * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter`]: scatters window values back onto the image grid.
fn filter_adjoint(src: &[f64], width: usize, height: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (k, w) in win.iter().enumerate() {
                rows[(y + k) * ow + x] += w * v;
            }
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (k, w) in win.iter().enumerate() {
                out[y * width + x + k] += w * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

fn check_ssim_size(a: &Image) -> Result<()> {
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::DegenerateInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

struct SsimMaps {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
}

fn ssim_maps(x: &[f64], y: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> SsimMaps {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter(x, w, h, win);
    let mu_y = filter(y, w, h, win);
    let exx = filter(&sq(x, x), w, h, win);
    let eyy = filter(&sq(y, y), w, h, win);
    let exy = filter(&sq(x, y), w, h, win);
    let n = mu_x.len();
    let mut m = SsimMaps {
        sxx: vec![0.0; n],
        syy: vec![0.0; n],
        sxy: vec![0.0; n],
        mu_x,
        mu_y,
    };
    for i in 0..n {
        m.sxx[i] = exx[i] - m.mu_x[i] * m.mu_x[i];
        m.syy[i] = eyy[i] - m.mu_y[i] * m.mu_y[i];
        m.sxy[i] = exy[i] - m.mu_x[i] * m.mu_y[i];
    }
    m
}

/// Mean SSIM over valid 11x11 Gaussian windows and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_grad(a, b, false)?.0)
}

/// SSIM and, when requested, its gradient with respect to the first image.
pub fn ssim_with_grad(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.ensure_same_size(b)?;
    check_ssim_size(a)?;
    let (w, h) = a.dims();
    let win = gaussian_window();
    let windows = ((w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1)) as f64;
    let norm = 1.0 / (3.0 * windows);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let m = ssim_maps(&x, &y, w, h, &win);
        let n = m.mu_x.len();
        let (mut ga, mut gb, mut gc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let a1 = 2.0 * m.mu_x[i] * m.mu_y[i] + SSIM_C1;
            let a2 = 2.0 * m.sxy[i] + SSIM_C2;
            let b1 = m.mu_x[i] * m.mu_x[i] + m.mu_y[i] * m.mu_y[i] + SSIM_C1;
            let b2 = m.sxx[i] + m.syy[i] + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_mu = 2.0 * m.mu_y[i] * a2 / (b1 * b2) - s * 2.0 * m.mu_x[i] / b1;
                let d_sxx = -s / b2;
                let d_sxy = 2.0 * a1 / (b1 * b2);
                ga[i] = (d_mu - 2.0 * d_sxx * m.mu_x[i] - d_sxy * m.mu_y[i]) * norm;
                gb[i] = 2.0 * d_sxx * norm;
                gc[i] = d_sxy * norm;
            }
        }
        if let Some(g) = grad.as_mut() {
            let fa = filter_adjoint(&ga, w, h, &win);
            let fb = filter_adjoint(&gb, w, h, &win);
            let fc = filter_adjoint(&gc, w, h, &win);
            let data = g.data_mut();
            for p in 0..w * h {
                data[p * 3 + c] = fa[p] + x[p] * fb[p] + y[p] * fc[p];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Fraction of valid `(track, frame)` pairs whose pixel error is strictly
/// below `threshold_frac * diagonal`. Invalid predictions count as misses.
pub fn pck_t(predicted: &[Track2d], truth: &[Track2d], threshold_frac: f64, diagonal: f64) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Consistency(format!(
            "{} predicted tracks vs {} ground-truth tracks",
            predicted.len(),
            truth.len()
        )));
    }
    let threshold = threshold_frac * diagonal;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, g) in predicted.iter().zip(truth) {
        if p.len() != g.len() {
            return Err(Error::Consistency(format!("track spans {} frames vs {}", p.len(), g.len())));
        }
        for t in 0..g.len() {
            if !g.valid[t] {
                continue;
            }
            total += 1;
            if p.valid[t] && err2(&p.pixels[t], &g.pixels[t]) < threshold {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::DegenerateInput("no valid ground-truth observations".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn err2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a - b).norm()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub pck_t: Option<f64>,
    pub seconds: f64,
    pub num_gaussians: Option<usize>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim\n");
        for f in &self.frames {
            let _ = writeln!(s, "{},{},{}", f.frame, f.psnr, f.ssim);
        }
        if let Some(p) = self.pck_t {
            let _ = writeln!(s, "pck_t,{p}");
        }
        let _ = writeln!(s, "seconds,{}", self.seconds);
        if let Some(n) = self.num_gaussians {
            let _ = writeln!(s, "num_gaussians,{n}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses the per-frame rows and footers written by [`EvalReport::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rep = EvalReport {
            frames: Vec::new(),
            pck_t: None,
            seconds: 0.0,
            num_gaussians: None,
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::parse("report", i + 1, format!("malformed row `{line}`"));
            match parts.as_slice() {
                ["pck_t", v] => rep.pck_t = Some(v.parse().map_err(|_| bad())?),
                ["seconds", v] => rep.seconds = v.parse().map_err(|_| bad())?,
                ["num_gaussians", v] => rep.num_gaussians = Some(v.parse().map_err(|_| bad())?),
                [f, p, s] => rep.frames.push(FrameScore {
                    frame: f.parse().map_err(|_| bad())?,
                    psnr: p.parse().map_err(|_| bad())?,
                    ssim: s.parse().map_err(|_| bad())?,
                }),
                _ => return Err(bad()),
            }
        }
        Ok(rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 12, 12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, [0.5; 3]);
        let c = Image::filled(4, 4, [0.6; 3]);
        assert_abs_diff_eq!(psnr(&b, &c).unwrap(), 20.0, epsilon = 1e-9);
        let d = random_image(&mut rng, 12, 12);
        let m: f64 = a.data().iter().zip(d.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (12.0 * 12.0 * 3.0);
        assert_abs_diff_eq!(psnr(&a, &d).unwrap(), -10.0 * m.log10(), epsilon = 1e-9);
        assert_eq!(psnr(&a, &d).unwrap(), psnr(&d, &a).unwrap());
        assert!(psnr(&a, &b).is_err());
    }

    /// Direct 2D convolution with explicit window sums.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let g = gaussian_window();
        let (w, h) = a.dims();
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..3 {
            for oy in 0..=h - SSIM_WINDOW {
                for ox in 0..=w - SSIM_WINDOW {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..SSIM_WINDOW {
                        for i in 0..SSIM_WINDOW {
                            let wt = g[i] * g[j];
                            let x = a.pixel(ox + i, oy + j)[c];
                            let y = b.pixel(ox + i, oy + j)[c];
                            mx += wt * x;
                            my += wt * y;
                            xx += wt * x * x;
                            yy += wt * y * y;
                            xy += wt * x * y;
                        }
                    }
                    let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 13);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let noisy = Image::from_data(16, 13, a.data().iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect()).unwrap();
        assert_abs_diff_eq!(ssim(&a, &noisy).unwrap(), ssim_direct(&a, &noisy), epsilon = 1e-6);
        assert_abs_diff_eq!(ssim(&a, &noisy).unwrap(), ssim(&noisy, &a).unwrap(), epsilon = 1e-12);
        assert!(ssim(&Image::new(10, 20), &Image::new(10, 20)).is_err());
    }

    #[test]
    fn ssim_of_negative_is_negative() {
        let mut img = Image::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let v = ((x / 2 + y / 3) % 2) as f64;
                img.set_pixel(x, y, [v, 1.0 - v, v]);
            }
        }
        let neg = Image::from_data(16, 16, img.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&img, &neg).unwrap();
        assert!((-1.0..0.0).contains(&s), "{s}");
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 14, 12);
        let b = random_image(&mut rng, 14, 12);
        let (_, g) = ssim_with_grad(&a, &b, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for _ in 0..40 {
            let k = rng.random_range(0..a.data().len());
            let mut p = a.clone();
            p.data_mut()[k] += h;
            let mut m = a.clone();
            m.data_mut()[k] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(fd, g.data()[k], epsilon = 1e-8);
        }
    }

    fn track(points: &[(f64, f64)], valid: &[bool]) -> Track2d {
        Track2d::new(points.iter().map(|&(x, y)| Vector2::new(x, y)).collect(), vec![1.0; points.len()], valid.to_vec()).unwrap()
    }

    #[test]
    fn pck_cases() {
        let gt = vec![track(&[(0.0, 0.0), (5.0, 5.0)], &[true, true])];
        assert_eq!(pck_t(&gt, &gt, 0.0005, 100.0).unwrap(), 1.0);
        let at = vec![track(&[(1.0, 0.0), (5.0, 6.0)], &[true, true])];
        assert_eq!(pck_t(&at, &gt, 0.25, 4.0).unwrap(), 0.0);
        let half = vec![track(&[(0.01, 0.0), (5.0, 5.0)], &[true, false])];
        assert_eq!(pck_t(&half, &gt, 0.0005, 100.0).unwrap(), 0.5);
        assert!(pck_t(&[], &gt, 0.0005, 100.0).is_err());
    }

    #[test]
    fn pck_matches_brute_force_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 30;
        let frames = 8;
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..n {
            let pts: Vec<(f64, f64)> = (0..frames).map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))).collect();
            let valid: Vec<bool> = (0..frames).map(|_| rng.random_bool(0.8)).collect();
            let noisy: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x + rng.random_range(-0.1..0.1), y + rng.random_range(-0.1..0.1))).collect();
            gt.push(track(&pts, &valid));
            pred.push(track(&noisy, &vec![true; frames]));
        }
        let diag = (64.0f64 * 64.0 * 2.0).sqrt();
        let thr = 0.001;
        let (mut hit, mut tot) = (0, 0);
        for i in 0..n {
            for t in 0..frames {
                if gt[i].valid[t] {
                    tot += 1;
                    let d = ((pred[i].pixels[t].x - gt[i].pixels[t].x).powi(2) + (pred[i].pixels[t].y - gt[i].pixels[t].y).powi(2)).sqrt();
                    if d < thr * diag {
                        hit += 1;
                    }
                }
            }
        }
        assert_eq!(pck_t(&pred, &gt, thr, diag).unwrap(), hit as f64 / tot as f64);
    }

    proptest! {
        #[test]
        fn pck_monotone_in_threshold(seed in 0u64..200, a in 0.0f64..0.01, b in 0.0f64..0.01) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<Track2d> = (0..5).map(|_| track(&[(rng.random_range(0.0..10.0), 0.0), (1.0, 1.0)], &[true, true])).collect();
            let pred: Vec<Track2d> = gt.iter().map(|g| track(&[(g.pixels[0].x + rng.random_range(-0.5..0.5), 0.0), (1.2, 1.0)], &[true, true])).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(pck_t(&pred, &gt, lo, 90.0).unwrap() <= pck_t(&pred, &gt, hi, 90.0).unwrap());
        }
    }

    #[test]
    fn report_csv_round_trip() {
        let rep = EvalReport {
            frames: vec![FrameScore { frame: 0, psnr: 31.5, ssim: 0.97 }, FrameScore { frame: 3, psnr: 29.25, ssim: 0.9 }],
            pck_t: Some(0.75),
            seconds: 1.5,
            num_gaussians: Some(40),
        };
        let csv = rep.to_csv();
        assert!(csv.starts_with("frame,psnr,ssim\n0,31.5,0.97\n"));
        assert!(csv.contains("\npck_t,0.75\nseconds,1.5\n"));
        assert_eq!(EvalReport::parse_csv(&csv).unwrap(), rep);
    }
}
