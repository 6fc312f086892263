//! Grayscale images: PGM input/output and synthetic test images.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SlmError};
use crate::linops::{
    default_haar_levels, make_haar_wavelet_2d, make_isotropic_tv_2d, make_stack, DenseOperator,
    GroupLayout,
};
use crate::model::ModelSpec;
use crate::potentials::PotentialSpec;

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(SlmError::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// 8-bit quantization with clamping.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn mean_power(&self) -> f64 {
        self.pixels.iter().map(|v| v * v).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Writes a binary (P5) or ASCII (P2) 8-bit PGM.
pub fn write_pgm(path: &Path, img: &GrayImage, binary: bool) -> Result<()> {
    let io = |e: std::io::Error| SlmError::Format(format!("{}: {e}", path.display()));
    let mut f = fs::File::create(path).map_err(io)?;
    let bytes = img.to_bytes();
    if binary {
        write!(f, "P5\n{} {}\n255\n", img.width, img.height).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
    } else {
        writeln!(f, "P2\n{} {}\n255", img.width, img.height).map_err(io)?;
        for row in bytes.chunks(img.width) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(f, "{}", line.join(" ")).map_err(io)?;
        }
    }
    Ok(())
}

/// Reads a P2 or P5 PGM, scaling intensities by `1 / maxval`.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let data = fs::read(path).map_err(|e| SlmError::Format(format!("{}: {e}", path.display())))?;
    parse_pgm(&data).map_err(|e| SlmError::Format(format!("{}: {e}", path.display())))
}

fn parse_pgm(data: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        header.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    let magic = header[0].as_str();
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header field {s:?}"))
    };
    let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let n = width * height;
    let scale = 1.0 / maxval as f64;
    let pixels: Vec<f64> = match magic {
        "P5" => {
            pos += 1; // single whitespace after maxval
            let bpp = if maxval < 256 { 1 } else { 2 };
            let body = data.get(pos..pos + n * bpp).ok_or("truncated pixel data")?;
            if bpp == 1 {
                body.iter().map(|&b| b as f64 * scale).collect()
            } else {
                body.chunks(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
                    .collect()
            }
        }
        "P2" => {
            let text = String::from_utf8_lossy(&data[pos..]);
            let vals: std::result::Result<Vec<f64>, String> = text
                .lines()
                .map(|l| l.split('#').next().unwrap_or(""))
                .flat_map(str::split_whitespace)
                .take(n)
                .map(|t| {
                    t.parse::<f64>()
                        .map(|v| v * scale)
                        .map_err(|_| format!("bad pixel {t:?}"))
                })
                .collect();
            let vals = vals?;
            if vals.len() != n {
                return Err("truncated pixel data".into());
            }
            vals
        }
        other => return Err(format!("unsupported magic {other:?}")),
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

/// `(value, center x, center y, semi-axis a, semi-axis b, rotation in degrees)` on `[-1, 1]^2`.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.0, 0.0, 0.69, 0.92, 0.0),
    (-0.8, 0.0, -0.0184, 0.6624, 0.874, 0.0),
    (-0.2, 0.22, 0.0, 0.11, 0.31, -18.0),
    (-0.2, -0.22, 0.0, 0.16, 0.41, 18.0),
    (0.1, 0.0, 0.35, 0.21, 0.25, 0.0),
    (0.1, 0.0, 0.1, 0.046, 0.046, 0.0),
    (0.1, 0.0, -0.1, 0.046, 0.046, 0.0),
    (0.1, -0.08, -0.605, 0.046, 0.023, 0.0),
    (0.1, 0.0, -0.606, 0.023, 0.023, 0.0),
    (0.1, 0.06, -0.605, 0.023, 0.046, 0.0),
];

/// Piecewise-constant ellipse phantom. Seed 0 gives the modified Shepp-Logan
/// layout; other seeds jitter the inner ellipses.
pub fn phantom(side: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellipses = SHEPP_LOGAN;
    if seed != 0 {
        for e in ellipses.iter_mut().skip(2) {
            e.1 += rng.random_range(-0.05..0.05);
            e.2 += rng.random_range(-0.05..0.05);
            e.5 += rng.random_range(-15.0..15.0);
        }
    }
    let mut pixels = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let x = (2.0 * c as f64 + 1.0) / side as f64 - 1.0;
            let y = 1.0 - (2.0 * r as f64 + 1.0) / side as f64;
            let mut v = 0.0;
            for &(val, cx, cy, a, b, deg) in &ellipses {
                let (s, co) = deg.to_radians().sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let xr = dx * co + dy * s;
                let yr = -dx * s + dy * co;
                if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                    v += val;
                }
            }
            pixels[r * side + c] = v;
        }
    }
    let max = pixels.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        pixels
            .iter_mut()
            .for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    GrayImage {
        width: side,
        height: side,
        pixels,
    }
}

/// Smooth random field plus a few sharp ridges, rescaled to `[0, 1]`.
pub fn smooth_edges(side: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..2.0),
                rng.random_range(0.0..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    // ridges: half-planes a x + b y > c adding a step
    let ridges: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
            (
                t.cos(),
                t.sin(),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.5..1.5),
            )
        })
        .collect();
    let mut pixels = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let x = c as f64 / side as f64 * 2.0 - 1.0;
            let y = r as f64 / side as f64 * 2.0 - 1.0;
            let mut v = 0.0;
            for &(amp, fx, fy, ph) in &waves {
                v += 0.3 * amp * (std::f64::consts::PI * (fx * x + fy * y) + ph).cos();
            }
            for &(a, b, cst, h) in &ridges {
                if a * x + b * y > cst {
                    v += h;
                }
            }
            pixels[r * side + c] = v;
        }
    }
    let (lo, hi) = pixels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    pixels.iter_mut().for_each(|v| *v = (*v - lo) / span);
    GrayImage {
        width: side,
        height: side,
        pixels,
    }
}

/// Image prior without measurements: `B` stacks a Haar transform (one
/// potential per coefficient) over isotropic TV (one potential per gradient
/// pair, single differences on the last row and column).
///
/// Fill in the data with [`ModelSpec::with_measurements`].
pub fn image_prior(
    height: usize,
    width: usize,
    sigma2: f64,
    wavelet: PotentialSpec,
    tv: PotentialSpec,
) -> Result<ModelSpec> {
    let levels = default_haar_levels(height.min(width));
    let haar = make_haar_wavelet_2d(height, width, levels)?;
    let (tv_op, tv_sizes) = make_isotropic_tv_2d(height, width)?;
    let n_haar = haar.rows();
    let b = make_stack(vec![haar, tv_op], vec![1.0, 1.0])?;
    let mut sizes = vec![1; n_haar];
    sizes.extend(&tv_sizes);
    let mut which = vec![0; n_haar];
    which.extend(std::iter::repeat_n(1, tv_sizes.len()));
    let layout = GroupLayout::from_sizes(&sizes, which)?;
    let n = height * width;
    let x = Arc::new(DenseOperator::new(DMatrix::zeros(0, n)));
    ModelSpec::new(x, b, Vec::new(), sigma2, vec![wavelet, tv], layout)
}

/// Excess kurtosis of a sample.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let img = phantom(16, 0);
        for binary in [true, false] {
            let p = dir.path().join(format!("p{binary}.pgm"));
            write_pgm(&p, &img, binary).unwrap();
            let back = read_pgm(&p).unwrap();
            assert_eq!((back.width, back.height), (16, 16));
            for (a, b) in back.pixels.iter().zip(&img.pixels) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let img = parse_pgm(b"P2\n# comment\n2 1\n# another\n4\n0 4\n").unwrap();
        assert_eq!(img.pixels, vec![0.0, 1.0]);
        assert!(parse_pgm(b"P3\n1 1\n255\n0 0 0\n").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn phantom_is_piecewise_constant() {
        let img = phantom(32, 0);
        let mut levels: Vec<u8> = img.to_bytes();
        levels.sort_unstable();
        levels.dedup();
        assert!(levels.len() >= 2);
        assert_eq!(phantom(32, 3), phantom(32, 3));
    }

    #[test]
    fn smooth_edges_has_heavy_tailed_differences() {
        let img = smooth_edges(32, 5);
        let d: Vec<f64> = (0..32)
            .flat_map(|r| (0..31).map(move |c| (r, c)))
            .map(|(r, c)| img.pixels[r * 32 + c + 1] - img.pixels[r * 32 + c])
            .collect();
        assert!(excess_kurtosis(&d) > 0.0);
    }
}
