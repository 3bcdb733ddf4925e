//! Synthetic ear-image data, photometric/geometric augmentation, and
//! portable pixmap IO.
//!
//! The generator renders each identity as an elliptical contour whose
//! radius is modulated by a small set of Fourier harmonics, with
//! identity-specific tint and geometry and sample-specific pose,
//! illumination, and noise. Images are [C, H, W] tensors in [0, 1].

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Demographic-style tags attached to each identity, used for subgroup
/// reporting in evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subgroup {
    pub ethnicity: String,
    pub gender: String,
}

/// One labeled image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub identity: usize,
    pub sample_id: String,
    pub subgroup: Subgroup,
}

/// An ordered collection of samples with contiguous identity labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_identities: usize,
    pub image_size: usize,
}

/// Mix several keys into one seed so derived random streams differ.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    h
}

/// Tags assigned to identity `i`: ethnicity alternates every identity,
/// gender every two, giving four balanced cells.
pub fn subgroup_for_identity(i: usize) -> Subgroup {
    Subgroup {
        ethnicity: format!("eth{}", i % 2),
        gender: format!("gen{}", (i / 2) % 2),
    }
}

struct IdentityShape {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    amps: [f64; 3],
    phases: [f64; 3],
    tint: [f64; 3],
}

fn identity_shape(seed: u64, identity: usize, size: usize) -> IdentityShape {
    let mut r = ChaCha20Rng::seed_from_u64(mix_seed(&[seed, 1, identity as u64]));
    let s = size as f64;
    IdentityShape {
        cx: s * r.gen_range(0.45..0.55),
        cy: s * r.gen_range(0.45..0.55),
        rx: s * r.gen_range(0.20..0.30),
        ry: s * r.gen_range(0.30..0.42),
        amps: [
            r.gen_range(0.0..0.08),
            r.gen_range(0.0..0.08),
            r.gen_range(0.0..0.06),
        ],
        phases: [
            r.gen_range(0.0..2.0 * PI),
            r.gen_range(0.0..2.0 * PI),
            r.gen_range(0.0..2.0 * PI),
        ],
        tint: [
            r.gen_range(0.80..0.95),
            r.gen_range(0.60..0.75),
            r.gen_range(0.48..0.64),
        ],
    }
}

fn render_sample(shape: &IdentityShape, seed: u64, identity: usize, s_idx: usize, size: usize) -> Tensor {
    let mut r = ChaCha20Rng::seed_from_u64(mix_seed(&[seed, 2, identity as u64, s_idx as u64]));
    let s = size as f64;
    let pose: f64 = r.gen_range(-0.14..0.14);
    let dx = s * r.gen_range(-0.03..0.03);
    let dy = s * r.gen_range(-0.03..0.03);
    let illum = r.gen_range(0.85..1.15);
    let noise_amp = r.gen_range(0.0..0.03);
    let bg = r.gen_range(0.10..0.30);
    let (cos_p, sin_p) = (pose.cos(), pose.sin());

    let mut img = Tensor::zeros(&[3, size, size]);
    let data = img.data_mut();
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 - (shape.cx + dx);
            let py = y as f64 - (shape.cy + dy);
            let rxp = px * cos_p + py * sin_p;
            let ryp = -px * sin_p + py * cos_p;
            let u = rxp / shape.rx;
            let v = ryp / shape.ry;
            let rho0 = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let mut radius = 1.0;
            for k in 0..3 {
                radius += shape.amps[k] * ((k as f64 + 2.0) * theta + shape.phases[k]).cos();
            }
            let rho = rho0 / radius;
            let noise = noise_amp * r.gen_range(-1.0..1.0);
            let idx = y * size + x;
            if rho < 1.0 {
                let mut tone = 0.45 + 0.5 * rho;
                if rho > 0.8 && rho < 0.95 {
                    tone *= 0.68;
                }
                if rho < 0.35 {
                    tone *= 0.62;
                }
                for c in 0..3 {
                    let val = (tone * shape.tint[c] * illum + noise).clamp(0.0, 1.0);
                    data[c * plane + idx] = val;
                }
            } else {
                let val = (bg + 0.1 * (y as f64 / s) + noise).clamp(0.0, 1.0);
                for c in 0..3 {
                    data[c * plane + idx] = val;
                }
            }
        }
    }
    img
}

/// Generate a synthetic dataset: `per_identity` renders of `identities`
/// distinct contours, fully determined by `seed`.
pub fn synth_dataset(
    identities: usize,
    per_identity: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if identities == 0 || per_identity == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one identity and one sample".into(),
        ));
    }
    if image_size < 16 {
        return Err(Error::Config(format!(
            "synthetic image size must be at least 16, got {}",
            image_size
        )));
    }
    let mut samples = Vec::with_capacity(identities * per_identity);
    for i in 0..identities {
        let shape = identity_shape(seed, i, image_size);
        let subgroup = subgroup_for_identity(i);
        for s in 0..per_identity {
            samples.push(Sample {
                image: render_sample(&shape, seed, i, s, image_size),
                identity: i,
                sample_id: format!("id{:03}_s{:02}", i, s),
                subgroup: subgroup.clone(),
            });
        }
    }
    Ok(Dataset {
        samples,
        num_identities: identities,
        image_size,
    })
}

/// Stack the selected samples into a [B, C, H, W] batch.
pub fn stack_images(samples: &[Sample], indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::Dimension("cannot stack an empty batch".into()));
    }
    let first = &samples[indices[0]].image;
    let shape = first.shape().to_vec();
    let mut out = Vec::with_capacity(indices.len() * first.numel());
    for &i in indices {
        let img = &samples[i].image;
        if img.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "sample {} has shape {:?}, batch expects {:?}",
                samples[i].sample_id,
                img.shape(),
                shape
            )));
        }
        out.extend_from_slice(img.data());
    }
    let mut full = vec![indices.len()];
    full.extend_from_slice(&shape);
    Tensor::from_vec(&full, out)
}

// ── Geometry helpers ──

fn dims_chw(img: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "{}: expected a [C, H, W] image, got {:?}",
            what, s
        )));
    }
    Ok((s[0], s[1], s[2]))
}

fn sample_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let tl = plane[y0 * w + x0];
    let tr = plane[y0 * w + x1];
    let bl = plane[y1 * w + x0];
    let br = plane[y1 * w + x1];
    tl * (1.0 - fy) * (1.0 - fx) + tr * (1.0 - fy) * fx + bl * fy * (1.0 - fx) + br * fy * fx
}

/// Bilinear resize of a [C, H, W] image with corner-aligned coordinates.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims_chw(img, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize target must be positive".into()));
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let sy = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let sx = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let y_off = if out_h > 1 { 0.0 } else { (h - 1) as f64 / 2.0 };
    let x_off = if out_w > 1 { 0.0 } else { (w - 1) as f64 / 2.0 };
    let od = out.data_mut();
    for ci in 0..c {
        let plane = &img.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                od[ci * out_h * out_w + oy * out_w + ox] = sample_clamped(
                    plane,
                    h,
                    w,
                    oy as f64 * sy + y_off,
                    ox as f64 * sx + x_off,
                );
            }
        }
    }
    Ok(out)
}

fn warp(img: &Tensor, map: impl Fn(f64, f64) -> (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = dims_chw(img, "warp")?;
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        let plane = &img.data()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y as f64, x as f64);
                od[ci * h * w + y * w + x] = sample_clamped(plane, h, w, sy, sx);
            }
        }
    }
    Ok(out)
}

/// Rotate about the image center by `angle` radians, replicating edges.
pub fn rotate_image(img: &Tensor, angle: f64) -> Result<Tensor> {
    let (_, h, w) = dims_chw(img, "rotate_image")?;
    let cy = (h - 1) as f64 / 2.0;
    let cx = (w - 1) as f64 / 2.0;
    let (cos_a, sin_a) = (angle.cos(), angle.sin());
    warp(img, |y, x| {
        let dy = y - cy;
        let dx = x - cx;
        (cy + dy * cos_a - dx * sin_a, cx + dy * sin_a + dx * cos_a)
    })
}

/// Translate by (dy, dx) pixels, replicating edges.
pub fn translate_image(img: &Tensor, dy: f64, dx: f64) -> Result<Tensor> {
    warp(img, |y, x| (y - dy, x - dx))
}

/// Mirror along the vertical axis (left-right).
pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims_chw(img, "flip_horizontal")?;
    let mut out = img.clone();
    let od = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            let row = ci * h * w + y * w;
            od[row..row + w].reverse();
        }
    }
    Ok(out)
}

/// Mirror along the horizontal axis (top-bottom).
pub fn flip_vertical(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims_chw(img, "flip_vertical")?;
    let mut out = img.clone();
    let od = out.data_mut();
    for ci in 0..c {
        for y in 0..h / 2 {
            let a = ci * h * w + y * w;
            let b = ci * h * w + (h - 1 - y) * w;
            for x in 0..w {
                od.swap(a + x, b + x);
            }
        }
    }
    Ok(out)
}

/// 3x3 binomial blur with replicated edges.
pub fn blur3(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims_chw(img, "blur3")?;
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    let k = [1.0, 2.0, 1.0];
    for ci in 0..c {
        let plane = &img.data()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, ky) in k.iter().enumerate() {
                    let sy = (y + i).saturating_sub(1).min(h - 1);
                    for (j, kx) in k.iter().enumerate() {
                        let sx = (x + j).saturating_sub(1).min(w - 1);
                        acc += ky * kx * plane[sy * w + sx];
                    }
                }
                od[ci * h * w + y * w + x] = acc / 16.0;
            }
        }
    }
    Ok(out)
}

/// Augmentation policy. Steps run in a fixed order: rotation, color jitter,
/// horizontal flip, vertical flip, translation, random crop, blur, resize
/// to `output_size`, with values clamped to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum rotation magnitude, degrees.
    pub rotation_deg: f64,
    /// Brightness/contrast jitter fraction.
    pub jitter: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Maximum translation as a fraction of the image side.
    pub translate_frac: f64,
    /// Crop side range as fractions of the image side.
    pub crop_scale: (f64, f64),
    pub blur_prob: f64,
    /// Side length of the augmented output.
    pub output_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 10.0,
            jitter: 0.2,
            hflip_prob: 0.5,
            vflip_prob: 0.1,
            translate_frac: 0.05,
            crop_scale: (0.8, 1.0),
            blur_prob: 0.2,
            output_size: 128,
        }
    }
}

/// Smallest crop side the pipeline accepts before falling back to the
/// full frame.
const MIN_CROP_SIDE: usize = 8;

/// Apply the augmentation pipeline to one [C, H, W] image.
pub fn augment(img: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    let (_, h, w) = dims_chw(img, "augment")?;
    let mut out = img.clone();

    if cfg.rotation_deg > 0.0 {
        let a = rng.gen_range(-cfg.rotation_deg..cfg.rotation_deg) * PI / 180.0;
        out = rotate_image(&out, a)?;
    }
    if cfg.jitter > 0.0 {
        let b = rng.gen_range(1.0 - cfg.jitter..1.0 + cfg.jitter);
        let c = rng.gen_range(1.0 - cfg.jitter..1.0 + cfg.jitter);
        for v in out.data_mut() {
            *v = (((*v - 0.5) * c + 0.5) * b).clamp(0.0, 1.0);
        }
    }
    if cfg.hflip_prob > 0.0 && rng.gen_range(0.0..1.0) < cfg.hflip_prob {
        out = flip_horizontal(&out)?;
    }
    if cfg.vflip_prob > 0.0 && rng.gen_range(0.0..1.0) < cfg.vflip_prob {
        out = flip_vertical(&out)?;
    }
    if cfg.translate_frac > 0.0 {
        let t = cfg.translate_frac * h.min(w) as f64;
        let dy = rng.gen_range(-t..t);
        let dx = rng.gen_range(-t..t);
        out = translate_image(&out, dy, dx)?;
    }
    if cfg.crop_scale.1 < 1.0 || cfg.crop_scale.0 < 1.0 {
        let (lo, hi) = cfg.crop_scale;
        if !(lo > 0.0 && hi >= lo && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale range ({}, {}) must satisfy 0 < lo <= hi <= 1",
                lo, hi
            )));
        }
        let frac = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let side = (frac * h.min(w) as f64).round() as usize;
        if side < MIN_CROP_SIDE {
            log::warn!(
                "crop of {}x{} from {}x{} is degenerate; using the full frame",
                side,
                side,
                h,
                w
            );
        } else {
            let y0 = if h > side {
                rng.gen_range(0..=h - side)
            } else {
                0
            };
            let x0 = if w > side {
                rng.gen_range(0..=w - side)
            } else {
                0
            };
            let (c, _, _) = dims_chw(&out, "augment")?;
            let mut crop = Tensor::zeros(&[c, side, side]);
            let cd = crop.data_mut();
            for ci in 0..c {
                let plane = &out.data()[ci * h * w..(ci + 1) * h * w];
                for y in 0..side {
                    let src = (y0 + y) * w + x0;
                    cd[ci * side * side + y * side..ci * side * side + (y + 1) * side]
                        .copy_from_slice(&plane[src..src + side]);
                }
            }
            out = crop;
        }
    }
    if cfg.blur_prob > 0.0 && rng.gen_range(0.0..1.0) < cfg.blur_prob {
        out = blur3(&out)?;
    }
    if cfg.output_size == 0 {
        return Err(Error::Config("augment output_size must be positive".into()));
    }
    let mut resized = bilinear_resize(&out, cfg.output_size, cfg.output_size)?;
    for v in resized.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(resized)
}

// ── Portable pixmap IO ──

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a [3, H, W] image as binary PPM (P6).
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = dims_chw(img, "write_ppm")?;
    if c != 3 {
        return Err(Error::Dimension(format!(
            "write_ppm expects 3 channels, got {}",
            c
        )));
    }
    let mut bytes = Vec::with_capacity(20 + 3 * h * w);
    write!(&mut bytes, "P6\n{} {}\n255\n", w, h)?;
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push(quantize(img.data()[ch * plane + i]));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write a [1, H, W] image as binary PGM (P5).
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = dims_chw(img, "write_pgm")?;
    if c != 1 {
        return Err(Error::Dimension(format!(
            "write_pgm expects 1 channel, got {}",
            c
        )));
    }
    let mut bytes = Vec::with_capacity(20 + h * w);
    write!(&mut bytes, "P5\n{} {}\n255\n", w, h)?;
    for i in 0..h * w {
        bytes.push(quantize(img.data()[i]));
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Load("pixmap header ended early".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::Load(format!("pixmap {} {:?} is not a number", what, tok)))
}

/// Read a binary PPM (P6) or PGM (P5) file into a [3, H, W] tensor in
/// [0, 1]; grayscale input is replicated across channels.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3usize,
        "P5" => 1usize,
        other => {
            return Err(Error::Load(format!(
                "unsupported pixmap magic {:?} in {}",
                other,
                path.display()
            )))
        }
    };
    let w = parse_dim(&next_token(&bytes, &mut pos)?, "width")?;
    let h = parse_dim(&next_token(&bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(&next_token(&bytes, &mut pos)?, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Load(format!(
            "pixmap maxval {} unsupported (only 8-bit)",
            maxval
        )));
    }
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Load(format!(
            "pixmap data truncated: need {} bytes, have {}",
            need,
            bytes.len().saturating_sub(pos)
        )));
    }
    let raw = &bytes[pos..pos + need];
    let plane = w * h;
    let mut img = Tensor::zeros(&[3, h, w]);
    let data = img.data_mut();
    for i in 0..plane {
        if channels == 3 {
            for c in 0..3 {
                data[c * plane + i] = raw[i * 3 + c] as f64 / maxval as f64;
            }
        } else {
            let v = raw[i] as f64 / maxval as f64;
            for c in 0..3 {
                data[c * plane + i] = v;
            }
        }
    }
    Ok(img)
}

// ── Directory round trip ──

/// Write every sample as `{sample_id}.ppm` plus a `metadata.csv` index.
pub fn save_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join("metadata.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .write_record(["sample_id", "identity", "ethnicity", "gender", "file"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for s in &dataset.samples {
        let file = format!("{}.ppm", s.sample_id);
        write_ppm(&dir.join(&file), &s.image)?;
        writer
            .write_record([
                s.sample_id.as_str(),
                &s.identity.to_string(),
                &s.subgroup.ethnicity,
                &s.subgroup.gender,
                &file,
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Load a dataset written by [`save_dir`] (or assembled by hand in the same
/// layout). Rows are ordered by sample id; identity labels must be a
/// contiguous 0..K range, and all images must share one square size.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let meta = dir.join("metadata.csv");
    let mut reader = csv::Reader::from_path(&meta)
        .map_err(|e| Error::Load(format!("cannot read {}: {}", meta.display(), e)))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Load(format!("bad csv header: {}", e)))?
        .clone();
    let want = ["sample_id", "identity", "ethnicity", "gender", "file"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Load(format!(
            "metadata.csv columns {:?} do not match {:?}",
            headers, want
        )));
    }
    let mut rows: Vec<(String, usize, Subgroup, String)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Load(format!("bad csv row: {}", e)))?;
        let identity = rec[1]
            .parse::<usize>()
            .map_err(|_| Error::Load(format!("identity {:?} is not a number", &rec[1])))?;
        rows.push((
            rec[0].to_string(),
            identity,
            Subgroup {
                ethnicity: rec[2].to_string(),
                gender: rec[3].to_string(),
            },
            rec[4].to_string(),
        ));
    }
    if rows.is_empty() {
        return Err(Error::Load("metadata.csv lists no samples".into()));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let ids: BTreeSet<usize> = rows.iter().map(|r| r.1).collect();
    let num_identities = ids.len();
    if *ids.iter().next_back().unwrap() != num_identities - 1 {
        return Err(Error::Load(format!(
            "identity labels must be contiguous from 0, found max {} over {} distinct",
            ids.iter().next_back().unwrap(),
            num_identities
        )));
    }
    let mut samples = Vec::with_capacity(rows.len());
    let mut image_size = 0usize;
    for (sample_id, identity, subgroup, file) in rows {
        let image = read_image(&dir.join(&file))?;
        let s = image.shape();
        if s[1] != s[2] {
            return Err(Error::Load(format!(
                "{} is {}x{}; images must be square",
                file, s[1], s[2]
            )));
        }
        if image_size == 0 {
            image_size = s[1];
        } else if image_size != s[1] {
            return Err(Error::Load(format!(
                "{} is {}px but the dataset started at {}px",
                file, s[1], image_size
            )));
        }
        samples.push(Sample {
            image,
            identity,
            sample_id,
            subgroup,
        });
    }
    Ok(Dataset {
        samples,
        num_identities,
        image_size,
    })
}

/// Bilinearly resize every sample to `size`.
pub fn resize_dataset(ds: &Dataset, size: usize) -> Result<Dataset> {
    let mut out = ds.clone();
    for s in &mut out.samples {
        s.image = bilinear_resize(&s.image, size, size)?;
    }
    out.image_size = size;
    Ok(out)
}
