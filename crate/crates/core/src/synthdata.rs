//! Procedural paired scenes: a clean EO render, a speckled SAR render of the
//! same geometry, and the class-index mask. Shapes are axis-aligned and
//! rotated rectangles on a textured background; SAR multiplies the render by
//! unit-mean gamma speckle and adds bright edge streaks displaced toward the
//! top-left corner, mimicking layover.
//!
//! Determinism contract: sample `index` of a config draws from the ChaCha8
//! stream (seed, index), so identical configs reproduce identical datasets
//! and distinct indices generate independently.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::seeded_rng;

// Contrast sits low enough that multiplicative speckle genuinely hurts the
// SAR render while the clean EO render stays separable.
const BACKGROUND_LEVEL: f64 = 0.15;
const EO_NOISE_SIGMA: f64 = 0.02;
const SAR_TEXTURE_FACTOR: f64 = 0.3;
const LAYOVER_BRIGHTNESS: f64 = 0.35;
const FILL_LO: f64 = 0.28;
const FILL_HI: f64 = 0.68;

/// Scene generator configuration. `num_classes` counts the background:
/// 2 is the building/background mode, 5 the land-cover mode.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Gamma-speckle looks L; the field has mean 1 and variance 1/L.
    pub speckle_looks: u32,
    /// Pixel displacement of the layover streaks toward the top-left corner.
    pub layover_shift: usize,
    pub texture_amplitude: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            image_size: 64,
            num_classes: 2,
            shapes_min: 3,
            shapes_max: 6,
            speckle_looks: 4,
            layover_shift: 2,
            texture_amplitude: 0.1,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid(
                "generate_scene",
                format!(
                    "image size {} too small for the requested shapes (minimum 16)",
                    self.image_size
                ),
            ));
        }
        if !(2..=16).contains(&self.num_classes) {
            return Err(Error::invalid(
                "generate_scene",
                format!("num_classes must be in 2..=16, got {}", self.num_classes),
            ));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return Err(Error::invalid(
                "generate_scene",
                "shape count range must satisfy 1 <= min <= max",
            ));
        }
        if self.speckle_looks == 0 {
            return Err(Error::invalid("generate_scene", "speckle_looks must be positive"));
        }
        Ok(())
    }
}

/// One paired sample: EO and SAR intensities in [0,1] over the same
/// geometry, plus the class-index mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub size: usize,
    pub eo: Vec<f32>,
    pub sar: Vec<f32>,
    pub mask: Vec<u8>,
}

/// Smooth value noise in [-1, 1]: a coarse random lattice, bilinearly
/// upsampled.
fn value_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let coarse = size / 8 + 2;
    let lattice: Vec<f64> = (0..coarse * coarse)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let step = (coarse - 1) as f64 / (size - 1) as f64;
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        let fy = i as f64 * step;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        let y1 = (y0 + 1).min(coarse - 1);
        for j in 0..size {
            let fx = j as f64 * step;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let x1 = (x0 + 1).min(coarse - 1);
            let top = lattice[y0 * coarse + x0] * (1.0 - tx) + lattice[y0 * coarse + x1] * tx;
            let bot = lattice[y1 * coarse + x0] * (1.0 - tx) + lattice[y1 * coarse + x1] * tx;
            out[i * size + j] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Unit-mean gamma speckle: Gamma(L, 1/L) per pixel.
fn gamma_speckle(rng: &mut ChaCha8Rng, looks: u32, out: &mut [f64]) {
    let gamma = Gamma::new(looks as f64, 1.0 / looks as f64).expect("valid gamma parameters");
    for v in out.iter_mut() {
        *v = gamma.sample(rng);
    }
}

struct Shape {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    /// Rotation of the rectangle; 0 for axis-aligned.
    angle: f64,
    level: f64,
    class: u8,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.angle.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        u.abs() <= self.half_w && v.abs() <= self.half_h
    }
}

/// Maps a fill level to its class band: the [FILL_LO, FILL_HI) range is
/// split into num_classes−1 equal bands for classes 1..num_classes.
fn class_of_level(level: f64, num_classes: usize) -> u8 {
    let bands = (num_classes - 1) as f64;
    let t = ((level - FILL_LO) / (FILL_HI - FILL_LO) * bands).floor();
    (t.clamp(0.0, bands - 1.0) as u8) + 1
}

/// Renders the paired (EO, SAR, mask) triple for one sample index.
pub fn generate_scene(cfg: &GenConfig, index: usize) -> Result<SceneSample> {
    cfg.validate()?;
    let size = cfg.image_size;
    let n = size * size;
    let mut rng = seeded_rng(cfg.seed, index as u64);

    let num_shapes = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    let mut shapes = Vec::with_capacity(num_shapes);
    for _ in 0..num_shapes {
        let level = FILL_LO + rng.random::<f64>() * (FILL_HI - FILL_LO);
        shapes.push(Shape {
            cx: (0.15 + 0.7 * rng.random::<f64>()) * size as f64,
            cy: (0.15 + 0.7 * rng.random::<f64>()) * size as f64,
            half_w: (0.06 + 0.14 * rng.random::<f64>()) * size as f64,
            half_h: (0.06 + 0.14 * rng.random::<f64>()) * size as f64,
            angle: if rng.random::<f64>() < 0.5 {
                0.0
            } else {
                rng.random::<f64>() * std::f64::consts::PI
            },
            level,
            class: class_of_level(level, cfg.num_classes),
        });
    }

    // Painter's order: later shapes overwrite earlier ones.
    let mut geometry = vec![BACKGROUND_LEVEL; n];
    let mut mask = vec![0u8; n];
    for shape in &shapes {
        for i in 0..size {
            for j in 0..size {
                if shape.contains(j as f64, i as f64) {
                    geometry[i * size + j] = shape.level;
                    mask[i * size + j] = shape.class;
                }
            }
        }
    }

    let tex_eo = value_noise(&mut rng, size);
    let tex_sar = value_noise(&mut rng, size);
    let normal = Normal::new(0.0, EO_NOISE_SIGMA).expect("valid normal parameters");

    let mut eo = vec![0.0f32; n];
    for i in 0..n {
        let v = geometry[i] + cfg.texture_amplitude * tex_eo[i] + normal.sample(&mut rng);
        eo[i] = v.clamp(0.0, 1.0) as f32;
    }

    let mut speckle = vec![0.0; n];
    gamma_speckle(&mut rng, cfg.speckle_looks, &mut speckle);
    let mut sar = vec![0.0f64; n];
    for i in 0..n {
        let base = geometry[i] + SAR_TEXTURE_FACTOR * cfg.texture_amplitude * tex_sar[i];
        sar[i] = base.max(0.0) * speckle[i];
    }

    // Layover: boundary pixels of each shape re-appear as bright streaks
    // displaced toward the top-left corner.
    let shift = cfg.layover_shift;
    if shift > 0 {
        for i in 0..size {
            for j in 0..size {
                let c = mask[i * size + j];
                if c == 0 {
                    continue;
                }
                let boundary = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)]
                    .iter()
                    .any(|&(y, x)| {
                        y >= size || x >= size || mask[y * size + x] != c
                    });
                if boundary && i >= shift && j >= shift {
                    sar[(i - shift) * size + (j - shift)] += LAYOVER_BRIGHTNESS;
                }
            }
        }
    }

    let sar: Vec<f32> = sar.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(SceneSample {
        size,
        eo,
        sar,
        mask,
    })
}

/// Generates `count` samples at indices 0..count.
pub fn generate_dataset(cfg: &GenConfig, count: usize) -> Result<Vec<SceneSample>> {
    (0..count).map(|i| generate_scene(cfg, i)).collect()
}

// ---------------------------------------------------------------------------
// PGM files
// ---------------------------------------------------------------------------

/// Writes a [0,1] intensity image as binary 8-bit PGM (quantized by
/// round(v·255)).
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
    write_pgm_bytes(path, width, height, &bytes)
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes class indices directly as 8-bit PGM pixels.
pub fn write_index_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_pgm_bytes(path, width, height, data)
}

fn write_pgm_bytes(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::invalid(
            "write_pgm",
            format!("{}×{} image needs {} pixels, got {}", width, height, width * height, bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(bytes);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM back to [0,1] intensities.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (w, h, bytes) = read_pgm_bytes(path)?;
    Ok((w, h, bytes.iter().map(|&b| b as f32 / 255.0).collect()))
}

/// Reads a binary PGM of class indices.
pub fn read_index_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pgm_bytes(path)
}

struct PgmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> PgmParser<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::PgmParse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comment lines between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail(format!("invalid {what}")))
    }
}

fn read_pgm_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut p = PgmParser {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if bytes.len() < 2 {
        return Err(p.fail("truncated header"));
    }
    match &bytes[..2] {
        b"P5" => p.pos = 2,
        b"P2" => return Err(p.fail("ASCII (P2) files are unsupported; expected binary P5")),
        _ => return Err(p.fail("bad magic; expected P5")),
    }
    let width = p.number("width")?;
    let height = p.number("height")?;
    let maxval = p.number("maxval")?;
    if maxval != 255 {
        return Err(p.fail(format!("unsupported maxval {maxval}; expected 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.fail("missing separator before pixel data"));
    }
    p.pos += 1;
    let need = width * height;
    if bytes.len() - p.pos < need {
        p.pos = bytes.len();
        return Err(p.fail(format!(
            "truncated payload: expected {need} pixel bytes, got {}",
            bytes.len() - (bytes.len().min(p.pos))
        )));
    }
    Ok((width, height, bytes[p.pos..p.pos + need].to_vec()))
}

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

/// Writes every sample's three PGM files plus a manifest with one line per
/// sample (three whitespace-separated relative paths). Returns the manifest
/// path.
pub fn write_manifest(samples: &[SceneSample], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let eo = format!("eo_{i:04}.pgm");
        let sar = format!("sar_{i:04}.pgm");
        let mask = format!("mask_{i:04}.pgm");
        write_pgm(&dir.join(&eo), s.size, s.size, &s.eo)?;
        write_pgm(&dir.join(&sar), s.size, s.size, &s.sar)?;
        write_index_pgm(&dir.join(&mask), s.size, s.size, &s.mask)?;
        manifest.push_str(&format!("{eo} {sar} {mask}\n"));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads the triples named by a manifest, in manifest order. Sizes within a
/// triple must agree; failures name the offending line.
pub fn load_manifest(path: &Path) -> Result<Vec<SceneSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let manifest_err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(manifest_err(
                lineno,
                format!("expected 3 paths (eo sar mask), got {}", parts.len()),
            ));
        }
        let resolve = |rel: &str| -> Result<PathBuf> {
            let p = dir.join(rel);
            if !p.exists() {
                return Err(manifest_err(lineno, format!("missing file {rel}")));
            }
            Ok(p)
        };
        let (ew, eh, eo) = read_pgm(&resolve(parts[0])?)?;
        let (sw, sh, sar) = read_pgm(&resolve(parts[1])?)?;
        let (mw, mh, mask) = read_index_pgm(&resolve(parts[2])?)?;
        if ew != eh || (ew, eh) != (sw, sh) || (ew, eh) != (mw, mh) {
            return Err(manifest_err(
                lineno,
                format!("size disagreement: eo {ew}×{eh}, sar {sw}×{sh}, mask {mw}×{mh}"),
            ));
        }
        samples.push(SceneSample {
            size: ew,
            eo,
            sar,
            mask,
        });
    }
    Ok(samples)
}
