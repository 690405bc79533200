//! Deterministic synthetic screening dataset: grayscale images with a
//! smooth noise background, where positive samples additionally contain a
//! small brighter lesion (a union of random ellipses) with mild texture.
//! Ground-truth lesion masks are written next to each positive image.
//!
//! Every image is drawn from its own counter-mode RNG stream keyed by
//! (seed, label, index), so generation is reproducible image by image and
//! independent of generation order.

use crate::error::{Error, Result};
use crate::pgm::{parse_pgm, write_pgm};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub image_side: usize,
    /// Images per class; the last fifth (rounded down) of each class is
    /// the test split.
    pub n_per_class: usize,
    /// Bounds on the lesion bounding-box side, in pixels.
    pub lesion_min: usize,
    pub lesion_max: usize,
    /// Spatial period of the background noise, in pixels.
    pub noise_scale: usize,
    /// Brightness added inside the lesion, in [0, 1) value units. Zero
    /// produces positives that are pixel-identical to their backgrounds
    /// (no signal), which is useful as a null check.
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_side: 224,
            n_per_class: 2500,
            lesion_min: 12,
            lesion_max: 40,
            noise_scale: 28,
            lesion_contrast: 0.25,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 {
            return Err(Error::Config(format!(
                "image_side must be at least 8, got {}",
                self.image_side
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if self.lesion_min < 3 || self.lesion_min > self.lesion_max {
            return Err(Error::Config(format!(
                "lesion side range [{}, {}] must satisfy 3 <= min <= max",
                self.lesion_min, self.lesion_max
            )));
        }
        if self.lesion_max > self.image_side {
            return Err(Error::Config(format!(
                "lesion_max {} exceeds image side {}",
                self.lesion_max, self.image_side
            )));
        }
        if self.noise_scale == 0 || self.noise_scale > self.image_side {
            return Err(Error::Config(format!(
                "noise_scale must be in [1, image_side], got {}",
                self.noise_scale
            )));
        }
        if !self.lesion_contrast.is_finite() || !(0.0..1.0).contains(&self.lesion_contrast) {
            return Err(Error::Config(format!(
                "lesion_contrast must be in [0, 1), got {}",
                self.lesion_contrast
            )));
        }
        Ok(())
    }
}

fn image_rng(spec: &SynthSpec, label: u8, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((label as u64) << 32) | index as u64);
    rng
}

/// Smooth background in [0.15, 0.65]: bilinear interpolation of a coarse
/// grid of uniform noise nodes.
fn background(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = spec.image_side;
    let scale = spec.noise_scale as f64;
    let nodes = (side - 1) / spec.noise_scale + 2;
    let grid: Vec<f64> = (0..nodes * nodes).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        let gy = y as f64 / scale;
        let iy = gy as usize;
        let ty = gy - iy as f64;
        for x in 0..side {
            let gx = x as f64 / scale;
            let ix = gx as usize;
            let tx = gx - ix as f64;
            let v = grid[iy * nodes + ix] * (1.0 - ty) * (1.0 - tx)
                + grid[iy * nodes + ix + 1] * (1.0 - ty) * tx
                + grid[(iy + 1) * nodes + ix] * ty * (1.0 - tx)
                + grid[(iy + 1) * nodes + ix + 1] * ty * tx;
            out[y * side + x] = 0.15 + 0.5 * v;
        }
    }
    out
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Draws a lesion into `values` and returns its 0/255 mask. The first
/// ellipse is axis-aligned and spans the bounding box, so the mask
/// footprint tracks the drawn box side; the remaining ellipses add
/// irregularity.
fn lesion(spec: &SynthSpec, rng: &mut ChaCha8Rng, values: &mut [f64]) -> Vec<u8> {
    let side = spec.image_side;
    let s = rng.gen_range(spec.lesion_min..=spec.lesion_max);
    let x0 = rng.gen_range(0..=side - s);
    let y0 = rng.gen_range(0..=side - s);
    let count = rng.gen_range(2..=5usize);
    let sf = s as f64;

    let mut ellipses = Vec::with_capacity(count);
    let full = (sf / 2.0 - 0.5).max(0.7);
    let minor = (full * rng.gen_range(0.55..0.95)).max(0.7);
    let swap = rng.gen::<bool>();
    let (a, b) = if swap { (minor, full) } else { (full, minor) };
    ellipses.push(Ellipse {
        cx: x0 as f64 + sf / 2.0,
        cy: y0 as f64 + sf / 2.0,
        a,
        b,
        cos: 1.0,
        sin: 0.0,
    });
    for _ in 1..count {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        ellipses.push(Ellipse {
            cx: rng.gen_range(x0 as f64 + sf * 0.25..x0 as f64 + sf * 0.75),
            cy: rng.gen_range(y0 as f64 + sf * 0.25..y0 as f64 + sf * 0.75),
            a: rng.gen_range(sf / 6.0..sf / 3.0).max(0.7),
            b: rng.gen_range(sf / 6.0..sf / 3.0).max(0.7),
            cos: theta.cos(),
            sin: theta.sin(),
        });
    }

    let mut mask = vec![0u8; side * side];
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let inside = ellipses
                .iter()
                .any(|e| e.contains(x as f64 + 0.5, y as f64 + 0.5));
            if inside {
                mask[y * side + x] = 255;
                let u: f64 = rng.gen();
                let delta = spec.lesion_contrast * (0.8 + 0.4 * u);
                values[y * side + x] = (values[y * side + x] + delta).clamp(0.0, 1.0);
            }
        }
    }
    mask
}

fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v * 255.0).round() as u8).collect()
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::Data(format!("label must be 0 or 1, got {label}")));
    }
    Ok(())
}

/// Renders one image (and its mask, for positives) entirely in memory.
pub fn render_image(spec: &SynthSpec, label: u8, index: usize) -> Result<(Vec<u8>, Option<Vec<u8>>)> {
    spec.validate()?;
    check_label(label)?;
    let mut rng = image_rng(spec, label, index);
    let mut values = background(spec, &mut rng);
    let mask = (label == 1).then(|| lesion(spec, &mut rng, &mut values));
    Ok((quantize(&values), mask))
}

/// The lesion-free background of the image at (label, index): for a
/// positive sample this is what the image would look like without its
/// lesion, pixel for pixel.
pub fn render_clean_background(spec: &SynthSpec, label: u8, index: usize) -> Result<Vec<u8>> {
    spec.validate()?;
    check_label(label)?;
    let mut rng = image_rng(spec, label, index);
    Ok(quantize(&background(spec, &mut rng)))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
    pub split: Split,
    pub sha256: String,
    /// Mask file name and hash, for positive samples.
    pub mask: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("rmfn-dataset v1\n");
        let s = &self.spec;
        let _ = write!(
            out,
            "image_side {}\nn_per_class {}\nlesion_min {}\nlesion_max {}\n\
             noise_scale {}\nlesion_contrast {}\nseed {}\n",
            s.image_side, s.n_per_class, s.lesion_min, s.lesion_max, s.noise_scale,
            s.lesion_contrast, s.seed
        );
        for e in &self.entries {
            let _ = write!(
                out,
                "entry {} {} {} {}",
                e.path,
                e.label,
                e.split.as_str(),
                e.sha256
            );
            if let Some((mpath, mhash)) = &e.mask {
                let _ = write!(out, " {mpath} {mhash}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |lineno: usize, msg: String| Error::Data(format!("manifest line {}: {msg}", lineno + 1));
        match lines.next() {
            Some((_, "rmfn-dataset v1")) => {}
            Some((n, other)) => return Err(bad(n, format!("unknown header {other:?}"))),
            None => return Err(Error::Data("manifest is empty".into())),
        }
        let mut spec = SynthSpec::default();
        let mut entries = Vec::new();
        for (n, line) in lines {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields[0] == "entry" {
                if fields.len() != 5 && fields.len() != 7 {
                    return Err(bad(n, format!("expected 5 or 7 fields, got {}", fields.len())));
                }
                let label: u8 = parse_field(fields[2], n, "label")?;
                check_label(label)?;
                entries.push(ManifestEntry {
                    path: fields[1].to_string(),
                    label,
                    split: Split::parse(fields[3])?,
                    sha256: fields[4].to_string(),
                    mask: (fields.len() == 7)
                        .then(|| (fields[5].to_string(), fields[6].to_string())),
                });
                continue;
            }
            if fields.len() != 2 {
                return Err(bad(n, format!("expected a key and a value, got {line:?}")));
            }
            let value = fields[1];
            match fields[0] {
                "image_side" => spec.image_side = parse_field(value, n, "image_side")?,
                "n_per_class" => spec.n_per_class = parse_field(value, n, "n_per_class")?,
                "lesion_min" => spec.lesion_min = parse_field(value, n, "lesion_min")?,
                "lesion_max" => spec.lesion_max = parse_field(value, n, "lesion_max")?,
                "noise_scale" => spec.noise_scale = parse_field(value, n, "noise_scale")?,
                "lesion_contrast" => {
                    spec.lesion_contrast = parse_field(value, n, "lesion_contrast")?
                }
                "seed" => spec.seed = parse_field(value, n, "seed")?,
                other => return Err(bad(n, format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(Manifest { spec, entries })
    }
}

fn parse_field<T: std::str::FromStr>(value: &str, lineno: usize, what: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Data(format!(
            "manifest line {}: bad {what} value {value:?}",
            lineno + 1
        ))
    })
}

/// Generates the full dataset under `out_dir` (images, masks, manifest).
/// Re-running with the same spec produces byte-identical files.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let test_count = spec.n_per_class / 5;
    let mut entries = Vec::new();
    for label in [0u8, 1] {
        for index in 0..spec.n_per_class {
            let (pixels, mask) = render_image(spec, label, index)?;
            let name = format!(
                "{}_{index:05}.pgm",
                if label == 0 { "neg" } else { "pos" }
            );
            write_pgm(&out_dir.join(&name), spec.image_side, spec.image_side, &pixels)?;
            let sha256 = sha256_hex(&std::fs::read(out_dir.join(&name))?);
            let mask_entry = match mask {
                Some(m) => {
                    let mname = format!("pos_{index:05}_mask.pgm");
                    write_pgm(&out_dir.join(&mname), spec.image_side, spec.image_side, &m)?;
                    let mhash = sha256_hex(&std::fs::read(out_dir.join(&mname))?);
                    Some((mname, mhash))
                }
                None => None,
            };
            let split = if index < spec.n_per_class - test_count {
                Split::Train
            } else {
                Split::Test
            };
            entries.push(ManifestEntry {
                path: name,
                label,
                split,
                sha256,
                mask: mask_entry,
            });
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        entries,
    };
    std::fs::write(out_dir.join(MANIFEST_NAME), manifest.to_text())?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct DataItem {
    pub path: String,
    pub label: u8,
    pub split: Split,
    pub pixels: Vec<u8>,
    pub mask_path: Option<String>,
}

/// A dataset loaded into memory (pixels stay 8-bit; conversion to tensors
/// happens per access).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SynthSpec,
    base_dir: PathBuf,
    items: Vec<DataItem>,
}

/// Loads a generated dataset, verifying every file against its manifest
/// hash.
pub fn load(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest = Manifest::from_text(&text)?;
    let base_dir = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let side = manifest.spec.image_side;
    let mut items = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = base_dir.join(&e.path);
        let bytes = std::fs::read(&path)?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Data(format!(
                "{}: content does not match its manifest hash",
                path.display()
            )));
        }
        let (w, h, pixels) =
            parse_pgm(&bytes).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))?;
        if w != side || h != side {
            return Err(Error::Data(format!(
                "{}: expected {side}x{side}, got {w}x{h}",
                path.display()
            )));
        }
        if let Some((mpath, mhash)) = &e.mask {
            let mbytes = std::fs::read(base_dir.join(mpath))?;
            if &sha256_hex(&mbytes) != mhash {
                return Err(Error::Data(format!(
                    "{}: content does not match its manifest hash",
                    base_dir.join(mpath).display()
                )));
            }
        }
        items.push(DataItem {
            path: e.path.clone(),
            label: e.label,
            split: e.split,
            pixels,
            mask_path: e.mask.as_ref().map(|(p, _)| p.clone()),
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        base_dir,
        items,
    })
}

impl Dataset {
    /// In-memory dataset for tests and benchmarks.
    pub fn from_parts(spec: SynthSpec, items: Vec<DataItem>) -> Self {
        Dataset {
            spec,
            base_dir: PathBuf::from("."),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_side(&self) -> usize {
        self.spec.image_side
    }

    pub fn item(&self, i: usize) -> &DataItem {
        &self.items[i]
    }

    /// The image as a [1, S, S] tensor with values in [0, 1].
    pub fn image_tensor(&self, i: usize) -> Tensor {
        let side = self.spec.image_side;
        let data = self.items[i]
            .pixels
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect();
        Tensor::from_vec(&[1, side, side], data).unwrap()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == split)
            .collect()
    }

    /// Reads the ground-truth mask of item `i` from disk (None for
    /// negatives).
    pub fn load_mask(&self, i: usize) -> Result<Option<Vec<u8>>> {
        let Some(mpath) = &self.items[i].mask_path else {
            return Ok(None);
        };
        let full = self.base_dir.join(mpath);
        let bytes = std::fs::read(&full)?;
        let (w, h, pixels) =
            parse_pgm(&bytes).map_err(|msg| Error::Data(format!("{}: {msg}", full.display())))?;
        let side = self.spec.image_side;
        if w != side || h != side {
            return Err(Error::Data(format!(
                "{}: mask is {w}x{h}, expected {side}x{side}",
                full.display()
            )));
        }
        Ok(Some(pixels))
    }
}
