//! Deterministic synthetic shapes datasets.
//!
//! Layout on disk:
//!
//! ```text
//! <dir>/index.json        spec, class names, one entry per image
//! <dir>/images/NNNN.pgm   8-bit binary PGM (P5)
//! <dir>/checksums.txt     "<sha256>  <relative path>" for every other file
//! ```
//!
//! Training code only ever sees [`Bag`]s (image + labels); boxes are
//! reachable through [`Dataset::ground_truth`] for evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mpfp_core::metrics::GroundTruth;
use mpfp_core::{BBox, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    /// Horizontal bar, three times as wide as tall.
    Bar,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disc => "disc",
            Shape::Bar => "bar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub train_images: usize,
    pub test_images: usize,
    /// Multiple of 64.
    pub image_side: usize,
    pub classes: Vec<Shape>,
    /// Inclusive range of objects per image.
    pub objects: [usize; 2],
    /// Inclusive range of object sides in pixels.
    pub object_side: [usize; 2],
    /// Standard deviation of the Gaussian pixel noise, in full-scale units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_images: 200,
            test_images: 50,
            image_side: 64,
            classes: vec![Shape::Square, Shape::Disc],
            objects: [0, 3],
            object_side: [8, 20],
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.train_images + self.test_images == 0 {
            return bad("at least one image is required");
        }
        if self.image_side == 0 || self.image_side % 64 != 0 {
            return bad("image side must be a positive multiple of 64");
        }
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        if self.objects[0] > self.objects[1] {
            return bad("object count range is reversed");
        }
        let [lo, hi] = self.object_side;
        if lo < 3 || lo > hi || hi >= self.image_side {
            return bad("object sides must satisfy 3 <= min <= max < image side");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub file: String,
    pub split: Split,
    /// `+1` if the image holds at least one object of the class, else `-1`.
    pub labels: Vec<i8>,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub spec: SynthSpec,
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
}

/// An image with its bag labels and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: usize,
    pub image: Tensor,
    pub labels: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub index: DatasetIndex,
    /// `[1, side, side]` tensors with values in `[0, 1]`, index order.
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.index.classes.len()
    }

    pub fn bags(&self, split: Split) -> Vec<Bag> {
        self.index
            .images
            .iter()
            .zip(&self.images)
            .enumerate()
            .filter(|(_, (r, _))| r.split == split)
            .map(|(id, (r, t))| Bag {
                id,
                image: t.clone(),
                labels: r.labels.clone(),
            })
            .collect()
    }

    /// Boxes of one split, keyed by global image id.
    pub fn ground_truth(&self, split: Split) -> Vec<GroundTruth> {
        let mut out = Vec::new();
        for (id, r) in self.index.images.iter().enumerate() {
            if r.split == split {
                out.extend(r.objects.iter().map(|o| GroundTruth {
                    image: id,
                    class: o.class,
                    bbox: o.bbox,
                }));
            }
        }
        out
    }
}

const PLACEMENT_TRIES: usize = 1000;

fn render(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<ObjectRecord>)> {
    let s = spec.image_side;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut img: Vec<f64> = (0..s * s).map(|_| 0.2 + noise.sample(rng)).collect();
    let count = rng.gen_range(spec.objects[0]..=spec.objects[1]);
    let mut placed: Vec<(usize, [usize; 4])> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..spec.classes.len());
        let mut ok = None;
        for _ in 0..PLACEMENT_TRIES {
            let side = rng.gen_range(spec.object_side[0]..=spec.object_side[1]);
            let (w, h) = match spec.classes[class] {
                Shape::Bar => (side, (side / 3).max(1)),
                _ => (side, side),
            };
            let x = rng.gen_range(0..=s - w);
            let y = rng.gen_range(0..=s - h);
            let b = [x, y, x + w, y + h];
            let free = placed
                .iter()
                .all(|(_, p)| b[2] <= p[0] || p[2] <= b[0] || b[3] <= p[1] || p[3] <= b[1]);
            if free {
                ok = Some(b);
                break;
            }
        }
        let b = ok.ok_or_else(|| {
            Error::Config(format!("could not place {count} objects without overlap in {PLACEMENT_TRIES} tries"))
        })?;
        placed.push((class, b));
    }
    for &(class, [x0, y0, x1, y1]) in &placed {
        let level = rng.gen_range(0.6..0.9);
        let r = (x1 - x0) as f64 / 2.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let inside = match spec.classes[class] {
                    Shape::Disc => {
                        let dx = x as f64 + 0.5 - x0 as f64 - r;
                        let dy = y as f64 + 0.5 - y0 as f64 - r;
                        dx * dx + dy * dy <= r * r
                    }
                    _ => true,
                };
                if inside {
                    img[y * s + x] = level + noise.sample(rng);
                }
            }
        }
    }
    let objects = placed
        .into_iter()
        .map(|(class, b)| {
            let [x0, y0, x1, y1] = b.map(|v| v as f64);
            Ok(ObjectRecord {
                class,
                bbox: BBox::new(x0, y0, x1, y1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((img, objects))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(side: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary 8-bit PGM, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic {:?})", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit PGM is supported (maxval {max})"));
    }
    let data = &bytes[pos + 1.min(bytes.len() - pos)..];
    if data.len() != w * h {
        return Err(format!("expected {} pixel bytes, found {}", w * h, data.len()));
    }
    Ok((w, h, data.to_vec()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    s
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes the dataset and returns its index.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_images + spec.test_images;
    let mut images = Vec::with_capacity(total);
    let mut sums = String::new();
    for i in 0..total {
        let (pixels, objects) = render(spec, &mut rng)?;
        let bytes: Vec<u8> = pixels.iter().map(|&v| quantize(v)).collect();
        let file = format!("images/{i:04}.pgm");
        let path = dir.join(&file);
        let pgm = encode_pgm(spec.image_side, &bytes);
        fs::write(&path, &pgm).map_err(io_err(&path))?;
        writeln!(sums, "{}  {file}", sha256_hex(&pgm)).expect("writing to a String");
        let labels = (0..spec.classes.len())
            .map(|c| if objects.iter().any(|o| o.class == c) { 1 } else { -1 })
            .collect();
        images.push(ImageRecord {
            file,
            split: if i < spec.train_images { Split::Train } else { Split::Test },
            labels,
            objects,
        });
    }
    let index = DatasetIndex {
        spec: spec.clone(),
        classes: spec.classes.iter().map(|c| c.name().to_string()).collect(),
        images,
    };
    let json = serde_json::to_vec_pretty(&index)?;
    let path = dir.join("index.json");
    fs::write(&path, &json).map_err(io_err(&path))?;
    writeln!(sums, "{}  index.json", sha256_hex(&json)).expect("writing to a String");
    let path = dir.join("checksums.txt");
    fs::write(&path, sums).map_err(io_err(&path))?;
    Ok(index)
}

fn corrupt(path: PathBuf, detail: impl Into<String>) -> Error {
    Error::Corrupt {
        path,
        detail: detail.into(),
    }
}

/// Reads a dataset back, verifying every checksum and the label rule.
pub fn load(dir: &Path) -> Result<Dataset> {
    let sums_path = dir.join("checksums.txt");
    let sums = fs::read_to_string(&sums_path).map_err(io_err(&sums_path))?;
    let mut expected = std::collections::BTreeMap::new();
    for line in sums.lines().filter(|l| !l.trim().is_empty()) {
        let (hash, file) = line
            .split_once("  ")
            .ok_or_else(|| corrupt(sums_path.clone(), format!("malformed line {line:?}")))?;
        expected.insert(file.to_string(), hash.to_string());
    }
    let read_checked = |file: &str| -> Result<Vec<u8>> {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        match expected.get(file) {
            Some(h) if *h == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(corrupt(path, "checksum mismatch")),
            None => Err(corrupt(path, "not listed in checksums.txt")),
        }
    };
    let index_path = dir.join("index.json");
    let index: DatasetIndex = serde_json::from_slice(&read_checked("index.json")?)
        .map_err(|e| corrupt(index_path.clone(), e.to_string()))?;
    let n_classes = index.classes.len();
    let side = index.spec.image_side;
    let mut images = Vec::with_capacity(index.images.len());
    for r in &index.images {
        let path = dir.join(&r.file);
        let (w, h, px) = decode_pgm(&read_checked(&r.file)?).map_err(|d| corrupt(path.clone(), d))?;
        if w != side || h != side {
            return Err(corrupt(path, format!("image is {w}x{h}, index says {side}x{side}")));
        }
        if r.labels.len() != n_classes {
            return Err(corrupt(index_path, format!("{}: wrong number of labels", r.file)));
        }
        for (c, &y) in r.labels.iter().enumerate() {
            let present = r.objects.iter().any(|o| o.class == c);
            if y != if present { 1 } else { -1 } {
                return Err(corrupt(index_path, format!("{}: label of class {c} disagrees with boxes", r.file)));
            }
        }
        let data = px.iter().map(|&p| p as f64 / 255.0).collect();
        images.push(Tensor::new(&[1, side, side], data)?);
    }
    Ok(Dataset { index, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..64 * 64).map(|i| (i % 251) as u8).collect();
        let bytes = encode_pgm(64, &px);
        assert_eq!(decode_pgm(&bytes).unwrap(), (64, 64, px));
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n# comment\n1 1\n255\n\x07").is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let s = SynthSpec {
            image_side: 60,
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
        let s = SynthSpec {
            object_side: [8, 64],
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn crowded_spec_fails_placement() {
        let spec = SynthSpec {
            train_images: 1,
            test_images: 0,
            objects: [40, 40],
            object_side: [20, 20],
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate(&spec, dir.path()), Err(Error::Config(_))));
    }
}
