//! Synthetic bimodal scenes, the on-disk dataset format, and augmentation.
//!
//! A dataset lives under `<root>/<split>/<id>/` with `rgb.ppm` (binary P6),
//! `aux.pgm` (binary P5) and `points.json` (`{"points": [[x, y], ...]}`).
//! Images are written with 16-bit samples and read at either 8 or 16 bits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::DOWNSAMPLE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A head position `[x, y]` in image pixels.
pub type Point = [f64; 2];

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

const MAXVAL16: f64 = 65535.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModalSample {
    pub id: String,
    /// `3×H×W`, values in `[0, 1]`.
    pub rgb: Tensor,
    /// `1×H×W`, values in `[0, 1]`.
    pub aux: Tensor,
    pub points: Vec<Point>,
}

impl ModalSample {
    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (rs, a) = (self.rgb.shape(), self.aux.shape());
        if rs.len() != 3 || rs[0] != 3 || a.len() != 3 || a[0] != 1 || rs[1..] != a[1..] {
            return Err(Error::dim(format!(
                "sample {}: rgb {rs:?} and aux {a:?} must be 3×H×W and 1×H×W",
                self.id
            )));
        }
        let (h, w) = (rs[1], rs[2]);
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "sample {}: {h}×{w} is not divisible by {DOWNSAMPLE}",
                self.id
            )));
        }
        for p in &self.points {
            if !(p[0] >= 0.0 && p[0] < w as f64 && p[1] >= 0.0 && p[1] < h as f64) {
                return Err(Error::contract(format!(
                    "sample {}: point {p:?} outside the {w}×{h} image",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive person-count range.
    pub count_range: (usize, usize),
    /// Blob radius range in pixels.
    pub radius_range: (f64, f64),
    /// 0 is pitch dark, 1 fully lit; scales everything visible in RGB.
    pub illumination: f64,
    /// Probability that a person is hidden in RGB.
    pub occlusion_prob: f64,
    /// Inclusive range of warm non-person objects, bright in aux and invisible in RGB.
    pub distractor_range: (usize, usize),
    pub rgb_noise: f64,
    pub aux_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            count_range: (1, 20),
            radius_range: (1.5, 3.0),
            illumination: 1.0,
            occlusion_prob: 0.1,
            distractor_range: (0, 3),
            rgb_noise: 0.02,
            aux_noise: 0.02,
            seed: 0,
        }
    }
}

/// Brightness a person adds to the auxiliary image at its centre.
pub const AUX_PEAK: f64 = 0.75;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * MAXVAL16).round() / MAXVAL16
}

/// Smooth random texture in roughly `[-1, 1]`.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let waves = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.4),
                    rng.gen_range(0.05..0.4),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, px, py)| (fx * x + px).sin() * (fy * y + py).cos())
            .sum();
        s / self.waves.len() as f64
    }
}

/// Renders one scene. Deterministic in `spec`.
pub fn generate(spec: &SceneSpec) -> Result<ModalSample> {
    let (lo, hi) = spec.count_range;
    if lo > hi {
        return Err(Error::contract(format!("empty person-count range {lo}..={hi}")));
    }
    let (rlo, rhi) = spec.radius_range;
    if !(rlo > 0.0 && rlo <= rhi) {
        return Err(Error::contract(format!("invalid radius range {rlo}..{rhi}")));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = rng.gen_range(lo..=hi);

    let rgb_tex: Vec<(Texture, f64)> = (0..3)
        .map(|_| (Texture::new(&mut rng), rng.gen_range(0.3..0.5)))
        .collect();
    let aux_tex = Texture::new(&mut rng);

    struct Person {
        x: f64,
        y: f64,
        r: f64,
        color: [f64; 3],
        occluded: bool,
    }
    let people: Vec<Person> = (0..n)
        .map(|_| Person {
            x: rng.gen_range(0.5..w as f64 - 0.5),
            y: rng.gen_range(0.5..h as f64 - 0.5),
            r: if rlo == rhi { rlo } else { rng.gen_range(rlo..rhi) },
            color: [rng.gen(), rng.gen(), rng.gen()],
            occluded: rng.gen_bool(spec.occlusion_prob.clamp(0.0, 1.0)),
        })
        .collect();
    let (dlo, dhi) = spec.distractor_range;
    if dlo > dhi {
        return Err(Error::contract(format!("empty distractor range {dlo}..={dhi}")));
    }
    let nd = rng.gen_range(dlo..=dhi);
    let distractors: Vec<(f64, f64, f64)> = (0..nd)
        .map(|_| {
            (
                rng.gen_range(0.5..w as f64 - 0.5),
                rng.gen_range(0.5..h as f64 - 0.5),
                if rlo == rhi { rlo } else { rng.gen_range(rlo..rhi) },
            )
        })
        .collect();

    let mut rgb = vec![0.0; 3 * h * w];
    let mut aux = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            let blobs: Vec<f64> = people
                .iter()
                .map(|p| {
                    let d2 = (px - p.x).powi(2) + (py - p.y).powi(2);
                    (-d2 / (2.0 * p.r * p.r)).exp()
                })
                .collect();
            for (c, (tex, base)) in rgb_tex.iter().enumerate() {
                let mut v = base + 0.1 * tex.at(px, py);
                for (p, b) in people.iter().zip(&blobs) {
                    if !p.occluded {
                        v += b * (p.color[c] - v);
                    }
                }
                let noise = spec.rgb_noise * rng.gen_range(-1.0..=1.0);
                rgb[c * h * w + i * w + j] = quantize(spec.illumination * v + noise);
            }
            let mut a = 0.15 + 0.05 * aux_tex.at(px, py);
            for b in &blobs {
                a += AUX_PEAK * b;
            }
            for &(x, y, r) in &distractors {
                let d2 = (px - x).powi(2) + (py - y).powi(2);
                a += AUX_PEAK * (-d2 / (2.0 * r * r)).exp();
            }
            let noise = spec.aux_noise * rng.gen_range(-1.0..=1.0);
            aux[i * w + j] = quantize(a + noise);
        }
    }
    Ok(ModalSample {
        id: format!("{:016x}", spec.seed),
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        aux: Tensor::new(vec![1, h, w], aux)?,
        points: people.iter().map(|p| [p.x, p.y]).collect(),
    })
}

/// Settings for a whole generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub scene: SceneSpec,
    /// Per-scene illumination is drawn uniformly from this range.
    pub illumination_range: (f64, f64),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn split_size(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

/// Generates every sample of one split in memory.
pub fn generate_split(spec: &DatasetSpec, split: &str) -> Result<Vec<ModalSample>> {
    let (a, b) = spec.illumination_range;
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
        return Err(Error::Config(format!("illumination range {a},{b} must lie in [0, 1]")));
    }
    let tag = SPLITS.iter().position(|s| *s == split).unwrap_or(3) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(tag);
    (0..spec.split_size(split))
        .map(|i| {
            let scene = SceneSpec {
                illumination: if a == b { a } else { rng.gen_range(a..=b) },
                seed: rng.gen(),
                ..spec.scene.clone()
            };
            let mut s = generate(&scene)?;
            s.id = format!("{split}_{i:05}");
            Ok(s)
        })
        .collect()
}

/// Writes all three splits under `root`; returns per-split counts.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> Result<Vec<(String, usize)>> {
    let mut counts = Vec::new();
    for split in SPLITS {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let samples = generate_split(spec, split)?;
        for s in &samples {
            save_sample(&dir, s)?;
        }
        counts.push((split.to_string(), samples.len()));
    }
    Ok(counts)
}

#[derive(Serialize, Deserialize)]
struct PointsFile {
    points: Vec<Point>,
}

/// Writes `sample` to `<dir>/<id>/`.
pub fn save_sample(dir: &Path, sample: &ModalSample) -> Result<PathBuf> {
    sample.validate()?;
    let out = dir.join(&sample.id);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_pnm(&out.join("rgb.ppm"), &sample.rgb)?;
    write_pnm(&out.join("aux.pgm"), &sample.aux)?;
    let json = serde_json::to_string(&PointsFile {
        points: sample.points.clone(),
    })
    .expect("points serialise");
    let p = out.join("points.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

/// Reads one sample directory; the id is the directory name.
pub fn load_sample(dir: &Path) -> Result<ModalSample> {
    let rgb = read_pnm(&dir.join("rgb.ppm"))?;
    let aux = read_pnm(&dir.join("aux.pgm"))?;
    let pp = dir.join("points.json");
    let text = fs::read_to_string(&pp).map_err(|e| Error::io(&pp, e))?;
    let points: PointsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        path: pp.clone(),
        message: e.to_string(),
    })?;
    let sample = ModalSample {
        id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        rgb,
        aux,
        points: points.points,
    };
    sample.validate()?;
    Ok(sample)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    before + column.saturating_sub(1)
}

/// Loads every sample of `<root>/<split>`, sorted by id.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<ModalSample>> {
    let dir = root.join(split);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sample(d)).collect()
}

/// Encodes a `1×H×W` (PGM) or `3×H×W` (PPM) tensor with 16-bit samples.
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    let magic = match s {
        [1, _, _] => "P5",
        [3, _, _] => "P6",
        _ => return Err(Error::dim(format!("cannot write {s:?} as PGM/PPM"))),
    };
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("{magic}\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * c * h * w);
    let d = t.data();
    for i in 0..h * w {
        for ch in 0..c {
            let v = (d[ch * h * w + i].clamp(0.0, 1.0) * MAXVAL16).round() as u16;
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn write_pnm(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_pnm(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

/// Decodes binary P5/P6 with 8- or 16-bit samples into `C×H×W` in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() < 2 {
        return Err(err(0, "file too short for a PNM header".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        m => return Err(err(0, format!("unsupported magic {:?}", String::from_utf8_lossy(m)))),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][k];
            return Err(err(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(start, format!("number {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected a single whitespace after maxval".into())),
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos, format!("maxval {maxval} outside 1..=65535")));
    }
    let wide = maxval > 255;
    let bps = if wide { 2 } else { 1 };
    let need = channels * h * w * bps;
    if bytes.len() - pos < need {
        return Err(err(
            bytes.len(),
            format!("raster truncated: need {need} bytes, found {}", bytes.len() - pos),
        ));
    }
    let raster = &bytes[pos..pos + need];
    let mut data = vec![0.0; channels * h * w];
    let max = maxval as f64;
    for i in 0..h * w {
        for ch in 0..channels {
            let k = i * channels + ch;
            let v = if wide {
                u16::from_be_bytes([raster[2 * k], raster[2 * k + 1]]) as usize
            } else {
                raster[k] as usize
            };
            if v > maxval {
                return Err(err(pos + k * bps, format!("sample {v} exceeds maxval {maxval}")));
            }
            data[ch * h * w + i] = v as f64 / max;
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

fn crop_flip(t: &Tensor, top: usize, left: usize, size: (usize, usize), flip: bool) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (ch, cw) = size;
    let d = t.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for i in 0..ch {
            let row = &d[k * h * w + (top + i) * w + left..][..cw];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![c, ch, cw], out).expect("sized above")
}

/// Applies the `height×width` window at `(top, left)` and an optional
/// horizontal flip to images and points alike. Points outside the window are
/// dropped; a flipped point moves to `width − x`.
pub fn crop_and_flip(
    sample: &ModalSample,
    top: usize,
    left: usize,
    size: (usize, usize),
    flip: bool,
) -> Result<ModalSample> {
    let (h, w) = (sample.height(), sample.width());
    let (ch, cw) = size;
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(Error::contract(format!(
            "{ch}×{cw} window at ({top}, {left}) does not fit a {h}×{w} image"
        )));
    }
    let (fh, fw) = (ch as f64, cw as f64);
    let points = sample
        .points
        .iter()
        .map(|p| [p[0] - left as f64, p[1] - top as f64])
        .filter(|p| p[0] >= 0.0 && p[0] < fw && p[1] >= 0.0 && p[1] < fh)
        .map(|p| if flip { [(fw - p[0]).min(fw.next_down()), p[1]] } else { p })
        .collect();
    Ok(ModalSample {
        id: sample.id.clone(),
        rgb: crop_flip(&sample.rgb, top, left, size, flip),
        aux: crop_flip(&sample.aux, top, left, size, flip),
        points,
    })
}

/// Random square crop and horizontal flip shared by both modalities and the annotations.
pub fn augment(sample: &ModalSample, crop_size: usize, flip_prob: f64, seed: u64) -> Result<ModalSample> {
    let (h, w) = (sample.height(), sample.width());
    if crop_size == 0 || crop_size > h || crop_size > w || crop_size % DOWNSAMPLE != 0 {
        return Err(Error::contract(format!(
            "crop {crop_size} must be a positive multiple of {DOWNSAMPLE} within {h}×{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=h - crop_size);
    let left = rng.gen_range(0..=w - crop_size);
    let flip = rng.gen_bool(flip_prob.clamp(0.0, 1.0));
    crop_and_flip(sample, top, left, (crop_size, crop_size), flip)
}

/// Horizontal flip of the whole sample with probability `flip_prob`.
pub fn random_flip(sample: &ModalSample, flip_prob: f64, seed: u64) -> Result<ModalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen_bool(flip_prob.clamp(0.0, 1.0));
    crop_and_flip(sample, 0, 0, (sample.height(), sample.width()), flip)
}
