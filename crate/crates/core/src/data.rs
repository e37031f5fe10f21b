//! Scene triplets on disk and a synthetic scene generator.
//!
//! Canonical layout under a dataset root:
//!
//! ```text
//! <root>/<split>.txt                       one scene id per line
//! <root>/scene_<id>/{I,R,T}_{000,045,090,135}.png   16-bit grayscale
//! ```
//!
//! `I` is the captured mixture, `R` the reflection and `T` the transmission.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Tensor};
use crate::polarimetry::{synthesize_quad, PolarizedQuad};
use crate::preprocess::resize_bilinear;

const ROLES: [char; 3] = ['I', 'R', 'T'];
const ANGLE_TAGS: [&str; 4] = ["000", "045", "090", "135"];

/// Aligned mixture, reflection and transmission quads of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTriplet {
    pub id: String,
    pub input: PolarizedQuad<f64>,
    pub reflection: PolarizedQuad<f64>,
    pub transmission: PolarizedQuad<f64>,
}

impl SceneTriplet {
    pub fn dims(&self) -> (usize, usize) {
        self.input.dims()
    }

    /// Largest `|I − R − T|` over all planes and pixels.
    pub fn additivity_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..4 {
            let (i, r, t) = (
                self.input.planes()[k].data(),
                self.reflection.planes()[k].data(),
                self.transmission.planes()[k].data(),
            );
            for p in 0..i.len() {
                worst = worst.max((i[p] - r[p] - t[p]).abs());
            }
        }
        worst
    }

    fn role(&self, c: char) -> &PolarizedQuad<f64> {
        match c {
            'I' => &self.input,
            'R' => &self.reflection,
            _ => &self.transmission,
        }
    }
}

/// Dataset partition with its own manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn manifest_path(self, root: &Path) -> PathBuf {
        root.join(format!("{}.txt", self.as_str()))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Validation(format!("unknown split {s:?}, expected train, val or test"))),
        }
    }
}

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join(format!("scene_{id}"))
}

pub fn plane_path(dir: &Path, role: char, k: usize) -> PathBuf {
    dir.join(format!("{role}_{}.png", ANGLE_TAGS[k]))
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes `[0,1]` values as a 16-bit grayscale PNG. Values outside the
/// range are clamped.
pub fn write_png16(path: &Path, img: &Image<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let bytes: Vec<u8> = img.data().iter().flat_map(|&v| quantize(v).to_be_bytes()).collect();
    let fmt_err = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = enc.write_header().map_err(fmt_err)?;
    w.write_image_data(&bytes).map_err(fmt_err)?;
    w.finish().map_err(fmt_err)
}

/// Reads a grayscale PNG into `[0,1]`. With `require_16bit` anything but a
/// 16-bit single-channel file is rejected; otherwise 8-bit files are
/// accepted too.
pub fn read_png(path: &Path, require_16bit: bool) -> Result<Image<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| fmt_err(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(fmt_err(format!("expected grayscale, found {color:?}")));
    }
    let sixteen = match depth {
        png::BitDepth::Sixteen => true,
        png::BitDepth::Eight if !require_16bit => false,
        d => return Err(fmt_err(format!("expected 16-bit samples, found {d:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fmt_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt_err(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let data: Vec<f64> = if sixteen {
        buf[..h * w * 2]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect()
    } else {
        buf[..h * w].iter().map(|&b| b as f64 / 255.0).collect()
    };
    Image::new(h, w, data)
}

/// Writes the twelve planes of a scene to `<root>/scene_<id>/`.
pub fn save_scene(root: &Path, scene: &SceneTriplet) -> Result<PathBuf> {
    let dir = scene_dir(root, &scene.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for role in ROLES {
        for (k, plane) in scene.role(role).planes().iter().enumerate() {
            write_png16(&plane_path(&dir, role, k), plane)?;
        }
    }
    Ok(dir)
}

/// Loads a scene directory. The id is the directory name without its
/// `scene_` prefix.
pub fn load_scene(dir: &Path) -> Result<SceneTriplet> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Validation(format!("not a scene directory: {}", dir.display())))?;
    let id = name.strip_prefix("scene_").unwrap_or(name).to_string();
    let mut quads = Vec::with_capacity(3);
    for role in ROLES {
        let mut planes = Vec::with_capacity(4);
        for k in 0..4 {
            let path = plane_path(dir, role, k);
            let img = read_png(&path, true)?;
            if let Some(first) = planes.first().or(quads.first().map(|q: &PolarizedQuad<f64>| &q.planes()[0])) {
                let first: &Image<f64> = first;
                if first.dims() != img.dims() {
                    return Err(Error::Format {
                        path,
                        message: format!(
                            "{}x{} does not match the scene's {}x{}",
                            img.height(),
                            img.width(),
                            first.height(),
                            first.width()
                        ),
                    });
                }
            }
            planes.push(img);
        }
        quads.push(PolarizedQuad::from_planes(crate::polarimetry::vec_to_array(planes))?);
    }
    let [input, reflection, transmission] = <[PolarizedQuad<f64>; 3]>::try_from(quads).expect("three roles");
    Ok(SceneTriplet {
        id,
        input,
        reflection,
        transmission,
    })
}

/// Loads only the four input planes of a scene directory. 8-bit files are
/// accepted.
pub fn load_input(dir: &Path) -> Result<PolarizedQuad<f64>> {
    let planes = (0..4)
        .map(|k| read_png(&plane_path(dir, 'I', k), false))
        .collect::<Result<Vec<_>>>()?;
    PolarizedQuad::from_planes(crate::polarimetry::vec_to_array(planes))
}

/// Writes `<root>/<split>.txt`, one id per line.
pub fn write_manifest(root: &Path, split: Split, ids: &[String]) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = split.manifest_path(root);
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Lazily loaded scenes of one split, in lexical id order.
#[derive(Clone, Debug)]
pub struct SceneIter {
    root: PathBuf,
    ids: Vec<String>,
    next: usize,
}

impl SceneIter {
    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

impl Iterator for SceneIter {
    type Item = Result<SceneTriplet>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = self.ids.get(self.next)?;
        self.next += 1;
        let dir = scene_dir(&self.root, id);
        if !dir.is_dir() {
            return Some(Err(Error::Validation(format!(
                "scene {id:?} listed in the manifest is missing ({})",
                dir.display()
            ))));
        }
        Some(load_scene(&dir))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.ids.len() - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for SceneIter {}

/// Opens a split. Only the manifest is read here; each scene is loaded when
/// the iterator reaches it.
pub fn dataset_split(root: &Path, split: Split) -> Result<SceneIter> {
    let path = split.manifest_path(root);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    ids.sort();
    Ok(SceneIter {
        root: root.to_path_buf(),
        ids,
        next: 0,
    })
}

/// Base texture of the synthetic components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TextureSource {
    /// Smooth value noise: `octaves` layers starting at a lattice spacing of
    /// `cell` pixels, halving each octave.
    Noise { cell: usize, octaves: usize },
    Checkerboard { cell: usize },
    /// A grayscale PNG resized to the scene size. The reflection uses the
    /// mirrored image.
    File { path: PathBuf },
}

impl Default for TextureSource {
    fn default() -> Self {
        TextureSource::Noise { cell: 16, octaves: 3 }
    }
}

/// Parameters of [`synthesize_scene`]. DoP and AoP are drawn once per
/// component and held constant over the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneParams {
    pub height: usize,
    pub width: usize,
    pub texture: TextureSource,
    /// Reflection texture lattice is this many times coarser than the
    /// transmission one (noise textures only).
    pub r_smoothness: usize,
    pub t_dop_range: [f64; 2],
    pub r_dop_range: [f64; 2],
    pub t_aop_range: [f64; 2],
    pub r_aop_range: [f64; 2],
    /// Range of the transmission intensity.
    pub t_level: [f64; 2],
    /// Range of the reflection intensity before the gain.
    pub r_level: [f64; 2],
    pub r_gain: f64,
    pub seed: u64,
}

impl Default for SynthSceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            texture: TextureSource::default(),
            r_smoothness: 2,
            t_dop_range: [0.05, 0.15],
            r_dop_range: [0.4, 0.6],
            t_aop_range: [-FRAC_PI_2, FRAC_PI_2],
            r_aop_range: [-FRAC_PI_2, FRAC_PI_2],
            t_level: [0.05, 0.6],
            r_level: [0.0, 0.5],
            r_gain: 0.6,
            seed: 0,
        }
    }
}

impl SynthSceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!("scene size {}x{} is empty", self.height, self.width));
        }
        for (name, r) in [("t_dop_range", self.t_dop_range), ("r_dop_range", self.r_dop_range)] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return bad(format!("{name} {r:?} must be an ordered sub-range of [0, 1]"));
            }
        }
        for (name, r) in [("t_aop_range", self.t_aop_range), ("r_aop_range", self.r_aop_range)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(format!("{name} {r:?} must be finite and ordered"));
            }
        }
        for (name, r) in [("t_level", self.t_level), ("r_level", self.r_level)] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} {r:?} must be finite, ordered and non-negative"));
            }
        }
        if !(self.r_gain >= 0.0 && self.r_gain.is_finite()) {
            return bad(format!("r_gain {} must be finite and non-negative", self.r_gain));
        }
        match &self.texture {
            TextureSource::Noise { cell, octaves } if *cell == 0 || *octaves == 0 => {
                bad("noise texture needs cell > 0 and octaves > 0".into())
            }
            TextureSource::Checkerboard { cell: 0 } => bad("checkerboard cell must be > 0".into()),
            _ if self.r_smoothness == 0 => bad("r_smoothness must be > 0".into()),
            _ => Ok(()),
        }
    }
}

/// Output of [`synthesize_scene`].
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// Input clipped to `[0,1]`.
    pub triplet: SceneTriplet,
    /// `R + T` before clipping.
    pub unclipped_input: PolarizedQuad<f64>,
    /// Fraction of input samples (over all planes) that were clipped.
    pub clipped_fraction: f64,
    pub t_dop: f64,
    pub r_dop: f64,
    pub t_aop: f64,
    pub r_aop: f64,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise normalized to `[0,1]`.
pub fn value_noise(rng: &mut impl Rng, height: usize, width: usize, cell: usize, octaves: usize) -> Image<f64> {
    let mut acc = vec![0.0; height * width];
    let mut amp = 1.0;
    let mut cell = cell.max(1) as f64;
    for _ in 0..octaves {
        let gh = (height as f64 / cell).ceil() as usize + 2;
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        for y in 0..height {
            let fy = y as f64 / cell;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..width {
                let fx = x as f64 / cell;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                acc[y * width + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp *= 0.5;
        cell = (cell / 2.0).max(1.0);
    }
    let img = Image::new(height, width, acc).expect("sizes match");
    normalize(&img)
}

fn normalize(img: &Image<f64>) -> Image<f64> {
    let (lo, hi) = img.min_max();
    if hi - lo <= f64::EPSILON {
        return Image::filled(img.height(), img.width(), 0.5);
    }
    img.map(|v| (v - lo) / (hi - lo))
}

fn checkerboard(rng: &mut impl Rng, height: usize, width: usize, cell: usize) -> Image<f64> {
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    Image::from_fn(height, width, |y, x| (((y + oy) / cell + (x + ox) / cell) % 2) as f64)
}

fn file_texture(path: &Path, height: usize, width: usize, mirror: bool) -> Result<Image<f64>> {
    let img = read_png(path, false)?;
    let t = Tensor::from_images([&img])?;
    let mut out = resize_bilinear(&t, height, width).channel_image(0);
    if mirror {
        out = Image::from_fn(height, width, |y, x| out.get(y, width - 1 - x));
    }
    Ok(normalize(&out))
}

fn sample(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Generates a mixture `I = R + T` from two independent polarized textures.
/// The seed fully determines the output.
pub fn synthesize_scene(id: &str, p: &SynthSceneParams) -> Result<SyntheticScene> {
    p.validate()?;
    let (h, w) = (p.height, p.width);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (t_tex, r_tex) = match &p.texture {
        TextureSource::Noise { cell, octaves } => (
            value_noise(&mut rng, h, w, *cell, *octaves),
            value_noise(&mut rng, h, w, cell * p.r_smoothness, *octaves),
        ),
        TextureSource::Checkerboard { cell } => (
            checkerboard(&mut rng, h, w, *cell),
            checkerboard(&mut rng, h, w, cell * p.r_smoothness),
        ),
        TextureSource::File { path } => (file_texture(path, h, w, false)?, file_texture(path, h, w, true)?),
    };
    let t_dop = sample(&mut rng, p.t_dop_range);
    let r_dop = sample(&mut rng, p.r_dop_range);
    let t_aop = sample(&mut rng, p.t_aop_range);
    let r_aop = sample(&mut rng, p.r_aop_range);
    // s0 is twice the intensity.
    let level = |tex: &Image<f64>, r: [f64; 2], gain: f64| tex.map(|v| 2.0 * gain * (r[0] + (r[1] - r[0]) * v));
    let t_s0 = level(&t_tex, p.t_level, 1.0);
    let r_s0 = level(&r_tex, p.r_level, p.r_gain);
    let transmission = synthesize_quad(&t_s0, &Image::filled(h, w, t_dop), &Image::filled(h, w, t_aop))?;
    let reflection = synthesize_quad(&r_s0, &Image::filled(h, w, r_dop), &Image::filled(h, w, r_aop))?;
    let unclipped_input = transmission.add(&reflection)?;
    let clipped = unclipped_input
        .planes()
        .iter()
        .flat_map(|p| p.data())
        .filter(|&&v| v > 1.0)
        .count();
    let clipped_fraction = clipped as f64 / (4 * h * w) as f64;
    let input = unclipped_input.map(|v| v.min(1.0));
    Ok(SyntheticScene {
        triplet: SceneTriplet {
            id: id.to_string(),
            input,
            reflection,
            transmission,
        },
        unclipped_input,
        clipped_fraction,
        t_dop,
        r_dop,
        t_aop,
        r_aop,
    })
}

/// Scene ids `<split>_0000`, `<split>_0001`, ...
pub fn synth_ids(split: Split, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{split}_{i:04}")).collect()
}

/// Seed of the first scene of a split. Splits are 10 000 seeds apart so they
/// never share scenes.
pub fn split_seed(base: u64, split: Split) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => 10_000,
        Split::Test => 20_000,
    };
    base.wrapping_add(offset)
}

/// Generates `count` scenes of `split` in memory; scene `i` uses seed
/// `split_seed(params.seed, split) + i`.
pub fn synthesize_split(split: Split, count: usize, params: &SynthSceneParams) -> Result<Vec<SyntheticScene>> {
    params.validate()?;
    let first = split_seed(params.seed, split);
    synth_ids(split, count)
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let p = SynthSceneParams {
                seed: first.wrapping_add(i as u64),
                ..params.clone()
            };
            synthesize_scene(id, &p)
        })
        .collect()
}

/// Writes the scenes of [`synthesize_split`] and the split manifest.
/// Returns the ids.
pub fn write_synthetic_split(root: &Path, split: Split, count: usize, params: &SynthSceneParams) -> Result<Vec<String>> {
    let scenes = synthesize_split(split, count, params)?;
    for s in &scenes {
        save_scene(root, &s.triplet)?;
    }
    let ids: Vec<String> = scenes.into_iter().map(|s| s.triplet.id).collect();
    write_manifest(root, split, &ids)?;
    Ok(ids)
}
