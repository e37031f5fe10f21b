//! Construction of the network input stack.
//!
//! Channel order (polarized input):
//! `i000 i045 i090 i135 | intensity | dop | six |iφ1 − iφ2| | mask | features`,
//! i.e. `13 + F` channels. The intensity-only ablation replaces the first
//! twelve polarization channels with the intensity image alone.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, INPUT_FEATURE_CHANNELS};
use crate::image::{Image, Tensor};
use crate::polarimetry::{angle_of_polarization, compute_stokes, degree_of_polarization, intensity_average, PolarizedQuad};
use crate::scalar::Scalar;

/// Default saturation threshold for images in `[0, 1]`.
pub const DEFAULT_TAU: f64 = 0.98;

/// Version of the channel layout. Bumped whenever channel order changes.
pub const LAYOUT_VERSION: u32 = 1;

/// Angle pairs of the six difference images, as plane indices.
pub const DIFF_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

const ANGLE_TAGS: [&str; 4] = ["000", "045", "090", "135"];

/// Binary map that is 0 where any angle plane exceeds `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct OverexposureMask<T> {
    pub mask: Image<T>,
    pub tau: f64,
}

impl<T: Scalar> OverexposureMask<T> {
    pub fn all_ones(height: usize, width: usize) -> Self {
        Self {
            mask: Image::filled(height, width, T::one()),
            tau: 1.0,
        }
    }

    pub fn shared(&self) -> Arc<Vec<T>> {
        Arc::new(self.mask.data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> OverexposureMask<U> {
        OverexposureMask {
            mask: self.mask.cast(),
            tau: self.tau,
        }
    }
}

pub fn overexposure_mask<T: Scalar>(q: &PolarizedQuad<T>, tau: f64) -> Result<OverexposureMask<T>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Validation(format!("mask threshold {tau} outside (0, 1]")));
    }
    let t = T::of(tau);
    let [a, b, c, d] = q.planes();
    let (h, w) = q.dims();
    let data = (0..a.len())
        .map(|i| {
            let m = a.data()[i].max(b.data()[i]).max(c.data()[i]).max(d.data()[i]);
            if m > t {
                T::zero()
            } else {
                T::one()
            }
        })
        .collect();
    Ok(OverexposureMask {
        mask: Image::new(h, w, data)?,
        tau,
    })
}

/// The six pairwise `|iφ1 − iφ2|` images in [`DIFF_PAIRS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceImages<T> {
    pub images: [Image<T>; 6],
}

impl<T: Scalar> DifferenceImages<T> {
    /// Difference image for two angles in degrees, in either order.
    pub fn get(&self, deg_a: u32, deg_b: u32) -> Option<&Image<T>> {
        let idx = |d: u32| [0, 45, 90, 135].iter().position(|&x| x == d);
        let (a, b) = (idx(deg_a)?, idx(deg_b)?);
        let key = (a.min(b), a.max(b));
        DIFF_PAIRS.iter().position(|&p| p == key).map(|k| &self.images[k])
    }
}

pub fn difference_images<T: Scalar>(q: &PolarizedQuad<T>) -> DifferenceImages<T> {
    let planes = q.planes();
    let images = DIFF_PAIRS.map(|(a, b)| {
        planes[a]
            .zip_map(&planes[b], |x, y| (x - y).abs())
            .expect("quad planes share dimensions")
    });
    DifferenceImages { images }
}

/// Bilinear resize with half-pixel centres, applied per channel.
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    if (t.height, t.width) == (height, width) {
        return t.clone();
    }
    let sy = t.height as f64 / height as f64;
    let sx = t.width as f64 / width as f64;
    let coords = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, T::of(src - i0 as f64))
    };
    let ys: Vec<_> = (0..height).map(|y| coords(y, sy, t.height)).collect();
    let xs: Vec<_> = (0..width).map(|x| coords(x, sx, t.width)).collect();
    let mut out = Tensor::zeros(t.channels, height, width);
    for c in 0..t.channels {
        let src = t.plane(c);
        let dst = out.plane_mut(c);
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * t.width + x0] * (T::one() - fx) + src[y0 * t.width + x1] * fx;
                let bot = src[y1 * t.width + x0] * (T::one() - fx) + src[y1 * t.width + x1] * fx;
                dst[y * width + x] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Early-layer perceptual maps of `x`, upsampled to the image size.
pub fn extract_features<T: Scalar>(x: &Image<T>, extractor: &dyn FeatureExtractor<T>) -> Result<Tensor<T>> {
    if extractor.early_channels() == 0 {
        return Err(Error::Config(format!("extractor {} exposes no early layer", extractor.id())));
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_images([x])?);
    let e = extractor.early(&mut tape, v);
    Ok(resize_bilinear(tape.value(e), x.height(), x.width()))
}

/// Applies a `(c_out, c_in, 1)` projection to every pixel.
fn project<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(w.channels, x.height, x.width);
    T::gemm(
        w.channels,
        x.channels,
        x.plane_len(),
        T::one(),
        &w.data,
        false,
        &x.data,
        false,
        T::zero(),
        &mut out.data,
    );
    out
}

/// Names and provenance of the input channels. Written next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub version: u32,
    pub polar_input: bool,
    pub include_aop: bool,
    pub extractor: String,
    pub feature_channels: usize,
    pub names: Vec<String>,
}

impl ChannelLayout {
    pub fn new(opts: &InputOptions, extractor_id: String) -> Self {
        let mut names: Vec<String> = Vec::new();
        if opts.polar_input {
            names.extend(ANGLE_TAGS.iter().map(|a| format!("i{a}")));
            names.push("intensity".into());
            names.push("dop".into());
            if opts.include_aop {
                names.push("aop".into());
            }
            names.extend(DIFF_PAIRS.iter().map(|&(a, b)| format!("diff_{}_{}", ANGLE_TAGS[a], ANGLE_TAGS[b])));
        } else {
            names.push("intensity".into());
        }
        names.push("mask".into());
        names.extend((0..INPUT_FEATURE_CHANNELS).map(|k| format!("feat{k}")));
        Self {
            version: LAYOUT_VERSION,
            polar_input: opts.polar_input,
            include_aop: opts.include_aop,
            extractor: extractor_id,
            feature_channels: INPUT_FEATURE_CHANNELS,
            names,
        }
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("bad channel layout: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }
}

/// Switches controlling what goes into the input stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputOptions {
    /// `false` replaces all polarization channels with the intensity image.
    pub polar_input: bool,
    /// Append the AoP image after DoP.
    pub include_aop: bool,
    pub tau: f64,
}

impl Default for InputOptions {
    fn default() -> Self {
        Self {
            polar_input: true,
            include_aop: false,
            tau: DEFAULT_TAU,
        }
    }
}

/// The channel stack fed to both networks, plus the mask used by the losses.
#[derive(Clone, Debug)]
pub struct NetworkInput<T> {
    pub stack: Tensor<T>,
    pub layout: ChannelLayout,
    pub mask: OverexposureMask<T>,
}

/// Builds the input stack for one scene. Polarimetric quantities are
/// computed in `f64` and converted once.
pub fn assemble_network_input<T: Scalar>(
    q: &PolarizedQuad<f64>,
    extractor: &dyn FeatureExtractor<T>,
    opts: &InputOptions,
) -> Result<NetworkInput<T>> {
    let (h, w) = q.dims();
    let mask = overexposure_mask(q, opts.tau)?;
    let intensity = intensity_average(q);
    let mut planes: Vec<Image<f64>> = Vec::new();
    if opts.polar_input {
        let stokes = compute_stokes(q);
        planes.extend(q.planes().iter().cloned());
        planes.push(intensity.clone());
        planes.push(degree_of_polarization(&stokes));
        if opts.include_aop {
            planes.push(angle_of_polarization(&stokes));
        }
        planes.extend(difference_images(q).images);
    } else {
        planes.push(intensity.clone());
    }
    planes.push(mask.mask.clone());
    let base = Tensor::from_images(planes.iter())?.cast::<T>();

    // Early maps of the four planes and the intensity (or the intensity five
    // times for the intensity-only variant), reduced by the fixed projection.
    let sources: Vec<Image<T>> = if opts.polar_input {
        q.planes().iter().chain([&intensity]).map(|p| p.cast()).collect()
    } else {
        vec![intensity.cast(); 5]
    };
    let mut feats = Vec::with_capacity(5);
    for s in &sources {
        feats.push(extract_features(s, extractor)?);
    }
    let mut data = Vec::new();
    for f in &feats {
        data.extend_from_slice(&f.data);
    }
    let stacked = Tensor::from_vec(5 * extractor.early_channels(), h, w, data)?;
    let features = project(&stacked, extractor.input_projection());

    let mut stack = base;
    stack.channels += features.channels;
    stack.data.extend_from_slice(&features.data);
    let layout = ChannelLayout::new(opts, extractor.id());
    debug_assert_eq!(layout.channels(), stack.channels);
    Ok(NetworkInput {
        stack,
        layout,
        mask: mask.cast(),
    })
}
