//! Perceptual feature extractors.
//!
//! Two implementations share the [`FeatureExtractor`] interface:
//!
//! * [`SurrogateExtractor`]: a small bias-free random convolution stack with
//!   fixed seed. Fast, offline, used by tests and the desk preset.
//! * [`Vgg19Extractor`]: the VGG-19 convolutional trunk, with weights read
//!   from a flat binary file (see `scripts/export_vgg19.py`).
//!
//! Both expose `N = 6` loss layers and an early layer whose maps are used to
//! build the network input.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Tensor;
use crate::nn::{Conv2d, ParamStore};
use crate::scalar::Scalar;

/// Channels of the input-feature block after projection.
pub const INPUT_FEATURE_CHANNELS: usize = 8;

/// Which extractor a run uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractorChoice {
    Surrogate {
        #[serde(default = "default_surrogate_seed")]
        seed: u64,
    },
    Pretrained {
        #[serde(default)]
        weights: Option<PathBuf>,
    },
}

fn default_surrogate_seed() -> u64 {
    0x5eed
}

impl Default for ExtractorChoice {
    fn default() -> Self {
        ExtractorChoice::Surrogate {
            seed: default_surrogate_seed(),
        }
    }
}

/// A fixed (non-trainable) image feature network.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn id(&self) -> String;

    /// Channel count of each loss layer.
    fn layer_channels(&self) -> Vec<usize>;

    fn num_layers(&self) -> usize {
        self.layer_channels().len()
    }

    /// Channel count of the early layer used for network inputs.
    fn early_channels(&self) -> usize;

    fn deterministic(&self) -> bool {
        true
    }

    /// Loss-layer maps of a single-channel image.
    fn layers(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var>;

    /// Early-layer maps of a single-channel image, at whatever resolution the
    /// layer produces.
    fn early(&self, tape: &mut Tape<T>, x: Var) -> Var;

    /// Fixed `(INPUT_FEATURE_CHANNELS, 5·early_channels, 1)` projection that
    /// reduces the concatenated early maps of the five input images.
    fn input_projection(&self) -> &Tensor<T>;
}

/// Builds the extractor selected by `choice`.
pub fn build_extractor<T: Scalar>(choice: &ExtractorChoice) -> Result<Box<dyn FeatureExtractor<T>>> {
    match choice {
        ExtractorChoice::Surrogate { seed } => Ok(Box::new(SurrogateExtractor::new(*seed))),
        ExtractorChoice::Pretrained { weights: None } => Err(Error::Config(
            "pretrained extractor selected but no weight file is configured".into(),
        )),
        ExtractorChoice::Pretrained { weights: Some(p) } => Ok(Box::new(Vgg19Extractor::load(p)?)),
    }
}

fn projection<T: Scalar>(seed: u64, in_channels: usize) -> Tensor<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let bound = (3.0 / in_channels as f64).sqrt();
    let data = (0..INPUT_FEATURE_CHANNELS * in_channels)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(INPUT_FEATURE_CHANNELS, in_channels, 1, data).expect("sizes match")
}

const SURROGATE_WIDTHS: [(usize, usize, usize); 5] = [(1, 4, 1), (4, 8, 1), (8, 8, 2), (8, 8, 1), (8, 8, 2)];

/// Bias-free random convolution stack. Layer 0 is the image itself; layers
/// 1–5 are leaky-ReLU convolutions, with stride 2 at layers 3 and 5.
pub struct SurrogateExtractor<T> {
    seed: u64,
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
    projection: Tensor<T>,
}

impl<T: Scalar> SurrogateExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let convs = SURROGATE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                Conv2d::new(&mut store, &mut rng, &format!("surrogate.{i}"), cin, cout, 3, stride, false)
            })
            .collect();
        // Weights are constants for every consumer.
        let mut frozen = ParamStore::new();
        for id in store.ids() {
            frozen.add_frozen(store.name(id).to_string(), store.value(id).clone());
        }
        Self {
            seed,
            store: frozen,
            convs,
            projection: projection(seed, 5 * 8),
        }
    }

    /// Per-layer `(weights (c_out, c_in, 9), stride)`, in application order.
    pub fn conv_weights(&self) -> Vec<(&Tensor<T>, usize)> {
        self.convs.iter().map(|c| (self.store.value(c.w), c.stride)).collect()
    }

    fn run(&self, tape: &mut Tape<T>, x: Var, upto: usize) -> Vec<Var> {
        let mut outs = vec![x];
        let mut h = x;
        for conv in &self.convs[..upto] {
            h = conv.forward(tape, &self.store, h);
            h = tape.leaky_relu(h, T::of(0.2));
            outs.push(h);
        }
        outs
    }
}

impl<T: Scalar> FeatureExtractor<T> for SurrogateExtractor<T> {
    fn id(&self) -> String {
        format!("surrogate-{:x}", self.seed)
    }

    fn layer_channels(&self) -> Vec<usize> {
        std::iter::once(1)
            .chain(SURROGATE_WIDTHS.iter().map(|w| w.1))
            .collect()
    }

    fn early_channels(&self) -> usize {
        8
    }

    fn layers(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var> {
        self.run(tape, x, self.convs.len())
    }

    fn early(&self, tape: &mut Tape<T>, x: Var) -> Var {
        self.run(tape, x, 2)[2]
    }

    fn input_projection(&self) -> &Tensor<T> {
        &self.projection
    }
}

/// VGG-19 convolution widths up to `conv5_2`, `None` marking max pooling.
const VGG19_TRUNK: [Option<usize>; 18] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
];

/// Names of the convolutions in [`VGG19_TRUNK`] order.
pub const VGG19_CONV_NAMES: [&str; 14] = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv3_4", "conv4_1",
    "conv4_2", "conv4_3", "conv4_4", "conv5_1", "conv5_2",
];

/// Post-ReLU outputs used as loss layers (besides the image itself).
const VGG19_LOSS_LAYERS: [&str; 5] = ["conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Magic prefix of the VGG weight file.
pub const VGG_MAGIC: &[u8; 8] = b"RP2PNVGG";

/// VGG-19 trunk with externally supplied weights.
///
/// Weight file layout (little endian): the 8-byte magic `RP2PNVGG`, a `u32`
/// convolution count (14), then for each convolution in `conv1_1 … conv5_2`
/// order: `u32 out, u32 in, u32 k`, `out·in·k·k` `f32` weights in
/// `(out, in, ky, kx)` order and `out` `f32` biases.
pub struct Vgg19Extractor<T> {
    path: PathBuf,
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
    projection: Tensor<T>,
}

impl<T: Scalar> Vgg19Extractor<T> {
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let fmt = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != VGG_MAGIC {
            return Err(fmt("not a VGG weight file (bad magic)"));
        }
        let mut pos = 8;
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| fmt("truncated header"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let count = read_u32(&mut pos)? as usize;
        if count != VGG19_CONV_NAMES.len() {
            return Err(fmt(&format!("expected 14 convolutions, found {count}")));
        }
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, out) in VGG19_TRUNK.iter().flatten().enumerate() {
            let o = read_u32(&mut pos)? as usize;
            let c = read_u32(&mut pos)? as usize;
            let k = read_u32(&mut pos)? as usize;
            if (o, c, k) != (*out, in_ch, 3) {
                return Err(fmt(&format!(
                    "{}: expected shape ({out}, {in_ch}, 3), found ({o}, {c}, {k})",
                    VGG19_CONV_NAMES[i]
                )));
            }
            let n_w = o * c * 9;
            let floats = |pos: &mut usize, n: usize| -> Result<Vec<T>> {
                let b = bytes
                    .get(*pos..*pos + 4 * n)
                    .ok_or_else(|| fmt(&format!("{}: truncated weights", VGG19_CONV_NAMES[i])))?;
                *pos += 4 * n;
                Ok(b.chunks_exact(4)
                    .map(|q| T::of(f32::from_le_bytes(q.try_into().expect("4 bytes")) as f64))
                    .collect())
            };
            let w = floats(&mut pos, n_w)?;
            let b = floats(&mut pos, o)?;
            let name = VGG19_CONV_NAMES[i];
            let wid = store.add_frozen(format!("vgg.{name}.weight"), Tensor::from_vec(o, c, 9, w)?);
            let bid = store.add_frozen(format!("vgg.{name}.bias"), Tensor::from_vec(o, 1, 1, b)?);
            convs.push(Conv2d {
                w: wid,
                b: Some(bid),
                in_channels: c,
                out_channels: o,
                kernel: 3,
                stride: 1,
            });
            in_ch = o;
        }
        if pos != bytes.len() {
            return Err(fmt("trailing bytes after conv5_2"));
        }
        Ok(Self {
            path: path.to_path_buf(),
            store,
            convs,
            projection: projection(0x7667, 5 * 128),
        })
    }

    /// Runs the trunk until `stop` (a conv name) and returns the requested
    /// post-ReLU maps.
    fn run(&self, tape: &mut Tape<T>, x: Var, stop: &str, want: &[&str]) -> Vec<Var> {
        // grey → normalized RGB
        let (h, w) = {
            let v = tape.value(x);
            (v.height, v.width)
        };
        let mut chans = Vec::with_capacity(3);
        for c in 0..3 {
            let s = tape.scale(x, T::of(1.0 / IMAGENET_STD[c]));
            let off = tape.constant(Tensor::from_vec(1, h, w, vec![T::of(-IMAGENET_MEAN[c] / IMAGENET_STD[c]); h * w]).expect("sizes"));
            chans.push(tape.add(s, off));
        }
        let mut cur = tape.concat(&chans);
        let mut outs = Vec::new();
        let mut conv_idx = 0;
        for layer in VGG19_TRUNK {
            match layer {
                None => cur = tape.max_pool2(cur),
                Some(_) => {
                    let name = VGG19_CONV_NAMES[conv_idx];
                    cur = self.convs[conv_idx].forward(tape, &self.store, cur);
                    cur = tape.relu(cur);
                    conv_idx += 1;
                    if want.contains(&name) {
                        outs.push(cur);
                    }
                    if name == stop {
                        break;
                    }
                }
            }
        }
        outs
    }
}

impl<T: Scalar> FeatureExtractor<T> for Vgg19Extractor<T> {
    fn id(&self) -> String {
        format!("vgg19:{}", self.path.display())
    }

    fn layer_channels(&self) -> Vec<usize> {
        vec![1, 64, 128, 256, 512, 512]
    }

    fn early_channels(&self) -> usize {
        128
    }

    fn layers(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var> {
        let mut out = vec![x];
        out.extend(self.run(tape, x, "conv5_2", &VGG19_LOSS_LAYERS));
        out
    }

    fn early(&self, tape: &mut Tape<T>, x: Var) -> Var {
        self.run(tape, x, "conv2_2", &["conv2_2"])[0]
    }

    fn input_projection(&self) -> &Tensor<T> {
        &self.projection
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_layers(ex: &dyn FeatureExtractor<f64>, img: Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(img);
        ex.layers(&mut tape, x).into_iter().map(|v| tape.value(v).clone()).collect()
    }

    #[test]
    fn surrogate_layers_have_declared_channels_and_no_bias_path() {
        let ex = SurrogateExtractor::<f64>::new(1);
        let maps = run_layers(&ex, Tensor::zeros(1, 16, 16));
        assert_eq!(maps.len(), 6);
        let chans: Vec<usize> = maps.iter().map(|m| m.channels).collect();
        assert_eq!(chans, ex.layer_channels());
        assert!(maps.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
        assert_eq!(maps[5].height, 4);
    }

    #[test]
    fn surrogate_is_deterministic_per_seed() {
        let img = Tensor::from_vec(1, 8, 8, (0..64).map(|i| (i as f64 * 0.1).sin().abs()).collect()).unwrap();
        let a = run_layers(&SurrogateExtractor::<f64>::new(3), img.clone());
        let b = run_layers(&SurrogateExtractor::<f64>::new(3), img.clone());
        let c = run_layers(&SurrogateExtractor::<f64>::new(4), img);
        assert_eq!(a, b);
        assert_ne!(a[3], c[3]);
    }

    #[test]
    fn pretrained_without_weights_is_a_config_error() {
        let err = build_extractor::<f32>(&ExtractorChoice::Pretrained { weights: None })
            .err()
            .unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    fn write_vgg(path: &Path, corrupt_count: bool) {
        let mut bytes = VGG_MAGIC.to_vec();
        bytes.extend_from_slice(&(if corrupt_count { 13u32 } else { 14u32 }).to_le_bytes());
        let mut cin = 3u32;
        for out in VGG19_TRUNK.iter().flatten() {
            let o = *out as u32;
            for v in [o, cin, 3] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let n = (o * cin * 9 + o) as usize;
            for i in 0..n {
                bytes.extend_from_slice(&(((i % 7) as f32 - 3.0) * 1e-3).to_le_bytes());
            }
            cin = o;
        }
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn vgg_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("vgg.bin");
        write_vgg(&good, false);
        let ex = Vgg19Extractor::<f32>::load(&good).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 32, 32));
        let maps = ex.layers(&mut tape, x);
        let shapes: Vec<_> = maps.iter().map(|&m| tape.value(m).shape()).collect();
        assert_eq!(
            shapes,
            vec![(1, 32, 32), (64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4), (512, 2, 2)]
        );
        let e = ex.early(&mut tape, x);
        assert_eq!(tape.value(e).shape(), (128, 16, 16));

        let bad = dir.path().join("bad.bin");
        write_vgg(&bad, true);
        assert!(matches!(Vgg19Extractor::<f32>::load(&bad), Err(Error::Format { .. })));
        assert!(matches!(
            Vgg19Extractor::<f32>::load(&dir.path().join("none.bin")),
            Err(Error::MissingFile(_))
        ));
    }
}
