//! The recurrent polarization-to-polarization separation network.
//!
//! Two U-Nets run in sequence on every iteration: the reflection network
//! (with a convolutional LSTM at its bottleneck) sees the input stack plus
//! the current transmission estimate and predicts the reflection; the
//! transmission network sees the input stack plus that reflection and
//! predicts the transmission, which is fed back on the next iteration.
//!
//! Each U-Net has 10 encoder blocks and 8 decoder blocks. Encoder blocks 1,
//! 3, 5 and 7 downsample by 2 (the first `down_levels` of them). Decoder
//! blocks come in four pairs; each pair upsamples, concatenates the skip
//! from encoder block 6, 4, 2, 0 and applies two convolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::image::{Image, Tensor};
use crate::nn::{Conv2d, ConvBlock, ConvLstmCell, ParamStore};
use crate::polarimetry::{PolarizedQuad, vec_to_array};
use crate::preprocess::{assemble_network_input, InputOptions, NetworkInput};
use crate::scalar::Scalar;

pub const ENCODER_BLOCKS: usize = 10;
pub const DECODER_BLOCKS: usize = 8;
const SKIP_SOURCES: [usize; 4] = [6, 4, 2, 0];

/// Widths and depth of one U-Net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// Number of stride-2 encoder blocks (1–4).
    pub down_levels: usize,
}

impl UNetConfig {
    /// Widths `base·[1,1,2,2,4,4,8,8,8,8]` / `base·[8,8,4,4,2,2,1,1]`.
    pub fn from_base(base: usize, down_levels: usize) -> Self {
        Self {
            encoder_widths: [1, 1, 2, 2, 4, 4, 8, 8, 8, 8].iter().map(|m| m * base).collect(),
            decoder_widths: [8, 8, 4, 4, 2, 2, 1, 1].iter().map(|m| m * base).collect(),
            down_levels,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.encoder_widths.len() != ENCODER_BLOCKS || self.decoder_widths.len() != DECODER_BLOCKS {
            return Err(Error::Config(format!(
                "{name}: need {ENCODER_BLOCKS} encoder and {DECODER_BLOCKS} decoder widths, got {} and {}",
                self.encoder_widths.len(),
                self.decoder_widths.len()
            )));
        }
        if !(1..=4).contains(&self.down_levels) {
            return Err(Error::Config(format!("{name}: down_levels must be 1..=4, got {}", self.down_levels)));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return Err(Error::Config(format!("{name}: zero channel width")));
        }
        Ok(())
    }

    fn stride(&self, block: usize) -> usize {
        if block % 2 == 1 && block / 2 < self.down_levels && block < 8 {
            2
        } else {
            1
        }
    }

    fn level(&self, block: usize) -> usize {
        (0..=block).filter(|&b| self.stride(b) == 2).count()
    }

    /// Spatial dimensions must be divisible by this.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.down_levels
    }
}

/// Full network configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rp2pnConfig {
    /// Channels of the shared input stack.
    pub in_channels: usize,
    pub r_net: UNetConfig,
    pub t_net: UNetConfig,
    /// Hidden channels of the bottleneck LSTM; `None` removes the LSTM.
    pub lstm_hidden: Option<usize>,
    /// Predict four polarized planes (`true`) or one intensity plane.
    pub polar_output: bool,
    pub n_iters: usize,
}

impl Rp2pnConfig {
    pub fn out_channels(&self) -> usize {
        if self.polar_output {
            4
        } else {
            1
        }
    }

    /// Reduced widths for CPU-scale runs on 64×64 crops.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            r_net: UNetConfig::from_base(8, 4),
            t_net: UNetConfig::from_base(8, 4),
            lstm_hidden: Some(64),
            polar_output: true,
            n_iters: 3,
        }
    }

    /// Full-width configuration for real data.
    pub fn paper(in_channels: usize) -> Self {
        Self {
            in_channels,
            r_net: UNetConfig::from_base(32, 4),
            t_net: UNetConfig::from_base(32, 4),
            lstm_hidden: Some(256),
            polar_output: true,
            n_iters: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.r_net.validate("r_net")?;
        self.t_net.validate("t_net")?;
        if self.n_iters < 1 {
            return Err(Error::Validation(format!("n_iters must be at least 1, got {}", self.n_iters)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.lstm_hidden == Some(0) {
            return Err(Error::Config("lstm_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// One U-Net with an optional LSTM at the bottleneck.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    in_channels: usize,
    encoder: Vec<ConvBlock>,
    lstm: Option<ConvLstmCell>,
    decoder: Vec<ConvBlock>,
    head: Conv2d,
}

impl UNet {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &UNetConfig,
        in_channels: usize,
        out_channels: usize,
        lstm_hidden: Option<usize>,
    ) -> Self {
        let mut encoder = Vec::with_capacity(ENCODER_BLOCKS);
        let mut c = in_channels;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            encoder.push(ConvBlock::new(store, rng, &format!("{name}.enc{i}"), c, w, cfg.stride(i)));
            c = w;
        }
        let lstm = lstm_hidden.map(|h| {
            let cell = ConvLstmCell::new(store, rng, &format!("{name}.lstm"), c, h);
            c = h;
            cell
        });
        let mut decoder = Vec::with_capacity(DECODER_BLOCKS);
        for pair in 0..4 {
            let skip = cfg.encoder_widths[SKIP_SOURCES[pair]];
            let (wa, wb) = (cfg.decoder_widths[2 * pair], cfg.decoder_widths[2 * pair + 1]);
            decoder.push(ConvBlock::new(store, rng, &format!("{name}.dec{}", 2 * pair), c + skip, wa, 1));
            decoder.push(ConvBlock::new(store, rng, &format!("{name}.dec{}", 2 * pair + 1), wa, wb, 1));
            c = wb;
        }
        let head = Conv2d::new(store, rng, &format!("{name}.head"), c, out_channels, 1, 1, true);
        Self {
            cfg: cfg.clone(),
            in_channels,
            encoder,
            lstm,
            decoder,
            head,
        }
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var, name: &str) -> Result<()> {
        let (c, h, w) = tape.value(x).shape();
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "{name} expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let f = self.cfg.downsampling_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "{name}: input {h}x{w} is not divisible by the downsampling factor {f}"
            )));
        }
        Ok(())
    }

    /// Returns the sigmoid-bounded output and the new LSTM state.
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: Option<(Var, Var)>,
    ) -> (Var, Option<(Var, Var)>) {
        let mut skips = Vec::with_capacity(ENCODER_BLOCKS);
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(tape, store, h);
            skips.push(h);
        }
        let mut level = self.cfg.level(ENCODER_BLOCKS - 1);
        let new_state = self.lstm.as_ref().map(|cell| {
            let (hn, cn) = cell.forward(tape, store, h, state);
            h = hn;
            (hn, cn)
        });
        for pair in 0..4 {
            let src = SKIP_SOURCES[pair];
            let skip_level = self.cfg.level(src);
            let up = tape.upsample(h, 1 << (level - skip_level));
            level = skip_level;
            let cat = tape.concat(&[up, skips[src]]);
            h = self.decoder[2 * pair].forward(tape, store, cat);
            h = self.decoder[2 * pair + 1].forward(tape, store, h);
        }
        let out = self.head.forward(tape, store, h);
        (tape.sigmoid(out), new_state)
    }
}

/// LSTM hidden and cell maps at bottleneck resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
    /// Number of steps taken since reset.
    pub iteration: usize,
}

/// Network output planes: four angle planes, or one intensity plane for
/// the intensity-output variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub planes: Tensor<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn quad(&self) -> Option<PolarizedQuad<T>> {
        if self.planes.channels != 4 {
            return None;
        }
        let planes = vec_to_array((0..4).map(|c| self.planes.channel_image(c)).collect());
        PolarizedQuad::from_planes(planes).ok()
    }

    /// Average of the output planes.
    pub fn intensity(&self) -> Image<T> {
        let n = self.planes.plane_len();
        let inv = T::one() / T::of(self.planes.channels as f64);
        let data = (0..n)
            .map(|i| (0..self.planes.channels).map(|c| self.planes.data[c * n + i]).sum::<T>() * inv)
            .collect();
        Image::new(self.planes.height, self.planes.width, data).expect("sizes match")
    }
}

/// All iterations of one forward pass.
#[derive(Clone, Debug)]
pub struct SeparationResult<T> {
    /// `(reflection, transmission)` per iteration.
    pub iterations: Vec<(Prediction<T>, Prediction<T>)>,
    /// LSTM state after each iteration (empty without LSTM).
    pub states: Vec<RecurrentState<T>>,
}

impl<T: Scalar> SeparationResult<T> {
    pub fn last(&self) -> &(Prediction<T>, Prediction<T>) {
        self.iterations.last().expect("at least one iteration")
    }

    pub fn r_intensity(&self) -> Image<T> {
        self.last().0.intensity()
    }

    pub fn t_intensity(&self) -> Image<T> {
        self.last().1.intensity()
    }
}

/// Tape nodes of a forward pass, for training.
pub struct TapeOutputs {
    pub iterations: Vec<(Var, Var)>,
    pub states: Vec<(Var, Var)>,
}

/// The full two-network recurrent model and its parameters.
pub struct Rp2pn<T> {
    pub config: Rp2pnConfig,
    pub store: ParamStore<T>,
    r_net: UNet,
    t_net: UNet,
}

impl<T: Scalar> Rp2pn<T> {
    pub fn new(config: Rp2pnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let out = config.out_channels();
        let r_net = UNet::new(
            &mut store,
            &mut rng,
            "r_net",
            &config.r_net,
            config.in_channels + out,
            out,
            config.lstm_hidden,
        );
        let t_net = UNet::new(&mut store, &mut rng, "t_net", &config.t_net, config.in_channels + out, out, None);
        Ok(Self {
            config,
            store,
            r_net,
            t_net,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn has_lstm(&self) -> bool {
        self.config.lstm_hidden.is_some()
    }

    /// Bottleneck size of the reflection network for an `h × w` input.
    pub fn bottleneck_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let f = self.config.r_net.downsampling_factor();
        (h / f, w / f)
    }

    /// Zero state, as used before the first iteration.
    pub fn initial_state(&self, h: usize, w: usize) -> RecurrentState<T> {
        let (bh, bw) = self.bottleneck_dims(h, w);
        let c = self.config.lstm_hidden.unwrap_or(0);
        RecurrentState {
            hidden: Tensor::zeros(c, bh, bw),
            cell: Tensor::zeros(c, bh, bw),
            iteration: 0,
        }
    }

    fn check_aux(&self, tape: &Tape<T>, x: Var, aux: Var, what: &str) -> Result<()> {
        let (cx, hx, wx) = tape.value(x).shape();
        let (ca, ha, wa) = tape.value(aux).shape();
        if cx != self.config.in_channels {
            return Err(Error::Config(format!(
                "input stack has {cx} channels, model expects {}",
                self.config.in_channels
            )));
        }
        if ca != self.config.out_channels() || (ha, wa) != (hx, wx) {
            return Err(Error::Config(format!(
                "{what} has shape {ca}x{ha}x{wa}, expected {}x{hx}x{wx}",
                self.config.out_channels()
            )));
        }
        Ok(())
    }

    /// Reflection network step on the tape.
    pub fn r_step(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        t_estimate: Var,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, Option<(Var, Var)>)> {
        self.check_aux(tape, x, t_estimate, "transmission estimate")?;
        let inp = tape.concat(&[x, t_estimate]);
        self.r_net.check_input(tape, inp, "r_net")?;
        Ok(self.r_net.forward(tape, &self.store, inp, state))
    }

    /// Transmission network step on the tape.
    pub fn t_step(&self, tape: &mut Tape<T>, x: Var, r_estimate: Var) -> Result<Var> {
        self.check_aux(tape, x, r_estimate, "reflection estimate")?;
        let inp = tape.concat(&[x, r_estimate]);
        self.t_net.check_input(tape, inp, "t_net")?;
        Ok(self.t_net.forward(tape, &self.store, inp, None).0)
    }

    /// Runs `n_iters` iterations on the tape starting from `t_init`.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, x: Var, t_init: Var, n_iters: usize) -> Result<TapeOutputs> {
        if n_iters < 1 {
            return Err(Error::Validation(format!("n_iters must be at least 1, got {n_iters}")));
        }
        let mut t_est = t_init;
        let mut state = None;
        let mut iterations = Vec::with_capacity(n_iters);
        let mut states = Vec::new();
        for _ in 0..n_iters {
            let (r, s) = self.r_step(tape, x, t_est, state)?;
            let t = self.t_step(tape, x, r)?;
            if let Some(s) = s {
                states.push(s);
            }
            state = s;
            iterations.push((r, t));
            t_est = t;
        }
        Ok(TapeOutputs { iterations, states })
    }

    /// Reflection network on plain tensors.
    pub fn r_lstm_net_forward(
        &self,
        x: &Tensor<T>,
        t_estimate: &Tensor<T>,
        state: &RecurrentState<T>,
    ) -> Result<(Tensor<T>, RecurrentState<T>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tv = tape.constant(t_estimate.clone());
        let sv = if self.has_lstm() && state.iteration > 0 {
            let (bh, bw) = self.bottleneck_dims(x.height, x.width);
            if (state.hidden.height, state.hidden.width) != (bh, bw) {
                return Err(Error::Config(format!(
                    "recurrent state is {}x{}, bottleneck is {bh}x{bw}",
                    state.hidden.height, state.hidden.width
                )));
            }
            Some((tape.constant(state.hidden.clone()), tape.constant(state.cell.clone())))
        } else {
            None
        };
        let (r, s) = self.r_step(&mut tape, xv, tv, sv)?;
        let next = match s {
            Some((h, c)) => RecurrentState {
                hidden: tape.value(h).clone(),
                cell: tape.value(c).clone(),
                iteration: state.iteration + 1,
            },
            None => RecurrentState {
                iteration: state.iteration + 1,
                ..state.clone()
            },
        };
        Ok((tape.value(r).clone(), next))
    }

    /// Transmission network on plain tensors.
    pub fn t_net_forward(&self, x: &Tensor<T>, r_estimate: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let rv = tape.constant(r_estimate.clone());
        let t = self.t_step(&mut tape, xv, rv)?;
        Ok(tape.value(t).clone())
    }

    /// Separates one prepared input.
    pub fn separate(&self, input: &NetworkInput<T>, t_init: &Tensor<T>, n_iters: usize) -> Result<SeparationResult<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.stack.clone());
        let t0 = tape.constant(t_init.clone());
        let outs = self.forward_on_tape(&mut tape, x, t0, n_iters)?;
        let iterations = outs
            .iterations
            .iter()
            .map(|&(r, t)| {
                (
                    Prediction {
                        planes: tape.value(r).clone(),
                    },
                    Prediction {
                        planes: tape.value(t).clone(),
                    },
                )
            })
            .collect();
        let states = outs
            .states
            .iter()
            .enumerate()
            .map(|(k, &(h, c))| RecurrentState {
                hidden: tape.value(h).clone(),
                cell: tape.value(c).clone(),
                iteration: k + 1,
            })
            .collect();
        Ok(SeparationResult { iterations, states })
    }
}

/// First transmission estimate: the input itself, as four planes or as the
/// intensity image for intensity-output models.
pub fn init_transmission_estimate<T: Scalar>(input: &PolarizedQuad<f64>, polar_output: bool) -> Tensor<T> {
    if polar_output {
        Tensor::from_images(input.planes().iter()).expect("quad planes agree").cast()
    } else {
        Tensor::from_images([&crate::polarimetry::intensity_average(input)])
            .expect("one plane")
            .cast()
    }
}

/// Input preparation plus separation for one scene.
pub fn rp2pn_forward<T: Scalar>(
    model: &Rp2pn<T>,
    scene: &PolarizedQuad<f64>,
    extractor: &dyn FeatureExtractor<T>,
    opts: &InputOptions,
    n_iters: usize,
) -> Result<SeparationResult<T>> {
    if n_iters < 1 {
        return Err(Error::Validation(format!("n_iters must be at least 1, got {n_iters}")));
    }
    let input = assemble_network_input(scene, extractor, opts)?;
    let t0 = init_transmission_estimate(scene, model.config.polar_output);
    model.separate(&input, &t0, n_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SurrogateExtractor;
    use rand::Rng;

    pub(crate) fn tiny_config(in_channels: usize) -> Rp2pnConfig {
        Rp2pnConfig {
            in_channels,
            r_net: UNetConfig::from_base(2, 2),
            t_net: UNetConfig::from_base(2, 2),
            lstm_hidden: Some(3),
            polar_output: true,
            n_iters: 3,
        }
    }

    fn random_scene(seed: u64, h: usize, w: usize) -> PolarizedQuad<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = [0; 4].map(|_| Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0)));
        PolarizedQuad::from_planes(planes).unwrap()
    }

    /// Independent count from the block structure.
    fn expected_params(cfg: &Rp2pnConfig) -> usize {
        let out = cfg.out_channels();
        let unet = |u: &UNetConfig, lstm: Option<usize>| {
            let mut n = 0;
            let mut c = cfg.in_channels + out;
            for &w in &u.encoder_widths {
                n += 9 * c * w + 2 * w;
                c = w;
            }
            if let Some(h) = lstm {
                n += 9 * (c + h) * 4 * h + 4 * h;
                c = h;
            }
            for p in 0..4 {
                let skip = u.encoder_widths[SKIP_SOURCES[p]];
                let (a, b) = (u.decoder_widths[2 * p], u.decoder_widths[2 * p + 1]);
                n += 9 * (c + skip) * a + 2 * a + 9 * a * b + 2 * b;
                c = b;
            }
            n + c * out + out
        };
        unet(&cfg.r_net, cfg.lstm_hidden) + unet(&cfg.t_net, None)
    }

    #[test]
    fn parameter_count_is_fixed() {
        let desk = Rp2pnConfig::desk(21);
        let m = Rp2pn::<f32>::new(desk.clone(), 0).unwrap();
        assert_eq!(m.num_parameters(), expected_params(&desk));
        assert_eq!(m.num_parameters(), 912_984);
        let m2 = Rp2pn::<f32>::new(desk, 99).unwrap();
        assert_eq!(m2.num_parameters(), 912_984);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(21);
        c.n_iters = 0;
        assert!(matches!(Rp2pn::<f64>::new(c, 0), Err(Error::Validation(_))));
        let mut c = tiny_config(21);
        c.r_net.encoder_widths.pop();
        assert!(matches!(Rp2pn::<f64>::new(c, 0), Err(Error::Config(_))));
        let mut c = tiny_config(21);
        c.t_net.down_levels = 5;
        assert!(Rp2pn::<f64>::new(c, 0).is_err());
    }

    #[test]
    fn r_net_shape_state_and_determinism() {
        let model = Rp2pn::<f64>::new(tiny_config(21), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(21, 8, 12, (0..21 * 96).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let t0 = Tensor::from_vec(4, 8, 12, (0..4 * 96).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let s0 = model.initial_state(8, 12);
        let (r, s1) = model.r_lstm_net_forward(&x, &t0, &s0).unwrap();
        assert_eq!(r.shape(), (4, 8, 12));
        assert!(r.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(s1.hidden.shape(), (3, 2, 3));
        assert_eq!(s1.iteration, 1);
        let (r2, s1b) = model.r_lstm_net_forward(&x, &t0, &s0).unwrap();
        assert_eq!(r, r2);
        assert_eq!(s1, s1b);
        // a second step from the advanced state differs
        let (r3, _) = model.r_lstm_net_forward(&x, &t0, &s1).unwrap();
        assert_ne!(r, r3);
    }

    #[test]
    fn shape_errors_name_expected_and_actual() {
        let model = Rp2pn::<f64>::new(tiny_config(21), 1).unwrap();
        let x = Tensor::zeros(20, 8, 8);
        let t0 = Tensor::zeros(4, 8, 8);
        let err = model.r_lstm_net_forward(&x, &t0, &model.initial_state(8, 8)).unwrap_err();
        assert!(err.to_string().contains("20") && err.to_string().contains("21"), "{err}");
        let x = Tensor::zeros(21, 6, 8);
        let t0 = Tensor::zeros(4, 6, 8);
        let err = model.t_net_forward(&x, &t0).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn t_net_responds_to_reflection_input() {
        let model = Rp2pn::<f64>::new(tiny_config(21), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(21, 8, 8, (0..21 * 64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let r = Tensor::from_vec(4, 8, 8, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let t1 = model.t_net_forward(&x, &r).unwrap();
        assert_eq!(t1.shape(), (4, 8, 8));
        assert_eq!(t1, model.t_net_forward(&x, &r).unwrap());
        let mut r2 = r.clone();
        r2.data.iter_mut().for_each(|v| *v = (*v + 0.1).min(1.0));
        let t2 = model.t_net_forward(&x, &r2).unwrap();
        let diff: f64 = t1.data.iter().zip(&t2.data).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff.sqrt() > 1e-6);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let model = Rp2pn::<f64>::new(tiny_config(21), 4).unwrap();
        let ex = SurrogateExtractor::<f64>::new(0);
        let scene = random_scene(6, 8, 8);
        let input = assemble_network_input(&scene, &ex, &InputOptions::default()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input.stack.clone());
        let t0 = tape.constant(init_transmission_estimate(&scene, true));
        let outs = model.forward_on_tape(&mut tape, x, t0, 2).unwrap();
        let (r, t) = *outs.iterations.last().unwrap();
        let sr = tape.mean(r);
        let st = tape.mean(t);
        let loss = tape.weighted_sum(&[(sr, 1.0), (st, 1.0)]);
        let grads = tape.backward(loss);
        let got = grads.params(&tape, &model.store);
        assert_eq!(got.len(), model.store.len());
        for (id, g) in got {
            let norm: f64 = g.data.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "zero gradient for {}", model.store.name(id));
        }
    }

    #[test]
    fn forward_iterations_and_range() {
        let ex = SurrogateExtractor::<f32>::new(0);
        let model = Rp2pn::<f32>::new(tiny_config(21), 7).unwrap();
        let scene = random_scene(8, 8, 8);
        let opts = InputOptions::default();
        let one = rp2pn_forward(&model, &scene, &ex, &opts, 1).unwrap();
        assert_eq!(one.iterations.len(), 1);
        assert_eq!(one.states.len(), 1);
        assert_eq!(one.states[0].iteration, 1);
        let three = rp2pn_forward(&model, &scene, &ex, &opts, 3).unwrap();
        assert_eq!(three.iterations.len(), 3);
        for (r, t) in &three.iterations {
            assert!(r.planes.data.iter().chain(&t.planes.data).all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
        // first iteration is reproduced bit-exactly after a reset
        assert_eq!(one.iterations[0], three.iterations[0]);
        assert!(rp2pn_forward(&model, &scene, &ex, &opts, 0).is_err());
        // not the identity
        let input_int = crate::polarimetry::intensity_average(&scene).cast::<f32>();
        let sum = three.r_intensity().zip_map(&three.t_intensity(), |a, b| a + b).unwrap();
        assert_ne!(sum, input_int);
        assert!(three.last().1.quad().is_some());
    }

    #[test]
    fn transmission_init_is_the_input() {
        let scene = random_scene(9, 4, 4);
        let t: Tensor<f64> = init_transmission_estimate(&scene, true);
        for c in 0..4 {
            assert_eq!(t.channel_image(c), scene.planes()[c]);
        }
        let z: Tensor<f64> = init_transmission_estimate(&PolarizedQuad::zeros(4, 4), true);
        assert!(z.data.iter().all(|&v| v == 0.0));
        let i: Tensor<f64> = init_transmission_estimate(&scene, false);
        assert_eq!(i.channels, 1);
        // channel accounting: R-net consumes in_channels + 4
        let model = Rp2pn::<f64>::new(tiny_config(21), 0).unwrap();
        assert_eq!(model.r_net.in_channels, 25);
    }

    #[test]
    fn ablation_variants_construct() {
        let mut c = tiny_config(10);
        c.polar_output = false;
        c.lstm_hidden = None;
        c.n_iters = 1;
        let m = Rp2pn::<f32>::new(c, 0).unwrap();
        assert_eq!(m.r_net.in_channels, 11);
        assert!(!m.has_lstm());
        let x = Tensor::zeros(10, 8, 8);
        let (r, s) = m.r_lstm_net_forward(&x, &Tensor::zeros(1, 8, 8), &m.initial_state(8, 8)).unwrap();
        assert_eq!(r.channels, 1);
        assert_eq!(s.hidden.channels, 0);
    }
}
