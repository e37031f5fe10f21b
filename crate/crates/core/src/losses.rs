//! Training objective.
//!
//! `total = λ1·pixel + λ2·percep + λ3·pncc`, where
//!
//! * `pixel` sums, over output planes and over the reflection and
//!   transmission, the mean absolute difference of masked images;
//! * `percep` does the same on perceptual feature maps, weighted per layer
//!   by `γ_j`;
//! * `pncc` sums, over perceptual layers, the normalized cross-correlation
//!   between the features of the masked predicted reflection and
//!   transmission intensities.
//!
//! Every `|·|₁` term is reduced by the mean over its elements.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::image::Tensor;
use crate::preprocess::OverexposureMask;
use crate::scalar::Scalar;

/// Guard added to `σx·σy` in the cross-correlation.
pub const NCC_EPS: f64 = 1e-8;

/// `λ1..λ3` and per-layer `γ_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: [f64; 3],
    pub gamma: Vec<f64>,
}

#[derive(Deserialize)]
struct LossSection {
    losses: LossWeights,
}

impl LossWeights {
    /// Weights shipped in `configs/paper.toml`.
    pub fn paper() -> Self {
        let cfg: LossSection = toml::from_str(include_str!("../configs/paper.toml"))
            .expect("bundled paper config parses");
        cfg.losses
    }

    pub fn with_lambda(mut self, lambda: [f64; 3]) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().chain(&self.gamma).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: lambda {:?}, gamma {:?}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }

    fn check_layers(&self, n: usize) -> Result<()> {
        if self.gamma.len() != n {
            return Err(Error::Config(format!(
                "{} layer weights configured but the extractor has {n} layers",
                self.gamma.len()
            )));
        }
        Ok(())
    }
}

/// Loss terms of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub percep: f64,
    pub pncc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.pixel.is_finite() && self.percep.is_finite() && self.pncc.is_finite() && self.total.is_finite()
    }
}

/// Tape nodes of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub pixel: Var,
    pub percep: Var,
    pub pncc: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown {
            pixel: v(self.pixel),
            percep: v(self.percep),
            pncc: v(self.pncc),
            total: v(self.total),
        }
    }
}

/// Element-wise product of every plane with the mask.
pub fn apply_mask<T: Scalar>(x: &Tensor<T>, m: &OverexposureMask<T>) -> Result<Tensor<T>> {
    if (x.height, x.width) != m.mask.dims() {
        return Err(Error::Validation(format!(
            "mask is {}x{}, tensor is {}x{}",
            m.mask.height(),
            m.mask.width(),
            x.height,
            x.width
        )));
    }
    let n = x.plane_len();
    let mut out = x.clone();
    for c in 0..out.channels {
        for (v, &w) in out.data[c * n..(c + 1) * n].iter_mut().zip(m.mask.data()) {
            *v *= w;
        }
    }
    Ok(out)
}

/// Ground-truth side of the objective, with perceptual features computed
/// once. Reused across training steps on the same scene.
pub struct LossTargets<T> {
    mask: Arc<Vec<T>>,
    dims: (usize, usize, usize),
    r_masked: Arc<Tensor<T>>,
    t_masked: Arc<Tensor<T>>,
    /// `[role][plane][layer]` with role 0 = reflection, 1 = transmission.
    features: [Vec<Vec<Arc<Tensor<T>>>>; 2],
}

impl<T: Scalar> LossTargets<T> {
    pub fn new(
        r_gt: &Tensor<T>,
        t_gt: &Tensor<T>,
        mask: &OverexposureMask<T>,
        extractor: &dyn FeatureExtractor<T>,
    ) -> Result<Self> {
        if r_gt.shape() != t_gt.shape() {
            return Err(Error::Validation(format!(
                "ground-truth shapes differ: {:?} vs {:?}",
                r_gt.shape(),
                t_gt.shape()
            )));
        }
        let r_masked = apply_mask(r_gt, mask)?;
        let t_masked = apply_mask(t_gt, mask)?;
        let feats = |t: &Tensor<T>| -> Vec<Vec<Arc<Tensor<T>>>> {
            (0..t.channels)
                .map(|c| {
                    let mut tape = Tape::new();
                    let x = tape.constant(Tensor::from_images([&t.channel_image(c)]).expect("one plane"));
                    extractor
                        .layers(&mut tape, x)
                        .into_iter()
                        .map(|v| tape.value_arc(v))
                        .collect()
                })
                .collect()
        };
        let features = [feats(&r_masked), feats(&t_masked)];
        Ok(Self {
            mask: mask.shared(),
            dims: r_gt.shape(),
            r_masked: Arc::new(r_masked),
            t_masked: Arc::new(t_masked),
            features,
        })
    }

    pub fn mask(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.mask)
    }

    fn check_pred(&self, tape: &Tape<T>, r: Var, t: Var) -> Result<()> {
        for (v, what) in [(r, "reflection"), (t, "transmission")] {
            let s = tape.value(v).shape();
            if s != self.dims {
                return Err(Error::Validation(format!(
                    "predicted {what} has shape {s:?}, ground truth is {:?}",
                    self.dims
                )));
            }
        }
        Ok(())
    }
}

/// Σ over planes of mean |M∘gt − M∘pred| for one role.
fn masked_l1<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt_masked: &Arc<Tensor<T>>, mask: &Arc<Vec<T>>) -> Var {
    let channels = tape.value(pred).channels;
    let pm = tape.mask_channels(pred, Arc::clone(mask));
    let g = tape.constant_arc(Arc::clone(gt_masked));
    let d = tape.sub(g, pm);
    let a = tape.abs(d);
    let m = tape.mean(a);
    // mean over all planes × planes = Σ_planes mean over pixels
    tape.scale(m, T::of(channels as f64))
}

pub fn pixel_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, r: Var, t: Var, targets: &LossTargets<T>) -> Result<Var> {
    targets.check_pred(tape, r, t)?;
    let lr = masked_l1(tape, r, &targets.r_masked, &targets.mask);
    let lt = masked_l1(tape, t, &targets.t_masked, &targets.mask);
    Ok(tape.weighted_sum(&[(lr, T::one()), (lt, T::one())]))
}

pub fn perceptual_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    r: Var,
    t: Var,
    targets: &LossTargets<T>,
    extractor: &dyn FeatureExtractor<T>,
    gamma: &[f64],
) -> Result<Var> {
    targets.check_pred(tape, r, t)?;
    let n_layers = extractor.num_layers();
    if gamma.len() != n_layers {
        return Err(Error::Config(format!(
            "{} layer weights configured but the extractor has {n_layers} layers",
            gamma.len()
        )));
    }
    let mut terms = Vec::new();
    for (role, pred) in [r, t].into_iter().enumerate() {
        let channels = tape.value(pred).channels;
        for c in 0..channels {
            let plane = tape.slice_channels(pred, c, 1);
            let masked = tape.mask_channels(plane, targets.mask());
            let feats = extractor.layers(tape, masked);
            for (j, f) in feats.into_iter().enumerate() {
                if gamma[j] == 0.0 {
                    continue;
                }
                let g = tape.constant_arc(Arc::clone(&targets.features[role][c][j]));
                let d = tape.sub(g, f);
                let a = tape.abs(d);
                let m = tape.mean(a);
                terms.push((m, T::of(gamma[j])));
            }
        }
    }
    Ok(tape.weighted_sum(&terms))
}

/// Σ_j ncc(features_j(M∘R̂), features_j(M∘T̂)) for single-plane intensities.
pub fn pncc_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    r_intensity: Var,
    t_intensity: Var,
    mask: Arc<Vec<T>>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    let (rs, ts) = (tape.value(r_intensity).shape(), tape.value(t_intensity).shape());
    if rs != ts || rs.0 != 1 {
        return Err(Error::Validation(format!(
            "pncc needs two single-plane images of equal size, got {rs:?} and {ts:?}"
        )));
    }
    let rm = tape.mask_channels(r_intensity, Arc::clone(&mask));
    let tm = tape.mask_channels(t_intensity, mask);
    let fr = extractor.layers(tape, rm);
    let ft = extractor.layers(tape, tm);
    let terms: Vec<(Var, T)> = fr
        .into_iter()
        .zip(ft)
        .map(|(a, b)| (tape.ncc(a, b, T::of(NCC_EPS)), T::one()))
        .collect();
    Ok(tape.weighted_sum(&terms))
}

/// All three terms and their weighted sum, on the predictions of the last
/// iteration.
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    r: Var,
    t: Var,
    targets: &LossTargets<T>,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<LossVars> {
    weights.validate()?;
    weights.check_layers(extractor.num_layers())?;
    let pixel = pixel_loss_on_tape(tape, r, t, targets)?;
    let percep = perceptual_loss_on_tape(tape, r, t, targets, extractor, &weights.gamma)?;
    let ri = tape.mean_channels(r);
    let ti = tape.mean_channels(t);
    let pncc = pncc_loss_on_tape(tape, ri, ti, targets.mask(), extractor)?;
    let [l1, l2, l3] = weights.lambda.map(T::of);
    let total = tape.weighted_sum(&[(pixel, l1), (percep, l2), (pncc, l3)]);
    Ok(LossVars {
        pixel,
        percep,
        pncc,
        total,
    })
}

/// Predicted and ground-truth planes for one scene.
pub struct LossInputs<'a, T> {
    pub r_pred: &'a Tensor<T>,
    pub t_pred: &'a Tensor<T>,
    pub r_gt: &'a Tensor<T>,
    pub t_gt: &'a Tensor<T>,
    pub mask: &'a OverexposureMask<T>,
}

pub fn pixel_loss<T: Scalar>(x: &LossInputs<'_, T>, extractor: &dyn FeatureExtractor<T>) -> Result<f64> {
    let targets = LossTargets::new(x.r_gt, x.t_gt, x.mask, extractor)?;
    let mut tape = Tape::new();
    let (r, t) = (tape.constant(x.r_pred.clone()), tape.constant(x.t_pred.clone()));
    let v = pixel_loss_on_tape(&mut tape, r, t, &targets)?;
    Ok(tape.value(v).item().as_f64())
}

pub fn perceptual_loss<T: Scalar>(
    x: &LossInputs<'_, T>,
    extractor: &dyn FeatureExtractor<T>,
    gamma: &[f64],
) -> Result<f64> {
    let targets = LossTargets::new(x.r_gt, x.t_gt, x.mask, extractor)?;
    let mut tape = Tape::new();
    let (r, t) = (tape.constant(x.r_pred.clone()), tape.constant(x.t_pred.clone()));
    let v = perceptual_loss_on_tape(&mut tape, r, t, &targets, extractor, gamma)?;
    Ok(tape.value(v).item().as_f64())
}

pub fn pncc_loss<T: Scalar>(
    r_intensity: &Tensor<T>,
    t_intensity: &Tensor<T>,
    mask: &OverexposureMask<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(r_intensity.clone());
    let t = tape.constant(t_intensity.clone());
    let v = pncc_loss_on_tape(&mut tape, r, t, mask.shared(), extractor)?;
    Ok(tape.value(v).item().as_f64())
}

pub fn total_loss<T: Scalar>(
    x: &LossInputs<'_, T>,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<LossBreakdown> {
    let targets = LossTargets::new(x.r_gt, x.t_gt, x.mask, extractor)?;
    let mut tape = Tape::new();
    let (r, t) = (tape.constant(x.r_pred.clone()), tape.constant(x.t_pred.clone()));
    let vars = total_loss_on_tape(&mut tape, r, t, &targets, weights, extractor)?;
    Ok(vars.breakdown(&tape))
}

/// Zero-mean normalized cross-correlation of two equally sized buffers.
pub fn ncc<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Validation(format!(
            "ncc operands must be non-empty and equal in size ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    Ok(crate::autodiff::NccStats::new(x, y, T::of(NCC_EPS)).value().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SurrogateExtractor;
    use crate::image::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn paper_weights_load() {
        let w = LossWeights::paper();
        assert_eq!(w.lambda, [0.1, 0.1, 6.0]);
        assert_eq!(w.num_layers(), 6);
        assert!((w.gamma[5] - 10.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn mask_identity_zero_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_t(&mut rng, 4, 3, 5);
        let ones = OverexposureMask::all_ones(3, 5);
        assert_eq!(apply_mask(&x, &ones).unwrap(), x);
        let zeros = OverexposureMask {
            mask: Image::zeros(3, 5),
            tau: 0.98,
        };
        assert!(apply_mask(&x, &zeros).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(apply_mask(&x, &OverexposureMask::all_ones(3, 4)).is_err());
    }

    #[test]
    fn pixel_loss_of_uniform_offset() {
        let ex = SurrogateExtractor::<f64>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rand_t(&mut rng, 4, 8, 8);
        let t = rand_t(&mut rng, 4, 8, 8).cast::<f64>();
        let t = Tensor::from_vec(4, 8, 8, t.data.iter().map(|v| v * 0.5).collect()).unwrap();
        let t_off = Tensor::from_vec(4, 8, 8, t.data.iter().map(|v| v + 0.1).collect()).unwrap();
        let mask = OverexposureMask::all_ones(8, 8);
        let exact = LossInputs {
            r_pred: &r,
            t_pred: &t,
            r_gt: &r,
            t_gt: &t,
            mask: &mask,
        };
        assert_eq!(pixel_loss(&exact, &ex).unwrap(), 0.0);
        assert_eq!(perceptual_loss(&exact, &ex, &LossWeights::paper().gamma).unwrap(), 0.0);
        let off = LossInputs {
            t_pred: &t_off,
            ..exact
        };
        assert!((pixel_loss(&off, &ex).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(perceptual_loss(&off, &ex, &[0.0; 6]).unwrap(), 0.0);
        assert!(matches!(perceptual_loss(&off, &ex, &[1.0; 5]), Err(Error::Config(_))));
    }

    #[test]
    fn masked_pixels_do_not_affect_pixel_loss() {
        let ex = SurrogateExtractor::<f64>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, t, rg, tg) = (
            rand_t(&mut rng, 4, 6, 6),
            rand_t(&mut rng, 4, 6, 6),
            rand_t(&mut rng, 4, 6, 6),
            rand_t(&mut rng, 4, 6, 6),
        );
        let mask = OverexposureMask {
            mask: Image::from_fn(6, 6, |y, x| if (y + x) % 3 == 0 { 0.0 } else { 1.0 }),
            tau: 0.98,
        };
        let base = LossInputs {
            r_pred: &r,
            t_pred: &t,
            r_gt: &rg,
            t_gt: &tg,
            mask: &mask,
        };
        let a = pixel_loss(&base, &ex).unwrap();
        let mut tg2 = tg.clone();
        for c in 0..4 {
            for y in 0..6 {
                for x in 0..6 {
                    if (y + x) % 3 == 0 {
                        tg2.data[c * 36 + y * 6 + x] = 0.999;
                    }
                }
            }
        }
        let b = pixel_loss(&LossInputs { t_gt: &tg2, ..base }, &ex).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ncc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!((ncc(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let y: Vec<f64> = x.iter().map(|v| -2.5 * v + 0.3).collect();
        assert!((ncc(&x, &y).unwrap() + 1.0).abs() < 1e-6);
        assert!(ncc(&x, &x[..50]).is_err());
        let c = vec![0.5; 10];
        assert_eq!(ncc(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn pncc_of_identical_images_is_layer_count() {
        let ex = SurrogateExtractor::<f64>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = rand_t(&mut rng, 1, 16, 16);
        let v = pncc_loss(&r, &r, &OverexposureMask::all_ones(16, 16), &ex).unwrap();
        assert!((v - 6.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn total_is_weighted_sum() {
        let ex = SurrogateExtractor::<f64>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ts: Vec<_> = (0..4).map(|_| rand_t(&mut rng, 4, 8, 8)).collect();
        let mask = OverexposureMask::all_ones(8, 8);
        let x = LossInputs {
            r_pred: &ts[0],
            t_pred: &ts[1],
            r_gt: &ts[2],
            t_gt: &ts[3],
            mask: &mask,
        };
        let w = LossWeights::paper();
        let b = total_loss(&x, &w, &ex).unwrap();
        let want = 0.1 * b.pixel + 0.1 * b.percep + 6.0 * b.pncc;
        assert!((b.total - want).abs() < 1e-9);
        let z = total_loss(&x, &w.clone().with_lambda([0.0; 3]), &ex).unwrap();
        assert_eq!(z.total, 0.0);
        // pred == gt: only the correlation term remains
        let same = LossInputs {
            r_pred: &ts[2],
            t_pred: &ts[3],
            ..x
        };
        let b = total_loss(&same, &w, &ex).unwrap();
        assert_eq!((b.pixel, b.percep), (0.0, 0.0));
        assert!((b.total - 6.0 * b.pncc).abs() < 1e-12);
        assert!(b.pncc.abs() <= 6.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights::paper().with_lambda([0.1, -1.0, 6.0]);
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }
}
