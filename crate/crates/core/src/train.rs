//! Training loop: Adam, phased learning rate, gradient accumulation over
//! the batch, CSV loss log, checkpoints, validation and resume.
//!
//! The loss is applied to the output of the last iteration only.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::checkpoint::{step_path, AdamState, Checkpoint};
use crate::config::RunConfig;
use crate::data::SceneTriplet;
use crate::error::{Error, Result};
use crate::evalharness::{evaluate_dataset, EvalReport, ModelAdapter};
use crate::features::{build_extractor, FeatureExtractor};
use crate::image::{Image, Tensor};
use crate::losses::{total_loss_on_tape, LossBreakdown, LossTargets};
use crate::model::{init_transmission_estimate, Rp2pn};
use crate::nn::ParamStore;
use crate::polarimetry::PolarizedQuad;
use crate::preprocess::{assemble_network_input, ChannelLayout};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Header of the loss log.
pub const LOG_HEADER: &str = "step,pixel,percep,pncc,total";

/// Ground-truth planes the network is trained to output.
pub fn target_tensor<T: Scalar>(q: &PolarizedQuad<f64>, polar_output: bool) -> Tensor<T> {
    init_transmission_estimate(q, polar_output)
}

fn crop_image(img: &Image<f64>, y: usize, x: usize, size: usize) -> Image<f64> {
    Image::from_fn(size, size, |i, j| img.get(y + i, x + j))
}

fn crop_quad(q: &PolarizedQuad<f64>, y: usize, x: usize, size: usize) -> Result<PolarizedQuad<f64>> {
    PolarizedQuad::from_planes(q.planes().clone().map(|p| crop_image(&p, y, x, size)))
}

/// Square window of every quad of a scene.
pub fn crop_scene(s: &SceneTriplet, y: usize, x: usize, size: usize) -> Result<SceneTriplet> {
    let (h, w) = s.dims();
    if y + size > h || x + size > w {
        return Err(Error::Validation(format!(
            "crop {size}x{size} at ({y}, {x}) exceeds scene {} of {h}x{w}",
            s.id
        )));
    }
    Ok(SceneTriplet {
        id: s.id.clone(),
        input: crop_quad(&s.input, y, x, size)?,
        reflection: crop_quad(&s.reflection, y, x, size)?,
        transmission: crop_quad(&s.transmission, y, x, size)?,
    })
}

/// Network input, first estimate and loss targets of one scene.
pub struct PreparedScene<T> {
    pub id: String,
    pub stack: Tensor<T>,
    pub t_init: Tensor<T>,
    pub targets: LossTargets<T>,
}

pub fn prepare_scene<T: Scalar>(
    scene: &SceneTriplet,
    extractor: &dyn FeatureExtractor<T>,
    run: &RunConfig,
) -> Result<PreparedScene<T>> {
    let input = assemble_network_input(&scene.input, extractor, &run.input_options())?;
    let polar = run.model.polar_output;
    let r_gt = target_tensor(&scene.reflection, polar);
    let t_gt = target_tensor(&scene.transmission, polar);
    let targets = LossTargets::new(&r_gt, &t_gt, &input.mask, extractor)?;
    Ok(PreparedScene {
        id: scene.id.clone(),
        stack: input.stack,
        t_init: init_transmission_estimate(&scene.input, polar),
        targets,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |id| {
            let v: &Tensor<T> = store.value(id);
            Tensor::zeros(v.channels, v.height, v.width)
        };
        Self {
            state: AdamState {
                t: 0,
                m: store.ids().map(zeros).collect(),
                v: store.ids().map(zeros).collect(),
            },
        }
    }

    /// Applies one update. `grads` is indexed like the store; `None` marks
    /// parameters without gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            if !store.trainable(id) {
                continue;
            }
            let m = &mut self.state.m[k].data;
            let v = &mut self.state.v[k].data;
            let p = &mut store.value_mut(id).data;
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    /// Steps completed, counting this one.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub scenes: Vec<String>,
}

/// Where a run writes its files. `None` fields are not written.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("train_log.csv"))
    }

    pub fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoints"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub best: Option<(usize, f64)>,
}

pub struct Trainer<T: Scalar> {
    pub run: RunConfig,
    pub model: Rp2pn<T>,
    pub extractor: Box<dyn FeatureExtractor<T>>,
    pub layout: ChannelLayout,
    pub adam: Adam<T>,
    /// Optimizer steps completed.
    pub step: usize,
    train: Vec<SceneTriplet>,
    val: Vec<SceneTriplet>,
    cache: Vec<Option<Arc<PreparedScene<T>>>>,
    best: Option<(usize, f64)>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from `run.seed`.
    pub fn new(run: RunConfig, train: Vec<SceneTriplet>, val: Vec<SceneTriplet>) -> Result<Self> {
        run.validate()?;
        let extractor = build_extractor::<T>(&run.extractor)?;
        let layout = ChannelLayout::new(&run.input_options(), extractor.id());
        let model = Rp2pn::new(run.model_config(layout.channels()), run.seed)?;
        Self::assemble(run, model, extractor, layout, train, val, None, 0)
    }

    /// Continues from a checkpoint: weights, optimizer state and step counter
    /// are restored.
    pub fn resume(ckpt: &Checkpoint<T>, train: Vec<SceneTriplet>, val: Vec<SceneTriplet>) -> Result<Self> {
        let run = ckpt.run.clone();
        let extractor = build_extractor::<T>(&run.extractor)?;
        ckpt.check_layout(&run.input_options(), extractor.as_ref())?;
        let model = ckpt.restore_model()?;
        let adam = ckpt.optimizer.clone().ok_or_else(|| {
            Error::Incompatible("checkpoint has no optimizer state and cannot be resumed".into())
        })?;
        if adam.m.len() != model.store.len() || adam.v.len() != model.store.len() {
            return Err(Error::Incompatible("optimizer state does not match the model".into()));
        }
        let layout = ckpt.layout.clone();
        Self::assemble(run, model, extractor, layout, train, val, Some(adam), ckpt.step)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        run: RunConfig,
        model: Rp2pn<T>,
        extractor: Box<dyn FeatureExtractor<T>>,
        layout: ChannelLayout,
        train: Vec<SceneTriplet>,
        val: Vec<SceneTriplet>,
        adam: Option<AdamState<T>>,
        step: usize,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let factor = model.config.r_net.downsampling_factor();
        let crop = run.data.crop;
        for s in &train {
            let (h, w) = s.dims();
            let ok = if crop > 0 {
                h >= crop && w >= crop
            } else {
                h % factor == 0 && w % factor == 0
            };
            if !ok {
                return Err(Error::Config(format!(
                    "scene {} is {h}x{w}; training needs {} with the configured model",
                    s.id,
                    if crop > 0 {
                        format!("at least {crop}x{crop}")
                    } else {
                        format!("sides divisible by {factor}")
                    }
                )));
            }
        }
        let adam = match adam {
            Some(state) => Adam { state },
            None => Adam::new(&model.store),
        };
        let cache = (0..train.len()).map(|_| None).collect();
        Ok(Self {
            run,
            model,
            extractor,
            layout,
            adam,
            step,
            train,
            val,
            cache,
            best: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.run.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.run.schedule.total_steps(self.steps_per_epoch())
    }

    /// Scene indices of the batch at `step`, shuffled per epoch.
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let bs = self.run.batch_size;
        order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
    }

    fn prepared(&mut self, idx: usize, step: usize) -> Result<Arc<PreparedScene<T>>> {
        let crop = self.run.data.crop;
        if crop > 0 {
            let s = &self.train[idx];
            let (h, w) = s.dims();
            let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed.wrapping_add((step as u64) << 20).wrapping_add(idx as u64));
            let (y, x) = (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop));
            let c = crop_scene(s, y, x, crop)?;
            return prepare_scene(&c, self.extractor.as_ref(), &self.run).map(Arc::new);
        }
        if self.cache[idx].is_none() {
            let p = prepare_scene(&self.train[idx], self.extractor.as_ref(), &self.run)?;
            self.cache[idx] = Some(Arc::new(p));
        }
        Ok(Arc::clone(self.cache[idx].as_ref().expect("just filled")))
    }

    /// Loss and parameter gradients of one scene.
    fn scene_gradients(&self, p: &PreparedScene<T>) -> Result<(LossBreakdown, Vec<(crate::nn::ParamId, Tensor<T>)>)> {
        let mut tape = Tape::new();
        let x = tape.constant(p.stack.clone());
        let t0 = tape.constant(p.t_init.clone());
        let outs = self
            .model
            .forward_on_tape(&mut tape, x, t0, self.run.effective_iters())?;
        let &(r, t) = outs.iterations.last().expect("at least one iteration");
        let vars = total_loss_on_tape(&mut tape, r, t, &p.targets, &self.run.losses, self.extractor.as_ref())?;
        let loss = vars.breakdown(&tape);
        let grads = tape.backward(vars.total).params(&tape, &self.model.store);
        Ok((loss, grads))
    }

    /// One optimizer step over one batch.
    pub fn train_step(&mut self, outputs: &TrainOutputs) -> Result<StepRecord> {
        let step = self.step;
        let epoch = step / self.steps_per_epoch();
        let lr = self.run.schedule.rate_at(epoch);
        let batch = self.batch_indices(step);
        let n = batch.len();
        let mut acc: Vec<Option<Tensor<T>>> = (0..self.model.store.len()).map(|_| None).collect();
        let mut sum = [0.0f64; 4];
        let mut ids = Vec::with_capacity(n);
        let inv = T::one() / T::of(n as f64);
        for idx in batch {
            let p = self.prepared(idx, step)?;
            let (loss, grads) = self.scene_gradients(&p)?;
            let finite = loss.is_finite() && grads.iter().all(|(_, g)| g.is_finite());
            if !finite {
                return Err(self.nan_abort(outputs, step, &p.id, &loss));
            }
            for (id, g) in grads {
                let slot = &mut acc[id.index()];
                match slot {
                    Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b * inv),
                    None => *slot = Some(Tensor::from_vec(g.channels, g.height, g.width, g.data.iter().map(|&v| v * inv).collect())?),
                }
            }
            for (s, v) in sum.iter_mut().zip([loss.pixel, loss.percep, loss.pncc, loss.total]) {
                *s += v / n as f64;
            }
            ids.push(p.id.clone());
        }
        self.adam.step(&mut self.model.store, &acc, lr);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch,
            lr,
            loss: LossBreakdown {
                pixel: sum[0],
                percep: sum[1],
                pncc: sum[2],
                total: sum[3],
            },
            scenes: ids,
        })
    }

    fn nan_abort(&self, outputs: &TrainOutputs, step: usize, scene: &str, loss: &LossBreakdown) -> Error {
        let mut msg = format!("non-finite loss or gradient at step {step} on scene {scene}: {loss:?}");
        if let Some(dir) = &outputs.dir {
            let path = dir.join("nan_dump.json");
            let dump = serde_json::json!({
                "step": step,
                "scene": scene,
                "loss": loss,
                "lr": self.run.schedule.rate_at(step / self.steps_per_epoch()),
            });
            if fs::create_dir_all(dir).is_ok() && fs::write(&path, dump.to_string()).is_ok() {
                msg.push_str(&format!("; details in {}", path.display()));
            }
        }
        Error::Numerical(msg)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut c = Checkpoint::from_model(&self.model, &self.run, &self.layout, self.step);
        c.optimizer = Some(self.adam.state.clone());
        c
    }

    pub fn adapter(&self, label: &str) -> ModelAdapter<'_, T> {
        ModelAdapter {
            model: &self.model,
            extractor: self.extractor.as_ref(),
            options: self.run.input_options(),
            n_iters: self.run.effective_iters(),
            label: label.into(),
        }
    }

    pub fn evaluate(&self, scenes: &[SceneTriplet], label: &str) -> Result<EvalReport> {
        evaluate_dataset(&self.adapter(label), scenes.iter().cloned().map(Ok))
    }

    pub fn train_scenes(&self) -> &[SceneTriplet] {
        &self.train
    }

    fn validate_and_mark_best(&mut self, ckpt_dir: Option<&Path>) -> Result<()> {
        if self.val.is_empty() {
            return Ok(());
        }
        let report = self.evaluate(&self.val, "val")?;
        let score = report.summary.t_psnr;
        if report.records.is_empty() || !score.is_finite() {
            return Ok(());
        }
        if self.best.is_none_or(|(_, b)| score > b) {
            self.best = Some((self.step, score));
            if let Some(dir) = ckpt_dir {
                self.checkpoint().save(&dir.join("best.ckpt"))?;
                let marker = dir.join("best.txt");
                fs::write(&marker, format!("step = {}\nval_t_psnr = {score}\n", self.step))
                    .map_err(|e| Error::io(&marker, e))?;
            }
        }
        Ok(())
    }

    /// Runs until the schedule (or `until`, if smaller) is exhausted. Steps
    /// are appended to the CSV log; checkpoints and validation follow the
    /// configured cadences.
    pub fn run(&mut self, outputs: &TrainOutputs, until: Option<usize>) -> Result<TrainSummary> {
        let end = until.map_or(self.total_steps(), |u| u.min(self.total_steps()));
        let ckpt_dir = outputs.checkpoint_dir();
        let mut log = match outputs.log_path() {
            Some(path) => {
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let fresh = !path.exists() || self.step == 0;
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut records = Vec::new();
        let sched = self.run.schedule.clone();
        while self.step < end {
            let rec = self.train_step(outputs)?;
            if let Some((f, path)) = &mut log {
                let l = &rec.loss;
                writeln!(f, "{},{},{},{},{}", rec.step, l.pixel, l.percep, l.pncc, l.total)
                    .map_err(|e| Error::io(&*path, e))?;
            }
            records.push(rec);
            if sched.validate_every > 0 && self.step.is_multiple_of(sched.validate_every) {
                self.validate_and_mark_best(ckpt_dir.as_deref())?;
            }
            if let Some(dir) = &ckpt_dir {
                if sched.checkpoint_every > 0 && self.step.is_multiple_of(sched.checkpoint_every) {
                    self.checkpoint().save(&step_path(dir, self.step))?;
                }
            }
        }
        let final_checkpoint = match &ckpt_dir {
            Some(dir) => {
                let path = dir.join("last.ckpt");
                self.checkpoint().save(&path)?;
                Some(path)
            }
            None => None,
        };
        Ok(TrainSummary {
            steps: self.step,
            records,
            final_checkpoint,
            best: self.best,
        })
    }
}
