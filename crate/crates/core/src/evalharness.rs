//! Evaluation protocol: per-scene rescaling, PSNR and SSIM on intensity
//! images, dataset summaries and the ablation runner.
//!
//! Predictions are scored in the intensity domain. Before scoring, both
//! predicted intensities are multiplied by one per-scene factor `α` chosen
//! so that `mean(α·(R̂ + T̂)) == mean(I)`.
//!
//! SSIM uses an 11×11 Gaussian window with σ = 1.5, `K1 = 0.01`,
//! `K2 = 0.03`, data range 1 and population (not sample) statistics,
//! averaged over windows lying fully inside the image.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::SceneTriplet;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::image::Image;
use crate::model::{rp2pn_forward, Rp2pn};
use crate::polarimetry::intensity_average;
use crate::preprocess::InputOptions;
use crate::scalar::Scalar;
use crate::train::{TrainOutputs, Trainer};

/// Score given to identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Rescaled intensities and the factor applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Rescaled {
    pub r: Image<f64>,
    pub t: Image<f64>,
    pub alpha: f64,
}

pub fn rescale_outputs(r_int: &Image<f64>, t_int: &Image<f64>, input_int: &Image<f64>) -> Result<Rescaled> {
    r_int.check_same_dims(t_int)?;
    r_int.check_same_dims(input_int)?;
    let pred = r_int.mean() + t_int.mean();
    if !(pred > 0.0 && pred.is_finite()) {
        return Err(Error::DegeneratePrediction(format!(
            "mean of predicted reflection plus transmission is {pred}"
        )));
    }
    let alpha = input_int.mean() / pred;
    Ok(Rescaled {
        r: r_int.scale(alpha),
        t: t_int.scale(alpha),
        alpha,
    })
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Image<f64>, y: &Image<f64>) -> Result<f64> {
    x.check_same_dims(y)?;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11×11 Gaussian windows.
pub fn ssim(x: &Image<f64>, y: &Image<f64>) -> Result<f64> {
    x.check_same_dims(y)?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let (a, b) = (x.data(), y.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let mx = filter_valid(a, h, w, &k);
    let my = filter_valid(b, h, w, &k);
    let mxx = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &k);
    let myy = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &k);
    let mxy = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Anything that maps a scene to predicted `(reflection, transmission)`
/// intensity images.
pub trait SeparationAdapter {
    fn name(&self) -> String;
    fn separate(&self, scene: &SceneTriplet) -> Result<(Image<f64>, Image<f64>)>;
}

/// Returns the ground-truth intensities. Upper bound of every metric.
pub struct GroundTruthOracle;

impl SeparationAdapter for GroundTruthOracle {
    fn name(&self) -> String {
        "ground-truth".into()
    }

    fn separate(&self, scene: &SceneTriplet) -> Result<(Image<f64>, Image<f64>)> {
        Ok((intensity_average(&scene.reflection), intensity_average(&scene.transmission)))
    }
}

/// A trained network with its input pipeline.
pub struct ModelAdapter<'a, T> {
    pub model: &'a Rp2pn<T>,
    pub extractor: &'a dyn FeatureExtractor<T>,
    pub options: InputOptions,
    pub n_iters: usize,
    pub label: String,
}

impl<T: Scalar> SeparationAdapter for ModelAdapter<'_, T> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn separate(&self, scene: &SceneTriplet) -> Result<(Image<f64>, Image<f64>)> {
        let out = rp2pn_forward(self.model, &scene.input, self.extractor, &self.options, self.n_iters)?;
        Ok((out.r_intensity().cast(), out.t_intensity().cast()))
    }
}

/// Scores of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub alpha: f64,
    pub t_psnr: f64,
    pub t_ssim: f64,
    pub r_psnr: f64,
    pub r_ssim: f64,
}

/// A scene that could not be scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene: String,
    pub category: String,
    pub message: String,
}

/// Arithmetic means over scored scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: usize,
    pub t_psnr: f64,
    pub t_ssim: f64,
    pub r_psnr: f64,
    pub r_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub records: Vec<EvalRecord>,
    pub failures: Vec<SceneFailure>,
    pub summary: EvalSummary,
}

/// Scores one scene: rescale, then compare with ground-truth intensities.
pub fn evaluate_scene(adapter: &dyn SeparationAdapter, scene: &SceneTriplet) -> Result<EvalRecord> {
    let (r_hat, t_hat) = adapter.separate(scene)?;
    let input = intensity_average(&scene.input);
    let s = rescale_outputs(&r_hat, &t_hat, &input)?;
    let r_gt = intensity_average(&scene.reflection);
    let t_gt = intensity_average(&scene.transmission);
    Ok(EvalRecord {
        scene_id: scene.id.clone(),
        alpha: s.alpha,
        t_psnr: psnr(&s.t, &t_gt)?,
        t_ssim: ssim(&s.t, &t_gt)?,
        r_psnr: psnr(&s.r, &r_gt)?,
        r_ssim: ssim(&s.r, &r_gt)?,
    })
}

fn summarize(records: &[EvalRecord]) -> EvalSummary {
    let n = records.len() as f64;
    let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    EvalSummary {
        scenes: records.len(),
        t_psnr: mean(|r| r.t_psnr),
        t_ssim: mean(|r| r.t_ssim),
        r_psnr: mean(|r| r.r_psnr),
        r_ssim: mean(|r| r.r_ssim),
    }
}

/// Scores every scene. Scenes that fail to load or score are recorded in
/// `failures` and the run continues. An empty split is an error.
pub fn evaluate_dataset(
    adapter: &dyn SeparationAdapter,
    scenes: impl IntoIterator<Item = Result<SceneTriplet>>,
) -> Result<EvalReport> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut seen = 0;
    for (i, scene) in scenes.into_iter().enumerate() {
        seen += 1;
        let outcome = match scene {
            Ok(s) => evaluate_scene(adapter, &s).map_err(|e| (s.id.clone(), e)),
            Err(e) => Err((format!("#{i}"), e)),
        };
        match outcome {
            Ok(r) => records.push(r),
            Err((scene, e)) => failures.push(SceneFailure {
                scene,
                category: e.category().into(),
                message: e.to_string(),
            }),
        }
    }
    if seen == 0 {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    Ok(EvalReport {
        method: adapter.name(),
        summary: summarize(&records),
        records,
        failures,
    })
}

impl EvalReport {
    /// Per-scene records as CSV.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Validation(format!("csv: {e}")))?;
        }
        if self.records.is_empty() {
            w.write_record(["scene_id", "alpha", "t_psnr", "t_ssim", "r_psnr", "r_ssim"])
                .map_err(|e| Error::Validation(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// One row in the layout `method | T PSNR | T SSIM | R PSNR | R SSIM`.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8} {:>8}", "Method", "T PSNR", "T SSIM", "R PSNR", "R SSIM");
        let _ = writeln!(
            s,
            "{:<24} {:>8.2} {:>8.3} {:>8.2} {:>8.3}",
            self.method, self.summary.t_psnr, self.summary.t_ssim, self.summary.r_psnr, self.summary.r_ssim
        );
        if !self.failures.is_empty() {
            let _ = writeln!(s, "{} of {} scenes failed", self.failures.len(), self.failures.len() + self.records.len());
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("eval.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let table = dir.join("summary.txt");
        std::fs::write(&table, self.summary_table()).map_err(|e| Error::io(&table, e))?;
        if !self.failures.is_empty() {
            let path = dir.join("failures.json");
            let json = serde_json::to_string_pretty(&self.failures).expect("failures serialize");
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// One model variant of the ablation study.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub model_id: String,
    pub polar_input: bool,
    pub polar_output: bool,
    pub with_iteration: bool,
}

impl AblationSpec {
    pub fn new(model_id: &str, polar_input: bool, polar_output: bool, with_iteration: bool) -> Self {
        Self {
            model_id: model_id.into(),
            polar_input,
            polar_output,
            with_iteration,
        }
    }

    /// Models 1 to 4 and the full model.
    pub fn table2() -> Vec<Self> {
        vec![
            Self::new("1", false, false, false),
            Self::new("2", false, false, true),
            Self::new("3", true, false, false),
            Self::new("4", true, true, false),
            Self::new("ours", true, true, true),
        ]
    }

    pub fn check_unique(specs: &[Self]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in specs {
            if !seen.insert(s.model_id.as_str()) {
                return Err(Error::Validation(format!("duplicate ablation model id {:?}", s.model_id)));
            }
        }
        Ok(())
    }
}

/// One row per trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(flatten)]
    pub spec: AblationSpec,
    #[serde(flatten)]
    pub summary: EvalSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

impl AblationTable {
    pub fn row(&self, model_id: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.spec.model_id == model_id)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,polar_input,polar_output,with_iteration,t_psnr,t_ssim,r_psnr,r_ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.spec.model_id,
                r.spec.polar_input,
                r.spec.polar_output,
                r.spec.with_iteration,
                r.summary.t_psnr,
                r.summary.t_ssim,
                r.summary.r_psnr,
                r.summary.r_ssim
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>6} {:>9} | {:>8} {:>6} | {:>8} {:>6}",
            "Model", "Polar", "Polar", "With", "Transm.", "", "Reflect.", ""
        );
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>6} {:>9} | {:>8} {:>6} | {:>8} {:>6}",
            "", "Input", "Output", "Iteration", "PSNR", "SSIM", "PSNR", "SSIM"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>6} {:>9} | {:>8.2} {:>6.3} | {:>8.2} {:>6.3}",
                r.spec.model_id,
                yes_no(r.spec.polar_input),
                yes_no(r.spec.polar_output),
                yes_no(r.spec.with_iteration),
                r.summary.t_psnr,
                r.summary.t_ssim,
                r.summary.r_psnr,
                r.summary.r_ssim
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("ablation.csv", self.to_csv()), ("ablation.txt", self.to_text())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Trains every variant on `train` from the same base config and scores it
/// on `eval`. When `out` is set, each variant writes its log and
/// checkpoints to `out/model_<id>/` and the table goes to `out/`.
pub fn run_ablation<T: Scalar>(
    specs: &[AblationSpec],
    base: &RunConfig,
    train: &[SceneTriplet],
    eval: &[SceneTriplet],
    out: Option<&Path>,
) -> Result<AblationTable> {
    AblationSpec::check_unique(specs)?;
    let variants: Vec<RunConfig> = specs
        .iter()
        .map(|s| {
            let c = base.with_variant(s);
            c.validate()
                .map_err(|e| Error::Config(format!("ablation model {}: {e}", s.model_id)))?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(specs.len());
    for (spec, cfg) in specs.iter().zip(variants) {
        let mut trainer = Trainer::<T>::new(cfg, train.to_vec(), Vec::new())?;
        let outputs = TrainOutputs {
            dir: out.map(|d| d.join(format!("model_{}", spec.model_id))),
        };
        trainer.run(&outputs, None)?;
        let report = trainer.evaluate(eval, &spec.model_id)?;
        if report.records.is_empty() {
            let why = report.failures.first().map_or(String::new(), |f| f.message.clone());
            return Err(Error::Numerical(format!(
                "ablation model {} could not be scored: {why}",
                spec.model_id
            )));
        }
        rows.push(AblationRow {
            spec: spec.clone(),
            summary: report.summary,
        });
    }
    let table = AblationTable { rows };
    if let Some(dir) = out {
        table.write(dir)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_scene, SynthSceneParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut x = seed;
        (0..n)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (x >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    #[test]
    fn ssim_matches_reference_values() {
        // skimage.metrics.structural_similarity(a, b, gaussian_weights=True,
        // sigma=1.5, use_sample_covariance=False, data_range=1.0)
        for (seed, h, w, want) in [
            (1u64, 16usize, 16usize, 0.8941164237481752),
            (2, 20, 13, 0.9109151044564213),
            (3, 32, 32, 0.8791797892003752),
        ] {
            let a = lcg(seed, h * w);
            let noise = lcg(seed + 100, h * w);
            let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| (0.7 * x + 0.3 * n).clamp(0.0, 1.0)).collect();
            let got = ssim(&Image::new(h, w, a).unwrap(), &Image::new(h, w, b).unwrap()).unwrap();
            assert!((got - want).abs() < 1e-6, "{seed}: {got} vs {want}");
        }
    }

    #[test]
    fn ssim_identity_inversion_and_size() {
        let x = Image::new(16, 16, lcg(5, 256)).unwrap();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&x, &x.map(|v| 1.0 - v)).unwrap() < 1.0);
        let small = Image::<f64>::zeros(10, 20);
        assert!(matches!(ssim(&small, &small), Err(Error::Validation(_))));
    }

    #[test]
    fn psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Image::from_fn(9, 7, |_, _| rng.random_range(0.0..0.9));
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        assert!((psnr(&x, &x.map(|v| v + 0.1)).unwrap() - 20.0).abs() < 1e-9);
        let y = Image::from_fn(9, 7, |_, _| rng.random_range(0.0..1.0));
        let mut se = 0.0;
        for i in 0..63 {
            se += (x.data()[i] - y.data()[i]).powi(2);
        }
        let want = 10.0 * (63.0 / se).log10();
        assert!((psnr(&x, &y).unwrap() - want).abs() < 1e-9);
        assert!(psnr(&x, &Image::zeros(7, 9)).is_err());
    }

    #[test]
    fn rescale_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let i = Image::from_fn(5, 6, |_, _| rng.random_range(0.1..1.0));
        let half = i.scale(0.5);
        let s = rescale_outputs(&half, &half, &i).unwrap();
        assert_eq!(s.alpha, 1.0);
        assert_eq!(s.r, half);
        let s = rescale_outputs(&i, &i, &i).unwrap();
        assert!((s.alpha - 0.5).abs() < 1e-15);
        let r = Image::from_fn(5, 6, |_, _| rng.random_range(0.0..2.0));
        let t = Image::from_fn(5, 6, |_, _| rng.random_range(0.0..2.0));
        let s = rescale_outputs(&r, &t, &i).unwrap();
        assert!((s.r.mean() + s.t.mean() - i.mean()).abs() < 1e-9);
        let z = Image::zeros(5, 6);
        assert!(matches!(rescale_outputs(&z, &z, &i), Err(Error::DegeneratePrediction(_))));
    }

    struct HalfSplit;

    impl SeparationAdapter for HalfSplit {
        fn name(&self) -> String {
            "half".into()
        }

        fn separate(&self, scene: &SceneTriplet) -> Result<(Image<f64>, Image<f64>)> {
            let i = intensity_average(&scene.input).scale(0.5);
            Ok((i.clone(), i))
        }
    }

    #[test]
    fn dataset_evaluation_with_known_adapters() {
        let scenes: Vec<SceneTriplet> = (0..2)
            .map(|seed| {
                let p = SynthSceneParams {
                    height: 24,
                    width: 24,
                    r_gain: 0.3,
                    seed,
                    ..Default::default()
                };
                synthesize_scene(&format!("s{seed}"), &p).unwrap().triplet
            })
            .collect();
        let oracle = evaluate_dataset(&GroundTruthOracle, scenes.iter().cloned().map(Ok)).unwrap();
        for r in &oracle.records {
            assert_eq!((r.t_psnr, r.r_psnr), (PSNR_CAP, PSNR_CAP));
            assert!((r.t_ssim - 1.0).abs() < 1e-12 && (r.r_ssim - 1.0).abs() < 1e-12);
        }
        let half = evaluate_dataset(&HalfSplit, scenes.iter().cloned().map(Ok)).unwrap();
        for (rec, s) in half.records.iter().zip(&scenes) {
            assert_eq!(rec.alpha, 1.0);
            let i = intensity_average(&s.input);
            let t = intensity_average(&s.transmission);
            let mse = i.data().iter().zip(t.data()).map(|(a, b)| (0.5 * a - b).powi(2)).sum::<f64>() / 576.0;
            assert!((rec.t_psnr - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        }
        let mean = (half.records[0].t_psnr + half.records[1].t_psnr) / 2.0;
        assert!((half.summary.t_psnr - mean).abs() < 1e-12);
        assert!(half.summary_table().contains("T PSNR"));
        assert_eq!(half.to_csv().unwrap().lines().count(), 3);

        let empty: Vec<Result<SceneTriplet>> = Vec::new();
        assert!(matches!(evaluate_dataset(&HalfSplit, empty), Err(Error::Validation(_))));

        let mixed = vec![Ok(scenes[0].clone()), Err(Error::Validation("scene x missing".into()))];
        let rep = evaluate_dataset(&GroundTruthOracle, mixed).unwrap();
        assert_eq!((rep.records.len(), rep.failures.len()), (1, 1));
    }
}
