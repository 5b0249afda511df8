//! Training loop for the relighting network.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{FeatureExtractor, FeatureExtractorSpec, LossBreakdown, LossTerms};
use crate::manifest::DatasetManifest;
use crate::model::archive::{Archive, TensorMap};
use crate::model::params::{derive_seed, ParamStore};
use crate::model::{ModelConfig, RelightModel};
use crate::probe::{LightProbe, ProbeSet};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Relative improvement the plateau scheduler requires.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub image_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Held-out `(scene, target)` samples evaluated after every epoch.
    pub validation_samples: usize,
    /// Mirror all four images of a sample with probability 1/2.
    pub horizontal_flip: bool,
    /// Keep decoded, resized images in memory between draws.
    pub cache_images: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 45,
            samples_per_epoch: 10_000,
            batch_size: 1,
            lr: 2e-4,
            plateau_factor: 0.1,
            plateau_patience: 5,
            min_lr: 1e-6,
            image_size: 256,
            seed: 0,
            validation_fraction: 0.1,
            validation_samples: 64,
            horizontal_flip: false,
            cache_images: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_epoch == 0 {
            return Err(Error::invalid("samples_per_epoch", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and >= 0"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::invalid("plateau_factor", "must lie in (0, 1]"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::invalid("plateau_patience", "must be positive"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return Err(Error::invalid("min_lr", "must be finite and >= 0"));
        }
        if self.image_size == 0 {
            return Err(Error::invalid("image_size", "must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation_fraction", "must lie in (0, 1)"));
        }
        if self.validation_samples == 0 {
            return Err(Error::invalid("validation_samples", "must be positive"));
        }
        Ok(())
    }
}

/// Everything `relight-aug train --config` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainingSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extractor: FeatureExtractorSpec,
}

impl TrainingSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.extractor.validate()?;
        if self.model.input_size != self.train.image_size {
            return Err(Error::invalid(
                "image_size",
                format!("training size {} differs from model input {}", self.train.image_size, self.model.input_size),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let setup: Self = serde_json::from_str(&text)?;
        setup.validate()?;
        Ok(setup)
    }
}

/// Scene-disjoint train/validation partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Holds out `ceil(fraction · n)` scenes, chosen by a seeded shuffle.
pub fn split_scenes(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<SceneSplit> {
    let mut scenes = manifest.scene_ids();
    if scenes.len() < 2 {
        return Err(Error::Empty("a train/validation split needs at least two scenes".into()));
    }
    let n_val = ((fraction * scenes.len() as f64).ceil() as usize).clamp(1, scenes.len() - 1);
    scenes.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split")));
    let mut validation = scenes.split_off(scenes.len() - n_val);
    scenes.sort();
    validation.sort();
    Ok(SceneSplit {
        train: scenes,
        validation,
    })
}

/// One relighting example: `input` under `source_id`, relit to `target_id`.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub scene: String,
    pub source_id: u32,
    pub target_id: u32,
    pub input: Image,
    pub probe: LightProbe,
    pub guide: LightProbe,
    pub target: Image,
}

impl TrainingSample {
    fn mirrored(self) -> Result<Self> {
        Ok(Self {
            input: self.input.mirror_horizontal(),
            probe: LightProbe::new(self.probe.image().mirror_horizontal())?,
            guide: LightProbe::new(self.guide.image().mirror_horizontal())?,
            target: self.target.mirror_horizontal(),
            ..self
        })
    }
}

/// Images of a manifest at the training resolution, plus the probe set.
#[derive(Debug)]
pub struct TrainingData {
    manifest: DatasetManifest,
    probes: ProbeSet,
    ids: Vec<u32>,
    image_size: usize,
    cache: Option<HashMap<(String, u32), Image>>,
}

impl TrainingData {
    pub fn new(manifest: DatasetManifest, probes: ProbeSet, image_size: usize, cache: bool) -> Result<Self> {
        let ids = manifest.illumination_ids();
        if ids.is_empty() || manifest.scenes.is_empty() {
            return Err(Error::Empty("manifest has no scenes or illuminations".into()));
        }
        if probes.ids() != ids {
            return Err(Error::invalid(
                "probes",
                format!("probe ids {:?} do not match manifest ids {:?}", probes.ids(), ids),
            ));
        }
        Ok(Self {
            manifest,
            probes,
            ids,
            image_size,
            cache: cache.then(HashMap::new),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn probes(&self) -> &ProbeSet {
        &self.probes
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn image(&mut self, scene: &str, id: u32) -> Result<Image> {
        let key = (scene.to_string(), id);
        if let Some(img) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(img.clone());
        }
        let path = self
            .manifest
            .image_path(scene, id)
            .ok_or_else(|| Error::UnknownId(format!("{scene}/{id}")))?;
        let mut img = Image::load_png(&path)?;
        if img.height() != self.image_size || img.width() != self.image_size {
            img = img.resize(self.image_size, self.image_size);
        }
        if let Some(cache) = self.cache.as_mut() {
            cache.insert(key, img.clone());
        }
        Ok(img)
    }

    fn probe(&self, id: u32) -> Result<LightProbe> {
        self.probes
            .by_id(id)
            .cloned()
            .ok_or_else(|| Error::UnknownId(format!("probe {id}")))
    }

    /// Sample for fixed scene and illuminations.
    pub fn sample(&mut self, scene: &str, source_id: u32, target_id: u32) -> Result<TrainingSample> {
        Ok(TrainingSample {
            scene: scene.to_string(),
            source_id,
            target_id,
            input: self.image(scene, source_id)?,
            probe: self.probe(source_id)?,
            guide: self.probe(target_id)?,
            target: self.image(scene, target_id)?,
        })
    }
}

/// Draws a scene, then source and target illuminations, each uniformly and
/// independently (source may equal target).
pub fn sample_batch(data: &mut TrainingData, scenes: &[String], rng: &mut impl Rng) -> Result<TrainingSample> {
    if scenes.is_empty() {
        return Err(Error::Empty("training split has no scenes".into()));
    }
    let scene = &scenes[rng.random_range(0..scenes.len())];
    let j = data.ids[rng.random_range(0..data.ids.len())];
    let i = data.ids[rng.random_range(0..data.ids.len())];
    data.sample(scene, j, i)
}

/// Adam with bias correction; moments live alongside the parameters they
/// update.
#[derive(Debug)]
pub struct Adam {
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Result<Self> {
        let moments = store
            .vars()
            .iter()
            .map(|(k, v)| Ok((k.clone(), (v.zeros_like()?, v.zeros_like()?))))
            .collect::<Result<_>>()?;
        Ok(Self { step: 0, moments })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::UnknownId(format!("optimizer state for {name}")))?;
            *m = ((&*m * ADAM_BETA1)? + (g * (1.0 - ADAM_BETA1))?)?;
            *v = ((&*v * ADAM_BETA2)? + (g.sqr()? * (1.0 - ADAM_BETA2))?)?;
            let denom = ((&*v / c2)?.sqrt()? + ADAM_EPS)?;
            let update = ((&*m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    fn export(&self, out: &mut TensorMap) -> Result<()> {
        for (name, (m, v)) in &self.moments {
            for (prefix, t) in [("opt.m.", m), ("opt.v.", v)] {
                let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                out.insert(format!("{prefix}{name}"), (t.dims().to_vec(), data));
            }
        }
        Ok(())
    }

    fn import(store: &ParamStore, tensors: &TensorMap, step: u64) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in store.vars() {
            let fetch = |prefix: &str| -> Result<Tensor> {
                let key = format!("{prefix}{name}");
                let (dims, data) = tensors
                    .get(&key)
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {key}")))?;
                if dims.as_slice() != var.dims() {
                    return Err(Error::shape(format!("{key} {:?}", var.dims()), format!("{dims:?}")));
                }
                Ok(Tensor::from_slice(data, dims.as_slice(), &Device::Cpu)?.to_dtype(store.dtype())?)
            };
            moments.insert(name.clone(), (fetch("opt.m.")?, fetch("opt.v.")?));
        }
        Ok(Self { step, moments })
    }
}

/// Reduce-on-plateau learning-rate policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.lr,
            factor: config.plateau_factor,
            patience: config.plateau_patience,
            min_lr: config.min_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        match self.best {
            Some(best) if val_loss >= best * (1.0 - PLATEAU_THRESHOLD) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

fn stack(images: impl Iterator<Item = Result<Tensor>>) -> Result<Tensor> {
    let parts = images.collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Batched tensors `(input, probe, guide, target)`.
fn batch_tensors(samples: &[TrainingSample], dtype: DType) -> Result<[Tensor; 4]> {
    let dev = Device::Cpu;
    Ok([
        stack(samples.iter().map(|s| s.input.to_tensor(dtype, &dev)))?,
        stack(samples.iter().map(|s| s.probe.image().to_tensor(dtype, &dev)))?,
        stack(samples.iter().map(|s| s.guide.image().to_tensor(dtype, &dev)))?,
        stack(samples.iter().map(|s| s.target.to_tensor(dtype, &dev)))?,
    ])
}

fn loss_terms(model: &RelightModel, extractor: &FeatureExtractor, samples: &[TrainingSample]) -> Result<LossTerms> {
    let [input, probe, guide, target] = batch_tensors(samples, model.dtype())?;
    let (predicted, relit) = model.forward_tensors(&input, &guide)?;
    LossTerms::compute(extractor, &probe, &predicted, &target, &relit)
}

/// Loss of a batch without updating anything.
pub fn evaluate(model: &RelightModel, extractor: &FeatureExtractor, samples: &[TrainingSample]) -> Result<LossBreakdown> {
    loss_terms(model, extractor, samples)?.breakdown()
}

/// One optimizer step on the summed loss. Returns the loss before the step.
pub fn train_step(
    model: &mut RelightModel,
    optimizer: &mut Adam,
    extractor: &FeatureExtractor,
    samples: &[TrainingSample],
    lr: f64,
) -> Result<LossBreakdown> {
    let terms = loss_terms(model, extractor, samples)?;
    let breakdown = terms.breakdown()?;
    if let Some((term, value)) = breakdown.non_finite_term() {
        return Err(Error::NonFiniteLoss {
            term,
            value,
            step: model.train_steps,
        });
    }
    let grads = terms.total()?.backward()?;
    optimizer.apply(model.params(), &grads, lr)?;
    model.train_steps += 1;
    if !model.params().all_finite()? {
        return Err(Error::NonFiniteLoss {
            term: "parameters",
            value: f64::NAN,
            step: model.train_steps,
        });
    }
    Ok(breakdown)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub probe: f64,
    pub image_l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub lr: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingState {
    epochs_done: usize,
    optimizer_steps: u64,
    scheduler: PlateauScheduler,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Model together with optimizer and scheduler state.
#[derive(Debug)]
pub struct TrainingCheckpoint {
    pub model: RelightModel,
    pub optimizer: Adam,
    pub scheduler: PlateauScheduler,
    pub epochs_done: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainingCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut archive = self.model.to_archive()?;
        self.optimizer.export(&mut archive.tensors)?;
        let state = TrainingState {
            epochs_done: self.epochs_done,
            optimizer_steps: self.optimizer.step,
            scheduler: self.scheduler.clone(),
            best_val: self.best_val,
            best_epoch: self.best_epoch,
        };
        archive.metadata["training"] = serde_json::to_value(state)?;
        archive.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = Archive::read(path)?;
        let state: TrainingState = serde_json::from_value(
            archive
                .metadata
                .get("training")
                .cloned()
                .ok_or_else(|| Error::CorruptCheckpoint("no training state in checkpoint".into()))?,
        )?;
        let model = RelightModel::from_archive(&archive)?;
        let optimizer = Adam::import(model.params(), &archive.tensors, state.optimizer_steps)?;
        Ok(Self {
            model,
            optimizer,
            scheduler: state.scheduler,
            epochs_done: state.epochs_done,
            best_val: state.best_val,
            best_epoch: state.best_epoch,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for checkpoints and the metrics log.
    pub out_dir: Option<PathBuf>,
    /// Training checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete in total, as if interrupted.
    pub stop_after: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub model: RelightModel,
    pub metrics: Vec<EpochMetrics>,
    pub split: SceneSplit,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}")))
}

/// Fixed held-out samples, drawn once per run.
fn validation_set(data: &mut TrainingData, split: &SceneSplit, config: &TrainConfig) -> Result<Vec<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "validation"));
    (0..config.validation_samples)
        .map(|_| sample_batch(data, &split.validation, &mut rng))
        .collect()
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    LossBreakdown::new(
        items.iter().map(|b| b.probe).sum::<f64>() / n,
        items.iter().map(|b| b.image_l1).sum::<f64>() / n,
        items.iter().map(|b| b.perceptual).sum::<f64>() / n,
    )
}

fn append_line(path: &Path, record: &EpochMetrics) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

/// Reads a metrics log written by [`fit`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Runs the epoch loop, validating after each epoch on held-out scenes.
///
/// With an output directory, `last.ckpt` is rewritten after every epoch,
/// `best.ckpt` whenever validation improves, and one metrics line is
/// appended per epoch.
pub fn fit(data: &mut TrainingData, setup: &TrainingSetup, options: &FitOptions) -> Result<FitOutcome> {
    setup.validate()?;
    let config = &setup.train;
    if data.image_size != config.image_size {
        return Err(Error::invalid("image_size", "training data resolution differs from the config"));
    }
    if data.probes.probe_size() != Some(setup.model.probe_size) {
        return Err(Error::invalid(
            "probe_size",
            format!("probe set size {:?} differs from model {}", data.probes.probe_size(), setup.model.probe_size),
        ));
    }
    let split = split_scenes(&data.manifest, config.validation_fraction, config.seed)?;
    let extractor = FeatureExtractor::new(&setup.extractor, DType::F32)?;

    let mut ckpt = match &options.resume {
        Some(path) => {
            let c = TrainingCheckpoint::load(path)?;
            if c.model.config() != &setup.model {
                return Err(Error::invalid("model", "checkpoint architecture differs from the config"));
            }
            c
        }
        None => {
            let model = RelightModel::init(setup.model.clone(), config.seed, DType::F32)?;
            let optimizer = Adam::new(model.params())?;
            TrainingCheckpoint {
                model,
                optimizer,
                scheduler: PlateauScheduler::new(config),
                epochs_done: 0,
                best_val: None,
                best_epoch: None,
            }
        }
    };

    let log_path = options.out_dir.as_ref().map(|d| d.join(METRICS_LOG));
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if options.resume.is_none() {
            let p = dir.join(METRICS_LOG);
            std::fs::write(&p, b"").map_err(|e| Error::io(&p, e))?;
        }
    }

    let validation = validation_set(data, &split, config)?;
    let steps_per_epoch = config.samples_per_epoch.div_ceil(config.batch_size);
    let last_epoch = options.stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    let mut metrics = Vec::new();

    for epoch in ckpt.epochs_done..last_epoch {
        let mut rng = epoch_rng(config.seed, epoch);
        let lr = ckpt.scheduler.lr;
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for _ in 0..steps_per_epoch {
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let mut s = sample_batch(data, &split.train, &mut rng)?;
                if config.horizontal_flip && rng.random_bool(0.5) {
                    s = s.mirrored()?;
                }
                batch.push(s);
            }
            losses.push(train_step(&mut ckpt.model, &mut ckpt.optimizer, &extractor, &batch, lr)?);
        }
        let val = mean_breakdown(
            &validation
                .iter()
                .map(|s| evaluate(&ckpt.model, &extractor, std::slice::from_ref(s)))
                .collect::<Result<Vec<_>>>()?,
        );
        if let Some((term, value)) = val.non_finite_term() {
            return Err(Error::NonFiniteLoss {
                term,
                value,
                step: ckpt.model.train_steps,
            });
        }
        let train = mean_breakdown(&losses);
        let record = EpochMetrics {
            epoch,
            step: ckpt.model.train_steps,
            probe: train.probe,
            image_l1: train.image_l1,
            perceptual: train.perceptual,
            total: train.total,
            lr,
            val_total: val.total,
        };
        ckpt.scheduler.step(val.total);
        ckpt.epochs_done = epoch + 1;
        let improved = ckpt.best_val.is_none_or(|b| val.total < b);
        if improved {
            ckpt.best_val = Some(val.total);
            ckpt.best_epoch = Some(epoch);
        }
        if options.verbose {
            eprintln!(
                "epoch {epoch}: total {:.4} (probe {:.4}, l1 {:.4}, perceptual {:.4}), val {:.4}, lr {lr:e}",
                train.total, train.probe, train.image_l1, train.perceptual, val.total
            );
        }
        if let Some(dir) = &options.out_dir {
            if improved {
                let mut best = ckpt.model.to_archive()?;
                best.metadata["val_total"] = serde_json::json!(val.total);
                best.metadata["epoch"] = serde_json::json!(epoch);
                best.write(dir.join(BEST_CHECKPOINT))?;
            }
            ckpt.save(dir.join(LAST_CHECKPOINT))?;
        }
        if let Some(p) = &log_path {
            append_line(p, &record)?;
        }
        metrics.push(record);
    }

    Ok(FitOutcome {
        model: ckpt.model,
        metrics,
        split,
        best_val: ckpt.best_val,
        best_epoch: ckpt.best_epoch,
    })
}
