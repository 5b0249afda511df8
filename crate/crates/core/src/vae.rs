//! β-VAE over light probes, so new probes can be decoded from latent vectors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::l1_mean;
use crate::model::archive::Archive;
use crate::model::layers::{squash, Conv, ConvAct, DeconvAct, Norm};
use crate::model::params::{derive_seed, ParamStore};
use crate::probe::{render_probe, LightProbe, ProbeSet, ProbeSpec};
use crate::train::Adam;

/// Feature map side at the latent end of both halves.
const CORE_SIDE: usize = 4;

/// How the training objective reduces the per-pixel L1 reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconScale {
    /// Mean over pixels and channels, as reported by [`vae_loss`].
    Mean,
    /// Sum over pixels and channels, the usual likelihood scaling under
    /// which `beta` is calibrated.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub probe_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Channels of the first encoder stage, doubled per stage up to 64.
    pub base_channels: usize,
    /// Rendered probes added to the training corpus.
    pub synthetic_probes: usize,
    pub recon_scale: ReconScale,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            beta: 4.0,
            probe_size: 64,
            lr: 1e-3,
            epochs: 300,
            batch_size: 16,
            seed: 0,
            base_channels: 16,
            synthetic_probes: 200,
            recon_scale: ReconScale::Sum,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim", "must be at least 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", "must be finite and >= 0"));
        }
        if !self.probe_size.is_power_of_two() || self.probe_size < 2 * CORE_SIDE {
            return Err(Error::invalid("probe_size", "must be a power of two >= 8"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.base_channels == 0 {
            return Err(Error::invalid("batch_size", "batch size and channels must be positive"));
        }
        Ok(())
    }

    fn stage_channels(&self) -> Vec<usize> {
        let stages = (self.probe_size / CORE_SIDE).trailing_zeros() as usize;
        (0..stages).map(|k| (self.base_channels << k).min(64)).collect()
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[c_out, c_in], bound)?,
            bias: store.uniform(&format!("{name}.bias"), &[c_out], bound)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Encoder, decoder and their configuration.
#[derive(Debug)]
pub struct VaeModel {
    config: VaeConfig,
    store: ParamStore,
    enc: Vec<ConvAct>,
    enc_head: Linear,
    dec_head: Linear,
    dec: Vec<DeconvAct>,
    dec_out: Conv,
}

/// Latent draw used by [`vae_forward`].
pub enum LatentMode<'a, R: Rng> {
    Mean,
    Sampled(&'a mut R),
}

#[derive(Debug, Clone)]
pub struct VaeOutput {
    pub recon: LightProbe,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

pub const VAE_CHECKPOINT_KIND: &str = "probe-vae";

impl VaeModel {
    pub fn init(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, DType::F32, Device::Cpu);
        let s = &mut store;
        let chans = config.stage_channels();
        let mut enc = Vec::new();
        let mut c_in = 3;
        for (k, &c) in chans.iter().enumerate() {
            enc.push(ConvAct::new(s, &format!("vae.enc{k}"), c_in, c, 4, 2, 1, Norm::None)?);
            c_in = c;
        }
        let core = c_in * CORE_SIDE * CORE_SIDE;
        let enc_head = Linear::new(s, "vae.enc_head", core, 2 * config.latent_dim)?;
        let dec_head = Linear::new(s, "vae.dec_head", config.latent_dim, core)?;
        let mut dec = Vec::new();
        for (k, &c) in chans.iter().enumerate().rev() {
            dec.push(DeconvAct::new(s, &format!("vae.dec{k}"), c_in, c, 4, 2, 1, Norm::None)?);
            c_in = c;
        }
        let dec_out = Conv::new(s, "vae.dec_out", c_in, 3, 3, 1, 1, true)?;
        Ok(Self {
            config,
            store,
            enc,
            enc_head,
            dec_head,
            dec,
            dec_out,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `(mu, logvar)` for a `(N, 3, P, P)` batch.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let p = self.config.probe_size;
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != p || dims[3] != p {
            return Err(Error::shape(format!("(N, 3, {p}, {p})"), format!("{dims:?}")));
        }
        let mut h = x.clone();
        for layer in &self.enc {
            h = layer.forward(&h)?;
        }
        let stats = self.enc_head.forward(&h.flatten_from(1)?)?;
        let d = self.config.latent_dim;
        Ok((stats.narrow(1, 0, d)?, stats.narrow(1, d, d)?))
    }

    /// Decodes a `(N, latent_dim)` batch.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let d = self.config.latent_dim;
        if z.dims().len() != 2 || z.dims()[1] != d {
            return Err(Error::shape(format!("(N, {d})"), format!("{:?}", z.dims())));
        }
        let n = z.dim(0)?;
        let c = self.config.stage_channels().last().copied().unwrap_or(3);
        let mut h = self.dec_head.forward(z)?.elu(1.0)?.reshape((n, c, CORE_SIDE, CORE_SIDE))?;
        for layer in &self.dec {
            h = layer.forward(&h)?;
        }
        squash(&self.dec_out.forward(&h)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut archive = Archive::new(serde_json::json!({
            "kind": VAE_CHECKPOINT_KIND,
            "config": self.config,
        }));
        archive.tensors = self.store.export()?;
        archive.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = Archive::read(path)?;
        if archive.metadata.get("kind").and_then(|k| k.as_str()) != Some(VAE_CHECKPOINT_KIND) {
            return Err(Error::CorruptCheckpoint("not a probe VAE checkpoint".into()));
        }
        let config: VaeConfig = serde_json::from_value(archive.metadata["config"].clone())?;
        let model = Self::init(config)?;
        model.store.import(&archive.tensors)?;
        Ok(model)
    }
}

fn row(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn probe_tensor(model: &VaeModel, probe: &LightProbe) -> Result<Tensor> {
    let p = model.config.probe_size;
    if probe.size() != p {
        return Err(Error::shape(format!("{p}x{p} probe"), format!("{0}x{0}", probe.size())));
    }
    probe.image().to_tensor(DType::F32, &Device::Cpu)
}

/// Reparameterized draw `mu + exp(logvar / 2) · ε`.
fn reparameterize(mu: &Tensor, logvar: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let eps: Vec<f32> = (0..mu.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::from_vec(eps, mu.dims(), mu.device())?;
    Ok((mu + (logvar * 0.5)?.exp()?.mul(&eps)?)?)
}

pub fn vae_forward<R: Rng>(model: &VaeModel, probe: &LightProbe, mode: LatentMode<'_, R>) -> Result<VaeOutput> {
    let (mu, logvar) = model.encode_tensor(&probe_tensor(model, probe)?)?;
    let z = match mode {
        LatentMode::Mean => mu.clone(),
        LatentMode::Sampled(rng) => reparameterize(&mu, &logvar, rng)?,
    };
    let recon = LightProbe::new(Image::from_tensor(&model.decode_tensor(&z)?)?)?;
    Ok(VaeOutput {
        recon,
        mu: row(&mu)?,
        logvar: row(&logvar)?,
    })
}

/// `KL(N(mu, diag exp(logvar)) ‖ N(0, I))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::shape(format!("{} logvar entries", mu.len()), logvar.len()));
    }
    Ok(0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>())
}

/// Mean-L1 reconstruction error plus `beta` times the KL term.
pub fn vae_loss(recon: &LightProbe, probe: &LightProbe, mu: &[f64], logvar: &[f64], beta: f64) -> Result<f64> {
    if !recon.image().same_shape(probe.image()) {
        return Err(Error::shape(format!("{0}x{0}", probe.size()), format!("{0}x{0}", recon.size())));
    }
    Ok(recon.image().mean_abs_diff(probe.image()) + beta * kl_divergence(mu, logvar)?)
}

/// Batch-mean KL as a differentiable scalar.
fn kl_tensor(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let per = ((mu.sqr()? + logvar.exp()?)? - logvar)?;
    let n = mu.dim(0)? as f64;
    Ok((((per - 1.0)?.sum_all()? * 0.5)? / n)?)
}

pub fn sample_probe(model: &VaeModel, z: &[f64]) -> Result<LightProbe> {
    if z.len() != model.config.latent_dim {
        return Err(Error::shape(format!("latent dim {}", model.config.latent_dim), z.len()));
    }
    let t = Tensor::from_vec(z.iter().map(|&v| v as f32).collect::<Vec<_>>(), (1, z.len()), &Device::Cpu)?;
    LightProbe::new(Image::from_tensor(&model.decode_tensor(&t)?)?)
}

/// Decodes `steps` evenly spaced values of latent `dim` from `lo` to `hi`,
/// other coordinates zero.
pub fn latent_traverse(model: &VaeModel, dim: usize, lo: f64, hi: f64, steps: usize) -> Result<Vec<LightProbe>> {
    if dim >= model.config.latent_dim {
        return Err(Error::invalid("dim", format!("{dim} outside latent size {}", model.config.latent_dim)));
    }
    if steps < 2 {
        return Err(Error::invalid("steps", "at least two steps are required"));
    }
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::invalid("range", format!("[{lo}, {hi}] is not a valid range")));
    }
    (0..steps)
        .map(|k| {
            let mut z = vec![0.0; model.config.latent_dim];
            z[dim] = lo + (hi - lo) * k as f64 / (steps - 1) as f64;
            sample_probe(model, &z)
        })
        .collect()
}

/// The given probes plus `config.synthetic_probes` renders with random
/// direction and intensity.
pub fn vae_corpus(probes: &ProbeSet, config: &VaeConfig) -> Result<Vec<LightProbe>> {
    let mut out = probes.probes().to_vec();
    if let Some(bad) = out.iter().find(|p| p.size() != config.probe_size) {
        return Err(Error::shape(format!("{0}x{0} probe", config.probe_size), format!("{0}x{0}", bad.size())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "vae-corpus"));
    for _ in 0..config.synthetic_probes {
        let spec = ProbeSpec::new(
            rng.random_range(-180.0..180.0),
            rng.random_range(-60.0..60.0),
            rng.random_range(0.4..1.0),
        )
        .with_size(config.probe_size);
        out.push(render_probe(&spec)?);
    }
    Ok(out)
}

/// Minibatch training on the full loss; returns the model and the mean
/// loss of every epoch.
pub fn train_vae(corpus: &[LightProbe], config: &VaeConfig) -> Result<(VaeModel, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Empty("no probes to train on".into()));
    }
    let model = VaeModel::init(config.clone())?;
    let data = corpus.iter().map(|p| probe_tensor(&model, p)).collect::<Result<Vec<_>>>()?;
    let mut optimizer = Adam::new(&model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "vae-train"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let x = Tensor::cat(&chunk.iter().map(|&k| data[k].clone()).collect::<Vec<_>>(), 0)?;
            let (mu, logvar) = model.encode_tensor(&x)?;
            let z = reparameterize(&mu, &logvar, &mut rng)?;
            let recon = model.decode_tensor(&z)?;
            let scale = match config.recon_scale {
                ReconScale::Mean => 1.0,
                ReconScale::Sum => (x.elem_count() / chunk.len()) as f64,
            };
            let loss = ((l1_mean(&x, &recon)? * scale)? + (kl_tensor(&mu, &logvar)? * config.beta)?)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "vae",
                    value,
                    step: epoch as u64,
                });
            }
            optimizer.apply(&model.store, &loss.backward()?, config.lr)?;
            sum += value;
            batches += 1;
        }
        history.push(sum / batches as f64);
    }
    Ok((model, history))
}
