//! Encoder-decoder relighting network.
//!
//! The image encoder ends in a bottleneck whose channels are split into a
//! geometry block and a lighting block; the lighting block is pooled into a
//! [`LightingCode`]. A small transposed-convolution branch decodes that code
//! into a light probe. To relight, the lighting block is replaced by the code
//! of a guide probe (from a separate probe encoder), broadcast over the
//! bottleneck grid, and the image decoder runs ResBlocks followed by
//! up-projection stages that concatenate the encoder skips.

pub mod archive;
pub mod conv;
pub mod layers;
pub mod params;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use self::archive::Archive;
use self::layers::{squash, global_pool, Conv, ConvAct, Deconv, DownProjection, DualConv, Norm, ResBlock, UpProjection, DeconvAct};
use self::params::ParamStore;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::probe::LightProbe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub bottleneck_channels: usize,
    pub lighting_channels: usize,
    pub res_blocks: usize,
    pub probe_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_channels: 32,
            stages: 4,
            bottleneck_channels: 256,
            lighting_channels: 128,
            res_blocks: 4,
            probe_size: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::invalid("stages", "must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels", "must be positive"));
        }
        let factor = 1usize << self.stages;
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::invalid(
                "input_size",
                format!("{} not divisible by 2^{}", self.input_size, self.stages),
            ));
        }
        if self.lighting_channels == 0 || self.lighting_channels >= self.bottleneck_channels {
            return Err(Error::invalid(
                "lighting_channels",
                format!("{} must be in [1, bottleneck_channels={})", self.lighting_channels, self.bottleneck_channels),
            ));
        }
        if self.probe_size < 8 || !self.probe_size.is_power_of_two() {
            return Err(Error::invalid("probe_size", format!("{} must be a power of two >= 8", self.probe_size)));
        }
        Ok(())
    }

    /// Side length of the bottleneck grid.
    pub fn bottleneck_side(&self) -> usize {
        self.input_size >> self.stages
    }

    pub fn geometry_channels(&self) -> usize {
        self.bottleneck_channels - self.lighting_channels
    }

    /// Channels of encoder level `level` (`0` = full resolution). The last
    /// level is the bottleneck.
    pub fn level_channels(&self, level: usize) -> usize {
        if level >= self.stages {
            self.bottleneck_channels
        } else {
            (self.base_channels << level).min(self.bottleneck_channels)
        }
    }

    /// Channel plan of the probe decoder, from the 4×4 seed to full size.
    pub(crate) fn probe_channels(&self) -> Vec<usize> {
        let ups = (self.probe_size / 4).trailing_zeros() as usize;
        let mut c = self.lighting_channels.min(64);
        let mut plan = vec![c];
        for _ in 0..ups {
            c = (c / 2).max(8);
            plan.push(c);
        }
        plan
    }
}

/// Interpretable illumination encoding pooled from the bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct LightingCode {
    pub values: Vec<f64>,
}

impl LightingCode {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_distance(&self, other: &LightingCode) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, self.values.len()), device)?.to_dtype(dtype)?)
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("lighting code", "non-finite value"));
        }
        Ok(Self { values })
    }
}

/// Encoder outputs kept for decoding.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(N, geometry_channels, side, side)`
    pub geometry: Tensor,
    /// `(N, lighting_channels)`
    pub code: Tensor,
    /// Encoder features per level, full resolution first.
    pub skips: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct ProbeDecoder {
    seed: Deconv,
    ups: Vec<DeconvAct>,
    out: Conv,
}

impl ProbeDecoder {
    fn new(store: &mut ParamStore, config: &ModelConfig, prefix: &str) -> Result<Self> {
        let plan = config.probe_channels();
        let seed = Deconv::new(store, &format!("{prefix}.seed"), config.lighting_channels, plan[0], 4, 1, 0, true)?;
        let ups = plan
            .windows(2)
            .enumerate()
            .map(|(k, w)| DeconvAct::new(store, &format!("{prefix}.up{k}"), w[0], w[1], 4, 2, 1, Norm::None))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv::new(store, &format!("{prefix}.out"), *plan.last().unwrap(), 3, 3, 1, 1, true)?;
        Ok(Self { seed, ups, out })
    }

    fn forward(&self, code: &Tensor) -> Result<Tensor> {
        let (n, d) = code.dims2()?;
        let mut x = layers::elu(&self.seed.forward(&code.reshape((n, d, 1, 1))?)?)?;
        for up in &self.ups {
            x = up.forward(&x)?;
        }
        squash(&self.out.forward(&x)?)
    }
}

#[derive(Debug, Clone)]
struct ProbeEncoder {
    downs: Vec<ConvAct>,
    out: Conv,
}

impl ProbeEncoder {
    fn new(store: &mut ParamStore, config: &ModelConfig, prefix: &str) -> Result<Self> {
        let mut plan = config.probe_channels();
        plan.reverse();
        let mut c_in = 3;
        let mut downs = Vec::new();
        for (k, &c) in plan.iter().skip(1).enumerate() {
            downs.push(ConvAct::new(store, &format!("{prefix}.down{k}"), c_in, c, 4, 2, 1, Norm::Instance)?);
            c_in = c;
        }
        let out = Conv::new(store, &format!("{prefix}.out"), c_in, config.lighting_channels, 3, 1, 1, true)?;
        Ok(Self { downs, out })
    }

    fn forward(&self, probe: &Tensor) -> Result<Tensor> {
        let mut x = probe.clone();
        for d in &self.downs {
            x = d.forward(&x)?;
        }
        global_pool(&self.out.forward(&x)?)
    }
}

/// The relighting network together with its parameters.
#[derive(Debug)]
pub struct RelightModel {
    config: ModelConfig,
    store: ParamStore,
    pub train_steps: u64,
    stem: DualConv,
    downs: Vec<DownProjection>,
    enc_convs: Vec<DualConv>,
    head: Conv,
    res: Vec<ResBlock>,
    ups: Vec<UpProjection>,
    dec_convs: Vec<DualConv>,
    out: Conv,
    probe_decoder: ProbeDecoder,
    probe_encoder: ProbeEncoder,
}

pub const CHECKPOINT_KIND: &str = "relight-model";

impl RelightModel {
    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, Device::Cpu);
        let s = &mut store;
        let stem = DualConv::new(s, "enc.stem", 3, config.level_channels(0), Norm::Instance)?;
        let mut downs = Vec::new();
        let mut enc_convs = Vec::new();
        for level in 0..config.stages {
            let (c_in, c_out) = (config.level_channels(level), config.level_channels(level + 1));
            downs.push(DownProjection::new(s, &format!("enc.down{level}"), c_in, c_out, Norm::Instance)?);
            if level + 1 < config.stages {
                enc_convs.push(DualConv::new(s, &format!("enc.conv{}", level + 1), c_out, c_out, Norm::Instance)?);
            }
        }
        let b = config.bottleneck_channels;
        let head = Conv::new(s, "enc.head", b, b, 1, 1, 0, true)?;
        let res = (0..config.res_blocks)
            .map(|k| ResBlock::new(s, &format!("dec.res{k}"), b, Norm::None))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        let mut dec_convs = Vec::new();
        for level in (0..config.stages).rev() {
            let (c_in, c_out) = (config.level_channels(level + 1), config.level_channels(level));
            ups.push(UpProjection::new(s, &format!("dec.up{level}"), c_in, c_out, Norm::None)?);
            dec_convs.push(DualConv::new(s, &format!("dec.conv{level}"), 2 * c_out, c_out, Norm::None)?);
        }
        let out = Conv::new(s, "dec.out", config.level_channels(0), 3, 1, 1, 0, true)?;
        let probe_decoder = ProbeDecoder::new(s, &config, "probe_dec")?;
        let probe_encoder = ProbeEncoder::new(s, &config, "probe_enc")?;
        Ok(Self {
            config,
            store,
            train_steps: 0,
            stem,
            downs,
            enc_convs,
            head,
            res,
            ups,
            dec_convs,
            out,
            probe_decoder,
            probe_encoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    fn check_image_tensor(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let s = self.config.input_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::shape(format!("(N, 3, {s}, {s})"), format!("{dims:?}")));
        }
        Ok(())
    }

    fn check_probe_tensor(&self, p: &Tensor) -> Result<()> {
        let dims = p.dims();
        let s = self.config.probe_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::shape(format!("(N, 3, {s}, {s})"), format!("{dims:?}")));
        }
        Ok(())
    }

    fn check_code_tensor(&self, code: &Tensor) -> Result<()> {
        let dims = code.dims();
        if dims.len() != 2 || dims[1] != self.config.lighting_channels {
            return Err(Error::shape(format!("(N, {})", self.config.lighting_channels), format!("{dims:?}")));
        }
        Ok(())
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Encoded> {
        self.check_image_tensor(x)?;
        let mut h = self.stem.forward(x)?;
        let mut skips = Vec::with_capacity(self.config.stages);
        for (level, down) in self.downs.iter().enumerate() {
            skips.push(h.clone());
            h = down.forward(&h)?;
            if let Some(conv) = self.enc_convs.get(level) {
                h = conv.forward(&h)?;
            }
        }
        let bottleneck = self.head.forward(&h)?;
        let g = self.config.geometry_channels();
        let geometry = bottleneck.narrow(1, 0, g)?;
        let code = global_pool(&bottleneck.narrow(1, g, self.config.lighting_channels)?)?;
        Ok(Encoded { geometry, code, skips })
    }

    pub fn decode_probe_tensor(&self, code: &Tensor) -> Result<Tensor> {
        self.check_code_tensor(code)?;
        self.probe_decoder.forward(code)
    }

    pub fn encode_probe_tensor(&self, probe: &Tensor) -> Result<Tensor> {
        self.check_probe_tensor(probe)?;
        self.probe_encoder.forward(probe)
    }

    /// Decodes an image from geometry, skips and a (possibly swapped) code.
    pub fn decode_image_tensor(&self, geometry: &Tensor, skips: &[Tensor], code: &Tensor) -> Result<Tensor> {
        self.check_code_tensor(code)?;
        let (n, g, side, side2) = geometry.dims4()?;
        if g != self.config.geometry_channels() || side != self.config.bottleneck_side() || side2 != side {
            return Err(Error::shape(
                format!("(N, {0}, {1}, {1})", self.config.geometry_channels(), self.config.bottleneck_side()),
                format!("{:?}", geometry.dims()),
            ));
        }
        if skips.len() != self.config.stages {
            return Err(Error::shape(format!("{} skips", self.config.stages), skips.len()));
        }
        let d = self.config.lighting_channels;
        let lighting = code.reshape((n, d, 1, 1))?.broadcast_as((n, d, side, side))?;
        let mut h = Tensor::cat(&[geometry, &lighting], 1)?;
        for block in &self.res {
            h = block.forward(&h)?;
        }
        for ((up, conv), skip) in self.ups.iter().zip(&self.dec_convs).zip(skips.iter().rev()) {
            h = up.forward(&h)?;
            h = conv.forward(&Tensor::cat(&[&h, skip], 1)?)?;
        }
        squash(&self.out.forward(&h)?)
    }

    /// `(predicted probe, relit image)` for an image batch and guide probes.
    pub fn forward_tensors(&self, image: &Tensor, guide: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image_tensor(image)?;
        self.check_probe_tensor(guide)?;
        if image.dim(0)? != guide.dim(0)? {
            return Err(Error::shape(format!("{} guides", image.dim(0)?), guide.dim(0)?));
        }
        let enc = self.encode_tensor(image)?;
        let predicted = self.decode_probe_tensor(&enc.code)?;
        let guide_code = self.encode_probe_tensor(guide)?;
        let relit = self.decode_image_tensor(&enc.geometry, &enc.skips, &guide_code)?;
        Ok((predicted, relit))
    }

    fn image_tensor(&self, image: &Image) -> Result<Tensor> {
        let s = self.config.input_size;
        if image.height() != s || image.width() != s {
            return Err(Error::shape(format!("{s}x{s} image"), format!("{}x{}", image.height(), image.width())));
        }
        image.to_tensor(self.dtype(), self.store.device())
    }

    fn probe_tensor(&self, probe: &LightProbe) -> Result<Tensor> {
        let s = self.config.probe_size;
        if probe.size() != s {
            return Err(Error::shape(format!("{s}x{s} probe"), format!("{0}x{0}", probe.size())));
        }
        probe.image().to_tensor(self.dtype(), self.store.device())
    }

    /// Geometry features and lighting code of one image.
    pub fn encode(&self, image: &Image) -> Result<(Encoded, LightingCode)> {
        let enc = self.encode_tensor(&self.image_tensor(image)?)?;
        let code = LightingCode::from_tensor(&enc.code)?;
        Ok((enc, code))
    }

    pub fn decode_probe(&self, code: &LightingCode) -> Result<LightProbe> {
        if code.dim() != self.config.lighting_channels {
            return Err(Error::shape(format!("code dim {}", self.config.lighting_channels), code.dim()));
        }
        let t = self.decode_probe_tensor(&code.to_tensor(self.dtype(), self.store.device())?)?;
        LightProbe::new(Image::from_tensor(&t)?)
    }

    pub fn encode_probe(&self, probe: &LightProbe) -> Result<LightingCode> {
        LightingCode::from_tensor(&self.encode_probe_tensor(&self.probe_tensor(probe)?)?)
    }

    /// Relights `image` with the code of an arbitrary lighting vector.
    pub fn relight_with_code(&self, encoded: &Encoded, code: &LightingCode) -> Result<Image> {
        if code.dim() != self.config.lighting_channels {
            return Err(Error::shape(format!("code dim {}", self.config.lighting_channels), code.dim()));
        }
        let code = code.to_tensor(self.dtype(), self.store.device())?;
        Image::from_tensor(&self.decode_image_tensor(&encoded.geometry, &encoded.skips, &code)?)
    }

    /// Predicts the probe of `image` and relights it under `guide`.
    pub fn relight(&self, image: &Image, guide: &LightProbe) -> Result<(LightProbe, Image)> {
        let x = self.image_tensor(image)?;
        let g = self.probe_tensor(guide)?;
        let (p, r) = self.forward_tensors(&x, &g)?;
        Ok((LightProbe::new(Image::from_tensor(&p)?)?, Image::from_tensor(&r)?))
    }

    pub(crate) fn to_archive(&self) -> Result<Archive> {
        let mut archive = Archive::new(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "train_steps": self.train_steps,
        }));
        archive.tensors = self.store.export()?;
        Ok(archive)
    }

    pub(crate) fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::CorruptCheckpoint("not a relighting model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = Self::init(config, 0, DType::F32)?;
        model.store.import(&archive.tensors.iter().filter(|(k, _)| !k.starts_with("opt.")).map(|(k, v)| (k.clone(), v.clone())).collect())?;
        model.train_steps = meta["train_steps"].as_u64().unwrap_or(0);
        Ok(model)
    }

    /// Writes the weights alone (no optimizer state).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}
