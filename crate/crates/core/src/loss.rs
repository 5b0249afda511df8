//! Probe L1, image L1 + perceptual, and their sum.
//!
//! All norms are element-count normalized means, so magnitudes do not depend
//! on resolution.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::layers::Conv;
use crate::model::params::ParamStore;
use crate::probe::LightProbe;

/// Most feature layers either extractor can provide.
pub const MAX_FEATURE_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// VGG16 convolutional trunk read from a safetensors file using the
    /// `features.<index>.{weight,bias}` naming.
    PretrainedClassifier { weights: PathBuf },
    /// Randomly initialized, never trained convolutional pyramid.
    FrozenRandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    #[serde(flatten)]
    pub kind: ExtractorKind,
    #[serde(default = "default_layer_count")]
    pub layer_count: usize,
    /// Per-layer weights; empty means 1.0 for every layer.
    #[serde(default)]
    pub layer_weights: Vec<f64>,
}

fn default_layer_count() -> usize {
    4
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::PretrainedClassifier {
                weights: PathBuf::from("weights/vgg16_features.safetensors"),
            },
            layer_count: default_layer_count(),
            layer_weights: Vec::new(),
        }
    }
}

impl FeatureExtractorSpec {
    pub fn frozen_random(seed: u64, layer_count: usize) -> Self {
        Self {
            kind: ExtractorKind::FrozenRandom { seed },
            layer_count,
            layer_weights: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count > MAX_FEATURE_LAYERS {
            return Err(Error::invalid(
                "layer_count",
                format!("{} layers requested, {MAX_FEATURE_LAYERS} available", self.layer_count),
            ));
        }
        if !self.layer_weights.is_empty() && self.layer_weights.len() != self.layer_count {
            return Err(Error::invalid(
                "layer_weights",
                format!("{} weights for {} layers", self.layer_weights.len(), self.layer_count),
            ));
        }
        if self.layer_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("layer_weights", "weights must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn weight(&self, layer: usize) -> f64 {
        self.layer_weights.get(layer).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    /// One 3×3 conv + ELU per block, average pooling between blocks.
    Random(Vec<Conv>),
    /// VGG16 blocks of 3×3 conv + ReLU, max pooling between blocks.
    Vgg(Vec<Vec<Conv>>),
}

/// Fixed feature pyramid; layer `j` has spatial side `input / 2^j`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    spec: FeatureExtractorSpec,
    backbone: Backbone,
    dtype: DType,
}

const VGG_BLOCKS: [&[(usize, usize, usize)]; MAX_FEATURE_LAYERS] = [
    &[(0, 3, 64), (2, 64, 64)],
    &[(5, 64, 128), (7, 128, 128)],
    &[(10, 128, 256), (12, 256, 256), (14, 256, 256)],
    &[(17, 256, 512), (19, 512, 512), (21, 512, 512)],
    &[(24, 512, 512), (26, 512, 512), (28, 512, 512)],
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn random_channels(layer: usize) -> usize {
    (16 << layer).min(64)
}

impl FeatureExtractor {
    pub fn new(spec: &FeatureExtractorSpec, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let backbone = match &spec.kind {
            ExtractorKind::FrozenRandom { seed } => {
                let mut store = ParamStore::new(*seed, dtype, Device::Cpu);
                let mut c_in = 3;
                let mut convs = Vec::new();
                for j in 0..spec.layer_count {
                    let c = random_channels(j);
                    convs.push(Conv::new(&mut store, &format!("extractor.{j}"), c_in, c, 3, 1, 1, true)?.detached());
                    c_in = c;
                }
                Backbone::Random(convs)
            }
            ExtractorKind::PretrainedClassifier { weights } => {
                let unavailable = |reason: String| Error::PretrainedUnavailable {
                    path: weights.clone(),
                    reason,
                };
                if !weights.exists() {
                    return Err(unavailable("file not found".into()));
                }
                let tensors =
                    candle_core::safetensors::load(weights, &Device::Cpu).map_err(|e| unavailable(e.to_string()))?;
                let mut blocks = Vec::new();
                for block in VGG_BLOCKS.iter().take(spec.layer_count) {
                    let mut convs = Vec::new();
                    for &(index, c_in, c_out) in block.iter() {
                        let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                            let key = format!("features.{index}.{suffix}");
                            let t = tensors.get(&key).ok_or_else(|| unavailable(format!("missing {key}")))?;
                            if t.dims() != shape {
                                return Err(unavailable(format!("{key} has shape {:?}, expected {shape:?}", t.dims())));
                            }
                            Ok(t.to_dtype(dtype)?)
                        };
                        let w = fetch("weight", &[c_out, c_in, 3, 3])?;
                        let b = fetch("bias", &[c_out])?;
                        convs.push(Conv::from_tensors(w, Some(b), 1, 1));
                    }
                    blocks.push(convs);
                }
                Backbone::Vgg(blocks)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            backbone,
            dtype,
        })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        &self.spec
    }

    pub fn layer_count(&self) -> usize {
        self.spec.layer_count
    }

    /// Feature maps of a `(N, 3, H, W)` batch, shallowest first.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.spec.layer_count);
        match &self.backbone {
            Backbone::Random(convs) => {
                let mut h = x.clone();
                for (j, conv) in convs.iter().enumerate() {
                    if j > 0 {
                        h = h.avg_pool2d(2)?;
                    }
                    h = conv.forward(&h)?.elu(1.0)?;
                    out.push(h.clone());
                }
            }
            Backbone::Vgg(blocks) => {
                let mean = Tensor::new(&IMAGENET_MEAN, x.device())?.to_dtype(self.dtype)?.reshape((1, 3, 1, 1))?;
                let std = Tensor::new(&IMAGENET_STD, x.device())?.to_dtype(self.dtype)?.reshape((1, 3, 1, 1))?;
                let mut h = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
                for (j, block) in blocks.iter().enumerate() {
                    if j > 0 {
                        h = h.max_pool2d(2)?;
                    }
                    for conv in block {
                        h = conv.forward(&h)?.relu()?;
                    }
                    out.push(h.clone());
                }
            }
        }
        Ok(out)
    }

    /// Plain-image convenience wrapper around [`FeatureExtractor::features`].
    pub fn image_features(&self, image: &Image) -> Result<Vec<Tensor>> {
        self.features(&image.to_tensor(self.dtype, &Device::Cpu)?)
    }
}

/// `mean(|a − b|)` as a scalar tensor.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `mean((a − b)²)` as a scalar tensor.
pub fn mse_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Weighted sum over layers of the mean squared feature difference.
pub fn perceptual_tensor(extractor: &FeatureExtractor, target: &Tensor, predicted: &Tensor) -> Result<Tensor> {
    if target.dims() != predicted.dims() {
        return Err(Error::shape(format!("{:?}", target.dims()), format!("{:?}", predicted.dims())));
    }
    let zero = Tensor::zeros((), predicted.dtype(), predicted.device())?;
    if extractor.layer_count() == 0 {
        return Ok(zero);
    }
    let ft = extractor.features(&target.detach())?;
    let fp = extractor.features(predicted)?;
    let mut acc = zero;
    for (j, (a, b)) in ft.iter().zip(&fp).enumerate() {
        acc = (acc + (mse_mean(a, b)? * extractor.spec().weight(j))?)?;
    }
    Ok(acc)
}

/// Differentiable loss terms of one sample.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub probe: Tensor,
    pub image_l1: Tensor,
    pub perceptual: Tensor,
}

impl LossTerms {
    pub fn compute(
        extractor: &FeatureExtractor,
        probe: &Tensor,
        predicted_probe: &Tensor,
        target: &Tensor,
        relit: &Tensor,
    ) -> Result<Self> {
        Ok(Self {
            probe: l1_mean(probe, predicted_probe)?,
            image_l1: l1_mean(target, relit)?,
            perceptual: perceptual_tensor(extractor, target, relit)?,
        })
    }

    pub fn total(&self) -> Result<Tensor> {
        Ok(((&self.probe + &self.image_l1)? + &self.perceptual)?)
    }

    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown::new(scalar(&self.probe)?, scalar(&self.image_l1)?, scalar(&self.perceptual)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub probe: f64,
    pub image_l1: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(probe: f64, image_l1: f64, perceptual: f64) -> Self {
        Self {
            probe,
            image_l1,
            perceptual,
            total: probe + image_l1 + perceptual,
        }
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        [
            ("probe", self.probe),
            ("image_l1", self.image_l1),
            ("perceptual", self.perceptual),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    Ok(())
}

/// Mean absolute difference between two probes.
pub fn probe_loss(p: &LightProbe, p_hat: &LightProbe) -> Result<f64> {
    check_same(p.image(), p_hat.image())?;
    Ok(p.image().mean_abs_diff(p_hat.image()))
}

/// `(L1, perceptual)` between a target image and a prediction.
pub fn image_loss(target: &Image, predicted: &Image, extractor: &FeatureExtractor) -> Result<(f64, f64)> {
    check_same(target, predicted)?;
    let l1 = target.mean_abs_diff(predicted);
    let dtype = extractor.dtype;
    let t = target.to_tensor(dtype, &Device::Cpu)?;
    let p = predicted.to_tensor(dtype, &Device::Cpu)?;
    let perceptual = perceptual_tensor(extractor, &t, &p)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok((l1, perceptual))
}

pub fn total_loss(
    probe: &LightProbe,
    predicted_probe: &LightProbe,
    target: &Image,
    predicted: &Image,
    extractor: &FeatureExtractor,
) -> Result<LossBreakdown> {
    let p = probe_loss(probe, predicted_probe)?;
    let (l1, perceptual) = image_loss(target, predicted, extractor)?;
    Ok(LossBreakdown::new(p, l1, perceptual))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(size: usize, offset: f64) -> Image {
        Image::from_fn(size, size, |u, v| {
            let t = ((u * 7 + v * 3) % 11) as f64 / 20.0 + offset;
            [t, t * 0.5, 1.0 - t]
        })
    }

    #[test]
    fn probe_loss_basics() {
        let p = LightProbe::new(ramp(8, 0.1)).unwrap();
        assert_eq!(probe_loss(&p, &p).unwrap(), 0.0);
        let q = LightProbe::new(Image::filled(4, 4, 0.5)).unwrap();
        assert!(matches!(probe_loss(&p, &q), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_offset_on_raw_arrays() {
        let a = Tensor::new(&[0.2f64, 0.5, 0.9, 0.95], &Device::Cpu).unwrap();
        let b = (&a + 0.1).unwrap();
        let l = l1_mean(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_layers_is_pure_l1() {
        let ex = FeatureExtractor::new(&FeatureExtractorSpec::frozen_random(0, 0), DType::F64).unwrap();
        let (a, b) = (ramp(16, 0.0), ramp(16, 0.2));
        assert!(ex.image_features(&a).unwrap().is_empty());
        let (l1, perc) = image_loss(&a, &b, &ex).unwrap();
        assert_eq!(perc, 0.0);
        assert!((l1 - a.mean_abs_diff(&b)).abs() < 1e-15);
    }

    #[test]
    fn frozen_random_layout_and_determinism() {
        let spec = FeatureExtractorSpec::frozen_random(5, 4);
        let a = FeatureExtractor::new(&spec, DType::F64).unwrap();
        let b = FeatureExtractor::new(&spec, DType::F64).unwrap();
        let img = ramp(32, 0.05);
        let fa = a.image_features(&img).unwrap();
        let fb = b.image_features(&img).unwrap();
        for (j, (x, y)) in fa.iter().zip(&fb).enumerate() {
            assert_eq!(x.dims()[2], 32 >> j);
            assert_eq!(x.dims()[3], 32 >> j);
            assert_eq!(x.flatten_all().unwrap().to_vec1::<f64>().unwrap(), y.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        }
    }

    #[test]
    fn missing_pretrained_weights_advise_fallback() {
        let spec = FeatureExtractorSpec {
            kind: ExtractorKind::PretrainedClassifier {
                weights: "/nonexistent/vgg.safetensors".into(),
            },
            ..FeatureExtractorSpec::default()
        };
        let err = FeatureExtractor::new(&spec, DType::F32).unwrap_err();
        assert!(matches!(err, Error::PretrainedUnavailable { .. }));
        assert!(err.to_string().contains("frozen-random"));
    }

    #[test]
    fn invalid_specs() {
        assert!(FeatureExtractorSpec::frozen_random(0, 6).validate().is_err());
        let mut s = FeatureExtractorSpec::frozen_random(0, 2);
        s.layer_weights = vec![1.0];
        assert!(s.validate().is_err());
        s.layer_weights = vec![1.0, -1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let s = FeatureExtractorSpec::frozen_random(3, 2);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("frozen-random"));
        assert_eq!(serde_json::from_str::<FeatureExtractorSpec>(&json).unwrap(), s);
    }
}
