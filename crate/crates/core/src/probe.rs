//! Light probes: analytic rendering, scene-agnostic averaging and persistence.
//!
//! Direction convention (camera coordinates, y up, z toward the viewer): a
//! light with azimuth `φ` and elevation `θ` has direction
//! `L = (cos θ · sin φ, sin θ, cos θ · cos φ)`. Azimuth 0 points at the viewer,
//! positive azimuth moves the light toward the image right, positive
//! elevation raises it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::DatasetManifest;

/// Parameters of a synthetic light probe: a shaded sphere seen head-on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub intensity: f64,
    pub ambient: f64,
    pub specular_strength: f64,
    pub specular_exponent: f64,
    pub size: usize,
    pub background: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            intensity: 1.0,
            ambient: 0.1,
            specular_strength: 0.0,
            specular_exponent: 32.0,
            size: 64,
            background: 0.02,
        }
    }
}

impl ProbeSpec {
    pub fn new(azimuth_deg: f64, elevation_deg: f64, intensity: f64) -> Self {
        Self {
            azimuth_deg,
            elevation_deg,
            intensity,
            ..Self::default()
        }
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("azimuth_deg", self.azimuth_deg),
            ("elevation_deg", self.elevation_deg),
            ("intensity", self.intensity),
            ("ambient", self.ambient),
            ("specular_strength", self.specular_strength),
            ("specular_exponent", self.specular_exponent),
            ("background", self.background),
        ];
        for (field, value) in finite {
            if !value.is_finite() {
                return Err(Error::invalid(field, format!("{value} is not finite")));
            }
        }
        if !(-180.0..180.0).contains(&self.azimuth_deg) {
            return Err(Error::invalid("azimuth_deg", format!("{} outside [-180, 180)", self.azimuth_deg)));
        }
        if !(-90.0..=90.0).contains(&self.elevation_deg) {
            return Err(Error::invalid("elevation_deg", format!("{} outside [-90, 90]", self.elevation_deg)));
        }
        if self.intensity < 0.0 {
            return Err(Error::invalid("intensity", format!("{} < 0", self.intensity)));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::invalid("ambient", format!("{} outside [0, 1]", self.ambient)));
        }
        if self.specular_strength < 0.0 {
            return Err(Error::invalid("specular_strength", format!("{} < 0", self.specular_strength)));
        }
        if self.specular_exponent <= 0.0 {
            return Err(Error::invalid("specular_exponent", format!("{} <= 0", self.specular_exponent)));
        }
        if self.size < 8 {
            return Err(Error::invalid("size", format!("{} < 8", self.size)));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::invalid("background", format!("{} outside [0, 1]", self.background)));
        }
        Ok(())
    }

    /// Unit vector pointing toward the light.
    pub fn light_direction(&self) -> [f64; 3] {
        let phi = self.azimuth_deg.to_radians();
        let theta = self.elevation_deg.to_radians();
        [theta.cos() * phi.sin(), theta.sin(), theta.cos() * phi.cos()]
    }
}

/// A square probe image with optional provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LightProbe {
    image: Image,
    pub spec: Option<ProbeSpec>,
    pub illumination_id: Option<u32>,
}

impl LightProbe {
    pub fn new(image: Image) -> Result<Self> {
        if image.height() != image.width() {
            return Err(Error::shape(
                "square probe",
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        if !image.in_unit_range() {
            return Err(Error::invalid("probe pixels", "values outside [0, 1]"));
        }
        Ok(Self {
            image,
            spec: None,
            illumination_id: None,
        })
    }

    pub fn with_id(mut self, id: u32) -> Self {
        self.illumination_id = Some(id);
        self
    }

    pub fn with_spec(mut self, spec: ProbeSpec) -> Self {
        self.spec = Some(spec);
        self
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn pixels(&self) -> &[f64] {
        self.image.data()
    }

    /// Writes `<path>` as 8-bit PNG and, when a spec is attached, a JSON
    /// sidecar next to it with the same stem.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.image.save_png(path)?;
        let sidecar = path.with_extension("json");
        match &self.spec {
            Some(spec) => {
                let json = serde_json::to_string_pretty(spec)?;
                std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
            }
            None => {
                if sidecar.exists() {
                    std::fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
                }
            }
        }
        Ok(())
    }

    /// Loads a probe PNG and its sidecar spec if one exists. The illumination
    /// id is recovered from a `probe_<id>.png` file name.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut probe = LightProbe::new(Image::load_png(path)?).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let sidecar = path.with_extension("json");
        if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let spec: ProbeSpec = serde_json::from_str(&text)?;
            spec.validate()?;
            probe.spec = Some(spec);
        }
        probe.illumination_id = probe_id_from_path(path);
        Ok(probe)
    }
}

fn probe_id_from_path(path: &Path) -> Option<u32> {
    path.file_stem()?
        .to_str()?
        .strip_prefix("probe_")?
        .parse()
        .ok()
}

/// File name used for the probe of an illumination id.
pub fn probe_file_name(id: u32) -> String {
    format!("probe_{id}.png")
}

/// Closed-form shaded sphere. See the module docs for the light direction.
pub fn render_probe(spec: &ProbeSpec) -> Result<LightProbe> {
    spec.validate()?;
    let size = spec.size;
    let c = (size as f64 - 1.0) / 2.0;
    let r = 0.45 * size as f64;
    let l = spec.light_direction();
    let half = [l[0], l[1], l[2] + 1.0];
    let half_norm = (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt();
    let half = if half_norm > 0.0 {
        [half[0] / half_norm, half[1] / half_norm, half[2] / half_norm]
    } else {
        [0.0; 3]
    };
    let image = Image::from_fn(size, size, |u, v| {
        let x = (u as f64 - c) / r;
        let y = (c - v as f64) / r;
        let rr = x * x + y * y;
        let value = if rr > 1.0 {
            spec.background
        } else {
            let n = [x, y, (1.0 - rr).sqrt()];
            let diffuse = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
            let mut value = spec.ambient + spec.intensity * diffuse;
            if spec.specular_strength > 0.0 {
                let spec_dot = (n[0] * half[0] + n[1] * half[1] + n[2] * half[2]).max(0.0);
                value += spec.specular_strength * spec_dot.powf(spec.specular_exponent);
            }
            value.clamp(0.0, 1.0)
        };
        [value; 3]
    });
    Ok(LightProbe {
        image,
        spec: Some(*spec),
        illumination_id: None,
    })
}

/// Per-pixel arithmetic mean. The illumination id survives only when every
/// input carries the same one; specs are dropped.
pub fn average_probes(probes: &[LightProbe]) -> Result<LightProbe> {
    let first = probes
        .first()
        .ok_or_else(|| Error::Empty("cannot average an empty probe list".into()))?;
    let size = first.size();
    if let Some(bad) = probes.iter().find(|p| p.size() != size) {
        return Err(Error::shape(format!("{size}x{size} probe"), format!("{0}x{0} probe", bad.size())));
    }
    let mut acc = vec![0.0f64; size * size * 3];
    for p in probes {
        for (a, v) in acc.iter_mut().zip(p.pixels()) {
            *a += v;
        }
    }
    let n = probes.len() as f64;
    for a in &mut acc {
        *a = (*a / n).clamp(0.0, 1.0);
    }
    let id = first.illumination_id.filter(|id| {
        probes.iter().all(|p| p.illumination_id == Some(*id))
    });
    Ok(LightProbe {
        image: Image::new(size, size, acc)?,
        spec: None,
        illumination_id: id,
    })
}

/// An ordered collection of equally sized probes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub name: String,
    probes: Vec<LightProbe>,
}

impl ProbeSet {
    pub fn new(name: impl Into<String>, probes: Vec<LightProbe>) -> Result<Self> {
        if let Some(first) = probes.first() {
            if let Some(bad) = probes.iter().find(|p| p.size() != first.size()) {
                return Err(Error::shape(
                    format!("probe size {}", first.size()),
                    format!("probe size {}", bad.size()),
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for id in probes.iter().filter_map(|p| p.illumination_id) {
            if !seen.insert(id) {
                return Err(Error::invalid("illumination_id", format!("duplicate id {id}")));
            }
        }
        Ok(Self {
            name: name.into(),
            probes,
        })
    }

    pub fn probes(&self) -> &[LightProbe] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn probe_size(&self) -> Option<usize> {
        self.probes.first().map(LightProbe::size)
    }

    /// Probe with the given illumination id.
    pub fn by_id(&self, id: u32) -> Option<&LightProbe> {
        self.probes.iter().find(|p| p.illumination_id == Some(id))
    }

    pub fn ids(&self) -> Vec<u32> {
        self.probes.iter().filter_map(|p| p.illumination_id).collect()
    }

    /// Writes `probe_<id>.png` (+ sidecar) for every probe; probes without an
    /// id are numbered by position.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.probes
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let id = p.illumination_id.unwrap_or(k as u32);
                let path = dir.join(probe_file_name(id));
                p.save(&path)?;
                Ok(path)
            })
            .collect()
    }

    /// Loads every `probe_<id>.png` in `dir`, ordered by id.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            if let Some(id) = probe_id_from_path(&path) {
                found.push((id, path));
            }
        }
        found.sort();
        let probes = found
            .iter()
            .map(|(_, path)| LightProbe::load(path))
            .collect::<Result<Vec<_>>>()?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        ProbeSet::new(name, probes)
    }
}

/// Averages the per-scene probes of every illumination id into one
/// scene-agnostic probe per id, ordered by id.
pub fn build_scene_agnostic_set(manifest: &DatasetManifest) -> Result<ProbeSet> {
    let ids = manifest.illumination_ids();
    let mut missing = Vec::new();
    for scene in manifest.scenes.keys() {
        for &id in &ids {
            let present = manifest
                .scene_probes
                .get(scene)
                .and_then(|m| m.get(&id))
                .map(|p| manifest.resolve(p).exists())
                .unwrap_or(false);
            if !present {
                missing.push((scene.clone(), id));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingProbes(missing));
    }
    let mut averaged = Vec::with_capacity(ids.len());
    for &id in &ids {
        let per_scene = manifest
            .scenes
            .keys()
            .map(|scene| LightProbe::load(manifest.resolve(&manifest.scene_probes[scene][&id])))
            .collect::<Result<Vec<_>>>()?;
        let mut avg = average_probes(&per_scene)?;
        avg.illumination_id = Some(id);
        averaged.push(avg);
    }
    ProbeSet::new("scene-agnostic", averaged)
}
