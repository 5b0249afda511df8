//! Procedural toy scenes with known albedo and normals, shaded analytically.
//!
//! Every scene is a shallow dome (normals tilt outward toward the borders)
//! carrying random smooth bumps, so lighting from one side brightens that
//! half of the image. Shading is Lambertian only, which makes the relit
//! ground truth exact.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{DatasetManifest, ManifestMeta};
use crate::probe::{probe_file_name, render_probe, ProbeSpec};

pub const ALBEDO_MIN: f64 = 0.2;
pub const ALBEDO_MAX: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub albedo: Image,
    /// Unit normals, row-major, `z > 0`.
    pub normals: Vec<[f64; 3]>,
    pub seed: u64,
}

impl SceneGeometry {
    pub fn size(&self) -> usize {
        self.albedo.width()
    }

    pub fn normal(&self, u: usize, v: usize) -> [f64; 3] {
        self.normals[v * self.size() + u]
    }

    /// Left-right mirror: albedo columns swap and normals flip their x part.
    pub fn mirror_horizontal(&self) -> SceneGeometry {
        let size = self.size();
        let mut normals = Vec::with_capacity(self.normals.len());
        for v in 0..size {
            for u in 0..size {
                let [x, y, z] = self.normal(size - 1 - u, v);
                normals.push([-x, y, z]);
            }
        }
        SceneGeometry {
            albedo: self.albedo.mirror_horizontal(),
            normals,
            seed: self.seed,
        }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    weight: [f64; 3],
}

struct Bump {
    cx: f64,
    cy: f64,
    sigma: f64,
    amplitude: f64,
}

/// Deterministic scene from `seed`; coordinates span `[-1, 1]` with y up.
pub fn generate_scene(seed: u64, size: usize) -> Result<SceneGeometry> {
    if size < 16 {
        return Err(Error::invalid("size", format!("{size} < 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let blobs: Vec<Blob> = (0..rng.random_range(8..14))
        .map(|_| Blob {
            cx: rng.random_range(-1.1..1.1),
            cy: rng.random_range(-1.1..1.1),
            sigma: rng.random_range(0.1..0.45),
            weight: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let dome = rng.random_range(0.35..0.6);
    let bumps: Vec<Bump> = (0..rng.random_range(5..10))
        .map(|_| {
            let sigma = rng.random_range(0.08..0.25);
            Bump {
                cx: rng.random_range(-0.9..0.9),
                cy: rng.random_range(-0.9..0.9),
                sigma,
                amplitude: rng.random_range(-0.6..0.6) * sigma,
            }
        })
        .collect();

    let coord = |i: usize| 2.0 * (i as f64 + 0.5) / size as f64 - 1.0;

    let mut raw = Vec::with_capacity(size * size * 3);
    let mut normals = Vec::with_capacity(size * size);
    for v in 0..size {
        let y = -coord(v);
        for u in 0..size {
            let x = coord(u);
            let mut color = [0.0; 3];
            for b in &blobs {
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                let g = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                for (c, w) in color.iter_mut().zip(b.weight) {
                    *c += w * g;
                }
            }
            raw.extend_from_slice(&color);

            // height h = dome·(1 − x² − y²) + Σ bumps; normal ∝ (−∂h/∂x, −∂h/∂y, 1)
            let mut hx = -2.0 * dome * x;
            let mut hy = -2.0 * dome * y;
            for b in &bumps {
                let (dx, dy) = (x - b.cx, y - b.cy);
                let s2 = b.sigma * b.sigma;
                let g = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
                hx -= g * dx / s2;
                hy -= g * dy / s2;
            }
            let norm = (hx * hx + hy * hy + 1.0).sqrt();
            normals.push([-hx / norm, -hy / norm, 1.0 / norm]);
        }
    }

    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let albedo: Vec<f64> = raw
        .iter()
        .map(|&r| {
            let t = if span > 0.0 { (r - lo) / span } else { 0.5 };
            (ALBEDO_MIN + t * (ALBEDO_MAX - ALBEDO_MIN)).clamp(ALBEDO_MIN, ALBEDO_MAX)
        })
        .collect();

    Ok(SceneGeometry {
        albedo: Image::new(size, size, albedo)?,
        normals,
        seed,
    })
}

/// Lambertian shading `clamp(albedo · (ambient + intensity · max(0, n·L)))`.
/// Specular terms of the spec are ignored.
pub fn shade_scene(scene: &SceneGeometry, spec: &ProbeSpec) -> Result<Image> {
    spec.validate()?;
    let size = scene.size();
    if scene.normals.len() != size * size {
        return Err(Error::shape(format!("{} normals", size * size), scene.normals.len()));
    }
    let l = spec.light_direction();
    Ok(Image::from_fn(size, size, |u, v| {
        let n = scene.normal(u, v);
        let shade = spec.ambient + spec.intensity * (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (scene.albedo.get(u, v, c) * shade).clamp(0.0, 1.0);
        }
        out
    }))
}

/// Illumination set used by the toy dataset: azimuths evenly spread over
/// `[-90°, 90°]` with a symmetric elevation pattern, so id 0 lights from the
/// left and id `n-1` from the right.
pub fn default_light_specs(n: usize, probe_size: usize) -> Vec<ProbeSpec> {
    const ELEVATIONS: [f64; 6] = [0.0, 35.0, -20.0, 50.0, 15.0, -35.0];
    (0..n)
        .map(|k| {
            let (azimuth, elevation) = if n == 1 {
                (0.0, 30.0)
            } else {
                let az = -90.0 + 180.0 * k as f64 / (n - 1) as f64;
                (az, ELEVATIONS[k.min(n - 1 - k) % ELEVATIONS.len()])
            };
            ProbeSpec {
                azimuth_deg: azimuth,
                elevation_deg: elevation,
                intensity: 0.85,
                size: probe_size,
                ..ProbeSpec::default()
            }
        })
        .collect()
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:03}")
}

/// Writes `n_scenes × specs.len()` images, one probe per spec and
/// `manifest.json` into `out_dir`. Scene `k` uses seed `seed + k`.
pub fn build_toy_dataset(
    n_scenes: usize,
    image_size: usize,
    specs: &[ProbeSpec],
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_scenes == 0 {
        return Err(Error::invalid("n_scenes", "must be at least 1"));
    }
    let first = specs
        .first()
        .ok_or_else(|| Error::invalid("specs", "at least one illumination is required"))?;
    if let Some(bad) = specs.iter().find(|s| s.size != first.size) {
        return Err(Error::invalid("specs", format!("mixed probe sizes {} and {}", first.size, bad.size)));
    }
    for s in specs {
        s.validate()?;
    }
    let out_dir = out_dir.as_ref();
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&out_dir.join("probes"))?;

    let mut manifest = DatasetManifest::new(
        ManifestMeta {
            image_size,
            probe_size: first.size,
            seed,
        },
        out_dir,
    );
    for (id, spec) in specs.iter().enumerate() {
        let rel = format!("probes/{}", probe_file_name(id as u32));
        render_probe(spec)?.with_id(id as u32).save(out_dir.join(&rel))?;
        manifest.probes.insert(id as u32, rel);
    }
    for k in 0..n_scenes {
        let scene = generate_scene(seed.wrapping_add(k as u64), image_size)?;
        let name = scene_name(k);
        mkdir(&out_dir.join("images").join(&name))?;
        let mut images = std::collections::BTreeMap::new();
        for (id, spec) in specs.iter().enumerate() {
            let rel = format!("images/{name}/light_{id:02}.png");
            shade_scene(&scene, spec)?.save_png(out_dir.join(&rel))?;
            images.insert(id as u32, rel);
        }
        manifest.scenes.insert(name, images);
    }
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
