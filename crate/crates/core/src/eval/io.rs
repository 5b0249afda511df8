//! Text and binary formats for keypoints, descriptors, matches and
//! homographies, the pair manifest, and JSON reports.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::estimate::estimate_homography;
use super::{
    baseline_detect_describe, correct_mask, homography_accuracy, homography_score, mma, mutual_nn_matches,
    precision_recall, random_homography, true_matches, warp_pair, Homography, Keypoint, Match, MatchSet, PairData,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::params::derive_seed;

/// Magic of the binary descriptor format: magic, u32 rows, u32 cols, then
/// rows × cols little-endian f32.
pub const DESCRIPTOR_MAGIC: &[u8; 8] = b"RLAGDESC";

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Numeric rows of a CSV file; blank lines and `#` comments are skipped.
fn parse_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", n + 1),
            })?;
        if width != 0 && row.len() != width {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("line {}: expected {width} fields, found {}", n + 1, row.len()),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `x,y,score` per line.
pub fn write_keypoints(path: impl AsRef<Path>, kpts: &[Keypoint]) -> Result<()> {
    let text: String = kpts.iter().map(|k| format!("{},{},{}\n", k.x, k.y, k.score)).collect();
    write_text(path.as_ref(), &text)
}

pub fn read_keypoints(path: impl AsRef<Path>) -> Result<Vec<Keypoint>> {
    Ok(parse_rows(path.as_ref(), 3)?
        .into_iter()
        .map(|r| Keypoint::new(r[0], r[1], r[2]))
        .collect())
}

/// `i1,i2,dist` per line.
pub fn write_matches(path: impl AsRef<Path>, matches: &[Match]) -> Result<()> {
    let text: String = matches.iter().map(|m| format!("{},{},{}\n", m.i1, m.i2, m.dist)).collect();
    write_text(path.as_ref(), &text)
}

pub fn read_matches(path: impl AsRef<Path>) -> Result<MatchSet> {
    let path = path.as_ref();
    parse_rows(path, 3)?
        .into_iter()
        .map(|r| {
            if r[0] < 0.0 || r[1] < 0.0 || r[0].fract() != 0.0 || r[1].fract() != 0.0 {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    reason: format!("match indices {} and {} are not non-negative integers", r[0], r[1]),
                });
            }
            Ok(Match {
                i1: r[0] as usize,
                i2: r[1] as usize,
                dist: r[2],
            })
        })
        .collect()
}

/// Nine whitespace-separated numbers, row-major.
pub fn write_homography(path: impl AsRef<Path>, h: &Homography) -> Result<()> {
    let text: String = h
        .matrix()
        .iter()
        .map(|r| format!("{} {} {}\n", r[0], r[1], r[2]))
        .collect();
    write_text(path.as_ref(), &text)
}

pub fn read_homography(path: impl AsRef<Path>) -> Result<Homography> {
    let path = path.as_ref();
    let vals = read_text(path)?
        .split_whitespace()
        .map(str::parse::<f64>)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if vals.len() != 9 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: format!("expected 9 numbers, found {}", vals.len()),
        });
    }
    Homography::new([[vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], [vals[6], vals[7], vals[8]]])
}

pub fn write_descriptors_csv(path: impl AsRef<Path>, desc: &[Vec<f64>]) -> Result<()> {
    let text: String = desc
        .iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    write_text(path.as_ref(), &text)
}

pub fn write_descriptors_bin(path: impl AsRef<Path>, desc: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let cols = desc.first().map_or(0, Vec::len);
    if let Some(bad) = desc.iter().find(|r| r.len() != cols) {
        return Err(Error::shape(format!("descriptor length {cols}"), bad.len()));
    }
    let mut buf = Vec::with_capacity(16 + desc.len() * cols * 4);
    buf.extend_from_slice(DESCRIPTOR_MAGIC);
    buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in desc.iter().flatten() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads either format, recognised by the binary magic.
pub fn read_descriptors(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(DESCRIPTOR_MAGIC) {
        let rows = parse_rows(path, 0)?;
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    reason: "rows have different lengths".into(),
                });
            }
        }
        return Ok(rows);
    }
    let bad = |reason: &str| Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + rows * cols * 4 {
        return Err(bad("payload size does not match the header"));
    }
    let vals: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(if cols == 0 {
        vec![Vec::new(); rows]
    } else {
        vals.chunks(cols).map(<[f64]>::to_vec).collect()
    })
}

/// One entry of a pair manifest. Paths are relative to the manifest.
///
/// Either images or keypoint + descriptor files must be given; with images
/// alone the baseline detector is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairEntry {
    pub name: String,
    pub image1: Option<String>,
    pub image2: Option<String>,
    pub keypoints1: Option<String>,
    pub keypoints2: Option<String>,
    pub descriptors1: Option<String>,
    pub descriptors2: Option<String>,
    pub matches: Option<String>,
    pub homography: String,
    pub homography_est: Option<String>,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub pairs: Vec<PairEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl PairManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            pairs: Vec::new(),
            root: root.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Self = serde_json::from_str(&read_text(path)?)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &serde_json::to_string_pretty(self)?)
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pixel_threshold: f64,
    pub corner_eps: f64,
    /// Thresholds of the MMA curve.
    pub thresholds: Vec<f64>,
    /// Detector budget when keypoints come from images.
    pub max_keypoints: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pixel_threshold: 3.0,
            corner_eps: 3.0,
            thresholds: (1..=10).map(f64::from).collect(),
            max_keypoints: 500,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_threshold > 0.0) || !(self.corner_eps > 0.0) || self.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::invalid("threshold", "thresholds must be positive"));
        }
        Ok(())
    }
}

/// A pair with everything the metrics need.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub name: String,
    pub data: PairData,
    pub h_est: Option<Homography>,
    pub width: usize,
    pub height: usize,
}

fn load_side(
    m: &PairManifest,
    image: &Option<String>,
    kpts: &Option<String>,
    desc: &Option<String>,
    max_kpts: usize,
) -> Result<(Vec<Keypoint>, Vec<Vec<f64>>, Option<(usize, usize)>)> {
    let img = image.as_ref().map(|p| Image::load_png(m.resolve(p))).transpose()?;
    let dims = img.as_ref().map(|i| (i.width(), i.height()));
    match (kpts, desc, img) {
        (Some(k), Some(d), _) => {
            let k = read_keypoints(m.resolve(k))?;
            let d = read_descriptors(m.resolve(d))?;
            if k.len() != d.len() {
                return Err(Error::shape(format!("{} descriptors", k.len()), d.len()));
            }
            Ok((k, d, dims))
        }
        (_, _, Some(img)) => {
            let (k, d) = baseline_detect_describe(&img, max_kpts);
            Ok((k, d, dims))
        }
        _ => Err(Error::invalid("pairs", "each side needs an image or keypoint and descriptor files")),
    }
}

pub fn load_pair(m: &PairManifest, e: &PairEntry, config: &EvalConfig) -> Result<LoadedPair> {
    let (kpts1, desc1, dims1) = load_side(m, &e.image1, &e.keypoints1, &e.descriptors1, config.max_keypoints)?;
    let (kpts2, desc2, _) = load_side(m, &e.image2, &e.keypoints2, &e.descriptors2, config.max_keypoints)?;
    let matches = match &e.matches {
        Some(p) => read_matches(m.resolve(p))?,
        None => mutual_nn_matches(&desc1, &desc2)?,
    };
    let (width, height) = match (e.width, e.height, dims1) {
        (Some(w), Some(h), _) => (w, h),
        (_, _, Some(d)) => d,
        _ => (0, 0),
    };
    Ok(LoadedPair {
        name: e.name.clone(),
        data: PairData {
            kpts1,
            kpts2,
            matches,
            h_true: read_homography(m.resolve(&e.homography))?,
        },
        h_est: e.homography_est.as_ref().map(|p| read_homography(m.resolve(p))).transpose()?,
        width,
        height,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Mma,
    Homography,
    Pr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub task: EvalTask,
    pub per_pair: Vec<serde_json::Value>,
    pub aggregate: serde_json::Value,
    pub config: EvalConfig,
}

/// Evaluates every pair of `pairs` for one task.
pub fn run_eval(pairs: &PairManifest, task: EvalTask, config: &EvalConfig) -> Result<Report> {
    config.validate()?;
    if pairs.pairs.is_empty() {
        return Err(Error::Empty("pair manifest lists no pairs".into()));
    }
    let loaded = pairs
        .pairs
        .iter()
        .map(|e| load_pair(pairs, e, config))
        .collect::<Result<Vec<_>>>()?;
    let t = config.pixel_threshold;
    let mut per_pair = Vec::new();
    let aggregate = match task {
        EvalTask::Mma => {
            let data: Vec<PairData> = loaded.iter().map(|p| p.data.clone()).collect();
            for p in &loaded {
                let mask = correct_mask(&p.data.matches, &p.data.kpts1, &p.data.kpts2, &p.data.h_true, t)?;
                per_pair.push(serde_json::json!({
                    "name": p.name,
                    "matches": p.data.matches.len(),
                    "correct": mask.count(),
                    "ratio": p.data.ratio(t)?,
                    "at_infinity": mask.at_infinity.len(),
                }));
            }
            let curve = mma(&data, &config.thresholds)?;
            serde_json::json!({
                "mma": mma(&data, &[t])?[0],
                "curve": config.thresholds.iter().zip(&curve).map(|(t, v)| serde_json::json!({"threshold": t, "mma": v})).collect::<Vec<_>>(),
            })
        }
        EvalTask::Homography => {
            let mut scores = Vec::new();
            for (k, p) in loaded.iter().enumerate() {
                if p.width == 0 || p.height == 0 {
                    return Err(Error::invalid("pairs", format!("{}: image size unknown", p.name)));
                }
                let (h_est, source) = match p.h_est {
                    Some(h) => (Some(h), "provided"),
                    None => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("ransac{k}")));
                        (estimate_homography(&p.data.kpts1, &p.data.kpts2, &p.data.matches, t, 1000, &mut rng), "dlt-ransac")
                    }
                };
                let score = match h_est {
                    Some(h) => homography_score(&p.data.h_true, &h, p.width, p.height, config.corner_eps)?,
                    None => super::CornerScore {
                        mean_error: f64::INFINITY,
                        correct: false,
                    },
                };
                per_pair.push(serde_json::json!({
                    "name": p.name,
                    "estimate": source,
                    "mean_corner_error": if score.mean_error.is_finite() { serde_json::json!(score.mean_error) } else { serde_json::Value::Null },
                    "correct": score.correct,
                }));
                scores.push(score);
            }
            serde_json::json!({ "accuracy": homography_accuracy(&scores)? })
        }
        EvalTask::Pr => {
            let (mut sp, mut sr) = (0.0, 0.0);
            for p in &loaded {
                let d = &p.data;
                let mask = correct_mask(&d.matches, &d.kpts1, &d.kpts2, &d.h_true, t)?;
                let truth = true_matches(&d.kpts1, &d.kpts2, &d.h_true, t);
                let (pr, rc) = precision_recall(&d.matches, &mask, truth.len())?;
                sp += pr;
                sr += rc;
                per_pair.push(serde_json::json!({
                    "name": p.name,
                    "matches": d.matches.len(),
                    "correct": mask.count(),
                    "true_matches": truth.len(),
                    "precision": pr,
                    "recall": rc,
                }));
            }
            let n = loaded.len() as f64;
            serde_json::json!({ "precision": sp / n, "recall": sr / n })
        }
    };
    Ok(Report {
        task,
        per_pair,
        aggregate,
        config: config.clone(),
    })
}

/// Writes a warped copy of every image together with its homography and a
/// pair manifest (`pairs.json`) into `out_dir`.
pub fn synthesize_pairs(images: &[PathBuf], out_dir: impl AsRef<Path>, seed: u64, strength: f64) -> Result<PairManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = PairManifest::new(out_dir);
    for (k, path) in images.iter().enumerate() {
        let img = Image::load_png(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("pair{k}")));
        let h = random_homography(&mut rng, img.width(), img.height(), strength)?;
        let warped = warp_pair(&img, &h, Some(&mut rng))?;
        let name = format!("pair_{k:03}");
        let (a, b, hf) = (format!("{name}_a.png"), format!("{name}_b.png"), format!("{name}_H.txt"));
        img.save_png(out_dir.join(&a))?;
        warped.image.save_png(out_dir.join(&b))?;
        write_homography(out_dir.join(&hf), &h)?;
        manifest.pairs.push(PairEntry {
            name,
            image1: Some(a),
            image2: Some(b),
            homography: hf,
            ..PairEntry::default()
        });
    }
    manifest.save(out_dir.join("pairs.json"))?;
    Ok(manifest)
}
