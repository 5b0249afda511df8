//! Offline relit-variant generation and per-access variant selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::params::derive_seed;
use crate::model::{LightingCode, RelightModel};
use crate::probe::ProbeSet;

pub const POOL_FILE: &str = "pool.json";

/// Image id → variant paths; index 0 is the original image.
///
/// Relative entries are resolved against the directory holding the index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantPool {
    pub entries: BTreeMap<String, Vec<String>>,
    #[serde(skip)]
    root: PathBuf,
}

impl VariantPool {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            entries: BTreeMap::new(),
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &str) -> PathBuf {
        self.root.join(entry)
    }

    pub fn variants(&self, id: &str) -> Result<&[String]> {
        self.entries
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Every list non-empty and every file present.
    pub fn validate(&self) -> Result<()> {
        for (id, list) in &self.entries {
            if list.is_empty() {
                return Err(Error::invalid("pool", format!("{id} has no variants")));
            }
            if let Some(missing) = list.iter().find(|e| !self.resolve(e).exists()) {
                return Err(Error::invalid("pool", format!("{id}: {missing} does not exist")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Reads an index; its directory becomes the resolution root.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pool: Self = serde_json::from_str(&text)?;
        pool.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(pool)
    }
}

pub fn variant_file_name(stem: &str, k: usize) -> String {
    format!("{stem}__v{k}.png")
}

#[derive(Debug)]
pub struct AugmentReport {
    pub pool: VariantPool,
    /// `(file name, reason)` for inputs that could not be processed.
    pub failures: Vec<(String, String)>,
    pub written: usize,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn relight_one(model: &RelightModel, codes: &[LightingCode], path: &Path) -> Result<Vec<Image>> {
    let original = Image::load_png(path)?;
    let s = model.config().input_size;
    let input = if original.height() == s && original.width() == s {
        original.clone()
    } else {
        original.resize(s, s)
    };
    let (encoded, _) = model.encode(&input)?;
    codes
        .iter()
        .map(|code| {
            let out = model.relight_with_code(&encoded, code)?;
            Ok(if out.same_shape(&original) {
                out
            } else {
                out.resize(original.height(), original.width())
            })
        })
        .collect()
}

/// Relights every PNG of `images_dir` under every probe of `probes`.
///
/// Variant `k` (1-based, in probe id order) of `name.png` is written as
/// `name__v<k>.png`, so pool index `k` is that variant and index 0 is the
/// original. Images that fail to decode are reported and skipped.
pub fn relight_dataset(
    model: &RelightModel,
    images_dir: impl AsRef<Path>,
    probes: &ProbeSet,
    out_dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<AugmentReport> {
    let (images_dir, out_dir) = (images_dir.as_ref(), out_dir.as_ref());
    if probes.is_empty() {
        return Err(Error::Empty("probe set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let inputs = list_pngs(images_dir)?;
    let pool_path = out_dir.join(POOL_FILE);
    if !overwrite && pool_path.exists() {
        return Err(Error::invalid("out", format!("{} exists; pass overwrite to replace it", pool_path.display())));
    }
    let codes = probes
        .probes()
        .iter()
        .map(|p| model.encode_probe(p))
        .collect::<Result<Vec<_>>>()?;
    let images_abs = std::fs::canonicalize(images_dir).map_err(|e| Error::io(images_dir, e))?;

    let mut pool = VariantPool::new(out_dir);
    let mut failures = Vec::new();
    let mut written = 0;
    for path in inputs {
        let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let variants = match relight_one(model, &codes, &path) {
            Ok(v) => v,
            Err(e) => {
                failures.push((file, e.to_string()));
                continue;
            }
        };
        let mut list = vec![images_abs.join(&file).to_string_lossy().into_owned()];
        for (k, img) in variants.iter().enumerate() {
            let name = variant_file_name(&stem, k + 1);
            let target = out_dir.join(&name);
            if !overwrite && target.exists() {
                return Err(Error::invalid("out", format!("{} exists; pass overwrite to replace it", target.display())));
            }
            img.save_png(&target)?;
            written += 1;
            list.push(name);
        }
        pool.entries.insert(stem, list);
    }
    pool.save(&pool_path)?;
    Ok(AugmentReport {
        pool,
        failures,
        written,
    })
}

/// Loads the model checkpoint and probe directory, then runs
/// [`relight_dataset`].
pub fn relight_dataset_from_files(
    ckpt: impl AsRef<Path>,
    images_dir: impl AsRef<Path>,
    probes_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<AugmentReport> {
    let model = RelightModel::load(ckpt)?;
    let probes = ProbeSet::load_dir(probes_dir)?;
    relight_dataset(&model, images_dir, &probes, out_dir, overwrite)
}

/// Independent stream seed for one image.
pub fn image_seed(global_seed: u64, image_id: &str) -> u64 {
    derive_seed(global_seed, image_id)
}

/// Stream seed for one epoch of [`wrap_epoch`].
pub fn epoch_seed(global_seed: u64, epoch: u64) -> u64 {
    derive_seed(global_seed, &format!("augment-epoch{epoch}"))
}

/// Uniform pick from an image's variant list.
pub fn select_variant(pool: &VariantPool, image_id: &str, rng: &mut impl Rng) -> Result<PathBuf> {
    let list = pool.variants(image_id)?;
    if list.is_empty() {
        return Err(Error::Empty(format!("{image_id} has no variants")));
    }
    Ok(pool.resolve(&list[rng.random_range(0..list.len())]))
}

/// One selected variant per id of `order`, in that order.
pub fn wrap_epoch<'a, R: Rng>(
    pool: &'a VariantPool,
    order: &'a [String],
    rng: &'a mut R,
) -> impl Iterator<Item = Result<PathBuf>> + 'a {
    order.iter().map(move |id| select_variant(pool, id, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(sizes: &[usize]) -> VariantPool {
        let mut p = VariantPool::new("/data");
        for (i, &n) in sizes.iter().enumerate() {
            p.entries.insert(format!("img{i}"), (0..n).map(|k| format!("img{i}__v{k}.png")).collect());
        }
        p
    }

    #[test]
    fn singleton_pool_always_returns_it() {
        let p = pool(&[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(select_variant(&p, "img0", &mut rng).unwrap(), PathBuf::from("/data/img0__v0.png"));
        }
        assert!(matches!(select_variant(&p, "nope", &mut rng), Err(Error::UnknownId(_))));
    }

    #[test]
    fn singleton_lists_preserve_order() {
        let p = pool(&[1, 1, 1]);
        let order: Vec<String> = ["img2", "img0", "img1"].iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let got: Vec<PathBuf> = wrap_epoch(&p, &order, &mut rng).collect::<Result<_>>().unwrap();
        let want: Vec<PathBuf> = order.iter().map(|id| PathBuf::from(format!("/data/{id}__v0.png"))).collect();
        assert_eq!(got, want);
        assert_eq!(wrap_epoch(&p, &[], &mut rng).count(), 0);
    }

    #[test]
    fn index_json_roundtrip() {
        let p = pool(&[3, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(POOL_FILE);
        p.save(&path).unwrap();
        let back = VariantPool::load(&path).unwrap();
        assert_eq!(back.entries, p.entries);
        assert_eq!(back.root(), dir.path());
    }
}
