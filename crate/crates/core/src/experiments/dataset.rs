//! Patch datasets with source-disjoint train/test splits.
//!
//! Every image is manipulated as a whole and stored back to 8 bits; pristine
//! and manipulated patches are then cut at the same origins of the pristine
//! image's non-overlapping grid.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, GrayImage};
use crate::error::{Error, Result};
use crate::image::{patch_origins, Origin, Plane, DEFAULT_PATCH_SIZE};
use crate::manipulate::ManipulationSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Fraction of source groups used for training.
    pub split_fraction: f64,
    pub patch_size: usize,
    /// Patches drawn per image from its grid; 0 keeps them all.
    pub patches_per_image: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            split_fraction: 2.0 / 3.0,
            patch_size: DEFAULT_PATCH_SIZE,
            patches_per_image: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub group: usize,
    pub image: usize,
    pub origin: Origin,
    /// 0 pristine; `1 + i` for manipulation `i` of [`Dataset::specs`].
    pub class: usize,
    pub split: Split,
}

impl PatchRecord {
    pub fn binary_label(&self) -> usize {
        usize::from(self.class > 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub specs: Vec<ManipulationSpec>,
    pub patch_size: usize,
    pub group_names: Vec<String>,
    pub train_groups: Vec<usize>,
    pub test_groups: Vec<usize>,
    pub records: Vec<PatchRecord>,
    pub patches: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patch(&self, i: usize) -> Plane {
        let s = self.patch_size;
        Plane::new(s, s, self.patches[i].iter().map(|&v| f64::from(v)).collect()).expect("stored patches are valid")
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == split).collect()
    }
}

/// Splits group indices: `round(f * G)` groups, at least one on each side,
/// chosen by a seeded shuffle. Returned lists are sorted.
pub fn split_groups(groups: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if groups < 2 {
        return Err(Error::Dataset(format!("need at least two source groups, got {groups}")));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "split fraction {fraction} outside [0, 1]"
        )));
    }
    let n_train = ((fraction * groups as f64).round() as usize).clamp(1, groups - 1);
    let mut order: Vec<usize> = (0..groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn cut(img: &GrayImage, o: Origin, size: usize) -> Vec<u8> {
    (0..size)
        .flat_map(|y| {
            let start = (o.y + y) * img.width + o.x;
            img.data[start..start + size].iter().copied()
        })
        .collect()
}

/// Builds pristine/manipulated patch pairs for a single manipulation.
pub fn build_dataset(corpus: &Corpus, spec: &ManipulationSpec, cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    build_dataset_multi(corpus, std::slice::from_ref(spec), true, cfg, seed)
}

/// Builds patches for several manipulations of every image, optionally with
/// the pristine patches. Noise seeds differ per image and manipulation.
pub fn build_dataset_multi(
    corpus: &Corpus,
    specs: &[ManipulationSpec],
    include_pristine: bool,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Dataset> {
    corpus.check()?;
    if specs.is_empty() {
        return Err(Error::InvalidParameter("no manipulation given".into()));
    }
    if cfg.patch_size < crate::descriptor::MIN_PATCH_SIDE {
        return Err(Error::InvalidParameter(format!(
            "patch size {} too small",
            cfg.patch_size
        )));
    }
    let (train_groups, test_groups) = split_groups(corpus.groups.len(), cfg.split_fraction, seed)?;

    let jobs: Vec<(usize, usize)> = corpus
        .groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| (0..grp.images.len()).map(move |i| (g, i)))
        .collect();

    let per_image = jobs
        .par_iter()
        .enumerate()
        .map(|(job, &(g, i))| -> Result<Vec<(PatchRecord, Vec<u8>)>> {
            let img = &corpus.groups[g].images[i];
            let split = if train_groups.contains(&g) {
                Split::Train
            } else {
                Split::Test
            };
            let mut origins = match patch_origins(img.width, img.height, cfg.patch_size, cfg.patch_size) {
                Ok(o) => o,
                Err(_) => return Ok(Vec::new()),
            };
            let image_seed = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(job as u64);
            if cfg.patches_per_image > 0 && origins.len() > cfg.patches_per_image {
                let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
                let mut chosen: Vec<Origin> = origins
                    .choose_multiple(&mut rng, cfg.patches_per_image)
                    .copied()
                    .collect();
                chosen.sort_by_key(|o| (o.y, o.x));
                origins = chosen;
            }
            let pristine = img.to_plane();
            let mut manipulated = Vec::with_capacity(specs.len());
            for (m, spec) in specs.iter().enumerate() {
                let s =
                    spec.with_seed(spec.seed ^ image_seed.wrapping_add(m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                manipulated.push(GrayImage::from_plane(&s.apply(&pristine)?));
            }
            let mut out = Vec::new();
            for &o in &origins {
                let fits = manipulated
                    .iter()
                    .all(|mi| o.x + cfg.patch_size <= mi.width && o.y + cfg.patch_size <= mi.height);
                if !fits {
                    continue;
                }
                let rec = |class| PatchRecord {
                    group: g,
                    image: i,
                    origin: o,
                    class,
                    split,
                };
                if include_pristine {
                    out.push((rec(0), cut(img, o, cfg.patch_size)));
                }
                for (m, mi) in manipulated.iter().enumerate() {
                    out.push((rec(m + 1), cut(mi, o, cfg.patch_size)));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let (records, patches): (Vec<_>, Vec<_>) = per_image.into_iter().flatten().unzip();
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "no image holds a {0}x{0} patch",
            cfg.patch_size
        )));
    }
    Ok(Dataset {
        specs: specs.to_vec(),
        patch_size: cfg.patch_size,
        group_names: corpus.groups.iter().map(|g| g.name.clone()).collect(),
        train_groups,
        test_groups,
        records,
        patches,
    })
}

const INDEX_HEADER: &str = "# srmnet-dataset v1";

/// Writes `index.tsv` (metadata and one row per patch) and `patches.u8`
/// (all patches, row-major, concatenated in index order).
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut idx = String::new();
    let specs: Vec<String> = ds.specs.iter().map(|s| format!("{s}@{}", s.seed)).collect();
    let _ = writeln!(idx, "{INDEX_HEADER}");
    let _ = writeln!(idx, "# patch_size\t{}", ds.patch_size);
    let _ = writeln!(idx, "# specs\t{}", specs.join(","));
    let _ = writeln!(idx, "# groups\t{}", ds.group_names.join(","));
    let list = |v: &[usize]| v.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(idx, "# train_groups\t{}", list(&ds.train_groups));
    let _ = writeln!(idx, "# test_groups\t{}", list(&ds.test_groups));
    let _ = writeln!(idx, "id\tgroup\timage\tx\ty\tclass\tsplit");
    for (i, r) in ds.records.iter().enumerate() {
        let split = match r.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let _ = writeln!(
            idx,
            "{i}\t{}\t{}\t{}\t{}\t{}\t{split}",
            r.group, r.image, r.origin.x, r.origin.y, r.class
        );
    }
    let p = dir.join("index.tsv");
    std::fs::write(&p, idx).map_err(|e| Error::io(&p, e))?;
    let blob: Vec<u8> = ds.patches.concat();
    let p = dir.join("patches.u8");
    std::fs::write(&p, blob).map_err(|e| Error::io(&p, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ip = dir.join("index.tsv");
    let text = std::fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
    let bad = |r: String| Error::format("dataset index", r);
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut meta = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    for line in lines {
        if let Some(m) = line.strip_prefix("# ") {
            let (k, v) = m
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        } else if !line.starts_with("id\t") && !line.is_empty() {
            rows.push(line);
        }
    }
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
    let patch_size: usize = get("patch_size")?.parse().map_err(|_| bad("bad patch size".into()))?;
    let specs = get("specs")?
        .split(',')
        .map(|s| {
            let (spec, seed) = s.split_once('@').ok_or_else(|| bad(format!("bad spec {s:?}")))?;
            let seed: u64 = seed.parse().map_err(|_| bad(format!("bad seed in {s:?}")))?;
            Ok(spec.parse::<ManipulationSpec>()?.with_seed(seed))
        })
        .collect::<Result<Vec<_>>>()?;
    let groups_list = |k: &str| -> Result<Vec<usize>> {
        let v = get(k)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|g| g.parse().map_err(|_| bad(format!("bad group {g:?}"))))
            .collect()
    };
    let train_groups = groups_list("train_groups")?;
    let test_groups = groups_list("test_groups")?;
    let group_names: Vec<String> = get("groups")?.split(',').map(String::from).collect();
    let mut records = Vec::with_capacity(rows.len());
    for (n, line) in rows.iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(format!("row {n} has {} fields", f.len())));
        }
        let num =
            |i: usize| -> Result<usize> { f[i].parse().map_err(|_| bad(format!("row {n}: bad field {:?}", f[i]))) };
        let split = match f[6] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("row {n}: unknown split {other:?}"))),
        };
        records.push(PatchRecord {
            group: num(1)?,
            image: num(2)?,
            origin: Origin { x: num(3)?, y: num(4)? },
            class: num(5)?,
            split,
        });
    }
    let bp = dir.join("patches.u8");
    let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let n = patch_size * patch_size;
    if blob.len() != n * records.len() {
        return Err(bad(format!(
            "{} bytes of patches for {} records of {n}",
            blob.len(),
            records.len()
        )));
    }
    let patches = blob.chunks_exact(n).map(<[u8]>::to_vec).collect();
    Ok(Dataset {
        specs,
        patch_size,
        group_names,
        train_groups,
        test_groups,
        records,
        patches,
    })
}
