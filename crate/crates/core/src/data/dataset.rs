//! Stylized/real pair datasets, their on-disk manifest, and seeded batching.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::face::gen_face;
use super::image::{stack_images, Image};
use super::ppm::{load_ppm, save_ppm};
use super::stylize::{stylize, StyleSpec, StyleSplit};
use crate::error::{FdnnError, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One stylized face and its ground-truth real face.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: u64,
    pub style: String,
    pub style_split: StyleSplit,
    pub stylized: Image,
    pub real: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub split: Split,
    pub records: Vec<PairRecord>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self) -> BTreeSet<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Distinct style names in first-appearance order.
    pub fn style_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.records {
            if !names.contains(&r.style) {
                names.push(r.style.clone());
            }
        }
        names
    }

    /// Image side length, if every image is square and equally sized.
    pub fn image_size(&self) -> Result<usize> {
        let first = self
            .records
            .first()
            .ok_or_else(|| FdnnError::domain(format!("{} split is empty", self.split.as_str())))?;
        let s = first.real.height();
        for r in &self.records {
            for img in [&r.real, &r.stylized] {
                if img.height() != s || img.width() != s {
                    return Err(FdnnError::shape(format!(
                        "identity {} style {}: image {}x{} differs from {s}x{s}",
                        r.id,
                        r.style,
                        img.height(),
                        img.width()
                    )));
                }
            }
        }
        Ok(s)
    }
}

/// Which identities go where and how they are rendered.
#[derive(Clone, Debug)]
pub struct DatasetPlan {
    pub train_ids: Range<u64>,
    pub test_ids: Range<u64>,
    pub seen: Vec<StyleSpec>,
    pub unseen: Vec<StyleSpec>,
    pub image_size: usize,
    pub seed: u64,
}

impl DatasetPlan {
    fn validate(&self) -> Result<()> {
        if self.train_ids.is_empty() || self.test_ids.is_empty() {
            return Err(FdnnError::config("train and test identity counts must be at least 1"));
        }
        if self.train_ids.start < self.test_ids.end && self.test_ids.start < self.train_ids.end {
            return Err(FdnnError::config(format!(
                "train identities {:?} overlap test identities {:?}",
                self.train_ids, self.test_ids
            )));
        }
        if self.seen.is_empty() || self.unseen.is_empty() {
            return Err(FdnnError::config("seen and unseen style lists must be nonempty"));
        }
        let mut names = BTreeSet::new();
        for s in self.seen.iter().chain(&self.unseen) {
            s.validate()?;
            if !names.insert(&s.name) {
                return Err(FdnnError::config(format!("duplicate style name {:?}", s.name)));
            }
        }
        Ok(())
    }
}

/// Face seed of identity `id` under dataset seed `seed`.
pub fn identity_seed(seed: u64, id: u64) -> u64 {
    derive_seed(seed, id)
}

/// Train pairs use seen styles only; test pairs cover seen and unseen styles.
pub fn build_datasets(plan: &DatasetPlan) -> Result<(PairDataset, PairDataset)> {
    plan.validate()?;
    let make = |ids: Range<u64>, styles: Vec<&StyleSpec>, split: Split| -> Result<PairDataset> {
        let mut records = Vec::new();
        for id in ids {
            let real = gen_face(identity_seed(plan.seed, id), plan.image_size)?;
            for spec in &styles {
                let split_tag = if plan.seen.contains(spec) {
                    StyleSplit::Seen
                } else {
                    StyleSplit::Unseen
                };
                records.push(PairRecord {
                    id,
                    style: spec.name.clone(),
                    style_split: split_tag,
                    stylized: stylize(&real, spec)?,
                    real: real.clone(),
                });
            }
        }
        Ok(PairDataset { split, records })
    };
    let train = make(plan.train_ids.clone(), plan.seen.iter().collect(), Split::Train)?;
    let test = make(
        plan.test_ids.clone(),
        plan.seen.iter().chain(&plan.unseen).collect(),
        Split::Test,
    )?;
    Ok((train, test))
}

/// Identities `0..n_train` for training and `n_train..n_train+n_test` for testing.
pub fn make_dataset(
    n_train_ids: u64,
    n_test_ids: u64,
    seen: &[StyleSpec],
    unseen: &[StyleSpec],
    image_size: usize,
    seed: u64,
) -> Result<(PairDataset, PairDataset)> {
    build_datasets(&DatasetPlan {
        train_ids: 0..n_train_ids,
        test_ids: n_train_ids..n_train_ids + n_test_ids,
        seen: seen.to_vec(),
        unseen: unseen.to_vec(),
        image_size,
        seed,
    })
}

/// Aligned stylized/real batches.
#[derive(Clone, Debug)]
pub struct Batch {
    pub stylized: Tensor,
    pub real: Tensor,
    pub indices: Vec<usize>,
}

/// Walks one epoch of a dataset in an order fixed by (seed, epoch).
pub struct Batcher<'a> {
    dataset: &'a PairDataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl<'a> Batcher<'a> {
    pub fn new(dataset: &'a PairDataset, batch_size: usize, seed: u64, epoch: u32) -> Result<Self> {
        if batch_size == 0 {
            return Err(FdnnError::config("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
        order.shuffle(&mut rng);
        Ok(Batcher {
            dataset,
            order,
            pos: 0,
            batch_size,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Next batch, or `None` once the epoch is exhausted. The final batch may be short.
    pub fn next_batch(&mut self) -> Option<Result<Batch>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let recs: Vec<&PairRecord> = indices.iter().map(|&i| &self.dataset.records[i]).collect();
        let batch = stack_images(recs.iter().map(|r| &r.stylized)).and_then(|stylized| {
            Ok(Batch {
                stylized,
                real: stack_images(recs.iter().map(|r| &r.real))?,
                indices,
            })
        });
        Some(batch)
    }
}

impl Iterator for Batcher<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub style: String,
    pub split: Split,
    pub sf_path: String,
    pub rf_path: String,
}

/// Index of a dataset directory; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    pub styles: Vec<StyleSpec>,
    pub records: Vec<ManifestRecord>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| FdnnError::io(path, e))
}

/// Writes `train` and `test` as PPM files plus `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, train: &PairDataset, test: &PairDataset, styles: &[StyleSpec]) -> Result<Manifest> {
    let image_size = train.image_size()?;
    let mut records = Vec::new();
    for ds in [train, test] {
        let split = ds.split.as_str();
        for sub in [split.to_string(), format!("{split}/real")] {
            let d = dir.join(&sub);
            fs::create_dir_all(&d).map_err(|e| FdnnError::io(&d, e))?;
        }
        let mut written = BTreeSet::new();
        for r in &ds.records {
            let rf_path = format!("{split}/real/{}.ppm", r.id);
            if written.insert(r.id) {
                save_ppm(&r.real, dir.join(&rf_path))?;
            }
            let sf_path = format!("{split}/{}_{}.ppm", r.id, r.style);
            save_ppm(&r.stylized, dir.join(&sf_path))?;
            records.push(ManifestRecord {
                id: r.id,
                style: r.style.clone(),
                split: ds.split,
                sf_path,
                rf_path,
            });
        }
    }
    let manifest = Manifest {
        image_size,
        styles: styles.to_vec(),
        records,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FdnnError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads both splits listed in `dir/manifest.json`.
pub fn load_dataset(dir: &Path) -> Result<(PairDataset, PairDataset, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut train = PairDataset {
        split: Split::Train,
        records: Vec::new(),
    };
    let mut test = PairDataset {
        split: Split::Test,
        records: Vec::new(),
    };
    for r in &manifest.records {
        let style_split = manifest
            .styles
            .iter()
            .find(|s| s.name == r.style)
            .map_or(StyleSplit::Unseen, |s| s.split);
        let rec = PairRecord {
            id: r.id,
            style: r.style.clone(),
            style_split,
            stylized: load_ppm(dir.join(&r.sf_path))?,
            real: load_ppm(dir.join(&r.rf_path))?,
        };
        match r.split {
            Split::Train => train.records.push(rec),
            Split::Test => test.records.push(rec),
        }
    }
    let overlap: Vec<u64> = train.identities().intersection(&test.identities()).copied().collect();
    if !overlap.is_empty() {
        return Err(FdnnError::config(format!(
            "identities {overlap:?} appear in both train and test splits"
        )));
    }
    Ok((train, test, manifest))
}

/// Builds a manifest for user-supplied images laid out as
/// `dir/{train,test}/<id>_<style>.ppm` with ground truth in `<id>_real.ppm`
/// alongside. Styles named in `seen` are tagged seen, all others unseen.
pub fn ingest_directory(dir: &Path, seen: &[String]) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut style_names = BTreeSet::new();
    let mut image_size = None;
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.as_str());
        let mut names: Vec<PathBuf> = match fs::read_dir(&sub) {
            Ok(entries) => entries
                .map(|e| e.map(|e| e.path()).map_err(|err| FdnnError::io(&sub, err)))
                .collect::<Result<_>>()?,
            Err(e) => return Err(FdnnError::io(&sub, e)),
        };
        names.sort();
        for path in names {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
                continue;
            }
            let Some((id, style)) = stem.split_once('_') else {
                continue;
            };
            if style == "real" {
                continue;
            }
            let id: u64 = id
                .parse()
                .map_err(|_| FdnnError::config(format!("{}: identity must be an integer", path.display())))?;
            let rf = format!("{}/{id}_real.ppm", split.as_str());
            if !dir.join(&rf).exists() {
                return Err(FdnnError::config(format!(
                    "{}: ground truth {rf} is missing",
                    path.display()
                )));
            }
            if image_size.is_none() {
                image_size = Some(load_ppm(&path)?.height());
            }
            style_names.insert(style.to_string());
            records.push(ManifestRecord {
                id,
                style: style.to_string(),
                split,
                sf_path: format!("{}/{stem}.ppm", split.as_str()),
                rf_path: rf,
            });
        }
    }
    let image_size = image_size.ok_or_else(|| FdnnError::domain(format!("no images under {}", dir.display())))?;
    let styles = style_names
        .into_iter()
        .map(|name| {
            let split = if seen.contains(&name) {
                StyleSplit::Seen
            } else {
                StyleSplit::Unseen
            };
            StyleSpec::new(name, super::stylize::StyleKind::Identity, split)
        })
        .collect();
    let manifest = Manifest {
        image_size,
        styles,
        records,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stylize::{default_seen_styles, default_unseen_styles};
    use proptest::prelude::*;

    fn small(n_train: u64, n_test: u64) -> (PairDataset, PairDataset) {
        make_dataset(n_train, n_test, &default_seen_styles(), &default_unseen_styles(), 16, 5).unwrap()
    }

    #[test]
    fn counts() {
        let (train, test) = small(64, 20);
        assert_eq!(train.len(), 192);
        assert_eq!(test.len(), 100);
        assert!(train.identities().is_disjoint(&test.identities()));
        assert!(train.records.iter().all(|r| r.style_split == StyleSplit::Seen));
        let unseen = test
            .records
            .iter()
            .filter(|r| r.style_split == StyleSplit::Unseen)
            .count();
        assert_eq!(unseen, 40);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let plan = DatasetPlan {
            train_ids: 0..10,
            test_ids: 5..15,
            seen: default_seen_styles(),
            unseen: default_unseen_styles(),
            image_size: 16,
            seed: 0,
        };
        assert!(matches!(build_datasets(&plan), Err(FdnnError::Config(_))));
        assert!(make_dataset(0, 3, &default_seen_styles(), &default_unseen_styles(), 16, 0).is_err());
    }

    #[test]
    fn batch_partition() {
        let (train, _) = small(4, 1);
        let ten = PairDataset {
            split: Split::Train,
            records: train.records[..10].to_vec(),
        };
        let sizes: Vec<usize> = Batcher::new(&ten, 4, 1, 0)
            .unwrap()
            .map(|b| b.unwrap().indices.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn single_batch_covers_dataset() {
        let (train, _) = small(3, 1);
        let mut b = Batcher::new(&train, train.len(), 9, 2).unwrap();
        let batch = b.next_batch().unwrap().unwrap();
        assert!(b.next_batch().is_none());
        let mut idx = batch.indices.clone();
        idx.sort();
        assert_eq!(idx, (0..train.len()).collect::<Vec<_>>());
        // pairs stay aligned
        for (slot, &i) in batch.indices.iter().enumerate() {
            let n = 3 * 16 * 16;
            assert_eq!(
                &batch.real.data()[slot * n..(slot + 1) * n],
                train.records[i].real.tensor().data()
            );
            assert_eq!(
                &batch.stylized.data()[slot * n..(slot + 1) * n],
                train.records[i].stylized.tensor().data()
            );
        }
    }

    #[test]
    fn batch_order_is_seeded() {
        let (train, _) = small(8, 1);
        let a: Vec<usize> = Batcher::new(&train, 5, 3, 1).unwrap().order().to_vec();
        let b: Vec<usize> = Batcher::new(&train, 5, 3, 1).unwrap().order().to_vec();
        let c: Vec<usize> = Batcher::new(&train, 5, 3, 2).unwrap().order().to_vec();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = small(3, 2);
        let styles: Vec<StyleSpec> = default_seen_styles()
            .into_iter()
            .chain(default_unseen_styles())
            .collect();
        write_dataset(dir.path(), &train, &test, &styles).unwrap();
        let (tr, te, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 9 + 10);
        assert_eq!(tr.len(), 9);
        assert_eq!(te.len(), 10);
        for (a, b) in tr.records.iter().zip(&train.records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.style_split, b.style_split);
            assert_eq!(a.real, crate::data::ppm::quantize(&b.real));
        }
    }

    #[test]
    fn ingest_user_directory() {
        let dir = tempfile::tempdir().unwrap();
        for split in ["train", "test"] {
            fs::create_dir_all(dir.path().join(split)).unwrap();
        }
        let img = Image::filled(16, 16, [0.2, 0.4, 0.6]);
        for (split, id) in [("train", 1), ("test", 2)] {
            save_ppm(&img, dir.path().join(format!("{split}/{id}_real.ppm"))).unwrap();
            save_ppm(&img, dir.path().join(format!("{split}/{id}_sketch.ppm"))).unwrap();
            save_ppm(&img, dir.path().join(format!("{split}/{id}_oil.ppm"))).unwrap();
        }
        let m = ingest_directory(dir.path(), &["sketch".into()]).unwrap();
        assert_eq!(m.records.len(), 4);
        let (train, test, _) = load_dataset(dir.path()).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(
            test.records
                .iter()
                .filter(|r| r.style_split == StyleSplit::Seen)
                .count(),
            1
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn splits_are_disjoint(n_train in 1u64..5, n_test in 1u64..4, seed in any::<u64>()) {
            let (train, test) = make_dataset(
                n_train, n_test, &default_seen_styles()[..1], &default_unseen_styles()[..1], 16, seed,
            ).unwrap();
            prop_assert!(train.identities().is_disjoint(&test.identities()));
            prop_assert_eq!(train.len() as u64, n_train);
            prop_assert_eq!(test.len() as u64, 2 * n_test);
        }
    }
}
