//! Review manifests, image alignment, stratified splits and shuffled
//! batching. The synthetic corpus generator lives in [`generator`].

pub mod generator;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::load_image;
use crate::model::{Model, ModelInput};
use crate::nn::derive_rng;

pub use generator::{generate_synthetic, sample_latent, GeneratorSpec, Latent};

const SPLIT_STREAM: u64 = 0x5350_4c49;
const EPOCH_STREAM: u64 = 0x4550_4f43;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewSample {
    pub id: String,
    pub text: String,
    pub image_path: Option<PathBuf>,
    /// 0 fake, 1 genuine.
    pub label: usize,
}

impl ReviewSample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: usize) -> Self {
        ReviewSample {
            id: id.into(),
            text: text.into(),
            image_path: None,
            label,
        }
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    id: String,
    text: String,
    label: String,
}

#[derive(Serialize)]
struct ManifestRowOut<'s> {
    id: &'s str,
    text: &'s str,
    label: usize,
}

/// Reads an `id,text,label` CSV. Fields may be quoted, with embedded
/// commas and doubled quotes.
pub fn read_manifest(path: &Path) -> Result<Vec<ReviewSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file)
}

pub fn parse_manifest(reader: impl std::io::Read) -> Result<Vec<ReviewSample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Manifest {
        line: 1,
        message: e.to_string(),
    })?;
    for col in ["id", "text", "label"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Manifest {
                line: 1,
                message: format!("missing column {col:?}"),
            });
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = out.len() as u64 + 2;
        if !valid_id(&row.id) {
            return Err(Error::Manifest {
                line,
                message: format!("id {:?} is not alphanumeric", row.id),
            });
        }
        let label = match row.label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Manifest {
                    line,
                    message: format!("label {other:?} is not 0 or 1"),
                })
            }
        };
        if !seen.insert(row.id.clone()) {
            return Err(Error::Manifest {
                line,
                message: format!("duplicate id {:?}", row.id),
            });
        }
        out.push(ReviewSample::new(row.id, row.text, label));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, samples: &[ReviewSample]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for s in samples {
        wtr.serialize(ManifestRowOut {
            id: &s.id,
            text: &s.text,
            label: s.label,
        })
        .map_err(|e| csv_io(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub samples: Vec<ReviewSample>,
    /// Ids without an image file (lenient mode only).
    pub dropped: Vec<String>,
    /// Image files in the directory that no sample refers to.
    pub surplus: usize,
}

/// Points every sample at `dir/<id>.<ext>`. Strict mode fails on the first
/// pass if any file is missing; lenient mode drops those samples.
pub fn align_images(
    samples: Vec<ReviewSample>,
    dir: &Path,
    extension: &str,
    strict: bool,
) -> Result<Alignment> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut present = HashSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some(extension) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                present.insert(stem.to_string());
            }
        }
    }
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| !present.contains(&s.id))
        .map(|s| s.id.clone())
        .collect();
    if strict && !missing.is_empty() {
        return Err(Error::Alignment(missing));
    }
    let referenced = samples.len() - missing.len();
    let kept = samples
        .into_iter()
        .filter(|s| present.contains(&s.id))
        .map(|mut s| {
            s.image_path = Some(dir.join(format!("{}.{extension}", s.id)));
            s
        })
        .collect();
    Ok(Alignment {
        samples: kept,
        dropped: missing,
        surplus: present.len() - referenced,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ReviewSample>,
    pub val: Vec<ReviewSample>,
    pub test: Vec<ReviewSample>,
    pub ratios: [f64; 3],
}

impl DatasetSplit {
    pub fn parts(&self) -> [(&'static str, &[ReviewSample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

pub fn class_counts(samples: &[ReviewSample]) -> [usize; 2] {
    let mut c = [0, 0];
    for s in samples {
        c[s.label] += 1;
    }
    c
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    Ok(())
}

/// Per class: shuffle with `seed`, then cut at `round(n * r_train)` and
/// `round(n * (r_train + r_val))`. Cuts are clamped so every split gets at
/// least one sample of each class. Within a split, samples keep their input
/// order.
pub fn stratified_split(
    samples: &[ReviewSample],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    validate_ratios(ratios)?;
    let mut assignment = vec![0u8; samples.len()];
    for class in 0..2 {
        let mut members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label == class)
            .collect();
        let n = members.len();
        if n < 3 {
            return Err(Error::Split(format!(
                "class {class} has {n} samples; at least 3 are needed for three splits"
            )));
        }
        members.shuffle(&mut derive_rng(seed, &[SPLIT_STREAM, class as u64]));
        let cut1 = ((n as f64 * ratios[0]).round() as usize).clamp(1, n - 2);
        let cut2 = ((n as f64 * (ratios[0] + ratios[1])).round() as usize).clamp(cut1 + 1, n - 1);
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = if pos < cut1 {
                0
            } else if pos < cut2 {
                1
            } else {
                2
            };
        }
    }
    let pick = |part: u8| -> Vec<ReviewSample> {
        samples
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == part)
            .map(|(s, _)| s.clone())
            .collect()
    };
    Ok(DatasetSplit {
        train: pick(0),
        val: pick(1),
        test: pick(2),
        ratios,
    })
}

/// Sample order for one epoch, a permutation keyed on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[EPOCH_STREAM, epoch as u64]));
    order
}

/// Batches of indices into a collection of `n` items, in the shuffled epoch
/// order. The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be at least 1".into()));
    }
    Ok(epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// The items of `samples` grouped into shuffled batches.
pub fn batch_iter<'s, S>(
    samples: &'s [S],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Vec<&'s S>> + 's> {
    let batches = batch_indices(samples.len(), batch_size, seed, epoch)?;
    Ok(batches
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &samples[i]).collect()))
}

/// A review preprocessed for one model: tokens and/or image tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub input: ModelInput<f32>,
    pub label: usize,
}

/// Tokenizes texts and loads images as the model's mode requires. Images are
/// decoded in parallel; the output keeps input order.
pub fn encode_samples(samples: &[ReviewSample], model: &Model) -> Result<Vec<EncodedSample>> {
    samples
        .par_iter()
        .map(|s| {
            let image = if model.mode().uses_image() {
                let path = s.image_path.as_ref().ok_or_else(|| {
                    Error::Alignment(vec![s.id.clone()])
                })?;
                Some(load_image(path)?)
            } else {
                None
            };
            Ok(EncodedSample {
                id: s.id.clone(),
                input: model.prepare(Some(&s.text), image.as_ref())?,
                label: s.label,
            })
        })
        .collect()
}

/// The three manifests of a corpus directory with images aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<ReviewSample>,
    pub val: Vec<ReviewSample>,
    pub test: Vec<ReviewSample>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[ReviewSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (train, val, test)"
            ))),
        }
    }
}

pub const IMAGE_DIR: &str = "images";
pub const IMAGE_EXT: &str = "ppm";

/// Loads `train.csv`, `val.csv`, `test.csv` from `dir` and aligns each with
/// `dir/images/<id>.ppm`.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let images = dir.join(IMAGE_DIR);
    let mut parts = HashMap::new();
    let mut all_ids = HashSet::new();
    for name in ["train", "val", "test"] {
        let samples = read_manifest(&dir.join(format!("{name}.csv")))?;
        for s in &samples {
            if !all_ids.insert(s.id.clone()) {
                return Err(Error::Split(format!("id {:?} appears in more than one split", s.id)));
            }
        }
        let aligned = align_images(samples, &images, IMAGE_EXT, true)?;
        parts.insert(name, aligned.samples);
    }
    Ok(Corpus {
        train: parts.remove("train").unwrap_or_default(),
        val: parts.remove("val").unwrap_or_default(),
        test: parts.remove("test").unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn balanced(n_per_class: usize) -> Vec<ReviewSample> {
        (0..2 * n_per_class)
            .map(|i| ReviewSample::new(format!("s{i}"), format!("text {i}"), i % 2))
            .collect()
    }

    #[test]
    fn parse_quoted_manifest() {
        let got = parse_manifest("id,text,label\nr1,\"great, fresh food\",1\n".as_bytes()).unwrap();
        assert_eq!(got, vec![ReviewSample::new("r1", "great, fresh food", 1)]);
        let got = parse_manifest("id,text,label\nr2,\"he said \"\"wow\"\"\",0\n".as_bytes()).unwrap();
        assert_eq!(got[0].text, "he said \"wow\"");
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let dup = "id,text,label\na,x,1\nb,y,0\na,z,1\n";
        match parse_manifest(dup.as_bytes()) {
            Err(Error::Manifest { line: 4, message }) => assert!(message.contains("\"a\"")),
            other => panic!("{other:?}"),
        }
        let bad = "id,text,label\na,x,2\n";
        assert!(matches!(parse_manifest(bad.as_bytes()), Err(Error::Manifest { line: 2, .. })));
        let missing = "id,body,label\na,x,1\n";
        assert!(matches!(parse_manifest(missing.as_bytes()), Err(Error::Manifest { line: 1, .. })));
        let bad_id = "id,text,label\na/b,x,1\n";
        assert!(matches!(parse_manifest(bad_id.as_bytes()), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let mut rng = derive_rng(3, &[]);
        let alphabet: Vec<char> = "ab ,\"'\n.xyzé".chars().collect();
        let samples: Vec<ReviewSample> = (0..200)
            .map(|i| {
                let len = rng.random_range(0..30);
                let text: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
                ReviewSample::new(format!("id{i}"), text, rng.random_range(0..2))
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&path, &samples).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), samples);
    }

    #[test]
    fn alignment_modes() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.ppm", "b.ppm", "extra.ppm", "notes.txt"] {
            fs::write(dir.path().join(name), b"").unwrap();
        }
        let samples = vec![ReviewSample::new("a", "x", 1), ReviewSample::new("b", "y", 0)];
        let al = align_images(samples.clone(), dir.path(), "ppm", true).unwrap();
        assert_eq!(al.samples.len(), 2);
        assert_eq!(al.samples[0].image_path, Some(dir.path().join("a.ppm")));
        assert_eq!(al.surplus, 1);

        fs::remove_file(dir.path().join("b.ppm")).unwrap();
        match align_images(samples.clone(), dir.path(), "ppm", true) {
            Err(Error::Alignment(ids)) => assert_eq!(ids, vec!["b".to_string()]),
            other => panic!("{other:?}"),
        }
        let al = align_images(samples, dir.path(), "ppm", false).unwrap();
        assert_eq!(al.samples.len(), 1);
        assert_eq!(al.dropped, vec!["b".to_string()]);
        assert_eq!(al.surplus, 1);
    }

    #[test]
    fn ten_sample_split() {
        let s = stratified_split(&balanced(5), [0.7, 0.15, 0.15], 0).unwrap();
        // 5 * 0.7 rounds to 3 in binary floating point (3.4999..)
        assert_eq!(class_counts(&s.train), [3, 3]);
        assert_eq!(class_counts(&s.val), [1, 1]);
        assert_eq!(class_counts(&s.test), [1, 1]);
    }

    #[test]
    fn thirds_split() {
        let s = stratified_split(&balanced(3), [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 9).unwrap();
        for (_, part) in s.parts() {
            assert_eq!(class_counts(part), [1, 1]);
        }
    }

    #[test]
    fn twenty_thousand_sample_split() {
        let s = stratified_split(&balanced(10_072), [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(s.train.len(), 12_086);
        assert!(s.val.len().abs_diff(4_029) <= 1);
        assert!(s.test.len().abs_diff(4_029) <= 1);
    }

    #[test]
    fn split_rejects_tiny_classes_and_bad_ratios() {
        let mut few = balanced(5);
        few.retain(|s| s.label == 1 || s.id == "s0" || s.id == "s2");
        assert!(matches!(stratified_split(&few, [0.6, 0.2, 0.2], 0), Err(Error::Split(_))));
        assert!(stratified_split(&balanced(5), [0.6, 0.2, 0.1], 0).is_err());
        assert!(stratified_split(&balanced(5), [0.8, 0.3, -0.1], 0).is_err());
    }

    #[test]
    fn batching() {
        let items: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = batch_iter(&items, 4, 1, 0).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let a: Vec<Vec<&usize>> = batch_iter(&items, 4, 1, 0).unwrap().collect();
        let b: Vec<Vec<&usize>> = batch_iter(&items, 4, 1, 0).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(epoch_order(10, 1, 0), epoch_order(10, 1, 1));
        assert!(batch_iter(&items, 0, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_balanced_partition(
            n0 in 3usize..60,
            n1 in 3usize..60,
            r0 in 0.2f64..0.8,
            frac in 0.1f64..0.9,
            seed in 0u64..1000,
        ) {
            let r1 = (1.0 - r0) * frac;
            let ratios = [r0, r1, 1.0 - r0 - r1];
            let samples: Vec<ReviewSample> = (0..n0 + n1)
                .map(|i| ReviewSample::new(format!("s{i}"), "", usize::from(i >= n0)))
                .collect();
            let s = stratified_split(&samples, ratios, seed).unwrap();
            let mut ids: Vec<&str> = s.parts().iter().flat_map(|(_, p)| p.iter().map(|x| x.id.as_str())).collect();
            ids.sort_unstable();
            let mut expected: Vec<&str> = samples.iter().map(|x| x.id.as_str()).collect();
            expected.sort_unstable();
            prop_assert_eq!(ids, expected);
            for (k, (_, part)) in s.parts().iter().enumerate() {
                let counts = class_counts(part);
                for (c, &n) in [n0, n1].iter().enumerate() {
                    // clamping only engages when some split would get under
                    // one sample of a class
                    let target = n as f64 * ratios[k];
                    prop_assert!(counts[c] >= 1);
                    if ratios.iter().all(|&r| n as f64 * r >= 1.5) {
                        prop_assert!((counts[c] as f64 - target).abs() <= 1.0 + 1e-9,
                            "split {} class {}: {} vs {}", k, c, counts[c], target);
                    }
                }
            }
        }
    }
}
