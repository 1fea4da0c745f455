//! Synthetic multimodal review corpus.
//!
//! Each review has three signals:
//!
//! * text: a phrase from its own class list, or with probability
//!   `text_flip` from the other class's list;
//! * image brightness: `N(mu_label, sigma)` clipped to `[0, 1]`;
//! * cross-modal: the image hue bucket matches the review's topic with
//!   probability `p_match` for genuine reviews and is uniform for fake ones.
//!
//! The topic keyword is in the text and the hue is in the image, so the
//! third signal is only visible to a model that sees both.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use super::{stratified_split, validate_ratios, write_manifest, DatasetSplit, ReviewSample, IMAGE_DIR, IMAGE_EXT};
use crate::error::{Error, Result};
use crate::fusion::{FAKE, GENUINE};
use crate::image::RawImage;
use crate::nn::derive_rng;

const LABEL_STREAM: u64 = 0x4c41_4245;
const SAMPLE_STREAM: u64 = 0x5341_4d50;

/// Topic name and the keyword that names it in a review.
pub const TOPICS: [(&str, &str); 6] = [
    ("food", "restaurant"),
    ("hotel", "hotel"),
    ("retail", "store"),
    ("travel", "airline"),
    ("beauty", "salon"),
    ("electronics", "laptop"),
];

const OPENERS: [&str; 4] = ["Visited the", "Tried the", "Went to the", "Stopped by the"];

/// Specific, checkable details.
const GENUINE_HEADS: [&str; 8] = [
    "the wait took",
    "our order took",
    "the refund took",
    "check in took",
    "the delivery took",
    "the line took",
    "the repair took",
    "the pickup took",
];
const GENUINE_TAILS: [&str; 5] = [
    "about ten minutes",
    "nearly twenty minutes",
    "roughly two hours",
    "exactly forty minutes",
    "almost three days",
];

/// Generic praise.
const FAKE_HEADS: [&str; 8] = [
    "absolutely amazing",
    "truly incredible",
    "simply perfect",
    "totally awesome",
    "utterly fantastic",
    "insanely good",
    "best ever",
    "super wonderful",
];
const FAKE_TAILS: [&str; 5] = [
    "must buy now!",
    "five stars always!!",
    "highly recommend everyone!",
    "life changing experience!",
    "never disappointed ever!",
];

const FILLER: [&str; 28] = [
    "it", "was", "a", "on", "weekday", "with", "family", "and", "friends", "then", "we", "went",
    "home", "after", "that", "so", "overall", "this", "time", "again", "maybe", "next", "week",
    "also", "noticed", "some", "people", "there",
];

pub const PHRASES_PER_CLASS: usize = GENUINE_HEADS.len() * GENUINE_TAILS.len();

pub fn phrase(class: usize, index: usize) -> String {
    let (heads, tails): (&[&str], &[&str]) = if class == GENUINE {
        (&GENUINE_HEADS, &GENUINE_TAILS)
    } else {
        (&FAKE_HEADS, &FAKE_TAILS)
    };
    format!("{} {}", heads[index / tails.len()], tails[index % tails.len()])
}

/// Brightness standard deviation that gives a threshold classifier on
/// brightness alone the accuracy `target`: `Phi(|mu1 - mu0| / (2 sigma)) =
/// target`.
pub fn sigma_for_accuracy(mu_fake: f64, mu_genuine: f64, target: f64) -> f64 {
    let z = StdNormal::standard().inverse_cdf(target);
    (mu_fake - mu_genuine).abs() / (2.0 * z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: usize,
    pub seed: u64,
    pub text_flip: f64,
    pub mu_fake: f64,
    pub mu_genuine: f64,
    pub sigma: f64,
    pub n_topics: usize,
    pub p_match: f64,
    pub image_side: usize,
    pub hue_amplitude: f64,
    pub pixel_noise: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub ratios: [f64; 3],
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let (mu_fake, mu_genuine) = (0.65, 0.35);
        GeneratorSpec {
            n: 2000,
            seed: 7,
            text_flip: 0.25,
            mu_fake,
            mu_genuine,
            sigma: sigma_for_accuracy(mu_fake, mu_genuine, 0.70),
            n_topics: 3,
            p_match: 0.95,
            image_side: 37,
            hue_amplitude: 0.15,
            pixel_noise: 0.05,
            min_words: 18,
            max_words: 28,
            ratios: [0.7, 0.15, 0.15],
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..0.5).contains(&self.text_flip) {
            return fail(format!("text_flip {} must be in [0, 0.5)", self.text_flip));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma {} must be positive", self.sigma));
        }
        if !(1..=TOPICS.len()).contains(&self.n_topics) {
            return fail(format!("n_topics must be between 1 and {}", TOPICS.len()));
        }
        let lo = 1.0 / self.n_topics as f64;
        if !(self.p_match >= lo && self.p_match <= 1.0) {
            return fail(format!("p_match {} must be in [1/n_topics, 1]", self.p_match));
        }
        if self.image_side == 0 || self.n == 0 {
            return fail("n and image_side must be positive".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return fail(format!(
                "word range {}..={} is empty",
                self.min_words, self.max_words
            ));
        }
        validate_ratios(self.ratios).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything random about one sample before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub label: usize,
    pub topic: usize,
    /// Class whose phrase list the text draws from.
    pub phrase_class: usize,
    pub phrase: usize,
    pub brightness: f64,
    pub hue_bucket: usize,
}

/// Draws the latent variables of one sample with a given label.
pub fn sample_latent<R: Rng + ?Sized>(spec: &GeneratorSpec, label: usize, rng: &mut R) -> Latent {
    let k = spec.n_topics;
    let topic = rng.random_range(0..k);
    let phrase_class = if rng.random::<f64>() < spec.text_flip {
        1 - label
    } else {
        label
    };
    let phrase = rng.random_range(0..PHRASES_PER_CLASS);
    let mu = if label == GENUINE { spec.mu_genuine } else { spec.mu_fake };
    let brightness = Normal::new(mu, spec.sigma)
        .expect("validated sigma")
        .sample(rng)
        .clamp(0.0, 1.0);
    let hue_bucket = if label == GENUINE && k > 1 {
        if rng.random::<f64>() < spec.p_match {
            topic
        } else {
            // uniform over the other buckets
            let other = rng.random_range(0..k - 1);
            if other >= topic {
                other + 1
            } else {
                other
            }
        }
    } else {
        rng.random_range(0..k)
    };
    Latent {
        label,
        topic,
        phrase_class,
        phrase,
        brightness,
        hue_bucket,
    }
}

pub fn render_text<R: Rng + ?Sized>(spec: &GeneratorSpec, latent: &Latent, rng: &mut R) -> String {
    let keyword = TOPICS[latent.topic].1;
    let opener = OPENERS[rng.random_range(0..OPENERS.len())];
    let phrase = phrase(latent.phrase_class, latent.phrase);
    let head = format!("{opener} {keyword}, {phrase}");
    let used = head.split_whitespace().count();
    let target = rng.random_range(spec.min_words..=spec.max_words);
    let filler: Vec<&str> = (used..target.max(used))
        .map(|_| FILLER[rng.random_range(0..FILLER.len())])
        .collect();
    if filler.is_empty() {
        format!("{head}.")
    } else {
        format!("{head}. {}.", filler.join(" "))
    }
}

/// Flat image at the latent brightness, tinted towards the hue bucket's
/// color and overlaid with per-pixel noise. The tint sums to zero across
/// channels, so mean pixel intensity tracks brightness only.
pub fn render_image<R: Rng + ?Sized>(spec: &GeneratorSpec, latent: &Latent, rng: &mut R) -> RawImage {
    let side = spec.image_side;
    let angle = 2.0 * PI * latent.hue_bucket as f64 / spec.n_topics as f64;
    let tint: [f64; 3] = std::array::from_fn(|c| {
        spec.hue_amplitude * (angle - 2.0 * PI * c as f64 / 3.0).cos()
    });
    let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut pixels = Vec::with_capacity(3 * side * side);
    for _ in 0..side * side {
        for t in tint {
            let v = (latent.brightness + t + noise.sample(rng)).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    RawImage::new(side, side, pixels).expect("side is positive")
}

/// Exactly `n / 2` labels of each class (one extra genuine when `n` is
/// odd), in shuffled order.
pub fn balanced_labels(n: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| if i % 2 == 0 { GENUINE } else { FAKE }).collect();
    labels.shuffle(&mut derive_rng(seed, &[LABEL_STREAM]));
    labels
}

/// One generated review with its latent variables and rendered image.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub sample: ReviewSample,
    pub latent: Latent,
    pub image: RawImage,
}

/// The `i`-th sample of a corpus, independent of every other index.
pub fn generate_sample(spec: &GeneratorSpec, i: usize, label: usize) -> GeneratedSample {
    let mut rng = derive_rng(spec.seed, &[SAMPLE_STREAM, i as u64]);
    let latent = sample_latent(spec, label, &mut rng);
    let text = render_text(spec, &latent, &mut rng);
    let image = render_image(spec, &latent, &mut rng);
    GeneratedSample {
        sample: ReviewSample::new(format!("r{:06}", i + 1), text, label),
        latent,
        image,
    }
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    generator: &'a GeneratorSpec,
    counts: SplitCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    /// `[fake, genuine]` per split.
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
}

impl SplitCounts {
    pub fn of(split: &DatasetSplit) -> Self {
        SplitCounts {
            train: super::class_counts(&split.train),
            val: super::class_counts(&split.val),
            test: super::class_counts(&split.test),
        }
    }
}

/// Writes `images/<id>.ppm`, `train.csv`, `val.csv`, `test.csv` and
/// `provenance.json` under `out_dir`.
pub fn generate_synthetic(spec: &GeneratorSpec, out_dir: &Path) -> Result<DatasetSplit> {
    spec.validate()?;
    let images = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let labels = balanced_labels(spec.n, spec.seed);
    let mut samples = Vec::with_capacity(spec.n);
    for (i, &label) in labels.iter().enumerate() {
        let g = generate_sample(spec, i, label);
        let path = images.join(format!("{}.{IMAGE_EXT}", g.sample.id));
        g.image.save(&path)?;
        let mut sample = g.sample;
        sample.image_path = Some(path);
        samples.push(sample);
    }
    let split = stratified_split(&samples, spec.ratios, spec.seed)?;
    for (name, part) in split.parts() {
        write_manifest(&out_dir.join(format!("{name}.csv")), part)?;
    }
    let provenance = Provenance {
        generator: spec,
        counts: SplitCounts::of(&split),
    };
    let path = out_dir.join("provenance.json");
    let body = serde_json::to_string_pretty(&provenance).expect("plain data serializes");
    fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(split)
}
