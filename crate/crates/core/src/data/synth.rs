//! Synthetic paired data: one pixel prototype per concept, Gaussian pixel
//! noise, and captions drawn from several phrasings and noun synonyms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassDataset, ImageTextPair, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NOUNS: [(&str, &str); 16] = [
    ("boat", "ship"),
    ("car", "automobile"),
    ("dog", "puppy"),
    ("cat", "kitten"),
    ("house", "cottage"),
    ("tree", "oak"),
    ("bird", "sparrow"),
    ("flower", "blossom"),
    ("horse", "pony"),
    ("plane", "aircraft"),
    ("fish", "trout"),
    ("chair", "seat"),
    ("cup", "mug"),
    ("clock", "watch"),
    ("lamp", "lantern"),
    ("shoe", "sneaker"),
];

const PHRASINGS: [&str; 5] = [
    "a photo of {} object",
    "a picture of a {}",
    "an image showing the {}",
    "this is a photo of a {}",
    "a {} in the scene",
];

/// Fraction of each concept's samples that go to training.
const TRAIN_FRACTION: f64 = 0.8;
/// Default per-pixel amplitude of a concept's ±1 pattern around mid-gray.
pub const PATTERN_AMPLITUDE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_concepts: usize,
    pub pairs_per_concept: usize,
    /// Images are `channels × image_size × image_size`.
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Prototype pixels are `0.5 ± pattern_amplitude`.
    #[serde(default = "default_amplitude")]
    pub pattern_amplitude: f64,
}

fn default_channels() -> usize {
    3
}

fn default_amplitude() -> f64 {
    PATTERN_AMPLITUDE
}

impl SynthSpec {
    /// 8 concepts × 250 pairs of 3×16×16 images, noise 0.05, seed 7.
    pub fn benchmark() -> Self {
        SynthSpec {
            num_concepts: 8,
            pairs_per_concept: 250,
            image_size: 16,
            channels: 3,
            noise_sigma: 0.05,
            seed: 7,
            pattern_amplitude: PATTERN_AMPLITUDE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 || self.pairs_per_concept == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic data sizes must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=0.5).contains(&self.pattern_amplitude) {
            return Err(Error::Config(format!(
                "pattern_amplitude must lie in [0, 0.5], got {}",
                self.pattern_amplitude
            )));
        }
        Ok(())
    }

    pub fn concept_names(&self) -> Vec<(String, String)> {
        (0..self.num_concepts)
            .map(|k| {
                let (a, b) = NOUNS[k % NOUNS.len()];
                match k / NOUNS.len() {
                    0 => (a.to_string(), b.to_string()),
                    r => (format!("{a}{r}"), format!("{b}{r}")),
                }
            })
            .collect()
    }
}

/// Generated training pairs plus a held-out labeled split.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: Vec<ImageTextPair>,
    pub train_labels: Vec<usize>,
    pub eval: ClassDataset,
    pub prototypes: Vec<Tensor<f32>>,
}

impl SynthData {
    pub fn classes(&self) -> &[String] {
        &self.eval.classes
    }

    /// Training pairs as a labeled dataset (captions kept).
    pub fn train_dataset(&self) -> ClassDataset {
        ClassDataset {
            images: self.train.iter().map(|p| p.image.clone()).collect(),
            labels: self.train_labels.clone(),
            classes: self.eval.classes.clone(),
            template: self.eval.template.clone(),
            captions: self.train.iter().map(|p| p.caption.clone()).collect(),
        }
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let shape = [spec.channels, spec.image_size, spec.image_size];
    let npix: usize = shape.iter().product();
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.num_concepts)
        .map(|_| {
            (0..npix)
                .map(|_| {
                    let s = if proto_rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    0.5 + spec.pattern_amplitude * s
                })
                .collect()
        })
        .collect();

    let names = spec.concept_names();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n_train = ((spec.pairs_per_concept as f64) * TRAIN_FRACTION).round() as usize;

    let mut train = Vec::new();
    let mut train_labels = Vec::new();
    let (mut eval_images, mut eval_labels, mut eval_captions) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..spec.pairs_per_concept {
        for (k, proto) in prototypes.iter().enumerate() {
            let pixels: Vec<f32> = proto
                .iter()
                .map(|&p| {
                    let v = if spec.noise_sigma > 0.0 { p + noise.sample(&mut rng) } else { p };
                    (v.clamp(0.0, 1.0) as f32).clamp(0.0, 1.0)
                })
                .collect();
            let image = Tensor::from_vec(shape.to_vec(), pixels)?;
            let (primary, synonym) = &names[k];
            let noun = if rng.gen_bool(0.5) { primary } else { synonym };
            let phrasing = PHRASINGS[rng.gen_range(0..PHRASINGS.len())];
            let caption = phrasing.replace("{}", noun);
            if j < n_train {
                train.push(ImageTextPair { image, caption });
                train_labels.push(k);
            } else {
                eval_images.push(image);
                eval_labels.push(k);
                eval_captions.push(caption);
            }
        }
    }
    let eval = ClassDataset {
        images: eval_images,
        labels: eval_labels,
        classes: names.into_iter().map(|(p, _)| p).collect(),
        template: DEFAULT_TEMPLATE.to_string(),
        captions: eval_captions,
    };
    let prototypes = prototypes
        .into_iter()
        .map(|p| Tensor::from_vec(shape.to_vec(), p.into_iter().map(|v| v as f32).collect()))
        .collect::<Result<_>>()?;
    Ok(SynthData {
        train,
        train_labels,
        eval,
        prototypes,
    })
}
