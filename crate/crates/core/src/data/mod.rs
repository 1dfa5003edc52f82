//! Datasets: image/caption shards, TSV manifests, labeled class datasets,
//! the synthetic paired-data generator and seeded batch iteration.
//!
//! Labeled dataset directories hold `data.shard`, `labels.tsv`
//! (`record_index<TAB>class_index` lines) and `classes.txt` (one class name
//! per line).

mod manifest;
mod shard;
mod synth;

pub use manifest::load_manifest;
pub use shard::{decode_shard, encode_shard, read_shard, write_shard};
pub use synth::{synth_generate, SynthData, SynthSpec, PATTERN_AMPLITUDE};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{tokenize, TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLASS_PLACEHOLDER: &str = "[CLS]";
pub const DEFAULT_TEMPLATE: &str = "This is a photo of a [CLS].";
pub const SHARD_FILE: &str = "data.shard";
pub const LABELS_FILE: &str = "labels.tsv";
pub const CLASSES_FILE: &str = "classes.txt";

/// One image (`C×H×W`, pixels in `[0, 1]`) with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextPair {
    pub image: Tensor<f32>,
    pub caption: String,
}

impl ImageTextPair {
    pub fn validate(&self) -> Result<()> {
        validate_pixels(&self.image)
    }
}

fn validate_pixels(image: &Tensor<f32>) -> Result<()> {
    match image.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
        Some(i) => Err(Error::Validation(format!(
            "pixel {i} = {} outside [0, 1]",
            image.data()[i]
        ))),
        None => Ok(()),
    }
}

/// Labeled images with class names and a prompt template.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub template: String,
    /// Optional per-image captions (kept so shards round-trip).
    pub captions: Vec<String>,
}

impl ClassDataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, classes: Vec<String>) -> Result<Self> {
        let captions = vec![String::new(); images.len()];
        let ds = ClassDataset {
            images,
            labels,
            classes,
            template: DEFAULT_TEMPLATE.to_string(),
            captions,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() || self.images.len() != self.captions.len() {
            return Err(Error::Validation(format!(
                "{} images, {} labels, {} captions",
                self.images.len(),
                self.labels.len(),
                self.captions.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes.len()) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {} classes",
                self.classes.len()
            )));
        }
        let mut names = self.classes.clone();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("class names must be unique".into()));
        }
        self.images.iter().try_for_each(validate_pixels)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Keeps only the listed samples, in order.
    pub fn subset(&self, idx: &[usize]) -> ClassDataset {
        ClassDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
            template: self.template.clone(),
            captions: idx.iter().map(|&i| self.captions[i].clone()).collect(),
        }
    }

    /// Text of each class prompt, with the placeholder substituted.
    pub fn class_prompts(&self) -> Result<Vec<String>> {
        if !self.template.contains(CLASS_PLACEHOLDER) {
            return Err(Error::Config(format!(
                "template {:?} lacks the {CLASS_PLACEHOLDER} placeholder",
                self.template
            )));
        }
        Ok(self
            .classes
            .iter()
            .map(|c| self.template.replace(CLASS_PLACEHOLDER, c))
            .collect())
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pairs: Vec<ImageTextPair> = self
            .images
            .iter()
            .zip(&self.captions)
            .map(|(image, caption)| ImageTextPair {
                image: image.clone(),
                caption: caption.clone(),
            })
            .collect();
        write_shard(dir.join(SHARD_FILE), &pairs)?;
        let labels: String = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, y)| format!("{i}\t{y}\n"))
            .collect();
        let path = dir.join(LABELS_FILE);
        std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
        let classes: String = self.classes.iter().map(|c| format!("{c}\n")).collect();
        let path = dir.join(CLASSES_FILE);
        std::fs::write(&path, classes).map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let pairs = read_shard(dir.join(SHARD_FILE))?;
        let path = dir.join(CLASSES_FILE);
        let classes: Vec<String> = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(&path, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().to_string())
            .collect();
        let path = dir.join(LABELS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut labels = vec![None; pairs.len()];
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse = |s: &str| {
                s.trim().parse::<usize>().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("expected an index, got {s:?}"),
                })
            };
            let (rec, cls) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected record_index<TAB>class_index".into(),
            })?;
            let (rec, cls) = (parse(rec)?, parse(cls)?);
            let slot = labels.get_mut(rec).ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("record {rec} not in shard"),
            })?;
            *slot = Some(cls);
        }
        let labels = labels
            .into_iter()
            .enumerate()
            .map(|(i, y)| y.ok_or_else(|| Error::Validation(format!("record {i} has no label"))))
            .collect::<Result<Vec<_>>>()?;
        let (images, captions) = pairs.into_iter().map(|p| (p.image, p.caption)).unzip();
        let ds = ClassDataset {
            images,
            labels,
            classes,
            template: DEFAULT_TEMPLATE.to_string(),
            captions,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Tokenized class prompts, aligned with class indices.
pub fn build_class_texts(ds: &ClassDataset, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSeq>> {
    Ok(ds
        .class_prompts()?
        .iter()
        .map(|p| tokenize(p, vocab, max_len))
        .collect())
}

/// Stacks `C×H×W` images into an `N×C×H×W` tensor of scalar type `S`.
pub fn stack_images<'a, S: Scalar>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<S>> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        match &shape {
            Some(s) if s[..] != img.shape()[..] => {
                return Err(Error::Dimension {
                    op: "stack_images",
                    lhs: s.clone(),
                    rhs: img.shape().to_vec(),
                })
            }
            Some(_) => {}
            None => shape = Some(img.shape().to_vec()),
        }
        data.extend(img.data().iter().map(|&p| S::lit(p as f64)));
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::Contract("cannot stack zero images".into()))?);
    Tensor::from_vec(full, data)
}

/// Index lists for one epoch, shuffled by `(seed, epoch)`.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::Config(format!(
            "batch size {batch_size} does not fit a dataset of {len} items"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// `N` images with their captions, ready to encode.
#[derive(Clone, Debug)]
pub struct ImageTextBatch<S> {
    pub images: Tensor<S>,
    pub captions: Vec<String>,
}

/// Iterator over one epoch of image/text batches.
pub fn batches<'a, S: Scalar>(
    data: &'a [ImageTextPair],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    drop_last: bool,
) -> Result<impl Iterator<Item = Result<ImageTextBatch<S>>> + 'a> {
    let plan = epoch_batches(data.len(), batch_size, seed, epoch, drop_last)?;
    Ok(plan.into_iter().map(move |idx| {
        Ok(ImageTextBatch {
            images: stack_images(idx.iter().map(|&i| &data[i].image))?,
            captions: idx.iter().map(|&i| data[i].caption.clone()).collect(),
        })
    }))
}
