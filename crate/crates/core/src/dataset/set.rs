use std::path::Path;

use super::{DatasetError, LabelVector, SampleRecord};
use crate::imaging::{parallel_preprocess, IndexedError, ImagingError, StandardizedImage};
use crate::nn::NUM_CLASSES;
use crate::tensor::Tensor;

/// One minibatch ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, 1, S, S]`
    pub images: Tensor,
    /// `[B, 14]` of 0/1
    pub labels: Tensor,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Preprocessed images of one split held in memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    side: usize,
    images: Vec<Vec<f64>>,
    labels: Vec<LabelVector>,
    ids: Vec<String>,
}

impl LabeledSet {
    pub fn new(side: usize) -> Self {
        LabeledSet {
            side,
            ..Self::default()
        }
    }

    pub fn push(
        &mut self,
        id: impl Into<String>,
        image: StandardizedImage,
        labels: LabelVector,
    ) -> Result<(), DatasetError> {
        if image.width != self.side || image.height != self.side {
            return Err(DatasetError::Config(format!(
                "image is {}x{}, set holds {}x{}",
                image.width, image.height, self.side, self.side
            )));
        }
        self.images.push(image.pixels);
        self.labels.push(labels);
        self.ids.push(id.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub(crate) fn images(&self) -> &[Vec<f64>] {
        &self.images
    }

    /// Parts must already agree in length and image size.
    pub(crate) fn from_parts(side: usize, images: Vec<Vec<f64>>, labels: Vec<LabelVector>, ids: Vec<String>) -> Self {
        LabeledSet {
            side,
            images,
            labels,
            ids,
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[LabelVector] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            side: self.side,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch, DatasetError> {
        if indices.is_empty() {
            return Err(DatasetError::Config("empty batch".into()));
        }
        let plane = self.side * self.side;
        let mut pixels = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len() * NUM_CLASSES);
        for &i in indices {
            pixels.extend_from_slice(&self.images[i]);
            labels.extend(self.labels[i].iter().map(|&v| f64::from(v)));
        }
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), 1, self.side, self.side], pixels)?,
            labels: Tensor::new(vec![indices.len(), NUM_CLASSES], labels)?,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }

    /// Read, preprocess and collect the images named by `records` from
    /// `image_dir`. Unreadable or undecodable images are returned as
    /// indexed errors (index into `records`) and left out of the set.
    pub fn load(
        records: &[SampleRecord],
        image_dir: &Path,
        side: usize,
        workers: usize,
    ) -> Result<(LabeledSet, Vec<IndexedError>), DatasetError> {
        let mut errors = Vec::new();
        let mut bytes = Vec::with_capacity(records.len());
        let mut origin = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let path = image_dir.join(&r.image_id);
            match std::fs::read(&path) {
                Ok(b) => {
                    bytes.push(b);
                    origin.push(i);
                }
                Err(source) => errors.push(IndexedError {
                    index: i,
                    error: ImagingError::Io {
                        path: path.display().to_string(),
                        source,
                    },
                }),
            }
        }
        let out = parallel_preprocess(&bytes, side, workers)?;
        for e in out.errors {
            errors.push(IndexedError {
                index: origin[e.index],
                error: e.error,
            });
        }
        errors.sort_by_key(|e| e.index);
        let mut set = LabeledSet::new(side);
        for (k, img) in out.images {
            let r = &records[origin[k]];
            set.push(r.image_id.clone(), img, r.labels)?;
        }
        Ok((set, errors))
    }
}
