use crate::autodiff::Array;

use super::DataError;

/// Images `[N, C, H, W]` with pixels in `[0, 1]` and one class id each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Array,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: String,
}

impl LabeledImageSet {
    pub fn new(
        images: Array,
        labels: Vec<usize>,
        class_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be [N, C, H, W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            class_names,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(channels, height, width)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn pixels_per_image(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images.data()[i * p..(i + 1) * p]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers images and labels at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Array, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        (
            Array::new(vec![indices.len(), c, h, w], data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        let (images, labels) = self.batch(indices);
        LabeledImageSet {
            images,
            labels,
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenates two sets with the same geometry and classes.
    pub fn concat(&self, other: &LabeledImageSet) -> Result<LabeledImageSet, DataError> {
        if self.image_dims() != other.image_dims() || self.class_names != other.class_names {
            return Err(DataError::Invalid(
                "cannot concatenate sets with different geometry or classes".into(),
            ));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(LabeledImageSet {
            images: Array::new(shape, data),
            labels,
            class_names: self.class_names.clone(),
            provenance: format!("{}+{}", self.provenance, other.provenance),
        })
    }
}
