use robustsim_autodiff::Tensor;

use crate::error::{contract, Error, Result};

/// `N x C x H x W` images with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    tensor: Tensor,
}

impl ImageBatch {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.ndim() != 4 {
            return contract(format!("image batch needs 4 axes, got {:?}", tensor.shape()));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return contract(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { tensor })
    }

    /// Stacks single images (`[C,H,W]` or `[1,C,H,W]`) of identical size.
    pub fn stack(images: &[Tensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero images".into()))?;
        let chw: Vec<usize> = first.shape().iter().rev().take(3).rev().copied().collect();
        let mut data = Vec::with_capacity(images.len() * first.len());
        for img in images {
            if img.len() != first.len() {
                return contract("stacked images differ in size");
            }
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![images.len()];
        shape.extend(chw);
        Self::new(Tensor::new(shape, data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn len(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.tensor.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Image `i` as a `[1, C, H, W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let n = self.image_len();
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![1, c, h, w], self.tensor.data()[i * n..(i + 1) * n].to_vec()).expect("sized")
    }

    /// Images `range` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> ImageBatch {
        let n = self.image_len();
        let [c, h, w] = self.image_shape();
        let t = Tensor::new(vec![end - start, c, h, w], self.tensor.data()[start * n..end * n].to_vec())
            .expect("sized");
        ImageBatch { tensor: t }
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let n = self.image_len();
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.tensor.data()[i * n..(i + 1) * n]);
        }
        ImageBatch {
            tensor: Tensor::new(vec![indices.len(), c, h, w], data).expect("sized"),
        }
    }

    pub fn images(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }
}

/// Images with one class id per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: ImageBatch, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return contract(format!("{} images but {} labels", images.len(), labels.len()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn select(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Indices of images carrying `label`.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }
}

/// Clamps every value into `[0, 1]`.
pub fn clamp_unit(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}
