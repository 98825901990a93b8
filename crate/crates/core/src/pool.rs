//! The partitioned dataset: train/test split plus the annotated set `Q`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageId, ImageSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in file order, their split, and the ordered annotated set.
///
/// The unannotated set `U` is always derived: train images not in `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    dim: usize,
    images: Vec<ImageSample>,
    splits: Vec<Split>,
    index: BTreeMap<ImageId, usize>,
    annotated: Vec<ImageId>,
    annotated_set: BTreeSet<ImageId>,
}

impl Pool {
    pub fn new(dim: usize, images: Vec<(ImageSample, Split)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("feature dimension must be positive".into()));
        }
        let mut index = BTreeMap::new();
        let mut imgs = Vec::with_capacity(images.len());
        let mut splits = Vec::with_capacity(images.len());
        for (img, split) in images {
            img.validate(dim)?;
            if index.insert(img.id, imgs.len()).is_some() {
                return Err(Error::Format(format!("duplicate image id {}", img.id)));
            }
            imgs.push(img);
            splits.push(split);
        }
        Ok(Pool {
            dim,
            images: imgs,
            splits,
            index,
            annotated: Vec::new(),
            annotated_set: BTreeSet::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn images(&self) -> &[ImageSample] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, id: ImageId) -> Result<&ImageSample> {
        self.index
            .get(&id)
            .map(|&i| &self.images[i])
            .ok_or(Error::UnknownImage(id))
    }

    pub fn split(&self, id: ImageId) -> Result<Split> {
        self.index
            .get(&id)
            .map(|&i| self.splits[i])
            .ok_or(Error::UnknownImage(id))
    }

    /// Images with their split, in file order.
    pub fn entries(&self) -> impl Iterator<Item = (&ImageSample, Split)> {
        self.images.iter().zip(self.splits.iter().copied())
    }

    fn ids_in(&self, split: Split) -> Vec<ImageId> {
        self.index
            .iter()
            .filter(|(_, &i)| self.splits[i] == split)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Train ids in ascending order.
    pub fn train_ids(&self) -> Vec<ImageId> {
        self.ids_in(Split::Train)
    }

    /// Test ids in ascending order.
    pub fn test_ids(&self) -> Vec<ImageId> {
        self.ids_in(Split::Test)
    }

    /// `Q`, in annotation order.
    pub fn annotated(&self) -> &[ImageId] {
        &self.annotated
    }

    pub fn is_annotated(&self, id: ImageId) -> bool {
        self.annotated_set.contains(&id)
    }

    /// `U`, in ascending id order.
    pub fn unannotated(&self) -> Vec<ImageId> {
        self.train_ids()
            .into_iter()
            .filter(|id| !self.annotated_set.contains(id))
            .collect()
    }

    /// Moves a train image from `U` to `Q`.
    pub fn annotate(&mut self, id: ImageId) -> Result<()> {
        match self.split(id)? {
            Split::Test => Err(Error::InvalidInput(format!("image {id} belongs to the test split"))),
            Split::Train if self.annotated_set.contains(&id) => {
                Err(Error::InvalidInput(format!("image {id} is already annotated")))
            }
            Split::Train => {
                self.annotated.push(id);
                self.annotated_set.insert(id);
                Ok(())
            }
        }
    }

    pub fn clear_annotations(&mut self) {
        self.annotated.clear();
        self.annotated_set.clear();
    }
}
