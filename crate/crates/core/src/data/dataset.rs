use serde::{Deserialize, Serialize};

use super::image::{LabeledImage, Occlusion};
use super::DataError;
use crate::autograd::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression,
}

impl TaskKind {
    pub fn is_regression(&self) -> bool {
        matches!(self, TaskKind::Regression)
    }

    pub fn num_classes(&self) -> Option<usize> {
        match *self {
            TaskKind::Classification { num_classes } => Some(num_classes),
            TaskKind::Regression => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitName::Train),
            "validation" | "val" => Some(SplitName::Validation),
            "test" => Some(SplitName::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub task: TaskKind,
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[LabeledImage] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.train
            .first()
            .map(|img| (img.pixels.height, img.pixels.width))
    }

    /// Checks targets against the task, uniform image size, `[0, 1]` pixels
    /// and that every class occurs in train.
    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = self.image_size().ok_or(DataError::Empty)?;
        for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
            for (i, img) in self.split(name).iter().enumerate() {
                let label = || format!("{}[{i}]", name.as_str());
                if (img.pixels.height, img.pixels.width) != (h, w) {
                    return Err(DataError::SizeMismatch {
                        expected: (h, w),
                        got: (img.pixels.height, img.pixels.width),
                    });
                }
                if img.pixels.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(DataError::PixelRange(label()));
                }
                check_target(self.task, img, &label)?;
            }
        }
        if let TaskKind::Classification { num_classes } = self.task {
            let mut seen = vec![false; num_classes];
            for img in &self.train {
                if let Some(k) = img.target.class_id() {
                    seen[k] = true;
                }
            }
            if let Some(k) = seen.iter().position(|s| !s) {
                return Err(DataError::MissingClass(k));
            }
        }
        Ok(())
    }
}

fn check_target(
    task: TaskKind,
    img: &LabeledImage,
    label: &dyn Fn() -> String,
) -> Result<(), DataError> {
    use super::image::Target;
    let ok = match (task, img.target) {
        (TaskKind::Classification { num_classes }, Target::ClassId(k)) => k < num_classes,
        (TaskKind::Regression, Target::AgeLike(v)) => v.is_finite(),
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(DataError::LabelOutOfRange {
            file: label(),
            target: format!("{:?}", img.target),
        })
    }
}

/// `(n, 1, h, w)` batch of `images[indices]` under `mode`.
pub fn gather_batch(
    images: &[LabeledImage],
    indices: &[usize],
    mode: Occlusion,
) -> Result<Tensor, DataError> {
    let refs: Vec<&LabeledImage> = indices.iter().map(|&i| &images[i]).collect();
    super::image::to_batch(&refs, mode)
}

pub fn all_batch(images: &[LabeledImage], mode: Occlusion) -> Result<Tensor, DataError> {
    let refs: Vec<&LabeledImage> = images.iter().collect();
    super::image::to_batch(&refs, mode)
}
