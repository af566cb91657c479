use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Block {
    /// Same-padded convolution followed by ReLU.
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    /// `x + conv3x3(relu(conv3x3(x)))`, with a 1×1 projection on the
    /// shortcut when the channel count changes. No activation after the sum,
    /// so an all-zero branch is the identity.
    Residual { out_channels: usize },
    MaxPool { window: usize },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    Classifier { num_classes: usize },
    Regressor,
}

impl Head {
    pub fn outputs(&self) -> usize {
        match *self {
            Head::Classifier { num_classes } => num_classes,
            Head::Regressor => 1,
        }
    }
}

/// Architecture description shared by a teacher and its student.
///
/// Layout: `blocks → flatten → linear(embedding_dim) → relu → head`.
/// The ReLU output is the embedding; the head is a single linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub blocks: Vec<Block>,
    pub embedding_dim: usize,
    pub head: Head,
    /// Block whose (flattened) output is the hint; `None` uses the embedding.
    #[serde(default)]
    pub hint_block_index: Option<usize>,
}

impl NetworkSpec {
    /// Three conv blocks with pooling, standing in for the plain VGG family.
    pub fn plain_small(input_shape: [usize; 3], head: Head) -> Self {
        Self {
            input_shape,
            blocks: vec![
                Block::Conv { out_channels: 8, kernel: 3, stride: 1 },
                Block::MaxPool { window: 2 },
                Block::Conv { out_channels: 16, kernel: 3, stride: 1 },
                Block::MaxPool { window: 2 },
                Block::Conv { out_channels: 16, kernel: 3, stride: 1 },
            ],
            embedding_dim: 64,
            head,
            hint_block_index: None,
        }
    }

    /// Three residual blocks, standing in for the residual family.
    pub fn residual_small(input_shape: [usize; 3], head: Head) -> Self {
        Self {
            input_shape,
            blocks: vec![
                Block::Conv { out_channels: 8, kernel: 3, stride: 1 },
                Block::Residual { out_channels: 8 },
                Block::MaxPool { window: 2 },
                Block::Residual { out_channels: 16 },
                Block::MaxPool { window: 2 },
                Block::Residual { out_channels: 16 },
            ],
            embedding_dim: 64,
            head,
            hint_block_index: None,
        }
    }

    /// Whether the spec contains residual blocks.
    pub fn is_residual(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b, Block::Residual { .. }))
    }

    /// Validate and return the `(channels, height, width)` after every block.
    pub fn block_shapes(&self) -> Result<Vec<[usize; 3]>, NnError> {
        let [c0, h0, w0] = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(NnError::InvalidSpec {
                block: None,
                reason: format!("input shape {:?} has a zero axis", self.input_shape),
            });
        }
        if self.embedding_dim == 0 || self.head.outputs() == 0 {
            return Err(NnError::InvalidSpec {
                block: None,
                reason: "embedding_dim and head outputs must be positive".into(),
            });
        }
        if let Head::Classifier { num_classes } = self.head {
            if num_classes < 2 {
                return Err(NnError::InvalidSpec {
                    block: None,
                    reason: format!("classifier needs at least 2 classes, got {num_classes}"),
                });
            }
        }
        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let bad = |reason: String| NnError::InvalidSpec {
                block: Some(i),
                reason,
            };
            let [_, h, w] = shape;
            shape = match *block {
                Block::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("conv parameters must be positive".into()));
                    }
                    if kernel % 2 == 0 {
                        return Err(bad(format!("conv kernel {kernel} must be odd")));
                    }
                    let pad = kernel / 2;
                    [
                        out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    ]
                }
                Block::Residual { out_channels } => {
                    if out_channels == 0 {
                        return Err(bad("residual out_channels must be positive".into()));
                    }
                    [out_channels, h, w]
                }
                Block::MaxPool { window } => {
                    if window == 0 || h < window || w < window {
                        return Err(bad(format!("pool window {window} does not fit {h}x{w}")));
                    }
                    [shape[0], h / window, w / window]
                }
            };
            out.push(shape);
        }
        if let Some(idx) = self.hint_block_index {
            if idx >= self.blocks.len() {
                return Err(NnError::InvalidSpec {
                    block: Some(idx),
                    reason: "hint_block_index out of range".into(),
                });
            }
        }
        Ok(out)
    }

    pub fn flat_features(&self) -> Result<usize, NnError> {
        let shapes = self.block_shapes()?;
        let last = shapes.last().copied().unwrap_or(self.input_shape);
        Ok(last.iter().product())
    }
}
