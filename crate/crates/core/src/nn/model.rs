use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{Block, Head, NetworkSpec};
use super::NnError;
use crate::autograd::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Learnable parameters keyed by layer id (`block{i}.conv.w`, `embed.b`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub role: Role,
    pub tensors: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.tensors.get(id)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same weights under a different role tag.
    pub fn with_role(&self, role: Role) -> Self {
        Self {
            role,
            tensors: self.tensors.clone(),
        }
    }

    /// Parameter id → expected shape for `spec`.
    pub fn layout(spec: &NetworkSpec) -> Result<BTreeMap<String, Vec<usize>>, NnError> {
        let shapes = spec.block_shapes()?;
        let mut layout = BTreeMap::new();
        let mut in_c = spec.input_shape[0];
        for (i, block) in spec.blocks.iter().enumerate() {
            match *block {
                Block::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    layout.insert(format!("block{i}.conv.w"), vec![out_channels, in_c, kernel, kernel]);
                    layout.insert(format!("block{i}.conv.b"), vec![out_channels]);
                }
                Block::Residual { out_channels } => {
                    layout.insert(format!("block{i}.conv1.w"), vec![out_channels, in_c, 3, 3]);
                    layout.insert(format!("block{i}.conv1.b"), vec![out_channels]);
                    layout.insert(format!("block{i}.conv2.w"), vec![out_channels, out_channels, 3, 3]);
                    layout.insert(format!("block{i}.conv2.b"), vec![out_channels]);
                    if in_c != out_channels {
                        layout.insert(format!("block{i}.proj.w"), vec![out_channels, in_c, 1, 1]);
                    }
                }
                Block::MaxPool { .. } => {}
            }
            in_c = shapes[i][0];
        }
        let flat = spec.flat_features()?;
        layout.insert("embed.w".into(), vec![flat, spec.embedding_dim]);
        layout.insert("embed.b".into(), vec![spec.embedding_dim]);
        layout.insert("head.w".into(), vec![spec.embedding_dim, spec.head.outputs()]);
        layout.insert("head.b".into(), vec![spec.head.outputs()]);
        Ok(layout)
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<(), NnError> {
        let layout = Self::layout(spec)?;
        if layout.len() != self.tensors.len() {
            return Err(NnError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (id, shape) in layout {
            match self.tensors.get(&id) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(NnError::ParamMismatch(format!(
                        "{id}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(NnError::ParamMismatch(format!("missing {id}"))),
            }
        }
        Ok(())
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn build(spec: &NetworkSpec, seed: u64, role: Role) -> Result<NetworkParams, NnError> {
    let layout = NetworkParams::layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    // BTreeMap iteration is sorted, so the draw order is fixed.
    for (id, shape) in layout {
        let tensor = if id.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("layout shape")
        };
        tensors.insert(id, tensor);
    }
    Ok(NetworkParams { role, tensors })
}

/// Parameters registered in a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Register every tensor as a leaf; `trainable` decides whether the
    /// leaves take gradients.
    pub fn bind(graph: &mut Graph, params: &NetworkParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(id, t)| (id.clone(), graph.leaf(t.clone(), trainable)))
            .collect();
        Self { vars }
    }

    pub fn var(&self, id: &str) -> Var {
        self.vars[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed by parameter id, zero where none reached.
    pub fn grads(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(id, &v)| {
                let g = graph
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
                (id.clone(), g)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Pre-softmax activations, `(n, classes)` or `(n, 1)`.
    pub logits: Var,
    /// Penultimate activations, `(n, embedding_dim)`.
    pub embedding: Var,
    /// Flattened hint activations, `(n, features)`.
    pub hint: Var,
    /// Softmax rows for classifiers, `(n)` scalars for regressors.
    pub prediction: Var,
}

/// Differentiable forward pass of `batch` (`(n, c, h, w)`).
pub fn forward(
    graph: &mut Graph,
    params: &BoundParams,
    spec: &NetworkSpec,
    batch: Var,
) -> Result<ForwardOutput, NnError> {
    let s = graph.shape(batch);
    if s.len() != 4 || s[1..] != spec.input_shape {
        return Err(NnError::InputShape {
            expected: spec.input_shape,
            got: s.to_vec(),
        });
    }
    let mut x = batch;
    let mut hint = None;
    for (i, block) in spec.blocks.iter().enumerate() {
        x = match *block {
            Block::Conv { kernel, stride, .. } => {
                let w = params.var(&format!("block{i}.conv.w"));
                let b = params.var(&format!("block{i}.conv.b"));
                let y = graph.conv2d(x, w, Some(b), stride, kernel / 2)?;
                graph.relu(y)
            }
            Block::Residual { .. } => {
                let w1 = params.var(&format!("block{i}.conv1.w"));
                let b1 = params.var(&format!("block{i}.conv1.b"));
                let w2 = params.var(&format!("block{i}.conv2.w"));
                let b2 = params.var(&format!("block{i}.conv2.b"));
                let h = graph.conv2d(x, w1, Some(b1), 1, 1)?;
                let h = graph.relu(h);
                let branch = graph.conv2d(h, w2, Some(b2), 1, 1)?;
                let id = format!("block{i}.proj.w");
                let shortcut = if params.vars.contains_key(&id) {
                    graph.conv2d(x, params.var(&id), None, 1, 0)?
                } else {
                    x
                };
                graph.add(shortcut, branch)?
            }
            Block::MaxPool { window } => graph.max_pool2d(x, window)?,
        };
        if spec.hint_block_index == Some(i) {
            hint = Some(graph.flatten(x)?);
        }
    }
    let flat = graph.flatten(x)?;
    let e = graph.matmul(flat, params.var("embed.w"))?;
    let e = graph.add_bias(e, params.var("embed.b"))?;
    let embedding = graph.relu(e);
    let logits = graph.matmul(embedding, params.var("head.w"))?;
    let logits = graph.add_bias(logits, params.var("head.b"))?;
    let prediction = match spec.head {
        Head::Classifier { .. } => graph.softmax(logits, 1.0)?,
        Head::Regressor => graph.sum(logits, Some(1))?,
    };
    Ok(ForwardOutput {
        logits,
        embedding,
        hint: hint.unwrap_or(embedding),
        prediction,
    })
}

/// Plain values of a forward pass with no gradient bookkeeping.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub logits: Tensor,
    pub embedding: Tensor,
    pub hint: Tensor,
    pub prediction: Tensor,
}

/// Forward `batch` through frozen `params`, in chunks of `chunk` samples.
pub fn evaluate(
    params: &NetworkParams,
    spec: &NetworkSpec,
    batch: &Tensor,
    chunk: usize,
) -> Result<Evaluated, NnError> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let per = batch.len() / n.max(1);
    let mut parts: Vec<Evaluated> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let mut shape = batch.shape().to_vec();
        shape[0] = end - start;
        let sub = Tensor::new(shape, batch.data()[start * per..end * per].to_vec())?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, false);
        let x = g.constant(sub);
        let out = forward(&mut g, &bound, spec, x)?;
        parts.push(Evaluated {
            logits: g.value(out.logits).clone(),
            embedding: g.value(out.embedding).clone(),
            hint: g.value(out.hint).clone(),
            prediction: g.value(out.prediction).clone(),
        });
        start = end;
    }
    if parts.is_empty() {
        return Err(NnError::InputShape {
            expected: spec.input_shape,
            got: batch.shape().to_vec(),
        });
    }
    let join = |f: fn(&Evaluated) -> &Tensor| -> Result<Tensor, NnError> {
        let mut shape = f(&parts[0]).shape().to_vec();
        shape[0] = n;
        let data = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Ok(Tensor::new(shape, data)?)
    };
    Ok(Evaluated {
        logits: join(|e| &e.logits)?,
        embedding: join(|e| &e.embedding)?,
        hint: join(|e| &e.hint)?,
        prediction: join(|e| &e.prediction)?,
    })
}
