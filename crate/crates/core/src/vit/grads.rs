use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::params::ViTParams;

/// How much of a parameter tensor trains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    Full,
    /// Sorted, unique column indices of a 2-D weight.
    Columns(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEntry {
    pub name: String,
    pub selection: Selection,
    /// Shape of the underlying parameter.
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl TrainEntry {
    pub fn scalars(&self) -> usize {
        match &self.selection {
            Selection::Full => self.shape.iter().product(),
            Selection::Columns(cols) => self.shape[0] * cols.len(),
        }
    }

    /// Shape of the gradient tensor stored for this entry.
    pub fn grad_shape(&self) -> Vec<usize> {
        match &self.selection {
            Selection::Full => self.shape.clone(),
            Selection::Columns(cols) => vec![self.shape[0], cols.len()],
        }
    }
}

/// Ordered set of trainable tensors (and column subsets). Its order defines
/// the flat trainable-scalar index space the optimizer state is aligned to.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<TrainEntry>", into = "Vec<TrainEntry>")]
pub struct TrainSet {
    entries: Vec<TrainEntry>,
    index: HashMap<String, usize>,
}

impl From<Vec<TrainEntry>> for TrainSet {
    fn from(entries: Vec<TrainEntry>) -> Self {
        TrainSet::from_entries(entries)
    }
}

impl From<TrainSet> for Vec<TrainEntry> {
    fn from(set: TrainSet) -> Self {
        set.entries
    }
}

/// Matrices, embeddings and adapter factors decay; norms, scales and biases do not.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(name.contains(".ln") || name.starts_with("final_ln") || leaf.starts_with("ls")
        || leaf.starts_with("b_") || leaf == "bias")
}

impl TrainSet {
    /// Builds a set from `(name, selection)` pairs, validated against the
    /// tensors of `params` and ordered by parameter enumeration order.
    pub fn new(params: &ViTParams, wanted: Vec<(String, Selection)>) -> Result<Self> {
        let shapes: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        Self::from_layout(&shapes, wanted)
    }

    /// As [`TrainSet::new`], against a `(name, shape)` layout.
    pub fn from_layout(layout: &[(String, Vec<usize>)], wanted: Vec<(String, Selection)>) -> Result<Self> {
        let mut want: HashMap<String, Selection> = HashMap::new();
        for (name, sel) in wanted {
            if want.insert(name.clone(), sel).is_some() {
                return Err(Error::Internal(format!("{name} listed twice in trainable set")));
            }
        }
        let mut entries = Vec::new();
        for (name, shape) in layout {
            let Some(sel) = want.remove(name) else { continue };
            if let Selection::Columns(cols) = &sel {
                if shape.len() != 2 {
                    return Err(Error::config(format!("column selection on non-matrix {name}")));
                }
                let width = shape[1];
                if cols.is_empty()
                    || cols.windows(2).any(|w| w[0] >= w[1])
                    || cols.iter().any(|&c| c >= width)
                {
                    return Err(Error::config(format!(
                        "column set for {name} must be sorted, unique and inside 0..{width}"
                    )));
                }
            }
            entries.push(TrainEntry {
                name: name.clone(),
                selection: sel,
                shape: shape.clone(),
                decay: decays(name),
            });
        }
        if let Some(name) = want.keys().next() {
            return Err(Error::config(format!("unknown parameter {name}")));
        }
        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(entries: Vec<TrainEntry>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        TrainSet { entries, index }
    }

    pub fn entries(&self) -> &[TrainEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TrainEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn selection(&self, name: &str) -> Option<&Selection> {
        self.get(name).map(|e| &e.selection)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(TrainEntry::scalars).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradients for exactly the trainable entries, in trainable-set order.
/// Column-restricted entries hold the `rows × r` sub-matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    grads: Vec<(String, Tensor)>,
}

impl GradSet {
    pub(crate) fn new(grads: Vec<(String, Tensor)>) -> Self {
        GradSet { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Checks that names and shapes line up with `set`, entry by entry.
    pub fn check_aligned(&self, set: &TrainSet) -> Result<()> {
        if self.grads.len() != set.entries().len() {
            return Err(Error::Internal(format!(
                "gradient set has {} entries, trainable set {}",
                self.grads.len(),
                set.entries().len()
            )));
        }
        for ((name, g), e) in self.grads.iter().zip(set.entries()) {
            if *name != e.name || g.shape() != e.grad_shape().as_slice() {
                return Err(Error::Internal(format!(
                    "gradient {name} {:?} misaligned with trainable {} {:?}",
                    g.shape(),
                    e.name,
                    e.grad_shape()
                )));
            }
        }
        Ok(())
    }
}
