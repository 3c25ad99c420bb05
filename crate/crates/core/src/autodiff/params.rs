use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered `(name, offset, shape)` blocks that exactly tile a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
    len: usize,
}

impl ParamLayout {
    /// Lays out blocks back to back in the given order.
    pub fn from_shapes<S: Into<String>>(shapes: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let blocks = shapes
            .into_iter()
            .map(|(name, shape)| {
                let b = ParamBlock {
                    name: name.into(),
                    offset,
                    shape,
                };
                offset += b.len();
                b
            })
            .collect();
        Self { blocks, len: offset }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Flat parameter storage plus the shared, immutable layout describing it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        Self {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Returns `None` when `data` does not match the layout length.
    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<f64>) -> Option<Self> {
        (data.len() == layout.len()).then_some(Self { data, layout })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.data[b.range()])
    }

    /// Each block as a tensor of its own shape.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layout
            .blocks()
            .iter()
            .map(|b| Tensor::from_raw(b.shape.clone(), self.data[b.range()].to_vec()))
            .collect()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) {
        assert_eq!(self.layout, other.layout, "axpy across different layouts");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += c * b);
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }
}
