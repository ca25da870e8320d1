use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One named tensor inside a flattened parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered segment layout shared by every vector of one model description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(specs: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let segments = specs
            .into_iter()
            .map(|(name, shape)| {
                let s = Segment {
                    name: name.into(),
                    shape,
                    offset,
                };
                offset += s.len();
                s
            })
            .collect();
        Layout {
            segments,
            len: offset,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }
}

/// Flattened snapshot of model parameters (θ, ξ, anchors, importances).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Consistency(format!(
                "layout expects {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        ParamVector { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        &self.values[self.layout.segments[i].range()]
    }

    pub fn segment_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout.segments[i].range();
        &mut self.values[r]
    }

    pub fn segment_by_name(&self, name: &str) -> Option<&[f64]> {
        self.layout.index_of(name).map(|i| self.segment(i))
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Consistency(format!(
                "parameter layouts differ ({} vs {} values)",
                self.len(),
                other.len()
            )))
        }
    }

    /// Splits into one tensor per segment.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layout
            .segments
            .iter()
            .map(|s| Tensor::from_parts(s.shape.clone(), self.values[s.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`to_tensors`](Self::to_tensors).
    pub fn from_tensors(layout: Arc<Layout>, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.segments.len() {
            return Err(Error::Consistency(format!(
                "expected {} segments, got {}",
                layout.segments.len(),
                tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (seg, t) in layout.segments.iter().zip(tensors) {
            if t.shape() != seg.shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "segment {} expects shape {:?}, got {:?}",
                    seg.name,
                    seg.shape,
                    t.shape()
                )));
            }
            values.extend_from_slice(t.data());
        }
        Ok(ParamVector { layout, values })
    }

    /// Records every segment as a differentiable leaf.
    pub fn to_variables(&self, tape: &mut Tape) -> Vec<Var> {
        self.to_tensors().into_iter().map(|t| tape.variable(t)).collect()
    }

    /// Records every segment as a constant.
    pub fn to_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.to_tensors().into_iter().map(|t| tape.constant(t)).collect()
    }

    /// Concatenates per-segment gradient tensors into a vector of this layout.
    pub fn from_segment_grads(layout: Arc<Layout>, grads: Vec<Tensor>) -> Result<Self> {
        ParamVector::from_tensors(layout, &grads)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Arc<Layout> {
        Arc::new(Layout::new([
            ("w", vec![2, 3]),
            ("b", vec![3]),
            ("s", vec![]),
        ]))
    }

    #[test]
    fn offsets_are_contiguous() {
        let l = layout();
        assert_eq!(l.len(), 10);
        assert_eq!(l.segments()[1].offset, 6);
        assert_eq!(l.segments()[2].range(), 9..10);
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let a = ParamVector::zeros(layout());
        let b = ParamVector::zeros(Arc::new(Layout::new([("w", vec![10])])));
        assert!(matches!(a.check_layout(&b), Err(Error::Consistency(_))));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 10)) {
            let p = ParamVector::new(layout(), values.clone()).unwrap();
            let back = ParamVector::from_tensors(layout(), &p.to_tensors()).unwrap();
            prop_assert_eq!(back.values(), values.as_slice());
        }
    }
}
