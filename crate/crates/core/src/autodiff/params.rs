use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named `rows x cols` slice of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with named segments.
///
/// Segments are laid out back to back in insertion order, so they are
/// disjoint and cover the whole array. Optimiser moments and EMA shadows are
/// `ParamVector`s with the same layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    segments: Vec<Segment>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_segment(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<()> {
        let name = name.into();
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "segment `{name}`: {} values for {rows}x{cols}",
                values.len()
            )));
        }
        if self.segment(&name).is_some() {
            return Err(Error::config(format!(
                "duplicate parameter segment `{name}`"
            )));
        }
        self.segments.push(Segment {
            name,
            offset: self.data.len(),
            rows,
            cols,
        });
        self.data.extend(values);
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn values(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|s| &self.data[s.range()])
    }

    pub fn values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.segment(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let s = self.segment(name)?;
        Some(Tensor::from_parts(
            s.rows,
            s.cols,
            self.data[s.range()].to_vec(),
        ))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamVector {
            segments: self.segments.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    /// Same layout, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "{} values for a parameter vector of length {}",
                data.len(),
                self.data.len()
            )));
        }
        Ok(ParamVector {
            segments: self.segments.clone(),
            data,
        })
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &ParamVector) {
        assert!(self.same_layout(other), "parameter layouts differ");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

/// Tape handles for every segment of a [`ParamVector`].
pub struct ParamVars<'t> {
    vars: HashMap<String, Var<'t>>,
    order: Vec<(String, Var<'t>)>,
}

impl<'t> ParamVars<'t> {
    /// Differentiable leaves, one per segment.
    pub fn leaves(tape: &'t Tape, params: &ParamVector) -> Self {
        Self::build(params, |t| tape.leaf(t))
    }

    /// Constants, one per segment.
    pub fn constants(tape: &'t Tape, params: &ParamVector) -> Self {
        Self::build(params, |t| tape.constant(t))
    }

    fn build(params: &ParamVector, mut make: impl FnMut(Tensor) -> Var<'t>) -> Self {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for s in params.segments() {
            let v = make(params.tensor(&s.name).expect("segment exists"));
            vars.insert(s.name.clone(), v);
            order.push((s.name.clone(), v));
        }
        ParamVars { vars, order }
    }

    /// Panics if the segment is missing: models and parameter vectors are
    /// built together, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("no parameter segment named `{name}`"),
        }
    }

    /// Gathers leaf gradients into a vector with `layout`'s segment order.
    pub fn collect(&self, grads: &Gradients, layout: &ParamVector) -> ParamVector {
        let mut out = layout.zeros_like();
        for (name, var) in &self.order {
            if let Some(g) = grads.get(*var) {
                out.values_mut(name)
                    .expect("layout matches")
                    .copy_from_slice(g.data());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_are_contiguous() {
        let mut p = ParamVector::new();
        p.push_segment("a", 2, 3, vec![1.0; 6]).unwrap();
        p.push_segment("b", 1, 3, vec![2.0; 3]).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(p.segment("b").unwrap().offset, 6);
        assert_eq!(p.values("b").unwrap(), &[2.0, 2.0, 2.0]);
        assert!(p.push_segment("a", 1, 1, vec![0.0]).is_err());
        assert!(p.push_segment("c", 1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn gradient_keeps_segment_layout() {
        let mut p = ParamVector::new();
        p.push_segment("w", 1, 1, vec![3.0]).unwrap();
        p.push_segment("unused", 1, 2, vec![1.0, 1.0]).unwrap();
        let tape = Tape::new();
        let vars = ParamVars::leaves(&tape, &p);
        let loss = vars.get("w").square().sum();
        let g = vars.collect(&tape.gradients(loss).unwrap(), &p);
        assert!(g.same_layout(&p));
        assert_eq!(g.data(), &[6.0, 0.0, 0.0]);
    }
}
