use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Builds a tensor without re-checking finiteness. Callers guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.len() / self.shape[0].max(1);
        &self.data[i * width..(i + 1) * width]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack<'a, I>(items: I) -> Result<Tensor>
    where
        I: IntoIterator<Item = &'a Tensor>,
    {
        let mut iter = items.into_iter().peekable();
        let first_shape = match iter.peek() {
            Some(t) => t.shape.clone(),
            None => return Err(Error::EmptyBatch),
        };
        let mut data = Vec::new();
        let mut count = 0;
        for t in iter {
            if t.shape != first_shape {
                return Err(Error::ShapeMismatch {
                    context: format!("stack item {count}"),
                    expected: first_shape,
                    found: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
            count += 1;
        }
        let mut shape = Vec::with_capacity(first_shape.len() + 1);
        shape.push(count);
        shape.extend_from_slice(&first_shape);
        Ok(Tensor { shape, data })
    }
}
