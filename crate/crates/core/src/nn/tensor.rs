use crate::error::{Error, Result};

/// (batch, channels, depth, height, width).
pub type Shape5 = [usize; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape5,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Shape5, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape5) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: [1, 1, 1, 1, 1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub fn set_grad(&mut self, g: Option<Vec<f32>>) {
        self.grad = g;
    }

    /// Adds `g` into the grad slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }
}
