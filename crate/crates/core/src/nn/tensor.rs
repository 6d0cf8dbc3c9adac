use crate::error::{Error, Result};

use super::Real;

/// Row-major dense array with an optional gradient slot of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    /// Attaches a zeroed gradient slot.
    pub fn requires_grad(mut self) -> Self {
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Simultaneous access to the values and the gradient slot.
    pub(crate) fn data_and_grad(&mut self) -> (&[T], &mut [T]) {
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        (&self.data, grad)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.requires_grad(),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Euclidean norm of all gradients taken together, accumulated in f64.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Copies every value into a flat vector (registration order).
    pub fn flatten(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    pub fn flatten_grads(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| {
                p.tensor
                    .grad()
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); p.tensor.len()])
            })
            .collect()
    }

    /// Converts every tensor to another scalar type (gradients dropped).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                tensor: Tensor::new(
                    p.tensor.shape().to_vec(),
                    p.tensor.data().iter().map(|x| U::lit(x.as_f64())).collect(),
                )
                .expect("same shape")
                .requires_grad(),
            })
            .collect();
        ParamStore { params }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_is_checked() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(vec![4, 2]).requires_grad();
        assert_eq!(t.grad().unwrap().len(), t.len());
    }

    #[test]
    fn store_lookup_and_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = s.add("b", Tensor::new(vec![1], vec![3.0]).unwrap());
        assert_eq!(s.find("b"), Some(b));
        s.get_mut(a).grad_mut().unwrap().copy_from_slice(&[3.0, 0.0]);
        s.get_mut(b).grad_mut().unwrap()[0] = 4.0;
        assert_eq!(s.grad_norm(), 5.0);
        assert_eq!(s.flatten(), vec![1.0, 2.0, 3.0]);
        s.zero_grad();
        assert_eq!(s.grad_norm(), 0.0);
    }
}
