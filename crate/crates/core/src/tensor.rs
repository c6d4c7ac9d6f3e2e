//! Dense tensors in the `{"shape": [...], "data": [...]}` JSON layout used by
//! the command-line tools.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("tensor shape {shape:?} holds {expected} elements but data has {actual}")]
pub struct TensorShapeError {
    pub shape: Vec<usize>,
    pub expected: usize,
    pub actual: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorShapeError;

    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorShapeError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorShapeError {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_validation() {
        let t: Tensor = serde_json::from_str(r#"{"shape":[2,2],"data":[1,2,3,4]}"#).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"shape":[2,2],"data":[1.0,2.0,3.0,4.0]}"#
        );
        assert!(serde_json::from_str::<Tensor>(r#"{"shape":[2,2],"data":[1]}"#).is_err());
    }
}
