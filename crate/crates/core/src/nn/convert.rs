//! Conversions between `ndarray` matrices and tensors.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::Result;

pub fn tensor_from_array(a: &Array2<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), device)?.to_dtype(dtype)?)
}

/// 2-D tensor to a row-major `f32` matrix.
pub fn array_from_tensor(t: &Tensor) -> Result<Array2<f32>> {
    let (r, c) = t.dims2()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((r, c), data).expect("shape checked"))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
