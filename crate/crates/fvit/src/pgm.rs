//! Binary PGM (P5) image output for kernel visualization.

use std::io::Write as _;
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Serialize grayscale bytes as `P5\n{w} {h}\n255\n` + raw data.
pub fn encode(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() != width * height {
        return Err(Error::Dimension(format!(
            "pgm payload holds {} bytes for {}x{}",
            bytes.len(),
            width,
            height
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    Ok(out)
}

/// Min-max normalize a kernel matrix to 0..=255. A flat kernel (range below
/// 1e-12) maps to mid-gray instead of dividing by zero.
pub fn kernel_to_bytes<T: Scalar>(kernel: &Tensor<T>) -> Vec<u8> {
    let lo = kernel
        .data()
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v.to_f64()));
    let hi = kernel
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |a, &v| a.max(v.to_f64()));
    if hi - lo < 1e-12 {
        return vec![128u8; kernel.numel()];
    }
    kernel
        .data()
        .iter()
        .map(|&v| (((v.to_f64() - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

pub fn write_kernel<T: Scalar>(kernel: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (kernel.shape()[0], kernel.shape()[1]);
    let bytes = encode(w, h, &kernel_to_bytes(kernel))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
