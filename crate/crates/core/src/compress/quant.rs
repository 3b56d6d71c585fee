use crate::tensor_nn::{NnError, Result, Tensor};

/// Largest quantized magnitude; -128 is never produced.
pub const QMAX: i32 = 127;

/// Symmetric per-tensor int8 payload: `value ≈ q * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    values: Vec<i8>,
    scale: f64,
}

impl QuantizedTensor {
    pub fn from_parts(shape: &[usize], values: Vec<i8>, scale: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(NnError::ShapeMismatch(format!("scale {scale} must be positive")));
        }
        if values.iter().any(|&v| v == i8::MIN) {
            return Err(NnError::ShapeMismatch("value -128 is outside the symmetric range".into()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            scale,
        })
    }

    /// Scale `max|w| / 127` (1.0 for an all-zero tensor), values rounded
    /// half away from zero and clamped to [-127, 127].
    pub fn quantize(t: &Tensor) -> Self {
        let (values, scale) = quantize_dynamic(t.data());
        Self {
            shape: t.shape().to_vec(),
            values,
            scale,
        }
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::new(
            &self.shape,
            self.values.iter().map(|&q| q as f64 * self.scale).collect(),
        )
        .expect("shape was validated on construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Quantizes with a caller-supplied scale.
pub fn quantize_values(values: &[f64], scale: f64) -> Vec<i8> {
    values
        .iter()
        .map(|&v| (v / scale).round().clamp(-QMAX as f64, QMAX as f64) as i8)
        .collect()
}

/// Per-tensor symmetric quantization with the scale taken from the live range.
pub fn quantize_dynamic(values: &[f64]) -> (Vec<i8>, f64) {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { max / QMAX as f64 } else { 1.0 };
    (quantize_values(values, scale), scale)
}

/// `a (m x k) * b (k x n)` with 32-bit accumulation.
pub fn matmul_i8(m: usize, k: usize, n: usize, a: &[i8], b: &[i8]) -> Vec<i32> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    let mut out = vec![0i32; m * n];
    let mut brow = vec![0i32; n];
    for p in 0..k {
        for (d, &s) in brow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
            *d = s as i32;
        }
        for i in 0..m {
            let av = a[i * k + p] as i32;
            if av == 0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(&brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `n x k`, with 32-bit accumulation.
pub fn matmul_i8_nt(m: usize, k: usize, n: usize, a: &[i8], b: &[i8]) -> Vec<i32> {
    assert!(a.len() >= m * k && b.len() >= n * k);
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x as i32 * y as i32)
                .sum();
        }
    }
    out
}
