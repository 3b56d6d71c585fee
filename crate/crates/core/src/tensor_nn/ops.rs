use super::{Layer, Mode, NnError, Result, Tensor};

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Subgradient at exactly zero is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "relu grad {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.cache = Some(x.clone());
        Ok(relu_forward(x))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(NnError::NoCache)?;
        relu_backward(x, grad_out)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(relu_forward(x))
    }
}

/// 2x2 mean pooling with stride 2. Odd extents are padded by repeating the
/// last row/column, so the output is `ceil(H/2) x ceil(W/2)`.
pub fn avgpool2x2_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1) = (2 * y, (2 * y + 1).min(h - 1));
            for xx in 0..ow {
                let (x0, x1) = (2 * xx, (2 * xx + 1).min(w - 1));
                dst[y * ow + xx] =
                    0.25 * (src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avgpool2x2_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(NnError::ShapeMismatch(format!(
            "expected rank-4 input shape, got {input_shape:?}"
        )));
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(NnError::ShapeMismatch(format!(
            "avgpool grad {:?} vs expected [{n}, {c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let mut gx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let g = &grad_out.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (y0, y1) = (2 * y, (2 * y + 1).min(h - 1));
            for xx in 0..ow {
                let (x0, x1) = (2 * xx, (2 * xx + 1).min(w - 1));
                let v = 0.25 * g[y * ow + xx];
                dst[y0 * w + x0] += v;
                dst[y0 * w + x1] += v;
                dst[y1 * w + x0] += v;
                dst[y1 * w + x1] += v;
            }
        }
    }
    Tensor::new(input_shape, gx)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AvgPool2x2 {
    input_shape: Option<Vec<usize>>,
}

impl AvgPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for AvgPool2x2 {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        avgpool2x2_forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.as_ref().ok_or(NnError::NoCache)?;
        avgpool2x2_backward(shape, grad_out)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        avgpool2x2_forward(x)
    }
}

/// Row-wise softmax of an `N x K` matrix, stabilized by max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.data.clone();
    for row in out.chunks_mut(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape(), out)
}

pub fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.data.clone();
    for row in out.chunks_mut(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::new(logits.shape(), out)
}

/// Backward of row-wise softmax given its output `probs`.
pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (_, k) = probs.dims2()?;
    if probs.shape() != grad_out.shape() {
        return Err(NnError::ShapeMismatch("softmax grad shape".into()));
    }
    let mut out = vec![0.0; probs.len()];
    for ((p, g), o) in probs
        .data
        .chunks(k)
        .zip(grad_out.data.chunks(k))
        .zip(out.chunks_mut(k))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..k {
            o[j] = p[j] * (g[j] - dot);
        }
    }
    Tensor::new(probs.shape(), out)
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::ShapeMismatch(format!("label {l} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `probs`, and the gradient
/// of the fused softmax + cross-entropy w.r.t. the logits, `(probs - onehot) / N`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = probs.dims2()?;
    check_labels(n, k, labels)?;
    for (row, p) in probs.data.chunks(k).enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(NnError::NotNormalized { row, sum });
        }
    }
    let mut loss = 0.0;
    let mut grad = probs.data.clone();
    for (i, &l) in labels.iter().enumerate() {
        loss -= probs.data[i * k + l].max(f64::MIN_POSITIVE).ln();
        grad[i * k + l] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= n as f64);
    Ok((loss / n as f64, Tensor::new(probs.shape(), grad)?))
}

/// Cross-entropy straight from logits via log-softmax; same gradient as
/// [`cross_entropy`] but stable for confident predictions.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    check_labels(n, k, labels)?;
    let logp = log_softmax_rows(logits)?;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = logp.data.iter().map(|v| v.exp()).collect();
    for (i, &l) in labels.iter().enumerate() {
        loss -= logp.data[i * k + l];
        grad[i * k + l] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= n as f64);
    Ok((loss / n as f64, Tensor::new(logits.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, i: usize) -> f64 {
        let h = 1e-3;
        let mut p = x.clone();
        p.data[i] += h;
        let mut m = x.clone();
        m.data[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn avgpool_example() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2x2_forward(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn avgpool_odd_extent_replicates_edge() {
        let x = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = avgpool2x2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[1.5, 3.0]);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[0.5, 0.5]);
        let big = Tensor::new(&[1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap();
        let p = softmax_rows(&big).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-12 && p.data()[2] == 0.0);
    }

    #[test]
    fn relu_zero_has_zero_subgradient() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = relu_backward(&x, &Tensor::filled(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let p = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&p, &[1]).unwrap().0, 0.0);
        let u = Tensor::filled(&[2, 6], 1.0 / 6.0);
        let (loss, _) = cross_entropy(&u, &[0, 5]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((loss - 1.7918).abs() < 1e-4);
        let bad = Tensor::new(&[1, 2], vec![0.5, 0.6]).unwrap();
        assert!(matches!(cross_entropy(&bad, &[0]), Err(NnError::NotNormalized { row: 0, .. })));
        assert!(cross_entropy(&u, &[0]).is_err());
        assert!(cross_entropy(&u, &[0, 6]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let labels = [2, 0, 3];
        let loss = |z: &Tensor| cross_entropy(&softmax_rows(z).unwrap(), &labels).unwrap().0;
        let (_, grad) = cross_entropy(&softmax_rows(&logits).unwrap(), &labels).unwrap();
        let (_, grad2) = softmax_cross_entropy(&logits, &labels).unwrap();
        for i in 0..logits.len() {
            assert!(rel(grad.data()[i], central_diff(loss, &logits, i)) < 1e-3);
            assert!((grad.data()[i] - grad2.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_avgpool_softmax_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // nudge inputs away from the relu kink
        let mut x = Tensor::uniform(&[2, 2, 3, 5], 1.0, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
        let r = Tensor::uniform(&[2, 2, 3, 5], 1.0, &mut rng);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();

        let g = relu_backward(&x, &r).unwrap();
        for i in 0..x.len() {
            assert!(rel(g.data()[i], central_diff(|z| dot(&relu_forward(z), &r), &x, i)) < 1e-3);
        }

        let rp = Tensor::uniform(&[2, 2, 2, 3], 1.0, &mut rng);
        let g = avgpool2x2_backward(x.shape(), &rp).unwrap();
        for i in 0..x.len() {
            let n = central_diff(|z| dot(&avgpool2x2_forward(z).unwrap(), &rp), &x, i);
            assert!(rel(g.data()[i], n) < 1e-3);
        }

        let z = Tensor::uniform(&[3, 5], 2.0, &mut rng);
        let rs = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let g = softmax_backward(&softmax_rows(&z).unwrap(), &rs).unwrap();
        for i in 0..z.len() {
            let n = central_diff(|t| dot(&softmax_rows(t).unwrap(), &rs), &z, i);
            assert!(rel(g.data()[i], n) < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let k = logits.len();
            let x = Tensor::new(&[1, k], logits.clone()).unwrap();
            let p = softmax_rows(&x).unwrap();
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted = Tensor::new(&[1, k], logits.iter().map(|v| v + shift).collect()).unwrap();
            let q = softmax_rows(&shifted).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
