//! Global pooling heads over a segment-level embedding sequence
//! `H = {h_1, ..., h_N}` (`N x D`, one row per time frame).
//!
//! The free functions operate on a single sequence; [`PoolHead`] wraps them
//! as a batched layer over `B x N x D` tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_nn::{
    he_bound, join, Layer, Linear, Mode, NamedState, NamedStateMut, NnError, Param, StateMut,
    StateRef, Tensor,
};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("embedding sequence is empty")]
    EmptySequence,
    #[error("{dim} channels cannot be split into {heads} attention heads")]
    HeadMismatch { dim: usize, heads: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl From<PoolError> for NnError {
    fn from(e: PoolError) -> Self {
        NnError::ShapeMismatch(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PoolError>;

/// Which global pooling operator the model head uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolHeadKind {
    Max,
    Avg,
    /// Max plus average.
    Add,
    /// Mean and population variance projected back to `D` by a linear layer.
    Statistic,
    /// Multi-head attention with `heads` channel groups.
    Attention { heads: usize },
}

pub const DEFAULT_ATTENTION_HEADS: usize = 4;

impl PoolHeadKind {
    /// The five heads in reporting order.
    pub fn all() -> [PoolHeadKind; 5] {
        [
            PoolHeadKind::Max,
            PoolHeadKind::Avg,
            PoolHeadKind::Add,
            PoolHeadKind::Statistic,
            PoolHeadKind::Attention {
                heads: DEFAULT_ATTENTION_HEADS,
            },
        ]
    }

    pub fn name(&self) -> String {
        match self {
            PoolHeadKind::Max => "max".into(),
            PoolHeadKind::Avg => "avg".into(),
            PoolHeadKind::Add => "max+avg".into(),
            PoolHeadKind::Statistic => "statistic".into(),
            PoolHeadKind::Attention { heads } if *heads == DEFAULT_ATTENTION_HEADS => {
                "attention".into()
            }
            PoolHeadKind::Attention { heads } => format!("attention{heads}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max" => Some(PoolHeadKind::Max),
            "avg" => Some(PoolHeadKind::Avg),
            "max+avg" | "add" => Some(PoolHeadKind::Add),
            "statistic" => Some(PoolHeadKind::Statistic),
            "attention" => Some(PoolHeadKind::Attention {
                heads: DEFAULT_ATTENTION_HEADS,
            }),
            other => other
                .strip_prefix("attention")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k > 0)
                .map(|heads| PoolHeadKind::Attention { heads }),
        }
    }
}

fn dims(h: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = h
        .dims2()
        .map_err(|e| PoolError::ShapeMismatch(e.to_string()))?;
    if n == 0 {
        return Err(PoolError::EmptySequence);
    }
    Ok((n, d))
}

fn rows(h: &Tensor, d: usize) -> impl Iterator<Item = &[f64]> {
    h.data().chunks(d)
}

/// Elementwise maximum over instances.
pub fn pool_max(h: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = dims(h)?;
    let mut out = vec![f64::NEG_INFINITY; d];
    for row in rows(h, d) {
        for (o, v) in out.iter_mut().zip(row) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

/// Elementwise mean over instances.
pub fn pool_avg(h: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = dims(h)?;
    let mut out = vec![0.0; d];
    for row in rows(h, d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

/// Max pooling plus average pooling.
pub fn pool_add(h: &Tensor) -> Result<Vec<f64>> {
    let m = pool_max(h)?;
    let a = pool_avg(h)?;
    Ok(m.iter().zip(&a).map(|(x, y)| x + y).collect())
}

/// Per-channel mean and population variance, concatenated (`2D` values).
pub fn mean_and_variance(h: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = dims(h)?;
    let mean = pool_avg(h)?;
    let mut var = vec![0.0; d];
    for row in rows(h, d) {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    let mut z = mean;
    z.extend(var);
    Ok(z)
}

/// `fc_weight · [mean; variance] + fc_bias` with `fc_weight` of shape `D_out x 2D`.
pub fn pool_statistic(h: &Tensor, fc_weight: &Tensor, fc_bias: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = dims(h)?;
    let (d_out, d_in) = fc_weight
        .dims2()
        .map_err(|e| PoolError::ShapeMismatch(e.to_string()))?;
    if d_in != 2 * d || fc_bias.shape() != [d_out] {
        return Err(PoolError::ShapeMismatch(format!(
            "statistic fc {:?} + bias {:?} for {d} channels",
            fc_weight.shape(),
            fc_bias.shape()
        )));
    }
    let z = mean_and_variance(h)?;
    Ok(fc_weight
        .data()
        .chunks(d_in)
        .zip(fc_bias.data())
        .map(|(w, b)| b + w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>())
        .collect())
}

fn check_heads(d: usize, heads: &Tensor) -> Result<(usize, usize)> {
    let (k, m) = heads
        .dims2()
        .map_err(|e| PoolError::ShapeMismatch(e.to_string()))?;
    if k == 0 || d % k != 0 {
        return Err(PoolError::HeadMismatch { dim: d, heads: k });
    }
    if m != d / k {
        return Err(PoolError::ShapeMismatch(format!(
            "score vectors of length {m}, expected {}",
            d / k
        )));
    }
    Ok((k, m))
}

/// Attention weights `alpha[k][i]` (normalized over instances) for every head.
pub fn attention_weights(h: &Tensor, heads: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d) = dims(h)?;
    let (k, m) = check_heads(d, heads)?;
    let mut all = Vec::with_capacity(k);
    for head in 0..k {
        let w = &heads.data()[head * m..(head + 1) * m];
        let logits: Vec<f64> = (0..n)
            .map(|i| {
                let block = &h.data()[i * d + head * m..i * d + (head + 1) * m];
                block.iter().zip(w).map(|(a, b)| a * b).sum()
            })
            .collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let alpha: Vec<f64> = logits.iter().map(|e| (e - max).exp()).collect();
        let total: f64 = alpha.iter().sum();
        all.push(alpha.into_iter().map(|a| a / total).collect());
    }
    Ok(all)
}

/// Multi-head attention pooling: channels split into `K` contiguous groups,
/// each group aggregated with its own instance weights.
pub fn pool_attention(h: &Tensor, heads: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = dims(h)?;
    let (_, m) = check_heads(d, heads)?;
    let alphas = attention_weights(h, heads)?;
    let mut out = vec![0.0; d];
    for (head, alpha) in alphas.iter().enumerate() {
        for (row, a) in rows(h, d).zip(alpha) {
            for j in head * m..(head + 1) * m {
                out[j] += a * row[j];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`pool_max`]: each channel's gradient goes to its first argmax row.
pub fn pool_max_backward(h: &Tensor, grad_out: &[f64]) -> Result<Tensor> {
    let (n, d) = dims(h)?;
    check_len(grad_out, d)?;
    let mut g = vec![0.0; n * d];
    for j in 0..d {
        let mut best = 0;
        for i in 1..n {
            if h.data()[i * d + j] > h.data()[best * d + j] {
                best = i;
            }
        }
        g[best * d + j] = grad_out[j];
    }
    Ok(Tensor::new(&[n, d], g).expect("shape matches"))
}

pub fn pool_avg_backward(h: &Tensor, grad_out: &[f64]) -> Result<Tensor> {
    let (n, d) = dims(h)?;
    check_len(grad_out, d)?;
    let row: Vec<f64> = grad_out.iter().map(|g| g / n as f64).collect();
    Ok(Tensor::new(&[n, d], row.repeat(n)).expect("shape matches"))
}

pub fn pool_add_backward(h: &Tensor, grad_out: &[f64]) -> Result<Tensor> {
    let a = pool_max_backward(h, grad_out)?;
    let b = pool_avg_backward(h, grad_out)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::new(h.shape(), data).expect("shape matches"))
}

/// Gradient of the concatenated mean/variance w.r.t. `H`, given the gradient
/// on the `2D` statistics vector.
pub fn mean_and_variance_backward(h: &Tensor, grad_stats: &[f64]) -> Result<Tensor> {
    let (n, d) = dims(h)?;
    check_len(grad_stats, 2 * d)?;
    let mean = pool_avg(h)?;
    let nf = n as f64;
    let mut g = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            g[i * d + j] =
                grad_stats[j] / nf + grad_stats[d + j] * 2.0 * (h.data()[i * d + j] - mean[j]) / nf;
        }
    }
    Ok(Tensor::new(&[n, d], g).expect("shape matches"))
}

/// Statistic pooling backward: `(grad_H, grad_fc_weight, grad_fc_bias)`.
pub fn pool_statistic_backward(
    h: &Tensor,
    fc_weight: &Tensor,
    grad_out: &[f64],
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, d) = dims(h)?;
    let (d_out, d_in) = fc_weight
        .dims2()
        .map_err(|e| PoolError::ShapeMismatch(e.to_string()))?;
    if d_in != 2 * d {
        return Err(PoolError::ShapeMismatch("fc input width must be 2D".into()));
    }
    check_len(grad_out, d_out)?;
    let z = mean_and_variance(h)?;
    let mut gz = vec![0.0; d_in];
    let mut gw = vec![0.0; d_out * d_in];
    for (o, g) in grad_out.iter().enumerate() {
        let w = &fc_weight.data()[o * d_in..(o + 1) * d_in];
        for p in 0..d_in {
            gz[p] += g * w[p];
            gw[o * d_in + p] = g * z[p];
        }
    }
    Ok((
        mean_and_variance_backward(h, &gz)?,
        Tensor::new(&[d_out, d_in], gw).expect("shape matches"),
        Tensor::new(&[d_out], grad_out.to_vec()).expect("shape matches"),
    ))
}

/// Attention pooling backward: `(grad_H, grad_heads)`.
pub fn pool_attention_backward(
    h: &Tensor,
    heads: &Tensor,
    grad_out: &[f64],
) -> Result<(Tensor, Tensor)> {
    let (n, d) = dims(h)?;
    let (k, m) = check_heads(d, heads)?;
    check_len(grad_out, d)?;
    let alphas = attention_weights(h, heads)?;
    let mut gh = vec![0.0; n * d];
    let mut gw = vec![0.0; k * m];
    for (head, alpha) in alphas.iter().enumerate() {
        let cols = head * m..(head + 1) * m;
        let g = &grad_out[cols.clone()];
        let w = &heads.data()[head * m..(head + 1) * m];
        // s_i = g · block_i
        let s: Vec<f64> = (0..n)
            .map(|i| {
                h.data()[i * d + cols.start..i * d + cols.end]
                    .iter()
                    .zip(g)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let mean_s: f64 = alpha.iter().zip(&s).map(|(a, b)| a * b).sum();
        for i in 0..n {
            let de = alpha[i] * (s[i] - mean_s);
            let block = &h.data()[i * d + cols.start..i * d + cols.end];
            for p in 0..m {
                gh[i * d + cols.start + p] = alpha[i] * g[p] + de * w[p];
                gw[head * m + p] += de * block[p];
            }
        }
    }
    Ok((
        Tensor::new(&[n, d], gh).expect("shape matches"),
        Tensor::new(&[k, m], gw).expect("shape matches"),
    ))
}

fn check_len(g: &[f64], want: usize) -> Result<()> {
    if g.len() != want {
        return Err(PoolError::ShapeMismatch(format!(
            "gradient has {} values, expected {want}",
            g.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum HeadParams {
    None,
    Statistic(Linear),
    Attention(Param),
}

/// Batched pooling layer mapping `B x N x D` to `B x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolHead {
    pub kind: PoolHeadKind,
    pub dim: usize,
    params: HeadParams,
    cache: Option<Tensor>,
}

impl PoolHead {
    pub fn new(kind: PoolHeadKind, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let params = match kind {
            PoolHeadKind::Max | PoolHeadKind::Avg | PoolHeadKind::Add => HeadParams::None,
            PoolHeadKind::Statistic => HeadParams::Statistic(Linear::new(2 * dim, dim, rng)),
            PoolHeadKind::Attention { heads } => {
                if heads == 0 || dim % heads != 0 {
                    return Err(PoolError::HeadMismatch { dim, heads });
                }
                let m = dim / heads;
                HeadParams::Attention(Param::new(Tensor::uniform(&[heads, m], he_bound(m), rng)))
            }
        };
        Ok(Self {
            kind,
            dim,
            params,
            cache: None,
        })
    }

    pub fn statistic_fc(&self) -> Option<&Linear> {
        match &self.params {
            HeadParams::Statistic(l) => Some(l),
            _ => None,
        }
    }

    pub fn statistic_fc_mut(&mut self) -> Option<&mut Linear> {
        match &mut self.params {
            HeadParams::Statistic(l) => Some(l),
            _ => None,
        }
    }

    pub fn attention_scores(&self) -> Option<&Tensor> {
        match &self.params {
            HeadParams::Attention(p) => Some(&p.value),
            _ => None,
        }
    }

    pub fn attention_scores_mut(&mut self) -> Option<&mut Tensor> {
        match &mut self.params {
            HeadParams::Attention(p) => Some(&mut p.value),
            _ => None,
        }
    }

    fn split(&self, x: &Tensor) -> std::result::Result<(usize, usize), NnError> {
        match x.shape() {
            [b, n, d] if *d == self.dim => {
                if *n == 0 {
                    return Err(PoolError::EmptySequence.into());
                }
                Ok((*b, *n))
            }
            other => Err(NnError::ShapeMismatch(format!(
                "pool head over {} channels got {other:?}",
                self.dim
            ))),
        }
    }

    fn sequence(x: &Tensor, s: usize, n: usize, d: usize) -> Tensor {
        Tensor::new(&[n, d], x.data()[s * n * d..(s + 1) * n * d].to_vec()).expect("slice matches")
    }
}

impl Layer for PoolHead {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> crate::tensor_nn::Result<Tensor> {
        self.cache = Some(x.clone());
        if let HeadParams::Statistic(fc) = &mut self.params {
            let (b, n) = match x.shape() {
                [b, n, d] if *d == self.dim && *n > 0 => (*b, *n),
                other => {
                    return Err(NnError::ShapeMismatch(format!(
                        "pool head over {} channels got {other:?}",
                        self.dim
                    )))
                }
            };
            let z = statistics_batch(x, b, n, self.dim)?;
            return fc.forward(&z, mode);
        }
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        let x = self.cache.take().ok_or(NnError::NoCache)?;
        let (b, n) = self.split(&x)?;
        let d = self.dim;
        let mut gx = Vec::with_capacity(x.len());
        match &mut self.params {
            HeadParams::Statistic(fc) => {
                let gz = fc.backward(grad_out)?;
                for s in 0..b {
                    let h = Self::sequence(&x, s, n, d);
                    let g = mean_and_variance_backward(&h, &gz.data()[s * 2 * d..(s + 1) * 2 * d])?;
                    gx.extend_from_slice(g.data());
                }
            }
            HeadParams::Attention(p) => {
                if grad_out.shape() != [b, d] {
                    return Err(NnError::ShapeMismatch("pool grad shape".into()));
                }
                let scores = p.value.clone();
                let gw = p.grad_mut();
                for s in 0..b {
                    let h = Self::sequence(&x, s, n, d);
                    let (gh, gs) =
                        pool_attention_backward(&h, &scores, &grad_out.data()[s * d..(s + 1) * d])?;
                    gx.extend_from_slice(gh.data());
                    for (a, v) in gw.iter_mut().zip(gs.data()) {
                        *a += v;
                    }
                }
            }
            HeadParams::None => {
                if grad_out.shape() != [b, d] {
                    return Err(NnError::ShapeMismatch("pool grad shape".into()));
                }
                for s in 0..b {
                    let h = Self::sequence(&x, s, n, d);
                    let g = &grad_out.data()[s * d..(s + 1) * d];
                    let gh = match self.kind {
                        PoolHeadKind::Max => pool_max_backward(&h, g)?,
                        PoolHeadKind::Avg => pool_avg_backward(&h, g)?,
                        _ => pool_add_backward(&h, g)?,
                    };
                    gx.extend_from_slice(gh.data());
                }
            }
        }
        self.cache = Some(x);
        Tensor::new(&[b, n, d], gx)
    }

    fn infer(&self, x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        let (b, n) = self.split(x)?;
        let d = self.dim;
        if let HeadParams::Statistic(fc) = &self.params {
            let z = statistics_batch(x, b, n, d)?;
            return fc.infer(&z);
        }
        let mut out = Vec::with_capacity(b * d);
        for s in 0..b {
            let h = Self::sequence(x, s, n, d);
            let v = match (&self.params, self.kind) {
                (HeadParams::Attention(p), _) => pool_attention(&h, &p.value)?,
                (_, PoolHeadKind::Max) => pool_max(&h)?,
                (_, PoolHeadKind::Avg) => pool_avg(&h)?,
                _ => pool_add(&h)?,
            };
            out.extend(v);
        }
        Tensor::new(&[b, d], out)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.params {
            HeadParams::None => Vec::new(),
            HeadParams::Statistic(fc) => fc.params_mut(),
            HeadParams::Attention(p) => vec![p],
        }
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut NamedState<'a>) {
        match &self.params {
            HeadParams::None => {}
            HeadParams::Statistic(fc) => fc.state(&join(prefix, "fc"), out),
            HeadParams::Attention(p) => {
                out.push((join(prefix, "scores"), StateRef::Float(&p.value)))
            }
        }
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedStateMut<'a>) {
        match &mut self.params {
            HeadParams::None => {}
            HeadParams::Statistic(fc) => fc.state_mut(&join(prefix, "fc"), out),
            HeadParams::Attention(p) => out.push((join(prefix, "scores"), StateMut::Param(p))),
        }
    }
}

fn statistics_batch(x: &Tensor, b: usize, n: usize, d: usize) -> crate::tensor_nn::Result<Tensor> {
    let mut z = Vec::with_capacity(b * 2 * d);
    for s in 0..b {
        z.extend(mean_and_variance(&PoolHead::sequence(x, s, n, d))?);
    }
    Tensor::new(&[b, 2 * d], z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(&[rows.len(), d], rows.concat()).unwrap()
    }

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[n, d], 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Scan-all-rows reference with no shared code.
    fn brute_max(h: &Tensor) -> Vec<f64> {
        let (n, d) = h.dims2().unwrap();
        (0..d)
            .map(|j| (0..n).map(|i| h.data()[i * d + j]).fold(f64::MIN, f64::max))
            .collect()
    }

    fn brute_attention(h: &Tensor, w: &Tensor) -> Vec<f64> {
        let (n, d) = h.dims2().unwrap();
        let (k, m) = w.dims2().unwrap();
        let mut out = vec![0.0; d];
        for head in 0..k {
            let e: Vec<f64> = (0..n)
                .map(|i| (0..m).map(|p| w.data()[head * m + p] * h.data()[i * d + head * m + p]).sum())
                .collect();
            let num: Vec<f64> = e.iter().map(|v: &f64| v.exp()).collect();
            let den: f64 = num.iter().sum();
            for p in 0..m {
                out[head * m + p] =
                    (0..n).map(|i| num[i] * h.data()[i * d + head * m + p]).sum::<f64>() / den;
            }
        }
        out
    }

    #[test]
    fn max_examples() {
        assert_eq!(pool_max(&mat(&[&[1.0, 4.0], &[3.0, 2.0]])).unwrap(), vec![3.0, 4.0]);
        assert_eq!(pool_max(&mat(&[&[1.5, -2.0]])).unwrap(), vec![1.5, -2.0]);
        let h = random(50, 8, 1);
        assert_eq!(pool_max(&h).unwrap(), brute_max(&h));
    }

    #[test]
    fn avg_and_add_examples() {
        assert_eq!(pool_avg(&mat(&[&[1.0, 3.0], &[3.0, 1.0]])).unwrap(), vec![2.0, 2.0]);
        assert_eq!(pool_avg(&mat(&[&[0.25, 7.0]])).unwrap(), vec![0.25, 7.0]);
        assert_eq!(pool_add(&mat(&[&[1.0, 4.0], &[3.0, 2.0]])).unwrap(), vec![5.0, 7.0]);
        assert_eq!(pool_add(&mat(&[&[0.5, -1.0]])).unwrap(), vec![1.0, -2.0]);
        let h = random(20, 6, 2);
        let want: Vec<f64> = pool_max(&h)
            .unwrap()
            .iter()
            .zip(pool_avg(&h).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(pool_add(&h).unwrap(), want);
    }

    #[test]
    fn statistic_examples() {
        let h = mat(&[&[1.0, 3.0], &[3.0, 1.0]]);
        assert_eq!(mean_and_variance(&h).unwrap(), vec![2.0, 2.0, 1.0, 1.0]);
        let mut fc = Tensor::zeros(&[2, 4]);
        fc.data_mut()[0] = 1.0;
        fc.data_mut()[5] = 1.0;
        assert_eq!(pool_statistic(&h, &fc, &Tensor::zeros(&[2])).unwrap(), vec![2.0, 2.0]);

        let one = mat(&[&[0.5, -1.5]]);
        let w = random(3, 4, 3);
        let b = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let got = pool_statistic(&one, &w, &b).unwrap();
        for o in 0..3 {
            let want = b.data()[o] + w.data()[o * 4] * 0.5 + w.data()[o * 4 + 1] * -1.5;
            assert!((got[o] - want).abs() < 1e-12);
        }
        assert!(matches!(
            pool_statistic(&h, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])),
            Err(PoolError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn statistic_matches_two_pass_oracle() {
        let h = random(30, 4, 11);
        let fc = random(3, 8, 12);
        let bias = random(1, 3, 13).reshape(&[3]).unwrap();
        let mut mean = [0.0; 4];
        for i in 0..30 {
            for j in 0..4 {
                mean[j] += h.data()[i * 4 + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= 30.0);
        let mut var = [0.0; 4];
        for i in 0..30 {
            for j in 0..4 {
                var[j] += (h.data()[i * 4 + j] - mean[j]).powi(2) / 30.0;
            }
        }
        let z: Vec<f64> = mean.iter().chain(&var).copied().collect();
        let want: Vec<f64> = (0..3)
            .map(|o| bias.data()[o] + (0..8).map(|p| fc.data()[o * 8 + p] * z[p]).sum::<f64>())
            .collect();
        assert!(close(&pool_statistic(&h, &fc, &bias).unwrap(), &want, 1e-9));
    }

    #[test]
    fn single_instance_identities() {
        let h = mat(&[&[0.5, -2.0, 3.0, 1.0]]);
        assert_eq!(pool_avg(&h).unwrap(), h.data());
        assert_eq!(pool_max(&h).unwrap(), h.data());
        assert_eq!(pool_add(&h).unwrap(), vec![1.0, -4.0, 6.0, 2.0]);
        assert_eq!(&mean_and_variance(&h).unwrap()[4..], &[0.0; 4]);
    }

    #[test]
    fn attention_examples() {
        let h = random(30, 8, 4);
        let zero = Tensor::zeros(&[4, 2]);
        assert!(close(&pool_attention(&h, &zero).unwrap(), &pool_avg(&h).unwrap(), 1e-12));

        let single = mat(&[&[0.3, -0.7, 1.1, 2.0]]);
        let w = random(2, 2, 5);
        assert!(close(&pool_attention(&single, &w).unwrap(), single.data(), 1e-15));

        // one instance scored 20 logits above the rest dominates
        let mut h = Tensor::zeros(&[5, 2]);
        for i in 0..5 {
            h.data_mut()[i * 2] = if i == 3 { 21.0 } else { 1.0 };
            h.data_mut()[i * 2 + 1] = 0.1 * i as f64;
        }
        let w = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let out = pool_attention(&h, &w).unwrap();
        assert!((out[0] - 21.0).abs() < 1e-6 * 21.0 && (out[1] - 0.3).abs() < 1e-6);

        assert!(matches!(
            pool_attention(&random(3, 6, 6), &Tensor::zeros(&[4, 1])),
            Err(PoolError::HeadMismatch { dim: 6, heads: 4 })
        ));
    }

    #[test]
    fn empty_sequences_are_rejected() {
        let h = Tensor::zeros(&[0, 4]);
        assert!(matches!(pool_max(&h), Err(PoolError::EmptySequence)));
        assert!(matches!(pool_avg(&h), Err(PoolError::EmptySequence)));
        assert!(matches!(pool_add(&h), Err(PoolError::EmptySequence)));
        assert!(matches!(
            pool_statistic(&h, &Tensor::zeros(&[4, 8]), &Tensor::zeros(&[4])),
            Err(PoolError::EmptySequence)
        ));
        assert!(matches!(
            pool_attention(&h, &Tensor::zeros(&[2, 2])),
            Err(PoolError::EmptySequence)
        ));
    }

    #[test]
    fn simple_backward_examples() {
        let h = random(7, 3, 7);
        let g = [0.5, -1.0, 2.0];
        let ga = pool_avg_backward(&h, &g).unwrap();
        for row in ga.data().chunks(3) {
            assert!(close(row, &[0.5 / 7.0, -1.0 / 7.0, 2.0 / 7.0], 1e-15));
        }
        let gm = pool_max_backward(&h, &g).unwrap();
        for j in 0..3 {
            let nz = (0..7).filter(|i| gm.data()[i * 3 + j] != 0.0).count();
            assert_eq!(nz, 1);
        }
        // ties go to the lowest index
        let tied = mat(&[&[1.0], &[5.0], &[5.0]]);
        assert_eq!(pool_max_backward(&tied, &[1.0]).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn all_heads_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in PoolHeadKind::all() {
            let mut head = PoolHead::new(kind, 8, &mut rng).unwrap();
            // a shuffled grid with spacing 0.02 keeps max pooling away from ties
            let mut grid: Vec<f64> = (0..80).map(|i| -0.8 + 0.02 * i as f64).collect();
            rand::seq::SliceRandom::shuffle(grid.as_mut_slice(), &mut rng);
            let x = Tensor::new(&[2, 5, 8], grid).unwrap();
            let report = grad_check(&mut head, &x, 1e-3, None, 8);
            assert!(report.pass, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in PoolHeadKind::all() {
            assert_eq!(PoolHeadKind::parse(&kind.name()), Some(kind));
        }
        assert_eq!(
            PoolHeadKind::parse("attention8"),
            Some(PoolHeadKind::Attention { heads: 8 })
        );
        assert_eq!(PoolHeadKind::parse("gated"), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn permutation_invariance(n in 1usize..30, seed in 0u64..1000) {
            let d = 8;
            let h = random(n, d, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let p = Tensor::new(&[n, d], order.iter().flat_map(|&i| h.data()[i * d..(i + 1) * d].to_vec()).collect()).unwrap();
            let fc = random(d, 2 * d, seed + 2);
            let bias = Tensor::zeros(&[d]);
            let w = random(4, 2, seed + 3);
            prop_assert!(close(&pool_max(&h).unwrap(), &pool_max(&p).unwrap(), 1e-7));
            prop_assert!(close(&pool_avg(&h).unwrap(), &pool_avg(&p).unwrap(), 1e-7));
            prop_assert!(close(&pool_add(&h).unwrap(), &pool_add(&p).unwrap(), 1e-7));
            prop_assert!(close(&pool_statistic(&h, &fc, &bias).unwrap(), &pool_statistic(&p, &fc, &bias).unwrap(), 1e-7));
            prop_assert!(close(&pool_attention(&h, &w).unwrap(), &pool_attention(&p, &w).unwrap(), 1e-7));
        }

        #[test]
        fn attention_stays_in_convex_hull(n in 1usize..40, seed in 0u64..1000, gain in 0.1f64..10.0) {
            let h = random(n, 12, seed);
            let w = Tensor::uniform(&[3, 4], gain, &mut ChaCha8Rng::seed_from_u64(seed + 9));
            let out = pool_attention(&h, &w).unwrap();
            let lo = h.data().chunks(12).fold(vec![f64::MAX; 12], |m, r| m.iter().zip(r).map(|(a, b)| a.min(*b)).collect());
            let hi = brute_max(&h);
            for j in 0..12 {
                prop_assert!(out[j] >= lo[j] - 1e-12 && out[j] <= hi[j] + 1e-12);
            }
            prop_assert!(close(&out, &brute_attention(&h, &w), 1e-9));
        }

        #[test]
        fn positive_scaling(n in 1usize..20, seed in 0u64..1000, c in 0.1f64..5.0) {
            let h = random(n, 4, seed);
            let hs = Tensor::new(h.shape(), h.data().iter().map(|v| v * c).collect()).unwrap();
            let scale = |v: Vec<f64>| v.into_iter().map(|x| x * c).collect::<Vec<_>>();
            prop_assert!(close(&pool_max(&hs).unwrap(), &scale(pool_max(&h).unwrap()), 1e-12));
            prop_assert!(close(&pool_avg(&hs).unwrap(), &scale(pool_avg(&h).unwrap()), 1e-12));
            prop_assert!(close(&pool_add(&hs).unwrap(), &scale(pool_add(&h).unwrap()), 1e-12));
            let z = mean_and_variance(&h).unwrap();
            let zs = mean_and_variance(&hs).unwrap();
            for j in 0..4 {
                prop_assert!((zs[j] - c * z[j]).abs() < 1e-12);
                prop_assert!((zs[4 + j] - c * c * z[4 + j]).abs() < 1e-9);
            }
        }
    }
}
