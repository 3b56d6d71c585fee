use super::{
    join, Layer, Mode, NamedState, NamedStateMut, NnError, Param, Result, StateMut, StateRef,
    Tensor,
};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the previous running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Which axis holds the normalized channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelAxis {
    /// `N x C x H x W`, statistics over N, H, W.
    Second,
    /// Any shape whose trailing extent is the channel count, statistics over
    /// every leading position. Used to normalize log-mel inputs per mel bin.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub axis: ChannelAxis,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self::with_axis(channels, ChannelAxis::Second)
    }

    pub fn with_axis(channels: usize, axis: ChannelAxis) -> Self {
        Self {
            channels,
            axis,
            gamma: Param::new(Tensor::filled(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            cache: None,
        }
    }

    /// Returns (outer, inner) so element `(o, c, i)` lives at `(o * C + c) * inner + i`.
    fn layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        let shape = x.shape();
        match self.axis {
            ChannelAxis::Second => {
                let (n, c, h, w) = x.dims4()?;
                if c != self.channels {
                    return Err(NnError::ShapeMismatch(format!(
                        "batch norm over {} channels got {c}",
                        self.channels
                    )));
                }
                Ok((n, h * w))
            }
            ChannelAxis::Last => {
                if shape.last() != Some(&self.channels) {
                    return Err(NnError::ShapeMismatch(format!(
                        "batch norm over {} trailing channels got {shape:?}",
                        self.channels
                    )));
                }
                Ok((x.len() / self.channels, 1))
            }
        }
    }

    fn for_each_channel(
        &self,
        data: &[f64],
        outer: usize,
        inner: usize,
        mut f: impl FnMut(usize, &[f64]),
    ) {
        let c = self.channels;
        for o in 0..outer {
            for ch in 0..c {
                let start = (o * c + ch) * inner;
                f(ch, &data[start..start + inner]);
            }
        }
    }

    fn batch_stats(&self, x: &Tensor, outer: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
        let count = (outer * inner) as f64;
        let mut mean = vec![0.0; self.channels];
        self.for_each_channel(x.data(), outer, inner, |ch, s| mean[ch] += s.iter().sum::<f64>());
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; self.channels];
        self.for_each_channel(x.data(), outer, inner, |ch, s| {
            var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>()
        });
        var.iter_mut().for_each(|v| *v /= count);
        (mean, var)
    }

    fn normalize(
        &self,
        x: &Tensor,
        outer: usize,
        inner: usize,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let mut x_hat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        for o in 0..outer {
            for ch in 0..c {
                let start = (o * c + ch) * inner;
                for i in start..start + inner {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = h;
                    y[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
        (x_hat, y)
    }

    fn running_inv_std(&self) -> Vec<f64> {
        self.running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect()
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (outer, inner) = self.layout(x)?;
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let count = outer * inner;
                if count < 2 {
                    return Err(NnError::DegenerateBatch);
                }
                let (mean, var) = self.batch_stats(x, outer, inner);
                let unbias = count as f64 / (count - 1) as f64;
                let rm = self.running_mean.data_mut();
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                let rv = self.running_var.data_mut();
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_inv_std()),
        };
        let (x_hat, y) = self.normalize(x, outer, inner, &mean, &inv_std);
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            mode,
            shape: x.shape().to_vec(),
        });
        Tensor::new(x.shape(), y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or(NnError::NoCache)?;
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(NnError::ShapeMismatch(format!(
                "batch norm grad {:?} vs input {:?}",
                grad_out.shape(),
                cache.shape
            )));
        }
        let (outer, inner) = self.layout(grad_out)?;
        let c = self.channels;
        let g = grad_out.data();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let start = (o * c + ch) * inner;
                for i in start..start + inner {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * cache.x_hat[i];
                }
            }
        }
        for (d, s) in self.gamma.grad_mut().iter_mut().zip(&sum_gx) {
            *d += s;
        }
        for (d, s) in self.beta.grad_mut().iter_mut().zip(&sum_g) {
            *d += s;
        }
        let gamma = self.gamma.value.data();
        let m = (outer * inner) as f64;
        let mut dx = vec![0.0; g.len()];
        for o in 0..outer {
            for ch in 0..c {
                let start = (o * c + ch) * inner;
                let k = gamma[ch] * cache.inv_std[ch];
                for i in start..start + inner {
                    dx[i] = match cache.mode {
                        Mode::Train => {
                            k * (g[i] - sum_g[ch] / m - cache.x_hat[i] * sum_gx[ch] / m)
                        }
                        Mode::Eval => k * g[i],
                    };
                }
            }
        }
        Tensor::new(grad_out.shape(), dx)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (outer, inner) = self.layout(x)?;
        let inv_std = self.running_inv_std();
        let (_, y) = self.normalize(x, outer, inner, self.running_mean.data(), &inv_std);
        Tensor::new(x.shape(), y)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut NamedState<'a>) {
        out.push((join(prefix, "gamma"), StateRef::Float(&self.gamma.value)));
        out.push((join(prefix, "beta"), StateRef::Float(&self.beta.value)));
        out.push((join(prefix, "running_mean"), StateRef::Float(&self.running_mean)));
        out.push((join(prefix, "running_var"), StateRef::Float(&self.running_var)));
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedStateMut<'a>) {
        out.push((join(prefix, "gamma"), StateMut::Param(&mut self.gamma)));
        out.push((join(prefix, "beta"), StateMut::Param(&mut self.beta)));
        out.push((join(prefix, "running_mean"), StateMut::Tensor(&mut self.running_mean)));
        out.push((join(prefix, "running_var"), StateMut::Tensor(&mut self.running_var)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_values(t: &Tensor, ch: usize) -> Vec<f64> {
        let (n, c, h, w) = t.dims4().unwrap();
        (0..n)
            .flat_map(|s| {
                let start = (s * c + ch) * h * w;
                t.data()[start..start + h * w].to_vec()
            })
            .collect()
    }

    #[test]
    fn standardized_input_passes_through() {
        // four values with mean 0 and population variance 1
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchNorm::new(3);
        bn.gamma.value = Tensor::zeros(&[3]);
        bn.beta.value = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::uniform(&[2, 3, 2, 2], 1.0, &mut rng);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..3 {
            assert!(channel_values(&y, ch).iter().all(|&v| v == bn.beta.value.data()[ch]));
        }
    }

    #[test]
    fn train_mode_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bn = BatchNorm::new(2);
        bn.gamma.value = Tensor::new(&[2], vec![1.5, 0.5]).unwrap();
        bn.beta.value = Tensor::new(&[2], vec![-0.3, 0.7]).unwrap();
        let x = Tensor::uniform(&[4, 2, 5, 5], 3.0, &mut rng);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let v = channel_values(&y, ch);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!((mean - bn.beta.value.data()[ch]).abs() < 1e-3);
            assert!((var - bn.gamma.value.data()[ch].powi(2)).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn single_value_per_channel_is_degenerate() {
        let mut bn = BatchNorm::new(2);
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(matches!(bn.forward(&x, Mode::Train), Err(NnError::DegenerateBatch)));
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_mode_is_affine_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm::new(2);
        bn.running_mean = Tensor::new(&[2], vec![0.3, -0.2]).unwrap();
        bn.running_var = Tensor::new(&[2], vec![2.0, 0.5]).unwrap();
        bn.gamma.value = Tensor::new(&[2], vec![1.2, -0.7]).unwrap();
        let a = Tensor::uniform(&[2, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 2, 3, 3], 1.0, &mut rng);
        let (s, t) = (0.7, 0.3);
        let mix = Tensor::new(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| s * x + t * y).collect(),
        )
        .unwrap();
        let (ya, yb, ym) = (bn.infer(&a).unwrap(), bn.infer(&b).unwrap(), bn.infer(&mix).unwrap());
        // affine maps preserve affine combinations whose weights sum to one
        for i in 0..ym.len() {
            assert!((ym.data()[i] - (s * ya.data()[i] + t * yb.data()[i])).abs() < 1e-12);
        }
        assert_eq!(bn.infer(&a).unwrap(), ya);
    }

    #[test]
    fn last_axis_normalizes_trailing_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm::with_axis(4, ChannelAxis::Last);
        let x = Tensor::uniform(&[2, 1, 6, 4], 5.0, &mut rng);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..4 {
            let v: Vec<f64> = y.data().iter().skip(ch).step_by(4).copied().collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm::new(3);
        bn.gamma.value = Tensor::uniform(&[3], 1.0, &mut rng);
        bn.beta.value = Tensor::uniform(&[3], 1.0, &mut rng);
        let x = Tensor::uniform(&[2, 3, 3, 2], 1.0, &mut rng);
        let report = grad_check(&mut bn, &x, 1e-3, None, 9);
        assert!(report.pass, "{report:?}");

        let mut bn = BatchNorm::with_axis(4, ChannelAxis::Last);
        let x = Tensor::uniform(&[2, 1, 3, 4], 1.0, &mut rng);
        assert!(grad_check(&mut bn, &x, 1e-3, None, 9).pass);
    }
}
