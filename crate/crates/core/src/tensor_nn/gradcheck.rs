use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{join, Layer, Mode, NamedState, NamedStateMut, Param, Result, Tensor};

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer + Send + Sync>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer + Send + Sync>>) -> Self {
        Self { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut NamedState<'a>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.state(&join(prefix, &i.to_string()), out);
        }
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedStateMut<'a>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.state_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Coordinates compared (input and parameter entries).
    pub checked: usize,
    pub pass: bool,
}

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Relative error with a small absolute floor so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares a layer's backward pass with central differences of the scalar
/// loss `sum(r * forward(x))` for a fixed random `r`, over every input and
/// parameter coordinate, or a random subset of `max_coords` of them.
/// Forward passes run in train mode.
pub fn grad_check(
    layer: &mut dyn Layer,
    input: &Tensor,
    tolerance: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> GradReport {
    grad_check_with_step(layer, input, tolerance, max_coords, seed, FD_STEP)
}

/// [`grad_check`] with an explicit difference step. Deep stacks of
/// batch-norm and ReLU have enough curvature that whole-model checks need a
/// smaller step than single layers.
pub fn grad_check_with_step(
    layer: &mut dyn Layer,
    input: &Tensor,
    tolerance: f64,
    max_coords: Option<usize>,
    seed: u64,
    step: f64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let out = layer.forward(input, Mode::Train).expect("forward pass failed");
    let proj = Tensor::uniform(out.shape(), 1.0, &mut rng);
    let grad_input = layer.backward(&proj).expect("backward pass failed");
    let param_grads: Vec<Vec<f64>> = layer
        .params_mut()
        .into_iter()
        .map(|p| {
            let n = p.len();
            let g = p.grad_mut();
            debug_assert_eq!(g.len(), n);
            g.to_vec()
        })
        .collect();

    // coordinate 0..input.len() are inputs, the rest index parameters in order
    let mut offsets = vec![input.len()];
    for g in &param_grads {
        offsets.push(offsets.last().unwrap() + g.len());
    }
    let total = *offsets.last().unwrap();
    let coords: Vec<usize> = match max_coords {
        Some(k) if k < total => {
            let mut c = sample(&mut rng, total, k).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..total).collect(),
    };

    let loss_at = |layer: &mut dyn Layer, x: &Tensor| -> f64 {
        let y = layer.forward(x, Mode::Train).expect("forward pass failed");
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let mut max_rel_err: f64 = 0.0;
    for &c in &coords {
        let (analytic, numeric) = if c < input.len() {
            let mut xp = input.clone();
            xp.data_mut()[c] += step;
            let lp = loss_at(layer, &xp);
            xp.data_mut()[c] -= 2.0 * step;
            let lm = loss_at(layer, &xp);
            (grad_input.data()[c], (lp - lm) / (2.0 * step))
        } else {
            let pi = offsets.partition_point(|&o| o <= c) - 1;
            let j = c - offsets[pi];
            let original = layer.params_mut()[pi].value.data()[j];
            layer.params_mut()[pi].value.data_mut()[j] = original + step;
            let lp = loss_at(layer, input);
            layer.params_mut()[pi].value.data_mut()[j] = original - step;
            let lm = loss_at(layer, input);
            layer.params_mut()[pi].value.data_mut()[j] = original;
            (param_grads[pi][j], (lp - lm) / (2.0 * step))
        };
        max_rel_err = max_rel_err.max(rel_err(analytic, numeric));
    }
    GradReport {
        max_rel_err,
        checked: coords.len(),
        pass: max_rel_err < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::{BatchNorm, Conv2d, Linear, Relu};

    /// Wraps a layer and doubles its weight gradients after backward
    /// (grad_check zeroes gradients first).
    struct Corrupted(Linear);

    impl Layer for Corrupted {
        fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
            self.0.forward(x, mode)
        }
        fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
            let gx = self.0.backward(g)?;
            let w = self.0.weight.float_mut().unwrap().grad_mut();
            w.iter_mut().for_each(|a| *a *= 2.0);
            Ok(gx)
        }
        fn infer(&self, x: &Tensor) -> Result<Tensor> {
            self.0.infer(x)
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            self.0.params_mut()
        }
    }

    #[test]
    fn linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(5, 3, &mut rng);
        let x = Tensor::uniform(&[4, 5], 1.0, &mut rng);
        let r = grad_check(&mut lin, &x, 1e-6, None, 1);
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checked, 20 + 15 + 3);
    }

    #[test]
    fn conv_bn_relu_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = Sequential::new(vec![
            Box::new(Conv2d::new(2, 3, 3, &mut rng)),
            Box::new(BatchNorm::new(3)),
            Box::new(Relu::new()),
        ]);
        let x = Tensor::uniform(&[2, 2, 4, 4], 1.0, &mut rng);
        let r = grad_check(&mut block, &x, 1e-3, None, 2);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bad = Corrupted(Linear::new(4, 2, &mut rng));
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let r = grad_check(&mut bad, &x, 1e-3, None, 3);
        assert!(!r.pass);
        assert!(r.max_rel_err > 0.4);
    }

    #[test]
    fn subsampling_limits_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::new(30, 20, &mut rng);
        let x = Tensor::uniform(&[2, 30], 1.0, &mut rng);
        let r = grad_check(&mut lin, &x, 1e-6, Some(200), 4);
        assert_eq!(r.checked, 200);
        assert!(r.pass);
    }
}
