use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::{
    he_bound, join, Layer, Mode, NamedState, NamedStateMut, NnError, Param, Result, StateMut,
    StateRef, Tensor, Weight,
};
use crate::compress::{matmul_i8_nt, quantize_dynamic, QuantizedTensor};

/// Fully connected layer `y = x W^T + b` on `N x in` inputs, `W` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Weight,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = Tensor::uniform(&[out_dim, in_dim], he_bound(in_dim), rng);
        Self::from_parts(w, Tensor::zeros(&[out_dim])).expect("shapes are consistent")
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out_dim, in_dim) = weight.dims2()?;
        if bias.shape() != [out_dim] {
            return Err(NnError::ShapeMismatch(format!(
                "bias shape {:?} for {out_dim} outputs",
                bias.shape()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight: Weight::Float(Param::new(weight)),
            bias: Param::new(bias),
            cache: None,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (n, d) = x.dims2()?;
        if d != self.in_dim {
            return Err(NnError::ShapeMismatch(format!(
                "linear expects {} features, got {d}",
                self.in_dim
            )));
        }
        Ok(n)
    }

    fn forward_int8(&self, q: &QuantizedTensor, x: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let (qx, act_scale) = quantize_dynamic(x.data());
        let acc = matmul_i8_nt(n, self.in_dim, self.out_dim, &qx, q.values());
        let rescale = q.scale() * act_scale;
        let b = self.bias.value.data();
        let out = acc
            .iter()
            .enumerate()
            .map(|(i, &a)| a as f64 * rescale + b[i % self.out_dim])
            .collect();
        Tensor::new(&[n, self.out_dim], out)
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(NnError::NoCache)?;
        let n = self.check_input(x)?;
        if grad_out.shape() != [n, self.out_dim] {
            return Err(NnError::ShapeMismatch(format!(
                "linear grad {:?} vs output [{n}, {}]",
                grad_out.shape(),
                self.out_dim
            )));
        }
        let (din, dout) = (self.in_dim, self.out_dim);
        let Weight::Float(weight) = &mut self.weight else {
            return Err(NnError::Quantized);
        };
        let (w, gw) = weight.value_and_grad();
        // dW += g^T x
        gemm(
            dout,
            n,
            din,
            MatRef::transposed(grad_out.data(), dout),
            MatRef::rows(x.data(), din),
            1.0,
            gw,
        );
        let gb = self.bias.grad_mut();
        for row in grad_out.data().chunks(dout) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut gx = vec![0.0; n * din];
        gemm(
            n,
            dout,
            din,
            MatRef::rows(grad_out.data(), dout),
            MatRef::rows(w, din),
            0.0,
            &mut gx,
        );
        Tensor::new(&[n, din], gx)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let w = match &self.weight {
            Weight::Float(w) => w,
            Weight::Int8(q) => return self.forward_int8(q, x),
        };
        let n = self.check_input(x)?;
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.bias.value.data().iter().copied()).collect();
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            MatRef::rows(x.data(), self.in_dim),
            MatRef::transposed(w.value.data(), self.in_dim),
            1.0,
            &mut out,
        );
        Tensor::new(&[n, self.out_dim], out)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.weight {
            Weight::Float(w) => vec![w, &mut self.bias],
            Weight::Int8(_) => vec![&mut self.bias],
        }
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut NamedState<'a>) {
        let w = match &self.weight {
            Weight::Float(p) => StateRef::Float(&p.value),
            Weight::Int8(q) => StateRef::Int8(q),
        };
        out.push((join(prefix, "weight"), w));
        out.push((join(prefix, "bias"), StateRef::Float(&self.bias.value)));
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedStateMut<'a>) {
        out.push((join(prefix, "weight"), StateMut::Weight(&mut self.weight)));
        out.push((join(prefix, "bias"), StateMut::Param(&mut self.bias)));
    }
}
