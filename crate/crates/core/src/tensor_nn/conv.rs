use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::{
    he_bound, join, Layer, Mode, NamedState, NamedStateMut, NnError, Param, Result, StateMut,
    StateRef, Tensor, Weight,
};
use crate::compress::{matmul_i8, quantize_dynamic};

/// Stride-1 "same" convolution with an odd square kernel (3x3 for the conv
/// blocks, 1x1 for residual projections) and zero padding of `kernel / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Weight,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_ch * kernel * kernel;
        let weight = Tensor::uniform(&[out_ch, in_ch, kernel, kernel], he_bound(fan_in), rng);
        Self::from_parts(weight, Tensor::zeros(&[out_ch])).expect("shapes are consistent")
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out_ch, in_ch, kh, kw) = weight.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "kernel must be odd and square, got {kh}x{kw}"
            )));
        }
        if bias.shape() != [out_ch] {
            return Err(NnError::ShapeMismatch(format!(
                "bias shape {:?} for {out_ch} output channels",
                bias.shape()
            )));
        }
        Ok(Self {
            in_ch,
            out_ch,
            kernel: kh,
            weight: Weight::Float(Param::new(weight)),
            bias: Param::new(bias),
            cache: None,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        if h == 0 || w == 0 {
            return Err(NnError::ShapeMismatch("empty spatial extent".into()));
        }
        Ok((n, h, w))
    }

    fn forward_float(&self, w: &Param, x: &Tensor) -> Result<Tensor> {
        let (n, h, wd) = self.check_input(x)?;
        let hw = h * wd;
        let kk = self.patch_len();
        let in_len = self.in_ch * hw;
        let out_len = self.out_ch * hw;
        let mut out = vec![0.0; n * out_len];
        let mut cols = vec![0.0; if self.kernel == 1 { 0 } else { kk * hw }];
        for s in 0..n {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let os = &mut out[s * out_len..(s + 1) * out_len];
            for (o, row) in os.chunks_mut(hw).enumerate() {
                row.fill(self.bias.value.data()[o]);
            }
            let patches: &[f64] = if self.kernel == 1 {
                xs
            } else {
                im2col(xs, self.in_ch, h, wd, self.kernel, &mut cols);
                &cols
            };
            gemm(
                self.out_ch,
                kk,
                hw,
                MatRef::rows(w.value.data(), kk),
                MatRef::rows(patches, hw),
                1.0,
                os,
            );
        }
        Tensor::new(&[n, self.out_ch, h, wd], out)
    }

    fn forward_int8(&self, q: &crate::compress::QuantizedTensor, x: &Tensor) -> Result<Tensor> {
        let (n, h, wd) = self.check_input(x)?;
        let hw = h * wd;
        let kk = self.patch_len();
        let in_len = self.in_ch * hw;
        let out_len = self.out_ch * hw;
        let (qx, act_scale) = quantize_dynamic(x.data());
        let rescale = q.scale() * act_scale;
        let mut out = vec![0.0; n * out_len];
        let mut cols = vec![0i8; kk * hw];
        for s in 0..n {
            let xs = &qx[s * in_len..(s + 1) * in_len];
            if self.kernel == 1 {
                cols.copy_from_slice(xs);
            } else {
                im2col(xs, self.in_ch, h, wd, self.kernel, &mut cols);
            }
            let acc = matmul_i8(self.out_ch, kk, hw, q.values(), &cols);
            let os = &mut out[s * out_len..(s + 1) * out_len];
            for (o, (row, acc_row)) in os.chunks_mut(hw).zip(acc.chunks(hw)).enumerate() {
                let b = self.bias.value.data()[o];
                for (v, a) in row.iter_mut().zip(acc_row) {
                    *v = *a as f64 * rescale + b;
                }
            }
        }
        Tensor::new(&[n, self.out_ch, h, wd], out)
    }
}

/// Unfolds a `c x h x w` image into a `(c*k*k) x (h*w)` patch matrix,
/// zero-padded by `k / 2`.
pub(crate) fn im2col<T: Copy + Default>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    cols: &mut [T],
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.fill(T::default());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, v) in line.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *v = if sx < 0 || sx >= w as isize {
                            T::default()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    x.fill(0.0);
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let line = &src[y * w..(y + 1) * w];
                    for (xx, g) in line.iter().enumerate() {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(NnError::NoCache)?;
        let (n, h, wd) = self.check_input(x)?;
        if grad_out.shape() != [n, self.out_ch, h, wd] {
            return Err(NnError::ShapeMismatch(format!(
                "conv grad {:?} vs output [{n}, {}, {h}, {wd}]",
                grad_out.shape(),
                self.out_ch
            )));
        }
        let hw = h * wd;
        let kk = self.patch_len();
        let in_len = self.in_ch * hw;
        let out_len = self.out_ch * hw;
        let Weight::Float(weight) = &mut self.weight else {
            return Err(NnError::Quantized);
        };
        let (w_val, w_grad) = weight.value_and_grad();
        let b_grad = self.bias.grad_mut();
        let mut grad_x = vec![0.0; n * in_len];
        let mut cols = vec![0.0; if self.kernel == 1 { 0 } else { kk * hw }];
        let mut gcols = vec![0.0; kk * hw];
        for s in 0..n {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let gs = &grad_out.data()[s * out_len..(s + 1) * out_len];
            for (o, row) in gs.chunks(hw).enumerate() {
                b_grad[o] += row.iter().sum::<f64>();
            }
            let patches: &[f64] = if self.kernel == 1 {
                xs
            } else {
                im2col(xs, self.in_ch, h, wd, self.kernel, &mut cols);
                &cols
            };
            gemm(
                self.out_ch,
                hw,
                kk,
                MatRef::rows(gs, hw),
                MatRef::transposed(patches, hw),
                1.0,
                w_grad,
            );
            gemm(
                kk,
                self.out_ch,
                hw,
                MatRef::transposed(w_val, kk),
                MatRef::rows(gs, hw),
                0.0,
                &mut gcols,
            );
            let gx = &mut grad_x[s * in_len..(s + 1) * in_len];
            if self.kernel == 1 {
                gx.copy_from_slice(&gcols);
            } else {
                col2im(&gcols, self.in_ch, h, wd, self.kernel, gx);
            }
        }
        Tensor::new(x.shape(), grad_x)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match &self.weight {
            Weight::Float(w) => self.forward_float(w, x),
            Weight::Int8(q) => self.forward_int8(q, x),
        }
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

/// Direct nested-loop cross-correlation used as the test oracle.
#[cfg(test)]
pub(crate) fn conv_forward_naive(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, k, _) = weight.dims4()?;
    if ci != c {
        return Err(NnError::ShapeMismatch("channel mismatch".into()));
    }
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, o, h, w]);
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    for s in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += xd[((s * c + ic) * h + sy as usize) * w + sx as usize]
                                    * wd[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    od[((s * o + oc) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    Ok(out)
}
