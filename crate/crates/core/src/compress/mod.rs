//! Model compression: int8 dynamic quantization and knowledge distillation.

mod kd;
mod quant;

pub use kd::{distill, kd_loss, DistillConfig, KdLoss};
pub use quant::{
    matmul_i8, matmul_i8_nt, quantize_dynamic, quantize_values, QuantizedTensor, QMAX,
};

use thiserror::Error;

use crate::models::Model;
use crate::tensor_nn::{Layer, Result, StateMut, Tensor, Weight};

/// A model whose conv and linear weights are int8. Biases and batch-norm
/// parameters stay float; the graph is unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel(Model);

impl QuantizedModel {
    pub fn model(&self) -> &Model {
        &self.0
    }

    pub fn into_model(self) -> Model {
        self.0
    }

    /// Wraps an already-quantized model, e.g. one loaded from disk.
    pub fn from_model(model: Model) -> Option<Self> {
        model.is_quantized().then_some(Self(model))
    }
}

/// Symmetric per-tensor int8 quantization of every conv and linear weight.
pub fn quantize_model(model: &Model) -> QuantizedModel {
    let mut q = model.clone();
    let mut slots = Vec::new();
    q.state_mut("", &mut slots);
    for (_, slot) in slots {
        if let StateMut::Weight(w) = slot {
            if let Weight::Float(p) = w {
                *w = Weight::Int8(QuantizedTensor::quantize(&p.value));
            }
        }
    }
    QuantizedModel(q)
}

/// Class probabilities with int8 weights and activations quantized per
/// tensor at runtime, accumulated in i32.
pub fn quantized_forward(qmodel: &QuantizedModel, batch: &Tensor) -> Result<Tensor> {
    qmodel.0.predict(batch)
}

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("compression report needs at least one model")]
    EmptyList,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub accuracy: f64,
    pub bytes: usize,
}

/// CSV `name,accuracy,bytes,ratio` in the given order; ratios are relative
/// to the first row.
pub fn compression_report(rows: &[ReportRow]) -> std::result::Result<String, ReportError> {
    let reference = rows.first().ok_or(ReportError::EmptyList)?.bytes.max(1) as f64;
    let mut out = String::from("name,accuracy,bytes,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{},{:.4}\n",
            r.name,
            r.accuracy,
            r.bytes,
            r.bytes as f64 / reference
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, ModelConfig, WidthMult};
    use crate::pooling::PoolHeadKind;
    use crate::tensor_nn::{Conv2d, Linear, StateRef};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        let cfg = ModelConfig::new(Arch::Cnn10, WidthMult::new(1, 8).unwrap(), 6)
            .with_pool_head(PoolHeadKind::Statistic);
        Model::build(&cfg, 3).unwrap()
    }

    #[test]
    fn quantizes_every_conv_and_linear_weight() {
        let m = tiny();
        let q = quantize_model(&m);
        assert_eq!(q.model().param_count(), m.param_count());
        for ((na, a), (nb, b)) in m.named_state().iter().zip(q.model().named_state().iter()) {
            assert_eq!(na, nb);
            let is_weight = na.ends_with(".weight");
            match (a, b) {
                (StateRef::Float(x), StateRef::Int8(y)) => {
                    assert!(is_weight, "{na}");
                    assert_eq!(*y, &QuantizedTensor::quantize(x));
                }
                (StateRef::Float(x), StateRef::Float(y)) => {
                    assert!(!is_weight, "{na}");
                    assert_eq!(x, y);
                }
                _ => panic!("{na}"),
            }
        }
        // quantizing twice changes nothing further
        assert_eq!(quantize_model(q.model()), q);
    }

    #[test]
    fn representable_conv_is_exact() {
        // weights k/127 and a 0/±1 input: both sides quantize without error
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 37) % 255) as f64 / 127.0 - 1.0).collect();
        let w = Tensor::new(&[2, 3, 3, 3], w).unwrap();
        let b = Tensor::new(&[2], vec![0.25, -0.5]).unwrap();
        let float = Conv2d::from_parts(w.clone(), b.clone()).unwrap();
        let mut int8 = Conv2d::from_parts(w.clone(), b).unwrap();
        int8.weight = Weight::Int8(QuantizedTensor::quantize(&w));
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|_| [-1.0, 0.0, 1.0][rand::Rng::gen_range(&mut rng, 0..3)]).collect();
        let mut x = Tensor::new(&[2, 3, 5, 4], x).unwrap();
        x.data_mut()[0] = 1.0;
        let a = float.infer(&x).unwrap();
        let q = int8.infer(&x).unwrap();
        for (u, v) in a.data().iter().zip(q.data()) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
        let wl = Tensor::new(&[2, 3], [127.0, -64.0, 32.0, 5.0, 0.0, -127.0].iter().map(|v| v / 127.0).collect()).unwrap();
        let float = Linear::from_parts(wl.clone(), Tensor::zeros(&[2])).unwrap();
        let mut int8 = float.clone();
        int8.weight = Weight::Int8(QuantizedTensor::quantize(&wl));
        let x = Tensor::new(&[1, 3], vec![1.0, -1.0, 0.0]).unwrap();
        let (a, q) = (float.infer(&x).unwrap(), int8.infer(&x).unwrap());
        for (u, v) in a.data().iter().zip(q.data()) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_input_matches_float() {
        let m = tiny();
        let q = quantize_model(&m);
        let x = Tensor::zeros(&[2, 1, 40, 64]);
        let a = m.predict(&x).unwrap();
        let b = quantized_forward(&q, &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-4);
        }
        for row in b.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn quantized_models_round_trip_and_shrink() {
        let m = tiny();
        let q = quantize_model(&m);
        let bytes = q.model().to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert!(back.is_quantized());
        assert_eq!(back.to_bytes(), bytes);
        let ratio = bytes.len() as f64 / m.to_bytes().len() as f64;
        assert!(ratio <= 0.30, "{ratio}");
        assert!(QuantizedModel::from_model(back).is_some());
        assert!(QuantizedModel::from_model(m).is_none());
    }

    #[test]
    fn report_format() {
        let rows = [
            ReportRow { name: "teacher".into(), accuracy: 0.9, bytes: 1000 },
            ReportRow { name: "teacher".into(), accuracy: 0.9, bytes: 1000 },
            ReportRow { name: "quantized".into(), accuracy: 0.89, bytes: 260 },
        ];
        let csv = compression_report(&rows).unwrap();
        assert_eq!(
            csv,
            "name,accuracy,bytes,ratio\nteacher,0.9000,1000,1.0000\nteacher,0.9000,1000,1.0000\nquantized,0.8900,260,0.2600\n"
        );
        assert_eq!(compression_report(&[]), Err(ReportError::EmptyList));
    }
}
