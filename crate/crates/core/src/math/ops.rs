//! Tape-free entry points for the differentiable ops. Each one records a
//! throwaway tape so the forward arithmetic is the same code the trainer uses.

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.cols() == 0 {
        return Err(Error::Contract("softmax over an empty axis".into()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let out = tape.softmax(v)?;
    Ok(tape.value(out).clone())
}

/// `KL(p ‖ softmax(q_logits))` for a single distribution or a batch of rows.
pub fn forward_kl(p: &Tensor, q_logits: &Tensor) -> Result<f32> {
    if p.shape() != q_logits.shape() {
        return Err(Error::Dimension {
            op: "forward_kl",
            left: p.shape().to_vec(),
            right: q_logits.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let l = tape.constant(q_logits.clone());
    let out = tape.forward_kl(p.data(), l)?;
    Ok(tape.value(out).item())
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(target: usize, logits: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let row = Tensor::new(vec![1, logits.numel()], logits.data().to_vec())?;
    let l = tape.constant(row);
    let out = tape.cross_entropy(l, &[target])?;
    Ok(tape.value(out).item())
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let out = tape.layer_norm(vx, vg, vb)?;
    Ok(tape.value(out).clone())
}

pub fn embedding_lookup(id: usize, table: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(table.clone());
    let out = tape.embedding(t, &[id])?;
    Ok(tape.value(out).clone())
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.gelu(v)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let out = matmul(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
        let out = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let err = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0, 4.0]])).unwrap_err();
        match err {
            Error::Dimension { left, right, .. } => {
                assert_eq!(left, vec![1, 2]);
                assert_eq!(right, vec![1, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[&[0.0, 0.0, 0.0, 0.0]])).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let s = softmax(&t(&[&[1000.0, 0.0]])).unwrap();
        assert!((s.data()[0] - 1.0).abs() <= 1e-12);
        assert!(s.data()[1] <= 1e-12);
        // exp(1,2,3)/sum, evaluated by hand: 0.09003, 0.24473, 0.66524
        let s = softmax(&t(&[&[1.0, 2.0, 3.0]])).unwrap();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&t(&[&[f32::NAN, 0.0]])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn forward_kl_examples() {
        let z = t(&[&[0.3, -1.2, 2.0, 0.1]]);
        let p = softmax(&z).unwrap();
        assert!(forward_kl(&p, &z).unwrap().abs() < 1e-7);
        let kl = forward_kl(&t(&[&[1.0, 0.0]]), &t(&[&[0.0, 0.0]])).unwrap();
        assert!((kl - std::f32::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::new(vec![8], vec![0.5; 8]).unwrap();
        for target in 0..8 {
            assert!((cross_entropy(target, &uniform).unwrap() - 8f32.ln()).abs() < 1e-4);
        }
        let mut sat = vec![0.0; 8];
        sat[3] = 1e6;
        let sat = Tensor::new(vec![8], sat).unwrap();
        assert!(cross_entropy(3, &sat).unwrap().abs() < 1e-6);
        assert!(matches!(
            cross_entropy(8, &uniform),
            Err(Error::Index { index: 8, limit: 8 })
        ));
    }

    #[test]
    fn layer_norm_of_constant_is_beta() {
        let x = t(&[&[2.5, 2.5, 2.5, 2.5]]);
        let g = t(&[&[1.0, 2.0, 3.0, 4.0]]);
        let b = t(&[&[0.1, 0.2, 0.3, 0.4]]);
        let y = layer_norm(&x, &g, &b).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn embedding_returns_row() {
        let table = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(embedding_lookup(1, &table).unwrap().data(), &[3.0, 4.0]);
    }
}
