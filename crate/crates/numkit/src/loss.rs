//! Training objectives: masked Poisson NLL, masked MSE and the per-timestep
//! cosine alignment between student and teacher representations.
//!
//! Each loss exists as a taped op (for training) and as a plain function on
//! tensors (for reporting). Both share the same masking rules.

use log::warn;

use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Rows whose norm falls below this are treated as having zero cosine.
pub const MIN_ROW_NORM: f64 = 1e-12;

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.iter().product::<usize>() != b.iter().product::<usize>() {
        return Err(NumError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn mask_total<F: Scalar>(op: &'static str, mask: &[F]) -> Result<F> {
    let total: F = mask.iter().copied().sum();
    if total <= F::zero() {
        return Err(NumError::EmptyMask(op));
    }
    Ok(total)
}

/// Mean over unmasked entries of `exp(eta) - k * eta` (the `log k!` term is
/// constant in the parameters and dropped).
pub fn poisson_nll<F: Scalar>(log_rate: &Tensor<F>, counts: &Tensor<F>, mask: &Tensor<F>) -> Result<F> {
    check_same("poisson_nll", log_rate.shape(), counts.shape())?;
    check_same("poisson_nll", log_rate.shape(), mask.shape())?;
    let denom = mask_total("poisson_nll", mask.data())?;
    let s: F = log_rate
        .data()
        .iter()
        .zip(counts.data())
        .zip(mask.data())
        .map(|((&e, &k), &m)| m * (e.exp() - k * e))
        .sum();
    Ok(s / denom)
}

/// Mean squared difference over unmasked entries.
pub fn mse<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>, mask: &Tensor<F>) -> Result<F> {
    check_same("mse", pred.shape(), target.shape())?;
    check_same("mse", pred.shape(), mask.shape())?;
    let denom = mask_total("mse", mask.data())?;
    let s: F = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .map(|((&p, &t), &m)| m * (p - t) * (p - t))
        .sum();
    Ok(s / denom)
}

fn row_cosines<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>) -> (Vec<F>, Vec<bool>) {
    let rows = student.rows();
    let mut cos = Vec::with_capacity(rows);
    let mut valid = Vec::with_capacity(rows);
    let floor = F::from_f64_lossy(MIN_ROW_NORM);
    let mut degenerate = 0usize;
    for r in 0..rows {
        let a = student.row(r);
        let b = teacher.row(r);
        let na = a.iter().map(|&x| x * x).sum::<F>().sqrt();
        let nb = b.iter().map(|&x| x * x).sum::<F>().sqrt();
        if na < floor || nb < floor {
            degenerate += 1;
            cos.push(F::zero());
            valid.push(false);
        } else {
            let dot: F = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            cos.push(dot / (na * nb));
            valid.push(true);
        }
    }
    if degenerate > 0 {
        warn!("cosine alignment: {degenerate} zero-norm row(s) scored as cos = 0");
    }
    (cos, valid)
}

fn check_rows<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>) -> Result<()> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(NumError::ShapeMismatch {
            op: "cosine_alignment_loss",
            lhs: student.shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    Ok(())
}

/// `1 - mean_t cos(student_t, teacher_t)` over rows of two `[T x d]` tensors.
pub fn cosine_alignment_loss<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>) -> Result<F> {
    check_rows(student, teacher)?;
    let (cos, _) = row_cosines(student, teacher);
    let mean = cos.iter().copied().sum::<F>() / F::from_usize(cos.len()).expect("rows");
    Ok(F::one() - mean)
}

impl<F: Scalar> Tape<F> {
    /// Taped [`poisson_nll`]; `counts` and `mask` are data, not graph nodes.
    pub fn poisson_nll(&mut self, log_rate: Var, counts: &Tensor<F>, mask: &Tensor<F>) -> Result<Var> {
        let value = poisson_nll(self.value(log_rate), counts, mask)?;
        let denom = mask_total("poisson_nll", mask.data())?;
        Ok(self.push_loss(
            value,
            Op::PoissonNll {
                eta: log_rate,
                counts: counts.data().to_vec(),
                mask: mask.data().to_vec(),
                denom,
            },
            &[log_rate],
        ))
    }

    /// Taped [`mse`] against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>, mask: &Tensor<F>) -> Result<Var> {
        let value = mse(self.value(pred), target, mask)?;
        let denom = mask_total("mse", mask.data())?;
        Ok(self.push_loss(
            value,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                mask: mask.data().to_vec(),
                denom,
            },
            &[pred],
        ))
    }

    /// Taped [`cosine_alignment_loss`]; both arguments may carry gradients.
    pub fn cosine_alignment(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let (sv, tv) = (self.value(student), self.value(teacher));
        check_rows(sv, tv)?;
        let (cos, valid) = row_cosines(sv, tv);
        let mean = cos.iter().copied().sum::<F>() / F::from_usize(cos.len()).expect("rows");
        Ok(self.push_loss(
            F::one() - mean,
            Op::CosineAlign {
                s: student,
                t: teacher,
                valid,
            },
            &[student, teacher],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn poisson_nll_basic_values() {
        let one = t(&[1], &[1.0]);
        assert_eq!(poisson_nll(&t(&[1], &[0.0]), &t(&[1], &[1.0]), &one).unwrap(), 1.0);
        assert_eq!(poisson_nll(&t(&[1], &[0.0]), &t(&[1], &[0.0]), &one).unwrap(), 1.0);
    }

    #[test]
    fn poisson_nll_minimised_at_log_count() {
        let one = t(&[1], &[1.0]);
        for k in [1.0f64, 2.0, 5.0] {
            let at = poisson_nll(&t(&[1], &[k.ln()]), &t(&[1], &[k]), &one).unwrap();
            for d in [-0.5, -0.01, 0.01, 0.5] {
                let off = poisson_nll(&t(&[1], &[k.ln() + d]), &t(&[1], &[k]), &one).unwrap();
                assert!(off > at);
            }
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let x = t(&[2], &[0.0, 1.0]);
        let m = t(&[2], &[0.0, 0.0]);
        assert!(matches!(poisson_nll(&x, &x, &m), Err(NumError::EmptyMask(_))));
        assert!(matches!(mse(&x, &x, &m), Err(NumError::EmptyMask(_))));
    }

    #[test]
    fn mse_basic_values() {
        let p = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 2], &[1.0; 4]);
        assert_eq!(mse(&p, &p, &ones).unwrap(), 0.0);
        let shifted = p.map(|x| x + 1.0);
        assert_eq!(mse(&shifted, &p, &ones).unwrap(), 1.0);
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let p = t(&[2, 3], &[0.3, -1.2, 2.0, 0.7, 0.1, -0.4]);
        let q = t(&[2, 3], &[1.1, 0.2, -0.5, 0.0, 0.3, 0.9]);
        let m = t(&[2, 3], &[1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let mut acc = 0.0;
        let mut n = 0.0;
        for i in 0..6 {
            if m.data()[i] > 0.0 {
                acc += (p.data()[i] - q.data()[i]).powi(2);
                n += 1.0;
            }
        }
        assert!((mse(&p, &q, &m).unwrap() - acc / n).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_do_not_change_mse() {
        let p = t(&[3], &[1.0, 2.0, 3.0]);
        let q = t(&[3], &[0.0, 2.0, 1.0]);
        let q2 = t(&[3], &[0.0, 2.0, 100.0]);
        let m = t(&[3], &[1.0, 1.0, 0.0]);
        assert_eq!(mse(&p, &q, &m).unwrap(), mse(&p, &q2, &m).unwrap());
    }

    #[test]
    fn cosine_alignment_reference_values() {
        let a = t(&[2, 2], &[1.0, 2.0, -3.0, 0.5]);
        let neg = a.map(|x| -x);
        let perp = t(&[2, 2], &[-2.0, 1.0, 0.5, 3.0]);
        assert!(cosine_alignment_loss(&a, &a).unwrap().abs() < 1e-12);
        assert!((cosine_alignment_loss(&a, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!((cosine_alignment_loss(&a, &perp).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_count_as_orthogonal() {
        let a = t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]);
        let b = t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        // row 0 scores cos 0, row 1 scores cos 1
        assert!((cosine_alignment_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let s = tape.input(a);
        let tt = tape.constant(b);
        let l = tape.cosine_alignment(s, tt).unwrap();
        let g = tape.backward(l).unwrap();
        let gs = g.wrt(s).unwrap();
        assert_eq!(&gs.data()[..2], &[0.0, 0.0]);
    }
}
