use super::Tensor;
use crate::{Error, Result, Scalar};

fn check_finite<S: Scalar>(v: &[S], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} input at index {i}"))),
        None => Ok(()),
    }
}

/// Max-subtracted log-sum-exp of a row, accumulated in `f64`.
pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> (f64, f64) {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x.f64()));
    let sum: f64 = row.iter().map(|&x| (x.f64() - max).exp()).sum();
    (max, sum.ln())
}

pub fn softmax<S: Scalar>(v: &[S]) -> Result<Vec<S>> {
    check_finite(v, "softmax")?;
    let (max, lse) = log_sum_exp(v);
    Ok(v.iter().map(|&x| S::of((x.f64() - max - lse).exp())).collect())
}

pub fn log_softmax<S: Scalar>(v: &[S]) -> Result<Vec<S>> {
    check_finite(v, "log_softmax")?;
    let (max, lse) = log_sum_exp(v);
    Ok(v.iter().map(|&x| S::of(x.f64() - max - lse)).collect())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`[T, V]`), over positions where `mask` is set.
pub fn next_token_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
) -> Result<f64> {
    let (rows, width) = match logits.shape() {
        [t, v] => (*t, *v),
        s => return Err(Error::Shape(format!("logits must be [T, V], got {s:?}"))),
    };
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Param("cross-entropy mask selects no positions".into()));
    }
    let mut total = 0.0;
    for (t, (&target, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        if target >= width {
            return Err(Error::TokenOutOfRange {
                id: target,
                position: t,
                size: width,
            });
        }
        let row = &logits.data()[t * width..(t + 1) * width];
        check_finite(row, "cross-entropy")?;
        let (max, lse) = log_sum_exp(row);
        total -= row[target].f64() - max - lse;
    }
    Ok(total / count as f64)
}
