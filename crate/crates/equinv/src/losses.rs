//! Training objectives: cross-entropy on class and transform logits, the
//! memory-bank contrastive invariance loss, and tempered distillation.
//! Every loss returns its value together with analytic gradients, since
//! backprop is assembled by hand.

use crate::error::{Error, Result};
use crate::model::ModelOutputs;
use crate::scalar::Real;
use ndarray::{Array2, ArrayView1, ArrayView2};

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub tau: f64,
    pub kd_temperature: f64,
    pub w_eq: f64,
    pub w_in: f64,
    pub w_kd: f64,
    pub negatives_per_batch: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 1.0,
            kd_temperature: 4.0,
            w_eq: 1.0,
            w_in: 1.0,
            w_kd: 1.0,
            negatives_per_batch: 6400,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.kd_temperature > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        for w in [self.w_eq, self.w_in, self.w_kd] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config("loss weights must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Component values in f64 for logging; `total` follows the fixed
/// composition ce + w_eq*eq + w_in*inv + w_kd*kd.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub eq: f64,
    pub inv: f64,
    pub kd: f64,
    pub total: f64,
}

pub fn total_loss(ce: f64, eq: f64, inv: f64, kd: Option<f64>, config: &LossConfig) -> LossBreakdown {
    let kd = kd.unwrap_or(0.0);
    LossBreakdown {
        ce,
        eq,
        inv,
        kd,
        total: ce + config.w_eq * eq + config.w_in * inv + config.w_kd * kd,
    }
}

fn softmax_rows<T: Real>(logits: &ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.iter().cloned().sum::<T>();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean over rows of -log softmax(logits)[label], with the gradient
/// (softmax - onehot) / n.
pub fn ce_loss<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::argument("one label per logit row required"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::argument(format!("label {bad} out of range for {c} classes")));
    }
    if n == 0 {
        return Err(Error::argument("cross-entropy of an empty batch"));
    }
    let probs = softmax_rows(&logits.view());
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss = loss - probs[[i, y]].max(T::from_f64(f64::MIN_POSITIVE)).ln();
        grad[[i, y]] = grad[[i, y]] - T::one();
    }
    grad.mapv_inplace(|v| v * inv_n);
    Ok((loss * inv_n, grad))
}

/// Cross-entropy on the transform logits against proxy labels.
pub fn equivariance_loss<T: Real>(
    transform_logits: &Array2<T>,
    proxy_labels: &[usize],
) -> Result<(T, Array2<T>)> {
    ce_loss(transform_logits, proxy_labels)
}

fn lse<T: Real>(scores: &[T]) -> T {
    let m = scores.iter().cloned().fold(T::neg_infinity(), T::max);
    let s = scores.iter().map(|&v| (v - m).exp()).sum::<T>();
    m + s.ln()
}

/// h = exp(s(v_r,v_m)/tau) / (exp(s(v_r,v_m)/tau) + sum_neg exp(s(v',v_m)/tau)),
/// s being the dot product of unit vectors.
pub fn contrast_score<T: Real>(
    v_r: &ArrayView1<'_, T>,
    v_m: &ArrayView1<'_, T>,
    negatives: &ArrayView2<'_, T>,
    tau: T,
) -> Result<T> {
    let ok = v_r.iter().all(|v| v.is_finite())
        && v_m.iter().all(|v| v.is_finite())
        && negatives.iter().all(|v| v.is_finite());
    if !ok {
        return Err(Error::argument("non-finite contrastive inputs"));
    }
    let mut scores = Vec::with_capacity(1 + negatives.nrows());
    scores.push(v_r.dot(v_m) / tau);
    for neg in negatives.rows() {
        scores.push(neg.dot(v_m) / tau);
    }
    Ok((scores[0] - lse(&scores)).exp())
}

/// The invariance objective -(1/M) sum_m log h(v_r, v^m), averaged over the
/// batch. `v` holds M transform-major blocks of B rows; block 0 is the
/// identity projection v0. For m = 0 the reference is the bank's past
/// representation, otherwise v0. Returns the gradient w.r.t. every v row;
/// bank refs and negatives are constants.
pub fn invariance_loss<T: Real>(
    v: &Array2<T>,
    batch: usize,
    bank_refs: &Array2<T>,
    negatives: &Array2<T>,
    tau: T,
) -> Result<(T, Array2<T>)> {
    let (rows, d) = v.dim();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::argument("v rows must be a multiple of the batch size"));
    }
    let m_count = rows / batch;
    if m_count < 1 {
        return Err(Error::argument("invariance loss needs at least one transform block"));
    }
    if bank_refs.dim() != (batch, d) {
        return Err(Error::argument("bank reference shape mismatch"));
    }
    if negatives.ncols() != d && negatives.nrows() != 0 {
        return Err(Error::argument("negative dimensionality mismatch"));
    }
    let k = negatives.nrows();
    let inv_mb = T::from_f64(1.0 / (m_count * batch) as f64);
    let mut loss = T::zero();
    let mut grad = Array2::zeros((rows, d));
    let mut scores = vec![T::zero(); k + 1];
    for b in 0..batch {
        for m in 0..m_count {
            let q_row = m * batch + b;
            let r_row = b; // row of v0 when m != 0
            let q = v.row(q_row);
            let r = if m == 0 { bank_refs.row(b) } else { v.row(r_row) };
            scores[0] = r.dot(&q) / tau;
            for (j, neg) in negatives.rows().into_iter().enumerate() {
                scores[j + 1] = neg.dot(&q) / tau;
            }
            let z = lse(&scores);
            loss = loss - (scores[0] - z);
            // softmax over the score vector
            let p0 = (scores[0] - z).exp();
            // dL/dq = -1/(MB tau) [(1 - p0) r - sum_j p_j n_j]
            let coef = inv_mb / tau;
            let w0 = (T::one() - p0) * coef;
            for j in 0..d {
                grad[[q_row, j]] = grad[[q_row, j]] - w0 * r[j];
            }
            for (jn, neg) in negatives.rows().into_iter().enumerate() {
                let pj = (scores[jn + 1] - z).exp() * coef;
                for j in 0..d {
                    grad[[q_row, j]] = grad[[q_row, j]] + pj * neg[j];
                }
            }
            if m != 0 {
                for j in 0..d {
                    grad[[r_row, j]] = grad[[r_row, j]] - w0 * q[j];
                }
            }
        }
    }
    Ok((loss * inv_mb, grad))
}

/// Distillation value plus gradients w.r.t. the student outputs.
pub struct KdLoss<T> {
    pub value: T,
    pub d_class: Array2<T>,
    pub d_transform: Array2<T>,
    pub d_v: Array2<T>,
}

fn tempered_kl_with_grad<T: Real>(
    teacher: &Array2<T>,
    student: &Array2<T>,
    temp: T,
) -> Result<(T, Array2<T>)> {
    if teacher.dim() != student.dim() {
        return Err(Error::argument("teacher and student logit shapes differ"));
    }
    let n = teacher.nrows();
    if n == 0 {
        return Err(Error::argument("distillation on an empty batch"));
    }
    let pt = softmax_rows(&teacher.mapv(|v| v / temp).view());
    let ps = softmax_rows(&student.mapv(|v| v / temp).view());
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut kl = T::zero();
    for (prow, qrow) in pt.rows().into_iter().zip(ps.rows()) {
        for (&p, &q) in prow.iter().zip(qrow) {
            if p > T::zero() {
                kl = kl + p * (p.ln() - q.ln());
            }
        }
    }
    let value = temp * temp * kl * inv_n;
    // d(T^2 KL)/d(student logits) = T (q - p), averaged over rows
    let mut grad = ps;
    grad.zip_mut_with(&pt, |q, &p| *q = (*q - p) * temp * inv_n);
    Ok((value, grad))
}

/// T^2 KL on both logit heads plus MSE on the invariant projection, teacher
/// fixed (Eq. 5 ordering: teacher distribution first).
pub fn distillation_loss<T: Real>(
    teacher: &ModelOutputs<T>,
    student: &ModelOutputs<T>,
    temp: T,
) -> Result<KdLoss<T>> {
    let (kl_y, d_class) = tempered_kl_with_grad(&teacher.class_logits, &student.class_logits, temp)?;
    let (kl_u, d_transform) =
        tempered_kl_with_grad(&teacher.transform_logits, &student.transform_logits, temp)?;
    if teacher.v.dim() != student.v.dim() {
        return Err(Error::argument("teacher and student projection shapes differ"));
    }
    let count = T::from_f64(student.v.len() as f64);
    let mut mse = T::zero();
    let mut d_v = Array2::zeros(student.v.dim());
    ndarray::Zip::from(&mut d_v)
        .and(&student.v)
        .and(&teacher.v)
        .for_each(|g, &s, &t| {
            let diff = s - t;
            mse = mse + diff * diff;
            *g = (diff + diff) / count;
        });
    Ok(KdLoss { value: kl_y + kl_u + mse / count, d_class, d_transform, d_v })
}

/// 95% confidence half-width 1.96 * sample_std / sqrt(n).
pub fn ci95(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    1.96 * var.sqrt() / (n as f64).sqrt()
}
