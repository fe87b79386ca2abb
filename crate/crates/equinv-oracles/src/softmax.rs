//! Scalar transcriptions of softmax cross-entropy and tempered KL.

/// Softmax of one logit row, numerically shifted by the max.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Mean over rows of -log softmax(row)[label].
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    let mut acc = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let p = softmax_row(row);
        acc += -p[y].ln();
    }
    acc / logits.len() as f64
}

/// T^2 * KL(softmax(t/T) || softmax(s/T)), mean over rows.
pub fn tempered_kl(teacher: &[Vec<f64>], student: &[Vec<f64>], temp: f64) -> f64 {
    assert_eq!(teacher.len(), student.len());
    let mut acc = 0.0;
    for (t_row, s_row) in teacher.iter().zip(student) {
        assert_eq!(t_row.len(), s_row.len());
        let pt = softmax_row(&t_row.iter().map(|&z| z / temp).collect::<Vec<_>>());
        let ps = softmax_row(&s_row.iter().map(|&z| z / temp).collect::<Vec<_>>());
        let mut kl = 0.0;
        for (a, b) in pt.iter().zip(&ps) {
            if *a > 0.0 {
                kl += a * (a.ln() - b.ln());
            }
        }
        acc += temp * temp * kl;
    }
    acc / teacher.len() as f64
}

/// Mean squared error over all elements of two equally shaped matrices.
pub fn mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    let mut n = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            acc += (x - y) * (x - y);
            n += 1;
        }
    }
    acc / n as f64
}
