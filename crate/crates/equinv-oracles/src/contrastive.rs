//! Direct transcription of the contrastive score h and the invariance
//! objective: h = exp(s(v_r,v_m)/tau) / (exp(s(v_r,v_m)/tau)
//! + sum_neg exp(s(v',v_m)/tau)), loss = -(1/M) sum_m log h, averaged
//! over the batch. s is the dot product of unit vectors.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn score(v_r: &[f64], v_m: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let pos = (dot(v_r, v_m) / tau).exp();
    let mut den = pos;
    for n in negatives {
        den += (dot(n, v_m) / tau).exp();
    }
    pos / den
}

/// `v_blocks[m][b]` is the projection of batch item b under transform m;
/// block 0 is the identity copy, `bank_refs[b]` its past representation.
pub fn invariance_loss(
    v_blocks: &[Vec<Vec<f64>>],
    bank_refs: &[Vec<f64>],
    negatives: &[Vec<f64>],
    tau: f64,
) -> f64 {
    let m_count = v_blocks.len();
    let batch = v_blocks[0].len();
    let mut acc = 0.0;
    for b in 0..batch {
        for (m, block) in v_blocks.iter().enumerate() {
            let v_r = if m == 0 { &bank_refs[b] } else { &v_blocks[0][b] };
            acc += -score(v_r, &block[b], negatives, tau).ln();
        }
    }
    acc / (m_count * batch) as f64
}
