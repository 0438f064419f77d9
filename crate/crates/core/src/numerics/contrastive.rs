use super::{dot, Mat};
use crate::error::{ensure, Result};

/// Loss and analytic gradients of one softmax cross-entropy contrastive term.
#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    /// Gradient per candidate row; `None` when candidate gradients were not requested.
    pub candidates: Option<Mat>,
}

/// Multi-positive softmax cross-entropy over dot-product logits.
///
/// `loss = -(1/|P|) * sum_{p in P} log softmax_p(anchor . c_j / temperature)`.
///
/// Similarities are raw dot products; callers pass unit-norm inputs when they
/// want cosine logits. Set `candidate_grad = false` to treat candidates as
/// constants (memory-bank style) and skip their gradient.
pub fn softmax_xent_contrastive(
    anchor: &[f64],
    candidates: &Mat,
    positives: &[usize],
    temperature: f64,
    candidate_grad: bool,
) -> Result<ContrastiveGrad> {
    ensure!(temperature > 0.0 && temperature.is_finite(), Param, "temperature must be > 0, got {temperature}");
    ensure!(!positives.is_empty(), Contract, "contrastive term needs at least one positive");
    ensure!(
        candidates.cols() == anchor.len(),
        Shape,
        "anchor dim {} vs candidate dim {}",
        anchor.len(),
        candidates.cols()
    );
    let n = candidates.rows();
    let mut is_pos = vec![false; n];
    for &p in positives {
        ensure!(p < n, Contract, "positive index {p} out of range for {n} candidates");
        ensure!(!is_pos[p], Contract, "duplicate positive index {p}");
        is_pos[p] = true;
    }

    let inv_t = 1.0 / temperature;
    let logits: Vec<f64> = candidates.iter_rows().map(|c| dot(anchor, c) * inv_t).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let lse = max + sum.ln();
    probs.iter_mut().for_each(|p| *p /= sum);

    let inv_p = 1.0 / positives.len() as f64;
    let mut pos_logit_sum = 0.0;
    for &p in positives {
        pos_logit_sum += logits[p];
    }
    let loss = lse - pos_logit_sum * inv_p;

    // dL/dz_j = p_j - [j in P]/|P|
    let dz: Vec<f64> = probs
        .iter()
        .zip(&is_pos)
        .map(|(&p, &pos)| if pos { p - inv_p } else { p })
        .collect();

    let mut g_anchor = vec![0.0; anchor.len()];
    for (j, c) in candidates.iter_rows().enumerate() {
        let w = dz[j] * inv_t;
        for (g, x) in g_anchor.iter_mut().zip(c) {
            *g += w * x;
        }
    }
    let g_cand = candidate_grad.then(|| {
        let mut m = Mat::zeros(n, anchor.len());
        for j in 0..n {
            let w = dz[j] * inv_t;
            for (g, a) in m.row_mut(j).iter_mut().zip(anchor) {
                *g = w * a;
            }
        }
        m
    });

    Ok(ContrastiveGrad { loss, anchor: g_anchor, candidates: g_cand })
}
