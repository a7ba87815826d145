// Dense kernels shared by forward and backward passes. Matrices are row-major.

use crate::tape::LOG_PROB_FLOOR;

/// `out += a[m,k] · b[k,n]`. Zero entries of `a` are skipped, which makes
/// one-hot inputs and post-ReLU activations cheap.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, w) in orow.iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
}

/// `ga[m,k] += g[m,n] · b[k,n]ᵀ`.
pub(crate) fn matmul_grad_left(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, ga: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb[k,n] += a[m,k]ᵀ · g[m,n]`.
pub(crate) fn matmul_grad_right(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, gb: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &mut gb[p * n..(p + 1) * n];
            for (o, gv) in brow.iter_mut().zip(grow) {
                *o += x * gv;
            }
        }
    }
}

pub(crate) fn softmax_row(x: &[f64], t: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / t).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

pub(crate) fn log_softmax_row(x: &[f64], t: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|&v| ((v - max) / t).exp()).sum();
    let lz = z.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max) / t - lz;
    }
}

/// One summand `p (log p - log q)` of a KL divergence.
pub(crate) fn kl_term(lp: f64, lq: f64) -> f64 {
    let p = lp.exp();
    if p == 0.0 {
        return 0.0;
    }
    p * (lp.max(LOG_PROB_FLOOR) - lq.max(LOG_PROB_FLOOR))
}

pub(crate) fn kl_term_grad_p(lp: f64, lq: f64) -> f64 {
    let p = lp.exp();
    if p == 0.0 {
        return 0.0;
    }
    let inner = lp.max(LOG_PROB_FLOOR) - lq.max(LOG_PROB_FLOOR);
    let floor_pass = if lp > LOG_PROB_FLOOR { 1.0 } else { 0.0 };
    p * inner + p * floor_pass
}

pub(crate) fn kl_term_grad_q(lp: f64, lq: f64) -> f64 {
    if lq > LOG_PROB_FLOOR {
        -lp.exp()
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 4];
        matmul(&a, &eye, 2, 2, 2, &mut out);
        assert_eq!(out, a);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut out = [0.0; 2];
        softmax_row(&[1000.0, 1000.0], 1.0, &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }

    #[test]
    fn kl_zero_probability_term_vanishes() {
        assert_eq!(kl_term(f64::NEG_INFINITY, 0.5f64.ln()), 0.0);
    }
}
