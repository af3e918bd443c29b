//! Plain slice kernels shared by the tape and the tape-free inference path.

/// `y = W x` for a row-major `rows × cols` matrix.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    w.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `y = xᵀ W` for a row-major `rows × cols` matrix, `x` of length `rows`.
pub fn vecmat(x: &[f64], w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax. Panics on empty input; callers validate length.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}

/// Mask mass below which masked attention falls back to plain softmax.
pub const DEGENERATE_MASK_MASS: f64 = 1e-12;

/// Masked softmax `exp(e_j) m_j / Σ_k exp(e_k) m_k`.
///
/// Computed as `α_j m_j / S` with `α = softmax(e)` and `S = Σ α_k m_k`. When
/// `S < DEGENERATE_MASK_MASS` the unmasked softmax is returned and the flag is set.
/// Also returns `α` and `S`, which the backward pass needs.
pub fn masked_softmax(e: &[f64], mask: &[f64]) -> MaskedSoftmax {
    let plain = softmax(e);
    let mass: f64 = plain.iter().zip(mask).map(|(a, m)| a * m).sum();
    if mass < DEGENERATE_MASK_MASS {
        return MaskedSoftmax {
            weights: plain.clone(),
            plain,
            mass,
            degenerate: true,
        };
    }
    let weights = plain.iter().zip(mask).map(|(a, m)| a * m / mass).collect();
    MaskedSoftmax {
        weights,
        plain,
        mass,
        degenerate: false,
    }
}

#[derive(Clone, Debug)]
pub struct MaskedSoftmax {
    pub weights: Vec<f64>,
    pub plain: Vec<f64>,
    pub mass: f64,
    pub degenerate: bool,
}
