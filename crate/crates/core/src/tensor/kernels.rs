//! Raw numeric kernels over flat row-major slices.

use super::{Result, TensorError};

/// `C = alpha * A B + beta * C` for an `m x k` by `k x n` product with
/// arbitrary (non-negative) element strides. Strides let callers express
/// transposes and head slices without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(reach(m, k, rsa, csa) <= a.len(), "gemm: A out of bounds");
    assert!(reach(k, n, rsb, csb) <= b.len(), "gemm: B out of bounds");
    assert!(reach(m, n, rsc, csc) <= c.len(), "gemm: C out of bounds");
    // SAFETY: every index dgemm touches lies within the reach checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `(m x k) * (k x n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, (k, 1), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

/// Precomputed rotary angles, half-split pairing `(i, i + head_dim/2)`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    max_len: usize,
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(max_len: usize, head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "rope: head dim must be even and positive, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            max_len,
            head_dim,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Rotates every head of every row in place. Row `r` sits at position
    /// `positions[r]`. `inverse` applies the transpose rotation (the adjoint).
    pub fn rotate(&self, x: &mut [f64], width: usize, positions: &[usize], inverse: bool) -> Result<()> {
        if width % self.head_dim != 0 || x.len() != width * positions.len() {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                left: vec![positions.len(), width],
                right: vec![x.len()],
            });
        }
        let half = self.head_dim / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (row, &pos) in x.chunks_exact_mut(width).zip(positions) {
            if pos >= self.max_len {
                return Err(TensorError::IndexOutOfRange {
                    op: "rope",
                    index: pos,
                    extent: self.max_len,
                });
            }
            let cos = &self.cos[pos * half..(pos + 1) * half];
            let sin = &self.sin[pos * half..(pos + 1) * half];
            for head in row.chunks_exact_mut(self.head_dim) {
                let (lo, hi) = head.split_at_mut(half);
                for i in 0..half {
                    let (a, b) = (lo[i], hi[i]);
                    let s = sign * sin[i];
                    lo[i] = a * cos[i] - b * s;
                    hi[i] = b * cos[i] + a * s;
                }
            }
        }
        Ok(())
    }
}

/// Extents for fused causal grouped-query attention.
///
/// `q` is laid out `[batch * seq, heads * head_dim]`; `k` and `v` are
/// `[batch * seq, kv_heads * head_dim]`. Query head `h` reads kv head
/// `h / (heads / kv_heads)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    fn group(&self) -> usize {
        self.heads / self.kv_heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Returns the attention output and the saved probabilities
/// `[batch, heads, seq, seq]`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], s: AttentionShape) -> (Vec<f64>, Vec<f64>) {
    let (t, hd, qw, kw) = (s.seq, s.head_dim, s.q_width(), s.kv_width());
    let mut out = vec![0.0; s.batch * t * qw];
    let mut probs = vec![0.0; s.batch * s.heads * t * t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let kh = h / s.group();
            let q_off = b * t * qw + h * hd;
            let kv_off = b * t * kw + kh * hd;
            let p_off = (b * s.heads + h) * t * t;
            let p = &mut probs[p_off..p_off + t * t];
            gemm(t, hd, t, s.scale(), &q[q_off..], (qw, 1), &k[kv_off..], (1, kw), 0.0, p, (t, 1));
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in &mut row[..=i] {
                    *x = (*x - max).exp();
                    z += *x;
                }
                row[..=i].iter_mut().for_each(|x| *x /= z);
                row[i + 1..].fill(0.0);
            }
            gemm(t, t, hd, 1.0, p, (t, 1), &v[kv_off..], (kw, 1), 0.0, &mut out[q_off..], (qw, 1));
        }
    }
    (out, probs)
}

/// Accumulates input adjoints of [`attention_forward`] into the provided
/// gradient buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    s: AttentionShape,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let (t, hd, qw, kw) = (s.seq, s.head_dim, s.q_width(), s.kv_width());
    let mut dp = vec![0.0; t * t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let kh = h / s.group();
            let q_off = b * t * qw + h * hd;
            let kv_off = b * t * kw + kh * hd;
            let p_off = (b * s.heads + h) * t * t;
            let p = &probs[p_off..p_off + t * t];
            if let Some(dv) = dv.as_deref_mut() {
                gemm(t, t, hd, 1.0, p, (1, t), &dout[q_off..], (qw, 1), 1.0, &mut dv[kv_off..], (kw, 1));
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            gemm(t, hd, t, 1.0, &dout[q_off..], (qw, 1), &v[kv_off..], (1, kw), 0.0, &mut dp, (t, 1));
            // dS = P * (dP - rowsum(P * dP)), reusing dp for dS.
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
                dr[i + 1..].fill(0.0);
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm(t, t, hd, s.scale(), &dp, (t, 1), &k[kv_off..], (kw, 1), 1.0, &mut dq[q_off..], (qw, 1));
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(t, t, hd, s.scale(), &dp, (1, t), &q[q_off..], (qw, 1), 1.0, &mut dk[kv_off..], (kw, 1));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_hand_example() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        assert_eq!(matmul(&a, &b, 2, 2, 1), vec![17.0, 39.0]);
    }

    #[test]
    fn gemm_transposed_strides() {
        // A^T B with A stored 2x3.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.0];
        let mut c = [0.0; 3];
        gemm(3, 2, 1, 1.0, &a, (1, 3), &b, (1, 1), 0.0, &mut c, (1, 1));
        assert_eq!(c, [5.0, 7.0, 9.0]);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        assert!(RopeTable::new(4, 3, 10000.0).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity_and_inverse_undoes() {
        let table = RopeTable::new(8, 4, 10000.0).unwrap();
        let orig = vec![0.3, -1.2, 2.0, 0.7, 1.0, 2.0, 3.0, 4.0];
        let mut x = orig.clone();
        table.rotate(&mut x, 4, &[0, 5], false).unwrap();
        assert_eq!(&x[..4], &orig[..4]);
        table.rotate(&mut x, 4, &[0, 5], true).unwrap();
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
