//! Dense kernels shared by forward evaluation and the backward sweep.

use super::tensor::Tensor;
use crate::quantizer::SelectionKind;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, bv) in dst.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_raw(m, n, out)
}

/// `a (m×k) · bᵀ` for `b (n×k)`.
pub(crate) fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..n {
            out.push(dot(arow, b.row_slice(j)));
        }
    }
    Tensor::from_raw(m, n, out)
}

/// `aᵀ · b` for `a (m×k)`, `b (m×n)`.
pub(crate) fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = b.row_slice(i);
        for p in 0..k {
            let aip = a.data()[i * k + p];
            let dst = &mut out[p * n..(p + 1) * n];
            for (o, bv) in dst.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_raw(k, n, out)
}

pub(crate) fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::from_raw(1, g.cols(), out)
}

pub(crate) fn row_softmax(a: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let row = a.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &x in row {
            let e = (x - max).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    Tensor::from_raw(a.rows(), a.cols(), out)
}

pub(crate) fn row_log_softmax(a: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let row = a.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    Tensor::from_raw(a.rows(), a.cols(), out)
}

/// Backward of the selection-score block `scores[r][j] = s(z_r, c_j)`.
///
/// Returns gradients for the sub-vectors, the codebook and (bilinear only)
/// the bilinear matrix.
pub(crate) fn selection_scores_vjp(
    kind: SelectionKind,
    z: &Tensor,
    c: &Tensor,
    w: Option<&[f64]>,
    g: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let s = z.cols();
    let (n, l) = (z.rows(), c.rows());
    let mut dz = vec![0.0; n * s];
    let mut dc = vec![0.0; l * s];
    let mut dw = w.map(|_| vec![0.0; s * s]);
    let mut zw = vec![0.0; s];
    for r in 0..n {
        let zr = z.row_slice(r);
        let z_norm = dot(zr, zr).sqrt();
        if let Some(w) = w {
            for (k, out) in zw.iter_mut().enumerate() {
                *out = (0..s).map(|m| zr[m] * w[m * s + k]).sum();
            }
        }
        for j in 0..l {
            let gj = g.get(r, j);
            if gj == 0.0 {
                continue;
            }
            let cj = c.row_slice(j);
            let dzr = &mut dz[r * s..(r + 1) * s];
            let dcj = &mut dc[j * s..(j + 1) * s];
            match kind {
                SelectionKind::L2 => {
                    let dist = zr.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    if dist > 0.0 {
                        for m in 0..s {
                            let u = (zr[m] - cj[m]) / dist;
                            dzr[m] -= gj * u;
                            dcj[m] += gj * u;
                        }
                    }
                }
                SelectionKind::Product => {
                    for m in 0..s {
                        dzr[m] += gj * cj[m];
                        dcj[m] += gj * zr[m];
                    }
                }
                SelectionKind::Cosine => {
                    let c_norm = dot(cj, cj).sqrt();
                    let inv = 1.0 / (z_norm * c_norm);
                    let cos = dot(zr, cj) * inv;
                    for m in 0..s {
                        dzr[m] += gj * (cj[m] * inv - cos * zr[m] / (z_norm * z_norm));
                        dcj[m] += gj * (zr[m] * inv - cos * cj[m] / (c_norm * c_norm));
                    }
                }
                SelectionKind::Bilinear => {
                    let w = w.expect("bilinear selection carries a matrix");
                    let dw = dw.as_mut().expect("allocated with w");
                    for m in 0..s {
                        let wc: f64 = (0..s).map(|k| w[m * s + k] * cj[k]).sum();
                        dzr[m] += gj * wc;
                        dcj[m] += gj * zw[m];
                        for k in 0..s {
                            dw[m * s + k] += gj * zr[m] * cj[k];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_raw(n, s, dz),
        Tensor::from_raw(l, s, dc),
        dw.map(|d| Tensor::from_raw(s, s, d)),
    )
}
