//! Dense kernels shared by graph evaluation and the graph-free forward paths.
//!
//! Every kernel processes rows independently and in a fixed order, so a
//! computation done on a single row gives bitwise the same result as the
//! same row inside a larger matrix.

use super::Array;

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Array, b: &Array) -> Array {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    assert_eq!(k, k2, "matmul inner dimension");
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array::from_parts(vec![m, n], out)
}

/// `[m,k] x [n,k]^T -> [m,n]`.
pub fn matmul_nt(a: &Array, b: &Array) -> Array {
    let (m, k) = dims2(a);
    let (n, k2) = dims2(b);
    assert_eq!(k, k2, "matmul_nt inner dimension");
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Array::from_parts(vec![m, n], out)
}

/// `[k,m]^T x [k,n] -> [m,n]`.
pub fn matmul_tn(a: &Array, b: &Array) -> Array {
    let (k, m) = dims2(a);
    let (k2, n) = dims2(b);
    assert_eq!(k, k2, "matmul_tn inner dimension");
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array::from_parts(vec![m, n], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of one row, written into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log-softmax of one row, written into `out`.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Softmax along the last axis.
pub fn softmax_rows(a: &Array) -> Array {
    let mut out = Array::zeros(a.shape());
    for r in 0..a.rows() {
        softmax_row(a.row(r), out.row_mut(r));
    }
    out
}

/// Log-softmax along the last axis.
pub fn log_softmax_rows(a: &Array) -> Array {
    let mut out = Array::zeros(a.shape());
    for r in 0..a.rows() {
        log_softmax_row(a.row(r), out.row_mut(r));
    }
    out
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rows of `table` selected by `indices`.
pub fn embedding(table: &Array, indices: &[usize]) -> Array {
    let (_, d) = dims2(table);
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(table.row(i));
    }
    Array::from_parts(vec![indices.len(), d], data)
}

pub fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_parts(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
}

pub fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    assert_eq!(a.shape(), b.shape(), "elementwise shape");
    Array::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `a + b` where `b` either matches `a` or is a row vector broadcast over `a`'s rows.
pub fn add(a: &Array, b: &Array) -> Array {
    if a.shape() == b.shape() {
        return zip_map(a, b, |x, y| x + y);
    }
    let w = a.last_dim();
    assert_eq!(b.len(), w, "row broadcast width");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    out
}

pub(crate) fn dims2(a: &Array) -> (usize, usize) {
    match a.shape() {
        [m, n] => (*m, *n),
        [n] => (1, *n),
        [] => (1, 1),
        s => panic!("expected a matrix, got shape {s:?}"),
    }
}
