//! Dense kernels shared by the graph and the straight evaluation path, so both
//! produce bitwise-identical results.
//!
//! Every reduction runs in a fixed sequential order.

/// `out = a (n x k) * b (k x m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `da += dout (n x m) * b^T`.
pub fn matmul_grad_left(dout: &[f64], b: &[f64], n: usize, k: usize, m: usize, da: &mut [f64]) {
    for i in 0..n {
        let drow = &dout[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for (d, bv) in drow.iter().zip(brow) {
                acc += d * bv;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `db += a^T * dout (n x m)`.
pub fn matmul_grad_right(a: &[f64], dout: &[f64], n: usize, k: usize, m: usize, db: &mut [f64]) {
    for i in 0..n {
        let drow = &dout[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * m..(p + 1) * m];
            for (o, d) in dbrow.iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
}

/// Adds `bias` to every row of the `rows x bias.len()` matrix `x`.
pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Row-wise `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}
