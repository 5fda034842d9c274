//! Raw row-major f32 kernels. Every routine computes each output row from
//! the corresponding input row(s) only, in a fixed summation order, so a
//! row's result never depends on how many other rows are in the batch.

/// `c[m,n] = alpha · a · b + beta · c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn sgemm(m: usize, k: usize, n: usize, a: (&[f32], isize, isize), b: (&[f32], isize, isize), beta: f32, c: &mut [f32]) {
    assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() >= m * n, "sgemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access of the three
    // operands in bounds, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    sgemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), 0.0, &mut c);
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    sgemm(m, k, n, (a, k as isize, 1), (b, 1, k as isize), 0.0, &mut c);
    c
}

/// `out[k,n] += a[m,k]ᵀ · d[m,n]`
pub fn matmul_tn_acc(a: &[f32], d: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    sgemm(k, m, n, (a, 1, k as isize), (d, n as isize, 1), 1.0, out);
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

/// Rational approximation of tanh, accurate to a few ulp in f32 and free
/// of libm calls so elementwise loops vectorize.
#[inline]
pub fn tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A: [f32; 7] = [
        4.893_524_6e-3,
        6.372_619_3e-4,
        1.485_722_4e-5,
        5.122_297e-8,
        -8.604_672e-11,
        2.000_188e-13,
        -2.760_768_5e-16,
    ];
    const B: [f32; 4] = [4.893_525e-3, 2.268_434_7e-3, 1.185_347_1e-4, 1.198_258_4e-6];
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = A[6];
    for &a in A[..6].iter().rev() {
        p = p * x2 + a;
    }
    let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
    x * p / q
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    let t = tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * x * (1.0 + t)
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let t = tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise stable softmax over `row` in place; entries at index `>= visible`
/// are forced to zero.
pub fn softmax_row(row: &mut [f32], visible: usize) {
    let visible = visible.min(row.len());
    if visible == 0 {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let max = row[..visible].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row[..visible].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row[..visible].iter_mut() {
        *v *= inv;
    }
    for v in row[visible..].iter_mut() {
        *v = 0.0;
    }
}
