//! Eager kernels shared by the autodiff graph and the oracles.

use super::{FlopCounter, Scalar, Tensor};
use crate::error::{Error, Result};

/// Row-major product of an `m x k` and a `k x n` block (or `n x k` when
/// `trans_b`), written into `out` with `out = alpha * a * b + beta * out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    out: &mut [T],
    beta: T,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        out,
        n as isize,
        1,
    );
}

/// Standard product of two 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut scratch = FlopCounter::new();
    matmul_counted(a, b, &mut scratch, "matmul")
}

/// [`matmul`] that records `2*m*k*n` FLOPs under `label`.
pub fn matmul_counted<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    flops: &mut FlopCounter,
    label: &str,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(format!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_into(m, k, n, a.data(), false, b.data(), false, &mut out, T::zero());
    flops.add_matmul(label, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Stable softmax over each last-axis slice.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = x.width();
    if w == 0 {
        return Err(Error::dim("softmax over an empty last axis"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Kronecker product: `out[i*m + j, k*n + l] = a[i, k] * b[j, l]`.
pub fn kron<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(format!(
            "kron expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let (m, n) = (b.shape()[0], b.shape()[1]);
    let cols = q * n;
    let mut out = vec![T::zero(); p * m * cols];
    for i in 0..p {
        for k in 0..q {
            let s = a.data()[i * q + k];
            for j in 0..m {
                let dst = (i * m + j) * cols + k * n;
                for (o, &bv) in out[dst..dst + n].iter_mut().zip(b.row(j)) {
                    *o = s * bv;
                }
            }
        }
    }
    Tensor::new(vec![p * m, cols], out)
}

/// Kronecker composition of per-head axis factors.
///
/// `spatial` is `[H, Ns, d1]`, `spectral` is `[H, Nc, d2]`; the result is
/// `[Ns, Nc, H*d1*d2]` with
/// `out[n, c, h*d1*d2 + i*d2 + j] = sign * spatial[h, n, i] * spectral[h, c, j]`.
pub(crate) fn kron_compose_kernel<T: Scalar>(
    spatial: &Tensor<T>,
    spectral: &Tensor<T>,
    sign: T,
) -> Result<Tensor<T>> {
    let (heads, ns, d1) = dims3(spatial, "kron_compose spatial factor")?;
    let (heads_c, nc, d2) = dims3(spectral, "kron_compose spectral factor")?;
    if heads != heads_c {
        return Err(Error::dim(format!(
            "head counts differ: {heads} vs {heads_c}"
        )));
    }
    let hd = d1 * d2;
    let width = heads * hd;
    let mut out = vec![T::zero(); ns * nc * width];
    for n in 0..ns {
        for c in 0..nc {
            let base = (n * nc + c) * width;
            for h in 0..heads {
                let ys = &spatial.data()[(h * ns + n) * d1..(h * ns + n + 1) * d1];
                let yc = &spectral.data()[(h * nc + c) * d2..(h * nc + c + 1) * d2];
                let dst = &mut out[base + h * hd..base + (h + 1) * hd];
                for (i, &s) in ys.iter().enumerate() {
                    let s = sign * s;
                    for (o, &cv) in dst[i * d2..(i + 1) * d2].iter_mut().zip(yc) {
                        *o = s * cv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![ns, nc, width], out)
}

pub(crate) fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::dim(format!("{what} must be 3-D, got {:?}", t.shape()))),
    }
}

/// Rotates consecutive feature pairs of every row. `cos`/`sin` are `[R, w/2]`
/// and are broadcast over any leading batch of `R`-row blocks.
pub(crate) fn rotate_rows<T: Scalar>(
    x: &[T],
    width: usize,
    cos: &Tensor<T>,
    sin: &Tensor<T>,
    inverse: bool,
) -> Vec<T> {
    let half = width / 2;
    let r = cos.rows();
    let mut out = x.to_vec();
    for (row_idx, row) in out.chunks_mut(width).enumerate() {
        let t = row_idx % r;
        let (c_row, s_row) = (cos.row(t), sin.row(t));
        for i in 0..half {
            let (c, s) = (c_row[i], if inverse { -s_row[i] } else { s_row[i] });
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    out
}

const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU and its derivative.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let u = k * (x + T::from_f64(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::from_f64(3.0) * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(vec![m, n]).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = Tensor::<f64>::eye(2).unwrap();
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);

        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(vec![5, 7], &mut rng);
        let b = random(vec![7, 3], &mut rng);
        let mut flops = FlopCounter::new();
        let got = matmul_counted(&a, &b, &mut flops, "mm").unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)).unwrap() < 1e-6);
        assert_eq!(flops.get("mm"), 2 * 5 * 7 * 3);

        let a32: Tensor<f32> = a.cast();
        let b32: Tensor<f32> = b.cast();
        let got32: Tensor<f64> = matmul(&a32, &b32).unwrap().cast();
        assert!(got32.max_abs_diff(&triple_loop(&a, &b)).unwrap() < 1e-6);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
        let v = Tensor::<f64>::zeros(vec![3]).unwrap();
        assert!(matches!(matmul(&v, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::<f64>::from_f64(vec![2], &[0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        for x in [-40.0, 0.0, 3.5, 900.0] {
            let s = softmax_rows(&Tensor::<f64>::scalar(x)).unwrap();
            assert_eq!(s.data(), &[1.0]);
        }
        let s = softmax_rows(&Tensor::<f32>::from_f64(vec![3], &[1000.0; 3]).unwrap()).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kron_examples() {
        let i2 = Tensor::<f64>::eye(2).unwrap();
        let i3 = Tensor::<f64>::eye(3).unwrap();
        assert_eq!(kron(&i2, &i3).unwrap(), Tensor::eye(6).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(vec![2, 3], &mut rng);
        let two = Tensor::from_rows(&[&[2.0]]).unwrap();
        assert_eq!(kron(&two, &b).unwrap(), b.map(|x| 2.0 * x));

        let v = Tensor::<f64>::zeros(vec![3]).unwrap();
        assert!(kron(&v, &b).is_err());
    }

    #[test]
    fn kron_mixed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(vec![2, 2], &mut rng);
        let b = random(vec![3, 3], &mut rng);
        let c = random(vec![2, 2], &mut rng);
        let d = random(vec![3, 3], &mut rng);
        let lhs = matmul(&kron(&a, &b).unwrap(), &kron(&c, &d).unwrap()).unwrap();
        let rhs = kron(&matmul(&a, &c).unwrap(), &matmul(&b, &d).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - num).abs() < 1e-8);
        }
    }
}
