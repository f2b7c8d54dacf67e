//! Matrix exponential by scaling-and-squaring with a 13th-order Padé
//! approximant, plus its Fréchet derivative.

use super::{Matrix, NumError};

/// Padé-13 numerator coefficients b₀..b₁₃.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Scaled 1-norm threshold for the order-13 approximant.
const THETA13: f64 = 5.371920351148152;

/// e^A via scaling-and-squaring with the 13th-order Padé approximant.
pub fn expm(a: &Matrix) -> Result<Matrix, NumError> {
    if !a.is_square() {
        return Err(NumError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    a.check_finite()?;
    let n = a.rows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }

    let norm = a.one_norm();
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let a_scaled = a.scale(0.5_f64.powi(s as i32));

    // U = A (b13 A⁶ + b11 A⁴ + b9 A²) A⁶ + A (b7 A⁶ + b5 A⁴ + b3 A² + b1 I)
    // V =   (b12 A⁶ + b10 A⁴ + b8 A²) A⁶ +   (b6 A⁶ + b4 A⁴ + b2 A² + b0 I)
    let ident = Matrix::identity(n);
    let a2 = a_scaled.matmul(&a_scaled);
    let a4 = a2.matmul(&a2);
    let a6 = a4.matmul(&a2);

    let mut w1 = a6.scale(PADE13[13]);
    w1.axpy(PADE13[11], &a4);
    w1.axpy(PADE13[9], &a2);
    let mut w2 = a6.scale(PADE13[7]);
    w2.axpy(PADE13[5], &a4);
    w2.axpy(PADE13[3], &a2);
    w2.axpy(PADE13[1], &ident);
    let u = a_scaled.matmul(&a6.matmul(&w1).add(&w2));

    let mut z1 = a6.scale(PADE13[12]);
    z1.axpy(PADE13[10], &a4);
    z1.axpy(PADE13[8], &a2);
    let mut z2 = a6.scale(PADE13[6]);
    z2.axpy(PADE13[4], &a4);
    z2.axpy(PADE13[2], &a2);
    z2.axpy(PADE13[0], &ident);
    let v = a6.matmul(&z1).add(&z2);

    // r = (V - U)⁻¹ (V + U), then undo the scaling by repeated squaring.
    let mut r = v.sub(&u).solve(&v.add(&u))?;
    for _ in 0..s {
        r = r.matmul(&r);
    }
    Ok(r)
}

/// Fréchet derivative L(A, E) = d/ds e^{A+sE}|₍ₛ₌₀₎ via the block identity
/// expm([[A, E], [0, A]]) = [[e^A, L(A,E)], [0, e^A]].
pub fn expm_frechet(a: &Matrix, e: &Matrix) -> Result<Matrix, NumError> {
    if !a.is_square() {
        return Err(NumError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    if a.rows() != e.rows() || a.cols() != e.cols() {
        return Err(NumError::ShapeMismatch(format!(
            "expm_frechet: A is {}x{}, E is {}x{}",
            a.rows(),
            a.cols(),
            e.rows(),
            e.cols()
        )));
    }
    let n = a.rows();
    let mut block = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            block.set(i, j, a.get(i, j));
            block.set(i, n + j, e.get(i, j));
            block.set(n + i, n + j, a.get(i, j));
        }
    }
    let big = expm(&block)?;
    Ok(Matrix::from_fn(n, n, |i, j| big.get(i, n + j)))
}
