//! Dense matrix exponential and related functions.
//!
//! `expm` is the scaling-and-squaring Padé algorithm of Higham (2005): pick the
//! cheapest diagonal Padé degree whose backward-error bound covers `‖A‖₁`,
//! otherwise scale by `2^-s` and use degree 13. `phi` and the Fréchet
//! derivative are read off exponentials of block matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const THETA: [(usize, f64); 4] =
    [(3, 1.495585217958292e-2), (5, 2.539398330063230e-1), (7, 9.504178996162932e-1), (9, 2.097847961257068e0)];
const THETA_13: f64 = 5.371920351148152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] =
    [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0];
const B13: [f64; 14] = [
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

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|col| col.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential of a square matrix.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm of a non-square matrix");
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let norm = norm1(a);
    if !norm.is_finite() {
        return DMatrix::from_element(n, n, f64::NAN);
    }
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    for &(m, theta) in THETA.iter() {
        if norm <= theta {
            let (u, v) = match m {
                3 => pade_low(a, &a2, &id, &B3),
                5 => pade_low(a, &a2, &id, &B5),
                7 => pade_low(a, &a2, &id, &B7),
                _ => pade_low(a, &a2, &id, &B9),
            };
            return solve_pade(u, v);
        }
    }
    let s = ((norm / THETA_13).log2().ceil()).max(0.0) as i32;
    let scale = 2f64.powi(-s);
    let a = a * scale;
    let a2 = a2 * (scale * scale);
    let (u, v) = pade13(&a, &a2, &id);
    let mut x = solve_pade(u, v);
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

fn pade_low(a: &DMatrix<f64>, a2: &DMatrix<f64>, id: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = b.len() - 1;
    let mut u = id * b[1];
    let mut v = id * b[0];
    let mut power = a2.clone();
    let mut k = 2;
    while k <= m {
        v += &power * b[k];
        u += &power * b[k + 1];
        k += 2;
        if k <= m {
            power = &power * a2;
        }
    }
    (a * u, v)
}

fn pade13(a: &DMatrix<f64>, a2: &DMatrix<f64>, id: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &B13;
    let a4 = a2 * a2;
    let a6 = &a4 * a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + a2 * b[3] + id * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + a2 * b[2] + id * b[0];
    (u, v)
}

fn solve_pade(u: DMatrix<f64>, v: DMatrix<f64>) -> DMatrix<f64> {
    let p = &v + &u;
    let q = v - u;
    let n = p.nrows();
    q.lu().solve(&p).unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN))
}

/// `t φ(tA) u` with `φ(z) = (e^z - 1)/z`, via the top-right column of
/// `expm([[tA, tu], [0, 0]])`.
pub fn phi_times(a: &DMatrix<f64>, t: f64, u: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    let aug = phi_augmented(a, t, u);
    expm(&aug).view((0, n), (n, 1)).column(0).into_owned()
}

pub(crate) fn phi_augmented(a: &DMatrix<f64>, t: f64, u: &DVector<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    aug.view_mut((0, n), (n, 1)).copy_from(&(u * t));
    aug
}

/// Exponential together with its Fréchet derivative `L(X, E)`, taken from
/// `expm([[X, E], [0, X]]) = [[e^X, L(X,E)], [0, e^X]]`.
pub fn expm_frechet(x: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !x.is_square() || x.shape() != e.shape() {
        return Err(Error::shape(format!("{:?}", x.shape()), format!("{:?}", e.shape())));
    }
    let n = x.nrows();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(x);
    block.view_mut((n, n), (n, n)).copy_from(x);
    block.view_mut((0, n), (n, n)).copy_from(e);
    let big = expm(&block);
    let exp = big.view((0, 0), (n, n)).into_owned();
    let frechet = big.view((0, n), (n, n)).into_owned();
    Ok((exp, frechet))
}
