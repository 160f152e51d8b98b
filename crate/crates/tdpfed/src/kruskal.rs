//! Kruskal operator, Khatri-Rao chains and a CP-ALS fitter.
//!
//! A set of factor matrices `{A^(1)..A^(N)}` with common column count `R`
//! represents the tensor `sum_r a_r^(1) o ... o a_r^(N)`. The mode-`n`
//! matricized form is `A^(n) * (A^(N) (.) ... (.) A^(n+1) (.) A^(n-1) (.) ...
//! (.) A^(1))^T` with the Khatri-Rao chain in descending mode order; this
//! pairs with the unfolding column order fixed in [`crate::tensor`].

use crate::error::{Error, Result};
use crate::tensor::{hadamard, khatri_rao, unfold, DenseTensor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ordered factor matrices plus rank and the shape they reconstruct to.
#[derive(Debug, Clone, PartialEq)]
pub struct KruskalFactors {
    pub factors: Vec<Matrix>,
    pub rank: usize,
    pub target_shape: Vec<usize>,
}

impl KruskalFactors {
    /// Validates that factor `n` is `I_n x R` for a common `R >= 1`.
    pub fn new(factors: Vec<Matrix>, target_shape: Vec<usize>) -> Result<Self> {
        if factors.is_empty() || factors.len() != target_shape.len() {
            return Err(Error::shape(
                "KruskalFactors::new",
                format!(
                    "{} factors for {}-mode shape",
                    factors.len(),
                    target_shape.len()
                ),
            ));
        }
        let rank = factors[0].cols();
        if rank == 0 {
            return Err(Error::shape("KruskalFactors::new", "rank must be >= 1"));
        }
        for (n, f) in factors.iter().enumerate() {
            if f.cols() != rank || f.rows() != target_shape[n] {
                return Err(Error::shape(
                    "KruskalFactors::new",
                    format!(
                        "factor {} is {}x{}, expected {}x{}",
                        n,
                        f.rows(),
                        f.cols(),
                        target_shape[n],
                        rank
                    ),
                ));
            }
        }
        Ok(Self {
            factors,
            rank,
            target_shape,
        })
    }

    pub fn ndim(&self) -> usize {
        self.factors.len()
    }
}

/// Khatri-Rao chain over all factors except `skip`, in descending mode order.
/// For a single remaining factor the chain is that factor; with none left
/// (1-mode case) it is a `1 x R` row of ones.
pub fn khatri_rao_chain_skip(factors: &[Matrix], skip: usize) -> Result<Matrix> {
    let rank = factors[0].cols();
    let mut acc: Option<Matrix> = None;
    for m in (0..factors.len()).rev() {
        if m == skip {
            continue;
        }
        acc = Some(match acc {
            None => factors[m].clone(),
            Some(a) => khatri_rao(&a, &factors[m])?,
        });
    }
    Ok(acc.unwrap_or_else(|| Matrix::new(1, rank, vec![1.0; rank]).expect("rank >= 1")))
}

/// Hadamard product of the Gram matrices `A^(m)^T A^(m)` over all `m != skip`.
pub fn gram_hadamard_skip(factors: &[Matrix], skip: usize) -> Result<Matrix> {
    let rank = factors[0].cols();
    let mut acc: Option<Matrix> = None;
    for (m, f) in factors.iter().enumerate() {
        if m == skip {
            continue;
        }
        let g = f.gram();
        acc = Some(match acc {
            None => g,
            Some(a) => hadamard(&a, &g)?,
        });
    }
    Ok(acc.unwrap_or_else(|| Matrix::new(rank, rank, vec![1.0; rank * rank]).expect("rank >= 1")))
}

/// Reconstructs the full tensor: entry `(i_1..i_N) = sum_r prod_n A^(n)[i_n, r]`.
pub fn kruskal_reconstruct(f: &KruskalFactors) -> DenseTensor {
    let total: usize = f.target_shape.iter().product();
    let mut out = vec![0.0; total];
    let n_modes = f.ndim();
    let mut term: Vec<f64> = Vec::with_capacity(total);
    let mut next: Vec<f64> = Vec::with_capacity(total);
    for r in 0..f.rank {
        // Progressive outer product, highest mode first, so the flat index
        // ends up row-major (last mode fastest).
        term.clear();
        let last = &f.factors[n_modes - 1];
        for i in 0..last.rows() {
            term.push(last.get(i, r));
        }
        for m in (0..n_modes - 1).rev() {
            let fm = &f.factors[m];
            next.clear();
            for i in 0..fm.rows() {
                let v = fm.get(i, r);
                next.extend(term.iter().map(|&t| v * t));
            }
            std::mem::swap(&mut term, &mut next);
        }
        for (o, &t) in out.iter_mut().zip(&term) {
            *o += t;
        }
    }
    DenseTensor::new(f.target_shape.clone(), out).expect("consistent factors")
}

/// Mode-`n` matricized form of the Kruskal operator, computed directly from
/// the factors (never materializing the full tensor).
pub fn kruskal_unfold(f: &KruskalFactors, mode: usize) -> Result<Matrix> {
    if mode >= f.ndim() {
        return Err(Error::ModeOutOfRange {
            mode,
            ndim: f.ndim(),
        });
    }
    let chain = khatri_rao_chain_skip(&f.factors, mode)?;
    f.factors[mode].matmul_bt(&chain)
}

/// Jacobi eigendecomposition of a symmetric matrix; returns eigenvalues and
/// the orthogonal matrix of eigenvectors (as columns).
fn eigh_jacobi(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let norm: f64 = m.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-30_f64.max(norm * 1e-15);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let evals = (0..n).map(|i| m.get(i, i)).collect();
    (evals, v)
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix. Eigenvalues
/// below `cutoff` relative to the largest are treated as zero.
pub fn pinv_psd(a: &Matrix, cutoff: f64) -> Matrix {
    let n = a.rows();
    let (evals, vecs) = eigh_jacobi(a);
    let max_ev = evals.iter().fold(0.0_f64, |m, &e| m.max(e.abs()));
    let mut out = Matrix::zeros(n, n);
    if max_ev == 0.0 {
        return out;
    }
    for (r, &ev) in evals.iter().enumerate() {
        if ev.abs() <= cutoff * max_ev {
            continue;
        }
        let inv = 1.0 / ev;
        for i in 0..n {
            let vir = vecs.get(i, r) * inv;
            if vir == 0.0 {
                continue;
            }
            for j in 0..n {
                let x = out.get(i, j) + vir * vecs.get(j, r);
                out.set(i, j, x);
            }
        }
    }
    out
}

/// Relative eigenvalue cutoff used when inverting the Gram product in ALS.
pub const ALS_PINV_CUTOFF: f64 = 1e-12;

/// Rebalances the norm of each rank-1 term evenly across the modes. Leaves
/// the reconstruction unchanged (up to rounding) while keeping the Gram
/// products well conditioned when columns drift toward degenerate scales.
fn rebalance_columns(factors: &mut [Matrix]) {
    let rank = factors[0].cols();
    let n_modes = factors.len() as f64;
    for r in 0..rank {
        let norms: Vec<f64> = factors
            .iter()
            .map(|f| (0..f.rows()).map(|i| f.get(i, r).powi(2)).sum::<f64>().sqrt())
            .collect();
        if norms.iter().any(|&n| n == 0.0) {
            continue;
        }
        let total: f64 = norms.iter().product();
        let target = total.powf(1.0 / n_modes);
        for (f, &n) in factors.iter_mut().zip(&norms) {
            let scale = target / n;
            for i in 0..f.rows() {
                let v = f.get(i, r) * scale;
                f.set(i, r, v);
            }
        }
    }
}

/// Alternating least squares CP fit. Factors start from a seeded
/// uniform(-0.5, 0.5) draw; each iteration sweeps the modes in ascending
/// order with `A^(n) <- X_(n) * H_n * pinv(V_n)` and then rebalances the
/// rank-1 term norms across modes. Deterministic given `seed`.
///
/// The reconstruction error is non-increasing across iterations by
/// construction: an iteration whose error would rise (possible only at the
/// rounding-noise floor, where a near-singular `V_n` amplifies noise past
/// the pinv cutoff) is rolled back and the fit stops there.
pub fn cp_als(t: &DenseTensor, rank: usize, iters: usize, seed: u64) -> Result<KruskalFactors> {
    if rank == 0 {
        return Err(Error::shape("cp_als", "rank must be >= 1"));
    }
    if iters == 0 {
        return Err(Error::shape("cp_als", "iters must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape().to_vec();
    let mut factors: Vec<Matrix> = shape
        .iter()
        .map(|&extent| {
            let data = (0..extent * rank)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            Matrix::new(extent, rank, data).expect("positive extents")
        })
        .collect();

    let unfoldings: Vec<Matrix> = (0..shape.len())
        .map(|n| unfold(t, n))
        .collect::<Result<_>>()?;

    let error_of = |factors: &[Matrix]| -> Result<f64> {
        let f = KruskalFactors::new(factors.to_vec(), shape.clone())?;
        Ok(reconstruction_error(t, &f))
    };
    let mut prev_err = error_of(&factors)?;
    for _iter in 0..iters {
        let checkpoint = factors.clone();
        for n in 0..shape.len() {
            let chain = khatri_rao_chain_skip(&factors, n)?;
            let mttkrp = unfoldings[n].matmul(&chain)?;
            let v = gram_hadamard_skip(&factors, n)?;
            factors[n] = mttkrp.matmul(&pinv_psd(&v, ALS_PINV_CUTOFF))?;
        }
        rebalance_columns(&mut factors);
        let err = error_of(&factors)?;
        if err > prev_err {
            factors = checkpoint;
            break;
        }
        prev_err = err;
    }
    KruskalFactors::new(factors, shape)
}

/// Relative reconstruction error `||t - [[A]]|| / ||t||` (absolute when
/// `||t|| = 0`).
pub fn reconstruction_error(t: &DenseTensor, f: &KruskalFactors) -> f64 {
    let rec = kruskal_reconstruct(f);
    let mut num = 0.0;
    for (a, b) in t.data().iter().zip(rec.data()) {
        let d = a - b;
        num += d * d;
    }
    let den: f64 = t.data().iter().map(|v| v * v).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::frobenius_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_factors(shape: &[usize], rank: usize, seed: u64) -> KruskalFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = shape
            .iter()
            .map(|&e| {
                let data = (0..e * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
                Matrix::new(e, rank, data).unwrap()
            })
            .collect();
        KruskalFactors::new(factors, shape.to_vec()).unwrap()
    }

    #[test]
    fn reconstruct_rank1_ones_is_all_ones() {
        let shape = [2, 3, 2];
        let factors = shape
            .iter()
            .map(|&e| Matrix::new(e, 1, vec![1.0; e]).unwrap())
            .collect();
        let f = KruskalFactors::new(factors, shape.to_vec()).unwrap();
        let t = kruskal_reconstruct(&f);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reconstruct_rank1_outer_product() {
        let a = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let f = KruskalFactors::new(vec![a, b], vec![2, 2]).unwrap();
        let t = kruskal_reconstruct(&f);
        assert_eq!(t.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn reconstruct_is_pure() {
        let f = random_factors(&[3, 2, 2], 2, 40);
        assert_eq!(kruskal_reconstruct(&f), kruskal_reconstruct(&f));
    }

    #[test]
    fn factors_validation() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(3, 3);
        assert!(KruskalFactors::new(vec![a.clone(), b], vec![2, 3]).is_err());
        assert!(KruskalFactors::new(vec![a], vec![3]).is_err());
    }

    #[test]
    fn kruskal_unfold_two_mode_is_a1_a2t() {
        let f = random_factors(&[3, 4], 2, 41);
        let u = kruskal_unfold(&f, 0).unwrap();
        let expect = f.factors[0].matmul_bt(&f.factors[1]).unwrap();
        assert_eq!(u, expect);
    }

    #[test]
    fn kruskal_unfold_matches_reconstruct_then_unfold() {
        let f = random_factors(&[3, 2, 4], 2, 42);
        let rec = kruskal_reconstruct(&f);
        for mode in 0..3 {
            let direct = kruskal_unfold(&f, mode).unwrap();
            let via = unfold(&rec, mode).unwrap();
            for (a, b) in direct.data().iter().zip(via.data()) {
                assert!((a - b).abs() < 1e-10, "mode {mode}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn kruskal_unfold_rank1_ones_is_constant() {
        let shape = [2, 3];
        let factors = shape
            .iter()
            .map(|&e| Matrix::new(e, 1, vec![1.0; e]).unwrap())
            .collect();
        let f = KruskalFactors::new(factors, shape.to_vec()).unwrap();
        let u = kruskal_unfold(&f, 0).unwrap();
        assert!(u.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kruskal_unfold_mode_out_of_range() {
        let f = random_factors(&[2, 2], 1, 43);
        assert!(kruskal_unfold(&f, 2).is_err());
    }

    #[test]
    fn pinv_of_invertible_matches_inverse() {
        // Symmetric PD 2x2 with known inverse.
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let p = pinv_psd(&a, 1e-12);
        let id = a.matmul(&p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((id.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pinv_of_singular_projects() {
        // Rank-1 PSD: [[1,1],[1,1]]; pinv = same / 4.
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let p = pinv_psd(&a, 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.get(i, j) - 0.25).abs() < 1e-12);
            }
        }
        let z = Matrix::zeros(3, 3);
        assert_eq!(pinv_psd(&z, 1e-12), z);
    }

    #[test]
    fn cp_als_recovers_rank1() {
        let f = random_factors(&[4, 3, 2], 1, 44);
        let t = kruskal_reconstruct(&f);
        let fit = cp_als(&t, 1, 20, 7).unwrap();
        assert!(reconstruction_error(&t, &fit) < 1e-8);
    }

    #[test]
    fn cp_als_exact_rank_recovery() {
        // R >= product of all-but-largest extents makes the chain square and
        // generically invertible, so the fit is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let data = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = DenseTensor::new(vec![2, 2, 2], data).unwrap();
        let fit = cp_als(&t, 4, 5, 8).unwrap();
        assert!(
            reconstruction_error(&t, &fit) < 1e-8,
            "err = {}",
            reconstruction_error(&t, &fit)
        );
    }

    #[test]
    fn cp_als_error_monotone_in_iters() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let data = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = DenseTensor::new(vec![2, 3, 4], data).unwrap();
        let mut prev = f64::INFINITY;
        for iters in 1..=6 {
            let fit = cp_als(&t, 2, iters, 9).unwrap();
            let err = reconstruction_error(&t, &fit);
            assert!(err <= prev + 1e-9, "iters {iters}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn cp_als_deterministic() {
        let t = kruskal_reconstruct(&random_factors(&[3, 3], 2, 47));
        let a = cp_als(&t, 2, 5, 11).unwrap();
        let b = cp_als(&t, 2, 5, 11).unwrap();
        assert_eq!(a, b);
        assert!(frobenius_norm(&kruskal_reconstruct(&a)).is_finite());
    }
}
