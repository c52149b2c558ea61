use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::kernel::{rbf_from_sq, resolve_bandwidth, sq_distances, KernelConfig};
use super::{check_clouds, check_weights, through_normalization, IpmEstimate};
use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

/// Gradients of `Σ_ij C_ij k(p_i, q_j)` with respect to `p` and `q`, given
/// `G = C ⊙ K` and the bandwidth. `∂k(p,q)/∂p = -k (p - q) / σ²`.
fn cross_term_grads<S: Scalar>(g: &Array2<S>, p: ArrayView2<S>, q: ArrayView2<S>, sigma: S) -> (Array2<S>, Array2<S>) {
    let inv = S::one() / (sigma * sigma);
    let row = g.sum_axis(Axis(1));
    let col = g.sum_axis(Axis(0));
    let mut gp = g.dot(&q);
    for (i, mut r) in gp.rows_mut().into_iter().enumerate() {
        r.zip_mut_with(&p.row(i), |acc, &pi| *acc = (*acc - row[i] * pi) * inv);
    }
    let mut gq = g.t().dot(&p);
    for (j, mut r) in gq.rows_mut().into_iter().enumerate() {
        r.zip_mut_with(&q.row(j), |acc, &qj| *acc = (*acc - col[j] * qj) * inv);
    }
    (gp, gq)
}

/// Squared MMD between clouds `a` (m points) and `b` (n points) under an RBF
/// kernel.
///
/// Without weights this is the unbiased U-statistic
/// `1/(m(m-1)) Σ_{i≠j} k(a_i,a_j) - 2/(mn) Σ_ij k(a_i,b_j) + 1/(n(n-1)) Σ_{i≠j} k(b_i,b_j)`.
/// With weights on either cloud it is the plug-in V-statistic between the
/// weighted empirical measures `Σ_i w_i/Σw δ(a_i)` (flagged `biased`); a
/// missing weight vector then counts as uniform.
pub fn mmd2_quadratic<S: Scalar>(
    a: ArrayView2<S>,
    b: ArrayView2<S>,
    weights_a: Option<ArrayView1<S>>,
    weights_b: Option<ArrayView1<S>>,
    cfg: &KernelConfig,
) -> Result<IpmEstimate<S>> {
    check_clouds(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    check_weights(weights_a, m, "cloud A")?;
    check_weights(weights_b, n, "cloud B")?;
    let weighted = weights_a.is_some() || weights_b.is_some();
    if !weighted && (m < 2 || n < 2) {
        return Err(CfrError::Size(format!("unbiased MMD needs at least 2 points per cloud, got {m} and {n}")));
    }
    if m == 0 || n == 0 {
        return Err(CfrError::Size("empty cloud".into()));
    }
    let (sigma, fallback) = resolve_bandwidth(cfg, &[a, b])?;
    let kaa = rbf_from_sq(&sq_distances(a, a), sigma);
    let kab = rbf_from_sq(&sq_distances(a, b), sigma);
    let kbb = rbf_from_sq(&sq_distances(b, b), sigma);
    let two = S::c(2.0);

    if !weighted {
        let (mf, nf) = (S::of(m), S::of(n));
        let caa = S::one() / (mf * (mf - S::one()));
        let cab = -two / (mf * nf);
        let cbb = S::one() / (nf * (nf - S::one()));
        let offdiag = |k: &Array2<S>| k.sum() - k.diag().sum();
        let raw = caa * offdiag(&kaa) + cab * kab.sum() + cbb * offdiag(&kbb);
        // diagonal kernel terms have zero gradient, so scaling the full matrix is exact
        let (ga1, ga2) = cross_term_grads(&(&kaa * caa), a, a, sigma);
        let (gab_a, gab_b) = cross_term_grads(&(&kab * cab), a, b, sigma);
        let (gb1, gb2) = cross_term_grads(&(&kbb * cbb), b, b, sigma);
        return Ok(IpmEstimate {
            value: raw.max(S::zero()),
            raw,
            grad_a: ga1 + ga2 + gab_a,
            grad_b: gb1 + gb2 + gab_b,
            grad_weights_a: None,
            grad_weights_b: None,
            transport: None,
            marginal_error: None,
            biased: false,
            bandwidth: Some(sigma),
            bandwidth_fallback: fallback,
        });
    }

    let ones_a = Array1::ones(m);
    let ones_b = Array1::ones(n);
    let wa = weights_a.unwrap_or(ones_a.view());
    let wb = weights_b.unwrap_or(ones_b.view());
    let pa = &wa / wa.sum();
    let pb = &wb / wb.sum();
    let kaa_pa = kaa.dot(&pa);
    let kbb_pb = kbb.dot(&pb);
    let kab_pb = kab.dot(&pb);
    let kba_pa = kab.t().dot(&pa);
    let raw = pa.dot(&kaa_pa) - two * pa.dot(&kab_pb) + pb.dot(&kbb_pb);

    let outer = |u: &Array1<S>, v: &Array1<S>| {
        let uc = u.view().insert_axis(Axis(1));
        let vr = v.view().insert_axis(Axis(0));
        &uc * &vr
    };
    let (ga1, ga2) = cross_term_grads(&(&kaa * &outer(&pa, &pa)), a, a, sigma);
    let (gab_a, gab_b) = cross_term_grads(&(&kab * &outer(&pa, &pb) * (-two)), a, b, sigma);
    let (gb1, gb2) = cross_term_grads(&(&kbb * &outer(&pb, &pb)), b, b, sigma);
    let grad_pa = (&kaa_pa - &kab_pb) * two;
    let grad_pb = (&kbb_pb - &kba_pa) * two;
    Ok(IpmEstimate {
        value: raw.max(S::zero()),
        raw,
        grad_a: ga1 + ga2 + gab_a,
        grad_b: gb1 + gb2 + gab_b,
        grad_weights_a: weights_a.map(|w| through_normalization(w, &grad_pa)),
        grad_weights_b: weights_b.map(|w| through_normalization(w, &grad_pb)),
        transport: None,
        marginal_error: None,
        biased: true,
        bandwidth: Some(sigma),
        bandwidth_fallback: fallback,
    })
}

/// Linear-time MMD² over consecutive pairs:
/// `1/n' Σ_i [k(a_{2i-1},a_{2i}) + k(b_{2i-1},b_{2i}) - k(a_{2i-1},b_{2i}) - k(a_{2i},b_{2i-1})]`.
/// Both clouds are truncated to the largest common even length `2n'`.
pub fn mmd2_linear<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>, cfg: &KernelConfig) -> Result<IpmEstimate<S>> {
    linear_impl(a, b, None, None, cfg)
}

/// Weighted variant of [`mmd2_linear`]: each kernel term is multiplied by
/// the product of the two points' weights. Unit weights recover the
/// unweighted estimator.
pub fn mmd2_linear_weighted<S: Scalar>(
    a: ArrayView2<S>,
    b: ArrayView2<S>,
    weights_a: Option<ArrayView1<S>>,
    weights_b: Option<ArrayView1<S>>,
    cfg: &KernelConfig,
) -> Result<IpmEstimate<S>> {
    check_weights(weights_a, a.nrows(), "cloud A")?;
    check_weights(weights_b, b.nrows(), "cloud B")?;
    linear_impl(a, b, weights_a, weights_b, cfg)
}

fn linear_impl<S: Scalar>(
    a: ArrayView2<S>,
    b: ArrayView2<S>,
    weights_a: Option<ArrayView1<S>>,
    weights_b: Option<ArrayView1<S>>,
    cfg: &KernelConfig,
) -> Result<IpmEstimate<S>> {
    check_clouds(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    if m < 2 || n < 2 {
        return Err(CfrError::Size(format!("linear MMD needs at least 2 points per cloud, got {m} and {n}")));
    }
    let pairs = m.min(n) / 2;
    let used = 2 * pairs;
    let a_used = a.slice(ndarray::s![..used, ..]);
    let b_used = b.slice(ndarray::s![..used, ..]);
    let (sigma, fallback) = resolve_bandwidth(cfg, &[a_used, b_used])?;
    let inv_s2 = S::one() / (sigma * sigma);
    let half = S::c(0.5) * inv_s2;
    let kern = |p: ArrayView1<S>, q: ArrayView1<S>| {
        let d: S = p.iter().zip(q.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        (-d * half).exp()
    };
    let wa = |i: usize| weights_a.map_or(S::one(), |w| w[i]);
    let wb = |i: usize| weights_b.map_or(S::one(), |w| w[i]);
    let scale = S::one() / S::of(pairs);
    let mut raw = S::zero();
    let mut grad_a = Array2::zeros(a.raw_dim());
    let mut grad_b = Array2::zeros(b.raw_dim());
    let mut gwa = Array1::zeros(m);
    let mut gwb = Array1::zeros(n);

    // term: sign * c * k(p, q); accumulates value and gradients of both ends
    let mut add = |sign: S,
                   (pi, p_is_a): (usize, bool),
                   (qi, q_is_a): (usize, bool),
                   grad_a: &mut Array2<S>,
                   grad_b: &mut Array2<S>| {
        let p = if p_is_a { a.row(pi) } else { b.row(pi) };
        let q = if q_is_a { a.row(qi) } else { b.row(qi) };
        let wp = if p_is_a { wa(pi) } else { wb(pi) };
        let wq = if q_is_a { wa(qi) } else { wb(qi) };
        let k = kern(p, q);
        let c = sign * scale;
        raw += c * wp * wq * k;
        let coef = c * wp * wq * k * inv_s2;
        {
            let gp = if p_is_a { grad_a.row_mut(pi) } else { grad_b.row_mut(pi) };
            let mut gp = gp;
            for j in 0..p.len() {
                gp[j] -= coef * (p[j] - q[j]);
            }
        }
        {
            let gq = if q_is_a { grad_a.row_mut(qi) } else { grad_b.row_mut(qi) };
            let mut gq = gq;
            for j in 0..q.len() {
                gq[j] += coef * (p[j] - q[j]);
            }
        }
        let dw = c * k;
        if p_is_a { gwa[pi] += dw * wq } else { gwb[pi] += dw * wq }
        if q_is_a { gwa[qi] += dw * wp } else { gwb[qi] += dw * wp }
    };
    let one = S::one();
    for i in 0..pairs {
        let (x1, x2) = (2 * i, 2 * i + 1);
        add(one, (x1, true), (x2, true), &mut grad_a, &mut grad_b);
        add(one, (x1, false), (x2, false), &mut grad_a, &mut grad_b);
        add(-one, (x1, true), (x2, false), &mut grad_a, &mut grad_b);
        add(-one, (x2, true), (x1, false), &mut grad_a, &mut grad_b);
    }
    Ok(IpmEstimate {
        value: raw.max(S::zero()),
        raw,
        grad_a,
        grad_b,
        grad_weights_a: weights_a.map(|_| gwa),
        grad_weights_b: weights_b.map(|_| gwb),
        transport: None,
        marginal_error: None,
        biased: false,
        bandwidth: Some(sigma),
        bandwidth_fallback: fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn k1(x: f64, y: f64) -> f64 {
        (-(x - y) * (x - y) / 2.0).exp()
    }

    #[test]
    fn degenerate_identical_clouds() {
        let a = array![[0.0], [0.0]];
        let est = mmd2_quadratic(a.view(), a.view(), None, None, &KernelConfig::fixed(1.0)).unwrap();
        assert_eq!(est.raw, 0.0);
        assert!(!est.biased);
    }

    #[test]
    fn brute_force_three_sums() {
        let a = [0.0, 2.0];
        let b = [1.0, 3.0];
        let mut saa = 0.0;
        let mut sbb = 0.0;
        let mut sab = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                if i != j {
                    saa += k1(a[i], a[j]);
                    sbb += k1(b[i], b[j]);
                }
                sab += k1(a[i], b[j]);
            }
        }
        let oracle = saa / 2.0 - 2.0 * sab / 4.0 + sbb / 2.0;
        let am = array![[0.0], [2.0]];
        let bm = array![[1.0], [3.0]];
        let est = mmd2_quadratic(am.view(), bm.view(), None, None, &KernelConfig::fixed(1.0)).unwrap();
        assert!((est.raw - oracle).abs() < 1e-12);
        let swapped = mmd2_quadratic(bm.view(), am.view(), None, None, &KernelConfig::fixed(1.0)).unwrap();
        assert!((swapped.raw - est.raw).abs() < 1e-12);
    }

    #[test]
    fn unbiased_needs_two_points() {
        let a = array![[0.0]];
        let b = array![[1.0], [2.0]];
        assert!(matches!(
            mmd2_quadratic(a.view(), b.view(), None, None, &KernelConfig::fixed(1.0)),
            Err(CfrError::Size(_))
        ));
        let w = array![1.0];
        assert!(mmd2_quadratic(a.view(), b.view(), Some(w.view()), None, &KernelConfig::fixed(1.0)).is_ok());
    }

    #[test]
    fn linear_matches_hand_expansion() {
        let a = array![[0.0], [1.0], [2.5], [-1.0]];
        let b = array![[0.5], [3.0], [1.0], [0.2]];
        let oracle = ((k1(0.0, 1.0) + k1(0.5, 3.0) - k1(0.0, 3.0) - k1(1.0, 0.5))
            + (k1(2.5, -1.0) + k1(1.0, 0.2) - k1(2.5, 0.2) - k1(-1.0, 1.0)))
            / 2.0;
        let est = mmd2_linear(a.view(), b.view(), &KernelConfig::fixed(1.0)).unwrap();
        assert!((est.raw - oracle).abs() < 1e-12);
        let ones = Array1::ones(4);
        let wtd = mmd2_linear_weighted(a.view(), b.view(), Some(ones.view()), Some(ones.view()), &KernelConfig::fixed(1.0)).unwrap();
        assert_eq!(wtd.raw, est.raw);
    }

    #[test]
    fn linear_identical_pairs_cancel() {
        let a = array![[0.3f64, 1.0], [2.0, -1.0], [0.0, 0.0], [5.0, 5.0]];
        let est = mmd2_linear(a.view(), a.view(), &KernelConfig::fixed(0.7)).unwrap();
        assert!(est.raw.abs() < 1e-15);
        let short = array![[1.0]];
        assert!(mmd2_linear(short.view(), a.view().slice(ndarray::s![.., ..1]), &KernelConfig::fixed(1.0)).is_err());
    }

    #[test]
    fn weighted_v_statistic_close_to_u_statistic() {
        let mut rng = crate::rng::stream(3, "mmd");
        for m in [3usize, 7, 20] {
            let n = m + 2;
            let a = Array2::from_shape_fn((m, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let b = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal) + 0.3);
            let cfg = KernelConfig::fixed(1.0);
            let u = mmd2_quadratic(a.view(), b.view(), None, None, &cfg).unwrap();
            let (oa, ob) = (Array1::ones(m), Array1::ones(n));
            let v = mmd2_quadratic(a.view(), b.view(), Some(oa.view()), Some(ob.view()), &cfg).unwrap();
            assert!(v.biased);
            let bound = 1.0 / (m as f64 - 1.0) + 1.0 / (n as f64 - 1.0);
            assert!((v.raw - u.raw).abs() <= bound, "m={m}: {} vs {}", v.raw, u.raw);
        }
    }

    #[test]
    fn rejects_bad_weights() {
        let a = array![[0.0], [1.0]];
        let w = array![1.0, -1.0];
        assert!(mmd2_quadratic(a.view(), a.view(), Some(w.view()), None, &KernelConfig::fixed(1.0)).is_err());
        let short = array![1.0];
        assert!(mmd2_quadratic(a.view(), a.view(), Some(short.view()), None, &KernelConfig::fixed(1.0)).is_err());
    }
}
