//! Transition semigroup of the `n`-particle system
//! `dX = dB − 2γ (X·𝟙) 𝟙 dt`.
//!
//! The law at time `t` from `x` is `N(A_t x, Σ_t)` with
//! `A_t = I − ((1 − e^{−2γnt})/n) 𝟙𝟙ᵀ` and
//! `Σ_t = t I + ((e4(t) − t)/n) 𝟙𝟙ᵀ`, `e4(t) = (1 − e^{−4γnt})/(4γn)`.
//! In the orthonormal basis whose first vector is `𝟙/√n` the covariance is
//! `diag(e4, t, .., t)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{require, Error, Result};
use crate::poly::{pushforward_unchecked, Polynomial};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemigroupParams {
    pub n: usize,
    pub gamma: f64,
}

impl SemigroupParams {
    /// `gamma = 0` is accepted as the Brownian limit.
    pub fn new(n: usize, gamma: f64) -> Result<Self> {
        require(n >= 1, || format!("arity must be >= 1, got {n}"))?;
        require(gamma >= 0.0 && gamma.is_finite(), || {
            format!("gamma must be finite and >= 0, got {gamma}")
        })?;
        Ok(Self { n, gamma })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        require(t >= 0.0 && t.is_finite(), || format!("time must be >= 0, got {t}"))
    }

    /// Variance along `𝟙/√n`.
    pub fn e4(&self, t: f64) -> f64 {
        let r = 4.0 * self.gamma * self.n as f64;
        if r == 0.0 {
            t
        } else {
            -(-r * t).exp_m1() / r
        }
    }

    /// `(1 − e^{−2γnt})/n`, the rank-one coefficient of the mean map.
    pub fn mean_shrink(&self, t: f64) -> f64 {
        -(-2.0 * self.gamma * self.n as f64 * t).exp_m1() / self.n as f64
    }

    pub fn mean_matrix(&self, t: f64) -> DMatrix<f64> {
        let c = self.mean_shrink(t);
        DMatrix::from_fn(self.n, self.n, |i, j| if i == j { 1.0 - c } else { -c })
    }

    pub fn covariance(&self, t: f64) -> DMatrix<f64> {
        let n = self.n as f64;
        let off = (self.e4(t) - t) / n;
        DMatrix::from_fn(self.n, self.n, |i, j| if i == j { t + off } else { off })
    }

    pub fn mean_map(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let c = self.mean_shrink(t);
        let s: f64 = x.iter().sum();
        x.iter().map(|xi| xi - c * s).collect()
    }
}

/// Orthonormal basis with first column `𝟙/√n`; column `i ≥ 1` is
/// proportional to `(1, .., 1, −i, 0, ..)` with `i` leading ones.
pub fn basis_matrix(n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    let inv = 1.0 / (n as f64).sqrt();
    for r in 0..n {
        p[(r, 0)] = inv;
    }
    for i in 1..n {
        let k = i as f64;
        let norm = (k / (k + 1.0)).sqrt();
        for r in 0..i {
            p[(r, i)] = norm / k;
        }
        p[(i, i)] = -norm;
    }
    p
}

/// Covariance assembled as `P diag(e4, t, .., t) Pᵀ`.
pub fn covariance_via_basis(params: &SemigroupParams, t: f64) -> DMatrix<f64> {
    let p = basis_matrix(params.n);
    let mut d = DMatrix::from_diagonal_element(params.n, params.n, t);
    d[(0, 0)] = params.e4(t);
    &p * d * p.transpose()
}

/// `T(t) f` as a polynomial.
pub fn apply_semigroup(f: &Polynomial, params: &SemigroupParams, t: f64) -> Result<Polynomial> {
    params.check_time(t)?;
    if f.arity() != params.n {
        return Err(Error::ArityMismatch {
            expected: params.n,
            found: f.arity(),
        });
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    let a = params.mean_matrix(t);
    let b = DVector::zeros(params.n);
    let s = params.covariance(t);
    Ok(pushforward_unchecked(f, &a, &b, &s))
}

/// Exact draw from the transition law, `O(n)`.
pub fn sample_transition<R: Rng + ?Sized>(
    params: &SemigroupParams,
    t: f64,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    params.check_time(t)?;
    require(x.len() == params.n, || {
        format!("state has length {}, expected {}", x.len(), params.n)
    })?;
    if t == 0.0 {
        return Ok(x.to_vec());
    }
    let n = params.n as f64;
    let w: Vec<f64> = (0..params.n).map(|_| rng.sample(StandardNormal)).collect();
    let wbar = w.iter().sum::<f64>() / n;
    let (st, se) = (t.sqrt(), params.e4(t).sqrt());
    let mean = params.mean_map(t, x);
    Ok(mean
        .iter()
        .zip(&w)
        .map(|(m, wi)| m + st * (wi - wbar) + se * wbar)
        .collect())
}

/// Euler-Maruyama endpoint with step at most `dt`.
pub fn sde_euler_endpoint<R: Rng + ?Sized>(
    params: &SemigroupParams,
    t: f64,
    x: &[f64],
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    params.check_time(t)?;
    require(dt > 0.0, || format!("dt must be > 0, got {dt}"))?;
    let steps = (t / dt).ceil() as usize;
    let h = if steps == 0 { 0.0 } else { t / steps as f64 };
    let sh = h.sqrt();
    let mut y = x.to_vec();
    for _ in 0..steps {
        let s: f64 = y.iter().sum();
        let drift = -2.0 * params.gamma * s * h;
        for yi in y.iter_mut() {
            *yi += drift + sh * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(y)
}

/// `|∂_t u − B u|` at `(t, x)` for `u = T(·) f`, with a second-order
/// difference in time (central, or one-sided when `t < h`).
pub fn pde_residual(
    f: &Polynomial,
    params: &SemigroupParams,
    t: f64,
    x: &[f64],
    h: f64,
) -> Result<f64> {
    require(h > 0.0, || format!("h must be > 0, got {h}"))?;
    let u = |s: f64| -> Result<f64> { apply_semigroup(f, params, s)?.evaluate(x) };
    let dt = if t >= h {
        (u(t + h)? - u(t - h)?) / (2.0 * h)
    } else {
        (-3.0 * u(t)? + 4.0 * u(t + h)? - u(t + 2.0 * h)?) / (2.0 * h)
    };
    let bu = apply_semigroup(f, params, t)?
        .generator_b(params.gamma)
        .evaluate(x)?;
    Ok((dt - bu).abs())
}

/// Gradient of `T(t) f` at `x` through the convolution route:
/// `∇T f(x) = A_tᵀ E[∇f(A_t x + G)]`.
pub fn semigroup_gradient(
    f: &Polynomial,
    params: &SemigroupParams,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let inner: Vec<f64> = f
        .gradient()
        .iter()
        .map(|g| apply_semigroup(g, params, t)?.evaluate(x))
        .collect::<Result<_>>()?;
    let a = params.mean_matrix(t);
    Ok((a.transpose() * DVector::from_vec(inner)).as_slice().to_vec())
}

/// Hessian of `T(t) f` at `x`: `A_tᵀ E[∇²f(A_t x + G)] A_t`.
pub fn semigroup_hessian(
    f: &Polynomial,
    params: &SemigroupParams,
    t: f64,
    x: &[f64],
) -> Result<DMatrix<f64>> {
    let n = params.n;
    let mut inner = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            inner[(i, j)] = apply_semigroup(&f.second_partial(i, j)?, params, t)?.evaluate(x)?;
        }
    }
    let a = params.mean_matrix(t);
    Ok(a.transpose() * inner * a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Estimate;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x2() -> Polynomial {
        Polynomial::monomial(&[2], 1.0).unwrap()
    }

    #[test]
    fn e4_bounds_and_limits() {
        let p = SemigroupParams::new(3, 0.8).unwrap();
        for &t in &[0.0, 1e-8, 0.1, 1.0, 50.0] {
            let e = p.e4(t);
            assert!(e >= 0.0 && e <= t);
        }
        assert_eq!(SemigroupParams::new(2, 0.0).unwrap().e4(1.5), 1.5);
        assert!(SemigroupParams::new(0, 1.0).is_err());
        assert!(SemigroupParams::new(1, -1.0).is_err());
    }

    #[test]
    fn mean_map_examples() {
        let g = 0.6;
        let p1 = SemigroupParams::new(1, g).unwrap();
        let m = p1.mean_map(0.7, &[2.0]);
        assert!((m[0] - 2.0 * (-2.0 * g * 0.7f64).exp()).abs() < 1e-15);
        let p3 = SemigroupParams::new(3, g).unwrap();
        assert_eq!(p3.mean_map(0.0, &[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        let p2 = SemigroupParams::new(2, g).unwrap();
        assert_eq!(p2.mean_map(0.9, &[1.0, -1.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn covariance_examples() {
        let p1 = SemigroupParams::new(1, 0.5).unwrap();
        let c = p1.covariance(2.0);
        assert!((c[(0, 0)] - (1.0 - (-4.0f64).exp()) / 2.0).abs() < 1e-15);
        assert_eq!(SemigroupParams::new(3, 1.0).unwrap().covariance(0.0), DMatrix::zeros(3, 3));
        let p2 = SemigroupParams::new(2, 1.0).unwrap();
        let e4 = (1.0 - (-8.0f64).exp()) / 8.0;
        let c = p2.covariance(1.0);
        assert!((c[(0, 0)] - (1.0 + e4) / 2.0).abs() < 1e-15);
        assert!((c[(0, 1)] - (e4 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn basis_is_orthonormal_and_conjugates() {
        for n in 1..=10 {
            let p = basis_matrix(n);
            let err = (&p * p.transpose() - DMatrix::identity(n, n)).amax();
            assert!(err <= 1e-12, "n={n} err={err}");
            let params = SemigroupParams::new(n, 0.9).unwrap();
            for &t in &[0.0, 0.3, 2.0] {
                let d = (covariance_via_basis(&params, t) - params.covariance(t)).amax();
                assert!(d <= 1e-12);
            }
        }
    }

    #[test]
    fn closed_forms() {
        let g = 0.8;
        let t = 0.37;
        let p1 = SemigroupParams::new(1, g).unwrap();
        let u = apply_semigroup(&x2(), &p1, t).unwrap();
        assert!((u.coefficient(&[2]) - (-4.0 * g * t).exp()).abs() <= 1e-12);
        assert!((u.coefficient(&[0]) - p1.e4(t)).abs() <= 1e-12);
        let p2 = SemigroupParams::new(2, g).unwrap();
        let one = Polynomial::constant(2, 1.0);
        assert_eq!(apply_semigroup(&one, &p2, t).unwrap(), one);
        let s = Polynomial::coordinate_sum(2);
        let u = apply_semigroup(&s, &p2, t).unwrap();
        let expect = s.scale((-4.0 * g * t).exp());
        assert!(u.relative_distance(&expect) <= 1e-14);
        assert_eq!(apply_semigroup(&s, &p2, 0.0).unwrap(), s);
        assert!(apply_semigroup(&s, &p1, 0.1).is_err());
        assert!(apply_semigroup(&s, &p2, -0.1).is_err());
    }

    #[test]
    fn transition_moments() {
        let params = SemigroupParams::new(3, 0.7).unwrap();
        let x = [0.5, -1.0, 2.0];
        let t = 0.4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_transition(&params, 0.0, &x, &mut rng).unwrap(), x.to_vec());
        let draws: Vec<Vec<f64>> = (0..100_000)
            .map(|_| sample_transition(&params, t, &x, &mut rng).unwrap())
            .collect();
        let mean = params.mean_map(t, &x);
        let cov = params.covariance(t);
        for i in 0..3 {
            let xs: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            assert!(Estimate::from_samples(&xs).within(mean[i], 4.0));
            for j in 0..3 {
                let ps: Vec<f64> = draws
                    .iter()
                    .map(|d| (d[i] - mean[i]) * (d[j] - mean[j]))
                    .collect();
                assert!(Estimate::from_samples(&ps).within(cov[(i, j)], 4.0));
            }
        }
    }

    #[test]
    fn euler_brownian_limit() {
        let params = SemigroupParams::new(2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 0.5;
        let sq: Vec<f64> = (0..20_000)
            .map(|_| sde_euler_endpoint(&params, t, &[0.0, 0.0], 0.05, &mut rng).unwrap()[0].powi(2))
            .collect();
        assert!(Estimate::from_samples(&sq).within(t, 4.0));
    }

    #[test]
    fn euler_weak_order_one() {
        // Mean of X_1^2 for n = 1: the Euler recursion gives an exact
        // discrete second moment, so its bias can be compared directly.
        let g = 1.0;
        let params = SemigroupParams::new(1, g).unwrap();
        let (t, x0) = (0.5, 1.0);
        let exact = apply_semigroup(&x2(), &params, t).unwrap().evaluate(&[x0]).unwrap();
        let discrete = |dt: f64| {
            let steps = (t / dt).ceil() as i32;
            let h = t / steps as f64;
            let a = (1.0 - 2.0 * g * h) * (1.0 - 2.0 * g * h);
            let mut m = x0 * x0;
            for _ in 0..steps {
                m = a * m + h;
            }
            m
        };
        let b: Vec<f64> = [1e-2, 5e-3, 2.5e-3].iter().map(|&dt| (discrete(dt) - exact).abs()).collect();
        let slope1 = (b[0] / b[1]).log2();
        let slope2 = (b[1] / b[2]).log2();
        assert!((0.8..1.2).contains(&slope1) && (0.8..1.2).contains(&slope2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sq: Vec<f64> = (0..40_000)
            .map(|_| sde_euler_endpoint(&params, t, &[x0], 1e-2, &mut rng).unwrap()[0].powi(2))
            .collect();
        assert!(Estimate::from_samples(&sq).within(discrete(1e-2), 4.0));
    }

    #[test]
    fn pde_residual_second_order() {
        let params = SemigroupParams::new(1, 1.0).unwrap();
        let f = Polynomial::univariate(&[0.0, 0.5, 1.0, 0.0, -0.3]);
        let r: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&h| pde_residual(&f, &params, 0.3, &[0.8], h).unwrap())
            .collect();
        for w in r.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!((1.8..=2.2).contains(&slope), "slope {slope}");
        }
        let one = Polynomial::constant(2, 1.0);
        let p2 = SemigroupParams::new(2, 1.0).unwrap();
        assert_eq!(pde_residual(&one, &p2, 0.2, &[0.1, 0.2], 1e-3).unwrap(), 0.0);
        assert!(pde_residual(&f, &params, 0.0, &[0.8], 1e-3).unwrap() < 1e-4);
    }

    #[test]
    fn growth_bound_sanity() {
        // |T(t)f(x)| grows at most polynomially in |x| with the degree of f.
        let params = SemigroupParams::new(2, 0.5).unwrap();
        let f = Polynomial::from_terms(2, [(vec![2, 2], 1.0), (vec![1, 0], 3.0)]).unwrap();
        let u = apply_semigroup(&f, &params, 1.0).unwrap();
        for &r in &[0.0, 1.0, 10.0, 100.0] {
            let v = u.evaluate(&[r, -0.5 * r]).unwrap().abs();
            assert!(v <= 100.0 * (1.0 + r.powi(4)));
        }
    }

    fn poly_n(n: usize) -> impl Strategy<Value = Polynomial> {
        crate::poly::test_support::poly_strategy(n, 6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn semigroup_law((n, f) in (1usize..=5).prop_flat_map(|n| (Just(n), poly_n(n))),
                         t in 0.01..0.8f64, s in 0.01..0.8f64) {
            let params = SemigroupParams::new(n, 0.6).unwrap();
            let ts = apply_semigroup(&apply_semigroup(&f, &params, t).unwrap(), &params, s).unwrap();
            let direct = apply_semigroup(&f, &params, t + s).unwrap();
            prop_assert!(ts.relative_distance(&direct) <= 1e-9);
            prop_assert!(direct.degree() <= f.degree());
        }

        #[test]
        fn derivative_formulas(f in poly_n(2), x in prop::collection::vec(-1.0..1.0f64, 2), t in 0.05..1.0f64) {
            let params = SemigroupParams::new(2, 0.7).unwrap();
            let u = apply_semigroup(&f, &params, t).unwrap();
            let grad = semigroup_gradient(&f, &params, t, &x).unwrap();
            let hess = semigroup_hessian(&f, &params, t, &x).unwrap();
            let scale = 1.0 + u.max_abs_coefficient();
            let h = 1e-5;
            for i in 0..2 {
                let sym = u.partial_derivative(i).unwrap().evaluate(&x).unwrap();
                prop_assert!((sym - grad[i]).abs() <= 1e-9 * scale);
                let mut xp = x.clone(); xp[i] += h;
                let mut xm = x.clone(); xm[i] -= h;
                let fd = (u.evaluate(&xp).unwrap() - u.evaluate(&xm).unwrap()) / (2.0 * h);
                prop_assert!((fd - sym).abs() <= 1e-6 * scale);
                for j in 0..2 {
                    let sym2 = u.second_partial(i, j).unwrap().evaluate(&x).unwrap();
                    prop_assert!((sym2 - hess[(i, j)]).abs() <= 1e-9 * scale);
                    let g = |d: f64| {
                        let mut z = x.clone(); z[j] += d;
                        u.partial_derivative(i).unwrap().evaluate(&z).unwrap()
                    };
                    let fd2 = (g(h) - g(-h)) / (2.0 * h);
                    prop_assert!((fd2 - sym2).abs() <= 1e-6 * scale);
                }
            }
        }
    }

    #[test]
    fn feynman_kac_consistency() {
        let params = SemigroupParams::new(2, 0.9).unwrap();
        let f = Polynomial::from_terms(
            2,
            [(vec![3, 1], 1.0), (vec![0, 2], -0.5), (vec![1, 0], 2.0), (vec![2, 2], 0.3)],
        )
        .unwrap();
        let (t, x) = (0.6, [0.4, -0.9]);
        let target = apply_semigroup(&f, &params, t).unwrap().evaluate(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..200_000)
            .map(|_| f.evaluate(&sample_transition(&params, t, &x, &mut rng).unwrap()).unwrap())
            .collect();
        assert!(Estimate::from_samples(&vals).within(target, 4.0));
    }
}
