//! Sparse multivariate polynomials with real coefficients.
//!
//! Variables are indexed from 0 in the API and printed as `x1, x2, ...`.
//! Arity 0 is allowed and represents constants; it appears when the
//! insertion operator is summed over an empty index set.
//!
//! Algebra never drops coefficients except exact zeros. Use
//! [`Polynomial::prune`] for explicit thresholding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::CompensatedSum;

/// Exponent vector of one monomial.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Monomial(Box<[u16]>);

impl Monomial {
    pub fn new(exponents: Vec<u16>) -> Self {
        Self(exponents.into_boxed_slice())
    }

    pub fn exponents(&self) -> &[u16] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }
}

/// Graded order: total degree first, then lexicographic on exponents.
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    arity: usize,
    terms: BTreeMap<Monomial, f64>,
}

/// Collects `(monomial, coefficient)` contributions with compensated sums.
struct TermAccumulator {
    arity: usize,
    map: HashMap<Monomial, CompensatedSum>,
}

impl TermAccumulator {
    fn new(arity: usize) -> Self {
        Self {
            arity,
            map: HashMap::new(),
        }
    }

    fn add(&mut self, mono: Monomial, c: f64) {
        if c != 0.0 {
            self.map.entry(mono).or_default().add(c);
        }
    }

    fn finish(self) -> Polynomial {
        let terms = self
            .map
            .into_iter()
            .map(|(m, s)| (m, s.value()))
            .filter(|(_, c)| *c != 0.0)
            .collect();
        Polynomial {
            arity: self.arity,
            terms,
        }
    }
}

fn index_check(i: usize, arity: usize) -> Result<()> {
    if i < arity {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange(format!(
            "variable index {i} for arity {arity}"
        )))
    }
}

fn arity_check(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ArityMismatch { expected, found })
    }
}

impl Polynomial {
    pub fn zero(arity: usize) -> Self {
        Self {
            arity,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(arity: usize, c: f64) -> Self {
        let mut p = Self::zero(arity);
        if c != 0.0 {
            p.terms.insert(Monomial::new(vec![0; arity]), c);
        }
        p
    }

    /// The coordinate function `x_i` (0-based).
    pub fn variable(arity: usize, i: usize) -> Result<Self> {
        index_check(i, arity)?;
        let mut e = vec![0; arity];
        e[i] = 1;
        Self::monomial(&e, 1.0)
    }

    pub fn monomial(exponents: &[u16], c: f64) -> Result<Self> {
        Self::from_terms(exponents.len(), [(exponents.to_vec(), c)])
    }

    /// Sums the given terms; repeated monomials are merged.
    pub fn from_terms<I>(arity: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u16>, f64)>,
    {
        let mut acc = TermAccumulator::new(arity);
        for (e, c) in terms {
            arity_check(arity, e.len())?;
            if !c.is_finite() {
                return Err(Error::NonFinite(format!("coefficient {c}")));
            }
            acc.add(Monomial::new(e), c);
        }
        Ok(acc.finish())
    }

    /// `sum_k coeffs[k] x^k` in one variable.
    pub fn univariate(coeffs: &[f64]) -> Self {
        Self::from_terms(
            1,
            coeffs
                .iter()
                .enumerate()
                .map(|(k, &c)| (vec![k as u16], c)),
        )
        .expect("arity 1 by construction")
    }

    /// `sum_i x_i`.
    pub fn coordinate_sum(arity: usize) -> Self {
        let mut acc = TermAccumulator::new(arity);
        for i in 0..arity {
            let mut e = vec![0; arity];
            e[i] = 1;
            acc.add(Monomial::new(e), 1.0);
        }
        acc.finish()
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Terms in graded order.
    pub fn terms(&self) -> impl Iterator<Item = (&[u16], f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m.exponents(), c))
    }

    pub fn coefficient(&self, exponents: &[u16]) -> f64 {
        self.terms
            .get(&Monomial::new(exponents.to_vec()))
            .copied()
            .unwrap_or(0.0)
    }

    /// Largest exponent of any single variable.
    pub fn max_exponent(&self) -> usize {
        self.terms
            .keys()
            .flat_map(|m| m.exponents().iter().copied())
            .max()
            .unwrap_or(0) as usize
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0_f64, |m, c| m.max(c.abs()))
    }

    /// Largest coefficient difference relative to `max(1, max|coef|)`.
    pub fn relative_distance(&self, other: &Self) -> f64 {
        let diff = self - other;
        let scale = 1.0_f64
            .max(self.max_abs_coefficient())
            .max(other.max_abs_coefficient());
        diff.max_abs_coefficient() / scale
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        arity_check(self.arity, other.arity)?;
        let mut acc = TermAccumulator::new(self.arity);
        for (m, &c) in self.terms.iter().chain(other.terms.iter()) {
            acc.add(m.clone(), c);
        }
        Ok(acc.finish())
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.checked_add(&other.scale(-1.0))
    }

    pub fn checked_mul(&self, other: &Self) -> Result<Self> {
        arity_check(self.arity, other.arity)?;
        let mut acc = TermAccumulator::new(self.arity);
        for (m1, &c1) in &self.terms {
            for (m2, &c2) in &other.terms {
                let e: Vec<u16> = m1.0.iter().zip(m2.0.iter()).map(|(a, b)| a + b).collect();
                acc.add(Monomial::new(e), c1 * c2);
            }
        }
        Ok(acc.finish())
    }

    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero(self.arity);
        }
        Self {
            arity: self.arity,
            terms: self
                .terms
                .iter()
                .map(|(m, &v)| (m.clone(), v * c))
                .filter(|(_, v)| *v != 0.0)
                .collect(),
        }
    }

    pub fn pow(&self, k: u32) -> Self {
        let mut out = Self::constant(self.arity, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    /// Drops terms with `|c| <= threshold`.
    pub fn prune(&self, threshold: f64) -> Self {
        Self {
            arity: self.arity,
            terms: self
                .terms
                .iter()
                .filter(|(_, c)| c.abs() > threshold)
                .map(|(m, &c)| (m.clone(), c))
                .collect(),
        }
    }

    pub fn partial_derivative(&self, i: usize) -> Result<Self> {
        index_check(i, self.arity)?;
        let mut acc = TermAccumulator::new(self.arity);
        for (m, &c) in &self.terms {
            let e = m.0[i];
            if e > 0 {
                let mut v = m.0.to_vec();
                v[i] -= 1;
                acc.add(Monomial::new(v), c * e as f64);
            }
        }
        Ok(acc.finish())
    }

    pub fn second_partial(&self, i: usize, j: usize) -> Result<Self> {
        self.partial_derivative(i)?.partial_derivative(j)
    }

    pub fn gradient(&self) -> Vec<Self> {
        (0..self.arity)
            .map(|i| self.partial_derivative(i).expect("index in range"))
            .collect()
    }

    pub fn laplacian(&self) -> Self {
        let mut acc = TermAccumulator::new(self.arity);
        for i in 0..self.arity {
            for (m, &c) in &self.terms {
                let e = m.0[i];
                if e > 1 {
                    let mut v = m.0.to_vec();
                    v[i] -= 2;
                    acc.add(Monomial::new(v), c * (e as f64) * (e as f64 - 1.0));
                }
            }
        }
        acc.finish()
    }

    /// Direct monomial evaluation with compensated summation.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        arity_check(self.arity, x.len())?;
        let mut acc = CompensatedSum::new();
        for (m, &c) in &self.terms {
            let mut v = c;
            for (xi, &e) in x.iter().zip(m.0.iter()) {
                if e > 0 {
                    v *= xi.powi(e as i32);
                }
            }
            acc.add(v);
        }
        Ok(acc.value())
    }

    /// `<f, mu^n>` for the empirical measure with the given atoms.
    pub fn integrate_product_measure(&self, atoms: &[f64]) -> f64 {
        let moments = crate::measure::raw_moments(atoms, self.max_exponent());
        self.integrate_with_moments(&moments)
    }

    /// `<f, mu^n>` given raw moments `moments[k] = <x^k, mu>`.
    ///
    /// Panics if a needed moment is missing.
    pub fn integrate_with_moments(&self, moments: &[f64]) -> f64 {
        let mut acc = CompensatedSum::new();
        for (m, &c) in &self.terms {
            let mut v = c;
            for &e in m.0.iter() {
                v *= moments[e as usize];
            }
            acc.add(v);
        }
        acc.value()
    }

    /// Insertion operator: the argument `j` is identified with argument `i`,
    /// then dropped, and the remaining arguments are renumbered in order.
    ///
    /// For `i < j` this is `f(x_1, .., x_{j-1}, x_i, x_j, .., x_{n-1})`.
    pub fn phi_insert(&self, i: usize, j: usize) -> Result<Self> {
        let n = self.arity;
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "insertion needs arity >= 2, found {n}"
            )));
        }
        index_check(i, n)?;
        index_check(j, n)?;
        if i == j {
            return Err(Error::InvalidParameter(
                "insertion indices must differ".into(),
            ));
        }
        let target = if i < j { i } else { i - 1 };
        let mut acc = TermAccumulator::new(n - 1);
        for (m, &c) in &self.terms {
            let mut v = vec![0u16; n - 1];
            for (k, &e) in m.0.iter().enumerate() {
                let dest = match k.cmp(&j) {
                    Ordering::Equal => target,
                    Ordering::Less => k,
                    Ordering::Greater => k - 1,
                };
                v[dest] += e;
            }
            acc.add(Monomial::new(v), c);
        }
        Ok(acc.finish())
    }

    /// `∂_i ∂_j f` times the square of a new trailing variable.
    pub fn k_op(&self, i: usize, j: usize) -> Result<Self> {
        let d = self.second_partial(i, j)?;
        let mut acc = TermAccumulator::new(self.arity + 1);
        for (m, &c) in &d.terms {
            let mut v = m.0.to_vec();
            v.push(2);
            acc.add(Monomial::new(v), c);
        }
        Ok(acc.finish())
    }

    /// `½ Δf − 2γ (Σ_i ∂_i f)(Σ_i x_i)`.
    pub fn generator_b(&self, gamma: f64) -> Self {
        let n = self.arity;
        let half_lap = self.laplacian().scale(0.5);
        if n == 0 || gamma == 0.0 {
            return half_lap;
        }
        let mut grad_sum = Self::zero(n);
        for g in self.gradient() {
            grad_sum = &grad_sum + &g;
        }
        let drift = (&grad_sum * &Self::coordinate_sum(n)).scale(-2.0 * gamma);
        &half_lap + &drift
    }

    /// Composition with a linear map `y = A x`; the result has arity `A.ncols()`.
    pub fn compose_linear(&self, a: &DMatrix<f64>) -> Result<Self> {
        let b = DVector::zeros(self.arity);
        let s = DMatrix::zeros(self.arity, self.arity);
        affine_gaussian_pushforward(self, a, &b, &s)
    }

    /// Dense coefficients of a one-variable polynomial.
    pub fn to_univariate_coeffs(&self) -> Result<Vec<f64>> {
        arity_check(1, self.arity)?;
        let mut out = vec![0.0; self.degree() as usize + 1];
        for (m, &c) in &self.terms {
            out[m.0[0] as usize] = c;
        }
        Ok(out)
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    /// Panics on arity mismatch; see [`Polynomial::checked_add`].
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.checked_add(rhs).expect("arity mismatch in polynomial add")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.checked_sub(rhs).expect("arity mismatch in polynomial sub")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.checked_mul(rhs).expect("arity mismatch in polynomial mul")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

fn binomial(n: u16, k: u16) -> f64 {
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Zero-mean Gaussian monomial moments by Wick recursion with memoization.
pub struct GaussianMoments<'a> {
    sigma: &'a DMatrix<f64>,
    memo: HashMap<Vec<u16>, f64>,
}

impl<'a> GaussianMoments<'a> {
    pub fn new(sigma: &'a DMatrix<f64>) -> Self {
        Self {
            sigma,
            memo: HashMap::new(),
        }
    }

    /// `E[G^beta]` for `G ~ N(0, sigma)`.
    pub fn moment(&mut self, beta: &[u16]) -> f64 {
        let total: u32 = beta.iter().map(|&b| b as u32).sum();
        if total == 0 {
            return 1.0;
        }
        if total % 2 == 1 {
            return 0.0;
        }
        if let Some(&v) = self.memo.get(beta) {
            return v;
        }
        let i = beta.iter().position(|&b| b > 0).expect("nonzero total");
        let mut b = beta.to_vec();
        b[i] -= 1;
        let mut s = CompensatedSum::new();
        for j in 0..b.len() {
            let sij = self.sigma[(i, j)];
            if b[j] > 0 && sij != 0.0 {
                let mut c = b.clone();
                c[j] -= 1;
                let count = b[j] as f64;
                s.add(count * sij * self.moment(&c));
            }
        }
        let v = s.value();
        self.memo.insert(beta.to_vec(), v);
        v
    }
}

fn check_psd(sigma: &DMatrix<f64>) -> Result<()> {
    let scale = 1.0 + sigma.amax();
    let tol = 1e-10 * scale;
    for i in 0..sigma.nrows() {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > tol {
                return Err(Error::InvalidParameter(
                    "covariance is not symmetric".into(),
                ));
            }
        }
    }
    if sigma.nrows() > 0 {
        let sym = (sigma + sigma.transpose()) * 0.5;
        let min = sym
            .symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v));
        if min < -tol {
            return Err(Error::NotPositiveSemidefinite(min));
        }
    }
    Ok(())
}

/// `g(x) = E f(A x + b + G)` with `G ~ N(0, Σ)`, computed symbolically.
///
/// `A` is `arity(f) x m`; the result has arity `m`.
pub fn affine_gaussian_pushforward(
    f: &Polynomial,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<Polynomial> {
    let n = f.arity();
    arity_check(n, a.nrows())?;
    arity_check(n, b.len())?;
    arity_check(n, sigma.nrows())?;
    arity_check(n, sigma.ncols())?;
    check_psd(sigma)?;
    Ok(pushforward_unchecked(f, a, b, sigma))
}

pub(crate) fn pushforward_unchecked(
    f: &Polynomial,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Polynomial {
    let n = f.arity();
    let m = a.ncols();
    let max_exp = f.max_exponent();
    let noise = sigma.iter().any(|&v| v != 0.0);

    // powers[k][p] = (A_k x + b_k)^p
    let powers: Vec<Vec<Polynomial>> = (0..n)
        .map(|k| {
            let mut terms: Vec<(Vec<u16>, f64)> = (0..m)
                .map(|l| {
                    let mut e = vec![0u16; m];
                    e[l] = 1;
                    (e, a[(k, l)])
                })
                .collect();
            terms.push((vec![0u16; m], b[k]));
            let lin = Polynomial::from_terms(m, terms).expect("consistent arity");
            let mut ps = vec![Polynomial::constant(m, 1.0)];
            for p in 1..=max_exp {
                let next = &ps[p - 1] * &lin;
                ps.push(next);
            }
            ps
        })
        .collect();

    let mut gauss = GaussianMoments::new(sigma);
    let mut products: HashMap<Vec<u16>, Polynomial> = HashMap::new();
    let mut acc = TermAccumulator::new(m);

    for (mono, &c) in &f.terms {
        let alpha = mono.exponents();
        let mut beta = vec![0u16; n];
        loop {
            let beta_deg: u32 = beta.iter().map(|&x| x as u32).sum();
            if beta_deg.is_multiple_of(2) {
                let gm = if beta_deg == 0 { 1.0 } else { gauss.moment(&beta) };
                if gm != 0.0 {
                    let mut coef = c * gm;
                    for k in 0..n {
                        coef *= binomial(alpha[k], beta[k]);
                    }
                    let rest: Vec<u16> = alpha.iter().zip(&beta).map(|(a, b)| a - b).collect();
                    let prod = products.entry(rest.clone()).or_insert_with(|| {
                        let mut p = Polynomial::constant(m, 1.0);
                        for (k, &r) in rest.iter().enumerate() {
                            if r > 0 {
                                p = &p * &powers[k][r as usize];
                            }
                        }
                        p
                    });
                    for (pm, &pc) in &prod.terms {
                        acc.add(pm.clone(), coef * pc);
                    }
                }
            }
            if !noise {
                break;
            }
            // Odometer over beta <= alpha.
            let mut k = 0;
            loop {
                if k == n {
                    break;
                }
                if beta[k] < alpha[k] {
                    beta[k] += 1;
                    break;
                }
                beta[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }
    acc.finish()
}

/// One term per line: `coeff * x1^a1 x2^a2`, preceded by `# arity n`.
impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# arity {}", self.arity)?;
        for (m, &c) in &self.terms {
            write!(f, "{}", crate::measure::format_f64(c))?;
            let vars: Vec<String> = m
                .exponents()
                .iter()
                .enumerate()
                .filter(|(_, &e)| e > 0)
                .map(|(i, &e)| format!("x{}^{}", i + 1, e))
                .collect();
            if !vars.is_empty() {
                write!(f, " * {}", vars.join(" "))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for Polynomial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut arity: Option<usize> = None;
        let mut raw: Vec<(Vec<(usize, u16)>, f64)> = Vec::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("arity") {
                    arity = Some(
                        v.trim()
                            .parse()
                            .map_err(|e| Error::Parse(format!("bad arity {v:?}: {e}")))?,
                    );
                }
                continue;
            }
            let (coef, vars) = match line.split_once('*') {
                Some((c, v)) => (c.trim(), v.trim()),
                None => (line, ""),
            };
            let c: f64 = coef
                .parse()
                .map_err(|e| Error::Parse(format!("bad coefficient {coef:?}: {e}")))?;
            let mut exps = Vec::new();
            for tok in vars.split_whitespace() {
                let body = tok
                    .strip_prefix('x')
                    .ok_or_else(|| Error::Parse(format!("bad variable {tok:?}")))?;
                let (idx, e) = match body.split_once('^') {
                    Some((i, e)) => (i, e),
                    None => (body, "1"),
                };
                let idx: usize = idx
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad index in {tok:?}: {e}")))?;
                let e: u16 = e
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad exponent in {tok:?}: {e}")))?;
                if idx == 0 {
                    return Err(Error::Parse("variables are numbered from x1".into()));
                }
                exps.push((idx - 1, e));
            }
            raw.push((exps, c));
        }
        let inferred = raw
            .iter()
            .flat_map(|(e, _)| e.iter().map(|(i, _)| i + 1))
            .max()
            .unwrap_or(0);
        let arity = match arity {
            Some(a) if a < inferred => {
                return Err(Error::Parse(format!(
                    "variable x{inferred} exceeds declared arity {a}"
                )))
            }
            Some(a) => a,
            None => inferred,
        };
        Polynomial::from_terms(
            arity,
            raw.into_iter().map(|(e, c)| {
                let mut v = vec![0u16; arity];
                for (i, p) in e {
                    v[i] += p;
                }
                (v, c)
            }),
        )
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::Polynomial;
    use proptest::prelude::*;

    pub fn poly_strategy(arity: usize, max_deg: u16) -> impl Strategy<Value = Polynomial> {
        prop::collection::vec(
            (prop::collection::vec(0..=max_deg, arity), -2.0..2.0f64),
            1..6,
        )
        .prop_map(move |terms| {
            let terms = terms.into_iter().map(|(mut e, c)| {
                // Keep total degree bounded.
                while e.iter().map(|&x| x as u32).sum::<u32>() > max_deg as u32 {
                    let k = e.iter().position(|&x| x > 0).unwrap();
                    e[k] -= 1;
                }
                (e, c)
            });
            Polynomial::from_terms(arity, terms).unwrap()
        })
    }
}
