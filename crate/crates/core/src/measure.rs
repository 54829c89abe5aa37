//! Uniform-weight empirical measures on the real line.
//!
//! Distances here are diagnostics. `wasserstein1` dominates the bounded
//! Lipschitz (Fortet-Mourier) distance, which is not computed.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::compensated_sum;

/// Relative tolerance used for the zero-mean invariant of centered measures.
pub const CENTERING_TOL: f64 = 1e-12;

/// Atoms with implicit weight `1/N` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if let Some(x) = atoms.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("atom {x}")));
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn into_atoms(self) -> Vec<f64> {
        self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        compensated_sum(self.atoms.iter().copied()) / self.atoms.len() as f64
    }

    /// `(1/N) sum x_i^k`.
    pub fn raw_moment(&self, k: u32) -> f64 {
        raw_moment(&self.atoms, k)
    }

    /// Raw moments of orders `0..=max_order`.
    pub fn raw_moments(&self, max_order: usize) -> Vec<f64> {
        raw_moments(&self.atoms, max_order)
    }

    /// `(1/N) sum |x_i - mean|^k`.
    pub fn centered_moment(&self, k: u32) -> f64 {
        let m = self.mean();
        let n = self.atoms.len() as f64;
        compensated_sum(self.atoms.iter().map(|x| (x - m).abs().powi(k as i32))) / n
    }

    pub fn shifted(&self, a: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|x| x + a).collect(),
        }
    }

    /// Each atom repeated `copies` times.
    pub fn replicated(&self, copies: usize) -> Self {
        let mut atoms = Vec::with_capacity(self.atoms.len() * copies);
        for _ in 0..copies {
            atoms.extend_from_slice(&self.atoms);
        }
        Self { atoms }
    }

    pub fn max_abs(&self) -> f64 {
        self.atoms.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["position"])?;
        for x in &self.atoms {
            wr.write_record([format_f64(*x)])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.len() != 1 || &headers[0] != "position" {
            return Err(Error::Parse(format!(
                "expected single header `position`, found {headers:?}"
            )));
        }
        let mut atoms = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let x: f64 = rec[0]
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("bad position {:?}: {e}", &rec[0])))?;
            atoms.push(x);
        }
        Self::new(atoms)
    }
}

/// Empirical measure whose atom mean is zero up to [`CENTERING_TOL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenteredMeasure {
    atoms: Vec<f64>,
}

impl CenteredMeasure {
    /// Validates an already centered atom list.
    pub fn from_atoms(atoms: Vec<f64>) -> Result<Self> {
        let mu = EmpiricalMeasure::new(atoms)?;
        let scale = 1.0 + mu.max_abs();
        let m = mu.mean();
        if m.abs() > CENTERING_TOL * scale {
            return Err(Error::InvalidParameter(format!(
                "atoms are not centered: mean {m:e}"
            )));
        }
        Ok(Self { atoms: mu.atoms })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `(1/N) sum |x_i|^k`; the mean is zero by construction.
    pub fn centered_moment(&self, k: u32) -> f64 {
        let n = self.atoms.len() as f64;
        compensated_sum(self.atoms.iter().map(|x| x.abs().powi(k as i32))) / n
    }

    pub fn raw_moments(&self, max_order: usize) -> Vec<f64> {
        raw_moments(&self.atoms, max_order)
    }

    pub fn as_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure {
            atoms: self.atoms.clone(),
        }
    }

    pub fn into_measure(self) -> EmpiricalMeasure {
        EmpiricalMeasure { atoms: self.atoms }
    }
}

/// Shifts every atom by minus the atom mean.
///
/// A second pass removes the residual mean left by rounding in the first.
pub fn recenter(mu: &EmpiricalMeasure) -> CenteredMeasure {
    CenteredMeasure {
        atoms: center_atoms(&mu.atoms),
    }
}

pub(crate) fn center_atoms(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let m = compensated_sum(xs.iter().copied()) / n;
    let mut out: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let r = compensated_sum(out.iter().copied()) / n;
    if r != 0.0 {
        for x in &mut out {
            *x -= r;
        }
    }
    out
}

pub fn raw_moment(xs: &[f64], k: u32) -> f64 {
    compensated_sum(xs.iter().map(|x| x.powi(k as i32))) / xs.len() as f64
}

/// Raw moments `m_0..=m_max_order` computed in a single pass.
pub fn raw_moments(xs: &[f64], max_order: usize) -> Vec<f64> {
    let mut acc = vec![crate::stats::CompensatedSum::new(); max_order + 1];
    for &x in xs {
        let mut p = 1.0;
        for a in acc.iter_mut() {
            a.add(p);
            p *= x;
        }
    }
    let n = xs.len() as f64;
    acc.iter().map(|a| a.value() / n).collect()
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Order-statistics W1 for equal counts, `∫|F - G|` otherwise.
pub fn wasserstein1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    wasserstein1_atoms(mu.atoms(), nu.atoms())
}

pub fn wasserstein1_atoms(a: &[f64], b: &[f64]) -> f64 {
    let a = sorted(a);
    let b = sorted(b);
    if a.len() == b.len() {
        let s = compensated_sum(a.iter().zip(&b).map(|(x, y)| (x - y).abs()));
        return s / a.len() as f64;
    }
    // Sweep the merged support accumulating |F_a - F_b| dx.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut acc = crate::stats::CompensatedSum::new();
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let diff = (i as f64 / na - j as f64 / nb).abs();
        acc.add(diff * (next - prev));
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    acc.value()
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    ks_statistic_atoms(mu.atoms(), nu.atoms())
}

pub fn ks_statistic_atoms(a: &[f64], b: &[f64]) -> f64 {
    let a = sorted(a);
    let b = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0_f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_statistic_cdf(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let s = sorted(sample);
    let n = s.len() as f64;
    let mut d = 0.0_f64;
    for (k, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((k as f64 + 1.0) / n - f).max(f - k as f64 / n);
    }
    d
}

/// Fixed 17-significant-digit decimal used by every text output.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(EmpiricalMeasure::new(vec![]), Err(Error::EmptyMeasure)));
        assert!(EmpiricalMeasure::new(vec![1.0, f64::NAN]).is_err());
        assert!(CenteredMeasure::from_atoms(vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn recenter_examples() {
        assert_eq!(recenter(&m(&[0.0, 2.0])).atoms(), &[-1.0, 1.0]);
        assert_eq!(recenter(&m(&[5.0])).atoms(), &[0.0]);
        assert_eq!(recenter(&m(&[1.0, 2.0, 6.0])).atoms(), &[-2.0, -1.0, 3.0]);
    }

    #[test]
    fn centered_moment_examples() {
        assert_eq!(m(&[-1.0, 1.0]).centered_moment(2), 1.0);
        assert_eq!(m(&[3.0, -7.0, 0.5]).centered_moment(0), 1.0);
        assert_eq!(m(&[0.0, 2.0]).centered_moment(2), 1.0);
        assert_eq!(m(&[0.0, 3.0]).centered_moment(1), 1.5);
    }

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein1(&m(&[0.0, 1.0]), &m(&[0.0, 1.0])), 0.0);
        assert_eq!(wasserstein1(&m(&[0.0]), &m(&[3.0])), 3.0);
        assert_eq!(wasserstein1(&m(&[0.0, 2.0]), &m(&[1.0, 1.0])), 1.0);
        // Unequal counts: {0,2} vs {1}: integral of |F - G| = 1/2 + 1/2.
        assert!((wasserstein1(&m(&[0.0, 2.0]), &m(&[1.0])) - 1.0).abs() < 1e-15);
        assert!((wasserstein1(&m(&[0.0]), &m(&[0.0, 0.0, 3.0])) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&m(&[0.3, 1.0]), &m(&[0.3, 1.0])), 0.0);
        assert_eq!(ks_statistic(&m(&[0.0]), &m(&[1.0])), 1.0);
        assert_eq!(ks_statistic(&m(&[0.0, 1.0]), &m(&[0.0, 2.0])), 0.5);
    }

    #[test]
    fn ks_against_cdf() {
        let d = ks_statistic_cdf(&[0.25, 0.75], |x| x.clamp(0.0, 1.0));
        assert!((d - 0.25).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let mu = m(&[0.1, -2.5e-7, 1.0 / 3.0]);
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("position\n"));
        assert_eq!(EmpiricalMeasure::read_csv(&buf[..]).unwrap(), mu);
    }

    fn atoms_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0..50.0f64, n)
    }

    proptest! {
        #[test]
        fn recenter_idempotent(xs in prop::collection::vec(-1e3..1e3f64, 1..40)) {
            let c = recenter(&m(&xs));
            let cc = recenter(&c.as_measure());
            let scale = 1.0 + m(&xs).max_abs();
            for (a, b) in c.atoms().iter().zip(cc.atoms()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
            prop_assert!(c.centered_moment(1) >= 0.0);
            prop_assert!(m(c.atoms()).mean().abs() <= CENTERING_TOL * scale);
        }

        #[test]
        fn centered_moment_invariant_under_recenter(xs in atoms_strategy(12), k in 0u32..5) {
            let mu = m(&xs);
            let a = mu.centered_moment(k);
            let b = recenter(&mu).centered_moment(k);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn w1_is_a_metric(a in atoms_strategy(7), b in atoms_strategy(7), c in atoms_strategy(7)) {
            let (a, b, c) = (m(&a), m(&b), m(&c));
            prop_assert_eq!(wasserstein1(&a, &b), wasserstein1(&b, &a));
            prop_assert!(wasserstein1(&a, &c) <= wasserstein1(&a, &b) + wasserstein1(&b, &c) + 1e-12);
            prop_assert_eq!(wasserstein1(&a, &a), 0.0);
        }

        #[test]
        fn unequal_w1_matches_replication(a in atoms_strategy(3), b in atoms_strategy(2)) {
            // Replicating to a common count leaves the CDFs unchanged.
            let d1 = wasserstein1_atoms(&a, &b);
            let ar = m(&a).replicated(2);
            let br = m(&b).replicated(3);
            let d2 = wasserstein1(&ar, &br);
            prop_assert!((d1 - d2).abs() <= 1e-10 * (1.0 + d2));
        }

        #[test]
        fn ks_in_unit_interval(a in atoms_strategy(5), b in atoms_strategy(9)) {
            let d = ks_statistic_atoms(&a, &b);
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
