//! Statistical checks on simulated paths: martingale residuals, brackets,
//! product and mild forms, ergodicity of the coupling, and moment relaxation.
//!
//! Residuals are computed from per-snapshot raw moments of the centered
//! population, so paths never need to be stored atom by atom.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dual::FvcGenerator;
use crate::error::{require, Result};
use crate::genealogy::{coupled_pair_sample, sample_invariant};
use crate::measure::{center_atoms, raw_moments, wasserstein1_atoms, EmpiricalMeasure};
use crate::moran::{m2_relaxation, simulate_with, InitialCondition, MoranConfig, MoranPath, RatePreset};
use crate::poly::Polynomial;
use crate::seed::{child_master, run_replicas};
use crate::semigroup::{apply_semigroup, SemigroupParams};
use crate::stats::{weighted_linear_fit, Estimate};

/// Acceptance band for every t-statistic in this module.
pub const T_BAND: f64 = 4.0;

/// Raw moments `⟨x^k, Z_t⟩`, `k = 0..=order`, of the centered population at
/// each snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSeries {
    pub particles: usize,
    pub times: Vec<f64>,
    pub moments: Vec<Vec<f64>>,
}

/// Raw moments of the recentered atoms. The first moment is zero by
/// construction and is stored as an exact zero so that observables which
/// vanish on centered measures vanish in floating point too.
fn centered_moments(xs: &[f64], order: usize) -> Vec<f64> {
    let mut m = raw_moments(&center_atoms(xs), order);
    if let Some(m1) = m.get_mut(1) {
        *m1 = 0.0;
    }
    m
}

impl MomentSeries {
    pub fn from_path(path: &MoranPath, order: usize) -> Self {
        let particles = path.snapshots.first().map_or(0, |(_, m)| m.len());
        let (times, moments) = path
            .snapshots
            .iter()
            .map(|(t, m)| (*t, centered_moments(m.atoms(), order)))
            .unzip();
        Self { particles, times, moments }
    }

    /// Simulates one path and keeps only its moments.
    pub fn simulate<R: Rng + ?Sized>(config: &MoranConfig, order: usize, rng: &mut R) -> Result<Self> {
        let mut times = Vec::with_capacity(config.snapshot_times.len());
        let mut moments = Vec::with_capacity(config.snapshot_times.len());
        simulate_with(config, rng, |t, x| {
            times.push(t);
            moments.push(centered_moments(x, order));
        })?;
        Ok(Self { particles: config.n, times, moments })
    }

    pub fn order(&self) -> usize {
        self.moments.first().map_or(0, |m| m.len() - 1)
    }

    pub fn max_step(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Simulates `paths` independent moment series in parallel.
pub fn simulate_series<R: Rng + ?Sized>(
    config: &MoranConfig,
    order: usize,
    paths: usize,
    rng: &mut R,
) -> Result<Vec<MomentSeries>> {
    let master = child_master(rng);
    run_replicas(master, paths, |_, r| MomentSeries::simulate(config, order, r))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub observable: String,
    pub increments: usize,
    pub mean_increment: f64,
    /// `Σd / sqrt(Σd²)`; zero when every increment vanishes.
    pub t_statistic: f64,
    /// Same statistic using every second snapshot.
    pub coarse_t_statistic: f64,
    /// Realized over predicted quadratic variation, when a prediction exists.
    pub qv_ratio: Option<f64>,
    pub qv_ratio_se: Option<f64>,
    /// Snapshot spacing exceeded `0.01 / γ_eff`.
    pub too_coarse: bool,
}

impl MartingaleReport {
    pub fn passed(&self) -> bool {
        !self.too_coarse && self.t_statistic.is_finite() && self.t_statistic.abs() < T_BAND
    }

    pub fn qv_z(&self) -> Option<f64> {
        Some((self.qv_ratio? - 1.0) / self.qv_ratio_se?)
    }
}

#[derive(Default)]
struct Increments {
    count: usize,
    sum: f64,
    sum_sq: f64,
    sum_q: f64,
    sum_d4: f64,
    sum_d2q: f64,
    sum_q2: f64,
    has_qv: bool,
}

impl Increments {
    fn push(&mut self, d: f64, q: Option<f64>) {
        self.count += 1;
        self.sum += d;
        self.sum_sq += d * d;
        if let Some(q) = q {
            self.has_qv = true;
            self.sum_q += q;
            self.sum_d4 += d.powi(4);
            self.sum_d2q += d * d * q;
            self.sum_q2 += q * q;
        }
    }

    fn t(&self) -> f64 {
        if self.sum_sq == 0.0 {
            0.0
        } else {
            self.sum / self.sum_sq.sqrt()
        }
    }

    fn qv(&self) -> (Option<f64>, Option<f64>) {
        if !self.has_qv || self.sum_q <= 0.0 {
            return (None, None);
        }
        let ratio = self.sum_sq / self.sum_q;
        let resid = self.sum_d4 - 2.0 * ratio * self.sum_d2q + ratio * ratio * self.sum_q2;
        (Some(ratio), Some(resid.max(0.0).sqrt() / self.sum_q))
    }
}

/// Per-snapshot value, drift integrand and optional QV integrand of one path.
struct Track {
    times: Vec<f64>,
    value: Vec<f64>,
    drift: Vec<f64>,
    qv: Option<Vec<f64>>,
}

fn accumulate(track: &Track, stride: usize, inc: &mut Increments) {
    let idx: Vec<usize> = (0..track.times.len()).step_by(stride).collect();
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        let h = track.times[b] - track.times[a];
        let d = track.value[b] - track.value[a] - 0.5 * h * (track.drift[a] + track.drift[b]);
        let q = track.qv.as_ref().map(|q| 0.5 * h * (q[a] + q[b]));
        inc.push(d, q);
    }
}

fn report(name: String, tracks: &[Track], gamma_eff: f64) -> MartingaleReport {
    let mut fine = Increments::default();
    let mut coarse = Increments::default();
    let mut max_step: f64 = 0.0;
    for tr in tracks {
        accumulate(tr, 1, &mut fine);
        accumulate(tr, 2, &mut coarse);
        max_step = tr.times.windows(2).map(|w| w[1] - w[0]).fold(max_step, f64::max);
    }
    let (qv_ratio, qv_ratio_se) = fine.qv();
    MartingaleReport {
        observable: name,
        increments: fine.count,
        mean_increment: if fine.count > 0 { fine.sum / fine.count as f64 } else { 0.0 },
        t_statistic: fine.t(),
        coarse_t_statistic: coarse.t(),
        qv_ratio,
        qv_ratio_se,
        too_coarse: gamma_eff > 0.0 && max_step > 0.01 / gamma_eff * (1.0 + 1e-9),
    }
}

/// Dense coefficient helpers for one-variable polynomials.
mod uni {
    pub fn derivative(c: &[f64]) -> Vec<f64> {
        c.iter().enumerate().skip(1).map(|(k, a)| k as f64 * a).collect()
    }

    pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
        if a.is_empty() || b.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    pub fn times_x(c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0];
        out.extend_from_slice(c);
        out
    }

    pub fn eval(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, a| acc * x + a)
    }

    /// `⟨p, μ⟩` from raw moments.
    pub fn pair(c: &[f64], m: &[f64]) -> f64 {
        c.iter().zip(m).map(|(a, b)| a * b).sum()
    }

    pub fn degree(c: &[f64]) -> usize {
        c.len().saturating_sub(1)
    }
}

/// Test function `F(⟨g, μ⟩)` with the derived pieces used by the drift and
/// bracket integrands.
#[derive(Clone, Debug)]
pub struct Observable {
    pub name: String,
    f: [Vec<f64>; 3],
    g: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
    g_sq: Vec<f64>,
    g1_x: Vec<f64>,
    g_x: Vec<f64>,
}

/// Moment-level summaries of `g` at one snapshot.
struct GStats {
    a: f64,
    g1: f64,
    g_x: f64,
}

impl Observable {
    pub fn new(f: &Polynomial, g: &Polynomial) -> Result<Self> {
        let fc = f.to_univariate_coeffs()?;
        let gc = g.to_univariate_coeffs()?;
        let f1 = uni::derivative(&fc);
        let f2 = uni::derivative(&f1);
        let g1 = uni::derivative(&gc);
        Ok(Self {
            name: format!("F={} g={}", inline(f), inline(g)),
            g2: uni::derivative(&g1),
            g_sq: uni::mul(&gc, &gc),
            g1_x: uni::times_x(&g1),
            g_x: uni::times_x(&gc),
            f: [fc, f1, f2],
            g: gc,
            g1,
        })
    }

    pub fn moment_order(&self) -> usize {
        uni::degree(&self.g_sq).max(uni::degree(&self.g_x)).max(2)
    }

    fn stats(&self, m: &[f64]) -> GStats {
        GStats { a: uni::pair(&self.g, m), g1: uni::pair(&self.g1, m), g_x: uni::pair(&self.g_x, m) }
    }

    pub fn value(&self, m: &[f64]) -> f64 {
        uni::eval(&self.f[0], uni::pair(&self.g, m))
    }

    /// `⟨g²⟩ − ⟨g⟩² + ⟨g'⟩² M₂ − 2⟨g'⟩⟨g·id⟩`.
    fn spread(&self, m: &[f64], s: &GStats) -> f64 {
        uni::pair(&self.g_sq, m) - s.a * s.a + s.g1 * s.g1 * m[2] - 2.0 * s.g1 * s.g_x
    }

    pub fn drift(&self, m: &[f64], gamma: f64) -> f64 {
        let s = self.stats(m);
        let g2 = uni::pair(&self.g2, m);
        let first = 0.5 * g2 + gamma * (g2 * m[2] - 2.0 * uni::pair(&self.g1_x, m));
        uni::eval(&self.f[1], s.a) * first + gamma * uni::eval(&self.f[2], s.a) * self.spread(m, &s)
    }

    pub fn quadratic_variation(&self, m: &[f64], gamma: f64) -> f64 {
        let s = self.stats(m);
        let fp = uni::eval(&self.f[1], s.a);
        2.0 * gamma * fp * fp * self.spread(m, &s)
    }

    /// Cross-variation integrand with another observable.
    pub fn bracket(&self, other: &Observable, m: &[f64], gamma: f64) -> f64 {
        let (s, o) = (self.stats(m), other.stats(m));
        let gh = uni::pair(&uni::mul(&self.g, &other.g), m);
        let inner = gh - s.a * o.a + s.g1 * o.g1 * m[2] - s.g1 * o.g_x - o.g1 * s.g_x;
        2.0 * gamma * uni::eval(&self.f[1], s.a) * uni::eval(&other.f[1], o.a) * inner
    }
}

fn inline(p: &Polynomial) -> String {
    p.to_string().lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join(" + ")
}

fn check_order(series: &[MomentSeries], order: usize) -> Result<()> {
    require(!series.is_empty(), || "no paths given".into())?;
    for s in series {
        require(s.order() >= order, || format!("series carries moments to order {}, need {order}", s.order()))?;
    }
    Ok(())
}

/// Residual of `F(⟨g, Z_t⟩)` minus its integrated drift, with the realized
/// quadratic variation compared to its prediction.
pub fn martingale_residual(
    series: &[MomentSeries],
    f: &Polynomial,
    g: &Polynomial,
    gamma_eff: f64,
) -> Result<MartingaleReport> {
    let obs = Observable::new(f, g)?;
    check_order(series, obs.moment_order())?;
    let tracks: Vec<Track> = series
        .iter()
        .map(|s| Track {
            times: s.times.clone(),
            value: s.moments.iter().map(|m| obs.value(m)).collect(),
            drift: s.moments.iter().map(|m| obs.drift(m, gamma_eff)).collect(),
            qv: Some(s.moments.iter().map(|m| obs.quadratic_variation(m, gamma_eff)).collect()),
        })
        .collect();
    Ok(report(obs.name, &tracks, gamma_eff))
}

/// Realized cross-variation of two residual series minus its predicted
/// integral; the tested increments are `dM^G dM^H − ∫ bracket`.
pub fn bracket_residual(
    series: &[MomentSeries],
    (big_g, g): (&Polynomial, &Polynomial),
    (big_h, h): (&Polynomial, &Polynomial),
    gamma_eff: f64,
) -> Result<MartingaleReport> {
    let og = Observable::new(big_g, g)?;
    let oh = Observable::new(big_h, h)?;
    let order = og.moment_order().max(oh.moment_order()).max(uni::degree(&og.g) + uni::degree(&oh.g));
    check_order(series, order)?;
    let mut inc = Increments::default();
    let mut coarse = Increments::default();
    let mut realized = 0.0;
    let mut predicted = 0.0;
    let mut max_step: f64 = 0.0;
    for s in series {
        for (stride, acc) in [(1usize, &mut inc), (2, &mut coarse)] {
            let idx: Vec<usize> = (0..s.times.len()).step_by(stride).collect();
            for w in idx.windows(2) {
                let (a, b) = (w[0], w[1]);
                let (ma, mb) = (&s.moments[a], &s.moments[b]);
                let h = s.times[b] - s.times[a];
                let dg = og.value(mb) - og.value(ma) - 0.5 * h * (og.drift(ma, gamma_eff) + og.drift(mb, gamma_eff));
                let dh = oh.value(mb) - oh.value(ma) - 0.5 * h * (oh.drift(ma, gamma_eff) + oh.drift(mb, gamma_eff));
                let c = 0.5 * h * (og.bracket(&oh, ma, gamma_eff) + og.bracket(&oh, mb, gamma_eff));
                if stride == 1 {
                    realized += dg * dh;
                    predicted += c;
                    max_step = max_step.max(h);
                }
                acc.push(dg * dh - c, None);
            }
        }
    }
    Ok(MartingaleReport {
        observable: format!("<{}, {}>", og.name, oh.name),
        increments: inc.count,
        mean_increment: if inc.count > 0 { inc.sum / inc.count as f64 } else { 0.0 },
        t_statistic: inc.t(),
        coarse_t_statistic: coarse.t(),
        qv_ratio: (predicted != 0.0).then(|| realized / predicted),
        qv_ratio_se: None,
        too_coarse: gamma_eff > 0.0 && max_step > 0.01 / gamma_eff * (1.0 + 1e-9),
    })
}

/// Residual of `⟨f, Z_tⁿ⟩` minus the integrated product-form generator.
pub fn product_martingale_residual(
    series: &[MomentSeries],
    f: &Polynomial,
    gamma_eff: f64,
) -> Result<MartingaleReport> {
    let gen = FvcGenerator::new(f, gamma_eff)?;
    check_order(series, gen.moment_order())?;
    let tracks: Vec<Track> = series
        .iter()
        .map(|s| Track {
            times: s.times.clone(),
            value: s.moments.iter().map(|m| f.integrate_with_moments(m)).collect(),
            drift: s.moments.iter().map(|m| gen.apply_moments(m)).collect(),
            qv: None,
        })
        .collect();
    Ok(report(format!("<f, Z^{}> f={}", f.arity(), inline(f)), &tracks, gamma_eff))
}

/// Jump part of the generator applied to `f`, without the `B` term.
fn jump_terms(f: &Polynomial, gamma: f64) -> Result<FvcGenerator> {
    let mut gen = FvcGenerator::new(f, gamma)?;
    gen.drift = Polynomial::zero(f.arity());
    Ok(gen)
}

/// Residual of the mild form: `⟨T(t₀−t)f, Z_tⁿ⟩` minus the integrated
/// insertion and `K` terms of `T(t₀−s)f`, on `[0, t₀]`.
pub fn mild_residual(
    series: &[MomentSeries],
    f: &Polynomial,
    t0: f64,
    gamma_eff: f64,
) -> Result<MartingaleReport> {
    let params = SemigroupParams::new(f.arity(), gamma_eff)?;
    require(t0 >= 0.0, || format!("t0 must be >= 0, got {t0}"))?;
    for s in series {
        require(s.times.last().is_some_and(|&t| t >= t0), || "path shorter than t0".into())?;
    }
    // All paths share one snapshot grid in practice; cache per distinct time.
    let mut cache: Vec<(f64, Polynomial, FvcGenerator)> = Vec::new();
    let mut tracks = Vec::with_capacity(series.len());
    for s in series {
        let mut tr = Track { times: Vec::new(), value: Vec::new(), drift: Vec::new(), qv: None };
        for (t, m) in s.times.iter().zip(&s.moments) {
            if *t > t0 {
                break;
            }
            let pos = match cache.iter().position(|(c, _, _)| c == t) {
                Some(p) => p,
                None => {
                    let ft = apply_semigroup(f, &params, t0 - t)?;
                    let jumps = jump_terms(&ft, gamma_eff)?;
                    cache.push((*t, ft, jumps));
                    cache.len() - 1
                }
            };
            let (_, ft, jumps) = &cache[pos];
            require(m.len() > jumps.moment_order(), || "series moment order too low".into())?;
            tr.times.push(*t);
            tr.value.push(ft.integrate_with_moments(m));
            tr.drift.push(jumps.apply_moments(m));
        }
        tracks.push(tr);
    }
    Ok(report(format!("mild t0={t0} f={}", inline(f)), &tracks, gamma_eff))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullCalibration {
    pub observable: String,
    pub runs: usize,
    pub increments_per_run: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
}

/// Runs the Def-style residual on independent pure-Brownian populations
/// (`γ = 0`, `γ_eff = 0`) and counts `|t| ≥ 4`.
pub fn null_calibration<R: Rng + ?Sized>(
    n: usize,
    runs: usize,
    increments: usize,
    dt: f64,
    f: &Polynomial,
    g: &Polynomial,
    rng: &mut R,
) -> Result<NullCalibration> {
    let obs = Observable::new(f, g)?;
    let cfg = MoranConfig::new(
        n,
        0.0,
        RatePreset::Diffusion,
        increments as f64 * dt,
        dt,
        InitialCondition::IidNormal { sigma: 1.0 },
    );
    let series = simulate_series(&cfg, obs.moment_order(), runs, rng)?;
    let reports = series
        .iter()
        .map(|s| martingale_residual(std::slice::from_ref(s), f, g, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let rejections = reports.iter().filter(|r| r.t_statistic.abs() >= T_BAND).count();
    Ok(NullCalibration {
        observable: obs.name,
        runs,
        increments_per_run: reports.first().map_or(0, |r| r.increments),
        rejections,
        rejection_rate: rejections as f64 / runs as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityRow {
    pub t: f64,
    pub not_coalesced: f64,
    pub not_coalesced_se: f64,
    /// `3 λ e T exp(−λT)`.
    pub bound: f64,
    /// Coupled outputs were bitwise equal on every coalesced replica.
    pub coupled_equal: bool,
    /// W1 between the laws of M₂ under time-T samples and the invariant law.
    pub m2_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityReport {
    pub n: usize,
    pub pair_rate: f64,
    pub replicas: usize,
    pub rows: Vec<ErgodicityRow>,
    /// Weighted fit of `ln P(not coalesced)` against `T` on the tail.
    pub tail_slope: f64,
    pub tail_slope_se: f64,
    pub tail_from: f64,
}

impl ErgodicityReport {
    pub fn bound_holds(&self, n_se: f64) -> bool {
        self.rows.iter().all(|r| r.not_coalesced <= r.bound + n_se * r.not_coalesced_se)
    }

    pub fn all_coupled_equal(&self) -> bool {
        self.rows.iter().all(|r| r.coupled_equal)
    }
}

pub fn coupling_bound(pair_rate: f64, t: f64) -> f64 {
    3.0 * pair_rate * std::f64::consts::E * t * (-pair_rate * t).exp()
}

/// Coupling experiment from two fixed initial populations: evenly spaced
/// atoms on `[−1, 1]` versus all mass at the origin but one atom at `n`.
pub fn ergodicity_experiment<R: Rng + ?Sized>(
    n: usize,
    pair_rate: f64,
    t_grid: &[f64],
    replicas: usize,
    tail_from: f64,
    rng: &mut R,
) -> Result<ErgodicityReport> {
    require(n >= 2 && replicas >= 2, || "need n >= 2 and replicas >= 2".into())?;
    let mu0 = EmpiricalMeasure::new((0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect())?;
    let mut nu_atoms = vec![0.0; n];
    nu_atoms[n - 1] = n as f64;
    let nu0 = EmpiricalMeasure::new(nu_atoms)?;
    let moment_draws = replicas.min(20_000);
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let master = child_master(rng);
        let out = run_replicas(master, replicas, |_, r| {
            let p = coupled_pair_sample(&mu0, &nu0, t, pair_rate, r)?;
            let equal = !p.coalesced || p.first == p.second;
            Ok((p.coalesced, equal, p.first.centered_moment(2)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let fails: Vec<f64> = out.iter().map(|o| if o.0 { 0.0 } else { 1.0 }).collect();
        let est = Estimate::from_samples(&fails);
        let inv_master = child_master(rng);
        let inv: Vec<f64> = run_replicas(inv_master, moment_draws, |_, r| {
            sample_invariant(n, pair_rate, r).map(|v| v.centered_moment(2))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let fwd: Vec<f64> = out.iter().take(moment_draws).map(|o| o.2).collect();
        rows.push(ErgodicityRow {
            t,
            not_coalesced: est.mean,
            not_coalesced_se: est.se,
            bound: coupling_bound(pair_rate, t),
            coupled_equal: out.iter().all(|o| o.1),
            m2_distance: wasserstein1_atoms(&fwd, &inv),
        });
    }
    let tail: Vec<&ErgodicityRow> = rows.iter().filter(|r| r.t >= tail_from && r.not_coalesced > 0.0).collect();
    let (slope, slope_se) = if tail.len() >= 2 {
        let x: Vec<f64> = tail.iter().map(|r| r.t).collect();
        let y: Vec<f64> = tail.iter().map(|r| r.not_coalesced.ln()).collect();
        let w: Vec<f64> = tail
            .iter()
            .map(|r| replicas as f64 * r.not_coalesced / (1.0 - r.not_coalesced).max(1e-300))
            .collect();
        let (_, b, _, se_b) = weighted_linear_fit(&x, &y, &w);
        (b, se_b)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ErgodicityReport { n, pair_rate, replicas, rows, tail_slope: slope, tail_slope_se: slope_se, tail_from })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationReport {
    pub n: usize,
    pub pair_rate: f64,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Exact finite-population prediction.
    pub predicted: Vec<f64>,
    /// Large-population prediction `1/(2r) + (m₀ − 1/(2r)) e^{−2rt}`.
    pub limit: Vec<f64>,
    /// Largest `|mean − predicted| / se`.
    pub max_z: f64,
    /// Least-squares `c` in `mean ≈ limit − c/N`.
    pub fitted_c: f64,
}

/// Mean of `M₂(Z_t)` over replicas on the config's snapshot grid.
pub fn m2_relaxation_fit<R: Rng + ?Sized>(config: &MoranConfig, replicas: usize, rng: &mut R) -> Result<RelaxationReport> {
    let series = simulate_series(config, 2, replicas, rng)?;
    let r = config.pair_rate();
    let m0 = series[0].moments[0][2];
    let times = series[0].times.clone();
    let (mut mean, mut se, mut predicted, mut limit) = (vec![], vec![], vec![], vec![]);
    let mut max_z: f64 = 0.0;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &t) in times.iter().enumerate() {
        let vals: Vec<f64> = series.iter().map(|s| s.moments[k][2]).collect();
        let e = Estimate::from_samples(&vals);
        let p = m2_relaxation(config.n, r, m0, t);
        let l = if r > 0.0 {
            let s = 1.0 / (2.0 * r);
            s + (m0 - s) * (-2.0 * r * t).exp()
        } else {
            m0 + t
        };
        if e.se > 0.0 {
            max_z = max_z.max(((e.mean - p) / e.se).abs());
        }
        let gap = (l - e.mean) * config.n as f64;
        num += gap;
        den += 1.0;
        mean.push(e.mean);
        se.push(e.se);
        predicted.push(p);
        limit.push(l);
    }
    Ok(RelaxationReport {
        n: config.n,
        pair_rate: r,
        times,
        mean,
        se,
        predicted,
        limit,
        max_z,
        fitted_c: num / den,
    })
}

/// One row of the flat results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub statistic: f64,
    pub band: String,
    pub pass: bool,
}

impl ReportRow {
    pub fn new(name: impl Into<String>, statistic: f64, band: impl Into<String>, pass: bool) -> Self {
        Self { name: name.into(), statistic, band: band.into(), pass }
    }

    pub fn from_martingale(r: &MartingaleReport) -> Self {
        Self::new(r.observable.clone(), r.t_statistic, format!("|t| < {T_BAND}"), r.passed())
    }
}

/// Writes rows as CSV with header `name,statistic,band,pass`; numbers use
/// 17 significant digits.
pub fn write_rows<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["name", "statistic", "band", "pass"])?;
    for r in rows {
        out.write_record([r.name.as_str(), &crate::measure::format_f64(r.statistic), r.band.as_str(), if r.pass { "true" } else { "false" }])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moran::simulate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uni(c: &[f64]) -> Polynomial {
        Polynomial::univariate(c)
    }

    fn series(n: usize, gamma: f64, horizon: f64, paths: usize, order: usize, seed: u64) -> Vec<MomentSeries> {
        let cfg = MoranConfig::new(n, gamma, RatePreset::Diffusion, horizon, 0.01, InitialCondition::IidNormal { sigma: 0.7 });
        simulate_series(&cfg, order, paths, &mut rng(seed)).unwrap()
    }

    #[test]
    fn second_moment_drift_reduces() {
        let obs = Observable::new(&uni(&[0.0, 1.0]), &uni(&[0.0, 0.0, 1.0])).unwrap();
        let m = [1.0, 0.0, 0.8, 0.1, 1.9];
        assert!((obs.drift(&m, 1.3) - (1.0 - 2.0 * 1.3 * 0.8)).abs() < 1e-14);
        // For g = id the bracket integrand cancels on centered measures.
        let lin = Observable::new(&uni(&[0.0, 1.0]), &uni(&[0.0, 1.0])).unwrap();
        assert_eq!(lin.quadratic_variation(&m, 2.0), 0.0);
        assert_eq!(lin.bracket(&lin, &m, 2.0), 0.0);
    }

    #[test]
    fn constant_observable_is_exact() {
        let s = series(20, 1.0, 1.0, 2, 4, 1);
        let r = martingale_residual(&s, &uni(&[0.0, 1.0]), &uni(&[1.0]), 1.0).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert_eq!(r.mean_increment, 0.0);
        let p = product_martingale_residual(&s, &Polynomial::constant(2, 1.0), 1.0).unwrap();
        assert_eq!(p.t_statistic, 0.0);
    }

    #[test]
    fn second_moment_residual_is_centered() {
        let s = series(200, 1.0, 20.0, 4, 4, 2);
        assert_eq!(s.iter().map(|x| x.times.len() - 1).sum::<usize>(), 8000);
        let r = martingale_residual(&s, &uni(&[0.0, 1.0]), &uni(&[0.0, 0.0, 1.0]), 1.0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.qv_z().unwrap().abs() < 4.0, "{r:?}");
    }

    #[test]
    fn wrong_gamma_is_rejected() {
        let s = series(200, 1.0, 20.0, 4, 4, 3);
        let r = martingale_residual(&s, &uni(&[0.0, 1.0]), &uni(&[0.0, 0.0, 1.0]), 0.5).unwrap();
        assert!(r.t_statistic.abs() > 4.0, "{r:?}");
    }

    #[test]
    fn coarse_snapshots_flagged() {
        let cfg = MoranConfig::new(10, 1.0, RatePreset::Diffusion, 1.0, 0.1, InitialCondition::Atoms(vec![0.0; 10]));
        let s = MomentSeries::from_path(&simulate(&cfg, &mut rng(4)).unwrap(), 4);
        let r = martingale_residual(&[s], &uni(&[0.0, 1.0]), &uni(&[0.0, 0.0, 1.0]), 1.0).unwrap();
        assert!(r.too_coarse);
        assert!(!r.passed());
    }

    #[test]
    fn product_form_cross_term_vanishes() {
        let s = series(50, 1.0, 2.0, 2, 4, 5);
        let f = Polynomial::monomial(&[1, 1], 1.0).unwrap();
        let r = product_martingale_residual(&s, &f, 1.0).unwrap();
        assert!(r.mean_increment.abs() < 1e-12);
        let sq = product_martingale_residual(&s, &Polynomial::monomial(&[2], 1.0).unwrap(), 1.0).unwrap();
        let direct = martingale_residual(&s, &uni(&[0.0, 1.0]), &uni(&[0.0, 0.0, 1.0]), 1.0).unwrap();
        assert!((sq.t_statistic - direct.t_statistic).abs() < 1e-9);
    }

    #[test]
    fn mild_form_edge_cases() {
        let s = series(50, 1.0, 1.0, 3, 6, 6);
        let f = Polynomial::monomial(&[2], 1.0).unwrap();
        let r = mild_residual(&s, &f, 0.0, 1.0).unwrap();
        assert_eq!(r.increments, 0);
        assert_eq!(r.t_statistic, 0.0);
        let r = mild_residual(&s, &f, 1.0, 1.0).unwrap();
        assert_eq!(r.increments, 300);
        assert!(r.passed(), "{r:?}");
        assert!(mild_residual(&s, &f, 2.0, 1.0).is_err());
    }

    #[test]
    fn bracket_of_identity_vanishes() {
        let s = series(100, 1.0, 5.0, 2, 6, 7);
        let id = uni(&[0.0, 1.0]);
        let r = bracket_residual(&s, (&id, &id), (&id, &id), 1.0).unwrap();
        assert_eq!(r.mean_increment, 0.0);
        assert_eq!(r.t_statistic, 0.0);
        let sq = uni(&[0.0, 0.0, 1.0]);
        let diag = bracket_residual(&s, (&id, &sq), (&id, &sq), 1.0).unwrap();
        assert!(diag.passed(), "{diag:?}");
    }

    #[test]
    fn null_model_rarely_rejects() {
        let cal = null_calibration(30, 200, 200, 0.01, &uni(&[0.0, 1.0]), &uni(&[0.0, 0.0, 1.0]), &mut rng(8)).unwrap();
        assert_eq!(cal.increments_per_run, 200);
        assert!(cal.rejections <= 1, "{cal:?}");
    }

    #[test]
    fn coupling_experiment_shape() {
        let rep = ergodicity_experiment(6, 1.0, &[0.0, 2.0, 4.0, 6.0], 20_000, 4.0, &mut rng(9)).unwrap();
        assert_eq!(rep.rows[0].not_coalesced, 1.0);
        assert!(rep.all_coupled_equal());
        // The bound is vacuous near T = 0 and only checked on positive times.
        assert!(rep.rows[1..].iter().all(|r| r.not_coalesced <= r.bound + 4.0 * r.not_coalesced_se));
        assert!(rep.rows.windows(2).all(|w| w[1].not_coalesced <= w[0].not_coalesced));
    }

    #[test]
    fn relaxation_matches_exact_prediction() {
        let cfg = MoranConfig::new(8, 1.0, RatePreset::Diffusion, 1.0, 0.25, InitialCondition::Atoms(vec![0.0; 8]));
        let rep = m2_relaxation_fit(&cfg, 4000, &mut rng(10)).unwrap();
        assert!(rep.max_z < 4.0, "{rep:?}");
        assert!(rep.fitted_c > 0.0);
    }

    #[test]
    fn rows_csv() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[ReportRow::new("a", 0.5, "|t| < 4", true)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "name,statistic,band,pass\na,5.0000000000000000e-1,|t| < 4,true\n");
    }
}
