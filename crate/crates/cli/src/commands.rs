//! One function per subcommand. Each resolves its parameter block, runs the
//! experiment from the master seed, and writes its outputs.

use std::io::Write;

use fvlab_core::analysis::{ergodicity_experiment, write_rows, ReportRow};
use fvlab_core::coalescent::{sample_kingman, sample_lookdown_genealogy, sample_tcoal_infinity};
use fvlab_core::dual::{duality_check, DualityConfig};
use fvlab_core::genealogy::{backward_moran_sample, sample_invariant};
use fvlab_core::measure::{format_f64, EmpiricalMeasure};
use fvlab_core::moran::{simulate, InitialCondition, MoranConfig, RatePreset};
use fvlab_core::seed::{replica_rng, run_replicas, SEED_RULE};
use fvlab_core::verify::{self, CriterionResult};
use fvlab_core::Estimate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{parse_override, read_config_file, resolve};
use crate::manifest::{write_manifest, OutputDir, RunManifest, CSV_SCHEMA};
use crate::{CliError, Cli, Command};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoranParams {
    pub n: usize,
    pub gamma: f64,
    pub preset: RatePreset,
    pub horizon: f64,
    /// Snapshot spacing.
    pub dt: f64,
    pub init: InitialCondition,
    pub replicas: usize,
    /// Also write every atom of every snapshot to `atoms.csv`.
    pub atoms: bool,
}

impl Default for MoranParams {
    fn default() -> Self {
        Self {
            n: 100,
            gamma: 1.0,
            preset: RatePreset::Diffusion,
            horizon: 1.0,
            dt: 0.1,
            init: InitialCondition::IidNormal { sigma: 1.0 },
            replicas: 1,
            atoms: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantParams {
    pub n: usize,
    pub pair_rate: f64,
    pub replicas: usize,
    pub atoms: bool,
}

impl Default for InvariantParams {
    fn default() -> Self {
        Self { n: 20, pair_rate: 1.0, replicas: 10_000, atoms: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardParams {
    /// Atoms of the starting population.
    pub mu0: Vec<f64>,
    pub horizon: f64,
    /// Genealogical pair coalescence rate of the forward model.
    pub pair_rate: f64,
    pub replicas: usize,
    pub atoms: bool,
}

impl Default for BackwardParams {
    fn default() -> Self {
        let n = 20;
        Self {
            mu0: (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
            horizon: 1.0,
            pair_rate: 1.0,
            replicas: 10_000,
            atoms: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleParams {
    pub n: usize,
    pub pair_rate: f64,
    pub t_grid: Vec<f64>,
    pub replicas: usize,
    /// Horizons at or beyond this enter the tail-slope fit.
    pub tail_from: f64,
}

impl Default for CoupleParams {
    fn default() -> Self {
        Self { n: 10, pair_rate: 1.0, t_grid: vec![2.0, 4.0, 6.0, 8.0, 10.0], replicas: 20_000, tail_from: 4.0 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupBattery {}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenealogySampler {
    Kingman,
    Lookdown,
    /// Total coalescence time of the infinite coalescent.
    TcoalInfinity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoalescentParams {
    pub sampler: GenealogySampler,
    pub n: usize,
    pub pair_rate: f64,
    /// Initial arrow horizon for the look-down sampler.
    pub horizon: f64,
    /// Tail tolerance for `tcoal_infinity`.
    pub tolerance: f64,
    pub replicas: usize,
    /// Also write each tree as one JSON line to `trees.jsonl`.
    pub trees: bool,
}

impl Default for CoalescentParams {
    fn default() -> Self {
        Self {
            sampler: GenealogySampler::Kingman,
            n: 10,
            pair_rate: 1.0,
            horizon: 2.0,
            tolerance: 1e-3,
            replicas: 10_000,
            trees: false,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyParams {
    /// Criterion ids to run; empty runs all of them.
    pub only: Vec<u8>,
}

/// Outcome of one subcommand before the manifest is written.
struct Outcome {
    params: Value,
    summary: Value,
    unreliable: bool,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("parameter blocks serialize")
}

fn csv_writer(buf: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::Writer::from_writer(buf)
}

fn header_with_atoms(first: &[&str], n: usize) -> Vec<String> {
    first.iter().map(|s| s.to_string()).chain((1..=n).map(|i| format!("x{i}"))).collect()
}

pub fn execute(cli: &Cli) -> Result<u8, CliError> {
    let c = &cli.common;
    if let Some(t) = c.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // A second initialisation in the same process is harmless to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let file = c.config.as_deref().map(read_config_file).transpose()?;
    let mut overrides = Vec::new();
    if let Some(r) = c.replicas {
        let key = if matches!(cli.command, Command::Duality) { "dual_replicas" } else { "replicas" };
        overrides.push((vec![key.to_owned()], json!(r)));
    }
    if let Command::Invariant { n, pair_rate } = &cli.command {
        if let Some(n) = n {
            overrides.push((vec!["n".into()], json!(n)));
        }
        if let Some(r) = pair_rate {
            overrides.push((vec!["pair_rate".into()], json!(r)));
        }
    }
    for s in &c.overrides {
        overrides.push(parse_override(s)?);
    }

    let started = chrono::Utc::now();
    let mut out = OutputDir::create(&c.out)?;
    let seed = c.seed;
    let outcome = match &cli.command {
        Command::Moran => moran(resolve(&MoranParams::default(), file, &overrides)?, seed, &mut out)?,
        Command::Invariant { .. } => invariant(resolve(&InvariantParams::default(), file, &overrides)?, seed, &mut out)?,
        Command::Backward => backward(resolve(&BackwardParams::default(), file, &overrides)?, seed, &mut out)?,
        Command::Couple => couple(resolve(&CoupleParams::default(), file, &overrides)?, seed, &mut out)?,
        Command::Duality => duality(resolve(&DualityConfig::desk_scale(), file, &overrides)?, seed, &mut out)?,
        Command::Semigroup => semigroup(resolve(&SemigroupBattery::default(), file, &overrides)?, seed, &mut out)?,
        Command::Coalescent => coalescent(resolve(&CoalescentParams::default(), file, &overrides)?, seed, &mut out)?,
        Command::Verify => verify_all(resolve(&VerifyParams::default(), file, &overrides)?, seed, &mut out)?,
    };
    let code = u8::from(outcome.unreliable);
    let manifest = RunManifest {
        tool: "fvlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: cli.command.name().into(),
        master_seed: seed,
        seed_rule: SEED_RULE.into(),
        threads: rayon::current_num_threads(),
        csv_schema: CSV_SCHEMA.into(),
        params: outcome.params,
        started: started.to_rfc3339(),
        finished: chrono::Utc::now().to_rfc3339(),
        exit_code: code as i32,
        summary: outcome.summary,
        outputs: out.into_files(),
    };
    write_manifest(&c.out, &manifest)?;
    println!("{}", serde_json::to_string_pretty(&manifest.summary).unwrap_or_default());
    if outcome.unreliable {
        eprintln!("fvlab {}: result flagged unreliable", cli.command.name());
    }
    Ok(code)
}

fn moran(p: MoranParams, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let cfg = MoranConfig::new(p.n, p.gamma, p.preset, p.horizon, p.dt, p.init.clone());
    cfg.validate()?;
    if p.replicas == 0 {
        return Err(CliError::Config("replicas must be positive".into()));
    }
    let paths = run_replicas(seed, p.replicas, |_, r| simulate(&cfg, r))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    out.write("results.csv", |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["replica", "time", "mean", "M2", "M4"])?;
        for (i, path) in paths.iter().enumerate() {
            for (t, m) in &path.snapshots {
                w.write_record([
                    i.to_string(),
                    format_f64(*t),
                    format_f64(m.mean()),
                    format_f64(m.centered_moment(2)),
                    format_f64(m.centered_moment(4)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    if p.atoms {
        out.write("atoms.csv", |buf| {
            let mut w = csv_writer(buf);
            w.write_record(header_with_atoms(&["replica", "time"], p.n))?;
            for (i, path) in paths.iter().enumerate() {
                for (t, m) in &path.snapshots {
                    let row = [i.to_string(), format_f64(*t)].into_iter().chain(m.atoms().iter().map(|x| format_f64(*x)));
                    w.write_record(row)?;
                }
            }
            w.flush()?;
            Ok(())
        })?;
    }
    let events: u64 = paths.iter().map(|p| p.event_count).sum();
    let last_m2: Vec<f64> = paths.iter().filter_map(|p| p.snapshots.last()).map(|(_, m)| m.centered_moment(2)).collect();
    let est = Estimate::from_samples(&last_m2);
    Ok(Outcome {
        summary: json!({
            "pair_rate": cfg.pair_rate(),
            "resampling_events": events,
            "final_m2_mean": est.mean,
            "final_m2_se": est.se,
        }),
        params: to_value(&p),
        unreliable: false,
    })
}

fn write_batch(
    out: &mut OutputDir,
    samples: &[(bool, Vec<f64>)],
    with_atoms: bool,
) -> Result<(), CliError> {
    out.write("results.csv", |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["replica_id", "flag", "M2", "M4"])?;
        for (i, (flag, atoms)) in samples.iter().enumerate() {
            let m = EmpiricalMeasure::new(atoms.clone())?;
            w.write_record([
                i.to_string(),
                u8::from(*flag).to_string(),
                format_f64(m.centered_moment(2)),
                format_f64(m.centered_moment(4)),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    if with_atoms {
        let n = samples.first().map_or(0, |s| s.1.len());
        out.write("atoms.csv", |buf| {
            let mut w = csv_writer(buf);
            w.write_record(header_with_atoms(&["replica_id"], n))?;
            for (i, (_, atoms)) in samples.iter().enumerate() {
                w.write_record(std::iter::once(i.to_string()).chain(atoms.iter().map(|x| format_f64(*x))))?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    Ok(())
}

fn m2_summary(samples: &[(bool, Vec<f64>)]) -> Estimate {
    let m2: Vec<f64> = samples
        .iter()
        .map(|(_, a)| EmpiricalMeasure::new(a.clone()).map(|m| m.centered_moment(2)).unwrap_or(f64::NAN))
        .collect();
    Estimate::from_samples(&m2)
}

fn invariant(p: InvariantParams, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let samples = run_replicas(seed, p.replicas, |_, r| sample_invariant(p.n, p.pair_rate, r).map(|v| (true, v.atoms().to_vec())))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    write_batch(out, &samples, p.atoms)?;
    let est = m2_summary(&samples);
    let target = (p.n as f64 - 1.0) / (p.n as f64 * p.pair_rate);
    Ok(Outcome {
        summary: json!({
            "m2_mean": est.mean,
            "m2_se": est.se,
            "m2_exact": target,
            "z": est.z_score(target),
        }),
        params: to_value(&p),
        unreliable: false,
    })
}

fn backward(p: BackwardParams, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let mu0 = EmpiricalMeasure::new(p.mu0.clone())?;
    let samples = run_replicas(seed, p.replicas, |_, r| {
        backward_moran_sample(&mu0, p.horizon, p.pair_rate, r).map(|s| (s.coalesced(), s.leaf_values))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    write_batch(out, &samples, p.atoms)?;
    let est = m2_summary(&samples);
    let coalesced = samples.iter().filter(|s| s.0).count();
    Ok(Outcome {
        summary: json!({
            "m2_mean": est.mean,
            "m2_se": est.se,
            "coalesced_fraction": coalesced as f64 / samples.len().max(1) as f64,
        }),
        params: to_value(&p),
        unreliable: false,
    })
}

fn couple(p: CoupleParams, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let rep = ergodicity_experiment(p.n, p.pair_rate, &p.t_grid, p.replicas, p.tail_from, &mut replica_rng(seed, 0))?;
    out.write("results.csv", |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["t", "not_coalesced", "not_coalesced_se", "bound", "coupled_equal", "m2_distance"])?;
        for r in &rep.rows {
            w.write_record([
                format_f64(r.t),
                format_f64(r.not_coalesced),
                format_f64(r.not_coalesced_se),
                format_f64(r.bound),
                r.coupled_equal.to_string(),
                format_f64(r.m2_distance),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(Outcome {
        summary: json!({
            "tail_slope": rep.tail_slope,
            "tail_slope_se": rep.tail_slope_se,
            "all_coupled_equal": rep.all_coupled_equal(),
        }),
        params: to_value(&p),
        unreliable: !rep.all_coupled_equal(),
    })
}

fn duality(p: DualityConfig, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let rep = duality_check(&p, &mut replica_rng(seed, 0))?;
    let z = rep.z_score();
    let rows = vec![
        ReportRow::new("forward side", rep.lhs, format!("se {}", format_f64(rep.lhs_se)), true),
        ReportRow::new("dual side", rep.rhs, format!("se {}", format_f64(rep.rhs_se)), true),
        ReportRow::new("z forward vs dual", z, "|z| <= 4", z.abs() <= 4.0),
        ReportRow::new("capped fraction", rep.capped_fraction, "< 0.01", rep.capped_fraction < 0.01),
        ReportRow::new("effective sample size", rep.ess, ">= 100", rep.ess >= 100.0),
        ReportRow::new("pairing exceed fraction", rep.pairing_exceed_fraction, "reported", true),
    ];
    out.write("results.csv", |buf| Ok(write_rows(buf, &rows)?))?;
    out.write("report.json", |buf| {
        serde_json::to_writer_pretty(&mut *buf, &rep).map_err(|e| CliError::Run(e.to_string()))?;
        Ok(writeln!(buf)?)
    })?;
    Ok(Outcome {
        summary: json!({ "lhs": rep.lhs, "rhs": rep.rhs, "z": z, "reliable": rep.reliable }),
        params: to_value(&p),
        unreliable: !rep.reliable,
    })
}

fn criterion_outputs(out: &mut OutputDir, results: &[CriterionResult]) -> Result<(), CliError> {
    out.write("results.csv", |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["criterion", "name", "statistic", "band", "pass"])?;
        for c in results {
            for r in &c.rows {
                w.write_record([c.id.to_string(), r.name.clone(), format_f64(r.statistic), r.band.clone(), r.pass.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    out.write("report.json", |buf| {
        serde_json::to_writer_pretty(&mut *buf, results).map_err(|e| CliError::Run(e.to_string()))?;
        Ok(writeln!(buf)?)
    })
}

fn semigroup(p: SemigroupBattery, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let r = verify::criterion_6(seed)?;
    criterion_outputs(out, std::slice::from_ref(&r))?;
    println!("{}", r.summary_line());
    Ok(Outcome { summary: json!({ "pass": r.pass }), params: to_value(&p), unreliable: !r.pass })
}

fn coalescent(p: CoalescentParams, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    if p.sampler == GenealogySampler::TcoalInfinity {
        let draws = run_replicas(seed, p.replicas, |_, r| sample_tcoal_infinity(p.pair_rate, p.tolerance, r))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        out.write("results.csv", |buf| {
            let mut w = csv_writer(buf);
            w.write_record(["replica_id", "total_time"])?;
            for (i, t) in draws.iter().enumerate() {
                w.write_record([i.to_string(), format_f64(*t)])?;
            }
            w.flush()?;
            Ok(())
        })?;
        let est = Estimate::from_samples(&draws);
        return Ok(Outcome {
            summary: json!({ "total_time_mean": est.mean, "total_time_se": est.se, "exact_mean": 2.0 / p.pair_rate }),
            params: to_value(&p),
            unreliable: false,
        });
    }
    let trees = run_replicas(seed, p.replicas, |_, r| match p.sampler {
        GenealogySampler::Lookdown => sample_lookdown_genealogy(p.n, p.pair_rate, p.horizon, r),
        _ => sample_kingman(p.n, p.pair_rate, r),
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let pairs = (p.n * (p.n - 1) / 2) as f64;
    out.write("results.csv", |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["replica_id", "height", "t_12", "mean_pairwise_time"])?;
        for (i, t) in trees.iter().enumerate() {
            let m = t.pairwise_times();
            let mean = (0..p.n).flat_map(|a| (a + 1..p.n).map(move |b| (a, b))).map(|(a, b)| m[(a, b)]).sum::<f64>() / pairs;
            w.write_record([i.to_string(), format_f64(t.height()), format_f64(t.pairwise_time(0, 1)), format_f64(mean)])?;
        }
        w.flush()?;
        Ok(())
    })?;
    if p.trees {
        out.write("trees.jsonl", |buf| {
            for t in &trees {
                let v: Value = serde_json::from_str(&t.to_json()?).map_err(|e| CliError::Run(e.to_string()))?;
                writeln!(buf, "{v}")?;
            }
            Ok(())
        })?;
    }
    let heights: Vec<f64> = trees.iter().map(|t| t.height()).collect();
    let est = Estimate::from_samples(&heights);
    Ok(Outcome {
        summary: json!({
            "height_mean": est.mean,
            "height_se": est.se,
            "height_exact": 2.0 / p.pair_rate * (1.0 - 1.0 / p.n as f64),
        }),
        params: to_value(&p),
        unreliable: false,
    })
}

fn verify_all(p: VerifyParams, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    if let Some(bad) = p.only.iter().find(|id| !verify::CRITERIA.iter().any(|(c, _)| c == *id)) {
        return Err(CliError::Config(format!("unknown criterion {bad}")));
    }
    let results: Vec<CriterionResult> = verify::CRITERIA
        .iter()
        .filter(|(id, _)| p.only.is_empty() || p.only.contains(id))
        .map(|&(id, f)| {
            let r = verify::run_one(id, f, seed);
            println!("{}", r.summary_line());
            r
        })
        .collect();
    criterion_outputs(out, &results)?;
    let failed: Vec<u8> = results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    let seconds: Vec<Value> = results.iter().map(|r| json!({ "criterion": r.id, "seconds": r.seconds })).collect();
    Ok(Outcome {
        summary: json!({ "criteria": results.len(), "failed": failed, "timings": seconds }),
        params: to_value(&p),
        unreliable: !failed.is_empty(),
    })
}
