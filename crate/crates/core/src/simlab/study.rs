//! Replication harness: fresh truths per (sample size, replicate), fits of
//! each method, per-replicate records and per-size summaries.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::benchmarks::{fit_td, fit_tfe, sample_mses, TmePredictor};
use crate::error::{Result, TmeError};
use crate::simlab::config::SimConfig;
use crate::simlab::metrics::{metric_d_fixed, metric_d_triple};
use crate::simlab::truth::{gen_truth, SimTruth};
use crate::tme::{fit_tme, parameter_count, DesignSpec, PredictionMode, TmeConfig, TmeDesign};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Tme,
    Tfe,
    Td,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Tme, Method::Tfe, Method::Td];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tme => "tme",
            Method::Tfe => "tfe",
            Method::Td => "td",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Method {
    type Err = TmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tme" => Ok(Method::Tme),
            "tfe" => Ok(Method::Tfe),
            "td" => Ok(Method::Td),
            other => Err(TmeError::Argument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudySpec {
    /// Truth recipe; its `n` and `replicates` are replaced by the grid.
    pub base: SimConfig,
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub fit: TmeConfig,
}

impl StudySpec {
    /// 30 x 5 x 5 study at N in {50, 100, 200, 400, 800}, all three methods.
    pub fn simulation_study() -> Self {
        StudySpec {
            base: SimConfig::simulation_study(),
            sizes: vec![50, 100, 200, 400, 800],
            replicates: 20,
            methods: Method::ALL.to_vec(),
            fit: TmeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(TmeError::Argument("sample sizes must be a nonempty list of positive values".into()));
        }
        if self.replicates == 0 {
            return Err(TmeError::Argument("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(TmeError::Argument("at least one method is required".into()));
        }
        self.fit.validate()?;
        SimConfig {
            n: self.sizes[0],
            replicates: self.replicates,
            ..self.base.clone()
        }
        .validate()
    }
}

/// Seeded generator for one cell of the study grid.
pub fn cell_rng(seed: u64, n: usize, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 32) | replicate as u64);
    rng
}

/// Mean, standard deviation and count of per-sample MSE values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseStats {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

impl MseStats {
    pub fn from_values(v: &[f64]) -> Self {
        let s = Summary::of(v);
        MseStats {
            mean: s.mean,
            sd: s.sd,
            count: v.len(),
        }
    }

    /// Pooled statistics of the concatenated samples.
    pub fn pool(parts: &[MseStats]) -> Option<MseStats> {
        let count: usize = parts.iter().map(|p| p.count).sum();
        if count == 0 {
            return None;
        }
        let mean = parts.iter().map(|p| p.mean * p.count as f64).sum::<f64>() / count as f64;
        let ss: f64 = parts
            .iter()
            .map(|p| p.sd * p.sd * (p.count.max(1) - 1) as f64 + p.count as f64 * (p.mean - mean).powi(2))
            .sum();
        let sd = if count > 1 { (ss / (count - 1) as f64).sqrt() } else { 0.0 };
        Some(MseStats { mean, sd, count })
    }
}

/// D metrics of a TME fit: fixed core, the three total factors, the three
/// residual factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DMetrics {
    pub f: f64,
    pub total: [f64; 3],
    pub residual: [f64; 3],
}

impl DMetrics {
    pub const NAMES: [&'static str; 7] = ["d_f", "d_sigma_i", "d_psi_i", "d_omega_i", "d_sigma_e", "d_psi_e", "d_omega_e"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.f,
            self.total[0],
            self.total[1],
            self.total[2],
            self.residual[0],
            self.residual[1],
            self.residual[2],
        ]
    }
}

/// Everything measured for one (sample size, replicate) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateRecord {
    pub n: usize,
    pub replicate: usize,
    /// First error met in this cell; later methods are still attempted.
    pub error: Option<String>,
    pub loop1_iterations: Option<usize>,
    pub loop2_iterations: Option<usize>,
    pub converged: Option<bool>,
    pub d: Option<DMetrics>,
    /// Indexed by [`Method`].
    pub mse: [Option<MseStats>; 3],
    /// Mean wall seconds per loop-1 and loop-2 iteration of the TME fit.
    pub seconds_per_iter: Option<[f64; 2]>,
    /// Wall seconds per method fit.
    pub fit_seconds: [Option<f64>; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    /// Mean and sample standard deviation (0 for fewer than two values,
    /// NaN for none).
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Summary { mean: f64::NAN, sd: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, sd }
    }
}

/// Per-sample-size aggregate of the replicate records.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub loop1_iterations: Summary,
    pub loop2_iterations: Summary,
    pub d: [Summary; 7],
    pub seconds_per_iter: [Summary; 2],
    pub mse: [Option<MseStats>; 3],
    pub fit_seconds: [Summary; 3],
    /// Replicates where the TME mean MSE is below the TFE one.
    pub tme_better: usize,
    /// Replicates where both were scored.
    pub compared: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyReport {
    pub methods: Vec<Method>,
    pub parameter_count: usize,
    pub records: Vec<ReplicateRecord>,
    pub rows: Vec<StudyRow>,
}

fn run_cell(spec: &StudySpec, n: usize, replicate: usize) -> ReplicateRecord {
    let mut rec = ReplicateRecord {
        n,
        replicate,
        error: None,
        loop1_iterations: None,
        loop2_iterations: None,
        converged: None,
        d: None,
        mse: [None; 3],
        seconds_per_iter: None,
        fit_seconds: [None; 3],
    };
    let cfg = SimConfig {
        n,
        replicates: 1,
        ..spec.base.clone()
    };
    let truth = match gen_truth(&cfg, &mut cell_rng(spec.base.seed, n, replicate)) {
        Ok(t) => t,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let design = DesignSpec::auto(cfg.fixed_ranks, cfg.random_ranks);
    for &method in &spec.methods {
        let start = Instant::now();
        let outcome = match method {
            Method::Tme => score_tme(&truth, &design, spec, &mut rec),
            Method::Tfe => fit_tfe(&truth.samples, &design, &spec.fit).and_then(|fit| sample_mses(&fit, &truth.samples)),
            Method::Td => fit_td(&truth.samples, cfg.fixed_ranks).and_then(|fit| sample_mses(&fit, &truth.samples)),
        };
        rec.fit_seconds[method.index()] = Some(start.elapsed().as_secs_f64());
        match outcome {
            Ok(m) => rec.mse[method.index()] = Some(MseStats::from_values(&m)),
            Err(e) => {
                if rec.error.is_none() {
                    rec.error = Some(format!("{}: {e}", method.name()));
                }
            }
        }
    }
    rec
}

fn score_tme(truth: &SimTruth, design: &DesignSpec, spec: &StudySpec, rec: &mut ReplicateRecord) -> Result<Vec<f64>> {
    let fit = fit_tme(&truth.samples, design, &spec.fit)?;
    rec.loop1_iterations = Some(fit.trace1.iterations());
    rec.loop2_iterations = Some(fit.trace2.iterations());
    rec.converged = Some(fit.converged());
    rec.seconds_per_iter = Some([fit.trace1.mean_seconds(), fit.trace2.mean_seconds()]);
    let norm = spec.fit.normalization;
    rec.d = Some(DMetrics {
        f: metric_d_fixed(&fit.f_hat, fit.design.a(), &truth.f, truth.design.a())?,
        total: metric_d_triple(&fit.total, &truth.total()?, norm)?,
        residual: metric_d_triple(&fit.residual, &truth.residual, norm)?,
    });
    sample_mses(
        &TmePredictor {
            fit: &fit,
            mode: PredictionMode::WithRandomEffects,
        },
        &truth.samples,
    )
}

fn aggregate(n: usize, records: &[&ReplicateRecord]) -> StudyRow {
    let collect = |f: &dyn Fn(&ReplicateRecord) -> Option<f64>| -> Summary {
        Summary::of(&records.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
    };
    let d = std::array::from_fn(|i| collect(&|r| r.d.map(|d| d.values()[i])));
    let mse = std::array::from_fn(|m| MseStats::pool(&records.iter().filter_map(|r| r.mse[m]).collect::<Vec<_>>()));
    let compared: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| Some((r.mse[Method::Tme.index()]?.mean, r.mse[Method::Tfe.index()]?.mean)))
        .collect();
    StudyRow {
        n,
        replicates: records.len(),
        failures: records.iter().filter(|r| r.error.is_some()).count(),
        loop1_iterations: collect(&|r| r.loop1_iterations.map(|v| v as f64)),
        loop2_iterations: collect(&|r| r.loop2_iterations.map(|v| v as f64)),
        d,
        seconds_per_iter: std::array::from_fn(|i| collect(&|r| r.seconds_per_iter.map(|s| s[i]))),
        mse,
        fit_seconds: std::array::from_fn(|m| collect(&|r| r.fit_seconds[m])),
        tme_better: compared.iter().filter(|(a, b)| a < b).count(),
        compared: compared.len(),
    }
}

/// Runs every (size, replicate) cell in parallel. Each cell draws its truth
/// from its own seeded stream, so the records do not depend on scheduling.
/// Fit failures are recorded in the cell and do not stop the study.
pub fn run_study(spec: &StudySpec) -> Result<StudyReport> {
    spec.validate()?;
    let cells: Vec<(usize, usize)> = spec
        .sizes
        .iter()
        .flat_map(|&n| (0..spec.replicates).map(move |r| (n, r)))
        .collect();
    let records: Vec<ReplicateRecord> = cells.par_iter().map(|&(n, r)| run_cell(spec, n, r)).collect();
    let rows = summarize(&spec.sizes, &records);
    let design_shape = truth_shape(&spec.base)?;
    Ok(StudyReport {
        methods: spec.methods.clone(),
        parameter_count: parameter_count(&design_shape),
        records,
        rows,
    })
}

/// Recomputes the per-size rows from replicate records.
pub fn summarize(sizes: &[usize], records: &[ReplicateRecord]) -> Vec<StudyRow> {
    sizes
        .iter()
        .map(|&n| aggregate(n, &records.iter().filter(|r| r.n == n).collect::<Vec<_>>()))
        .collect()
}

fn truth_shape(cfg: &SimConfig) -> Result<TmeDesign> {
    let a = [0, 1, 2].map(|k| crate::tensor::Mat::identity(cfg.dims[k], cfg.fixed_ranks[k]));
    TmeDesign::from_leading_columns(a, cfg.random_ranks)
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".into()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

/// Expected ordering of TME and TFE mean MSE at sample size `n`.
pub fn expected_direction(n: usize, parameter_count: usize) -> &'static str {
    if n > parameter_count {
        "TME<TFE"
    } else {
        "TFE<TME"
    }
}

impl StudyRow {
    /// PASS / FAIL for the expected TME-vs-TFE ordering, NA if either is
    /// missing. Above the parameter count TME must also win in at least
    /// four out of five replicates.
    pub fn direction(&self, parameter_count: usize) -> &'static str {
        let (Some(tme), Some(tfe)) = (self.mse[Method::Tme.index()], self.mse[Method::Tfe.index()]) else {
            return "NA";
        };
        let ok = if self.n > parameter_count {
            tme.mean < tfe.mean && self.tme_better * 5 >= self.compared * 4
        } else {
            tfe.mean < tme.mean
        };
        if ok {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

impl StudyReport {
    pub fn row(&self, n: usize) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.n == n)
    }

    /// Iteration counts and D metrics per sample size.
    pub fn table2_csv(&self) -> String {
        let mut out = String::from("n,replicates,failures,iter1_mean,iter1_sd,iter2_mean,iter2_sd");
        for name in DMetrics::NAMES {
            let _ = write!(out, ",{name}_mean,{name}_sd");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                r.n,
                r.replicates,
                r.failures,
                num(r.loop1_iterations.mean),
                num(r.loop1_iterations.sd),
                num(r.loop2_iterations.mean),
                num(r.loop2_iterations.sd)
            );
            for s in &r.d {
                let _ = write!(out, ",{},{}", num(s.mean), num(s.sd));
            }
            out.push('\n');
        }
        out
    }

    /// MSE per method and the TME-vs-TFE direction check.
    pub fn table3_csv(&self) -> String {
        let mut out = String::from("n");
        for m in Method::ALL {
            let _ = write!(out, ",{0}_mse_mean,{0}_mse_sd", m.name());
        }
        out.push_str(",tme_better,compared,parameter_count,expected,direction\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.n);
            for m in Method::ALL {
                match r.mse[m.index()] {
                    Some(s) => {
                        let _ = write!(out, ",{},{}", num(s.mean), num(s.sd));
                    }
                    None => out.push_str(",NA,NA"),
                }
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{}",
                r.tme_better,
                r.compared,
                self.parameter_count,
                expected_direction(r.n, self.parameter_count),
                r.direction(self.parameter_count)
            );
        }
        out
    }

    /// One line per replicate, without wall-clock columns.
    pub fn replicates_csv(&self) -> String {
        let mut out = String::from("n,replicate,error,iter1,iter2,converged");
        for name in DMetrics::NAMES {
            let _ = write!(out, ",{name}");
        }
        for m in Method::ALL {
            let _ = write!(out, ",{0}_mse_mean,{0}_mse_sd,{0}_mse_count", m.name());
        }
        out.push('\n');
        for r in &self.records {
            let error = r.error.as_deref().map_or("".to_string(), |e| e.replace([',', '\n', '\r'], ";"));
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.n,
                r.replicate,
                error,
                opt(r.loop1_iterations),
                opt(r.loop2_iterations),
                opt(r.converged)
            );
            match r.d {
                Some(d) => {
                    for v in d.values() {
                        let _ = write!(out, ",{}", num(v));
                    }
                }
                None => out.push_str(&",NA".repeat(7)),
            }
            for m in r.mse {
                match m {
                    Some(s) => {
                        let _ = write!(out, ",{},{},{}", num(s.mean), num(s.sd), s.count);
                    }
                    None => out.push_str(",NA,NA,NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Wall-clock columns, kept apart so the other tables are reproducible
    /// byte for byte.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("n,time1_mean,time1_sd,time2_mean,time2_sd");
        for m in Method::ALL {
            let _ = write!(out, ",{}_seconds_mean", m.name());
        }
        out.push('\n');
        for r in &self.rows {
            let [t1, t2] = r.seconds_per_iter;
            let _ = write!(out, "{},{},{},{},{}", r.n, num(t1.mean), num(t1.sd), num(t2.mean), num(t2.sd));
            for s in &r.fit_seconds {
                let _ = write!(out, ",{}", num(s.mean));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(table: &str, mut w: W) -> io::Result<()> {
        w.write_all(table.as_bytes())
    }
}
