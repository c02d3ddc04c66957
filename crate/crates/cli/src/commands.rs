use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tme_core::io;
use tme_core::simlab::{cell_rng, gen_truth, run_study, SimConfig, StudySpec};
use tme_core::tme::{existence_check, fit_tme, DesignSpec, ExistenceVerdict, ResidualStructure, SufficientRule, TmeFit};
use tme_core::{Mat, TmeError};

use crate::settings::{parse_triple, Settings};
use crate::CliError;

const STUDY_SIZES: [usize; 5] = [50, 100, 200, 400, 800];

fn general() -> [ResidualStructure; 3] {
    [ResidualStructure::General, ResidualStructure::General, ResidualStructure::General]
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, CliError> {
    io::read_text(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Preset truth recipe with config-file and flag overrides applied.
pub fn sim_config(settings: &Settings, preset: Option<&str>, n: Option<usize>) -> Result<SimConfig, CliError> {
    let preset = preset.or(settings.file_value("preset")).unwrap_or("study");
    let mut cfg = match preset {
        "study" => SimConfig::simulation_study(),
        "raman" => SimConfig::raman_surrogate(),
        other => return Err(CliError::Config(format!("unknown preset `{other}` (study or raman)"))),
    };
    cfg.fixed_ranks = settings.ranks(cfg.fixed_ranks)?;
    cfg.random_ranks = settings.random_ranks(cfg.random_ranks)?;
    if let Some(n) = n.or(settings.get("n")?) {
        cfg.n = n;
    }
    for (key, slot) in [
        ("fixed_scale", &mut cfg.fixed_scale),
        ("noise_variance", &mut cfg.noise_variance),
        ("random_variance", &mut cfg.random_variance),
    ] {
        if let Some(v) = settings.get(key)? {
            *slot = v;
        }
    }
    cfg.seed = settings.seed()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulate(settings: &Settings, preset: Option<&str>, n: Option<usize>) -> Result<(), CliError> {
    let cfg = sim_config(settings, preset, n)?;
    let out = settings.out_dir();
    prepare_out_dir(&out)?;
    let truth = gen_truth(&cfg, &mut cell_rng(cfg.seed, cfg.n, 0))?;
    write(&out.join("samples.txt"), &io::format_tensor_batch(&truth.samples)?)?;
    write(&out.join("truth.txt"), &io::format_truth(&truth))?;
    println!(
        "wrote {} samples of {}x{}x{} to {}",
        cfg.n,
        cfg.dims[0],
        cfg.dims[1],
        cfg.dims[2],
        out.display()
    );
    Ok(())
}

fn describe(verdict: ExistenceVerdict) -> &'static str {
    match verdict {
        ExistenceVerdict::Ok(SufficientRule::FullSample) => "ok (N >= JKL)",
        ExistenceVerdict::Ok(SufficientRule::DiagonalSigma) => "ok (diagonal Sigma and N >= max(KL, bound))",
        ExistenceVerdict::SufficientUnmet => "warning: existence not guaranteed",
        ExistenceVerdict::NecessaryViolated => "violated: the MLE cannot exist",
    }
}

fn gate(dims: [usize; 3], n: usize, structure: &ResidualStructure) -> Result<(), CliError> {
    let report = existence_check(dims, n, structure);
    println!(
        "existence: N = {n}, necessary bound = {}, {}",
        report.necessary_bound,
        describe(report.verdict)
    );
    if report.is_violated() {
        return Err(CliError::Existence(format!(
            "N = {n} is below the necessary bound {} for {}x{}x{}",
            report.necessary_bound, dims[0], dims[1], dims[2]
        )));
    }
    Ok(())
}

pub fn fit(settings: &Settings, input: &Path) -> Result<(), CliError> {
    let samples = io::parse_tensor_batch(&read(input)?).map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
    let config = settings.fit_config(general())?;
    let dims = samples[0].dims();
    let fixed = settings.ranks([8, 3, 3])?;
    let random = settings.random_ranks([3, 2, 2])?;
    let out = settings.out_dir();
    prepare_out_dir(&out)?;
    gate(dims, samples.len(), &config.residual_structure[0])?;
    let fit = fit_tme(&samples, &DesignSpec::auto(fixed, random), &config)?;
    write(&out.join("fit.txt"), &io::format_fit(&fit))?;
    write(&out.join("trace.csv"), &io::format_trace_csv(&fit.trace1, &fit.trace2))?;
    println!("loglik = {}", fit.loglik);
    for (name, t) in [("loop 1", &fit.trace1), ("loop 2", &fit.trace2)] {
        if let Some(r) = t.last() {
            println!(
                "{name}: {} iterations, final indices {} {} {}, converged = {}",
                t.iterations(),
                r.index[0],
                r.index[1],
                r.index[2],
                t.converged
            );
        }
    }
    if fit.converged() {
        Ok(())
    } else {
        Err(CliError::NotConverged)
    }
}

pub fn benchmark(settings: &Settings, preset: Option<&str>) -> Result<(), CliError> {
    let base = sim_config(settings, preset, None)?;
    let structure = match base.noise {
        tme_core::simlab::NoiseRecipe::Raman { .. } => [
            ResidualStructure::Diagonal,
            ResidualStructure::General,
            ResidualStructure::General,
        ],
        tme_core::simlab::NoiseRecipe::Generic => general(),
    };
    let spec = StudySpec {
        sizes: settings.sizes(&STUDY_SIZES)?,
        replicates: settings.replicates(base.replicates)?,
        methods: settings.methods()?,
        fit: settings.fit_config(structure)?,
        base,
    };
    spec.validate()?;
    let out = settings.out_dir();
    prepare_out_dir(&out)?;
    let report = run_study(&spec)?;
    write(&out.join("table2.csv"), &report.table2_csv())?;
    let table3 = report.table3_csv();
    write(&out.join("table3.csv"), &table3)?;
    write(&out.join("replicates.csv"), &report.replicates_csv())?;
    write(&out.join("timings.csv"), &report.timings_csv())?;
    print!("{table3}");
    let failures: usize = report.rows.iter().map(|r| r.failures).sum();
    if failures > 0 {
        eprintln!("{failures} replicate cells recorded errors, see replicates.csv");
    }
    Ok(())
}

fn diag_range(m: &Mat) -> f64 {
    let d = m.diagonal();
    d.max() - d.min()
}

fn entry(m: &Mat, r: usize, c: usize) -> String {
    if r < m.nrows() && c < m.ncols() {
        format!("{}", m[(r, c)])
    } else {
        "NA".into()
    }
}

/// One CSV row of covariance diagnostics for a fit.
pub fn report_row(label: &str, fit: &TmeFit) -> String {
    let (psi_r, psi_e) = (fit.random.psi.values(), fit.residual.psi.values());
    let (omega_r, omega_e) = (fit.random.omega.values(), fit.residual.omega.values());
    format!(
        "{label},{},{},{},{},{},{},{},{}\n",
        diag_range(psi_r),
        diag_range(psi_e),
        diag_range(omega_r),
        diag_range(omega_e),
        entry(psi_r, 0, 1),
        entry(psi_r, 0, 2),
        entry(omega_r, 0, 1),
        entry(omega_r, 0, 2)
    )
}

pub const REPORT_HEADER: &str = "label,psi_r_diag_range,psi_e_diag_range,omega_r_diag_range,omega_e_diag_range,psi_r_12,psi_r_13,omega_r_12,omega_r_13";

pub fn report(settings: &Settings, fits: &[PathBuf], labels: Option<&str>) -> Result<(), CliError> {
    let labels: Vec<String> = match labels {
        Some(l) => {
            let v: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
            if v.len() != fits.len() {
                return Err(CliError::Config(format!("{} labels for {} fit files", v.len(), fits.len())));
            }
            v
        }
        None => fits
            .iter()
            .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()))
            .collect(),
    };
    if labels.iter().any(|l| l.contains([',', '\n'])) {
        return Err(CliError::Config("labels may not contain commas or newlines".into()));
    }
    let mut csv = format!("{REPORT_HEADER}\n");
    for (path, label) in fits.iter().zip(&labels) {
        let fit = io::parse_fit(&read(path)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        csv.push_str(&report_row(label, &fit));
    }
    let out = settings.out_dir();
    prepare_out_dir(&out)?;
    write(&out.join("report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn check(settings: &Settings, input: Option<&Path>, dims: Option<&str>, n: Option<usize>) -> Result<(), CliError> {
    let (dims, n) = match (input, dims, n) {
        (Some(path), None, None) => {
            let samples =
                io::parse_tensor_batch(&read(path)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            (samples[0].dims(), samples.len())
        }
        (None, Some(d), Some(n)) => (parse_triple("dims", d)?, n),
        _ => return Err(CliError::Config("check needs either an input file or both --dims and --n".into())),
    };
    if dims.contains(&0) {
        return Err(CliError::Config("dimensions must be positive".into()));
    }
    let config = settings.fit_config(general())?;
    let mut msg = String::new();
    let mut feasible = true;
    if settings.ranks_given() {
        let fixed = settings.ranks(dims.map(|d| d.min(8)))?;
        let random = settings.random_ranks(fixed.map(|r| r.min(3)))?;
        for axis in 0..3 {
            if fixed[axis] > dims[axis] || random[axis] > fixed[axis] || random[axis] == 0 {
                feasible = false;
                let _ = write!(
                    msg,
                    " mode {}: need 1 <= random rank {} <= fixed rank {} <= dim {};",
                    axis + 1,
                    random[axis],
                    fixed[axis],
                    dims[axis]
                );
            }
        }
        println!(
            "ranks {:?} / {:?}: {}",
            fixed,
            random,
            if feasible { "identifiable (orthonormal designs, nested B)" } else { "infeasible" }
        );
    }
    gate(dims, n, &config.residual_structure[0])?;
    if !feasible {
        return Err(CliError::Config(format!("infeasible ranks:{msg}")));
    }
    Ok(())
}

impl From<TmeError> for CliError {
    fn from(e: TmeError) -> Self {
        match e {
            TmeError::Argument(_)
            | TmeError::DimensionMismatch(_)
            | TmeError::RankExceedsDimension { .. }
            | TmeError::NoAdmissibleRank { .. } => CliError::Config(e.to_string()),
            TmeError::Parse { .. } | TmeError::Io(_) => CliError::Io(e.to_string()),
            TmeError::ExistenceViolated { .. } => CliError::Existence(e.to_string()),
            TmeError::NotPositiveDefinite(_)
            | TmeError::RankDeficient { .. }
            | TmeError::NonFiniteLikelihood { .. }
            | TmeError::ZeroNormTruth => CliError::Numerical(e.to_string()),
        }
    }
}
