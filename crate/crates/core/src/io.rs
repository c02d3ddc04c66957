//! Plain-text formats: tensor batches, fits, simulated truths and
//! `key = value` configuration files.
//!
//! Numbers are written with Rust's shortest round-trip representation, so
//! writing and reading back reproduces every value bit for bit. Readers
//! reject malformed input with [`TmeError::Parse`] and never allocate more
//! than the input actually contains.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, TmeError};
use crate::simlab::SimTruth;
use crate::spd::{CovTriple, SpdMatrix};
use crate::tensor::{Mat, Tensor3};
use crate::tme::{ConvergenceTrace, IterationRecord, RandomEffectsMethod, TmeDesign, TmeFit};

pub const TENSOR_MAGIC: &str = "TME-TENSOR3 v1";
pub const FIT_MAGIC: &str = "TME-FIT v1";
pub const TRUTH_MAGIC: &str = "TME-TRUTH v1";
pub const TRACE_HEADER: &str = "loop,iter,idx_sigma,idx_psi,idx_omega,loglik,seconds,floored";

/// Line cursor that skips blank lines and remembers 1-based line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
            line: 0,
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        for (i, l) in self.inner.by_ref() {
            self.line = i + 1;
            let t = l.trim();
            if !t.is_empty() {
                return Ok(t);
            }
        }
        Err(TmeError::parse(self.line + 1, format!("unexpected end of input, expected {what}")))
    }

    fn err(&self, message: impl Into<String>) -> TmeError {
        TmeError::parse(self.line, message)
    }

    fn expect_end(&mut self) -> Result<()> {
        match self.next("") {
            Ok(extra) => Err(self.err(format!("trailing content `{}`", truncate(extra)))),
            Err(_) => Ok(()),
        }
    }

    fn usizes(&mut self, what: &str, count: usize) -> Result<Vec<usize>> {
        let line = self.next(what)?;
        let v: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| self.err(format!("bad integer `{}` in {what}", truncate(t)))))
            .collect::<Result<_>>()?;
        if v.len() != count {
            return Err(self.err(format!("{what}: expected {count} integers, found {}", v.len())));
        }
        Ok(v)
    }

    fn floats(&mut self, what: &str, count: usize) -> Result<Vec<f64>> {
        let line = self.next(what)?;
        let mut v = Vec::new();
        for t in line.split_whitespace() {
            if v.len() == count {
                return Err(self.err(format!("{what}: more than {count} values")));
            }
            let x: f64 = t
                .parse()
                .map_err(|_| self.err(format!("bad number `{}` in {what}", truncate(t))))?;
            if !x.is_finite() {
                return Err(self.err(format!("non-finite value in {what}")));
            }
            v.push(x);
        }
        if v.len() != count {
            return Err(self.err(format!("{what}: expected {count} values, found {}", v.len())));
        }
        Ok(v)
    }

    /// `NAME` followed by `rest` tokens.
    fn keyword(&mut self, name: &str) -> Result<Vec<&'a str>> {
        let line = self.next(name)?;
        let mut tok = line.split_whitespace();
        if tok.next() != Some(name) {
            return Err(self.err(format!("expected section {name}, found `{}`", truncate(line))));
        }
        Ok(tok.collect())
    }

    fn sized_keyword(&mut self, name: &str, count: usize) -> Result<Vec<usize>> {
        let rest = self.keyword(name)?;
        if rest.len() != count {
            return Err(self.err(format!("{name}: expected {count} sizes")));
        }
        rest.iter()
            .map(|t| t.parse::<usize>().map_err(|_| self.err(format!("bad size `{}` for {name}", truncate(t)))))
            .collect()
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        let shape = self.sized_keyword(name, 2)?;
        if shape != [rows, cols] {
            return Err(self.err(format!("{name}: expected {rows} x {cols}, found {} x {}", shape[0], shape[1])));
        }
        let mut data = Vec::new();
        for r in 0..rows {
            data.extend(self.floats(&format!("{name} row {}", r + 1), cols)?);
        }
        Ok(Mat::from_row_slice(rows, cols, &data))
    }

    fn spd(&mut self, name: &str, dim: usize) -> Result<SpdMatrix> {
        let m = self.matrix(name, dim, dim)?;
        SpdMatrix::new(m).map_err(|e| self.err(format!("{name}: {e}")))
    }

    fn tensor(&mut self, what: &str, dims: [usize; 3]) -> Result<Tensor3> {
        let len = checked_len(dims).ok_or_else(|| self.err("tensor size overflows"))?;
        let data = self.floats(what, len)?;
        Tensor3::new(dims, data).map_err(|e| self.err(e.to_string()))
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(40).collect()
}

fn checked_len(dims: [usize; 3]) -> Option<usize> {
    dims[0].checked_mul(dims[1])?.checked_mul(dims[2])
}

fn positive_dims(lines: &Lines, v: &[usize]) -> Result<()> {
    if v.contains(&0) {
        return Err(lines.err("dimensions must be positive"));
    }
    Ok(())
}

fn push_values(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn push_matrix(out: &mut String, name: &str, m: &Mat) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        push_values(out, &row);
    }
}

fn push_triple(out: &mut String, suffix: &str, t: &CovTriple) {
    for (name, f) in ["SIGMA", "PSI", "OMEGA"].iter().zip(t.factors()) {
        push_matrix(out, &format!("{name}_{suffix}"), f.values());
    }
}

fn read_triple(lines: &mut Lines, suffix: &str, dims: [usize; 3]) -> Result<CovTriple> {
    Ok(CovTriple::new(
        lines.spd(&format!("SIGMA_{suffix}"), dims[0])?,
        lines.spd(&format!("PSI_{suffix}"), dims[1])?,
        lines.spd(&format!("OMEGA_{suffix}"), dims[2])?,
    ))
}

fn read_design(lines: &mut Lines, dims: [usize; 3], fixed: [usize; 3], random: [usize; 3]) -> Result<TmeDesign> {
    let a = [0, 1, 2]
        .map(|k| lines.matrix(&format!("A{}", k + 1), dims[k], fixed[k]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let b = [0, 1, 2]
        .map(|k| lines.matrix(&format!("B{}", k + 1), dims[k], random[k]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let a: [Mat; 3] = a.try_into().expect("three modes");
    let b: [Mat; 3] = b.try_into().expect("three modes");
    TmeDesign::new(a, b).map_err(|e| lines.err(e.to_string()))
}

fn push_design(out: &mut String, d: &TmeDesign) {
    for (k, m) in d.a().iter().enumerate() {
        push_matrix(out, &format!("A{}", k + 1), m);
    }
    for (k, m) in d.b().iter().enumerate() {
        push_matrix(out, &format!("B{}", k + 1), m);
    }
}

fn check_magic(lines: &mut Lines, magic: &str) -> Result<()> {
    let first = lines.next("header")?;
    if first != magic {
        return Err(lines.err(format!("expected header `{magic}`, found `{}`", truncate(first))));
    }
    Ok(())
}

/// `TME-TENSOR3 v1`, then `J K L N`, then one line of `J K L` values per
/// sample in canonical (mode-1 fastest) order.
pub fn format_tensor_batch(samples: &[Tensor3]) -> Result<String> {
    let first = samples
        .first()
        .ok_or_else(|| TmeError::Argument("cannot write an empty tensor batch".into()))?;
    let [j, k, l] = first.dims();
    let mut out = format!("{TENSOR_MAGIC}\n{j} {k} {l} {}\n", samples.len());
    for s in samples {
        if s.dims() != first.dims() {
            return Err(TmeError::DimensionMismatch(format!("{:?} vs {:?}", s.dims(), first.dims())));
        }
        push_values(&mut out, s.data());
    }
    Ok(out)
}

pub fn parse_tensor_batch(text: &str) -> Result<Vec<Tensor3>> {
    let mut lines = Lines::new(text);
    check_magic(&mut lines, TENSOR_MAGIC)?;
    let h = lines.usizes("dimension line `J K L N`", 4)?;
    positive_dims(&lines, &h)?;
    let dims = [h[0], h[1], h[2]];
    let mut samples = Vec::new();
    for i in 0..h[3] {
        samples.push(lines.tensor(&format!("sample {}", i + 1), dims)?);
    }
    lines.expect_end()?;
    Ok(samples)
}

/// One CSV row per iteration of both loops.
pub fn format_trace_csv(trace1: &ConvergenceTrace, trace2: &ConvergenceTrace) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for (loop_index, t) in [(1, trace1), (2, trace2)] {
        for r in &t.records {
            let _ = writeln!(
                out,
                "{loop_index},{},{},{},{},{},{},{}",
                r.iter,
                r.index[0],
                r.index[1],
                r.index[2],
                r.loglik,
                r.seconds,
                u8::from(r.floored)
            );
        }
    }
    out
}

fn method_name(m: RandomEffectsMethod) -> &'static str {
    match m {
        RandomEffectsMethod::Em => "em",
        RandomEffectsMethod::Projection => "projection",
    }
}

/// Fit file: estimates, covariances, design, predicted random effects and
/// the iteration trace.
pub fn format_fit(fit: &TmeFit) -> String {
    let [j, k, l] = fit.design.dims();
    let [p1, q1, r1] = fit.design.fixed_ranks();
    let [p2, q2, r2] = fit.design.random_ranks();
    let mut out = format!("{FIT_MAGIC}\n{j} {k} {l} {p1} {q1} {r1} {p2} {q2} {r2} {}\n", fit.r_hat.len());
    let _ = writeln!(out, "METHOD {}", method_name(fit.method));
    let _ = writeln!(out, "LOGLIK {}", fit.loglik);
    let _ = writeln!(
        out,
        "CONVERGED {} {}",
        u8::from(fit.trace1.converged),
        u8::from(fit.trace2.converged)
    );
    out.push_str("F_HAT\n");
    push_values(&mut out, fit.f_hat.data());
    push_triple(&mut out, "I", &fit.total);
    push_triple(&mut out, "E", &fit.residual);
    push_triple(&mut out, "R", &fit.random);
    push_design(&mut out, &fit.design);
    out.push_str("R_HAT\n");
    for r in &fit.r_hat {
        push_values(&mut out, r.data());
    }
    let trace = format_trace_csv(&fit.trace1, &fit.trace2);
    let _ = writeln!(out, "TRACE {}", trace.lines().count() - 1);
    out.push_str(&trace);
    out
}

fn flag(lines: &Lines, t: &str) -> Result<bool> {
    match t {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(lines.err(format!("expected 0 or 1, found `{}`", truncate(t)))),
    }
}

fn finite(lines: &Lines, t: &str, what: &str) -> Result<f64> {
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(lines.err(format!("bad {what} `{}`", truncate(t)))),
    }
}

pub fn parse_fit(text: &str) -> Result<TmeFit> {
    let mut lines = Lines::new(text);
    check_magic(&mut lines, FIT_MAGIC)?;
    let h = lines.usizes("dimension line `J K L P1 Q1 R1 P2 Q2 R2 N`", 10)?;
    positive_dims(&lines, &h[..9])?;
    let dims = [h[0], h[1], h[2]];
    let fixed = [h[3], h[4], h[5]];
    let random = [h[6], h[7], h[8]];
    let method = match lines.keyword("METHOD")?.as_slice() {
        ["em"] => RandomEffectsMethod::Em,
        ["projection"] => RandomEffectsMethod::Projection,
        _ => return Err(lines.err("METHOD must be `em` or `projection`")),
    };
    let loglik = match lines.keyword("LOGLIK")?.as_slice() {
        [v] => finite(&lines, v, "log-likelihood")?,
        _ => return Err(lines.err("LOGLIK takes one value")),
    };
    let converged = match lines.keyword("CONVERGED")?.as_slice() {
        [a, b] => [flag(&lines, a)?, flag(&lines, b)?],
        _ => return Err(lines.err("CONVERGED takes two flags")),
    };
    if !lines.keyword("F_HAT")?.is_empty() {
        return Err(lines.err("F_HAT takes no arguments"));
    }
    let f_hat = lines.tensor("F_HAT values", fixed)?;
    let total = read_triple(&mut lines, "I", dims)?;
    let residual = read_triple(&mut lines, "E", dims)?;
    let random_cov = read_triple(&mut lines, "R", random)?;
    let design = read_design(&mut lines, dims, fixed, random)?;
    if !lines.keyword("R_HAT")?.is_empty() {
        return Err(lines.err("R_HAT takes no arguments"));
    }
    let mut r_hat = Vec::new();
    for i in 0..h[9] {
        r_hat.push(lines.tensor(&format!("R_HAT sample {}", i + 1), random)?);
    }
    let rows = lines.sized_keyword("TRACE", 1)?[0];
    if lines.next("trace header")? != TRACE_HEADER {
        return Err(lines.err(format!("expected trace header `{TRACE_HEADER}`")));
    }
    let mut trace1 = ConvergenceTrace {
        records: Vec::new(),
        converged: converged[0],
    };
    let mut trace2 = ConvergenceTrace {
        records: Vec::new(),
        converged: converged[1],
    };
    for _ in 0..rows {
        let line = lines.next("trace row")?;
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(lines.err(format!("trace row has {} fields, expected 8", f.len())));
        }
        let iter: usize = f[1].parse().map_err(|_| lines.err("bad iteration number"))?;
        let rec = IterationRecord {
            iter,
            index: [
                finite(&lines, f[2], "index")?,
                finite(&lines, f[3], "index")?,
                finite(&lines, f[4], "index")?,
            ],
            loglik: finite(&lines, f[5], "log-likelihood")?,
            seconds: finite(&lines, f[6], "seconds")?,
            floored: flag(&lines, f[7])?,
        };
        match f[0] {
            "1" => trace1.records.push(rec),
            "2" => trace2.records.push(rec),
            _ => return Err(lines.err("trace loop must be 1 or 2")),
        }
    }
    lines.expect_end()?;
    Ok(TmeFit {
        design,
        f_hat,
        total,
        residual,
        random: random_cov,
        r_hat,
        trace1,
        trace2,
        loglik,
        method,
    })
}

/// Truth file: design, fixed core and both covariance triples. The
/// samples go to a separate tensor batch.
pub fn format_truth(truth: &SimTruth) -> String {
    let [j, k, l] = truth.design.dims();
    let [p1, q1, r1] = truth.design.fixed_ranks();
    let [p2, q2, r2] = truth.design.random_ranks();
    let mut out = format!("{TRUTH_MAGIC}\n{j} {k} {l} {p1} {q1} {r1} {p2} {q2} {r2}\n");
    out.push_str("F\n");
    push_values(&mut out, truth.f.data());
    push_triple(&mut out, "R", &truth.random);
    push_triple(&mut out, "E", &truth.residual);
    push_design(&mut out, &truth.design);
    out
}

/// Reads a truth file; the returned truth has no samples.
pub fn parse_truth(text: &str) -> Result<SimTruth> {
    let mut lines = Lines::new(text);
    check_magic(&mut lines, TRUTH_MAGIC)?;
    let h = lines.usizes("dimension line `J K L P1 Q1 R1 P2 Q2 R2`", 9)?;
    positive_dims(&lines, &h)?;
    let dims = [h[0], h[1], h[2]];
    let fixed = [h[3], h[4], h[5]];
    let random = [h[6], h[7], h[8]];
    if !lines.keyword("F")?.is_empty() {
        return Err(lines.err("F takes no arguments"));
    }
    let f = lines.tensor("F values", fixed)?;
    let random_cov = read_triple(&mut lines, "R", random)?;
    let residual = read_triple(&mut lines, "E", dims)?;
    let design = read_design(&mut lines, dims, fixed, random)?;
    lines.expect_end()?;
    Ok(SimTruth {
        design,
        f,
        random: random_cov,
        residual,
        samples: Vec::new(),
    })
}

/// Flat `key = value` pairs; `#` starts a comment, blank lines are ignored,
/// keys are `[A-Za-z0-9_-]+` and may appear once.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TmeError::parse(i + 1, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(TmeError::parse(i + 1, format!("invalid key `{}`", truncate(key))));
        }
        let value = value.trim();
        if value.is_empty() {
            return Err(TmeError::parse(i + 1, format!("empty value for `{key}`")));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(TmeError::parse(i + 1, format!("duplicate key `{key}`")));
        }
    }
    Ok(out)
}

pub fn format_config(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Reads a file as UTF-8 text; invalid UTF-8 is a parse error.
pub fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    String::from_utf8(bytes).map_err(|e| TmeError::parse(0, format!("not UTF-8: {e}")))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
