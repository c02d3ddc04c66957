//! Merging command-line flags, a `key = value` config file and defaults.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use tme_core::simlab::Method;
use tme_core::tme::{Normalization, RandomEffectsMethod, ResidualStructure, TmeConfig};

use crate::CliError;

/// Flags shared by every subcommand. Each may also be given in the config
/// file under the same name (dashes or underscores); flags win.
#[derive(Args, Debug, Default, Clone)]
pub struct SharedArgs {
    /// Root seed; a random one is drawn and logged when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Fixed-effect core ranks `P1,Q1,R1`.
    #[arg(long, global = true)]
    pub ranks: Option<String>,
    /// Random-effect core ranks `P2,Q2,R2`.
    #[arg(long, global = true)]
    pub random_ranks: Option<String>,
    #[arg(long, global = true)]
    pub tol1: Option<f64>,
    #[arg(long, global = true)]
    pub tol2: Option<f64>,
    #[arg(long, global = true)]
    pub max_iter1: Option<usize>,
    #[arg(long, global = true)]
    pub max_iter2: Option<usize>,
    /// `general`, `diagonal` or `isotropic`, once for all modes or as three
    /// comma-separated values.
    #[arg(long, global = true)]
    pub residual_structure: Option<String>,
    /// `trace` or `det`.
    #[arg(long, global = true)]
    pub normalization: Option<String>,
    /// `em` or `projection`.
    #[arg(long, global = true)]
    pub random_effects: Option<String>,
    #[arg(long, global = true)]
    pub replicates: Option<usize>,
    /// Sample sizes `50,100,...`.
    #[arg(long, global = true)]
    pub sizes: Option<String>,
    /// Subset of `tme,tfe,td`.
    #[arg(long, global = true)]
    pub methods: Option<String>,
}

/// Flag values layered over config-file values.
pub struct Settings {
    args: SharedArgs,
    file: BTreeMap<String, String>,
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("invalid value `{value}` for {key}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| bad(key, value))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(',').map(|t| parse(key, t)).collect()
}

pub fn parse_triple(key: &str, value: &str) -> Result<[usize; 3], CliError> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into().map_err(|_| bad(key, value))
}

fn structure(key: &str, name: &str) -> Result<ResidualStructure, CliError> {
    match name.trim() {
        "general" => Ok(ResidualStructure::General),
        "diagonal" => Ok(ResidualStructure::Diagonal),
        "isotropic" => Ok(ResidualStructure::Isotropic),
        other => Err(bad(key, other)),
    }
}

impl Settings {
    pub fn load(args: SharedArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => {
                let text = tme_core::io::read_text(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                tme_core::io::parse_config(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                    .into_iter()
                    .map(|(k, v)| (k.replace('-', "_"), v))
                    .collect()
            }
            None => BTreeMap::new(),
        };
        Ok(Settings { args, file })
    }

    /// Raw config-file value.
    pub fn file_value(&self, key: &str) -> Option<&str> {
        self.file.get(key).map(String::as_str)
    }

    fn value<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file_value(key).map(|v| parse(key, v)).transpose(),
        }
    }

    fn text(&self, flag: &Option<String>, key: &str) -> Option<String> {
        flag.clone().or_else(|| self.file_value(key).map(str::to_string))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.file_value(key).map(|v| parse(key, v)).transpose()
    }

    /// The root seed, drawn at random (and reported) when not configured.
    pub fn seed(&self) -> Result<u64, CliError> {
        match self.value(self.args.seed, "seed")? {
            Some(s) => Ok(s),
            None => {
                let s: u64 = rand::random();
                eprintln!("no seed given, using seed = {s}");
                Ok(s)
            }
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.args
            .out_dir
            .clone()
            .or_else(|| self.file_value("out_dir").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn ranks(&self, default: [usize; 3]) -> Result<[usize; 3], CliError> {
        self.text(&self.args.ranks, "ranks")
            .map_or(Ok(default), |v| parse_triple("ranks", &v))
    }

    pub fn random_ranks(&self, default: [usize; 3]) -> Result<[usize; 3], CliError> {
        self.text(&self.args.random_ranks, "random_ranks")
            .map_or(Ok(default), |v| parse_triple("random_ranks", &v))
    }

    /// Whether either rank triple was configured.
    pub fn ranks_given(&self) -> bool {
        self.text(&self.args.ranks, "ranks").is_some() || self.text(&self.args.random_ranks, "random_ranks").is_some()
    }

    pub fn replicates(&self, default: usize) -> Result<usize, CliError> {
        Ok(self.value(self.args.replicates, "replicates")?.unwrap_or(default))
    }

    pub fn sizes(&self, default: &[usize]) -> Result<Vec<usize>, CliError> {
        self.text(&self.args.sizes, "sizes")
            .map_or(Ok(default.to_vec()), |v| parse_list("sizes", &v))
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        match self.text(&self.args.methods, "methods") {
            None => Ok(Method::ALL.to_vec()),
            Some(v) => {
                let mut out: Vec<Method> = Vec::new();
                for m in parse_list::<Method>("methods", &v)? {
                    if !out.contains(&m) {
                        out.push(m);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Fit configuration; `default_structure` applies when none is set.
    pub fn fit_config(&self, default_structure: [ResidualStructure; 3]) -> Result<TmeConfig, CliError> {
        let mut c = TmeConfig {
            residual_structure: default_structure,
            ..TmeConfig::default()
        };
        if let Some(v) = self.value(self.args.tol1, "tol1")? {
            c.loop1_tol = v;
        }
        if let Some(v) = self.value(self.args.tol2, "tol2")? {
            c.loop2_tol = v;
        }
        if let Some(v) = self.value(self.args.max_iter1, "max_iter1")? {
            c.loop1_max = v;
        }
        if let Some(v) = self.value(self.args.max_iter2, "max_iter2")? {
            c.loop2_max = v;
        }
        if let Some(v) = self.text(&self.args.residual_structure, "residual_structure") {
            let parts: Vec<&str> = v.split(',').collect();
            c.residual_structure = match parts.as_slice() {
                [one] => {
                    let s = structure("residual_structure", one)?;
                    [s.clone(), s.clone(), s]
                }
                [a, b, d] => [
                    structure("residual_structure", a)?,
                    structure("residual_structure", b)?,
                    structure("residual_structure", d)?,
                ],
                _ => return Err(bad("residual_structure", &v)),
            };
        }
        if let Some(v) = self.text(&self.args.normalization, "normalization") {
            c.normalization = match v.trim() {
                "trace" => Normalization::Trace,
                "det" | "determinant" => Normalization::Determinant,
                other => return Err(bad("normalization", other)),
            };
        }
        if let Some(v) = self.text(&self.args.random_effects, "random_effects") {
            c.random_effects = match v.trim() {
                "em" => RandomEffectsMethod::Em,
                "projection" => RandomEffectsMethod::Projection,
                other => return Err(bad("random_effects", other)),
            };
        }
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parsing() {
        assert_eq!(parse_triple("ranks", "8,3,3").unwrap(), [8, 3, 3]);
        assert_eq!(parse_triple("ranks", " 8, 3 ,3").unwrap(), [8, 3, 3]);
        assert!(parse_triple("ranks", "8,3").is_err());
        assert!(parse_triple("ranks", "8,x,3").is_err());
        assert_eq!(parse_list::<usize>("sizes", "50,400").unwrap(), vec![50, 400]);
    }

    #[test]
    fn flags_override_file() {
        let args = SharedArgs {
            tol1: Some(1e-3),
            residual_structure: Some("diagonal,general,isotropic".into()),
            ..SharedArgs::default()
        };
        let mut file = BTreeMap::new();
        file.insert("tol1".to_string(), "0.5".to_string());
        file.insert("tol2".to_string(), "0.25".to_string());
        let s = Settings { args, file };
        let c = s.fit_config(TmeConfig::default().residual_structure).unwrap();
        assert_eq!(c.loop1_tol, 1e-3);
        assert_eq!(c.loop2_tol, 0.25);
        assert_eq!(c.residual_structure[0], ResidualStructure::Diagonal);
        assert_eq!(c.residual_structure[2], ResidualStructure::Isotropic);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let s = Settings {
            args: SharedArgs {
                normalization: Some("frobenius".into()),
                ..SharedArgs::default()
            },
            file: BTreeMap::new(),
        };
        assert!(matches!(s.fit_config(TmeConfig::default().residual_structure), Err(CliError::Config(_))));
        let s = Settings {
            args: SharedArgs {
                tol1: Some(-1.0),
                ..SharedArgs::default()
            },
            file: BTreeMap::new(),
        };
        assert!(s.fit_config(TmeConfig::default().residual_structure).is_err());
    }
}
