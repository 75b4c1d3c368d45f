//! Argument parsing and resolution of the run configuration.
//!
//! Values come from three layers: built-in defaults, an optional flat
//! `key = value` file, and command-line flags. Later layers win. The file
//! uses the flag names (`t-max = 2` or `t_max = 2`) and is parsed by the same
//! clap definitions as the flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use mfg_convex::experiments::{RunSettings, TestId};
use mfg_convex::optimizer::Method;
use mfg_convex::Exec;

#[derive(Debug, Parser)]
#[command(name = "mfgcast", version, about = "Forecast 1-D mean field games systems by convexification")]
pub struct Cli {
    /// Flat `key = value` file with default overrides.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one canned test and write all artifacts.
    Run {
        #[command(flatten)]
        common: Overrides,
    },
    /// Run a canned test once per value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Overrides,
        /// Flag name of the swept parameter, e.g. `lambda` or `noise`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Compare the analytic gradient with central differences.
    CheckGradient {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, default_value_t = 10)]
        states: usize,
        #[arg(long, default_value_t = 50)]
        directions: usize,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-6)]
        threshold: f64,
    },
    /// Check both weighted estimates on random fields over a sweep of lambda.
    CheckCarleman {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        lambdas: Vec<f64>,
    },
    /// Write the initial data (and known solution) of a test without solving.
    ExportCase {
        #[command(flatten)]
        common: Overrides,
    },
}

impl Command {
    pub fn common(&self) -> &Overrides {
        match self {
            Command::Run { common }
            | Command::Sweep { common, .. }
            | Command::CheckGradient { common, .. }
            | Command::CheckCarleman { common, .. }
            | Command::ExportCase { common } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Run { .. } => "run",
            Command::Sweep { .. } => "sweep",
            Command::CheckGradient { .. } => "check-gradient",
            Command::CheckCarleman { .. } => "check-carleman",
            Command::ExportCase { .. } => "export-case",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Gd,
    Lbfgs,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecArg {
    Sequential,
    Parallel,
}

/// Every overridable setting. Unset fields fall through to the next layer.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub test: Option<TestId>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub d: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Radius of the monitored ball.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub dx: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    /// Relative noise level.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Constant value of the kernel.
    #[arg(long)]
    pub kernel: Option<f64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// L-BFGS history length.
    #[arg(long)]
    pub memory: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub step0: Option<f64>,
    #[arg(long)]
    pub armijo_c: Option<f64>,
    #[arg(long)]
    pub backtrack_factor: Option<f64>,
    #[arg(long)]
    pub max_backtracks: Option<usize>,
    #[arg(long, value_enum)]
    pub exec: Option<ExecArg>,
}

#[derive(Debug, Parser)]
#[command(no_binary_name = true)]
struct FileLayer {
    #[command(flatten)]
    values: Overrides,
}

macro_rules! layer {
    ($top:expr, $bottom:expr, $($f:ident),*) => {
        Overrides { $($f: $top.$f.clone().or_else(|| $bottom.$f.clone()),)* }
    };
}

impl Overrides {
    /// `self` where set, `below` otherwise.
    pub fn over(&self, below: &Overrides) -> Overrides {
        layer!(
            self,
            below,
            test,
            out,
            lambda,
            c,
            a,
            d,
            alpha,
            gamma,
            radius,
            dx,
            dt,
            t_max,
            noise,
            seed,
            kernel,
            method,
            memory,
            tol,
            max_iters,
            step0,
            armijo_c,
            backtrack_factor,
            max_backtracks,
            exec
        )
    }

    /// Parses `--key value` pairs with the flag definitions.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, clap::Error> {
        let mut args = Vec::new();
        for (k, v) in pairs {
            args.push(format!("--{}", k.replace('_', "-")));
            args.push(v.to_string());
        }
        Ok(FileLayer::try_parse_from(args)?.values)
    }

    /// Resolves settings on top of the defaults for the chosen test.
    pub fn resolve(&self, default_test: Option<TestId>) -> Result<RunSettings, String> {
        let test = self.test.or(default_test).ok_or("missing required option --test")?;
        let mut s = RunSettings::standard(test).map_err(|e| e.to_string())?;
        if let Some(t) = self.t_max {
            s = s.with_t_max(t).map_err(|e| e.to_string())?;
        }
        let p = &mut s.params;
        set(&mut p.lambda, self.lambda);
        set(&mut p.c, self.c);
        set(&mut p.a, self.a);
        set(&mut p.d, self.d);
        set(&mut p.alpha, self.alpha);
        set(&mut p.gamma, self.gamma);
        if self.radius.is_some() {
            p.radius = self.radius;
        }
        set(&mut s.dx, self.dx);
        set(&mut s.dt, self.dt);
        set(&mut s.noise.level, self.noise);
        set(&mut s.noise.seed, self.seed);
        set(&mut s.kernel, self.kernel);
        let o = &mut s.optimizer;
        match (self.method, self.memory) {
            (Some(MethodArg::Gd), _) => o.method = Method::GradientDescent,
            (Some(MethodArg::Newton), _) => o.method = Method::Newton,
            (Some(MethodArg::Lbfgs), m) => o.method = Method::Lbfgs { memory: m.unwrap_or(10) },
            (None, Some(_)) if !matches!(o.method, Method::Lbfgs { .. }) => {
                return Err("--memory needs --method lbfgs".into())
            }
            (None, Some(m)) => o.method = Method::Lbfgs { memory: m },
            (None, None) => {}
        }
        set(&mut o.tol, self.tol);
        set(&mut o.max_iters, self.max_iters);
        set(&mut o.step0, self.step0);
        set(&mut o.armijo_c, self.armijo_c);
        set(&mut o.backtrack_factor, self.backtrack_factor);
        set(&mut o.max_backtracks, self.max_backtracks);
        if let Some(e) = self.exec {
            o.exec = match e {
                ExecArg::Sequential => Exec::Sequential,
                ExecArg::Parallel => Exec::Parallel,
            };
        }
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }

    pub fn out_dir(&self) -> Result<&Path, String> {
        self.out.as_deref().ok_or_else(|| "missing required option --out".to_string())
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(format!("line {}: empty key or value in `{line}`", n + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("mfgcast").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn run_defaults_are_paper_values() {
        let cli = parse(&["run", "--test", "T1_1", "--out", "x"]);
        let s = cli.command.common().resolve(None).unwrap();
        assert_eq!(s, RunSettings::standard(TestId::T1_1).unwrap());
        assert_eq!((s.params.lambda, s.params.c, s.params.a, s.params.alpha), (2.0, 3.0, 1.1, 1e-5));
        assert_eq!((s.params.d, s.dx, s.dt, s.params.t_max, s.noise.level), (1.0, 0.1, 0.1, 1.0, 0.03));
    }

    #[test]
    fn zero_noise_override() {
        let cli = parse(&["run", "--test", "T1_1", "--noise", "0"]);
        assert_eq!(cli.command.common().resolve(None).unwrap().noise.level, 0.0);
    }

    #[test]
    fn sweep_values_split() {
        let cli = parse(&["sweep", "--test", "T1_1", "--param", "lambda", "--values", "1,2,3,4,5"]);
        match cli.command {
            Command::Sweep { param, values, .. } => {
                assert_eq!(param, "lambda");
                assert_eq!(values, ["1", "2", "3", "4", "5"]);
            }
            _ => panic!("not a sweep"),
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = parse_config_text("# comment\nlambda = 3\nt_max = 2\nnoise=0.01 # inline\n").unwrap();
        let file = Overrides::from_pairs(file.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        let cli = parse(&["run", "--test", "T1_1", "--lambda", "4"]);
        let s = cli.command.common().over(&file).resolve(None).unwrap();
        assert_eq!(s.params.lambda, 4.0);
        assert_eq!(s.noise.level, 0.01);
        assert_eq!(s.params.t_max, 2.0);
        assert!(s.params.c >= 3.236);
        assert_eq!(s.params.a, 1.1);
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(parse_config_text("lambda 3").unwrap_err().contains("lambda 3"));
        let err = Overrides::from_pairs([("lamda", "3")]).unwrap_err().to_string();
        assert!(err.contains("--lamda"), "{err}");
        assert!(Overrides::from_pairs([("alpha", "x")]).is_err());
        let cli = parse(&["run", "--test", "T1_1", "--alpha", "2"]);
        assert!(cli.command.common().resolve(None).unwrap_err().contains("alpha"));
        let cli = parse(&["run"]);
        assert!(cli.command.common().resolve(None).unwrap_err().contains("--test"));
        assert!(cli.command.common().out_dir().is_err());
        let cli = parse(&["run", "--test", "T1_1", "--memory", "4"]);
        assert!(cli.command.common().resolve(None).is_err());
        assert!(Cli::try_parse_from(["mfgcast", "run", "--bogus"]).is_err());
    }

    #[test]
    fn method_selection() {
        let cli = parse(&["run", "--test", "T2_2", "--method", "lbfgs", "--memory", "7"]);
        assert_eq!(cli.command.common().resolve(None).unwrap().optimizer.method, Method::Lbfgs { memory: 7 });
        let cli = parse(&["run", "--test", "T2_2", "--method", "gd", "--exec", "sequential"]);
        let s = cli.command.common().resolve(None).unwrap();
        assert_eq!(s.optimizer.method, Method::GradientDescent);
        assert_eq!(s.optimizer.exec, Exec::Sequential);
    }
}
