//! Command-line front end.
//!
//! Every subcommand builds a [`Report`] in memory and then writes it once, so
//! library callers (and tests) can run the same recipes without a process.
//!
//! A `--config` JSON file supplies flags by their long names (`"width": 128`,
//! `"layers": [4, 8]`, `"refine": true`). Its entries are spliced in ahead of
//! the real arguments, so a flag given on the command line wins.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::net::{InitVariant, NetworkConfig};
use crate::observables::CoordinateReduction;

pub mod check_gradients;
pub mod report;
pub mod solve_lr;
pub mod sweep_depth;
pub mod verify_init;
pub mod verify_lemmas;

pub use report::{Check, FitRecord, Format, Report, Status};

#[derive(Debug, Parser)]
#[command(name = "mupdepth", version, about = "One-step update statistics of deep mean-field ReLU networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference and naive-enumeration checks on random tiny networks.
    ///
    /// Defaults: 100 nets with widths ≤ 6 and depth ≤ 4 against finite
    /// differences (tolerance 1e-6), 50 nets with widths ≤ 5 and depth ≤ 3
    /// against naive enumeration (tolerance 1e-10). A few seconds.
    CheckGradients(check_gradients::CheckGradientsArgs),
    /// Second- and fourth-moment profiles at initialization.
    ///
    /// Defaults: n = 512, L = 10, R = 2000. Under a minute.
    VerifyInit(verify_init::VerifyInitArgs),
    /// E[(Δz^(ℓ))²], C and B̃/n across depth, with power-law fits.
    ///
    /// Defaults: n = 256, L = 40, layers 4,8,16,32, η = 1e-3, R = 1000,
    /// actual update. A few minutes.
    SweepDepth(sweep_depth::SweepDepthArgs),
    /// Maximal-update rate η*(L) from unit-rate estimates, with a fit over L.
    ///
    /// Defaults: n = 256, depths 8,16,32,64, R = 1000. About a minute.
    SolveLr(solve_lr::SolveLrArgs),
    /// Decomposition, conditional projection, width scaling and recursion checks.
    ///
    /// Defaults: n = 128, L = 8, η = 0.05, R = 10000 (main run), 2000 (Gram
    /// run), 8000 (A/B width sweep). A few minutes.
    VerifyLemmas(verify_lemmas::VerifyLemmasArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    MeanFieldPaper,
    MeanFieldExactHe,
}

impl From<InitArg> for InitVariant {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::MeanFieldPaper => InitVariant::MeanFieldPaper,
            InitArg::MeanFieldExactHe => InitVariant::MeanFieldExactHe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CoordsArg {
    First,
    Mean,
}

impl From<CoordsArg> for CoordinateReduction {
    fn from(a: CoordsArg) -> Self {
        match a {
            CoordsArg::First => CoordinateReduction::First,
            CoordsArg::Mean => CoordinateReduction::Mean,
        }
    }
}

/// Flags shared by every subcommand. Unset sizes fall back to per-command defaults.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON file of flag values keyed by long flag name.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Uniform input and hidden width.
    #[arg(long, value_name = "N")]
    pub width: Option<usize>,
    /// Full width list n0,n1,...,nL,n_out.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Number of hidden layers L.
    #[arg(long, value_name = "L")]
    pub depth: Option<usize>,
    /// Global learning rate.
    #[arg(long, value_name = "F")]
    pub eta: Option<f64>,
    #[arg(long, value_name = "R")]
    pub replicates: Option<usize>,
    #[arg(long, value_name = "U64", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses every core. Does not affect results.
    #[arg(long, value_name = "K", default_value_t = 0)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long, value_enum, default_value_t = InitArg::MeanFieldExactHe)]
    pub init: InitArg,
    /// Layers to measure, e.g. 4,8,16,32.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Output file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

impl CommonArgs {
    /// The network from `--widths`, or a uniform one from `--width`/`--depth`.
    pub fn network(&self, default_width: usize, default_depth: usize) -> Result<NetworkConfig> {
        let variant = InitVariant::from(self.init);
        let cfg = match (&self.widths, self.width) {
            (Some(_), Some(_)) => return Err(Error::Config("--width and --widths are mutually exclusive".into())),
            (Some(w), None) => {
                let cfg = NetworkConfig::new(w.clone(), variant, self.seed)?;
                if let Some(d) = self.depth {
                    if d != cfg.depth() {
                        return Err(Error::Config(format!(
                            "--depth {d} disagrees with --widths, which describes {} hidden layers",
                            cfg.depth()
                        )));
                    }
                }
                cfg
            }
            (None, w) => NetworkConfig::uniform(w.unwrap_or(default_width), self.depth.unwrap_or(default_depth), 1)?
                .with_variant(variant)
                .with_seed(self.seed),
        };
        Ok(cfg)
    }

    pub fn replicates_or(&self, default: usize) -> usize {
        self.replicates.unwrap_or(default)
    }

    /// `--eta` or the default, rejecting non-positive and non-finite rates.
    pub fn eta_or(&self, default: f64) -> Result<f64> {
        let eta = self.eta.unwrap_or(default);
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("--eta must be positive and finite, got {eta}")));
        }
        Ok(eta)
    }
}

/// Reads an input vector from a JSON array or whitespace/comma separated text.
pub fn read_x_file(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let x: Vec<f64> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        text.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Config(format!("{}: `{t}` is not a number", path.display())))
            })
            .collect::<Result<_>>()?
    };
    if x.len() != expected_len {
        return Err(Error::Config(format!(
            "{} holds {} values but the input width n0 is {expected_len}",
            path.display(),
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || x.iter().all(|&v| v == 0.0) {
        return Err(Error::Config(format!("{}: input must be finite and nonzero", path.display())));
    }
    Ok(x)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn scalar_text(key: &str, v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::String(s) => Ok(s.clone()),
        _ => Err(Error::Config(format!("config key `{key}` must be a number, string or list"))),
    }
}

/// Turns a config object into flag tokens, validating each key against `sub`.
fn config_tokens(sub: &clap::Command, text: &str) -> Result<Vec<String>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
    let mut tokens = Vec::new();
    for (key, v) in obj {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}` for {}", sub.get_name())))?;
        let flag = format!("--{key}");
        let is_switch = matches!(arg.get_action(), ArgAction::SetTrue);
        match v {
            serde_json::Value::Bool(b) if is_switch => {
                if *b {
                    tokens.push(flag);
                }
            }
            _ if is_switch => return Err(Error::Config(format!("config key `{key}` must be true or false"))),
            serde_json::Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(|i| scalar_text(key, i)).collect::<Result<_>>()?;
                tokens.push(flag);
                tokens.push(parts.join(","));
            }
            other => {
                tokens.push(flag);
                tokens.push(scalar_text(key, other)?);
            }
        }
    }
    Ok(tokens)
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        cmd = cmd.mut_subcommand(n, |s| s.args_override_self(true));
    }
    cmd
}

/// Parses `args` (program name first), merging any `--config` file.
pub fn parse(args: Vec<String>) -> std::result::Result<Cli, ParseFailure> {
    let mut args = args;
    let cmd = command();
    if let (Some(path), Some(sub_name)) = (config_path(&args), args.get(1).cloned()) {
        if let Some(sub) = cmd.find_subcommand(&sub_name) {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ParseFailure::Config(Error::Config(format!("cannot read config {path}: {e}"))))?;
            let tokens = config_tokens(sub, &text).map_err(ParseFailure::Config)?;
            args.splice(2..2, tokens);
        }
    }
    let matches = cmd.try_get_matches_from(args).map_err(ParseFailure::Clap)?;
    Cli::from_arg_matches(&matches).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Config(Error),
}

/// Runs one subcommand and returns its report.
pub fn execute(cli: &Cli) -> Result<Report> {
    match &cli.command {
        Command::CheckGradients(a) => check_gradients::run(a),
        Command::VerifyInit(a) => verify_init::run(a),
        Command::SweepDepth(a) => sweep_depth::run(a),
        Command::SolveLr(a) => solve_lr::run(a),
        Command::VerifyLemmas(a) => verify_lemmas::run(a),
    }
}

fn common(cli: &Cli) -> &CommonArgs {
    match &cli.command {
        Command::CheckGradients(a) => &a.common,
        Command::VerifyInit(a) => &a.common,
        Command::SweepDepth(a) => &a.common,
        Command::SolveLr(a) => &a.common,
        Command::VerifyLemmas(a) => &a.common,
    }
}

/// Exit codes: 0 all checks pass, 1 a check failed, 2 usage or
/// configuration error, 3 inconclusive.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let cli = match parse(args) {
        Ok(c) => c,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return e.exit_code();
        }
        Err(ParseFailure::Config(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let report = match execute(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let c = common(&cli);
    if let Err(e) = report::emit(&report, c.format, c.output.as_deref()) {
        eprintln!("error: {e}");
        return 2;
    }
    eprint!("{}", report.summary());
    report.exit_code()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("mupdepth").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn config_tokens_cover_scalars_lists_and_switches() {
        let cmd = command();
        let sub = cmd.find_subcommand("solve-lr").unwrap();
        let t = config_tokens(sub, r#"{"width": 64, "depths": [8, 16], "refine": true, "init": "mean-field-paper"}"#)
            .unwrap();
        assert_eq!(t, ["--depths", "8,16", "--init", "mean-field-paper", "--refine", "--width", "64"]);
        assert!(config_tokens(sub, r#"{"widht": 64}"#).is_err());
        assert!(config_tokens(sub, r#"{"refine": 1}"#).is_err());
        assert!(config_tokens(sub, r#"[1]"#).is_err());
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = std::env::temp_dir().join(format!("mupdepth-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        std::fs::write(&path, r#"{"width": 64, "seed": 5}"#).unwrap();
        let cli = parse(argv(&format!("verify-init --config {} --width 32", path.display()))).unwrap();
        let Command::VerifyInit(a) = cli.command else { panic!() };
        assert_eq!((a.common.width, a.common.seed), (Some(32), 5));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn network_resolution() {
        let cli = parse(argv("verify-init --widths 3,4,4,1 --depth 2")).unwrap();
        let Command::VerifyInit(a) = cli.command else { panic!() };
        assert_eq!(a.common.network(9, 9).unwrap().widths(), &[3, 4, 4, 1]);
        let cli = parse(argv("verify-init --widths 3,4,4,1 --depth 3")).unwrap();
        let Command::VerifyInit(a) = cli.command else { panic!() };
        assert!(a.common.network(9, 9).is_err());
        let cli = parse(argv("verify-init --depth 3")).unwrap();
        let Command::VerifyInit(a) = cli.command else { panic!() };
        assert_eq!(a.common.network(5, 9).unwrap().widths(), &[5, 5, 5, 5, 1]);
        assert!(parse(argv("verify-init --eta 0")).is_ok());
        assert!(a.common.eta_or(0.0).is_err());
    }
}
