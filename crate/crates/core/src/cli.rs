//! The `stm` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or storage failure, 2 invalid arguments or
//! inputs, 3 a verification property failed, 4 training diverged.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adapter::trainable_param_count;
use crate::eranks::{self, RankReport};
use crate::error::{ensure, Error, Result};
use crate::harness::{self, Method, TrainConfig};
use crate::spectral::{decompose, project_residual};
use crate::stm::{self, ProtectionRule, StmConfig};
use crate::tensorio::{read_bundle, MatrixBundle, Record, Report, ReportFormat, ReportKind, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "stm", version, about = "Effective-rank guided low-rank adaptation tools")]
pub struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Singular spectra, effective ranks and residual projections of a weight bundle.
    Spectra(SpectraArgs),
    /// Select ranks and directions, then write initialized adapters.
    StmInit(StmInitArgs),
    /// Run the property sweeps and gradient checks.
    Verify(VerifyArgs),
    /// Run the synthetic STM-versus-baseline experiment.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    #[default]
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Args)]
pub struct SpectraArgs {
    /// Bundle of weight matrices.
    #[arg(long)]
    pub input: PathBuf,
    /// Bundle of fine-tuning residuals with the same names.
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    /// Directory for `spectra.<ext>` and `ranks.<ext>`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = eranks::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value_t)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct StmInitArgs {
    /// Bundle of pretrained weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Bundle of full fine-tuning residuals, one per weight.
    #[arg(long)]
    pub residuals: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, default_value_t = eranks::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = ProtectionRule::Ceil)]
    pub protection_rule: ProtectionRule,
    #[arg(long, default_value_t = 1)]
    pub min_rank: usize,
    #[arg(long, default_value_t = 0.5)]
    pub max_rank_fraction: f64,
    /// Directory receiving one sub-directory per layer.
    #[arg(long)]
    pub output: PathBuf,
}

impl StmInitArgs {
    pub fn config(&self) -> StmConfig {
        StmConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            protection_rule: self.protection_rule,
            min_rank: self.min_rank,
            max_rank_fraction: self.max_rank_fraction,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Self-test: check the reversed rank inequality, which must fail.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = harness::TOY_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = TrainConfig::default().reg_weight)]
    pub reg_weight: f64,
    #[arg(long, default_value_t = TrainConfig::default().loss_threshold)]
    pub loss_threshold: f64,
    #[arg(long, default_value_t = Method::ZeroInitLora)]
    pub baseline: Method,
    /// Directory for `metrics.<ext>`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: FormatArg,
}

impl TrainToyArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            baseline: self.baseline,
            reg_weight: self.reg_weight,
            loss_threshold: self.loss_threshold,
        }
    }
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) | Error::DegenerateSpectrum(_) => EXIT_VALIDATION,
        Error::TrainingDiverged { .. } => EXIT_DIVERGED,
        Error::Io { .. }
        | Error::NotFound(_)
        | Error::Corruption(_)
        | Error::UnsupportedFormat(_)
        | Error::Numeric(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_IO,
    }
}

/// Runs a parsed command line and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Spectra(args) => cmd_spectra(&args).map(|()| EXIT_OK),
        Command::StmInit(args) => cmd_stm_init(&args, &mut std::io::stdout()).map(|()| EXIT_OK),
        Command::Verify(args) => cmd_verify(&args, &mut std::io::stdout()),
        Command::TrainToy(args) => cmd_train_toy(&args, &mut std::io::stdout()).map(|()| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::TrainingDiverged { step, loss, initial } = e {
                eprintln!(
                    "diagnostics: loss grew {:.3e}x over {step} steps; try a smaller --learning-rate",
                    loss / initial
                );
            }
            exit_code(&e)
        }
    }
}

fn sorted_names(bundle: &MatrixBundle) -> Vec<String> {
    let mut names: Vec<String> = bundle.names().map(str::to_string).collect();
    names.sort();
    names
}

/// Rank report, or `None` for an all-zero matrix.
fn ranks_or_none(sigma: &[f64], gamma: f64) -> Result<Option<RankReport>> {
    match RankReport::from_spectrum(sigma, gamma) {
        Ok(r) => Ok(Some(r)),
        Err(Error::DegenerateSpectrum(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn rank_cells(record: &mut Record, prefix: &str, ranks: Option<RankReport>) {
    let cell = |v: Option<f64>| v.map_or(Value::Text("N/A".into()), Value::from);
    record.set(&format!("{prefix}entropy_rank"), cell(ranks.map(|r| r.entropy_rank)));
    record.set(&format!("{prefix}stable_rank"), cell(ranks.map(|r| r.stable_rank)));
}

pub fn cmd_spectra(args: &SpectraArgs) -> Result<()> {
    ensure!(
        args.gamma.is_finite() && args.gamma > 0.0,
        "--gamma must be positive, got {}",
        args.gamma
    );
    let weights = read_bundle(&args.input)?;
    let residuals = args.residuals.as_ref().map(read_bundle).transpose()?;
    let names = sorted_names(&weights);
    if let Some(res) = &residuals {
        let other = sorted_names(res);
        ensure!(
            names == other,
            "weight names {names:?} do not match residual names {other:?}"
        );
    }

    let mut spectra = Report::new(ReportKind::Spectra);
    let mut ranks = Report::new(ReportKind::Ranks);
    for name in &names {
        let w = weights.get(name).expect("name comes from the bundle");
        let f = decompose(w)?;
        let residual = match &residuals {
            Some(res) => {
                let dw = res.get(name).expect("names were matched");
                ensure!(
                    dw.shape() == w.shape(),
                    "{name}: residual is {:?}, weight is {:?}",
                    dw.shape(),
                    w.shape()
                );
                Some((decompose(dw)?, project_residual(&f, dw)?))
            }
            None => None,
        };

        let mut row = Record::new()
            .with("matrix", name.as_str())
            .with("rows", w.nrows())
            .with("cols", w.ncols())
            .with("k", f.k());
        rank_cells(&mut row, "", ranks_or_none(f.sigma(), args.gamma)?);
        if let Some((rf, _)) = &residual {
            rank_cells(&mut row, "residual_", ranks_or_none(rf.sigma(), args.gamma)?);
        }
        ranks.push(row);

        for i in 0..f.k() {
            let mut rec = Record::new()
                .with("matrix", name.as_str())
                .with("index", i + 1)
                .with("sigma", f.sigma()[i]);
            if let Some((rf, d)) = &residual {
                rec.set("residual_sigma", rf.sigma()[i]);
                rec.set("projection", d.as_slice()[i]);
            }
            spectra.push(rec);
        }
    }

    let format = ReportFormat::from(args.format);
    spectra.write(report_path(&args.output, "spectra", format), format)?;
    ranks.write(report_path(&args.output, "ranks", format), format)?;
    Ok(())
}

fn report_path(dir: &Path, stem: &str, format: ReportFormat) -> PathBuf {
    dir.join(format!("{stem}.{}", format.extension()))
}

pub fn cmd_stm_init(args: &StmInitArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.config();
    cfg.validate()?;
    let weights = read_bundle(&args.weights)?;
    let residuals = read_bundle(&args.residuals)?;
    let names = sorted_names(&weights);
    for name in &names {
        let dw = residuals
            .get(name)
            .ok_or_else(|| Error::Validation(format!("residual bundle has no entry for {name:?}")))?;
        let w = weights.get(name).expect("name comes from the bundle");
        ensure!(
            dw.shape() == w.shape(),
            "{name}: residual is {:?}, weight is {:?}",
            dw.shape(),
            w.shape()
        );
    }

    let mut layers = Vec::with_capacity(names.len());
    for name in &names {
        let w = weights.get(name).expect("checked above");
        let dw = residuals.get(name).expect("checked above");
        let layer = stm::plan_layer(w, dw, &cfg)?;
        log::info!(
            "{name}: r = {}, selected {:?}, protected {:?}",
            layer.plan().r,
            layer.plan().selected.to_one_based(),
            layer.plan().protected.to_one_based()
        );
        stm::write_layer(args.output.join(name), &layer)?;
        layers.push(layer);
    }
    let count = trainable_param_count(&layers);
    writeln!(out, "trainable parameters: {count}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    ensure!(args.trials > 0, "--trials must be positive");
    let sweeps = harness::verification_suite(args.trials, args.seed, args.inject_fault)?;
    let io = |e| Error::io("<stdout>", e);
    let mut failed = false;
    for s in &sweeps {
        writeln!(out, "{}: {}/{} passed", s.name, s.passed(), s.trials).map_err(io)?;
        for (seed, detail) in &s.failures {
            failed = true;
            writeln!(out, "  FAIL {} seed {seed}: {detail}", s.name).map_err(io)?;
        }
    }
    Ok(if failed { EXIT_PROPERTY } else { EXIT_OK })
}

pub fn cmd_train_toy(args: &TrainToyArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.config();
    cfg.validate()?;
    let stm_cfg = harness::toy_stm_config(args.alpha);
    stm_cfg.validate()?;

    let (model, task) = harness::toy_problem(args.seed)?;
    let outcome = harness::run_experiment(&model, &task, &stm_cfg, &cfg)?;
    let report = outcome.report();
    let format = ReportFormat::from(args.format);
    let path = report_path(&args.output, "metrics", format);
    report.write(&path, format)?;

    let io = |e| Error::io("<stdout>", e);
    for m in outcome.rows() {
        writeln!(
            out,
            "{}: final loss {:.4e}, protected drift {:.3e}, steps to threshold {}",
            m.method,
            m.final_loss,
            m.protected_drift,
            m.steps_to_threshold
                .map_or_else(|| "not reached".to_string(), |s| s.to_string())
        )
        .map_err(io)?;
    }
    writeln!(out, "wrote {}", path.display()).map_err(io)?;
    Ok(())
}

/// Convenience for tests and the binary: parse `args` and run.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            }
        }
    }
}
