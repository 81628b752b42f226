//! Pipeline commands behind the `rating-xva` binary: adjust, extract,
//! calibrate, simulate, xva, predefault and the all-in-one report.
//!
//! Every command is a pure function of the configuration and input
//! files: outputs carry no timestamps, floats are printed with fixed
//! formats and reductions are order-deterministic, so reruns are
//! bit-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use crate::calibration::{
    adjust_matrix, calibrate_piecewise, extract_piecewise_generators, CalibrationReport, Measure,
    PhctmcModel,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::matfun::SquareMatrix;
use crate::rating::{
    load_market_data, validate_generator, write_matrix_csv, write_raw_matrix_csv, RatingScale,
    TransitionMatrix,
};
use crate::simulation::{empirical_transition_matrix, simulate_rating_blocks};
use crate::xva::{
    collateral_account_path, conditional_pre_default_mass, evaluate_xva, pre_default_distribution,
    simulate_scenario_set, CollateralAgreement, XvaReport,
};

#[derive(Debug, Parser)]
#[command(
    name = "rating-xva",
    about = "Rating-migration calibration and collateralized XVA pipeline",
    version
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "data/fitch_run.toml")]
    pub config: PathBuf,

    /// Override the RNG seed for simulation and XVA.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Restrict the xva command to a single collateral regime.
    #[arg(long, global = true)]
    pub regime: Option<String>,

    /// Measure for the simulate command (P or Q).
    #[arg(long, global = true)]
    pub measure: Option<String>,

    /// Override the Monte Carlo path counts.
    #[arg(long, global = true)]
    pub paths: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Redistribute withdrawal mass so every matrix row sums to one.
    Adjust,
    /// Extract per-interval historical generators from adjusted matrices.
    Extract,
    /// Calibrate the model under both measures and write it to disk.
    Calibrate,
    /// Simulate rating paths and compare empirical occupancies with the
    /// analytic evolution system.
    Simulate,
    /// Estimate CDVA/CCVA/CBVA under the configured collateral regimes.
    Xva,
    /// Pre-default rating distribution under both measures.
    Predefault,
    /// Full pipeline: adjust, calibrate, simulate, xva, predefault.
    Report,
}

struct Context {
    config: RunConfig,
    scale: RatingScale,
    out_dir: PathBuf,
}

impl Context {
    fn build(cli: &Cli) -> Result<Self> {
        let mut config = RunConfig::load(&cli.config)?;
        if let Some(seed) = cli.seed {
            config.simulation.seed = seed;
            config.xva.seed = seed;
        }
        if let Some(paths) = cli.paths {
            config.simulation.n_paths = paths;
            config.xva.n_paths = paths;
        }
        if let Some(measure) = &cli.measure {
            config.simulation.measure = measure.clone();
        }
        if let Some(regime) = &cli.regime {
            config.xva.regimes = vec![regime.clone()];
        }
        let out_dir = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        let scale = config.scale()?;
        Ok(Self {
            config,
            scale,
            out_dir,
        })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn load_inputs(
        &self,
    ) -> Result<(
        Vec<TransitionMatrix>,
        crate::rating::DefaultCurve,
        crate::rating::PiecewiseSchedule,
    )> {
        let (market, curve, schedule) = load_market_data(
            &self.config.inputs.matrix_files,
            &self.config.inputs.pd_file,
            &self.scale,
        )?;
        if let Some(breakpoints) = &self.config.calibration.breakpoints {
            let expected = &schedule.breakpoints()[1..];
            if breakpoints.len() != expected.len()
                || breakpoints
                    .iter()
                    .zip(expected)
                    .any(|(a, b)| (a - b).abs() > crate::rating::TENOR_TOL)
            {
                return Err(Error::Config(
                    "configured breakpoints do not match the PD tenors".into(),
                ));
            }
        }
        Ok((market, curve, schedule))
    }

    fn adjusted(&self) -> Result<(Vec<TransitionMatrix>, crate::rating::DefaultCurve, crate::rating::PiecewiseSchedule)> {
        let (market, curve, schedule) = self.load_inputs()?;
        let adjusted = market
            .iter()
            .map(adjust_matrix)
            .collect::<Result<Vec<_>>>()?;
        Ok((adjusted, curve, schedule))
    }

    /// Load the calibrated model from the output directory, calibrating
    /// (and persisting) it first when no model file exists yet.
    fn model(&self) -> Result<(PhctmcModel, Option<CalibrationReport>)> {
        let model_path = self.out_path("model.json");
        if model_path.exists() {
            return Ok((PhctmcModel::load_json(&model_path)?, None));
        }
        let (model, report) = self.calibrate()?;
        Ok((model, Some(report)))
    }

    fn calibrate(&self) -> Result<(PhctmcModel, CalibrationReport)> {
        let (adjusted, curve, schedule) = self.adjusted()?;
        let weights = self.config.weights(self.scale.len())?;
        let options = self.config.calibration_options();
        let (model, report) =
            calibrate_piecewise(&adjusted, &curve, &schedule, &weights, &options, &self.scale)?;
        model.save_json(&self.out_path("model.json"))?;
        write_calibration_report(self, &report)?;
        Ok((model, report))
    }
}

/// Entry point used by the binary.
pub fn run(cli: Cli) -> Result<()> {
    let ctx = Context::build(&cli)?;
    match cli.command {
        Command::Adjust => cmd_adjust(&ctx),
        Command::Extract => cmd_extract(&ctx),
        Command::Calibrate => cmd_calibrate(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Xva => cmd_xva(&ctx),
        Command::Predefault => cmd_predefault(&ctx),
        Command::Report => cmd_report(&ctx),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "matrix".into())
}

fn cmd_adjust(ctx: &Context) -> Result<()> {
    let (market, _, _) = ctx.load_inputs()?;
    let mut summary = String::new();
    writeln!(summary, "withdrawal adjustment of {} matrices", market.len()).unwrap();
    for (file, matrix) in ctx.config.inputs.matrix_files.iter().zip(&market) {
        let adjusted = adjust_matrix(matrix)?;
        let name = format!("adjusted_{}.csv", file_stem(file));
        write_matrix_csv(&ctx.out_path(&name), &ctx.scale, adjusted.entries())?;
        let max_withdrawal = (0..ctx.scale.len())
            .map(|i| 1.0 - matrix.entries().row(i).sum())
            .fold(0.0f64, f64::max);
        writeln!(
            summary,
            "{}: horizon {:.6}, max withdrawal {:.6}, wrote {}",
            file.display(),
            matrix.horizon,
            max_withdrawal,
            name
        )
        .unwrap();
    }
    write_text(&ctx.out_path("adjust_summary.txt"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn cmd_extract(ctx: &Context) -> Result<()> {
    let (adjusted, _, schedule) = ctx.adjusted()?;
    let generators = extract_piecewise_generators(&adjusted, &schedule)?;
    let mut summary = String::new();
    let mut csv = String::from("interval,t_start,t_end,min_off_diagonal,max_row_residual,valid\n");
    for (k, generator) in generators.iter().enumerate() {
        let name = format!("generator_p_{k}.csv");
        write_raw_matrix_csv(&ctx.out_path(&name), &ctx.scale, generator.entries())?;
        let report = validate_generator(generator.entries(), 1e-9);
        let max_residual = report
            .row_sum_residuals
            .iter()
            .fold(0.0f64, |m, r| m.max(r.abs()));
        writeln!(
            csv,
            "{k},{:.6},{:.6},{:.6e},{:.6e},{}",
            schedule.breakpoints()[k],
            schedule.breakpoints()[k + 1],
            report.min_off_diagonal,
            max_residual,
            report.is_valid
        )
        .unwrap();
        writeln!(
            summary,
            "interval {k} [{:.4}, {:.4}]: valid={} min_offdiag={:.3e} wrote {}",
            schedule.breakpoints()[k],
            schedule.breakpoints()[k + 1],
            report.is_valid,
            report.min_off_diagonal,
            name
        )
        .unwrap();
    }
    write_text(&ctx.out_path("extract_report.csv"), &csv)?;
    write_text(&ctx.out_path("extract_summary.txt"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn write_calibration_report(ctx: &Context, report: &CalibrationReport) -> Result<()> {
    let mut csv = String::from(
        "interval,t_start,t_end,objective,iterations,pd_residual,pd_residual_max,p_residual,p_residual_mae,repair_residual",
    );
    for label in ctx.scale.labels() {
        write!(csv, ",h_{label}").unwrap();
    }
    csv.push('\n');
    for r in &report.intervals {
        write!(
            csv,
            "{},{:.6},{:.6},{:.10e},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            r.interval,
            r.t_start,
            r.t_end,
            r.objective,
            r.iterations,
            r.pd_residual,
            r.pd_residual_max,
            r.p_residual,
            r.p_residual_mae,
            r.repair_residual
        )
        .unwrap();
        for h in &r.h {
            write!(csv, ",{h:.10e}").unwrap();
        }
        csv.push('\n');
    }
    write_text(&ctx.out_path("calibration_report.csv"), &csv)?;

    let mut text = String::new();
    writeln!(text, "piecewise calibration: {} intervals", report.intervals.len()).unwrap();
    for r in &report.intervals {
        writeln!(
            text,
            "interval {} [{:.4}, {:.4}]: objective {:.3e} in {} iterations; pd residual {:.3e} (max {:.3e}); p residual {:.3e} (mae {:.3e}); repair {:.3e}",
            r.interval,
            r.t_start,
            r.t_end,
            r.objective,
            r.iterations,
            r.pd_residual,
            r.pd_residual_max,
            r.p_residual,
            r.p_residual_mae,
            r.repair_residual
        )
        .unwrap();
    }
    writeln!(
        text,
        "mean repair residual: {:.3e}",
        report.total_repair_residual()
    )
    .unwrap();
    write_text(&ctx.out_path("calibration_report.txt"), &text)?;
    Ok(())
}

fn degenerate_columns(ctx: &Context, model: &PhctmcModel) -> Result<Vec<String>> {
    let q_matrix = model.transition(Measure::RiskNeutral, 0.0, model.schedule.horizon())?;
    let mut degenerate = Vec::new();
    for j in 0..ctx.scale.default_index() {
        if (0..ctx.scale.len()).all(|i| q_matrix[(i, j)] < 1e-4) {
            degenerate.push(ctx.scale.label(j).to_string());
        }
    }
    Ok(degenerate)
}

fn cmd_calibrate(ctx: &Context) -> Result<()> {
    let (model, report) = ctx.calibrate()?;

    for (k, (gen_p, gen_q)) in model
        .generators(Measure::Historical)
        .iter()
        .zip(model.generators(Measure::RiskNeutral))
        .enumerate()
    {
        write_raw_matrix_csv(&ctx.out_path(&format!("generator_p_{k}.csv")), &ctx.scale, gen_p.entries())?;
        write_raw_matrix_csv(&ctx.out_path(&format!("generator_q_{k}.csv")), &ctx.scale, gen_q.entries())?;
    }

    let mut summary = format!(
        "calibrated {} intervals; model written to model.json\n",
        model.n_intervals()
    );
    for r in &report.intervals {
        writeln!(
            summary,
            "interval {}: pd residual max {:.3e}, repair {:.3e}",
            r.interval, r.pd_residual_max, r.repair_residual
        )
        .unwrap();
    }
    let degenerate = degenerate_columns(ctx, &model)?;
    if !degenerate.is_empty() {
        writeln!(
            summary,
            "warning: risk-neutral transition matrix has vanishing columns: {}",
            degenerate.join(", ")
        )
        .unwrap();
    }
    write_text(&ctx.out_path("calibrate_summary.txt"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn matrix_mae(a: &SquareMatrix, b: &SquareMatrix) -> f64 {
    (a - b).iter().map(|x| x.abs()).sum::<f64>() / (a.nrows() * a.ncols()) as f64
}

fn cmd_simulate(ctx: &Context) -> Result<()> {
    let (model, _) = ctx.model()?;
    let measure = ctx.config.measure()?;
    let n_paths = ctx.config.simulation.n_paths;
    let seed = ctx.config.simulation.seed;

    let blocks = simulate_rating_blocks(&model, measure, n_paths, seed)?;
    let breakpoints = model.schedule.breakpoints().to_vec();

    let mut csv = String::from("measure,tenor_index,tenor,mae\n");
    let mut summary = format!(
        "simulated {} paths per rating under {} (seed {seed})\n",
        n_paths, measure
    );
    for (idx, &tenor) in breakpoints.iter().enumerate().skip(1) {
        let empirical = empirical_transition_matrix(&blocks, tenor)?;
        let analytic = model.transition(measure, 0.0, tenor)?;
        let mae = matrix_mae(&empirical, &analytic);
        write_matrix_csv(
            &ctx.out_path(&format!("empirical_{measure}_{idx}.csv")),
            &ctx.scale,
            &empirical,
        )?;
        writeln!(csv, "{measure},{idx},{tenor:.6},{mae:.10e}").unwrap();
        writeln!(summary, "t = {tenor:.4}: empirical vs analytic mae {mae:.3e}").unwrap();
    }
    write_text(&ctx.out_path("simulate_report.csv"), &csv)?;

    if ctx.config.simulation.dump_paths {
        let initial = ctx.config.simulation_initial_index()?;
        let mut dump = String::from("path,jump_time,state\n");
        for (pid, path) in blocks[initial].iter().enumerate() {
            writeln!(dump, "{pid},0.000000,{}", ctx.scale.label(path.initial)).unwrap();
            for &(t, s) in &path.jumps {
                writeln!(dump, "{pid},{t:.6},{}", ctx.scale.label(s)).unwrap();
            }
        }
        let name = format!("paths_{measure}.csv");
        write_text(&ctx.out_path(&name), &dump)?;
        writeln!(summary, "path dump written to {name}").unwrap();
    }
    write_text(&ctx.out_path("simulate_summary.txt"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn write_xva_reports(ctx: &Context, reports: &[XvaReport]) -> Result<()> {
    let mut csv = String::from(
        "regime,cdva,cdva_se,ccva,ccva_se,cbva,n_paths,bank_defaults,cpty_defaults\n",
    );
    let mut text = String::new();
    for r in reports {
        let fmt_se = |se: Option<f64>| se.map_or("nan".to_string(), |v| format!("{v:.10e}"));
        writeln!(
            csv,
            "{},{:.10e},{},{:.10e},{},{:.10e},{},{},{}",
            r.regime,
            r.cdva.value,
            fmt_se(r.cdva.standard_error),
            r.ccva.value,
            fmt_se(r.ccva.standard_error),
            r.cbva,
            r.n_paths,
            r.bank_defaults,
            r.cpty_defaults
        )
        .unwrap();
        writeln!(
            text,
            "{:>18}: CDVA {:>12.2} (se {}), CCVA {:>12.2} (se {}), CBVA {:>12.2} [{} bank / {} cpty defaults]",
            r.regime.to_string(),
            r.cdva.value,
            r.cdva
                .standard_error
                .map_or("undefined".into(), |v| format!("{v:.2}")),
            r.ccva.value,
            r.ccva
                .standard_error
                .map_or("undefined".into(), |v| format!("{v:.2}")),
            r.cbva,
            r.bank_defaults,
            r.cpty_defaults
        )
        .unwrap();
    }
    write_text(&ctx.out_path("xva_report.csv"), &csv)?;
    write_text(&ctx.out_path("xva_report.txt"), &text)?;
    println!("{text}");
    Ok(())
}

fn write_trajectory_dump(
    ctx: &Context,
    scenarios: &crate::xva::ScenarioSet,
    agreement: &CollateralAgreement,
) -> Result<()> {
    // One representative scenario is enough for the diagnostic panels.
    let idx = 0;
    let portfolio = &scenarios.portfolio_paths[idx];
    let bank = &scenarios.bank_paths[idx];
    let cpty = &scenarios.cpty_paths[idx];
    let collateral =
        collateral_account_path(portfolio, bank, cpty, agreement, &scenarios.grid)?;
    let mut dump = String::from(
        "t,portfolio,collateral,bank_rating,cpty_rating,bank_threshold,cpty_threshold\n",
    );
    for (j, &t) in scenarios.grid.iter().enumerate() {
        let bank_rating = bank.state_at(t);
        let cpty_rating = cpty.state_at(t);
        writeln!(
            dump,
            "{t:.6},{:.6},{:.6},{},{},{:.6},{:.6}",
            portfolio.values[j],
            collateral.values[j],
            ctx.scale.label(bank_rating),
            ctx.scale.label(cpty_rating),
            agreement.bank_threshold(bank_rating),
            agreement.cpty_threshold(cpty_rating)
        )
        .unwrap();
    }
    write_text(
        &ctx.out_path(&format!("trajectory_{}.csv", agreement.regime)),
        &dump,
    )?;
    Ok(())
}

fn cmd_xva(ctx: &Context) -> Result<()> {
    let (model, _) = ctx.model()?;
    let pm = ctx.config.portfolio_model();
    let cfg = ctx.config.xva_config()?;
    let regimes = ctx.config.regimes()?;

    let scenarios = simulate_scenario_set(&model, &pm, &cfg)?;
    let mut reports = Vec::new();
    for regime in regimes {
        let agreement = CollateralAgreement::for_regime(
            regime,
            &ctx.config.thresholds.bank,
            &ctx.config.thresholds.cpty,
        )?;
        let report = evaluate_xva(&scenarios, &agreement, &cfg, ctx.scale.default_index())?;
        write_trajectory_dump(ctx, &scenarios, &agreement)?;
        reports.push(report);
    }
    write_xva_reports(ctx, &reports)?;
    write_predefault_outputs(ctx, &model, cfg.n_paths, cfg.seed)?;
    Ok(())
}

fn write_predefault_outputs(
    ctx: &Context,
    model: &PhctmcModel,
    n_paths: usize,
    seed: u64,
) -> Result<()> {
    let mut mass_csv = String::from("rating,mass_p,mass_q\n");
    let mut masses = Vec::new();
    for measure in [Measure::Historical, Measure::RiskNeutral] {
        let blocks = simulate_rating_blocks(model, measure, n_paths, seed)?;
        let hist = pre_default_distribution(&blocks, ctx.scale.default_index())?;
        let tag = match measure {
            Measure::Historical => "p",
            Measure::RiskNeutral => "q",
        };
        write_raw_matrix_csv(&ctx.out_path(&format!("predefault_{tag}.csv")), &ctx.scale, &hist)?;
        masses.push(conditional_pre_default_mass(&hist));
    }
    for (j, label) in ctx.scale.labels().iter().enumerate() {
        writeln!(mass_csv, "{label},{:.10e},{:.10e}", masses[0][j], masses[1][j]).unwrap();
    }
    write_text(&ctx.out_path("predefault_mass.csv"), &mass_csv)?;
    Ok(())
}

fn cmd_predefault(ctx: &Context) -> Result<()> {
    let (model, _) = ctx.model()?;
    let n_paths = ctx.config.simulation.n_paths;
    let seed = ctx.config.simulation.seed;
    write_predefault_outputs(ctx, &model, n_paths, seed)?;

    let mut summary = format!(
        "pre-default distribution from {} paths per rating (seed {seed})\n",
        n_paths
    );
    writeln!(
        summary,
        "wrote predefault_p.csv, predefault_q.csv, predefault_mass.csv"
    )
    .unwrap();
    write_text(&ctx.out_path("predefault_summary.txt"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn cmd_report(ctx: &Context) -> Result<()> {
    cmd_adjust(ctx)?;
    cmd_calibrate(ctx)?;
    cmd_simulate(ctx)?;
    cmd_xva(ctx)?;
    cmd_predefault(ctx)?;

    let model_pd = {
        let (model, _) = ctx.model()?;
        let horizon = model.schedule.horizon();
        model.default_probabilities(Measure::RiskNeutral, horizon)?
    };
    let mut summary = String::from("pipeline complete; key outputs:\n");
    writeln!(summary, "  model.json, calibration_report.csv, xva_report.csv").unwrap();
    writeln!(summary, "  terminal risk-neutral default probabilities:").unwrap();
    let pd_vec: DVector<f64> = model_pd;
    for (i, label) in ctx.scale.labels().iter().enumerate() {
        writeln!(summary, "    {label}: {:.6}", pd_vec[i]).unwrap();
    }
    write_text(&ctx.out_path("summary.txt"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
