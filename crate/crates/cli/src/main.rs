use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spillover_did::did::{self, DidSpec, Estimand};
use spillover_did::error::Error;
use spillover_did::exposure::{compute_exposure, ExposureMatrix, ExposureSpec, TreatedSet};
use spillover_did::montecarlo::{
    oracle_configs, oracle_decomposition_check, run_grid, Assignment, DgpConfig, GridSpec, Scale,
};
use spillover_did::panel::{load_panel, PanelDataset, PanelSchema, TreatmentColumn};
use spillover_did::regression::{Kernel, VcovSpec};
use spillover_did::spatial::{grid_points, DistanceMatrix, Geometry, Metric, PointSet};
use spillover_did::staggered::{estimate_staggered, EventWindow, MenuBlock};
use spillover_did::tidy::{CoefficientRow, CoefficientTable};

const THREADS_ENV: &str = "SPILLOVER_DID_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "spillover-did",
    version,
    about = "Difference-in-differences with spatial spillovers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-way fixed-effects estimate of a direct, total or switching effect.
    Estimate(EstimateArgs),
    /// Two-stage estimator for staggered adoption.
    Staggered(StaggeredArgs),
    /// Monte Carlo studies on a simulated grid.
    Simulate(SimulateArgs),
    /// Classic and total estimates side by side, with the implied control spillover.
    Decompose(DecomposeArgs),
    /// Writes the exposure of every observation.
    Exposure(ExposureCmdArgs),
}

#[derive(Args, Debug)]
struct PanelArgs {
    /// Panel file with a header row.
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, default_value = "unit")]
    unit_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// 0/1 treatment indicator column [default: treated].
    #[arg(long, conflicts_with = "start_col")]
    treated_col: Option<String>,
    /// First-treated-period column (empty for never treated).
    #[arg(long)]
    start_col: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

#[derive(Args, Debug)]
struct GeoArgs {
    /// Coordinates file: unit_id, x, y (or lon, lat).
    #[arg(long)]
    coords: Option<PathBuf>,
    /// Pairwise distances file: unit_i, unit_j, distance (miles).
    #[arg(long, conflicts_with = "coords")]
    distances: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::Planar)]
    metric: MetricArg,
}

#[derive(Args, Debug)]
struct ExposureArgs {
    /// Exposure radius in miles (decay cutoff with --decay-alpha).
    #[arg(long)]
    dbar: Option<f64>,
    /// Comma-separated ring cut points, e.g. 0,20,30,40.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["dbar", "decay_alpha"])]
    rings: Option<Vec<f64>>,
    /// Exponential decay rate per mile.
    #[arg(long)]
    decay_alpha: Option<f64>,
    /// Count treated neighbours instead of an indicator.
    #[arg(long)]
    additive: bool,
    /// Measure exposure to every ever-treated unit in every period.
    #[arg(long)]
    ever_treated: bool,
}

#[derive(Args, Debug)]
struct VcovArgs {
    #[arg(long, value_enum, default_value_t = VcovArg::Iid)]
    vcov: VcovArg,
    /// Conley distance cutoff in miles.
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long, value_enum, default_value_t = KernelArg::Uniform)]
    kernel: KernelArg,
    /// Skip the n/(n−k) finite-sample scaling.
    #[arg(long)]
    no_small_sample: bool,
}

#[derive(Args, Debug)]
struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Output directory (created if missing). Prints to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    geo: GeoArgs,
    #[command(flatten)]
    exposure: ExposureArgs,
    #[arg(long, value_enum, default_value_t = EstimandArg::Total)]
    estimand: EstimandArg,
    /// Spillover regressors: the indicator S (or ring dummies) or the exposure h itself.
    #[arg(long, value_enum, default_value_t = TermsArg::Indicator)]
    spillover_terms: TermsArg,
    /// Exposure level for the switching effect.
    #[arg(long)]
    h_star: Option<f64>,
    /// Matching tolerance around --h-star.
    #[arg(long)]
    tol: Option<f64>,
    #[command(flatten)]
    vcov: VcovArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    geo: GeoArgs,
    #[command(flatten)]
    exposure: ExposureArgs,
    #[command(flatten)]
    vcov: VcovArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct StaggeredArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    geo: GeoArgs,
    #[command(flatten)]
    exposure: ExposureArgs,
    /// Earliest relative period (default: observed support).
    #[arg(long, allow_hyphen_values = true)]
    window_min: Option<i64>,
    /// Latest relative period (default: observed support).
    #[arg(long, allow_hyphen_values = true)]
    window_max: Option<i64>,
    /// Fold relative periods outside the window into its end points.
    #[arg(long)]
    bin: bool,
    /// Second-stage blocks.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MenuArg::TotalEsPre, MenuArg::SpillControl])]
    menu: Vec<MenuArg>,
    /// Unit-bootstrap replications for standard errors (0: analytic).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = GridArg::Misspecification)]
    grid: GridArg,
    #[arg(long, default_value_t = 500)]
    n_sims: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    rows: usize,
    #[arg(long, default_value_t = 40)]
    cols: usize,
    /// Grid spacing in miles.
    #[arg(long, default_value_t = 10.0)]
    spacing: f64,
    #[arg(long, default_value_t = 0.1)]
    p_treated: f64,
    #[arg(long, value_enum, default_value_t = AssignmentArg::Clustered)]
    assignment: AssignmentArg,
    /// Mean spillover on control units.
    #[arg(long, default_value_t = -0.263, allow_hyphen_values = true)]
    target: f64,
    /// Estimate with treated-unit spillover terms and target the direct effect.
    #[arg(long)]
    with_treated_terms: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct ExposureCmdArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    geo: GeoArgs,
    #[command(flatten)]
    exposure: ExposureArgs,
    /// Output directory (created if missing). Prints to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MetricArg {
    Planar,
    Haversine,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum VcovArg {
    Iid,
    Hc1,
    Cluster,
    Conley,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum KernelArg {
    Uniform,
    Bartlett,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EstimandArg {
    Classic,
    Total,
    Direct,
    Switching,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TermsArg {
    Indicator,
    Exposure,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MenuArg {
    Total,
    TotalEs,
    TotalEsPre,
    Direct,
    DirectEs,
    SpillControl,
    SpillControlEs,
    SpillControlRings,
    SpillTreated,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GridArg {
    Misspecification,
    Oracle,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AssignmentArg {
    Uniform,
    Clustered,
}

/// Usage problems exit with 2, estimation failures with 1.
enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::MissingColumn(_)
            | Error::DuplicateKey { .. }
            | Error::NonAbsorbingTreatment { .. }
            | Error::InvalidNumber { .. }
            | Error::Csv(_)
            | Error::Io(_)
            | Error::UnknownUnit(_)
            | Error::NegativeRadius(_)
            | Error::InvalidCoordinate { .. }
            | Error::MissingCoordinates(_)
            | Error::InvalidExposureSpec(_)
            | Error::ConleyWithoutCoordinates
            | Error::InvalidSpec(_)
            | Error::InvalidConfig(_) => Failure::Usage(msg),
            _ => Failure::Run(msg),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let body: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            eprintln!("error: {}", one_line(body.join(" ").trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {}", one_line(&m));
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n >= 1 => n,
        _ => return usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Run(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Staggered(a) => cmd_staggered(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Exposure(a) => cmd_exposure(a),
    }
}

fn open(path: &Path, flag: &str) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Usage(format!("{flag} {}: {e}", path.display())))
}

fn delimiter(c: char) -> CliResult<u8> {
    if c.is_ascii() {
        Ok(c as u8)
    } else {
        usage(format!("--delimiter must be a single ASCII character, got `{c}`"))
    }
}

fn load(args: &PanelArgs) -> CliResult<PanelDataset> {
    let treatment = match (&args.treated_col, &args.start_col) {
        (_, Some(s)) => TreatmentColumn::StartPeriod(s.clone()),
        (Some(t), None) => TreatmentColumn::Indicator(t.clone()),
        (None, None) => TreatmentColumn::Indicator("treated".into()),
    };
    let schema = PanelSchema {
        unit: args.unit_col.clone(),
        time: args.time_col.clone(),
        outcome: args.outcome_col.clone(),
        treatment,
        covariates: args.covariates.clone(),
        delimiter: delimiter(args.delimiter)?,
    };
    let panel = load_panel(open(&args.panel, "--panel")?, &schema)?;
    for r in panel.rejected() {
        eprintln!(
            "warning: line {}: unit `{}` dropped: {}",
            r.line, r.unit, r.reason
        );
    }
    Ok(panel)
}

fn geometry(args: &GeoArgs, cell: f64) -> CliResult<Option<Geometry>> {
    if let Some(p) = &args.coords {
        let metric = match args.metric {
            MetricArg::Planar => Metric::Planar,
            MetricArg::Haversine => Metric::Haversine,
        };
        let points = PointSet::load(open(p, "--coords")?, metric, b',')?;
        return Ok(Some(Geometry::from_points(points, cell)));
    }
    if let Some(p) = &args.distances {
        return Ok(Some(Geometry::Matrix(DistanceMatrix::load(
            open(p, "--distances")?,
            b',',
        )?)));
    }
    Ok(None)
}

fn exposure_spec(args: &ExposureArgs) -> CliResult<Option<ExposureSpec>> {
    let spec = match (&args.rings, args.decay_alpha, args.dbar) {
        (Some(cuts), _, _) => {
            let cuts = cuts.clone();
            if args.additive {
                ExposureSpec::RingsAdditive { cuts }
            } else {
                ExposureSpec::Rings { cuts }
            }
        }
        (None, Some(alpha), dbar) => match (args.additive, dbar) {
            (true, None) => ExposureSpec::DecayCount { alpha },
            (true, Some(_)) => {
                return usage("--dbar cannot be combined with --decay-alpha --additive (no cutoff)")
            }
            (false, Some(cutoff)) => ExposureSpec::Decay { alpha, cutoff },
            (false, None) => return usage("--decay-alpha requires --dbar as the decay cutoff"),
        },
        (None, None, Some(dbar)) => {
            if args.additive {
                ExposureSpec::WithinCount { dbar }
            } else {
                ExposureSpec::WithinIndicator { dbar }
            }
        }
        (None, None, None) => {
            if args.additive || args.ever_treated {
                return usage("--additive and --ever-treated need --dbar, --rings or --decay-alpha");
            }
            return Ok(None);
        }
    };
    spec.validate()?;
    Ok(Some(spec))
}

fn treated_set(args: &ExposureArgs) -> TreatedSet {
    if args.ever_treated {
        TreatedSet::EverTreated
    } else {
        TreatedSet::Contemporaneous
    }
}

fn vcov_spec(args: &VcovArgs) -> CliResult<VcovSpec> {
    if args.cutoff.is_some() && args.vcov != VcovArg::Conley {
        return usage("--cutoff only applies to --vcov conley");
    }
    let v = match args.vcov {
        VcovArg::Iid => VcovSpec::Iid,
        VcovArg::Hc1 => VcovSpec::Hc1,
        VcovArg::Cluster => VcovSpec::ClusterByUnit,
        VcovArg::Conley => {
            let Some(cutoff) = args.cutoff else {
                return usage("--vcov conley requires --cutoff");
            };
            let kernel = match args.kernel {
                KernelArg::Uniform => Kernel::Uniform,
                KernelArg::Bartlett => Kernel::Bartlett,
            };
            VcovSpec::Conley { cutoff, kernel }
        }
    };
    v.validate()?;
    Ok(v)
}

/// Panel, optional geometry and optional exposure for one command.
struct Inputs {
    panel: PanelDataset,
    geometry: Option<Geometry>,
    exposure: Option<ExposureMatrix>,
}

fn inputs(
    panel: &PanelArgs,
    geo: &GeoArgs,
    exposure: &ExposureArgs,
    vcov: Option<&VcovSpec>,
) -> CliResult<Inputs> {
    let spec = exposure_spec(exposure)?;
    let has_geo = geo.coords.is_some() || geo.distances.is_some();
    if matches!(vcov, Some(VcovSpec::Conley { .. })) && !has_geo {
        return usage("conley requires coordinates (--coords or --distances)");
    }
    if spec.is_some() && !has_geo {
        return usage("exposure flags require coordinates (--coords or --distances)");
    }
    let cell = spec
        .as_ref()
        .map(|s| s.outer_radius())
        .filter(|r| r.is_finite() && *r > 0.0)
        .unwrap_or(50.0);
    let panel = load(panel)?;
    let geometry = geometry(geo, cell)?;
    let exposure = match (&spec, &geometry) {
        (Some(s), Some(g)) => Some(compute_exposure(&panel, g, s, treated_set(exposure))?),
        _ => None,
    };
    Ok(Inputs {
        panel,
        geometry,
        exposure,
    })
}

fn write_table(table: &CoefficientTable, out: &OutputArgs, stem: &str) -> CliResult<()> {
    match &out.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let ext = match out.format {
                Format::Csv => "csv",
                Format::Json => "json",
            };
            let file = File::create(dir.join(format!("{stem}.{ext}")))?;
            emit(table, out.format, BufWriter::new(file))
        }
        None => emit(table, out.format, io::stdout().lock()),
    }
}

fn emit<W: Write>(table: &CoefficientTable, format: Format, sink: W) -> CliResult<()> {
    match format {
        Format::Csv => table.write_csv(sink)?,
        Format::Json => table.write_json(sink)?,
    }
    Ok(())
}

fn report_messages(table: &CoefficientTable) {
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    for n in &table.notes {
        eprintln!("note: {n}");
    }
}

fn estimand(a: &EstimateArgs, exposure: Option<&ExposureSpec>) -> CliResult<Estimand> {
    let rings = exposure.is_some_and(|e| e.is_rings());
    let by_h = a.spillover_terms == TermsArg::Exposure;
    if a.estimand != EstimandArg::Switching && (a.h_star.is_some() || a.tol.is_some()) {
        return usage("--h-star and --tol only apply to --estimand switching");
    }
    let e = match a.estimand {
        EstimandArg::Classic => Estimand::Classic,
        EstimandArg::Total if rings => Estimand::TotalRings,
        EstimandArg::Total if by_h => Estimand::TotalExposure,
        EstimandArg::Total => Estimand::Total,
        EstimandArg::Direct if rings => Estimand::DirectRings,
        EstimandArg::Direct if by_h => Estimand::DirectExposure,
        EstimandArg::Direct => Estimand::Direct,
        EstimandArg::Switching => {
            let Some(h_star) = a.h_star else {
                return usage("--estimand switching requires --h-star");
            };
            Estimand::Switching { h_star, tol: a.tol }
        }
    };
    if e != Estimand::Classic && exposure.is_none() {
        return usage(format!(
            "--estimand {} requires an exposure flag (--dbar, --rings or --decay-alpha)",
            e.label()
        ));
    }
    Ok(e)
}

fn cmd_estimate(a: EstimateArgs) -> CliResult<()> {
    let vcov = vcov_spec(&a.vcov)?;
    let spec = exposure_spec(&a.exposure)?;
    let estimand = estimand(&a, spec.as_ref())?;
    let inp = inputs(&a.panel, &a.geo, &a.exposure, Some(&vcov))?;
    let did_spec = DidSpec {
        estimand,
        vcov,
        covariates: a.panel.covariates.clone(),
        small_sample: !a.vcov.no_small_sample,
    };
    let fit = did::estimate(
        &inp.panel,
        inp.exposure.as_ref(),
        &did_spec,
        inp.geometry.as_ref(),
    )?;
    let table = CoefficientTable::from_fit(&fit);
    report_messages(&table);
    write_table(&table, &a.output, "coefficients")
}

fn cmd_decompose(a: DecomposeArgs) -> CliResult<()> {
    let vcov = vcov_spec(&a.vcov)?;
    let Some(spec) = exposure_spec(&a.exposure)? else {
        return usage("decompose requires an exposure flag (--dbar, --rings or --decay-alpha)");
    };
    let inp = inputs(&a.panel, &a.geo, &a.exposure, Some(&vcov))?;
    let fit_for = |estimand| {
        let s = DidSpec {
            estimand,
            vcov,
            covariates: a.panel.covariates.clone(),
            small_sample: !a.vcov.no_small_sample,
        };
        did::estimate(&inp.panel, inp.exposure.as_ref(), &s, inp.geometry.as_ref())
    };
    let classic = fit_for(Estimand::Classic)?;
    let total = fit_for(if spec.is_rings() {
        Estimand::TotalRings
    } else {
        Estimand::Total
    })?;
    let tc = classic.coef("tau").expect("tau is always estimated");
    let tt = total.coef("tau").expect("tau is always estimated");
    let row = |term: &str, estimate: f64, se: f64, group: &str| CoefficientRow {
        term: term.into(),
        estimate,
        std_error: se,
        group: group.into(),
        relative_time: None,
    };
    let rows = vec![
        row(
            "tau_classic",
            tc,
            classic.std_error("tau").unwrap_or(f64::NAN),
            "classic",
        ),
        row(
            "tau_total",
            tt,
            total.std_error("tau").unwrap_or(f64::NAN),
            "total",
        ),
        row("spill_control", tt - tc, f64::NAN, "derived"),
    ];
    let k = rows.len();
    let mut vcov_m = vec![vec![f64::NAN; k]; k];
    for (j, r) in rows.iter().enumerate() {
        vcov_m[j][j] = r.std_error * r.std_error;
    }
    let mut warnings = classic.warnings.clone();
    warnings.extend(total.warnings.iter().cloned());
    let table = CoefficientTable {
        rows,
        vcov: vcov_m,
        vcov_label: vcov.label(),
        n: total.n,
        dof: total.dof,
        clipped: classic.clipped || total.clipped,
        warnings,
        notes: vec![
            "spill_control = tau_total - tau_classic estimates the mean spillover on control \
             units; it is derived from two separate fits and has no standard error"
                .into(),
        ],
    };
    report_messages(&table);
    write_table(&table, &a.output, "decomposition")
}

fn menu_block(m: MenuArg) -> MenuBlock {
    match m {
        MenuArg::Total => MenuBlock::Total,
        MenuArg::TotalEs => MenuBlock::TotalEventStudy { pre_periods: false },
        MenuArg::TotalEsPre => MenuBlock::TotalEventStudy { pre_periods: true },
        MenuArg::Direct => MenuBlock::Direct,
        MenuArg::DirectEs => MenuBlock::DirectEventStudy,
        MenuArg::SpillControl => MenuBlock::SpilloverControl,
        MenuArg::SpillControlEs => MenuBlock::SpilloverControlEventStudy,
        MenuArg::SpillControlRings => MenuBlock::SpilloverControlRings,
        MenuArg::SpillTreated => MenuBlock::SpilloverTreated,
    }
}

fn cmd_staggered(a: StaggeredArgs) -> CliResult<()> {
    if a.bootstrap > 0 && a.seed.is_none() {
        return usage("--bootstrap requires --seed");
    }
    if exposure_spec(&a.exposure)?.is_none() {
        return usage("staggered requires an exposure flag (--dbar, --rings or --decay-alpha)");
    }
    if !a.panel.covariates.is_empty() {
        return usage("--covariates is not supported by the staggered estimator");
    }
    let inp = inputs(&a.panel, &a.geo, &a.exposure, None)?;
    let window = EventWindow {
        min: a.window_min,
        max: a.window_max,
        bin: a.bin,
    };
    let menu: Vec<MenuBlock> = a.menu.iter().map(|&m| menu_block(m)).collect();
    let fit = estimate_staggered(
        &inp.panel,
        inp.exposure.as_ref().expect("checked above"),
        window,
        &menu,
        a.bootstrap,
        a.seed.unwrap_or(0),
    )?;
    let mut table = CoefficientTable::from_fit(&fit.fit);
    if let Some(b) = &fit.bootstrap {
        table.vcov_label = format!("bootstrap({} replications, seed {})", b.replications, b.seed);
        if b.failed > 0 {
            table
                .warnings
                .push(format!("{} bootstrap replications failed", b.failed));
        }
    }
    report_messages(&table);
    write_table(&table, &a.output, "coefficients")
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    if a.n_sims == 0 {
        return usage("--n-sims must be at least 1");
    }
    if a.rows == 0 || a.cols == 0 || !(a.spacing > 0.0) {
        return usage("--rows, --cols and --spacing must be positive");
    }
    let assignment = match a.assignment {
        AssignmentArg::Uniform => Assignment::Uniform,
        AssignmentArg::Clustered => Assignment::Clustered { clusters: 1 },
    };
    match a.grid {
        GridArg::Misspecification => {
            let base = DgpConfig {
                points: grid_points(a.rows, a.cols, a.spacing),
                p_treated: a.p_treated,
                assignment,
                control_spillover: Scale::MeanTarget(a.target),
                ..DgpConfig::grid_default(ExposureSpec::WithinIndicator { dbar: 40.0 }, a.seed)
            };
            let grid = GridSpec {
                with_treated_terms: a.with_treated_terms,
                ..GridSpec::standard()
            };
            let report = run_grid(&base, &grid, a.n_sims)?;
            let table = report.format_tables();
            match &a.output.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    match a.output.format {
                        Format::Csv => report.write_csv(BufWriter::new(File::create(
                            dir.join("grid.csv"),
                        )?))?,
                        Format::Json => {
                            let mut f = BufWriter::new(File::create(dir.join("grid.json"))?);
                            serde_json::to_writer_pretty(&mut f, &report)
                                .map_err(|e| Failure::Run(e.to_string()))?;
                            f.write_all(b"\n")?;
                        }
                    }
                    std::fs::write(dir.join("grid.txt"), &table)?;
                }
                None => match a.output.format {
                    Format::Csv => report.write_csv(io::stdout().lock())?,
                    Format::Json => {
                        let s = serde_json::to_string_pretty(&report)
                            .map_err(|e| Failure::Run(e.to_string()))?;
                        println!("{s}");
                    }
                },
            }
            eprint!("{table}");
            Ok(())
        }
        GridArg::Oracle => {
            let mut reports = Vec::new();
            for (label, mut config) in oracle_configs(a.seed) {
                config.points = grid_points(a.rows, a.cols, a.spacing);
                reports.push(oracle_decomposition_check(&config, &label, a.n_sims)?);
            }
            let mut text = String::new();
            text.push_str("config,estimator,target,mean_estimate,mean_target,mean_diff,mc_se,n_ok,pass\n");
            for r in &reports {
                for row in &r.rows {
                    text.push_str(&format!(
                        "{},{},{},{:.8},{:.8},{:.8},{:.8},{},{}\n",
                        r.label,
                        row.estimator,
                        row.target,
                        row.mean_estimate,
                        row.mean_target,
                        row.mean_diff,
                        row.mc_se,
                        row.n_ok,
                        row.pass
                    ));
                }
            }
            match &a.output.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    match a.output.format {
                        Format::Csv => std::fs::write(dir.join("oracle.csv"), &text)?,
                        Format::Json => {
                            let s = serde_json::to_string_pretty(&reports)
                                .map_err(|e| Failure::Run(e.to_string()))?;
                            std::fs::write(dir.join("oracle.json"), s + "\n")?;
                        }
                    }
                }
                None => print!("{text}"),
            }
            if reports.iter().all(|r| r.passed()) {
                Ok(())
            } else {
                Err(Failure::Run("oracle check failed".into()))
            }
        }
    }
}

fn cmd_exposure(a: ExposureCmdArgs) -> CliResult<()> {
    if exposure_spec(&a.exposure)?.is_none() {
        return usage("exposure requires --dbar, --rings or --decay-alpha");
    }
    let inp = inputs(&a.panel, &a.geo, &a.exposure, None)?;
    let exposure = inp.exposure.expect("checked above");
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let f = BufWriter::new(File::create(dir.join("exposure.csv"))?);
            exposure.write_csv(&inp.panel, f)?;
        }
        None => exposure.write_csv(&inp.panel, io::stdout().lock())?,
    }
    Ok(())
}
