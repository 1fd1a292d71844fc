use std::fs;
use std::path::{Path, PathBuf};

use gmle_mix::ci::{ci_for_data, CellSchemeConfig, CiConfig, CiResult};
use gmle_mix::estimators::{Estimate, EstimateSet};
use gmle_mix::grid::MixtureFile;
use gmle_mix::models::{CountObservation, PoissonStratumKernel};
use gmle_mix::npmle::{EmConfig, EmSummary};
use gmle_mix::sim::{
    probe_over_seeds, replication_rng, run_simulation, thin_observations, Fitter, GridConfig,
    ModelSpec, ProbeSummary, SimulationConfig, StratumTruth, PROTOCOL_GRID_POINTS,
};
use serde::Serialize;

use crate::data::{read_dataset, write_posterior_means};
use crate::{CiArgs, CliError, FitArgs, ModelArgs, ProbeArgs, SimulateArgs};

pub fn parse_model(text: &str) -> Result<ModelSpec, CliError> {
    let bad = || {
        CliError::Input(format!(
            "unknown model {text:?}; expected `poisson` or `binomial:<kappa>`"
        ))
    };
    match text.trim().split_once(':') {
        None if text.trim() == "poisson" => Ok(ModelSpec::PoissonSizes),
        Some(("binomial", kappa)) => {
            let kappa = kappa.trim().parse::<u32>().map_err(|_| bad())?;
            if kappa == 0 {
                return Err(CliError::Input("binomial kappa must be at least 1".into()));
            }
            Ok(ModelSpec::BinomialSizes { kappa })
        }
        _ => Err(bad()),
    }
}

fn grid_for(
    args: &ModelArgs,
    model: &ModelSpec,
    data: Option<&[CountObservation]>,
) -> Result<GridConfig, CliError> {
    let grid = match (&args.grid, data) {
        (Some(text), _) => GridConfig::parse(text, model)?,
        (None, Some(data)) => GridConfig::for_data(model, data, PROTOCOL_GRID_POINTS)?,
        (None, None) => GridConfig::default_for(model, PROTOCOL_GRID_POINTS),
    };
    Ok(grid)
}

fn em_config(iters: usize) -> Result<EmConfig, CliError> {
    if iters == 0 {
        return Err(CliError::Input("--iters must be at least 1".into()));
    }
    Ok(EmConfig::iterations(iters))
}

fn emit<T: Serialize>(value: &T, output: Option<&Path>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Input(format!("cannot serialise report: {e}")))?;
    match output {
        Some(path) => write_file(path, &(json + "\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn show(e: &Estimate) -> String {
    match e {
        Estimate::Value(v) => format!("{v:.4}"),
        Estimate::Undefined { empty_strata } => format!("undefined ({empty_strata} empty strata)"),
    }
}

#[derive(Serialize)]
struct Thinning {
    retain_prob: f64,
    seed: u64,
}

#[derive(Serialize)]
struct FitReport {
    model: ModelSpec,
    grid: GridConfig,
    em_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    thinning: Option<Thinning>,
    n_strata: usize,
    empty_strata: usize,
    naive: Estimate,
    naive_nonempty: Estimate,
    extreme_collapse: Estimate,
    gmle: f64,
    em: EmSummary,
    mixture: MixtureFile,
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let model = parse_model(&args.model.model)?;
    let em = em_config(args.model.iters)?;
    let dataset = read_dataset(&args.data)?;
    let (observations, thinning) = match args.retain_prob {
        None => (dataset.observations.clone(), None),
        Some(gamma) => {
            let mut rng = replication_rng(args.seed, 0);
            let thinned = thin_observations(&dataset.observations, gamma, &mut rng)?;
            (
                thinned,
                Some(Thinning {
                    retain_prob: gamma,
                    seed: args.seed,
                }),
            )
        }
    };
    let grid = grid_for(&args.model, &model, Some(&observations))?;
    let fitter = Fitter::new(&model, &grid)?;
    let (set, report) = fitter.fit(&observations, &em)?;
    let EstimateSet {
        n_strata,
        empty_strata,
        naive,
        naive_nonempty,
        extreme_collapse,
        gmle,
        posterior_means,
    } = set;

    if let Some(path) = &args.posterior {
        write_posterior_means(path, &dataset, &observations, &posterior_means)?;
    }
    let mixture = MixtureFile {
        atoms: fitter.atom_coords(),
        weights: report.weights.weights().to_vec(),
    };
    let out = FitReport {
        model,
        grid,
        em_iters: em.max_iters,
        thinning,
        n_strata,
        empty_strata,
        naive,
        naive_nonempty,
        extreme_collapse,
        gmle,
        em: report.summary(args.trace),
        mixture,
    };
    if args.output.is_some() {
        println!(
            "strata {n_strata} (empty {empty_strata}); naive {}; naive (K>0) {}; extreme collapse {}; GMLE {gmle:.4}",
            show(&out.naive),
            show(&out.naive_nonempty),
            show(&out.extreme_collapse),
        );
        if let Some(t) = &out.thinning {
            println!("thinned with retain_prob {} seed {}", t.retain_prob, t.seed);
        }
    }
    emit(&out, args.output.as_deref())
}

#[derive(Serialize)]
struct CiReport {
    model: ModelSpec,
    grid: GridConfig,
    n_strata: usize,
    cell_labels: Vec<String>,
    cell_counts: Vec<u64>,
    #[serde(flatten)]
    result: CiResult,
}

pub fn ci(args: &CiArgs) -> Result<(), CliError> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Input(format!(
            "--alpha must lie in (0, 1), got {}",
            args.alpha
        )));
    }
    let model = parse_model(&args.model.model)?;
    let dataset = read_dataset(&args.data)?;
    let data = &dataset.observations;
    let grid = grid_for(&args.model, &model, Some(data))?;
    let fitter = Fitter::new(&model, &grid)?;
    let scheme_cfg = CellSchemeConfig::default();
    let cfg = CiConfig::default();
    let (scheme, result) = match &fitter {
        Fitter::Poisson { grid, eta } => ci_for_data(
            &PoissonStratumKernel,
            grid,
            data,
            eta,
            args.alpha,
            &scheme_cfg,
            &cfg,
        )?,
        Fitter::Binomial { kernel, grid, eta } => {
            ci_for_data(kernel, grid, data, eta, args.alpha, &scheme_cfg, &cfg)?
        }
    };
    let counts = scheme.counts(data)?;
    let out = CiReport {
        model,
        grid,
        n_strata: data.len(),
        cell_labels: scheme.labels(),
        cell_counts: counts.counts().to_vec(),
        result,
    };
    if args.output.is_some() {
        println!(
            "{:.0}% interval [{:.4}, {:.4}] from {} cells",
            100.0 * (1.0 - args.alpha),
            out.result.eta_lower,
            out.result.eta_upper,
            out.result.cells
        );
    }
    emit(&out, args.output.as_deref())
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))?;
    let mut config: SimulationConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(iters) = args.iters {
        config.em = EmConfig {
            max_iters: em_config(iters)?.max_iters,
            ..config.em
        };
    }
    if let Some(reps) = args.replications {
        config.replications = reps;
    }
    if config.replications == 0 {
        return Err(CliError::Input("replications must be at least 1".into()));
    }
    if let Some(text) = &args.grid {
        match text.trim().parse::<usize>() {
            Ok(n) => {
                config.grid_points = n;
                config.grid = None;
            }
            Err(_) => {
                let model = config
                    .rows
                    .first()
                    .map(|r| r.population.model)
                    .ok_or_else(|| CliError::Input("simulation config has no rows".into()))?;
                config.grid = Some(GridConfig::parse(text, &model)?);
            }
        }
    }
    let table = run_simulation(&config)?;
    let rendered = table.render();
    if let Some(stem) = &args.output {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)
                .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        }
        let json = serde_json::to_string_pretty(&table)
            .map_err(|e| CliError::Input(format!("cannot serialise results: {e}")))?;
        write_file(&with_extension(stem, "json"), &(json + "\n"))?;
        write_file(&with_extension(stem, "txt"), &rendered)?;
    }
    print!("{rendered}");
    Ok(())
}

fn with_extension(stem: &Path, ext: &str) -> PathBuf {
    let mut name = stem.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| CliError::Input(format!("cannot parse {what} entry {s:?}")))
        })
        .collect()
}

fn parse_thetas(text: &str) -> Result<Vec<StratumTruth>, CliError> {
    text.split(',')
        .map(|pair| {
            let bad = || CliError::Input(format!("cannot parse theta {pair:?}; expected size:p"));
            let (size, p) = pair.trim().split_once(':').ok_or_else(bad)?;
            Ok(StratumTruth {
                size: size.trim().parse().map_err(|_| bad())?,
                p: p.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ProbeReport {
    model: ModelSpec,
    grid: GridConfig,
    em_iters: usize,
    thetas: Vec<StratumTruth>,
    summaries: Vec<ProbeSummary>,
}

pub fn probe(args: &ProbeArgs) -> Result<(), CliError> {
    let model = parse_model(&args.model.model)?;
    let em = em_config(args.model.iters)?;
    let grid = grid_for(&args.model, &model, None)?;
    let thetas = parse_thetas(&args.thetas)?;
    let sizes: Vec<usize> = parse_list(&args.sizes, "size")?;
    if args.seeds == 0 {
        return Err(CliError::Input("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|s| args.seed.wrapping_add(s)).collect();
    let summaries = probe_over_seeds(&thetas, &model, &grid, &em, &sizes, &seeds)?;
    if args.output.is_some() {
        println!(
            "{:>8}  {:>18}  {:>18}",
            "n", "median discrepancy", "median mean disc."
        );
        for s in &summaries {
            println!(
                "{:>8}  {:>18.5}  {:>18.5}",
                s.n, s.median_discrepancy, s.median_mean_discrepancy
            );
        }
    }
    emit(
        &ProbeReport {
            model,
            grid,
            em_iters: em.max_iters,
            thetas,
            summaries,
        },
        args.output.as_deref(),
    )
}
