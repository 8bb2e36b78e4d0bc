use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use drsls::config::ProblemConfig;
use drsls::dataset::{dataset_to_json, generate_dataset, load_dataset, recover_residuals};
use drsls::io::write_atomic;
use drsls::sls::ControllerFile;
use drsls::synthesis::{grid_search_table, solve_saa, GammaRow, Method, ProblemData};
use drsls::validation::{
    bound_tightness, mismatch_sweep, validate, write_sweep_csv, write_trajectories_csv, ShiftInputs, SweepInput,
    SweepSettings, TightnessInput, ValidationSetup,
};
use drsls::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "drsls", version, about = "Distributionally robust SLS synthesis from trajectory data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// Override `gamma_grid`, e.g. `0.1,0.2,0.5`.
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
    /// Override `kappa`.
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training dataset described by `data_collection`.
    GenData {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize a controller from a dataset.
    Synth {
        config: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_parser = parse_method, default_value = "rr")]
        method: Method,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Roll a stored controller out on the true system.
    Validate {
        controller: PathBuf,
        config: PathBuf,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training dataset; adds the shift-bound report.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Random model-mismatch sweep over SAA and RR.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Shift bounds versus exact transport distances on fresh samples.
    Bounds {
        controller: PathBuf,
        config: PathBuf,
        dataset: PathBuf,
        /// Number of fresh disturbance sets.
        #[arg(long, default_value_t = 10)]
        sets: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "saa" => Ok(Method::Saa),
        "rr" => Ok(Method::Rr),
        _ => Err(format!("unknown method `{s}` (expected saa or rr)")),
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_CONFIG, message: format!("config error: {e}") }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NoFeasibleGamma { .. } | Error::NotOptimal(_) => EXIT_INFEASIBLE,
            Error::Numeric(_) | Error::SingularResponse { .. } => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path, overrides: &Overrides) -> CliResult<(ProblemConfig, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let text =
        String::from_utf8(bytes.clone()).map_err(|_| Failure::config(format!("{} is not UTF-8", path.display())))?;
    let mut cfg = ProblemConfig::from_json(&text).map_err(Failure::config)?;
    if let Some(g) = &overrides.gamma_grid {
        cfg.gamma_grid = g.clone();
    }
    if let Some(k) = overrides.kappa {
        cfg.kappa = k;
    }
    cfg.check().map_err(Failure::config)?;
    Ok((cfg, bytes))
}

/// Tracks everything needed for the run manifest and stamps artifacts with
/// the run id.
struct Run {
    command: &'static str,
    out: PathBuf,
    config_hash: String,
    run_id: String,
    seeds: Value,
    started: u64,
    outputs: Vec<String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Run {
    fn new(
        command: &'static str,
        out: &Path,
        config_bytes: &[u8],
        inputs: &[&[u8]],
        seeds: Value,
        params: Value,
    ) -> Self {
        let config_hash = sha256_hex(config_bytes);
        let mut h = Sha256::new();
        h.update(config_hash.as_bytes());
        h.update(command.as_bytes());
        for input in inputs {
            h.update(sha256_hex(input).as_bytes());
        }
        h.update(seeds.to_string().as_bytes());
        h.update(params.to_string().as_bytes());
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        Self {
            command,
            out: out.to_path_buf(),
            config_hash,
            run_id: hex::encode(h.finalize()),
            seeds,
            started: unix_now(),
            outputs: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, bytes)?;
        self.outputs.push(name.to_string());
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut v = serde_json::to_value(value).map_err(Error::from)?;
        if let Value::Object(map) = &mut v {
            map.insert("run_id".into(), Value::String(self.run_id.clone()));
        }
        let text = serde_json::to_string_pretty(&v).map_err(Error::from)?;
        self.write(name, text.as_bytes())
    }

    fn track(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn finish(&self) -> CliResult<()> {
        let manifest = json!({
            "run_id": self.run_id,
            "command": self.command,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "timestamps": { "started_unix": self.started, "finished_unix": unix_now() },
            "outputs": self.outputs,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
        write_atomic(&self.out.join("manifest.json"), text.as_bytes())?;
        Ok(())
    }
}

fn gamma_table_csv(rows: &[GammaRow]) -> String {
    let mut s = String::from("gamma,status,objective\n");
    for r in rows {
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let obj = if r.objective.is_finite() { r.objective.to_string() } else { String::new() };
        s.push_str(&format!("{},{},{}\n", r.gamma, status, obj));
    }
    s
}

fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let (cfg, bytes) = load_config(config, &Overrides::default())?;
    let dc = cfg.data_collection().map_err(Failure::config)?;
    let noise = seed.map_or(dc.noise, |s| dc.noise.with_seed(s));
    let mut run = Run::new("gen-data", out, &bytes, &[], json!({ "data": noise.seed }), json!({}));
    let data = generate_dataset(
        &dc.true_system,
        cfg.horizon,
        dc.samples,
        &cfg.x0_vec(),
        &cfg.k0().map_err(Failure::config)?,
        &noise,
    )?;
    let v: Value = serde_json::from_str(&dataset_to_json(&data)?).map_err(Error::from)?;
    run.write_json("dataset.json", &v)?;
    run.finish()?;
    println!("dataset: N={} T={} n={} m={}", data.len(), data.horizon, data.n, data.m);
    Ok(())
}

fn cmd_synth(config: &Path, dataset: &Path, method: Method, out: &Path, overrides: &Overrides) -> CliResult<()> {
    let (cfg, bytes) = load_config(config, overrides)?;
    let data_bytes = read_bytes(dataset)?;
    let data = load_dataset(dataset)?;
    let params = json!({ "method": method.name(), "gamma_grid": cfg.gamma_grid, "kappa": cfg.kappa });
    let mut run = Run::new("synth", out, &bytes, &[&data_bytes], json!({}), params);
    let batch = cfg.batch()?;
    let residuals = recover_residuals(&data, &batch)?;
    let cost = cfg.cost()?;
    let problem =
        ProblemData { data: &data, residuals: &residuals, nominal: &batch, cost: &cost, constraints: &cfg.constraints };
    let synth_cfg = cfg.synthesis(method);
    let result = match method {
        Method::Saa => solve_saa(&problem, &synth_cfg)?,
        Method::Rr => {
            let outcome = grid_search_table(&problem, &synth_cfg)?;
            run.write("gamma_table.csv", gamma_table_csv(&outcome.per_gamma).as_bytes())?;
            if outcome.best.is_none() {
                run.finish()?;
            }
            outcome.into_best()?
        }
    };
    let mut file = ControllerFile::new(
        method.name(),
        &result.phi,
        &result.feedback,
        result.gamma_star,
        result.objective,
        result.epsilon,
    );
    file.run_id = Some(run.run_id.clone());
    let text = serde_json::to_string_pretty(&file).map_err(Error::from)?;
    run.write("controller.json", text.as_bytes())?;
    run.finish()?;
    match result.gamma_star {
        Some(g) => println!("{} objective: {} (gamma = {g})", method.name(), result.objective),
        None => println!("{} objective: {}", method.name(), result.objective),
    }
    Ok(())
}

fn load_controller(path: &Path) -> CliResult<(ControllerFile, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let file = ControllerFile::load(path)?;
    Ok((file, bytes))
}

#[allow(clippy::too_many_arguments)]
fn cmd_validate(
    controller: &Path,
    config: &Path,
    rollouts: Option<usize>,
    seed: Option<u64>,
    data: Option<&Path>,
    out: &Path,
    overrides: &Overrides,
) -> CliResult<()> {
    let (cfg, bytes) = load_config(config, overrides)?;
    let (ctrl, ctrl_bytes) = load_controller(controller)?;
    let dc = cfg.data_collection().map_err(Failure::config)?;
    let section = cfg.validation.unwrap_or(drsls::config::ValidationSection { rollouts: 100, seed: 0 });
    let n_rollouts = rollouts.unwrap_or(section.rollouts);
    let noise = dc.noise.with_seed(seed.unwrap_or(section.seed));
    let data_bytes = data.map(read_bytes).transpose()?;
    let mut inputs: Vec<&[u8]> = vec![&ctrl_bytes];
    if let Some(b) = &data_bytes {
        inputs.push(b);
    }
    let mut run = Run::new(
        "validate",
        out,
        &bytes,
        &inputs,
        json!({ "validation": noise.seed }),
        json!({ "rollouts": n_rollouts, "kappa": cfg.kappa }),
    );
    let phi = ctrl.responses()?;
    let feedback = ctrl.feedback()?;
    if ctrl.layout() != cfg.layout() {
        return Err(Failure::config("controller shape does not match the config"));
    }
    let cost = cfg.cost()?;
    let x0 = cfg.x0_vec();
    let setup = ValidationSetup {
        nominal: &cfg.nominal,
        true_sys: &dc.true_system,
        noise: &noise,
        n_rollouts,
        cost: &cost,
        constraints: &cfg.constraints,
        beta: cfg.beta,
        cvar_mode: cfg.cvar_mode,
        x0: &x0,
        keep_trajectories: true,
    };
    let training = data.map(load_dataset).transpose()?;
    let residuals = training.as_ref().map(|d| recover_residuals(d, &cfg.batch()?)).transpose()?;
    let shift = match (&training, &residuals) {
        (Some(d), Some(r)) => Some(ShiftInputs { data: d, residuals: r, kappa: cfg.kappa, gamma: ctrl.gamma }),
        _ => None,
    };
    let report = validate(&phi, &feedback, ctrl.objective, &setup, shift.as_ref())?;
    run.write_json("validation.json", &json!({ "method": ctrl.method, "report": report }))?;
    if let Some(traj) = &report.trajectories {
        write_trajectories_csv(&out.join("traj.csv"), &cfg.layout(), traj)?;
        run.track("traj.csv");
    }
    run.finish()?;
    println!(
        "rollouts={} cost_mean={} violation_rate={} cost_bound_satisfied={} cvar_satisfied={}",
        report.n_rollouts,
        report.empirical_cost_mean,
        report.violation_rate,
        report.certificate.cost_bound_satisfied,
        report.certificate.cvar_satisfied
    );
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    draws: Option<usize>,
    rollouts: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    overrides: &Overrides,
) -> CliResult<()> {
    let (cfg, bytes) = load_config(config, overrides)?;
    let dc = cfg.data_collection().map_err(Failure::config)?;
    let section = cfg.sweep.ok_or_else(|| Failure::config("config has no `sweep` section"))?;
    let n_rollouts = rollouts.or(cfg.validation.map(|v| v.rollouts)).unwrap_or(100);
    let settings = SweepSettings {
        draws: draws.unwrap_or(section.draws),
        norm_range: (section.norm_range[0], section.norm_range[1]),
        seed: seed.unwrap_or(section.seed),
    };
    let params =
        json!({ "draws": settings.draws, "rollouts": n_rollouts, "gamma_grid": cfg.gamma_grid, "kappa": cfg.kappa });
    let mut run = Run::new("sweep", out, &bytes, &[], json!({ "sweep": settings.seed }), params);
    let cost = cfg.cost()?;
    let x0 = cfg.x0_vec();
    let k0 = cfg.k0().map_err(Failure::config)?;
    let input = SweepInput {
        nominal: &cfg.nominal,
        horizon: cfg.horizon,
        x0: &x0,
        k0: &k0,
        samples: dc.samples,
        noise: dc.noise,
        cost: &cost,
        constraints: &cfg.constraints,
        synthesis: cfg.synthesis(Method::Rr),
        n_rollouts,
    };
    let report = mismatch_sweep(&input, &settings)?;
    run.write_json("sweep.json", &report)?;
    write_sweep_csv(&out.join("sweep.csv"), &report)?;
    run.track("sweep.csv");
    run.finish()?;
    for s in &report.summary {
        println!(
            "{}: solved {}/{}, cvar satisfied {:.2}, cost bound {:.2}, median J {}",
            s.method.name(),
            s.solved,
            s.draws,
            s.cvar_satisfied_fraction,
            s.cost_bound_fraction,
            s.opt_cost.map_or("-".to_string(), |q| q.median.to_string())
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bounds(
    controller: &Path,
    config: &Path,
    dataset: &Path,
    sets: usize,
    seed: Option<u64>,
    out: &Path,
    overrides: &Overrides,
) -> CliResult<()> {
    let (cfg, bytes) = load_config(config, overrides)?;
    let (ctrl, ctrl_bytes) = load_controller(controller)?;
    let data_bytes = read_bytes(dataset)?;
    let dc = cfg.data_collection().map_err(Failure::config)?;
    let noise = seed.map_or(dc.noise, |s| dc.noise.with_seed(s));
    let mut run = Run::new(
        "bounds",
        out,
        &bytes,
        &[&ctrl_bytes, &data_bytes],
        json!({ "fresh": noise.seed }),
        json!({ "sets": sets, "kappa": cfg.kappa }),
    );
    if ctrl.layout() != cfg.layout() {
        return Err(Failure::config("controller shape does not match the config"));
    }
    let phi = ctrl.responses()?;
    let data = load_dataset(dataset)?;
    let residuals = recover_residuals(&data, &cfg.batch()?)?;
    let input = TightnessInput {
        nominal: &cfg.nominal,
        true_sys: &dc.true_system,
        data: &data,
        residuals: &residuals,
        kappa: cfg.kappa,
        gamma: ctrl.gamma,
        bounds: Some(cfg.error_bounds),
        noise: &noise,
    };
    let rows = bound_tightness(&phi, &input, sets)?;
    run.write_json("bounds.json", &json!({ "method": ctrl.method, "rows": rows }))?;
    let mut csv = String::from(
        "set_id,ot_distance,ot_mismatch_pair,empirical_bound,shift_bound_total,epsilon_small_gain,ratio_total\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.set_id,
            r.ot_distance,
            r.ot_mismatch_pair,
            r.empirical_bound,
            r.shift_bound_total,
            r.epsilon_small_gain.map(|v| v.to_string()).unwrap_or_default(),
            r.ratio_total
        ));
    }
    run.write("bounds.csv", csv.as_bytes())?;
    run.finish()?;
    if let Some(r) = rows.first() {
        println!(
            "mismatch term {}, bound total {}, epsilon {:?}",
            r.mismatch_term, r.shift_bound_total, r.epsilon_small_gain
        );
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(&config, &out, seed),
        Command::Synth { config, dataset, method, out, overrides } => {
            cmd_synth(&config, &dataset, method, &out, &overrides)
        }
        Command::Validate { controller, config, rollouts, seed, data, out, overrides } => {
            cmd_validate(&controller, &config, rollouts, seed, data.as_deref(), &out, &overrides)
        }
        Command::Sweep { config, draws, rollouts, seed, out, overrides } => {
            cmd_sweep(&config, draws, rollouts, seed, &out, &overrides)
        }
        Command::Bounds { controller, config, dataset, sets, seed, out, overrides } => {
            cmd_bounds(&controller, &config, &dataset, sets, seed, &out, &overrides)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
