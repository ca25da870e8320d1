use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};

use poisonlab::data::Mnist;
use poisonlab::harness::{
    backward_transfer, build_tasks, emit_reports, evaluate_checkpoints, poison_last_task, regenerate_reports,
    reproduce_grid, run_dir, run_experiment, run_grid, save_poisoned, save_prefix, train_prefix, write_run_meta,
    Benchmark, ExperimentConfig, ResultsFile, ResultsMatrix, Variant, REPRODUCE_SUBSAMPLE,
};
use poisonlab::learners::Method;
use poisonlab::models::checkpoint;
use poisonlab::{Error, Result};

#[derive(Parser)]
#[command(name = "poisonlab", version, about = "Task-specific poisoning of continual learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a victim end to end (plain, noise or attack variant) and write reports.
    Train(Common),
    /// Train the attack model against θ^{N-1} and emit the poisoned last task.
    Attack(Common),
    /// Recompute R and B from saved checkpoints.
    Eval(Common),
    /// Regenerate CSV and SVG reports from `<out-dir>/results.json`.
    Report(Common),
    /// Run the full grid over three consecutive seeds.
    Reproduce(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = ["permuted", "split"])]
    benchmark: Option<String>,
    #[arg(long, value_parser = ["sgd", "ewc", "si"])]
    method: Option<String>,
    #[arg(long, value_parser = ["plain", "noise", "attack"])]
    variant: Option<String>,
    #[arg(long)]
    target_task: Option<usize>,
    /// Training images kept per task (0 keeps all).
    #[arg(long)]
    subsample: Option<usize>,
    /// Drop second-order terms from the attack's pseudo-update gradient.
    #[arg(long)]
    first_order: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        self.config_over(ExperimentConfig::default())
    }

    /// Applies the config file and then the flags on top of `cfg`.
    fn config_over(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(b) = &self.benchmark {
            cfg.benchmark = b.parse::<Benchmark>()?;
        }
        if let Some(m) = &self.method {
            cfg.method = m.parse::<Method>()?;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse::<Variant>()?;
        }
        if let Some(t) = self.target_task {
            cfg.target_task = t;
        }
        if let Some(n) = self.subsample {
            cfg.subsample = (n > 0).then_some(n);
        }
        if self.first_order {
            cfg.attack.first_order = true;
        }
        Ok(cfg)
    }
}

fn load_data(dir: &Path) -> Result<Mnist> {
    Mnist::load(dir).map_err(|e| e.context(format!("loading MNIST from {}", dir.display())))
}

fn print_matrix(r: &ResultsMatrix) {
    println!("R (row = after task, column = evaluated task):");
    for row in &r.r {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn print_final(cfg: &ExperimentConfig, r: &ResultsMatrix) -> Result<()> {
    println!("{} {} {} seed {}", cfg.benchmark, cfg.method, cfg.variant_label(), cfg.seed);
    for (j, acc) in r.final_accuracies().iter().enumerate() {
        println!("final accuracy task {}: {acc}", j + 1);
    }
    if cfg.n_tasks >= 3 {
        let t = if cfg.variant == Variant::Attack { cfg.target_task } else { 1 };
        println!("backward transfer: {}", backward_transfer(r, t, cfg.n_tasks)?);
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let started = SystemTime::now();
    let data = load_data(&cfg.data_dir)?;
    let out = run_experiment(cfg, &data)?;
    emit_reports(std::slice::from_ref(&out.record), &cfg.out_dir)?;
    write_run_meta(&cfg.out_dir, "train", started)?;
    print_final(cfg, &out.record.results)
}

fn attack(mut cfg: ExperimentConfig) -> Result<()> {
    cfg.variant = Variant::Attack;
    cfg.validate()?;
    let started = SystemTime::now();
    let data = load_data(&cfg.data_dir)?;
    let tasks = build_tasks(&cfg, &data)?;
    let prefix = train_prefix(&cfg, &tasks)?;
    save_prefix(&cfg, &prefix)?;
    let (poisoned, model, summary) = poison_last_task(&cfg, &prefix, &tasks)?;
    let (poisoned, model, summary) = match (poisoned, model, summary) {
        (Some(p), Some(m), Some(s)) => (p, m, s),
        _ => return Err(Error::Consistency("attack variant produced no poisoned data".into())),
    };
    let dir = run_dir(&cfg);
    checkpoint::save_attack(&dir.join("attack.plck"), &model)?;
    save_poisoned(&dir.join("poisoned"), &cfg, &poisoned, &summary)?;
    write_run_meta(&cfg.out_dir, "attack", started)?;
    println!("attack model: {}", dir.join("attack.plck").display());
    println!("poisoned task {}: {}", cfg.n_tasks, dir.join("poisoned").display());
    println!("max |x' - x|: {}", summary.max_perturbation);
    Ok(())
}

fn eval(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(&cfg.data_dir)?;
    let r = evaluate_checkpoints(cfg, &data)?;
    print_matrix(&r);
    print_final(cfg, &r)
}

fn report(cfg: &ExperimentConfig) -> Result<()> {
    let file = ResultsFile::load(&cfg.out_dir.join("results.json"))?;
    regenerate_reports(&file.runs, &cfg.out_dir)?;
    println!("{} runs reported in {}", file.runs.len(), cfg.out_dir.display());
    Ok(())
}

fn reproduce(cfg: &ExperimentConfig) -> Result<()> {
    let started = SystemTime::now();
    let data = load_data(&cfg.data_dir)?;
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let grid = reproduce_grid(cfg, &seeds);
    let total = grid.len();
    let mut n = 0;
    let result = run_grid(&grid, &data, |r| {
        n += 1;
        eprintln!(
            "[{n}/{total}] {} {} {} seed {}: final {:?}",
            r.benchmark, r.method, r.variant, r.seed, r.final_accuracy
        );
    });
    let (runs, err) = match result {
        Ok(runs) => (runs, None),
        Err((runs, e)) => (runs, Some(e)),
    };
    emit_reports(&runs, &cfg.out_dir)?;
    write_run_meta(&cfg.out_dir, "reproduce", started)?;
    match err {
        Some(e) => Err(e.context(format!("{} of {total} runs finished and were reported", runs.len()))),
        None => {
            println!("{} runs reported in {}", runs.len(), cfg.out_dir.display());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => train(&c.config()?),
        Command::Attack(c) => attack(c.config()?),
        Command::Eval(c) => eval(&c.config()?),
        Command::Report(c) => report(&c.config()?),
        Command::Reproduce(c) => reproduce(&c.config_over(ExperimentConfig {
            subsample: Some(REPRODUCE_SUBSAMPLE),
            ..ExperimentConfig::default()
        })?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
