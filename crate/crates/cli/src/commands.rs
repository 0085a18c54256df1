use std::fs;
use std::path::Path;
use std::time::Instant;

use mgno::darcy::{build_dataset, load_dataset, save_dataset, CoefficientSpec, Dataset, DatasetMeta};
use mgno::multigrid::{classical_poisson, estimate_contraction, ConvergenceReport};
use mgno::net::{load_model, save_model, Model, Tying};
use mgno::tensor::conv2d;
use mgno::train::{
    evaluate, grad_check, gradcheck_problem, thread_pool, train_model, Fault, GradCheckReport, Metrics, TrainHistory,
    GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
use mgno::Field;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{config_hash, hex, RunConfig, SplitName};
use crate::{Cli, CliError, Command, FaultArg, TyingArg};

/// Accepted range of the classical contraction factor.
pub const RHO_BOUNDS: [f64; 2] = [0.05, 0.2];
pub const GRADCHECK_MAX_SIZE: usize = 16;

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    let pool = thread_pool()?;
    pool.install(|| match cli.command {
        Command::SolvePoisson { size, levels, iters, window, seed, out } => {
            solve_poisson(size, levels, iters, window, seed, out.as_deref())
        }
        Command::Gen { spec, n, out, seed, verbose } => gen(&spec, n, &out, seed, verbose),
        Command::Train { config, out, loss, epochs } => train(&config, &out, loss.map(Into::into), epochs),
        Command::Eval { ckpt, data, out, split } => eval(&ckpt, &data, &out, split),
        Command::Superres { ckpt, data_hi, extra_levels, out, split, tying } => {
            superres(&ckpt, &data_hi, extra_levels, &out, split, tying)
        }
        Command::Gradcheck { size, seed, loss, out, inject_fault } => {
            gradcheck(size, seed, loss.into(), out.as_deref(), inject_fault)
        }
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(mgno::Error::from)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(mgno::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(mgno::Error::from)?;
    Ok(())
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).map_err(mgno::Error::from)?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct PoissonOutput {
    command: &'static str,
    size: usize,
    interior: usize,
    levels: usize,
    iters: usize,
    seed: u64,
    rho: f64,
    bounds: [f64; 2],
    in_range: bool,
    report: ConvergenceReport,
}

fn solve_poisson(
    size: usize,
    levels: usize,
    iters: usize,
    window: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> CliResult {
    if levels == 0 {
        return Err(CliError::Usage("--levels must be at least 1".into()));
    }
    if iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let block = 1usize << (levels - 1);
    if size < 2 * block || size % block != 0 {
        return Err(CliError::Usage(format!(
            "--size {size} must be a multiple of 2^(levels-1) = {block} and at least {}",
            2 * block
        )));
    }
    let d = size - 1;
    let (cfg, w) = classical_poisson(levels, d).map_err(|e| CliError::Usage(format!("--size {size}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_star = Field::from_fn(1, d, d, |_, _, _| rng.gen_range(-1.0..1.0));
    let f = conv2d(&u_star, &w.a[0], cfg.boundary, 1)?;
    let report = estimate_contraction(&f, &u_star, &w, &cfg, iters, window.unwrap_or(iters))?;
    let in_range = !report.diverged && report.rho >= RHO_BOUNDS[0] && report.rho <= RHO_BOUNDS[1];
    let rho = report.rho;
    let output = PoissonOutput {
        command: "solve-poisson",
        size,
        interior: d,
        levels,
        iters,
        seed,
        rho,
        bounds: RHO_BOUNDS,
        in_range,
        report,
    };
    emit(out, &output)?;
    eprintln!("contraction factor {rho:.4} over {iters} iterations");
    if in_range {
        Ok(())
    } else {
        Err(CliError::Threshold(format!("contraction factor {rho:.4} outside [{}, {}]", RHO_BOUNDS[0], RHO_BOUNDS[1])))
    }
}

fn file_sha256(path: &Path) -> CliResult<String> {
    Ok(hex(&Sha256::digest(fs::read(path).map_err(mgno::Error::from)?)))
}

fn gen(spec_path: &Path, n: usize, out: &Path, seed: Option<u64>, verbose: bool) -> CliResult {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec = CoefficientSpec::parse(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    spec.split_for(n).map_err(|e| CliError::Usage(e.to_string()))?;
    let start = Instant::now();
    let (data, meta) = build_dataset(n, &spec)?;
    save_dataset(out, &data, &meta)?;
    if verbose {
        for (i, (r, it)) in meta.residuals.iter().zip(&meta.iterations).enumerate() {
            println!("sample {i}: seed {} residual {r:.3e} iterations {it}", meta.seeds[i]);
        }
    }
    let worst = meta.residuals.iter().copied().fold(0.0, f64::max);
    println!(
        "wrote {n} samples on a {0}x{0} grid to {1} (max residual {worst:.3e}, {2:.1}s)",
        meta.d,
        out.display(),
        start.elapsed().as_secs_f64()
    );
    for name in ["meta.json", "inputs.mgt", "outputs.mgt"] {
        println!("sha256 {}  {name}", file_sha256(&out.join(name))?);
    }
    Ok(())
}

fn pick(data: &Dataset, meta: &DatasetMeta, split: SplitName) -> CliResult<Dataset> {
    if split == SplitName::All {
        return Ok(data.clone());
    }
    let (train, val, test) = data.split(&meta.split)?;
    Ok(match split {
        SplitName::Train => train,
        SplitName::Val => val,
        SplitName::Test => test,
        SplitName::All => unreachable!(),
    })
}

/// The split `eval` scores by default: `test` when present, else everything.
pub fn eval_split(meta: &DatasetMeta, requested: Option<SplitName>) -> SplitName {
    requested.unwrap_or(if meta.split.test > 0 { SplitName::Test } else { SplitName::All })
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config: &'a RunConfig,
    config_hash: String,
}

#[derive(Serialize)]
struct Timing {
    epoch_seconds: Vec<f64>,
    total_seconds: f64,
}

#[derive(Serialize)]
struct MetricsOutput {
    command: &'static str,
    split: SplitName,
    grid: [usize; 2],
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    extra_levels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tying: Option<Tying>,
    metrics: Metrics,
}

fn train(config_path: &Path, out: &Path, loss: Option<mgno::train::LossKind>, epochs: Option<usize>) -> CliResult {
    let mut run = RunConfig::load(config_path)?;
    if let Some(l) = loss {
        run.train.loss = l;
    }
    if let Some(e) = epochs {
        run.train.epochs = e;
    }
    let cfg = run.model.config()?;
    let (data, meta) = load_dataset(&run.dataset.path)?;
    let train_set = pick(&data, &meta, SplitName::Train)?;
    if train_set.is_empty() {
        return Err(CliError::Usage(format!("dataset {} has an empty train split", run.dataset.path.display())));
    }
    if let Some((h, w)) = train_set.grid() {
        cfg.check_grid(h, w)?;
    }
    let val_name = run.dataset.validate_on.or((meta.split.val > 0).then_some(SplitName::Val));
    let val = val_name.map(|s| pick(&data, &meta, s)).transpose()?.filter(|v| !v.is_empty());

    let hash = run.hash();
    fs::create_dir_all(out).map_err(mgno::Error::from)?;
    write_json(&out.join("run.json"), &RunRecord { config: &run, config_hash: hash.clone() })?;
    let start = Instant::now();
    let every = run.checkpoint_every;
    let model = Model::init(cfg)?;
    let (model, history) = train_model(model, &train_set, val.as_ref(), &run.train, |m, r| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  val_l2 {}  lr {:.3e}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.val_l2.map_or("-".into(), |v| format!("{v:.6}")),
            r.lr,
            r.seconds
        );
        if every > 0 && r.epoch % every == 0 {
            save_model(out.join("checkpoints").join(format!("epoch_{:04}", r.epoch)), m, Some(r.epoch))?;
        }
        Ok(())
    })?;
    save_model(out.join("checkpoint"), &model, Some(run.train.epochs))?;
    history.write_csv(out.join("history.csv"))?;
    write_history_json(&out.join("history.json"), &history)?;
    write_json(
        &out.join("timing.json"),
        &Timing {
            epoch_seconds: history.epochs.iter().map(|r| r.seconds).collect(),
            total_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    let eval_set = pick(&data, &meta, run.eval.split)?;
    if !eval_set.is_empty() {
        let metrics = evaluate(&model, &eval_set)?;
        eprintln!("{:?} split: mean relative L2 {:.6}, H1 {:.6}", run.eval.split, metrics.mean_l2, metrics.mean_h1);
        let grid = [meta.d, meta.d];
        let output = MetricsOutput {
            command: "train",
            split: run.eval.split,
            grid,
            config_hash: hash,
            extra_levels: None,
            tying: None,
            metrics,
        };
        write_json(&out.join("metrics.json"), &output)?;
    }
    Ok(())
}

/// History without wall-clock times, so reruns are byte-identical.
fn write_history_json(path: &Path, history: &TrainHistory) -> CliResult {
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        train_loss: f64,
        val_l2: Option<f64>,
        val_h1: Option<f64>,
        lr: f64,
    }
    let rows: Vec<Row> = history
        .epochs
        .iter()
        .map(|r| Row { epoch: r.epoch, train_loss: r.train_loss, val_l2: r.val_l2, val_h1: r.val_h1, lr: r.lr })
        .collect();
    write_json(path, &rows)
}

fn load_checkpoint(dir: &Path) -> CliResult<Model> {
    if !dir.join("config.json").is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}", dir.display())));
    }
    Ok(load_model(dir)?)
}

fn load_data(dir: &Path) -> CliResult<(Dataset, DatasetMeta)> {
    if !dir.join("meta.json").is_file() {
        return Err(CliError::Usage(format!("no dataset at {}", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn score(model: &Model, data: &Dataset, meta: &DatasetMeta, split: SplitName) -> CliResult<Metrics> {
    let set = pick(data, meta, split)?;
    if set.is_empty() {
        return Err(CliError::Usage(format!("the {split:?} split of this dataset is empty")));
    }
    model.config.check_grid(meta.d, meta.d)?;
    Ok(evaluate(model, &set)?)
}

fn eval(ckpt: &Path, data_dir: &Path, out: &Path, split: Option<SplitName>) -> CliResult {
    let model = load_checkpoint(ckpt)?;
    let (data, meta) = load_data(data_dir)?;
    if let Some((h, w)) = model.grid {
        if (h, w) != (meta.d, meta.d) {
            return Err(mgno::Error::ShapeMismatch(format!(
                "checkpoint was trained on {h}x{w} grids but the data is {0}x{0}; use superres for other resolutions",
                meta.d
            ))
            .into());
        }
    }
    let split = eval_split(&meta, split);
    let metrics = score(&model, &data, &meta, split)?;
    eprintln!("{split:?} split: mean relative L2 {:.6}, H1 {:.6}", metrics.mean_l2, metrics.mean_h1);
    let output = MetricsOutput {
        command: "eval",
        split,
        grid: [meta.d, meta.d],
        config_hash: config_hash(&model.config),
        extra_levels: None,
        tying: None,
        metrics,
    };
    write_json(out, &output)
}

/// Whether `hi` is `lo` refined `k` times, in either the node-count
/// (`2^k·d`) or the interval-count (`2^k·(d+1) − 1`) convention.
fn refines(lo: usize, hi: usize, k: usize) -> bool {
    hi == lo << k || hi + 1 == (lo + 1) << k
}

fn superres(
    ckpt: &Path,
    data_dir: &Path,
    extra: usize,
    out: &Path,
    split: Option<SplitName>,
    tying: TyingArg,
) -> CliResult {
    if extra > 8 {
        return Err(CliError::Usage(format!("--extra-levels {extra} is implausibly large")));
    }
    let model = load_checkpoint(ckpt)?;
    let (data, meta) = load_data(data_dir)?;
    if let Some((h, _)) = model.grid {
        if !refines(h, meta.d, extra) {
            return Err(CliError::Usage(format!(
                "data resolution {} is not the training resolution {h} refined {extra} time(s) by a factor of 2",
                meta.d
            )));
        }
    }
    let tying = match tying {
        TyingArg::Finest => Tying::Finest,
        TyingArg::Coarsest => Tying::Coarsest,
    };
    let refined = model.refined(extra, tying)?;
    let split = eval_split(&meta, split);
    let metrics = score(&refined, &data, &meta, split)?;
    eprintln!(
        "{split:?} split at {0}x{0}: mean relative L2 {1:.6}, H1 {2:.6}",
        meta.d, metrics.mean_l2, metrics.mean_h1
    );
    let output = MetricsOutput {
        command: "superres",
        split,
        grid: [meta.d, meta.d],
        config_hash: config_hash(&model.config),
        extra_levels: Some(extra),
        tying: Some(tying),
        metrics,
    };
    write_json(out, &output)
}

#[derive(Serialize)]
struct GradcheckOutput {
    command: &'static str,
    size: usize,
    seed: u64,
    tolerance: f64,
    passed: bool,
    report: GradCheckReport,
}

fn gradcheck(
    size: usize,
    seed: u64,
    loss: mgno::train::LossKind,
    out: Option<&Path>,
    fault: Option<FaultArg>,
) -> CliResult {
    if !(4..=GRADCHECK_MAX_SIZE).contains(&size) || size % 2 != 0 {
        return Err(CliError::Usage(format!("--size must be even and within 4..={GRADCHECK_MAX_SIZE}, got {size}")));
    }
    let (params, cfg, x, target) = gradcheck_problem(size, seed)?;
    let fault = fault.map(|f| match f {
        FaultArg::GeluSign => Fault::GeluSign,
    });
    let h = 1.0 / (size + 1) as f64;
    let report = grad_check(&params, &cfg, &x, &target, loss, h, GRADCHECK_STEP, fault)?;
    for g in &report.groups {
        println!("{:<24} {:>6} entries  max deviation {:.3e}", g.name, g.entries, g.max_deviation);
    }
    let passed = report.passed(GRADCHECK_TOLERANCE);
    let max = report.max_deviation;
    println!("max relative deviation {max:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if let Some(path) = out {
        let output =
            GradcheckOutput { command: "gradcheck", size, seed, tolerance: GRADCHECK_TOLERANCE, passed, report };
        write_json(path, &output)?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::Threshold(format!("gradient check failed: max relative deviation {max:.3e}")))
    }
}
