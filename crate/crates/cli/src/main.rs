//! `moc`: dataset generation, training, sampling, evaluation, ablations and
//! benchmarks for the Mixture-of-Components transformer.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use moc_core::bench::{bench_attention, default_grid, parse_grid, trend_check, BenchOptions};
use moc_core::checkpoint::{load_checkpoint, save_checkpoint};
use moc_core::eval::{evaluate_threaded, format_ablation_table, run_ablation, sample_latents, sample_seeds, Metrics};
use moc_core::numerics::ParamStore;
use moc_core::run::RunConfig;
use moc_core::synth::{read_dataset, write_dataset, Codec, SceneRecord};
use moc_core::train::{condition_of, smoothed_loss, train_with, SceneData};

const THREADS_VAR: &str = "MOC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "moc", version, about = "Mixture-of-Components attention on synthetic compositional scenes")]
struct Cli {
    /// JSON run config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or the report file for `bench`.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the training and held-out scene files.
    GenData,
    /// Train from scratch, logging the loss of every step.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        /// Read scenes from `gen-data` output instead of regenerating them.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Progress line on stderr every this many steps.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Sample scenes for the held-out layouts and write point files.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Score samples against held-out scenes (CD, F-score, self-IoU).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Score the held-out scenes against themselves.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Train and evaluate ablation settings A..G.
    Ablate {
        /// Training steps per setting.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Time sparse and dense global attention.
    Bench {
        /// Grid file with lines `N L k sigma D H`.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<moc_core::Error> for Failure {
    fn from(e: moc_core::Error) -> Self {
        match e {
            moc_core::Error::Config(_) | moc_core::Error::Json(_) | moc_core::Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn threads() -> CliResult<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Config file (if any), then `--seed`, then `--set` overrides.
fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let base = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(cli.overrides.iter().cloned());
    Ok(base.with_overrides(&overrides)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli)?;
    let threads = threads()?;
    let out = cli.out.clone();
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Train { steps, data, log_every } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            train(&cfg, &out, data.as_deref(), log_every.max(1))
        }
        Command::Sample { checkpoint, scenes, steps, cfg_scale } => {
            apply_sampler(&mut cfg, steps, cfg_scale)?;
            let ck = checkpoint.unwrap_or_else(|| out.join("checkpoint"));
            sample(&cfg, &out, &ck, scenes)
        }
        Command::Eval { checkpoint, steps, cfg_scale, ground_truth } => {
            apply_sampler(&mut cfg, steps, cfg_scale)?;
            let ck = checkpoint.unwrap_or_else(|| out.join("checkpoint"));
            eval(&cfg, &out, &ck, ground_truth, threads)
        }
        Command::Ablate { steps } => {
            if let Some(s) = steps {
                cfg.ablate_steps = s;
            }
            ablate(&cfg, &out)
        }
        Command::Bench { grid, repeats, warmup } => bench(&cfg, &out, grid.as_deref(), repeats, warmup),
    }
}

fn apply_sampler(cfg: &mut RunConfig, steps: Option<usize>, cfg_scale: Option<f64>) -> CliResult<()> {
    if let Some(s) = steps {
        cfg.eval.steps = s;
    }
    if let Some(s) = cfg_scale {
        cfg.eval.cfg_scale = s;
    }
    Ok(cfg.validate()?)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let data = SceneData::for_run(cfg)?;
    for (name, records) in [("train.scenes", &data.train), ("eval.scenes", &data.eval)] {
        write_dataset(BufWriter::new(File::create(out.join(name))?), records)?;
    }
    write_json(&out.join("config.json"), cfg)?;
    eprintln!("wrote {} training and {} held-out scenes to {}", data.train.len(), data.eval.len(), out.display());
    Ok(())
}

fn read_scenes(path: &Path) -> CliResult<Vec<SceneRecord>> {
    Ok(read_dataset(BufReader::new(File::open(path)?))?)
}

fn scene_data(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<SceneData> {
    let Some(dir) = dir else {
        return Ok(SceneData::for_run(cfg)?);
    };
    let codec = Codec::new(cfg.data.scene.dim, cfg.model.latent_dim, cfg.data.tag_scale, cfg.data.codec_seed)?;
    let train = read_scenes(&dir.join("train.scenes"))?;
    let eval = read_scenes(&dir.join("eval.scenes"))?;
    for r in train.iter().chain(&eval) {
        if r.n() != cfg.data.components || r.l() != cfg.model.vecset_len || r.dim != cfg.data.scene.dim || r.grid != cfg.model.grid {
            return Err(Failure::Usage(format!(
                "scene {} has N={} L={} dim={} grid={}, config expects N={} L={} dim={} grid={}",
                r.seed,
                r.n(),
                r.l(),
                r.dim,
                r.grid,
                cfg.data.components,
                cfg.model.vecset_len,
                cfg.data.scene.dim,
                cfg.model.grid
            )));
        }
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Failure::Usage(format!("scene files in {} are empty", dir.display())));
    }
    Ok(SceneData { codec, train, eval })
}

fn train(cfg: &RunConfig, out: &Path, data_dir: Option<&Path>, log_every: usize) -> CliResult<()> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let data = scene_data(cfg, data_dir)?;
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut io_error = None;
    let start = Instant::now();
    let outcome = train_with(cfg, &data, cfg.train.steps, |s| {
        let line = serde_json::to_string(s).expect("step log serializes");
        if let Err(e) = writeln!(log, "{line}") {
            io_error.get_or_insert(e);
        }
        if s.step % log_every == 0 || s.step == cfg.train.steps {
            eprintln!("step {:>6}  loss {:.5}  grad {:.4}  {:.1}s", s.step, s.loss, s.grad_norm, start.elapsed().as_secs_f64());
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    log.flush()?;
    save_checkpoint(&out.join("checkpoint"), &cfg.model, &outcome.params)?;
    let losses = outcome.losses();
    let w = cfg.train.smoothing;
    let summary = serde_json::json!({
        "steps": cfg.train.steps,
        "smoothing_window": w,
        "smoothed_loss_at_50": smoothed_loss(&losses, 50, w),
        "smoothed_loss_final": smoothed_loss(&losses, losses.len(), w),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

fn load_params(cfg: &RunConfig, ck: &Path) -> CliResult<ParamStore> {
    if !ck.join(moc_core::checkpoint::MANIFEST_FILE).exists() {
        return Err(Failure::Usage(format!("no checkpoint at {}", ck.display())));
    }
    let (stored, params) = load_checkpoint(ck, None).map_err(|e| Failure::Runtime(format!("checkpoint {}: {e}", ck.display())))?;
    if stored != cfg.model {
        return Err(Failure::Usage(format!("checkpoint {} was saved with a different model config", ck.display())));
    }
    Ok(params)
}

fn sample(cfg: &RunConfig, out: &Path, ck: &Path, count: Option<usize>) -> CliResult<()> {
    let params = load_params(cfg, ck)?;
    let data = SceneData::for_run(cfg)?;
    let count = count.unwrap_or(data.eval.len()).min(data.eval.len());
    let seeds = sample_seeds(&cfg.model, cfg.data.components, count, cfg.seed)?;
    let dir = out.join("samples");
    fs::create_dir_all(&dir)?;
    let sampler = cfg.eval.sampler();
    for (i, (scene, seed)) in data.eval.iter().zip(&seeds).enumerate() {
        let z = sample_latents(&params, &cfg.model, seed, &condition_of(scene), &sampler)?;
        let comps = data.decode(&z)?;
        let axes = ["x", "y", "z"];
        let mut text = format!("# component {}\n", axes[..cfg.data.scene.dim].join(" "));
        for (c, pts) in comps.iter().enumerate() {
            for r in 0..pts.rows() {
                let coords: Vec<String> = pts.row(r).iter().map(|v| format!("{v:.9}")).collect();
                writeln!(text, "{c} {}", coords.join(" ")).unwrap();
            }
        }
        fs::write(dir.join(format!("scene_{i:03}.txt")), text)?;
    }
    eprintln!("wrote {count} sampled scenes to {}", dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path, ck: &Path, ground_truth: bool, threads: usize) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let data = SceneData::for_run(cfg)?;
    let res = cfg.eval.resolution(cfg.data.scene.dim);
    let report = if ground_truth {
        let all: Vec<Metrics> = data.eval.iter().map(|s| Metrics::of(&s.components, &s.components, res)).collect::<Result<_, _>>()?;
        let k = all.len() as f64;
        serde_json::json!({
            "scenes": all.len(),
            "chamfer": all.iter().map(|m| m.chamfer).sum::<f64>() / k,
            "fscore_010": all.iter().map(|m| m.fscore_010).sum::<f64>() / k,
            "fscore_005": all.iter().map(|m| m.fscore_005).sum::<f64>() / k,
            "self_iou": all.iter().map(|m| m.self_iou).sum::<f64>() / k,
        })
    } else {
        let params = load_params(cfg, ck)?;
        serde_json::to_value(evaluate_threaded(&params, cfg, &data, &data.eval, threads)?).map_err(|e| Failure::Runtime(e.to_string()))?
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{text}");
    fs::write(out.join(if ground_truth { "eval_ground_truth.json" } else { "eval.json" }), text + "\n")?;
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let rows = run_ablation(cfg, |r| {
        eprintln!("setting {} done: loss {:.4} CD {:.4} ({:.0}s)", r.setting.label, r.final_loss, r.metrics.chamfer, start.elapsed().as_secs_f64());
    })?;
    let table = format_ablation_table(&rows);
    print!("{table}");
    fs::write(out.join("ablation.txt"), &table)?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(())
}

fn bench(cfg: &RunConfig, out: &Path, grid: Option<&Path>, repeats: usize, warmup: usize) -> CliResult<()> {
    let grid = match grid {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read grid {}: {e}", p.display())))?;
            parse_grid(&text)?
        }
        None => default_grid(),
    };
    let (csv_path, dir) = if out.extension().is_some_and(|e| e == "csv") {
        (out.to_path_buf(), out.parent().map(Path::to_path_buf).unwrap_or_default())
    } else {
        (out.join("bench.csv"), out.to_path_buf())
    };
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let opts = BenchOptions { repeats, warmup, seed: cfg.seed };
    let report = bench_attention(&grid, &opts, |r| {
        eprintln!(
            "{:?} N={:<3} L={:<5} kv={:<6} global {:>9.3} ms  total {:>9.3} ms{}",
            r.method,
            r.n,
            r.l,
            r.kv_length,
            r.wall_ms_global,
            r.wall_ms_total,
            if r.timer_warning { "  [timer resolution warning]" } else { "" }
        );
    })?;
    fs::write(&csv_path, report.to_csv())?;
    write_json(&csv_path.with_extension("json"), &report)?;
    fs::write(csv_path.with_extension("dat"), report.ratio_data()?)?;
    let trend = trend_check(&report)?;
    for p in &trend.points {
        println!("N={:<3} moc/dense global attention time {:.3} (+/- {:.3})", p.n, p.ratio, p.spread);
    }
    println!("non-increasing in N: {}  below 1 at largest N: {}", trend.non_increasing, trend.below_one_at_largest_n);
    Ok(())
}
