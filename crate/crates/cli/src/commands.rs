use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use intseg::cascade::Pipeline;
use intseg::config::AppConfig;
use intseg::data_io::{build_dataset, generate_split, load_split, LabeledImage, Split, MANIFEST_FILE};
use intseg::evalbench::{curve_tsv, evaluate, records_csv, spc_benchmark, summarize, EvalItem};
use intseg::gradcheck::{run_suite, GradcheckConfig};
use intseg::graph_prop::bench::benchmark_scaling;
use intseg::model::Model;
use intseg::training::{
    load_pipeline, run_ablation, train_coarse, train_fine, write_jsonl, AblationGrid, COARSE_CHECKPOINT, FINE_CHECKPOINT,
};
use intseg_server::{AppState, ServerConfig};

use crate::{Command, Common, DataArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] intseg::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value).map_err(intseg::Error::from)?)
}

/// Config file, then the seed, then `--set` overrides.
fn load_config(common: &Common) -> Result<AppConfig> {
    let mut overrides = vec![format!("train.seed={}", common.seed)];
    overrides.extend(common.overrides.iter().cloned());
    Ok(AppConfig::load(common.config.as_deref(), &overrides)?)
}

fn setup_threads(common: &Common) -> Result<()> {
    let threads = if common.deterministic { Some(1) } else { common.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Failed("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn dataset(args: &DataArgs, split: Split, cfg: &AppConfig, seed: u64) -> Result<Vec<LabeledImage>> {
    match &args.data {
        Some(dir) => Ok(load_split(&dir.join(MANIFEST_FILE), split)?),
        None => {
            let n = if split == Split::Train { args.n_train } else { args.n_eval };
            Ok(generate_split(seed, split, n, &cfg.scene)?
                .into_iter()
                .enumerate()
                .map(Into::into)
                .collect())
        }
    }
}

fn items(data: &[LabeledImage]) -> Vec<EvalItem<'_>> {
    data.iter()
        .map(|s| EvalItem {
            id: &s.id,
            image: &s.image,
            gt: &s.gt,
        })
        .collect()
}

fn pipeline_from(checkpoint: &Path, cfg: &AppConfig) -> Result<Pipeline> {
    if !checkpoint.exists() {
        return Err(CliError::Failed(format!("{}: checkpoint file not found", checkpoint.display())));
    }
    Ok(load_pipeline(checkpoint, cfg.train.strategy, cfg.zoom)?)
}

pub fn run(command: Command, common: &Common) -> Result<()> {
    setup_threads(common)?;
    let cfg = load_config(common)?;
    let out = common.out.as_path();
    fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let seed = common.seed;

    match command {
        Command::GenData { n_train, n_eval } => {
            let manifest = build_dataset(n_train, n_eval, seed, out, &cfg.scene)?;
            println!(
                "{} train + {} eval scenes, content hash {}",
                n_train,
                n_eval,
                manifest.content_hash(out)?
            );
        }
        Command::Train { data, coarse_only } => {
            let train = dataset(&data, Split::Train, &cfg, seed)?;
            let tcfg = cfg.train_config();
            let coarse = train_coarse(&train, &tcfg)?;
            let mut log = Vec::new();
            write_jsonl(&coarse.log, &mut log).expect("write to memory");
            write(&out.join("train_coarse.jsonl"), log)?;
            let path = out.join(COARSE_CHECKPOINT);
            coarse.model.save(&path, Some(cfg.hash()))?;
            log::info!("wrote {}", path.display());
            if !coarse_only && tcfg.ablation.uses_iaf() {
                let fine = train_fine(&coarse.model, &train, &tcfg)?;
                let mut log = Vec::new();
                write_jsonl(&fine.log, &mut log).expect("write to memory");
                write(&out.join("train_fine.jsonl"), log)?;
                let path = out.join(FINE_CHECKPOINT);
                fine.model.save(&path, Some(cfg.hash()))?;
                log::info!("wrote {}", path.display());
            }
            println!("checkpoints in {}", out.display());
        }
        Command::Eval { data, checkpoint } => {
            let pipeline = pipeline_from(&checkpoint, &cfg)?;
            let eval = dataset(&data, Split::Eval, &cfg, seed)?;
            let records = evaluate(&pipeline, &items(&eval), &cfg.eval)?;
            let summary = summarize(&records, &cfg.eval)?;
            write(&out.join("records.csv"), records_csv(&records))?;
            write(&out.join("miou_curve.tsv"), curve_tsv(&summary.curve))?;
            write_json(&out.join("summary.json"), &summary)?;
            println!(
                "NoC@{:.0} {:.3}  NoF {}  over {} samples",
                cfg.eval.tau * 100.0,
                summary.noc,
                summary.nof,
                records.len()
            );
        }
        Command::Ablate { data, grid, seeds } => {
            let grid = AblationGrid::parse(&grid)?;
            let train = dataset(&data, Split::Train, &cfg, seed)?;
            let eval = dataset(&data, Split::Eval, &cfg, seed)?;
            let report = run_ablation(grid, &train, &eval, &cfg.train_config(), &cfg.eval, &seeds)?;
            write(&out.join("ablation_rows.csv"), report.rows_csv())?;
            write(&out.join("ablation_table.csv"), report.table_csv())?;
            write_json(&out.join("ablation.json"), &report)?;
            print!("{}", report.table_csv());
        }
        Command::BenchGraph {
            channels,
            clicks,
            sizes,
            runs,
            warmup,
        } => {
            let report = benchmark_scaling(channels, clicks, &sizes, runs, warmup, seed)?;
            write(&out.join("bench_graph.csv"), report.to_csv())?;
            write_json(&out.join("bench_graph.json"), &report.summary_json())?;
            println!(
                "log-log slope: sparse {:.3}, dense {:.3}",
                report.sparse_slope, report.dense_slope
            );
        }
        Command::BenchSpc { data, checkpoint } => {
            let pipeline = pipeline_from(&checkpoint, &cfg)?;
            let eval = dataset(&data, Split::Eval, &cfg, seed)?;
            let stats = spc_benchmark(&pipeline, &items(&eval), &cfg.eval)?;
            write_json(&out.join("spc.json"), &stats)?;
            println!(
                "median {:.4} s/click over {} steps ({})",
                stats.median_s, stats.steps, stats.machine
            );
        }
        Command::Gradcheck { ops, instances } => {
            let gcfg = GradcheckConfig {
                instances,
                seed,
                ..GradcheckConfig::default()
            };
            let reports = run_suite(&ops, &gcfg)?;
            write_json(&out.join("gradcheck.json"), &reports)?;
            for r in &reports {
                println!(
                    "{:<24} {} max rel err {:.2e} ({} probes)",
                    r.op,
                    if r.passed { "ok  " } else { "FAIL" },
                    r.max_rel_err,
                    r.checked
                );
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} of {} ops failed", reports.len())));
            }
        }
        Command::Serve {
            checkpoint,
            port,
            session_ttl,
            host,
            static_dir,
        } => {
            let pipeline = match &checkpoint {
                Some(path) => pipeline_from(path, &cfg)?,
                None => {
                    log::warn!("no --checkpoint given; serving an untrained model");
                    Pipeline::cascade(
                        Arc::new(Model::init(cfg.model, seed)),
                        Arc::new(Model::init(cfg.model, seed.wrapping_add(1))),
                        cfg.train.strategy,
                        cfg.zoom,
                    )
                }
            };
            let scfg = ServerConfig {
                host,
                port: port.unwrap_or(cfg.service.port),
                session_ttl: Duration::from_secs(session_ttl.unwrap_or(cfg.service.session_ttl)),
                max_clicks: cfg.eval.max_clicks,
                threshold: cfg.eval.binarize_threshold,
                scene: cfg.scene.clone(),
                static_dir,
                ..ServerConfig::default()
            };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(format!("runtime: {e}")))?;
            runtime
                .block_on(intseg_server::serve(AppState::new(pipeline, scfg)))
                .map_err(|e| CliError::Failed(format!("server: {e}")))?;
        }
    }
    Ok(())
}
