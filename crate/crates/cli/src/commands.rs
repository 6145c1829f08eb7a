use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use coldstart_core::bpmf::train_bpmf_for_split;
use coldstart_core::eval::{evaluate, genre_diversity, sample_interviews, Averaging, EvalReport};
use coldstart_core::numerics::seeded_rng;
use coldstart_core::synthetic::generate;
use coldstart_core::trainer::{read_metrics, train, TrainOptions, BEST_FILE, LATEST_FILE, METRICS_FILE};
use coldstart_core::{load_movielens, make_split, EvaluationSplit, FactorSet, ModelBundle, RatingsDataset};
use coldstart_service::ServiceConfig;
use rand::seq::SliceRandom;

use crate::config::CliConfig;
use crate::{interactive, Cli, Command};

pub const DATASET_FILE: &str = "dataset.tsv";
pub const INDEX_MAP_FILE: &str = "index_map.tsv";
pub const SPLIT_FILE: &str = "split.json";
pub const FACTORS_FILE: &str = "factors.bin";
pub const RUNS_DIR: &str = "runs";
pub const RUN_CONFIG_FILE: &str = "config.toml";
pub const SERIES_FILE: &str = "rmse_series.csv";
pub const SAMPLES_FILE: &str = "sample_interviews.txt";

struct Context_ {
    config: CliConfig,
    work: PathBuf,
    data_dir: Option<PathBuf>,
}

impl Context_ {
    fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    /// Path of an artifact another command produces; errors name that command.
    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("missing {}; run `coldstart {producer}` first", p.display());
        }
        Ok(p)
    }

    fn dataset(&self) -> Result<RatingsDataset> {
        let p = self.require(DATASET_FILE, "ingest")?;
        Ok(RatingsDataset::load_cache(&p)?)
    }

    fn split(&self, dataset: &RatingsDataset) -> Result<EvaluationSplit> {
        let p = self.require(SPLIT_FILE, "split")?;
        let split = EvaluationSplit::load(&p)?;
        if !split.matches(dataset) {
            bail!("{} does not match the dataset; rerun `coldstart split`", p.display());
        }
        Ok(split)
    }

    fn factors(&self, dataset: &RatingsDataset) -> Result<FactorSet> {
        let p = self.require(FACTORS_FILE, "bpmf-train")?;
        let f = FactorSet::load(&p)?;
        if f.user_count() != dataset.user_count() || f.movie_count() != dataset.movie_count() {
            bail!(
                "{} does not match the dataset; rerun `coldstart bpmf-train`",
                p.display()
            );
        }
        Ok(f)
    }

    fn latest_run(&self) -> Result<PathBuf> {
        let runs = self.path(RUNS_DIR);
        let mut dirs: Vec<PathBuf> = match fs::read_dir(&runs) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(BEST_FILE).exists())
                .collect(),
            Err(_) => Vec::new(),
        };
        dirs.sort();
        dirs.pop().ok_or_else(|| {
            anyhow!(
                "no trained bundle under {}; run `coldstart train` first",
                runs.display()
            )
        })
    }

    fn bundle_path(&self, explicit: Option<PathBuf>) -> Result<PathBuf> {
        match explicit {
            Some(p) if p.is_dir() => Ok(p.join(BEST_FILE)),
            Some(p) => Ok(p),
            None => Ok(self.latest_run()?.join(BEST_FILE)),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = CliConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        config.set_seed(seed);
    }
    let work = cli.global.work_dir.clone().unwrap_or_else(|| config.work_dir.clone());
    let data_dir = cli
        .global
        .data_dir
        .clone()
        .or_else(|| (!config.data_dir.is_empty()).then(|| PathBuf::from(&config.data_dir)));
    let ctx = Context_ { config, work, data_dir };
    match cli.command {
        Command::Ingest {
            ratings,
            movies,
            user_sample,
        } => ingest(&ctx, ratings, movies, user_sample),
        Command::Synth { out } => synth(&ctx, out),
        Command::Split => split(&ctx),
        Command::BpmfTrain => bpmf_train(&ctx),
        Command::Train {
            model,
            policy,
            epochs,
            questions,
            resume,
        } => {
            let mut train_cfg = ctx.config.train.clone();
            if let Some(m) = model {
                train_cfg.model = m.into();
            }
            if let Some(p) = policy {
                train_cfg.policy = p.into();
            }
            if let Some(e) = epochs {
                train_cfg.epochs = e;
            }
            if let Some(q) = questions {
                train_cfg.questions = q;
            }
            match resume {
                Some(dir) => resume_training(&ctx, &dir, epochs),
                None => train_new(&ctx, train_cfg),
            }
        }
        Command::Eval {
            bundle,
            questions,
            averaging,
            samples,
        } => eval(&ctx, bundle, questions, averaging.into(), samples),
        Command::Interview { bundle, questions, top } => {
            let bundle = ModelBundle::load(&ctx.bundle_path(bundle)?)?;
            let k = questions.unwrap_or(bundle.config.questions);
            let stdin = io::stdin();
            interactive::run(&bundle, k, top, stdin.lock(), &mut io::stdout().lock())
        }
        Command::Serve { bundle, port, journal } => serve(&ctx, bundle, port, journal),
        Command::Report { run, samples } => report(&ctx, run, samples),
    }
}

fn ingest(ctx: &Context_, ratings: Option<PathBuf>, movies: Option<PathBuf>, user_sample: Option<f64>) -> Result<()> {
    let from_dir = |name: &str| ctx.data_dir.as_ref().map(|d| d.join(name));
    let ratings = ratings
        .or_else(|| from_dir("ratings.dat"))
        .ok_or_else(|| anyhow!("no ratings file; pass --ratings, --data-dir or set COLDSTART_DATA_DIR"))?;
    let movies = movies.or_else(|| from_dir("movies.dat"));
    let movies = match movies {
        Some(m) if m.exists() => Some(m),
        Some(m) => {
            log::warn!("{} not found; movies get placeholder titles", m.display());
            None
        }
        None => None,
    };
    let mut dataset = load_movielens(&ratings, movies.as_deref())?;
    if let Some(fraction) = user_sample {
        if !(fraction > 0.0 && fraction <= 1.0) {
            bail!("--user-sample must be in (0, 1], got {fraction}");
        }
        let mut users: Vec<u32> = (0..dataset.user_count() as u32).collect();
        users.shuffle(&mut seeded_rng(ctx.config.seed));
        users.truncate(((dataset.user_count() as f64 * fraction).floor() as usize).max(1));
        users.sort_unstable();
        dataset = dataset.subsample_users(&users)?;
    }
    fs::create_dir_all(&ctx.work).with_context(|| format!("creating {}", ctx.work.display()))?;
    dataset.save_cache(&ctx.path(DATASET_FILE))?;
    dataset.save_index_map(&ctx.path(INDEX_MAP_FILE))?;
    println!(
        "{} users, {} movies, {} ratings (mean {:.4}) -> {}",
        dataset.user_count(),
        dataset.movie_count(),
        dataset.ratings().len(),
        dataset.global_mean(),
        ctx.path(DATASET_FILE).display()
    );
    Ok(())
}

fn synth(ctx: &Context_, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.path("synthetic-data"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let dataset = generate(&ctx.config.synthetic)?;
    dataset.write_movielens(&out.join("ratings.dat"), &out.join("movies.dat"))?;
    println!(
        "{} users, {} movies, {} ratings -> {}",
        dataset.user_count(),
        dataset.movie_count(),
        dataset.ratings().len(),
        out.display()
    );
    Ok(())
}

fn split(ctx: &Context_) -> Result<()> {
    let dataset = ctx.dataset()?;
    let cfg = &ctx.config.split;
    let split = make_split(&dataset, cfg.user_fraction, cfg.movie_fraction, ctx.config.seed)?;
    split.save(&ctx.path(SPLIT_FILE))?;
    println!(
        "{} train / {} test users, {} interview / {} test movies -> {}",
        split.train_users().len(),
        split.test_users().len(),
        split.interview_movies().len(),
        split.test_movies().len(),
        ctx.path(SPLIT_FILE).display()
    );
    Ok(())
}

fn bpmf_train(ctx: &Context_) -> Result<()> {
    let dataset = ctx.dataset()?;
    let split = ctx.split(&dataset)?;
    let factors = train_bpmf_for_split(&dataset, &split, &ctx.config.bpmf)?;
    factors.save(&ctx.path(FACTORS_FILE))?;
    let d = &factors.diagnostics;
    println!(
        "D={} over {} Gibbs sweeps; final train RMSE {:.4}; {} regularized draws -> {}",
        factors.dim(),
        ctx.config.bpmf.gibbs_iterations,
        d.train_rmse.last().copied().unwrap_or(f64::NAN),
        d.regularized_draws,
        ctx.path(FACTORS_FILE).display()
    );
    Ok(())
}

fn train_new(ctx: &Context_, train_cfg: coldstart_core::TrainConfig) -> Result<()> {
    let dataset = ctx.dataset()?;
    let split = ctx.split(&dataset)?;
    let factors = ctx.factors(&dataset)?;
    train_cfg.validate()?;
    let bundle = ModelBundle::initialise(&train_cfg, &dataset, &factors)?;

    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let run = ctx
        .path(RUNS_DIR)
        .join(format!("{stamp}-{}-{}", train_cfg.model.name(), train_cfg.digest()));
    fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
    let mut effective = ctx.config.clone();
    effective.train = train_cfg;
    fs::write(run.join(RUN_CONFIG_FILE), effective.to_toml())?;
    println!("run directory {}", run.display());
    finish_training(bundle, &dataset, &split, &run, None)
}

fn resume_training(ctx: &Context_, run: &Path, epochs: Option<usize>) -> Result<()> {
    let dataset = ctx.dataset()?;
    let split = ctx.split(&dataset)?;
    let latest = run.join(LATEST_FILE);
    if !latest.exists() {
        bail!("{} has no {LATEST_FILE} to resume from", run.display());
    }
    let mut bundle = ModelBundle::load(&latest)?;
    if let Some(e) = epochs {
        bundle.config.epochs = e;
    }
    let best = run.join(BEST_FILE);
    let best = if best.exists() {
        Some(ModelBundle::load(&best)?)
    } else {
        None
    };
    println!(
        "resuming {} at epoch {}",
        run.display(),
        bundle.progress.epochs_completed
    );
    finish_training(bundle, &dataset, &split, run, best)
}

fn finish_training(
    bundle: ModelBundle,
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    run: &Path,
    best: Option<ModelBundle>,
) -> Result<()> {
    let progress = bundle.progress;
    let outcome = train(
        bundle,
        dataset,
        split,
        progress,
        TrainOptions {
            out_dir: Some(run.to_path_buf()),
            best,
            on_epoch: None,
        },
    )?;
    println!(
        "best test RMSE {} at epoch {}; {} restarts -> {}",
        outcome.best.best_test_rmse.map_or("-".into(), |r| format!("{r:.4}")),
        outcome.best.epoch_of_best.map_or("-".into(), |e| e.to_string()),
        outcome.restarts.len(),
        run.join(BEST_FILE).display()
    );
    Ok(())
}

fn eval(
    ctx: &Context_,
    bundle: Option<PathBuf>,
    questions: Option<usize>,
    averaging: Averaging,
    samples: usize,
) -> Result<()> {
    let path = ctx.bundle_path(bundle)?;
    let bundle = ModelBundle::load(&path)?;
    let dataset = ctx.dataset()?;
    bundle.check_dataset(&dataset)?;
    let split = ctx.split(&dataset)?;
    let k = questions.unwrap_or(bundle.config.questions);
    let mut report = evaluate(&bundle, &dataset, &split, k)?;
    let users: Vec<u32> = split.test_users().iter().copied().take(samples).collect();
    report.sample_interviews = sample_interviews(&bundle, &dataset, &split, &users, k)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = format!("eval-k{k}");
    write_report(&report, averaging, dir, &stem)?;
    print!("{}", report.to_text());
    println!(
        "headline ({}): {:.4}",
        averaging_name(averaging),
        report.headline(averaging)
    );
    Ok(())
}

fn averaging_name(a: Averaging) -> &'static str {
    match a {
        Averaging::Micro => "pooled",
        Averaging::Macro => "per-user mean",
    }
}

fn write_report(report: &EvalReport, averaging: Averaging, dir: &Path, stem: &str) -> Result<()> {
    let doc = serde_json::json!({
        "averaging": averaging,
        "headline_rmse": report.headline(averaging),
        "records": report.records(),
        "sample_interviews": report.sample_interviews,
    });
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    fs::write(dir.join(format!("{stem}.txt")), report.to_text())?;
    Ok(())
}

fn serve(ctx: &Context_, bundle: Option<PathBuf>, port: Option<u16>, journal: Option<PathBuf>) -> Result<()> {
    let bundle = ModelBundle::load(&ctx.bundle_path(bundle)?)?;
    let cfg = &ctx.config.serve;
    let journal = journal.or_else(|| (!cfg.journal.is_empty()).then(|| PathBuf::from(&cfg.journal)));
    let service = ServiceConfig {
        idle_timeout: Duration::from_secs(cfg.idle_timeout_secs),
        journal,
        cors_origins: cfg.cors_origins.clone(),
    };
    let addr = SocketAddr::from(([0, 0, 0, 0], port.unwrap_or(cfg.port)));
    tokio::runtime::Runtime::new()?
        .block_on(coldstart_service::serve(addr, Some(bundle), service))
        .context("HTTP service failed")
}

fn report(ctx: &Context_, run: Option<PathBuf>, samples: usize) -> Result<()> {
    let run = match run {
        Some(r) => r,
        None => ctx.latest_run()?,
    };
    let metrics_path = run.join(METRICS_FILE);
    if !metrics_path.exists() {
        bail!("missing {}; run `coldstart train` first", metrics_path.display());
    }
    let records = read_metrics(&metrics_path)?;
    let mut series = String::from("epoch,test_rmse,best_test_rmse\n");
    let mut best = f64::INFINITY;
    for r in &records {
        if let Some(rmse) = r.test_rmse {
            best = best.min(rmse);
            series.push_str(&format!("{},{rmse},{best}\n", r.epoch));
        }
    }
    fs::write(run.join(SERIES_FILE), &series)?;
    println!(
        "{} evaluated epochs -> {}",
        series.lines().count() - 1,
        run.join(SERIES_FILE).display()
    );

    if samples > 0 {
        let bundle = ModelBundle::load(&run.join(BEST_FILE))?;
        let dataset = ctx.dataset()?;
        bundle.check_dataset(&dataset)?;
        let split = ctx.split(&dataset)?;
        let users: Vec<u32> = split.test_users().iter().copied().take(samples).collect();
        let interviews = sample_interviews(&bundle, &dataset, &split, &users, bundle.config.questions)?;
        let mut text = String::new();
        for i in &interviews {
            text.push_str(&format!("user {}\nTurn\tMovie\tGenre\tRating\n", i.user_id));
            for r in &i.rows {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    r.turn,
                    r.title,
                    r.genres.join("|"),
                    r.rating
                ));
            }
            text.push('\n');
        }
        text.push_str(&format!("genre diversity {:.3}\n", genre_diversity(&interviews)));
        fs::write(run.join(SAMPLES_FILE), &text)?;
        let mut out = io::stdout().lock();
        out.write_all(text.as_bytes())?;
    }
    Ok(())
}
