use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use seqintent_core::ablation::AblationRunner;
use seqintent_core::analytics::{
    adjusted_rand_index, attention_report, center_exemplars, cluster_purity, embed_users,
    kmeans_pp, pca_project,
};
use seqintent_core::config::Window;
use seqintent_core::data::{
    generate_catalog, generate_users, latent_path, read_jsonl, read_latent_jsonl, split_dataset,
    write_catalog, write_jsonl, write_latent_jsonl, LatentLabels, UserSequence,
};
use seqintent_core::eval::{compare, evaluate, EvalReport};
use seqintent_core::manifest::RunManifest;
use seqintent_core::trainer::{Checkpoint, Trainer};
use seqintent_core::{Arch, Config, Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "seqintent",
    version,
    about = "Intent-aware sequential recommender"
)]
struct Cli {
    /// TOML config, or a run manifest whose config is reused.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Overrides both the data and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a catalog and train/val/test interaction files.
    Generate,
    /// Train a model on `<data>/train.jsonl`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Arch>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Short-term window, e.g. `1w` or `1m`.
        #[arg(long)]
        window: Option<Window>,
        /// Continue from a checkpoint until the epoch budget is reached.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank the final interaction of every user in a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Relative change and paired t-test of report `b` over report `a`.
    Compare { a: PathBuf, b: PathBuf },
    /// Architecture and head ablation tables.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = AblateMode::All)]
        mode: AblateMode,
    },
    /// Cluster final-position intent embeddings and report head attention.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Users listed per cluster and per head.
        #[arg(long, default_value_t = 10)]
        exemplars: usize,
    },
    /// Summarize a dataset directory, checkpoint, report or manifest.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn file(self) -> &'static str {
        match self {
            SplitName::Train => "train.jsonl",
            SplitName::Val => "val.jsonl",
            SplitName::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateMode {
    Architecture,
    Heads,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => generate(cli),
        Command::Train {
            data,
            variant,
            epochs,
            lambda,
            window,
            resume,
        } => {
            let mut cfg = base_config(cli)?;
            if let Some(v) = variant {
                cfg.variant.arch = *v;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = *e;
            }
            if let Some(l) = lambda {
                cfg.training.lambda = *l;
            }
            if let Some(w) = window {
                cfg.features.window = *w;
            }
            cfg.validate()?;
            train(cli, cfg, data, resume.as_deref())
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
        } => evaluate_cmd(cli, checkpoint, data, *split),
        Command::Compare { a, b } => compare_cmd(cli, a, b),
        Command::Ablate { seeds, mode } => ablate(cli, seeds, *mode),
        Command::Cluster {
            checkpoint,
            data,
            split,
            k,
            exemplars,
        } => cluster(cli, checkpoint, data, *split, *k, *exemplars),
        Command::Inspect { path } => inspect(path),
    }
}

fn base_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) if p.extension().is_some_and(|e| e == "json") => RunManifest::load(p)?.config,
        Some(p) => Config::load(p)?,
        None => Config::profile(&cli.profile)?,
    };
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.training.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.training.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory, refusing a non-empty one without `--force`.
fn prepare_out(cli: &Cli) -> Result<&Path> {
    let out = cli.out.as_path();
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() && !cli.force {
            return Err(Error::config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn generate(cli: &Cli) -> Result<()> {
    let cfg = base_config(cli)?;
    let out = prepare_out(cli)?;
    let catalog = generate_catalog(cfg.data.num_items, cfg.data.seed)?;
    let users = generate_users(&catalog, &cfg.data)?;
    let [a, b, c] = cfg.data.split;
    let split = split_dataset(&users.sequences, (a, b, c), cfg.data.seed)?;

    let mut manifest = RunManifest::new("generate", &cfg);
    let path = out.join("catalog.json");
    write_catalog(&path, &catalog)?;
    manifest.artifact("catalog", &path)?;
    for (name, part) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        let path = out.join(format!("{name}.jsonl"));
        write_jsonl(&path, part)?;
        manifest.artifact(name, &path)?;
        let labels: Vec<LatentLabels> = part
            .iter()
            .map(|u| {
                users
                    .latent
                    .iter()
                    .find(|l| l.user_id == u.user_id)
                    .cloned()
                    .expect("every generated user has latent labels")
            })
            .collect();
        let lpath = latent_path(&path);
        write_latent_jsonl(&lpath, &labels)?;
        manifest.artifact(&format!("{name}_latent"), &lpath)?;
    }
    manifest.finish();
    manifest.save(out.join("manifest.json"))?;
    log::info!(
        "wrote {} items and {}/{}/{} users to {}",
        catalog.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

/// Refuses data generated for a different catalog size than `cfg` expects.
fn check_dataset(data: &Path, cfg: &Config) -> Result<()> {
    let path = data.join("manifest.json");
    if !path.exists() {
        return Ok(());
    }
    let m = RunManifest::load(&path)?;
    if m.config.data.num_items != cfg.data.num_items {
        return Err(Error::SchemaMismatch {
            expected: format!("{} items", cfg.data.num_items),
            found: format!("{} items in {}", m.config.data.num_items, data.display()),
            fields: vec!["data.num_items".into()],
        });
    }
    Ok(())
}

fn load_split(data: &Path, split: SplitName, cfg: &Config) -> Result<(PathBuf, Vec<UserSequence>)> {
    check_dataset(data, cfg)?;
    let path = data.join(split.file());
    let users = read_jsonl(&path, Some(cfg.data.num_items))?;
    Ok((path, users))
}

fn train(cli: &Cli, cfg: Config, data: &Path, resume: Option<&Path>) -> Result<()> {
    let (train_path, users) = load_split(data, SplitName::Train, &cfg)?;
    let out = prepare_out(cli)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            ckpt.ensure_schema(&cfg)?;
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            t.set_training(cfg.training.clone())?;
            log::info!("resuming after epoch {}", t.epochs_completed());
            t
        }
        None => Trainer::new(&cfg)?,
    };
    let mut manifest = RunManifest::new("train", trainer.model.config());
    manifest.input("dataset", &train_path);
    if let Some(p) = resume {
        manifest.input("resume", p);
    }
    while trainer.epochs_completed() < cfg.training.epochs {
        let e = trainer.run_epoch(&users)?;
        log::info!("epoch {} item {:.5} total {:.5}", e.epoch, e.item, e.total);
    }
    let ckpt_path = out.join("checkpoint.json");
    trainer.checkpoint().save(&ckpt_path)?;
    manifest.artifact("checkpoint", &ckpt_path)?;
    let loss_path = out.join("loss.csv");
    write_text(&loss_path, &trainer.trace.to_csv())?;
    manifest.artifact("loss", &loss_path)?;
    manifest.finish();
    manifest.save(out.join("manifest.json"))
}

/// Loads a checkpoint, checking it against `--config` when one is given.
fn load_checkpoint(cli: &Cli, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if cli.config.is_some() {
        let mut cfg = base_config(cli)?;
        cfg.variant = ckpt.config.variant.clone();
        ckpt.ensure_schema(&cfg)?;
    }
    Ok(ckpt)
}

fn evaluate_cmd(cli: &Cli, checkpoint: &Path, data: &Path, split: SplitName) -> Result<()> {
    let ckpt = load_checkpoint(cli, checkpoint)?;
    let model = ckpt.to_model()?;
    let (path, users) = load_split(data, split, model.config())?;
    let out = prepare_out(cli)?;
    let report = evaluate(&model, &users)?;
    report.validate()?;
    let mut manifest = RunManifest::new("evaluate", model.config());
    manifest.input("checkpoint", checkpoint);
    manifest.input("dataset", &path);
    let json = out.join("report.json");
    write_json(&json, &report)?;
    manifest.artifact("report", &json)?;
    let csv = out.join("report.csv");
    write_text(&csv, &report.to_csv())?;
    manifest.artifact("report_csv", &csv)?;
    manifest.finish();
    manifest.save(out.join("manifest.json"))?;
    println!("{}", report.to_csv());
    Ok(())
}

fn compare_cmd(cli: &Cli, a: &Path, b: &Path) -> Result<()> {
    let ra: EvalReport = read_json(a)?;
    let rb: EvalReport = read_json(b)?;
    ra.validate()?;
    rb.validate()?;
    let cmp = compare(&ra, &rb)?;
    let out = prepare_out(cli)?;
    write_json(&out.join("comparison.json"), &cmp)?;
    println!(
        "item MRR {:.4} -> {:.4} ({:+.2}%)",
        cmp.item_mrr.0, cmp.item_mrr.1, cmp.item_mrr_pct
    );
    println!(
        "item WMRR {:.4} -> {:.4} ({:+.2}%)",
        cmp.item_wmrr.0, cmp.item_wmrr.1, cmp.item_wmrr_pct
    );
    for (head, pct) in &cmp.intent_mrr_pct {
        println!("{head} MRR {pct:+.2}%");
    }
    match &cmp.t_test {
        Some(t) => match (t.t, t.p) {
            (Some(tv), Some(p)) => println!("paired t-test: n {} t {tv:.4} p {p:.4}", t.n),
            _ => println!("paired t-test: n {} degenerate (zero variance)", t.n),
        },
        None => println!("paired t-test: fewer than two shared users"),
    }
    Ok(())
}

fn ablate(cli: &Cli, seeds: &[u64], mode: AblateMode) -> Result<()> {
    let cfg = base_config(cli)?;
    let out = prepare_out(cli)?;
    let mut runner = AblationRunner::new(&cfg, seeds)?;
    let mut manifest = RunManifest::new("ablate", &cfg);
    let mut tables = Vec::new();
    if mode != AblateMode::Heads {
        tables.push(("architecture", runner.architecture_table()?));
    }
    if mode != AblateMode::Architecture {
        tables.push(("heads", runner.head_table()?));
    }
    for (name, table) in &tables {
        let md = out.join(format!("{name}.md"));
        write_text(&md, &table.to_markdown())?;
        manifest.artifact(name, &md)?;
        let csv = out.join(format!("{name}.csv"));
        write_text(&csv, &table.to_csv())?;
        manifest.artifact(&format!("{name}_csv"), &csv)?;
        println!("{}", table.to_markdown());
    }
    let json = out.join("ablation.json");
    let all: Vec<_> = tables.iter().map(|(_, t)| t).collect();
    write_json(&json, &all)?;
    manifest.artifact("tables", &json)?;
    manifest.finish();
    manifest.save(out.join("manifest.json"))
}

#[derive(serde::Serialize)]
struct ClusterSummary {
    k: usize,
    users: usize,
    inertia: f64,
    iterations: usize,
    sizes: Vec<usize>,
    centers: Vec<Vec<f64>>,
    /// User ids closest to each center.
    exemplars: Vec<Vec<u64>>,
    explained_variance_ratio: Vec<f64>,
    purity: Option<f64>,
    adjusted_rand_index: Option<f64>,
}

fn cluster(
    cli: &Cli,
    checkpoint: &Path,
    data: &Path,
    split: SplitName,
    k: usize,
    exemplars: usize,
) -> Result<()> {
    let ckpt = load_checkpoint(cli, checkpoint)?;
    let model = ckpt.to_model()?;
    let (path, users) = load_split(data, split, model.config())?;
    let out = prepare_out(cli)?;
    let mut emb = embed_users(&model, &users)?;
    let lpath = latent_path(&path);
    if lpath.exists() {
        let labels = read_latent_jsonl(&lpath)?;
        for e in &mut emb {
            e.latent = labels
                .iter()
                .find(|l| l.user_id == e.user_id)
                .and_then(|l| l.latent.last().copied());
        }
    }
    let points: Vec<Vec<f64>> = emb.iter().map(|e| e.z.clone()).collect();
    let seed = cli.seed.unwrap_or(model.config().training.seed);
    let km = kmeans_pp(&points, k, seed, 300, 1e-10)?;
    let pca = pca_project(&points, 2)?;
    let (purity, ari) = match emb.iter().map(|e| e.latent).collect::<Option<Vec<usize>>>() {
        Some(labels) => (
            Some(cluster_purity(&km.assignments, &labels)?),
            Some(adjusted_rand_index(&km.assignments, &labels)?),
        ),
        None => (None, None),
    };

    let mut manifest = RunManifest::new("cluster", model.config());
    manifest.input("checkpoint", checkpoint);
    manifest.input("dataset", &path);

    let mut csv = String::from("user_id,cluster,x,y\n");
    for (i, e) in emb.iter().enumerate() {
        let p = &pca.projected[i];
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.user_id, km.assignments[i], p[0], p[1]
        ));
    }
    let csv_path = out.join("assignments.csv");
    write_text(&csv_path, &csv)?;
    manifest.artifact("assignments", &csv_path)?;

    let mut sizes = vec![0; k];
    km.assignments.iter().for_each(|&c| sizes[c] += 1);
    let summary = ClusterSummary {
        k,
        users: emb.len(),
        inertia: km.inertia,
        iterations: km.iterations,
        sizes,
        centers: km.centers.clone(),
        exemplars: center_exemplars(&points, &km, exemplars)
            .into_iter()
            .map(|c| c.into_iter().map(|i| emb[i].user_id).collect())
            .collect(),
        explained_variance_ratio: pca.explained_variance_ratio.clone(),
        purity,
        adjusted_rand_index: ari,
    };
    let sum_path = out.join("clusters.json");
    write_json(&sum_path, &summary)?;
    manifest.artifact("clusters", &sum_path)?;

    let heads: Vec<String> = model.net.heads.iter().map(|h| h.name.clone()).collect();
    let report = attention_report(&heads, &emb, exemplars)?;
    let att_path = out.join("attention.json");
    write_json(&att_path, &report)?;
    manifest.artifact("attention", &att_path)?;
    manifest.finish();
    manifest.save(out.join("manifest.json"))?;

    if let (Some(p), Some(a)) = (purity, ari) {
        println!("purity {p:.4} ARI {a:.4}");
    }
    for (h, n) in heads.iter().zip(&report.histogram) {
        println!("primary intent {h}: {n} users");
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let mpath = path.join("manifest.json");
        if mpath.exists() {
            let m = RunManifest::load(&mpath)?;
            m.verify()?;
            println!(
                "{}: {} run, config {}, all artifacts verified",
                path.display(),
                m.command,
                m.config_hash
            );
        }
        for name in ["train", "val", "test"] {
            let p = path.join(format!("{name}.jsonl"));
            if p.exists() {
                let users = read_jsonl(&p, None)?;
                let n: usize = users.iter().map(UserSequence::len).sum();
                println!("{name}: {} users, {n} interactions", users.len());
            }
        }
        return Ok(());
    }
    let value: serde_json::Value = read_json(path)?;
    if value.get("command").is_some() {
        let m: RunManifest = serde_json::from_value(value)?;
        m.verify()?;
        println!(
            "{} run, variant {}, seed {}, engine {}, config {}",
            m.command, m.variant, m.seed, m.engine_version, m.config_hash
        );
        for (role, a) in &m.artifacts {
            println!("  {role}: {} ({})", a.path.display(), a.sha256);
        }
        println!("all artifacts verified");
    } else if value.get("format_version").is_some() {
        let ckpt = Checkpoint::load(path)?;
        let model = ckpt.to_model()?;
        let params: usize = ckpt.params.values().map(|t| t.data.len()).sum();
        println!(
            "checkpoint: variant {}, {} epochs, {} tensors, {params} parameters, schema {}",
            ckpt.config.variant.arch,
            ckpt.epochs_completed,
            ckpt.params.len(),
            ckpt.schema_hash
        );
        let heads: Vec<&str> = model.net.heads.iter().map(|h| h.name.as_str()).collect();
        println!("heads: {heads:?}");
        if let Some(last) = ckpt.trace.as_ref().and_then(|t| t.epochs.last()) {
            println!(
                "last epoch {}: item {:.5} total {:.5}",
                last.epoch, last.item, last.total
            );
        }
    } else if value.get("per_user").is_some() {
        let r: EvalReport = serde_json::from_value(value)?;
        r.validate()?;
        print!("{}", r.to_csv());
    } else {
        return Err(Error::validation(
            path.display().to_string(),
            "not a manifest, checkpoint or report",
        ));
    }
    Ok(())
}
