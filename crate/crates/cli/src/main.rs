use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use pmil::checkpoint::{load_pmil, load_smil, save_checkpoint, Checkpoint};
use pmil::config::{read_meta, write_meta, Ablation, RunConfig};
use pmil::data::load_dataset;
use pmil::eval::{evaluate, read_detections, read_report, write_detections, write_report, EvalReport};
use pmil::pipeline::{generate_proposals, infer, train_stage1, train_stage2, Models, Scoring, Split};
use pmil::proposals::{read_proposal_file, write_proposal_file};
use pmil::synthetic::{generate_synthetic, SyntheticSpec};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "pmil", version, about = "Two-stage weakly-supervised temporal action localization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-modality dataset from a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Train the stage-1 snippet-level model.
    TrainSmil {
        /// Training manifest (defaults to `data.train_manifest`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate candidate proposals from a stage-1 model.
    GenProposals {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "proposals.json")]
        name: String,
    },
    /// Train the stage-2 proposal-level model.
    TrainPmil {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        proposals: PathBuf,
        /// scfe_mode=<contrast|concat|no_extend>, no_pce, no_irc or no_background.
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Score the candidates of a test set.
    Infer {
        /// Test manifest (defaults to `data.test_manifest`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        proposals: PathBuf,
        /// pmil, smil, gt or fuse.
        #[arg(long, default_value = "pmil")]
        scoring: String,
        #[arg(long)]
        smil: Option<PathBuf>,
        #[arg(long)]
        pmil: Option<PathBuf>,
        /// Without `--pmil`, a stage-2 model is trained on these first.
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        train_proposals: Option<PathBuf>,
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long, default_value = "detections.json")]
        name: String,
    },
    /// Compute mAP at the configured IoU thresholds.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate even if the detections were produced under another config.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "report.json")]
        name: String,
    },
    /// Tabulate several evaluation reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<pmil::Error>() {
            return match e {
                pmil::Error::InvalidArgument(_) | pmil::Error::Config(_) => EXIT_USAGE,
                pmil::Error::Load { .. }
                | pmil::Error::Dataset(_)
                | pmil::Error::Checkpoint(_)
                | pmil::Error::Eval(_)
                | pmil::Error::Io(_)
                | pmil::Error::Json(_) => EXIT_DATA,
                pmil::Error::Training(_) | pmil::Error::Oracle(_) => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn apply_ablations(config: &mut RunConfig, ablations: &[String]) -> Result<()> {
    for a in ablations {
        config.apply_ablation(a.parse::<Ablation>()?);
    }
    config.validate()?;
    Ok(())
}

fn resolve_data(flag: Option<&PathBuf>, configured: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or(configured)
        .cloned()
        .ok_or_else(|| usage(format!("no {what} manifest: pass --data or set it in the config")))
}

fn load_split(path: &Path) -> Result<Split> {
    let dataset = load_dataset(path)?;
    Ok(Split::from_dataset(&dataset)?)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(pmil::Error::from).with_context(|| format!("creating {}", dir.display()))
}

fn check_feature_dim(split: &Split, expected: usize, what: &str) -> Result<()> {
    let found = split.features.first().map(|f| f.feature_dim());
    match found {
        Some(d) if d != expected => Err(pmil::Error::Dataset(format!(
            "{what} expects {expected}-dim features per modality, the data has {d}"
        ))
        .into()),
        _ => Ok(()),
    }
}

fn cmd_gen_data(common: &Common, spec_path: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| usage(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid spec {}: {e}", spec_path.display())))?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| usage(format!("invalid spec: {e}")))?;
    prepare_out(&common.out)?;
    let paths = generate_synthetic(&spec, &common.out)?;
    let config = load_config(common)?;
    write_meta(&paths.train_manifest, "gen-data", &config)?;
    println!(
        "{} training videos -> {}",
        spec.num_videos,
        paths.train_manifest.display()
    );
    if let Some(test) = &paths.test_manifest {
        write_meta(test, "gen-data", &config)?;
        println!("{} test videos -> {}", spec.num_test_videos, test.display());
    }
    Ok(())
}

fn cmd_train_smil(common: &Common, data: Option<&PathBuf>) -> Result<()> {
    let config = load_config(common)?;
    let path = resolve_data(data, config.data.train_manifest.as_ref(), "training")?;
    let split = load_split(&path)?;
    let trained = train_stage1(&split, &config)?;
    prepare_out(&common.out)?;
    let out = common.out.join("smil.ckpt");
    save_checkpoint(&out, &Checkpoint::Smil(trained.params))?;
    write_meta(&out, "train-smil", &config)?;
    if let Some(last) = trained.log.last() {
        println!("stage 1: {} epochs, final loss {:.5}", last.epoch + 1, last.mean_loss);
    }
    println!("checkpoint -> {}", out.display());
    Ok(())
}

fn cmd_gen_proposals(common: &Common, checkpoint: &Path, data: &Path, name: &str) -> Result<()> {
    let config = load_config(common)?;
    let params = load_smil(checkpoint)?;
    let split = load_split(data)?;
    check_feature_dim(&split, params.d_model() / 2, "the stage-1 checkpoint")?;
    let proposals = generate_proposals(&params, &split, &config)?;
    prepare_out(&common.out)?;
    let out = common.out.join(name);
    write_proposal_file(&out, &proposals)?;
    write_meta(&out, "gen-proposals", &config)?;
    let total: usize = proposals.iter().map(|p| p.proposals.len()).sum();
    let actions: usize = proposals.iter().map(|p| p.actions().len()).sum();
    println!("{total} candidates ({actions} action) for {} videos -> {}", proposals.len(), out.display());
    Ok(())
}

fn cmd_train_pmil(common: &Common, data: Option<&PathBuf>, proposals: &Path, ablate: &[String]) -> Result<()> {
    let mut config = load_config(common)?;
    apply_ablations(&mut config, ablate)?;
    let path = resolve_data(data, config.data.train_manifest.as_ref(), "training")?;
    let split = load_split(&path)?;
    let props = read_proposal_file(proposals)?;
    let trained = train_stage2(&split, &props, &config)?;
    if !trained.skipped.is_empty() {
        warn!("{} videos without candidates were skipped", trained.skipped.len());
    }
    prepare_out(&common.out)?;
    let out = common.out.join("pmil.ckpt");
    save_checkpoint(&out, &Checkpoint::Pmil(trained.params))?;
    write_meta(&out, "train-pmil", &config)?;
    if let Some(last) = trained.log.last() {
        println!("stage 2: {} epochs, final loss {:.5}", last.epoch + 1, last.mean_loss);
    }
    println!("checkpoint -> {}", out.display());
    Ok(())
}

struct InferArgs<'a> {
    data: Option<&'a PathBuf>,
    proposals: &'a Path,
    scoring: &'a str,
    smil: Option<&'a PathBuf>,
    pmil: Option<&'a PathBuf>,
    train_data: Option<&'a PathBuf>,
    train_proposals: Option<&'a PathBuf>,
    ablate: &'a [String],
    name: &'a str,
}

fn cmd_infer(common: &Common, args: InferArgs<'_>) -> Result<()> {
    let mut config = load_config(common)?;
    apply_ablations(&mut config, args.ablate)?;
    let scoring: Scoring = args.scoring.parse()?;
    let path = resolve_data(args.data, config.data.test_manifest.as_ref(), "test")?;
    let split = load_split(&path)?;
    let proposals = read_proposal_file(args.proposals)?;

    let smil = match args.smil {
        Some(p) => {
            let params = load_smil(p)?;
            check_feature_dim(&split, params.d_model() / 2, "the stage-1 checkpoint")?;
            Some(params)
        }
        None => None,
    };
    let needs_pmil = matches!(scoring, Scoring::Pmil | Scoring::Fuse);
    let pmil = match (args.pmil, needs_pmil) {
        (Some(p), _) => {
            if !args.ablate.is_empty() {
                warn!("ablations that change training have no effect on a supplied stage-2 checkpoint");
            }
            let params = load_pmil(p)?;
            check_feature_dim(&split, params.feature_dim(), "the stage-2 checkpoint")?;
            Some(params)
        }
        (None, true) => {
            let (Some(td), Some(tp)) = (args.train_data, args.train_proposals) else {
                return Err(usage(format!(
                    "`{}` scoring needs --pmil, or --train-data and --train-proposals to train one",
                    scoring.as_str()
                )));
            };
            info!("training a stage-2 model for this run");
            let train = load_split(td)?;
            let train_props = read_proposal_file(tp)?;
            Some(train_stage2(&train, &train_props, &config)?.params)
        }
        (None, false) => None,
    };
    if matches!(scoring, Scoring::Smil | Scoring::Fuse) && smil.is_none() {
        return Err(usage(format!("`{}` scoring needs --smil", scoring.as_str())));
    }

    let models = Models {
        smil: smil.as_ref(),
        pmil: pmil.as_ref(),
    };
    let dets = infer(scoring, models, &split, &proposals, &config)?;
    prepare_out(&common.out)?;
    let out = common.out.join(args.name);
    write_detections(&out, &dets, &split.class_names)?;
    write_meta(&out, "infer", &config)?;
    println!("{} detections ({} scoring) -> {}", dets.len(), scoring.as_str(), out.display());
    Ok(())
}

fn cmd_eval(common: &Common, detections: &Path, data: Option<&PathBuf>, force: bool, name: &str) -> Result<()> {
    let dets = read_detections(detections)?;
    let meta = read_meta(detections).ok();
    let explicit = common.config.is_some() || common.seed.is_some();
    let config = match (&meta, explicit) {
        (Some(m), false) => RunConfig::from_value(m.config.clone())?,
        _ => load_config(common)?,
    };
    let fingerprint = match &meta {
        Some(m) => {
            if m.fingerprint != config.fingerprint() {
                if !force {
                    return Err(usage(format!(
                        "detections were produced under config {} but this run uses {}; pass --force to evaluate anyway",
                        m.fingerprint,
                        config.fingerprint()
                    )));
                }
                warn!("config fingerprint mismatch overridden");
            }
            m.fingerprint.clone()
        }
        None => {
            warn!("{} has no metadata sidecar; recording this run's config", detections.display());
            config.fingerprint()
        }
    };
    let path = resolve_data(data, config.data.test_manifest.as_ref(), "test")?;
    let dataset = load_dataset(&path)?;
    let mut report = evaluate(&dets, &dataset.videos, &dataset.class_names, &config.eval.iou_thresholds)?;
    report.fingerprint = Some(fingerprint);
    prepare_out(&common.out)?;
    let out = common.out.join(name);
    write_report(&out, &report)?;
    fs::write(out.with_extension("txt"), report.to_table())?;
    write_meta(&out, "eval", &config)?;
    print!("{}", report.to_table());
    Ok(())
}

fn summary_table(reports: &[(String, EvalReport)]) -> String {
    let mut lines = Vec::new();
    let width = reports.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    if let Some((_, first)) = reports.first() {
        let mut header = format!("{:width$} | {:12}", "report", "fingerprint");
        for t in &first.iou_thresholds {
            header.push_str(&format!(" | {t:>5.2}"));
        }
        for b in &first.bands {
            header.push_str(&format!(" | AVG({})", b.name));
        }
        lines.push(header);
    }
    for (name, r) in reports {
        let fp = r.fingerprint.as_deref().map(|f| &f[..f.len().min(12)]).unwrap_or("-");
        let mut row = format!("{name:width$} | {fp:12}");
        for m in &r.map {
            row.push_str(&format!(" | {:>5.1}", 100.0 * m));
        }
        for b in &r.bands {
            let w = b.name.len() + 5;
            row.push_str(&format!(" | {:>w$.1}", 100.0 * b.map));
        }
        lines.push(row);
    }
    lines.join("\n") + "\n"
}

fn cmd_report(common: &Common, paths: &[PathBuf]) -> Result<()> {
    let config = load_config(common)?;
    let mut reports = Vec::new();
    for p in paths {
        let report = read_report(p)?;
        if let Some((_, first)) = reports.first() {
            let first: &EvalReport = first;
            if first.iou_thresholds != report.iou_thresholds {
                return Err(pmil::Error::Dataset(format!(
                    "{} uses different IoU thresholds from {}",
                    p.display(),
                    paths[0].display()
                ))
                .into());
            }
        }
        reports.push((p.display().to_string(), report));
    }
    let table = summary_table(&reports);
    prepare_out(&common.out)?;
    let out = common.out.join("summary.txt");
    fs::write(&out, &table).map_err(pmil::Error::from)?;
    write_meta(&out, "report", &config)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::GenData { spec } => cmd_gen_data(common, spec),
        Command::TrainSmil { data } => cmd_train_smil(common, data.as_ref()),
        Command::GenProposals { checkpoint, data, name } => cmd_gen_proposals(common, checkpoint, data, name),
        Command::TrainPmil { data, proposals, ablate } => cmd_train_pmil(common, data.as_ref(), proposals, ablate),
        Command::Infer {
            data,
            proposals,
            scoring,
            smil,
            pmil,
            train_data,
            train_proposals,
            ablate,
            name,
        } => cmd_infer(
            common,
            InferArgs {
                data: data.as_ref(),
                proposals,
                scoring,
                smil: smil.as_ref(),
                pmil: pmil.as_ref(),
                train_data: train_data.as_ref(),
                train_proposals: train_proposals.as_ref(),
                ablate,
                name,
            },
        ),
        Command::Eval { detections, data, force, name } => cmd_eval(common, detections, data.as_ref(), *force, name),
        Command::Report { reports } => cmd_report(common, reports),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
