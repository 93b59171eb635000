//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::PathBuf;

use cfasl::analysis::{
    composite_decomposition, dimension_swap_traversal, eigenvector_heatmap, export_frames, latent_scatter_export,
    sequential_symmetry_replay, write_json,
};
use cfasl::data::{generate_synthetic, save_dataset, FactorQuery, Manifest, SyntheticGrid};
use cfasl::equivariance::{AblationMask, LossTerm};
use cfasl::metrics::{fvm, m_fvm, MetricReport, Protocol};
use cfasl::train::{load_model, DatasetSpec, RunConfig, Trainer};
use cfasl::vae::{ObjectiveConfig, ObjectiveKind};
use cfasl::{Error, ExecMode, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{Analysis, AnalyzeArgs, EvalArgs, GenDataArgs, ObjectiveArg, TrainArgs};

pub const METRICS: [&str; 2] = ["fvm", "m_fvm"];
pub const REPORT_FILE: &str = "report.json";

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Applies the flag overrides of `args` on top of `config`.
pub fn apply_overrides(config: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field.clone() { config.$field = v; })* };
    }
    set!(seed, steps, batch_size, learning_rate, epsilon, threshold, gumbel_temperature, checkpoint_every, output_dir);
    if let Some(kind) = args.objective {
        let beta = config.objective.beta;
        config.objective = match kind {
            ObjectiveArg::BetaVae => ObjectiveConfig::beta_vae(beta),
            ObjectiveArg::BetaTcvae => ObjectiveConfig { kind: ObjectiveKind::BetaTcvae, ..config.objective },
        };
    }
    if let Some(beta) = args.beta {
        config.objective.beta = beta;
    }
    if let Some((sections, elements_per_section, latent_dim)) = args.codebook {
        config.codebook.sections = sections;
        config.codebook.elements_per_section = elements_per_section;
        config.codebook.latent_dim = latent_dim;
    }
    if let Some(path) = &args.dataset_dir {
        config.dataset = DatasetSpec::Directory { path: path.clone() };
    }
    if let Some(path) = &args.dsprites {
        config.dataset = DatasetSpec::Dsprites { path: path.clone(), subsample: args.subsample, subsample_seed: config.seed };
    }
    if args.all_off {
        config.ablation = AblationMask::all_off();
    }
    for (key, on) in &args.ablation {
        for term in LossTerm::parse_key(key)? {
            config.ablation.set(term, *on);
        }
    }
    config.validate()
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(checkpoint) => {
            let mut outcome = Ok(());
            let t = Trainer::resume(checkpoint, |c| outcome = apply_overrides(c, args))?;
            outcome?;
            t
        }
        None => {
            let mut config = match &args.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            apply_overrides(&mut config, args)?;
            Trainer::new(config)?
        }
    };
    log::info!(
        "training to step {} on {} images; losses: {}",
        trainer.config.steps,
        trainer.dataset.len(),
        trainer.config.ablation.enabled().map(LossTerm::name).collect::<Vec<_>>().join(",")
    );
    trainer.run()?;
    let last = trainer.history().last();
    println!(
        "finished at step {}; total loss {}; outputs in {}",
        trainer.step(),
        last.map_or("-".to_string(), |r| format!("{:.6}", r.total)),
        trainer.config.output_dir.display()
    );
    Ok(())
}

fn config_json(config: &RunConfig) -> Result<serde_json::Value> {
    serde_json::to_value(config).map_err(|e| invalid(format!("config snapshot: {e}")))
}

/// Validates the metric name against `k`.
pub fn check_metric(metric: &str, k: Option<usize>) -> Result<Option<usize>> {
    match (metric, k) {
        ("fvm", None) => Ok(None),
        ("fvm", Some(k)) => Err(invalid(format!("fvm fixes one factor per trial; drop --k {k} or use m_fvm"))),
        ("m_fvm", Some(k)) => Ok(Some(k)),
        ("m_fvm", None) => Err(invalid("m_fvm needs --k")),
        (other, _) => Err(invalid(format!("unknown metric `{other}`; valid metrics: {}", METRICS.join(", ")))),
    }
}

pub fn eval(args: &EvalArgs) -> Result<MetricReport> {
    let k = check_metric(&args.metric, args.k)?;
    let (config, model, ds) = load_model(&args.checkpoint)?;
    let protocol = Protocol {
        trials: args.trials,
        samples_per_vote: args.samples_per_vote,
        prune_threshold: args.prune_threshold,
        seed: args.seed,
        ..Protocol::default()
    };
    let mode = if args.sequential { ExecMode::Sequential } else { ExecMode::default() };
    let encoder = model.encode_dataset(&ds)?;
    let mut report = match k {
        None => fvm(&encoder, &ds, &protocol, mode)?,
        Some(k) => m_fvm(&encoder, &ds, k, &protocol, mode)?,
    };
    report.config = Some(config_json(&config)?);
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.join(REPORT_FILE));
    report.write_json(&out)?;
    println!("{:<8} {:>3} {:>8} {:>6}", "metric", "k", "score", "trials");
    println!("{}", report.table_row());
    Ok(report)
}

fn rows(ds_len: usize, indices: &[usize]) -> Result<()> {
    match indices.iter().find(|&&i| i >= ds_len) {
        Some(i) => Err(invalid(format!("row {i} is out of range for a dataset of {ds_len} images"))),
        None => Ok(()),
    }
}

/// Runs one analysis and returns the files it wrote.
pub fn analyze(args: &AnalyzeArgs) -> Result<Vec<PathBuf>> {
    let (_, model, ds) = load_model(&args.checkpoint)?;
    let out = args.out_dir.clone().unwrap_or_else(|| args.checkpoint.join("analysis"));
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let frames = |stem: &str| vec![out.join(format!("{stem}.png")), out.join(format!("{stem}.json"))];
    match &args.analysis {
        Analysis::Scatter { n, dims, fix, color_factor } => {
            let query = FactorQuery::new(fix.iter().map(|f| f.0).collect(), fix.iter().map(|f| f.1).collect());
            let dims = dims.map(|(a, b, c)| [a, b, c]);
            let table = latent_scatter_export(&model.vae, &ds, dims, &query, *n, *color_factor, &mut rng)?;
            for w in &table.warnings {
                log::warn!("{w}");
            }
            let path = out.join("scatter.csv");
            table.write_csv(&path)?;
            println!("scatter over dimensions {:?}, {} rows", table.dims, table.rows.len());
            Ok(vec![path])
        }
        Analysis::Eigen { n } => {
            let report = eigenvector_heatmap(&model.vae, &ds, *n, &mut rng)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            let path = out.join("eigen.csv");
            report.write_csv(&path)?;
            println!("one-hotness {:.4}", report.one_hotness);
            Ok(vec![path])
        }
        Analysis::Swap { source, target, num_dims } => {
            rows(ds.len(), &[*source, *target])?;
            let num_dims = num_dims.unwrap_or(model.latent_dim());
            let rec =
                dimension_swap_traversal(&model.vae, &ds.images(&[*source])?, &ds.images(&[*target])?, num_dims)?;
            export_frames(&out, "swap", &rec.decoded_images, rec.image_shape, &rec)?;
            println!("swapped dimensions {:?}", rec.edited_dims);
            Ok(frames("swap"))
        }
        Analysis::Decompose { source, target } => {
            rows(ds.len(), &[*source, *target])?;
            let rec = composite_decomposition(&model, &ds.images(&[*source])?, &ds.images(&[*target])?)?;
            export_frames(&out, "decompose", &rec.decoded_images, rec.image_shape, &rec)?;
            println!("active sections {:?}; single-shot mse {:.3e}", rec.active_sections, rec.single_shot_mse);
            Ok(frames("decompose"))
        }
        Analysis::Replay { indices } => {
            rows(ds.len(), indices)?;
            let rec = sequential_symmetry_replay(&model, &ds.images(indices)?)?;
            export_frames(&out, "replay", &rec.replay_images, rec.image_shape, &rec)?;
            println!("{} replay frames", rec.replay_images.len());
            Ok(frames("replay"))
        }
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<PathBuf> {
    let grid = SyntheticGrid {
        positions_x: args.positions_x,
        positions_y: args.positions_y,
        scales: args.scales,
        shapes: args.shapes,
    };
    let (ds, warnings) = generate_synthetic(&grid, args.image_size, args.seed)?;
    for w in &warnings {
        log::warn!("image {}: {}", w.index, w.message);
    }
    let mut manifest = Manifest::describe(&ds, args.seed)?;
    let grid_json = serde_json::to_value(grid).map_err(|e| invalid(e.to_string()))?;
    manifest.metadata = BTreeMap::from([("grid".to_string(), grid_json)]);
    save_dataset(&ds, &args.out, &manifest)?;
    write_json(&args.out.join("warnings.json"), &warnings)?;
    println!("wrote {} images ({} factors) to {}", ds.len(), ds.num_factors(), args.out.display());
    Ok(args.out.clone())
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::DegenerateRepresentation(_) => 2,
        Error::NumericalFailure { .. } | Error::NonFinite(_) => 3,
        Error::Io { .. } | Error::Format { .. } | Error::CorruptArchive { .. } => 4,
        _ => 1,
    }
}
