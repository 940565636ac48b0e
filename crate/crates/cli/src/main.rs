use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use segcascade::arch::ArchitectureSpec;
use segcascade::config::{resolve_architecture, RunConfig};
use segcascade::metrics::Evaluation;
use segcascade::model::{build_model, Model, ModelVariant};
use segcascade::mvol;
use segcascade::pipeline::{load_dataset, save_volume_set};
use segcascade::synth::generate_synthetic;
use segcascade::trainer::{
    compare, evaluate_cohort, extract_training_features, file_stem, load_features, normalize_cohort,
    pretrain_subnetwork, save_segmentations, segment_cohort, train_2d, train_3d, FeatureSource, RunDir,
};
use segcascade::volume::{LabelVolume, Orientation, VolumeSet};
use segcascade::vote::{merge_segmentations, Comparison, Thresholds};

#[derive(Parser)]
#[command(
    name = "segcascade",
    version,
    about = "2D-3D cascaded segmentation of multi-modal volumes"
)]
struct Cli {
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled cohort as MVOL pairs.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        patients: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train slice networks, one per orientation.
    Train2d {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        training: TrainingArgs,
        /// Orientations to train.
        #[arg(long, value_delimiter = ',', default_values = ["axial", "coronal", "sagittal"])]
        orientations: Vec<String>,
        /// Network family; inferred from the architecture name when omitted.
        #[arg(long)]
        family: Option<Family>,
        /// Pretrain each modality subnetwork on every patient that has the
        /// modality, then train jointly on patients with all modalities.
        #[arg(long)]
        pretrain_subnetworks: bool,
    },
    /// Run three trained slice networks over a cohort and store their scores.
    ExtractFeatures {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of `<id>_image.mvol` files.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration whose normalization constant applies.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "1")]
        family: Family,
        /// Name of the feature set inside the run directory.
        #[arg(long, default_value = "m1")]
        source: String,
    },
    /// Train a patch network, with or without imported features.
    Train3d {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        training: TrainingArgs,
        /// One of 3d, 2d3d-a, 2d3d-b, 2d3d-c.
        #[arg(long, default_value = "2d3d-a")]
        variant: String,
        /// Feature set for feature variants.
        #[arg(long, default_value = "m1")]
        features: String,
    },
    /// Segment a cohort with a trained network.
    Segment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: PathBuf,
        /// Run configuration whose normalization constant applies.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameter file name inside `params/` (without `.json`) or a path.
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "m1")]
        features: String,
    },
    /// Merge label volumes by hierarchical vote.
    Merge {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.4)]
        t_tumor: f64,
        #[arg(long, default_value_t = 0.3)]
        t_core: f64,
        #[arg(long, default_value_t = 0.4)]
        t_enh: f64,
        #[arg(long, default_value = "inclusive")]
        comparison: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice per patient and summary statistics as tab-separated text.
    Eval {
        /// Labelled cohort.
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<id>_seg.mvol` files.
        #[arg(long)]
        segmentations: PathBuf,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the receptive field of an architecture, one extent per axis.
    ReceptiveField {
        /// Architecture file (with or without `.toml`) or builtin name.
        #[arg(long)]
        config: String,
    },
    /// Train several patch variants identically and tabulate test Dice.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        training: TrainingArgs,
        /// Labelled test cohort.
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_values = ["3d", "2d3d-a"])]
        variants: Vec<String>,
        #[arg(long, default_value = "m1")]
        features: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run name; outputs go to `<root>/<name>/`.
    #[arg(long)]
    run: String,
    #[arg(long, default_value = "run")]
    root: PathBuf,
}

impl RunArgs {
    fn open(&self) -> Result<RunDir> {
        let dir = self.root.join(&self.run);
        RunDir::create(&dir).with_context(|| format!("creating run directory {}", dir.display()))
    }
}

#[derive(Args)]
struct TrainingArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Labelled training cohort.
    #[arg(long)]
    data: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainingArgs {
    fn load(&self) -> Result<(RunConfig, ArchitectureSpec)> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        let spec = config.architecture_spec()?;
        Ok((config, spec))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

impl Family {
    fn variant(self, o: Orientation) -> ModelVariant {
        match self {
            Family::One => ModelVariant::TwoD1(o),
            Family::Two => ModelVariant::TwoD2(o),
        }
    }
}

fn cohort(dir: &Path, config: &RunConfig) -> Result<Vec<VolumeSet>> {
    let raw = load_dataset(dir).with_context(|| format!("loading cohort from {}", dir.display()))?;
    Ok(normalize_cohort(&raw, config.pipeline.normalization_constant)?)
}

/// Intensity normalization constant of the run configuration, if given.
fn normalization(config: Option<&Path>) -> Result<f64> {
    Ok(match config {
        Some(p) => RunConfig::load(p)?.pipeline.normalization_constant,
        None => segcascade::config::PipelineConfig::default().normalization_constant,
    })
}

fn params_name(variant: ModelVariant, features: Option<&str>) -> String {
    match features {
        Some(f) => format!("{variant}-{f}"),
        None => variant.to_string(),
    }
}

fn save_model(run: &RunDir, name: &str, model: &Model<f32>) -> Result<()> {
    let path = run.params(name);
    model.save(&path)?;
    info!("saved {}", path.display());
    Ok(())
}

fn load_model(run: &RunDir, reference: &str) -> Result<Model<f32>> {
    let direct = Path::new(reference);
    let path = if direct.is_file() {
        direct.to_path_buf()
    } else {
        run.params(reference)
    };
    Model::load(&path).with_context(|| format!("loading parameters {}", path.display()))
}

fn train2d(
    run: &RunArgs,
    training: &TrainingArgs,
    orientations: &[String],
    family: Option<Family>,
    pretrain: bool,
) -> Result<()> {
    let (config, spec) = training.load()?;
    if spec.dims != 2 {
        bail!(
            "architecture {} is {}D, train2d needs a slice network",
            spec.name,
            spec.dims
        );
    }
    let family = family.unwrap_or(if spec.name.contains("model2") {
        Family::Two
    } else {
        Family::One
    });
    let data = cohort(&training.data, &config)?;
    let run = run.open()?;
    run.record_config("train2d", &config)?;
    for o in orientations {
        let variant = family.variant(o.parse()?);
        info!("training {variant} on {} patients", data.len());
        let trained = if pretrain {
            let mut model = build_model(variant, &spec, config.seed)?;
            for k in 0..spec.input_channels {
                let log = pretrain_subnetwork(&mut model, k, &data, &config)?;
                run.append_log(&log)?;
            }
            let full: Vec<VolumeSet> = data.iter().filter(|v| v.has_all_modalities()).cloned().collect();
            if full.is_empty() {
                bail!("no patient in {} has every modality", training.data.display());
            }
            train_2d(variant, &spec, &full, &config, Some(model))?
        } else {
            train_2d(variant, &spec, &data, &config, None)?
        };
        run.append_log(&trained.log)?;
        save_model(&run, &params_name(variant, None), &trained.model)?;
    }
    Ok(())
}

fn extract(run: &RunArgs, data: &Path, config: Option<&Path>, family: Family, source: &str) -> Result<()> {
    let run = run.open()?;
    let nets = Orientation::ALL
        .map(|o| load_model(&run, &params_name(family.variant(o), None)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let cohort = normalize_cohort(&load_dataset(data)?, normalization(config)?)?;
    let dir = run.features(source);
    extract_training_features(&cohort, [&nets[0], &nets[1], &nets[2]], source, Some(&dir))?;
    info!("wrote {} feature volumes to {}", cohort.len(), dir.display());
    Ok(())
}

fn train3d(run: &RunArgs, training: &TrainingArgs, variant: &str, features: &str) -> Result<()> {
    let (config, spec) = training.load()?;
    let variant: ModelVariant = variant.parse()?;
    if variant.is_2d() {
        bail!("{variant} is a slice network; use train2d");
    }
    let data = cohort(&training.data, &config)?;
    let run = run.open()?;
    run.record_config("train3d", &config)?;
    let feats = if variant.uses_features() {
        Some(load_features(&data, &run.features(features))?)
    } else {
        None
    };
    let trained = train_3d(variant, &spec, &data, feats.as_deref(), &config)?;
    run.append_log(&trained.log)?;
    let source = variant.uses_features().then_some(features);
    save_model(&run, &params_name(variant, source), &trained.model)
}

fn segment(run: &RunArgs, data: &Path, config: Option<&Path>, model: &str, features: &str) -> Result<()> {
    let run = run.open()?;
    let net = load_model(&run, model)?;
    let cohort = normalize_cohort(&load_dataset(data)?, normalization(config)?)?;
    let feats = if net.variant().uses_features() {
        Some(load_features(&cohort, &run.features(features))?)
    } else {
        None
    };
    let segs = segment_cohort(&net, &cohort, feats.as_deref())?;
    let stem = Path::new(model).file_stem().and_then(|s| s.to_str()).unwrap_or(model);
    let dir = run.segmentations(stem);
    save_segmentations(&dir, &cohort, &segs)?;
    info!("wrote {} segmentations to {}", segs.len(), dir.display());
    Ok(())
}

fn merge(inputs: &[PathBuf], t: [f64; 3], comparison: &str, out: &Path) -> Result<()> {
    let thresholds = Thresholds::new(t[0], t[1], t[2])?;
    let comparison: Comparison = comparison.parse()?;
    let segs = inputs
        .iter()
        .map(|p| mvol::read_labels(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<LabelVolume>>>()?;
    let merged = merge_segmentations(&segs, &thresholds, comparison)?;
    mvol::write_labels(out, &merged)?;
    Ok(())
}

fn eval(data: &Path, segmentations: &Path, out: Option<&Path>) -> Result<()> {
    let cohort = load_dataset(data)?;
    let preds = cohort
        .iter()
        .map(|v| {
            let p = segmentations.join(format!("{}_seg.mvol", v.patient_id));
            mvol::read_labels(&p).with_context(|| format!("reading segmentation {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let e: Evaluation = evaluate_cohort(&preds, &cohort)?;
    let text = e.to_tsv();
    if let Some(path) = out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn receptive_field(reference: &str) -> Result<()> {
    let spec = resolve_architecture(reference, None)?;
    let rf = spec.receptive_field()?;
    let parts: Vec<String> = rf.iter().map(usize::to_string).collect();
    println!("{}", parts.join(" "));
    Ok(())
}

fn compare_cmd(run: &RunArgs, training: &TrainingArgs, test: &Path, variants: &[String], features: &str) -> Result<()> {
    let (config, spec) = training.load()?;
    let variants = variants
        .iter()
        .map(|v| v.parse::<ModelVariant>())
        .collect::<segcascade::Result<Vec<_>>>()?;
    if let Some(v) = variants.iter().find(|v| v.is_2d()) {
        bail!("{v} is a slice network; compare takes patch variants");
    }
    let train = cohort(&training.data, &config)?;
    let test = cohort(test, &config)?;
    let run = run.open()?;
    run.record_config("compare", &config)?;
    let needs_features = variants.iter().any(|v| v.uses_features());
    let (ftr, fte) = if needs_features {
        let dir = run.features(features);
        (load_features(&train, &dir)?, load_features(&test, &dir)?)
    } else {
        (Vec::new(), Vec::new())
    };
    let source = FeatureSource {
        name: features,
        train: &ftr,
        test: &fte,
    };
    let (table, models) = compare(&spec, &train, &test, source, &variants, &config)?;
    for t in &models {
        run.append_log(&t.log)?;
        let v = t.model.variant();
        save_model(&run, &params_name(v, v.uses_features().then_some(features)), &t.model)?;
    }
    let text = table.to_tsv();
    let path = run.root().join(format!("compare-{}.tsv", file_stem(features)));
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            patients,
            size,
            out,
        } => {
            for v in generate_synthetic(seed, size, patients)? {
                save_volume_set(&out, &v)?;
            }
            info!("wrote {patients} patients to {}", out.display());
            Ok(())
        }
        Command::Train2d {
            run,
            training,
            orientations,
            family,
            pretrain_subnetworks,
        } => train2d(&run, &training, &orientations, family, pretrain_subnetworks),
        Command::ExtractFeatures {
            run,
            data,
            config,
            family,
            source,
        } => extract(&run, &data, config.as_deref(), family, &source),
        Command::Train3d {
            run,
            training,
            variant,
            features,
        } => train3d(&run, &training, &variant, &features),
        Command::Segment {
            run,
            data,
            config,
            model,
            features,
        } => segment(&run, &data, config.as_deref(), &model, &features),
        Command::Merge {
            inputs,
            t_tumor,
            t_core,
            t_enh,
            comparison,
            out,
        } => merge(&inputs, [t_tumor, t_core, t_enh], &comparison, &out),
        Command::Eval {
            data,
            segmentations,
            out,
        } => eval(&data, &segmentations, out.as_deref()),
        Command::ReceptiveField { config } => receptive_field(&config),
        Command::Compare {
            run,
            training,
            test,
            variants,
            features,
        } => compare_cmd(&run, &training, &test, &variants, &features),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
