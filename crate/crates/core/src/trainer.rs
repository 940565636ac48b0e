//! Training protocols: orientation networks, feature extraction, patch
//! networks, subnetwork pretraining and ensembles.
//!
//! Every stage draws its randomness from a ChaCha stream keyed by the run
//! seed and a per-stage tag, so a fixed seed reproduces parameters exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchitectureSpec;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::loss::Normalizer;
use crate::metrics::{evaluate, Evaluation, Region, RegionScores};
use crate::model::{build_model, Batch, Model, ModelVariant, Objective};
use crate::mvol;
use crate::ops::BatchStats;
use crate::optim::{accumulate_gradient, NormSgd, ScheduleEvent};
use crate::pipeline::{
    argmax_labels, extract_features, feature_path, infer_scores, missing_modality_split, normalize_intensity,
    patch_batch, restack_scores, sample_patches, slice_batch, spatial_multiple, with_features, FeatureVolume,
    PatchSampling,
};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Orientation, VolumeSet};
use crate::vote::merge_segmentations;

/// Running-statistics momentum of batch normalization during training.
pub const BN_MOMENTUM: f64 = 0.9;

/// One optimizer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: String,
    pub iteration: usize,
    /// Mean batch loss of the iteration.
    pub loss: f64,
    /// Learning rate after the schedule update.
    pub alpha: f64,
    pub window: usize,
    pub event: ScheduleEvent,
    /// Dice on the monitoring split, when evaluated this iteration.
    pub monitor: Option<RegionScores>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

fn event_name(e: ScheduleEvent) -> &'static str {
    match e {
        ScheduleEvent::Waiting => "-",
        ScheduleEvent::SufficientDecrease => "kept",
        ScheduleEvent::Halved => "halved",
        ScheduleEvent::HalvedAndWidened => "halved+widened",
    }
}

impl TrainingLog {
    pub const HEADER: &'static str = "stage\titeration\tloss\talpha\twindow\tevent\tWT\tTC\tEC";

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Rows without the header line.
    pub fn to_tsv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = write!(
                out,
                "{}\t{}\t{:.6}\t{}\t{}\t{}",
                r.stage,
                r.iteration,
                r.loss,
                r.alpha,
                r.window,
                event_name(r.event)
            );
            match r.monitor {
                Some(s) => {
                    let _ = writeln!(out, "\t{:.4}\t{:.4}\t{:.4}", s.0[0], s.0[1], s.0[2]);
                }
                None => out.push_str("\t\t\t\n"),
            }
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\n{}", Self::HEADER, self.to_tsv_rows())
    }
}

/// A trained network with its log.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model<f32>,
    pub log: TrainingLog,
}

/// Per-stage random stream.
pub fn stage_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // FNV-1a of the tag selects the stream
    let stream = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    });
    rng.set_stream(stream);
    rng
}

/// Normalize every patient of a cohort.
pub fn normalize_cohort(cohort: &[VolumeSet], constant: f64) -> Result<Vec<VolumeSet>> {
    cohort.iter().map(|v| normalize_intensity(v, constant)).collect()
}

fn require_labels(cohort: &[VolumeSet]) -> Result<()> {
    if cohort.is_empty() {
        return Err(Error::Missing("empty training set".into()));
    }
    for v in cohort {
        v.labels()?;
    }
    Ok(())
}

/// The optimization loop shared by every stage.
fn optimize(
    model: &mut Model<f32>,
    objective: &Objective,
    config: &RunConfig,
    stage: &str,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Batch<f32>>,
    mut monitor: impl FnMut(&Model<f32>) -> Result<Option<RegionScores>>,
) -> Result<TrainingLog> {
    let oc = &config.optimizer;
    let mut opt = NormSgd::<f32>::new(oc.clone(), model.params.len())?;
    let mut log = TrainingLog::default();
    let every = config.pipeline.monitor_every;
    for it in 0..oc.iterations {
        let batches = (0..oc.batches_per_iteration)
            .map(|_| draw(rng))
            .collect::<Result<Vec<_>>>()?;
        let mut stats = Vec::new();
        let acc = accumulate_gradient(&batches, |b| {
            let pass = model.training_pass(b, objective)?;
            stats.push(pass.batch_stats);
            Ok((pass.loss, pass.gradient))
        })
        .map_err(|e| match e {
            Error::NonFiniteGradient { .. } | Error::NonFinite { .. } => Error::Diverged { iteration: it },
            e => e,
        })?;
        for (name, s) in stats.iter().flatten() {
            model.params.update_running(name, s, BN_MOMENTUM)?;
        }
        opt.step(&acc.gradient, model.params.flat_mut())?;
        let loss = acc.loss / batches.len() as f64;
        let event = opt.schedule_update(loss);
        let monitor = if every > 0 && (it + 1) % every == 0 {
            monitor(model)?
        } else {
            None
        };
        log::debug!("{stage} it {it}: loss {loss:.5} alpha {}", opt.alpha());
        log.rows.push(LogRow {
            stage: stage.to_owned(),
            iteration: it,
            loss,
            alpha: opt.alpha(),
            window: opt.window(),
            event,
            monitor,
        });
    }
    if let Some(last) = log.rows.last() {
        log::info!("{stage}: {} iterations, final loss {:.5}", log.rows.len(), last.loss);
    }
    Ok(log)
}

/// Replace batch-norm running statistics by population estimates over
/// `batches`: the mean of batch means, and the mean of batch variances plus
/// the variance of batch means.
pub fn recalibrate_batchnorm(model: &mut Model<f32>, batches: &[Batch<f32>]) -> Result<()> {
    if model.plan().batchnorms().is_empty() || batches.is_empty() {
        return Ok(());
    }
    let mut sums: Vec<(String, Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
    for b in batches {
        for (i, (name, st)) in model.batch_statistics(&b.input)?.into_iter().enumerate() {
            if sums.len() <= i {
                let n = st.mean.len();
                sums.push((name.clone(), vec![0.0; n], vec![0.0; n], vec![0.0; n]));
            }
            let (_, m, m2, v) = &mut sums[i];
            for c in 0..st.mean.len() {
                let mu = f64::from(st.mean[c]);
                m[c] += mu;
                m2[c] += mu * mu;
                v[c] += f64::from(st.var[c]);
            }
        }
    }
    let n = batches.len() as f64;
    for (name, m, m2, v) in sums {
        let mean: Vec<f32> = m.iter().map(|x| (x / n) as f32).collect();
        let var: Vec<f32> = (0..m.len())
            .map(|c| (v[c] / n + (m2[c] / n - (m[c] / n).powi(2)).max(0.0)) as f32)
            .collect();
        // momentum 0 replaces the running values outright
        model.params.update_running(&name, &BatchStats { mean, var }, 0.0)?;
    }
    Ok(())
}

/// Batches drawn for the final batch-norm recalibration.
pub const RECALIBRATION_BATCHES: usize = 64;

/// Seeded split of `cohort` into (training, monitoring) by `fraction`.
/// Monitoring is disabled, and nothing held out, when `monitor_every` is 0.
fn monitoring_split<'a>(cohort: &'a [VolumeSet], config: &RunConfig) -> (Vec<VolumeSet>, Vec<&'a VolumeSet>) {
    use rand::seq::SliceRandom;
    let p = &config.pipeline;
    let held = if p.monitor_every == 0 {
        0
    } else {
        ((cohort.len() as f64 * p.monitor_fraction).round() as usize).min(cohort.len() - 1)
    };
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut stage_rng(config.seed, "monitor-split"));
    let (mon, train) = order.split_at(held);
    let mut train = train.to_vec();
    train.sort_unstable();
    (
        train.iter().map(|&i| cohort[i].clone()).collect(),
        mon.iter().map(|&i| &cohort[i]).collect(),
    )
}

fn mean_scores(preds: &[LabelVolume], truth: &[&VolumeSet]) -> Result<Option<RegionScores>> {
    if preds.is_empty() {
        return Ok(None);
    }
    let mut acc = [0.0; 3];
    for (p, t) in preds.iter().zip(truth) {
        let s = evaluate(p, t.labels()?)?;
        for r in Region::ALL {
            acc[r.index()] += s.get(r) / preds.len() as f64;
        }
    }
    Ok(Some(RegionScores(acc)))
}

fn draw_slices(
    cohort: &[VolumeSet],
    eligible: &[usize],
    o: Orientation,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<f32>> {
    let picks: Vec<(usize, usize)> = (0..size)
        .map(|_| {
            let p = eligible[rng.random_range(0..eligible.len())];
            (p, rng.random_range(0..o.slice_count(cohort[p].dims())))
        })
        .collect();
    slice_batch(cohort, o, &picks)
}

fn planar_objective(model: &Model<f32>, config: &RunConfig) -> Result<Objective> {
    let coefficients = match model.subnetworks() {
        0 => None,
        k => Some(config.loss.coefficients(k)?),
    };
    Ok(Objective::Full {
        targets: config.loss.targets.clone(),
        coefficients,
        normalizer: Normalizer::Pixels,
    })
}

/// Train a slice network of `variant` (which fixes the orientation) on a
/// normalized, labelled cohort. `init` continues from existing parameters,
/// for example pretrained subnetworks.
pub fn train_2d(
    variant: ModelVariant,
    spec: &ArchitectureSpec,
    cohort: &[VolumeSet],
    config: &RunConfig,
    init: Option<Model<f32>>,
) -> Result<Trained> {
    let o = variant
        .orientation()
        .ok_or_else(|| Error::InvalidArgument(format!("{variant} is not a slice network")))?;
    require_labels(cohort)?;
    let (train, monitor_set) = monitoring_split(cohort, config);
    let mut model = match init {
        Some(m) => {
            if m.variant() != variant {
                return Err(Error::InvalidArgument(format!(
                    "initial model is {}, expected {variant}",
                    m.variant()
                )));
            }
            m
        }
        None => build_model(variant, spec, config.seed)?,
    };
    let objective = planar_objective(&model, config)?;
    let eligible: Vec<usize> = (0..train.len()).collect();
    let stage = variant.to_string();
    let mut rng = stage_rng(config.seed, &stage);
    let batch = config.pipeline.slice_batch;
    let log = optimize(
        &mut model,
        &objective,
        config,
        &stage,
        &mut rng,
        |rng| draw_slices(&train, &eligible, o, batch, rng),
        |m| {
            let preds = monitor_set
                .iter()
                .map(|v| segment(m, v, None))
                .collect::<Result<Vec<_>>>()?;
            mean_scores(&preds, &monitor_set)
        },
    )?;
    let calib = (0..RECALIBRATION_BATCHES)
        .map(|_| draw_slices(&train, &eligible, o, batch, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    recalibrate_batchnorm(&mut model, &calib)?;
    Ok(Trained { model, log })
}

/// Train subnetwork `index` of a slice network alone, against its auxiliary
/// classifier, on the patients that provide its modality (every modality for
/// the combining subnetwork). Parameters outside the subnetwork receive zero
/// gradient and stay unchanged.
pub fn pretrain_subnetwork(
    model: &mut Model<f32>,
    index: usize,
    cohort: &[VolumeSet],
    config: &RunConfig,
) -> Result<TrainingLog> {
    let o = model
        .variant()
        .orientation()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no subnetworks", model.variant())))?;
    if index >= model.subnetworks() {
        return Err(Error::InvalidArgument(format!(
            "subnetwork {index} out of range ({} subnetworks)",
            model.subnetworks()
        )));
    }
    require_labels(cohort)?;
    let modalities = model.spec().input_channels;
    let eligible: Vec<usize> = (0..cohort.len())
        .filter(|&p| {
            if index < modalities {
                cohort[p].present.get(index).copied().unwrap_or(false)
            } else {
                cohort[p].has_all_modalities()
            }
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Missing(format!(
            "no training image provides the input of subnetwork {index}"
        )));
    }
    let objective = Objective::Subnetwork {
        index,
        targets: config.loss.targets.clone(),
        normalizer: Normalizer::Pixels,
    };
    let stage = format!("{}/sub{index}", model.variant());
    let mut rng = stage_rng(config.seed, &stage);
    let batch = config.pipeline.slice_batch;
    optimize(
        model,
        &objective,
        config,
        &stage,
        &mut rng,
        |rng| draw_slices(cohort, &eligible, o, batch, rng),
        |_| Ok(None),
    )
}

/// Three orientation networks of one family (`TwoD1` or `TwoD2`).
pub fn train_orientations(
    family: fn(Orientation) -> ModelVariant,
    spec: &ArchitectureSpec,
    cohort: &[VolumeSet],
    config: &RunConfig,
) -> Result<[Trained; 3]> {
    let mut out = Vec::with_capacity(3);
    for o in Orientation::ALL {
        out.push(train_2d(family(o), spec, cohort, config, None)?);
    }
    Ok(out.try_into().expect("three orientations"))
}

/// Feature volumes of every patient, saved to `dir` when given.
pub fn extract_training_features(
    cohort: &[VolumeSet],
    nets: [&Model<f32>; 3],
    source: &str,
    dir: Option<&Path>,
) -> Result<Vec<FeatureVolume>> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    cohort
        .iter()
        .map(|v| {
            let f = extract_features(v, nets, source)?;
            if let Some(d) = dir {
                f.save(feature_path(d, &v.patient_id))?;
            }
            Ok(f)
        })
        .collect()
}

/// Load the feature volume of every patient from `dir`.
pub fn load_features(cohort: &[VolumeSet], dir: &Path) -> Result<Vec<FeatureVolume>> {
    cohort
        .iter()
        .map(|v| {
            let p = feature_path(dir, &v.patient_id);
            if !p.is_file() {
                return Err(Error::Missing(format!(
                    "feature volume for patient {} ({})",
                    v.patient_id,
                    p.display()
                )));
            }
            FeatureVolume::load(p)
        })
        .collect()
}

fn check_features<'a>(
    variant: ModelVariant,
    cohort: &[VolumeSet],
    features: Option<&'a [FeatureVolume]>,
) -> Result<Option<&'a [FeatureVolume]>> {
    match (variant.uses_features(), features) {
        (false, Some(_)) => {
            log::warn!("{variant} takes no feature channels; ignoring the feature volumes");
            Ok(None)
        }
        (false, None) => Ok(None),
        (true, None) => Err(Error::Missing(format!("{variant} needs feature volumes"))),
        (true, Some(f)) => {
            if f.len() != cohort.len() {
                return Err(Error::Missing(format!(
                    "{} feature volumes for {} patients",
                    f.len(),
                    cohort.len()
                )));
            }
            for (v, fv) in cohort.iter().zip(f) {
                if fv.dims() != v.dims() {
                    return Err(Error::shape("feature volume", &fv.dims(), &v.dims()));
                }
            }
            Ok(Some(f))
        }
    }
}

/// Train a patch network. `spec` is the 3D trunk; the variant decides where
/// features enter, overriding the spec's own import setting.
pub fn train_3d(
    variant: ModelVariant,
    spec: &ArchitectureSpec,
    cohort: &[VolumeSet],
    features: Option<&[FeatureVolume]>,
    config: &RunConfig,
) -> Result<Trained> {
    if variant.is_2d() {
        return Err(Error::InvalidArgument(format!("{variant} is not a patch network")));
    }
    require_labels(cohort)?;
    let features = check_features(variant, cohort, features)?;
    let spec = spec.with_feature_import(variant.feature_import())?;
    let mut model = build_model::<f32>(variant, &spec, config.seed)?;
    let patch = config.pipeline.patch;
    let m = spatial_multiple(&model);
    if (0..3).any(|a| patch[a] % m[a] != 0) {
        return Err(Error::Config(format!(
            "patch {patch:?} must be a multiple of the network's downsampling factor {m:?}"
        )));
    }
    let coefficients = match model.subnetworks() {
        0 => None,
        k => Some(config.loss.coefficients(k)?),
    };
    let objective = Objective::Full {
        targets: config.loss.targets.clone(),
        coefficients,
        normalizer: Normalizer::Voxels,
    };
    let sampling = if config.pipeline.class_balanced {
        PatchSampling::ClassBalanced
    } else {
        PatchSampling::Uniform
    };
    let per_batch = config.pipeline.patch_batch;
    let stage = variant.to_string();
    let mut rng = stage_rng(config.seed, &stage);
    let (train, monitor_set) = monitoring_split(cohort, config);
    let train_features: Option<Vec<&FeatureVolume>> = features.map(|f| {
        cohort
            .iter()
            .zip(f)
            .filter(|(v, _)| train.iter().any(|t| t.patient_id == v.patient_id))
            .map(|(_, fv)| fv)
            .collect()
    });
    let draw = |rng: &mut ChaCha8Rng| {
        let p = rng.random_range(0..train.len());
        let f = train_features.as_ref().map(|f| f[p]);
        patch_batch(&sample_patches(
            &train[p],
            f,
            patch,
            per_batch,
            sampling,
            rng.next_u64(),
        )?)
    };
    let log = optimize(&mut model, &objective, config, &stage, &mut rng, draw, |m| {
        let preds = monitor_set
            .iter()
            .map(|v| {
                let f = features.and_then(|f| cohort.iter().position(|c| c.patient_id == v.patient_id).map(|i| &f[i]));
                segment(m, v, f)
            })
            .collect::<Result<Vec<_>>>()?;
        mean_scores(&preds, &monitor_set)
    })?;
    if !model.plan().batchnorms().is_empty() {
        let calib = (0..RECALIBRATION_BATCHES)
            .map(|_| draw(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        recalibrate_batchnorm(&mut model, &calib)?;
    }
    Ok(Trained { model, log })
}

/// Whole-volume label map. Slice networks run over every slice of their
/// orientation; patch networks run fully convolutionally on the volume.
pub fn segment(model: &Model<f32>, volume: &VolumeSet, features: Option<&FeatureVolume>) -> Result<LabelVolume> {
    let dims = volume.dims();
    let c = model.classes();
    if model.plan().dims == 2 {
        let o = model.variant().orientation().unwrap_or(Orientation::Axial);
        let mut scores = Tensor::zeros(&[c, dims[0], dims[1], dims[2]]);
        restack_scores(model, &volume.image, o, &mut scores, 0)?;
        return argmax_labels(&scores.reshape(vec![1, c, dims[0], dims[1], dims[2]])?);
    }
    let input = match (model.variant().uses_features(), features) {
        (true, Some(f)) => with_features(&volume.image, f)?,
        (true, None) => {
            return Err(Error::Missing(format!(
                "{} needs the feature volume of patient {}",
                model.variant(),
                volume.patient_id
            )))
        }
        (false, _) => volume.image.clone(),
    };
    let ch = input.shape()[0];
    let input = input.reshape(vec![1, ch, dims[0], dims[1], dims[2]])?;
    argmax_labels(&infer_scores(model, &input)?)
}

/// Segment a cohort, pairing each patient with its feature volume.
pub fn segment_cohort(
    model: &Model<f32>,
    cohort: &[VolumeSet],
    features: Option<&[FeatureVolume]>,
) -> Result<Vec<LabelVolume>> {
    cohort
        .iter()
        .enumerate()
        .map(|(i, v)| segment(model, v, features.map(|f| &f[i])))
        .collect()
}

/// Dice of predictions against a labelled cohort.
pub fn evaluate_cohort(preds: &[LabelVolume], cohort: &[VolumeSet]) -> Result<Evaluation> {
    if preds.len() != cohort.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} patients",
            preds.len(),
            cohort.len()
        )));
    }
    let scores = preds
        .iter()
        .zip(cohort)
        .map(|(p, v)| Ok((v.patient_id.clone(), evaluate(p, v.labels()?)?)))
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_scores(scores)
}

/// Feature volumes of one 2D family for the training and test cohorts.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSource<'a> {
    pub name: &'a str,
    pub train: &'a [FeatureVolume],
    pub test: &'a [FeatureVolume],
}

/// One trained ensemble member and its test-set output.
#[derive(Clone, Debug)]
pub struct Member {
    pub name: String,
    pub trained: Trained,
    pub segmentations: Vec<LabelVolume>,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug)]
pub struct EnsembleOutcome {
    pub members: Vec<Member>,
    pub merged: Vec<LabelVolume>,
    pub merged_evaluation: Evaluation,
}

impl EnsembleOutcome {
    /// Member with the highest Dice averaged over regions.
    pub fn best_member(&self) -> &Member {
        let avg = |m: &Member| Region::ALL.iter().map(|&r| m.evaluation.mean(r)).sum::<f64>();
        self.members
            .iter()
            .max_by(|a, b| avg(a).total_cmp(&avg(b)))
            .expect("at least one member")
    }
}

/// Train variants A, B and C on each feature source, segment the test
/// cohort with every member and merge the members by vote.
pub fn run_ensemble_protocol(
    spec: &ArchitectureSpec,
    train: &[VolumeSet],
    test: &[VolumeSet],
    sources: &[FeatureSource<'_>],
    config: &RunConfig,
) -> Result<EnsembleOutcome> {
    let mut members = Vec::new();
    for src in sources {
        for variant in [
            ModelVariant::TwoThreeDA,
            ModelVariant::TwoThreeDB,
            ModelVariant::TwoThreeDC,
        ] {
            let trained = train_3d(variant, spec, train, Some(src.train), config)?;
            let segmentations = segment_cohort(&trained.model, test, Some(src.test))?;
            let evaluation = evaluate_cohort(&segmentations, test)?;
            members.push(Member {
                name: format!("{variant}/{}", src.name),
                trained,
                segmentations,
                evaluation,
            });
        }
    }
    let merged = (0..test.len())
        .map(|i| {
            let segs: Vec<LabelVolume> = members.iter().map(|m| m.segmentations[i].clone()).collect();
            merge_segmentations(&segs, &config.ensemble.thresholds, config.ensemble.comparison)
        })
        .collect::<Result<Vec<_>>>()?;
    let merged_evaluation = evaluate_cohort(&merged, test)?;
    Ok(EnsembleOutcome {
        members,
        merged,
        merged_evaluation,
    })
}

/// Mean Dice per model, one row per model.
#[derive(Clone, Debug, Default)]
pub struct ComparisonTable {
    pub rows: Vec<(String, Evaluation)>,
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tWT\tTC\tEC\n");
        for (name, e) in &self.rows {
            let _ = writeln!(
                out,
                "{name}\t{:.4}\t{:.4}\t{:.4}",
                e.mean(Region::WholeTumor),
                e.mean(Region::TumorCore),
                e.mean(Region::EnhancingCore)
            );
        }
        out
    }
}

/// Train the standard patch network and each requested feature variant
/// identically, and tabulate their test Dice side by side.
pub fn compare(
    spec: &ArchitectureSpec,
    train: &[VolumeSet],
    test: &[VolumeSet],
    source: FeatureSource<'_>,
    variants: &[ModelVariant],
    config: &RunConfig,
) -> Result<(ComparisonTable, Vec<Trained>)> {
    let mut table = ComparisonTable::default();
    let mut models = Vec::new();
    for &variant in variants {
        let (tr, te) = if variant.uses_features() {
            (Some(source.train), Some(source.test))
        } else {
            (None, None)
        };
        let trained = train_3d(variant, spec, train, tr, config)?;
        let preds = segment_cohort(&trained.model, test, te)?;
        table.rows.push((variant.to_string(), evaluate_cohort(&preds, test)?));
        models.push(trained);
    }
    Ok((table, models))
}

/// Both arms of the missing-modality experiment.
#[derive(Clone, Debug)]
pub struct MissingModalityOutcome {
    /// Joint training on the full-modality subset from random initialization.
    pub baseline: Trained,
    pub baseline_evaluation: Evaluation,
    /// Same joint training after pretraining every modality-specific subnetwork.
    pub pretrained: Trained,
    pub pretrained_evaluation: Evaluation,
    pub pretrain_logs: Vec<TrainingLog>,
}

/// Mask `train` into one full-modality group and one group per missing
/// modality, then train `variant` jointly on the full group twice: from
/// scratch, and after pretraining subnetwork `k` on every patient that has
/// modality `k`. Both arms share seed and budget and are scored on `test`.
pub fn run_missing_modality_protocol(
    variant: ModelVariant,
    spec: &ArchitectureSpec,
    train: &[VolumeSet],
    test: &[VolumeSet],
    config: &RunConfig,
) -> Result<MissingModalityOutcome> {
    let modalities = spec.input_channels;
    if spec.subnetwork.is_none() {
        return Err(Error::InvalidArgument(format!("{variant} has no modality subnetworks")));
    }
    let groups = missing_modality_split(train.len(), modalities, config.seed);
    let mut masked = train.to_vec();
    for (v, g) in masked.iter_mut().zip(&groups) {
        if let Some(k) = *g {
            v.drop_modality(k);
        }
    }
    let full: Vec<VolumeSet> = masked.iter().filter(|v| v.has_all_modalities()).cloned().collect();
    if full.is_empty() {
        return Err(Error::Missing("no training patient keeps every modality".into()));
    }
    let score = |t: &Trained| evaluate_cohort(&segment_cohort(&t.model, test, None)?, test);
    let baseline = train_2d(variant, spec, &full, config, None)?;
    let baseline_evaluation = score(&baseline)?;
    let mut model = build_model(variant, spec, config.seed)?;
    let pretrain_logs = (0..modalities)
        .map(|k| pretrain_subnetwork(&mut model, k, &masked, config))
        .collect::<Result<Vec<_>>>()?;
    let pretrained = train_2d(variant, spec, &full, config, Some(model))?;
    let pretrained_evaluation = score(&pretrained)?;
    Ok(MissingModalityOutcome {
        baseline,
        baseline_evaluation,
        pretrained,
        pretrained_evaluation,
        pretrain_logs,
    })
}

/// `run/<name>/` with its fixed layout.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["params", "features", "segmentations"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn params(&self, name: &str) -> PathBuf {
        self.root.join("params").join(format!("{}.json", file_stem(name)))
    }

    pub fn features(&self, source: &str) -> PathBuf {
        self.root.join("features").join(file_stem(source))
    }

    pub fn segmentations(&self, model: &str) -> PathBuf {
        self.root.join("segmentations").join(file_stem(model))
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.tsv")
    }

    /// Append `config` to `config.copy` under a stage header.
    pub fn record_config(&self, stage: &str, config: &RunConfig) -> Result<()> {
        let text = format!("# stage: {stage}\n{}\n", config.to_toml_string()?);
        append(&self.root.join("config.copy"), &text)
    }

    pub fn append_log(&self, log: &TrainingLog) -> Result<()> {
        let path = self.log_path();
        let mut text = String::new();
        if !path.exists() {
            text.push_str(TrainingLog::HEADER);
            text.push('\n');
        }
        text.push_str(&log.to_tsv_rows());
        append(&path, &text)
    }
}

/// File-system-safe form of a model or stage name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Write each segmentation as `<dir>/<patient>_seg.mvol`.
pub fn save_segmentations(dir: &Path, cohort: &[VolumeSet], segs: &[LabelVolume]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (v, s) in cohort.iter().zip(segs) {
        mvol::write_labels(dir.join(format!("{}_seg.mvol", v.patient_id)), s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_synthetic;

    fn tiny_config(arch: &str, iterations: usize) -> RunConfig {
        let mut c = RunConfig::defaults(arch, if arch.starts_with("2d_") { 2 } else { 3 });
        c.optimizer.iterations = iterations;
        c.optimizer.batches_per_iteration = 2;
        c.optimizer.window = 2;
        c.pipeline.patch = [16, 16, 16];
        c
    }

    fn cohort(n: usize) -> Vec<VolumeSet> {
        normalize_cohort(&generate_synthetic(11, 32, n).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn two_d_training_is_deterministic() {
        let data = cohort(2);
        let spec = ArchitectureSpec::builtin("2d_model1").unwrap();
        let c = tiny_config("2d_model1", 3);
        let v = ModelVariant::TwoD1(Orientation::Axial);
        let a = train_2d(v, &spec, &data, &c, None).unwrap();
        let b = train_2d(v, &spec, &data, &c, None).unwrap();
        assert_eq!(a.model.params.flat(), b.model.params.flat());
        assert_eq!(a.log.rows.len(), 3);
    }

    #[test]
    fn pretraining_touches_only_its_subnetwork() {
        let data = cohort(2);
        let spec = ArchitectureSpec::builtin("2d_model1").unwrap();
        let c = tiny_config("2d_model1", 2);
        let mut m = build_model::<f32>(ModelVariant::TwoD1(Orientation::Axial), &spec, 0).unwrap();
        let before = m.clone();
        pretrain_subnetwork(&mut m, 1, &data, &c).unwrap();
        for name in m.params.names() {
            let changed = m.params.get(name).unwrap() != before.params.get(name).unwrap();
            assert_eq!(changed, name.starts_with("sub1."), "{name}");
        }
    }

    #[test]
    fn pretraining_needs_the_modality() {
        let mut data = cohort(1);
        data[0].drop_modality(2);
        let spec = ArchitectureSpec::builtin("2d_model1").unwrap();
        let mut m = build_model::<f32>(ModelVariant::TwoD1(Orientation::Axial), &spec, 0).unwrap();
        let c = tiny_config("2d_model1", 1);
        assert!(matches!(
            pretrain_subnetwork(&mut m, 2, &data, &c),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn feature_variants_require_features() {
        let data = cohort(1);
        let spec = ArchitectureSpec::builtin("3d_standard").unwrap();
        let c = tiny_config("3d_standard", 1);
        assert!(matches!(
            train_3d(ModelVariant::TwoThreeDA, &spec, &data, None, &c),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn run_dir_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let rd = RunDir::create(tmp.path().join("r")).unwrap();
        for sub in ["params", "features", "segmentations"] {
            assert!(rd.root().join(sub).is_dir());
        }
        assert!(rd.params("2d1:axial").ends_with("params/2d1-axial.json"));
        let log = TrainingLog {
            rows: vec![LogRow {
                stage: "s".into(),
                iteration: 0,
                loss: 1.0,
                alpha: 0.25,
                window: 200,
                event: ScheduleEvent::Waiting,
                monitor: None,
            }],
        };
        rd.append_log(&log).unwrap();
        rd.append_log(&log).unwrap();
        let text = std::fs::read_to_string(rd.log_path()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("stage\t"));
    }
}
