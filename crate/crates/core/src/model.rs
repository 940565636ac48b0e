//! Trainable networks built from an [`ArchitectureSpec`].
//!
//! A [`Model`] pairs a lowered [`Plan`] with a [`ParamStore`]. The network
//! input is one tensor `[batch, channels, spatial...]` holding the image
//! channels followed by any imported feature channels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, FeatureImport, Init, Plan, PlanOp};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{self, LossCoefficients, Normalizer, TargetWeights};
use crate::ops::{BatchStats, NormMode, Padding, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::Orientation;

/// Network family, with the slice orientation for 2D families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    TwoD1(Orientation),
    TwoD2(Orientation),
    ThreeDStandard,
    TwoThreeDA,
    TwoThreeDB,
    TwoThreeDC,
}

impl ModelVariant {
    pub fn is_2d(self) -> bool {
        matches!(self, ModelVariant::TwoD1(_) | ModelVariant::TwoD2(_))
    }

    pub fn orientation(self) -> Option<Orientation> {
        match self {
            ModelVariant::TwoD1(o) | ModelVariant::TwoD2(o) => Some(o),
            _ => None,
        }
    }

    pub fn feature_import(self) -> FeatureImport {
        match self {
            ModelVariant::TwoThreeDA => FeatureImport::InputLayer,
            ModelVariant::TwoThreeDB => FeatureImport::PreFinal,
            ModelVariant::TwoThreeDC => FeatureImport::SecondStream,
            _ => FeatureImport::None,
        }
    }

    pub fn uses_features(self) -> bool {
        self.feature_import() != FeatureImport::None
    }

    fn check(self, spec: &ArchitectureSpec) -> Result<()> {
        let fail = |m: String| Err(Error::Architecture(format!("{self}: {m}")));
        let want_dims = if self.is_2d() { 2 } else { 3 };
        if spec.dims != want_dims {
            return fail(format!("needs a {want_dims}D spec, got {}D", spec.dims));
        }
        if spec.feature_import != self.feature_import() {
            return fail(format!(
                "spec imports features at {:?}, variant expects {:?}",
                spec.feature_import,
                self.feature_import()
            ));
        }
        if self.is_2d() != spec.subnetwork.is_some() {
            return fail("2D variants need a subnetwork bundle; 3D variants must not have one".into());
        }
        if self.uses_features() && spec.feature_channels != 3 * spec.classes {
            return fail(format!(
                "feature_channels must be 3 x classes = {}, got {}",
                3 * spec.classes,
                spec.feature_channels
            ));
        }
        Ok(())
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelVariant::TwoD1(o) => write!(f, "2d1:{}", o.name()),
            ModelVariant::TwoD2(o) => write!(f, "2d2:{}", o.name()),
            ModelVariant::ThreeDStandard => f.write_str("3d"),
            ModelVariant::TwoThreeDA => f.write_str("2d3d-a"),
            ModelVariant::TwoThreeDB => f.write_str("2d3d-b"),
            ModelVariant::TwoThreeDC => f.write_str("2d3d-c"),
        }
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown model variant {s:?}"));
        Ok(match s {
            "3d" => ModelVariant::ThreeDStandard,
            "2d3d-a" => ModelVariant::TwoThreeDA,
            "2d3d-b" => ModelVariant::TwoThreeDB,
            "2d3d-c" => ModelVariant::TwoThreeDC,
            _ => {
                let (family, o) = s.split_once(':').ok_or_else(bad)?;
                let o: Orientation = o.parse()?;
                match family {
                    "2d1" => ModelVariant::TwoD1(o),
                    "2d2" => ModelVariant::TwoD2(o),
                    _ => return Err(bad()),
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl ParamEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable parameters in one flat buffer, plus batch-norm running
/// statistics. Entries keep plan order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry>,
    data: Vec<T>,
    running: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn init(plan: &Plan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for p in plan.params() {
            let offset = data.len();
            let n: usize = p.shape.iter().product();
            match p.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    data.extend((0..n).map(|_| T::of(rng.random_range(-bound..bound))));
                }
                Init::Zeros => data.extend(std::iter::repeat_n(T::zero(), n)),
                Init::Ones => data.extend(std::iter::repeat_n(T::one(), n)),
            }
            entries.push(ParamEntry {
                name: p.name,
                shape: p.shape,
                offset,
            });
        }
        let running = plan
            .batchnorms()
            .into_iter()
            .map(|(name, c)| (name, RunningStats::new(c)))
            .collect();
        ParamStore { entries, data, running }
    }

    fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Missing(format!("parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, name: &str) -> Result<&[T]> {
        let e = self.entry(name)?;
        Ok(&self.data[e.offset..e.offset + e.len()])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let e = self.entry(name)?.clone();
        Ok(&mut self.data[e.offset..e.offset + e.len()])
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.entry(name)?.shape)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        Tensor::new(e.shape.clone(), self.data[e.offset..e.offset + e.len()].to_vec())
    }

    pub fn running(&self, name: &str) -> Result<&RunningStats<T>> {
        self.running
            .get(name)
            .ok_or_else(|| Error::Missing(format!("batch-norm statistics {name:?}")))
    }

    pub fn update_running(&mut self, name: &str, batch: &BatchStats<T>, momentum: f64) -> Result<()> {
        self.running
            .get_mut(name)
            .ok_or_else(|| Error::Missing(format!("batch-norm statistics {name:?}")))?
            .update(batch, momentum);
        Ok(())
    }

    /// Copy every parameter and running statistic whose name starts with
    /// `prefix` from `other`, which must have identically shaped entries.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let src = other.entry(&e.name)?;
            if src.shape != e.shape {
                return Err(Error::shape("copy_prefix_from", &src.shape, &e.shape));
            }
            self.data[e.offset..e.offset + e.len()].copy_from_slice(&other.data[src.offset..src.offset + src.len()]);
            copied += 1;
        }
        for (name, stats) in self.running.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            *stats = other.running(name)?.clone();
        }
        Ok(copied)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.to_f64_lossy())).collect::<Vec<U>>();
        ParamStore {
            entries: self.entries.clone(),
            data: conv(&self.data),
            running: self
                .running
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// One training batch: network input and per-voxel labels `[batch, spatial...]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub labels: Vec<u8>,
}

/// Which loss a training pass minimizes.
#[derive(Clone, Debug)]
pub enum Objective {
    /// Main classifier plus auxiliary classifiers, combined with `coefficients`
    /// (main only when the network has no subnetworks).
    Full {
        targets: TargetWeights,
        coefficients: Option<LossCoefficients>,
        normalizer: Normalizer,
    },
    /// Auxiliary classifier of one subnetwork alone; only that subnetwork runs.
    Subnetwork {
        index: usize,
        targets: TargetWeights,
        normalizer: Normalizer,
    },
}

/// Loss value, flat gradient and batch statistics of one training pass.
#[derive(Clone, Debug)]
pub struct TrainingPass<T> {
    pub loss: f64,
    pub main_loss: f64,
    pub subnetwork_losses: Vec<f64>,
    pub gradient: Vec<T>,
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

/// Class scores from a forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub main: Tensor<T>,
    /// One map per subnetwork; empty in inference mode.
    pub aux: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    variant: ModelVariant,
    spec: ArchitectureSpec,
    plan: Plan,
    pub params: ParamStore<T>,
}

/// Build a freshly initialized network. Initialization is deterministic in
/// `seed`.
pub fn build_model<T: Scalar>(variant: ModelVariant, spec: &ArchitectureSpec, seed: u64) -> Result<Model<T>> {
    variant.check(spec)?;
    let plan = spec.lower()?;
    let params = ParamStore::init(&plan, seed);
    Ok(Model {
        variant,
        spec: spec.clone(),
        plan,
        params,
    })
}

struct Evaluated<T: Scalar> {
    graph: Graph<T>,
    nodes: Vec<Option<Var>>,
    leaves: Vec<(usize, Var)>,
    batch_stats: Vec<(String, BatchStats<T>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ModelFile<T> {
    variant: String,
    spec: ArchitectureSpec,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn input_channels(&self) -> usize {
        self.spec.total_input_channels()
    }

    pub fn subnetworks(&self) -> usize {
        self.plan.aux.len()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            variant: self.variant,
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            params: self.params.cast(),
        }
    }

    fn evaluate(&self, input: &Tensor<T>, mode: NormMode, targets: &[usize], track: bool) -> Result<Evaluated<T>> {
        let want = self.input_channels();
        if input.shape().len() != 2 + self.plan.dims || input.channels() != want {
            return Err(Error::invalid_shape(
                "model input",
                format!(
                    "expected [batch, {want}, {}D spatial], got {:?}",
                    self.plan.dims,
                    input.shape()
                ),
            ));
        }
        let need = self.plan.ancestors(targets);
        let mut g = Graph::new();
        let x = g.leaf(input.clone())?;
        let image_channels = self.spec.input_channels;
        let mut nodes: Vec<Option<Var>> = vec![None; self.plan.nodes.len()];
        let mut leaves = Vec::new();
        let mut batch_stats = Vec::new();
        let param = |g: &mut Graph<T>, name: &str, leaves: &mut Vec<(usize, Var)>| -> Result<Var> {
            let v = g.leaf(self.params.tensor(name)?)?;
            if track {
                let idx = self
                    .params
                    .entries
                    .iter()
                    .position(|e| e.name == name)
                    .expect("entry exists");
                leaves.push((idx, v));
            }
            Ok(v)
        };
        for (i, node) in self.plan.nodes.iter().enumerate() {
            if !need[i] {
                continue;
            }
            let arg = |j: usize| nodes[node.inputs[j]].expect("inputs precede their users");
            let v = match &node.op {
                PlanOp::Image => {
                    if want == image_channels {
                        x
                    } else {
                        g.slice_channels(x, 0, image_channels)?
                    }
                }
                PlanOp::Features => g.slice_channels(x, image_channels, node.channels)?,
                PlanOp::Conv { param: p, stride, .. } => {
                    let w = param(&mut g, &format!("{p}.w"), &mut leaves)?;
                    let b = param(&mut g, &format!("{p}.b"), &mut leaves)?;
                    g.conv(arg(0), w, Some(b), stride, Padding::Same)?
                }
                PlanOp::BatchNorm { param: p } => {
                    let gamma = param(&mut g, &format!("{p}.gamma"), &mut leaves)?;
                    let beta = param(&mut g, &format!("{p}.beta"), &mut leaves)?;
                    let (v, stats) = g.batchnorm(arg(0), gamma, beta, mode, self.params.running(p)?)?;
                    if let Some(s) = stats {
                        batch_stats.push((p.clone(), s));
                    }
                    v
                }
                PlanOp::Relu => g.relu(arg(0))?,
                PlanOp::Pool { window, stride } => g.maxpool(arg(0), window, stride)?,
                PlanOp::Upsample { factor } => g.upsample(arg(0), *factor)?,
                PlanOp::Concat => {
                    let ins: Vec<Var> = (0..node.inputs.len()).map(arg).collect();
                    g.concat(&ins)?
                }
                PlanOp::Slice { start, len } => g.slice_channels(arg(0), *start, *len)?,
            };
            nodes[i] = Some(v);
        }
        Ok(Evaluated {
            graph: g,
            nodes,
            leaves,
            batch_stats,
        })
    }

    /// Main class scores (unnormalized) in inference mode.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let main = self.plan.main;
        let ev = self.evaluate(input, NormMode::Infer, &[main], false)?;
        let v = ev.nodes[main].expect("main evaluated");
        Ok(ev.graph.value(v).clone())
    }

    /// Main and auxiliary class scores with batch statistics (training mode).
    /// Running statistics are not updated.
    pub fn forward_training(&self, input: &Tensor<T>) -> Result<Forward<T>> {
        let mut targets = vec![self.plan.main];
        targets.extend(&self.plan.aux);
        let ev = self.evaluate(input, NormMode::Train, &targets, false)?;
        let get = |i: usize| ev.graph.value(ev.nodes[i].expect("evaluated")).clone();
        Ok(Forward {
            main: get(self.plan.main),
            aux: self.plan.aux.iter().map(|&a| get(a)).collect(),
        })
    }

    /// Batch-norm statistics of a training-mode forward pass over `input`,
    /// keyed by layer. Parameters and running statistics are untouched.
    pub fn batch_statistics(&self, input: &Tensor<T>) -> Result<Vec<(String, BatchStats<T>)>> {
        let mut targets = vec![self.plan.main];
        targets.extend(&self.plan.aux);
        Ok(self.evaluate(input, NormMode::Train, &targets, false)?.batch_stats)
    }

    /// Auxiliary class scores of subnetwork `index` alone, in inference mode.
    pub fn forward_subnetwork(&self, input: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
        let aux = self.aux_node(index)?;
        let ev = self.evaluate(input, NormMode::Infer, &[aux], false)?;
        let v = ev.nodes[aux].expect("aux evaluated");
        Ok(ev.graph.value(v).clone())
    }

    fn aux_node(&self, index: usize) -> Result<usize> {
        self.plan.aux.get(index).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "subnetwork {index} out of range ({} subnetworks)",
                self.plan.aux.len()
            ))
        })
    }

    /// Loss and flat gradient of one batch in training mode.
    pub fn training_pass(&self, batch: &Batch<T>, objective: &Objective) -> Result<TrainingPass<T>> {
        let (heads, coefficients, targets, normalizer): (Vec<usize>, Vec<f64>, &TargetWeights, Normalizer) =
            match objective {
                Objective::Full {
                    targets,
                    coefficients,
                    normalizer,
                } => {
                    let mut heads = vec![self.plan.main];
                    let mut coeffs = vec![1.0];
                    if !self.plan.aux.is_empty() {
                        let c = coefficients
                            .clone()
                            .unwrap_or_else(|| LossCoefficients::default_for(self.spec.input_channels));
                        c.validate()?;
                        if c.c_k.len() != self.plan.aux.len() {
                            return Err(Error::Config(format!(
                                "{} subnetwork coefficients for {} subnetworks",
                                c.c_k.len(),
                                self.plan.aux.len()
                            )));
                        }
                        heads.extend(&self.plan.aux);
                        coeffs = std::iter::once(c.c_main).chain(c.c_k.iter().copied()).collect();
                    }
                    (heads, coeffs, targets, *normalizer)
                }
                Objective::Subnetwork {
                    index,
                    targets,
                    normalizer,
                } => (vec![self.aux_node(*index)?], vec![1.0], targets, *normalizer),
            };
        if targets.classes() != self.spec.classes {
            return Err(Error::Config(format!(
                "{} target weights for {} classes",
                targets.classes(),
                self.spec.classes
            )));
        }
        let weights = loss::compute_voxel_weights(&batch.labels, targets)?;
        let mut ev = self.evaluate(&batch.input, NormMode::Train, &heads, true)?;
        let mut losses = Vec::with_capacity(heads.len());
        let mut terms = Vec::with_capacity(heads.len());
        for (&h, &c) in heads.iter().zip(&coefficients) {
            let logits = ev.nodes[h].expect("head evaluated");
            let p = ev.graph.softmax(logits)?;
            let l = ev
                .graph
                .weighted_cross_entropy(p, batch.labels.clone(), weights.clone(), normalizer)?;
            losses.push(ev.graph.value(l).item().to_f64_lossy());
            terms.push((l, c));
        }
        let root = ev.graph.combine(&terms)?;
        let loss = ev.graph.value(root).item().to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let mut grads = ev.graph.backward(root)?;
        let mut gradient = vec![T::zero(); self.params.len()];
        for (idx, v) in ev.leaves {
            if let Some(g) = grads.take(v) {
                let e = &self.params.entries[idx];
                for (dst, &s) in gradient[e.offset..e.offset + e.len()].iter_mut().zip(g.data()) {
                    *dst += s;
                }
            }
        }
        let (main_loss, subnetwork_losses) = match objective {
            Objective::Full { .. } => (losses[0], losses[1..].to_vec()),
            Objective::Subnetwork { .. } => (f64::NAN, losses),
        };
        Ok(TrainingPass {
            loss,
            main_loss,
            subnetwork_losses,
            gradient,
            batch_stats: ev.batch_stats,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&ModelFile {
            variant: self.variant.to_string(),
            spec: self.spec.clone(),
            params: self.params.clone(),
        })
        .map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile<T> = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        let variant: ModelVariant = f.variant.parse()?;
        let mut model = build_model::<T>(variant, &f.spec, 0)?;
        if model.params.entries != f.params.entries || model.params.running.len() != f.params.running.len() {
            return Err(Error::Serde("parameter layout does not match the architecture".into()));
        }
        model.params = f.params;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::mvol::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
