//! Declarative network architectures.
//!
//! An [`ArchitectureSpec`] is a TOML document listing layers in order. Each
//! layer consumes the output of the previous one; `concat` layers also join
//! earlier named layers. Convolutions are followed by ReLU (and batch
//! normalization when `batchnorm = true`); the single `classify` layer at the
//! end is a plain convolution producing one channel per class.
//!
//! ```toml
//! name = "toy"
//! dims = 3
//! input_channels = 4
//! classes = 4
//!
//! [[layers]]
//! kind = "conv"
//! name = "c1"
//! out = 8
//!
//! [[layers]]
//! kind = "pool"
//! window = 2
//!
//! [[layers]]
//! kind = "conv"
//! out = 8
//!
//! [[layers]]
//! kind = "upsample"
//! factor = 2
//!
//! [[layers]]
//! kind = "concat"
//! with = ["c1"]
//!
//! [[layers]]
//! kind = "classify"
//! ```
//!
//! A `[subnetwork]` table turns the spec into a bundle: one copy of the
//! subnetwork per input channel plus one on all channels, each with its own
//! auxiliary classifier, feeding the concatenation of their outputs to the
//! `layers` trunk.
//!
//! Specs are lowered to a [`Plan`], a flat DAG of primitive operations that
//! both the receptive-field calculator and [`crate::model`] walk.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A size given once for every axis or per axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Extent {
    Uniform(usize),
    PerAxis(Vec<usize>),
}

impl Extent {
    pub fn axes(&self, dims: usize) -> Result<Vec<usize>> {
        let v = match self {
            Extent::Uniform(k) => vec![*k; dims],
            Extent::PerAxis(v) if v.len() == dims => v.clone(),
            Extent::PerAxis(v) => {
                return Err(Error::Architecture(format!(
                    "extent {v:?} has {} axes, network has {dims}",
                    v.len()
                )))
            }
        };
        if v.contains(&0) {
            return Err(Error::Architecture(format!("zero extent in {v:?}")));
        }
        Ok(v)
    }
}

fn k3() -> Extent {
    Extent::Uniform(3)
}

fn k1() -> Extent {
    Extent::Uniform(1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Layer {
    Conv {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        out: usize,
        #[serde(default = "k3")]
        kernel: Extent,
        #[serde(default = "k1")]
        stride: Extent,
    },
    Pool {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        window: Extent,
        /// Defaults to the window.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<Extent>,
    },
    Upsample {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        factor: usize,
    },
    Concat {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        with: Vec<String>,
    },
    Batchnorm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Classify {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default = "k1")]
        kernel: Extent,
        /// Must equal the class count when given.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        out: Option<usize>,
    },
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv { name, .. }
            | Layer::Pool { name, .. }
            | Layer::Upsample { name, .. }
            | Layer::Concat { name, .. }
            | Layer::Batchnorm { name }
            | Layer::Classify { name, .. } => name.as_deref(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Pool { .. } => "pool",
            Layer::Upsample { .. } => "upsample",
            Layer::Concat { .. } => "concat",
            Layer::Batchnorm { .. } => "batchnorm",
            Layer::Classify { .. } => "classify",
        }
    }

    fn is_trailing(&self) -> bool {
        matches!(
            self,
            Layer::Conv { .. } | Layer::Batchnorm { .. } | Layer::Classify { .. }
        )
    }
}

/// Where a 3D network receives the 2D-derived feature channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureImport {
    #[default]
    None,
    /// Concatenated to the image at the input.
    InputLayer,
    /// Concatenated before the trailing run of convolutions.
    PreFinal,
    /// A second copy of the network body sees image and features; the two
    /// streams are concatenated before classification.
    SecondStream,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetworkSpec {
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Spatial rank, 2 or 3.
    pub dims: usize,
    /// Image channels, excluding imported features.
    pub input_channels: usize,
    pub classes: usize,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default)]
    pub feature_import: FeatureImport,
    #[serde(default)]
    pub feature_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subnetwork: Option<SubnetworkSpec>,
    pub layers: Vec<Layer>,
}

/// Shipped architecture files, by stem.
pub const BUILTIN: [(&str, &str); 7] = [
    ("2d_model1", include_str!("../../../configs/2d_model1.toml")),
    ("2d_model2", include_str!("../../../configs/2d_model2.toml")),
    ("3d_standard", include_str!("../../../configs/3d_standard.toml")),
    ("2d3d_a", include_str!("../../../configs/2d3d_a.toml")),
    ("2d3d_b", include_str!("../../../configs/2d3d_b.toml")),
    ("2d3d_c", include_str!("../../../configs/2d3d_c.toml")),
    ("3d_paper_scale", include_str!("../../../configs/3d_paper_scale.toml")),
];

impl ArchitectureSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ArchitectureSpec = toml::from_str(s).map_err(|e| Error::Config(format!("architecture: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("no builtin architecture named {name:?}")))?;
        Self::from_toml_str(text)
    }

    /// The same network with features imported at `import`. Sets the feature
    /// channel count to three class-score maps per class.
    pub fn with_feature_import(&self, import: FeatureImport) -> Result<Self> {
        let mut s = self.clone();
        s.feature_import = import;
        s.feature_channels = if import == FeatureImport::None {
            0
        } else {
            3 * s.classes
        };
        s.validate()?;
        Ok(s)
    }

    /// Full channel count of the network input.
    pub fn total_input_channels(&self) -> usize {
        match self.feature_import {
            FeatureImport::None => self.input_channels,
            _ => self.input_channels + self.feature_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lower().map(|_| ())
    }

    pub fn lower(&self) -> Result<Plan> {
        Lowerer::new(self)?.run()
    }

    /// Receptive field of one output voxel, per axis.
    pub fn receptive_field(&self) -> Result<Vec<usize>> {
        let plan = self.lower()?;
        Ok(plan.nodes[plan.main].rf.clone())
    }
}

/// Receptive field at the end of a plain layer sequence on a single-channel
/// input. Unlike [`ArchitectureSpec::receptive_field`] the sequence may end
/// at reduced resolution and needs no classifier.
pub fn chain_receptive_field(dims: usize, layers: &[Layer]) -> Result<Vec<usize>> {
    let spec = ArchitectureSpec {
        name: "chain".into(),
        dims,
        input_channels: 1,
        classes: 2,
        batchnorm: false,
        feature_import: FeatureImport::None,
        feature_channels: 0,
        subnetwork: None,
        layers: Vec::new(),
    };
    let mut l = Lowerer::new(&spec)?;
    let image = l.push(PlanOp::Image, vec![], 1)?;
    let out = l.body(layers, image, "", None)?;
    Ok(l.nodes[out].rf.clone())
}

/// Primitive operation of a lowered network.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanOp {
    /// Image channels of the network input.
    Image,
    /// Imported feature channels.
    Features,
    Conv {
        param: String,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        cin: usize,
        cout: usize,
    },
    BatchNorm {
        param: String,
    },
    Relu,
    Pool {
        window: Vec<usize>,
        stride: Vec<usize>,
    },
    Upsample {
        factor: usize,
    },
    Concat,
    Slice {
        start: usize,
        len: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanNode {
    pub op: PlanOp,
    pub inputs: Vec<usize>,
    pub channels: usize,
    /// Input-voxel distance between adjacent outputs of this node, per axis.
    pub jump: Vec<f64>,
    /// Receptive field per axis.
    pub rf: Vec<usize>,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(−√(6/fan_in), √(6/fan_in))`.
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// A network lowered to primitive operations in topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub dims: usize,
    pub classes: usize,
    pub nodes: Vec<PlanNode>,
    /// Main class-score node.
    pub main: usize,
    /// Auxiliary class-score node of each subnetwork (empty without a bundle).
    pub aux: Vec<usize>,
    /// Parameter-name prefix of each subnetwork.
    pub subnetwork_prefixes: Vec<String>,
}

impl Plan {
    pub fn params(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                PlanOp::Conv {
                    param,
                    kernel,
                    cin,
                    cout,
                    ..
                } => {
                    let mut shape = vec![*cout, *cin];
                    shape.extend(kernel);
                    out.push(ParamSpec {
                        name: format!("{param}.w"),
                        shape,
                        init: Init::HeUniform {
                            fan_in: cin * kernel.iter().product::<usize>(),
                        },
                    });
                    out.push(ParamSpec {
                        name: format!("{param}.b"),
                        shape: vec![*cout],
                        init: Init::Zeros,
                    });
                }
                PlanOp::BatchNorm { param } => {
                    out.push(ParamSpec {
                        name: format!("{param}.gamma"),
                        shape: vec![n.channels],
                        init: Init::Ones,
                    });
                    out.push(ParamSpec {
                        name: format!("{param}.beta"),
                        shape: vec![n.channels],
                        init: Init::Zeros,
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// Batch-norm layers and their channel counts.
    pub fn batchnorms(&self) -> Vec<(String, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                PlanOp::BatchNorm { param } => Some((param.clone(), n.channels)),
                _ => None,
            })
            .collect()
    }

    /// Indices of all nodes `targets` depend on, including themselves.
    pub fn ancestors(&self, targets: &[usize]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for &t in targets {
            need[t] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if need[i] {
                for &j in &self.nodes[i].inputs {
                    need[j] = true;
                }
            }
        }
        need
    }
}

struct Lowerer<'a> {
    spec: &'a ArchitectureSpec,
    nodes: Vec<PlanNode>,
    params: HashSet<String>,
}

fn arch_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Architecture(msg.into()))
}

impl<'a> Lowerer<'a> {
    fn new(spec: &'a ArchitectureSpec) -> Result<Self> {
        if !(spec.dims == 2 || spec.dims == 3) {
            return arch_err(format!("dims must be 2 or 3, got {}", spec.dims));
        }
        if spec.input_channels == 0 || spec.classes < 2 {
            return arch_err("need at least one input channel and two classes");
        }
        if spec.feature_import != FeatureImport::None && spec.feature_channels == 0 {
            return arch_err("feature import requires feature_channels > 0");
        }
        if spec.subnetwork.is_some() && spec.feature_import != FeatureImport::None {
            return arch_err("subnetwork bundles cannot import features");
        }
        Ok(Lowerer {
            spec,
            nodes: Vec::new(),
            params: HashSet::new(),
        })
    }

    fn push(&mut self, op: PlanOp, inputs: Vec<usize>, channels: usize) -> Result<usize> {
        let d = self.spec.dims;
        let (rf, jump) = match (&op, inputs.first()) {
            (PlanOp::Image | PlanOp::Features, _) => (vec![1; d], vec![1.0; d]),
            (_, None) => unreachable!("non-input node without inputs"),
            (op, Some(&first)) => {
                let src = &self.nodes[first];
                let (mut rf, mut jump) = (src.rf.clone(), src.jump.clone());
                match op {
                    PlanOp::Conv { kernel, stride, .. } | PlanOp::Pool { window: kernel, stride } => {
                        for a in 0..d {
                            rf[a] += ((kernel[a] - 1) as f64 * jump[a]).round() as usize;
                            jump[a] *= stride[a] as f64;
                        }
                    }
                    PlanOp::Upsample { factor } => {
                        // each output interpolates two adjacent inputs
                        for a in 0..d {
                            rf[a] += jump[a].round() as usize;
                            jump[a] /= *factor as f64;
                        }
                    }
                    PlanOp::Concat => {
                        for &i in &inputs[1..] {
                            let other = &self.nodes[i];
                            if other.jump.iter().zip(&jump).any(|(a, b)| (a - b).abs() > 1e-9) {
                                return arch_err(format!(
                                    "concat joins different scales (step {:?} vs {:?})",
                                    jump, other.jump
                                ));
                            }
                            for a in 0..d {
                                rf[a] = rf[a].max(other.rf[a]);
                            }
                        }
                    }
                    _ => {}
                }
                (rf, jump)
            }
        };
        self.nodes.push(PlanNode {
            op,
            inputs,
            channels,
            jump,
            rf,
        });
        Ok(self.nodes.len() - 1)
    }

    fn claim(&mut self, param: String) -> Result<String> {
        if !self.params.insert(param.clone()) {
            return arch_err(format!("duplicate layer name {param:?}"));
        }
        Ok(param)
    }

    fn conv(&mut self, input: usize, param: String, kernel: &Extent, stride: &Extent, cout: usize) -> Result<usize> {
        let d = self.spec.dims;
        let param = self.claim(param)?;
        if cout == 0 {
            return arch_err(format!("{param}: zero output channels"));
        }
        let cin = self.nodes[input].channels;
        self.push(
            PlanOp::Conv {
                param,
                kernel: kernel.axes(d)?,
                stride: stride.axes(d)?,
                cin,
                cout,
            },
            vec![input],
            cout,
        )
    }

    fn classify(&mut self, input: usize, param: String, kernel: &Extent) -> Result<usize> {
        let c = self.spec.classes;
        self.conv(input, param, kernel, &Extent::Uniform(1), c)
    }

    /// Lower a layer sequence starting from `input`. With `import`, the
    /// features node is concatenated right before layer `import.0`.
    fn body(&mut self, layers: &[Layer], input: usize, prefix: &str, import: Option<(usize, usize)>) -> Result<usize> {
        let d = self.spec.dims;
        let mut named: HashMap<String, usize> = HashMap::new();
        let mut cur = input;
        for (i, layer) in layers.iter().enumerate() {
            if let Some((at, features)) = import {
                if at == i {
                    let ch = self.nodes[cur].channels + self.nodes[features].channels;
                    cur = self.push(PlanOp::Concat, vec![cur, features], ch)?;
                }
            }
            let local = layer
                .name()
                .map(str::to_owned)
                .unwrap_or_else(|| format!("{}{i}", layer.kind()));
            let param = format!("{prefix}{local}");
            cur = match layer {
                Layer::Conv {
                    out, kernel, stride, ..
                } => {
                    let c = self.conv(cur, param.clone(), kernel, stride, *out)?;
                    let c = if self.spec.batchnorm {
                        self.push(
                            PlanOp::BatchNorm {
                                param: format!("{param}.bn"),
                            },
                            vec![c],
                            *out,
                        )?
                    } else {
                        c
                    };
                    self.push(PlanOp::Relu, vec![c], *out)?
                }
                Layer::Pool { window, stride, .. } => {
                    let window = window.axes(d)?;
                    let stride = match stride {
                        Some(s) => s.axes(d)?,
                        None => window.clone(),
                    };
                    let ch = self.nodes[cur].channels;
                    self.push(PlanOp::Pool { window, stride }, vec![cur], ch)?
                }
                Layer::Upsample { factor, .. } => {
                    if *factor == 0 {
                        return arch_err(format!("{param}: upsample factor 0"));
                    }
                    let ch = self.nodes[cur].channels;
                    self.push(PlanOp::Upsample { factor: *factor }, vec![cur], ch)?
                }
                Layer::Concat { with, .. } => {
                    if with.is_empty() {
                        return arch_err(format!("{param}: concat without targets"));
                    }
                    let mut inputs = vec![cur];
                    for w in with {
                        match named.get(w) {
                            Some(&n) => inputs.push(n),
                            None => return arch_err(format!("{param}: concat target {w:?} is not an earlier layer")),
                        }
                    }
                    let ch = inputs.iter().map(|&n| self.nodes[n].channels).sum();
                    self.push(PlanOp::Concat, inputs, ch)?
                }
                Layer::Batchnorm { .. } => {
                    let param = self.claim(param.clone())?;
                    let ch = self.nodes[cur].channels;
                    self.push(PlanOp::BatchNorm { param }, vec![cur], ch)?
                }
                Layer::Classify { kernel, out, .. } => {
                    if i + 1 != layers.len() {
                        return arch_err(format!("{param}: classify must be the last layer"));
                    }
                    if let Some(o) = out {
                        if *o != self.spec.classes {
                            return arch_err(format!(
                                "{param}: classify has {o} outputs, network has {} classes",
                                self.spec.classes
                            ));
                        }
                    }
                    self.classify(cur, param.clone(), kernel)?
                }
            };
            if named.insert(local.clone(), cur).is_some() {
                return arch_err(format!("duplicate layer name {:?}", param));
            }
        }
        Ok(cur)
    }

    fn trunk_parts(&self) -> Result<(&'a [Layer], &'a Extent, String)> {
        let layers = &self.spec.layers;
        match layers.last() {
            Some(Layer::Classify { kernel, name, .. }) => {
                let name = name.clone().unwrap_or_else(|| format!("classify{}", layers.len() - 1));
                Ok((&layers[..layers.len() - 1], kernel, name))
            }
            _ => arch_err("the last layer must be classify"),
        }
    }

    fn run(mut self) -> Result<Plan> {
        let spec = self.spec;
        let (body, cls_kernel, cls_name) = self.trunk_parts()?;
        let image = self.push(PlanOp::Image, vec![], spec.input_channels)?;
        let mut aux = Vec::new();
        let mut prefixes = Vec::new();
        let main = if let Some(sub) = &spec.subnetwork {
            if sub.layers.is_empty() {
                return arch_err("empty subnetwork");
            }
            if sub.layers.iter().any(|l| matches!(l, Layer::Classify { .. })) {
                return arch_err("subnetwork classifiers are added automatically");
            }
            let k = spec.input_channels;
            let mut finals = Vec::with_capacity(k + 1);
            for s in 0..=k {
                let prefix = format!("sub{s}.");
                let src = if s < k {
                    self.push(PlanOp::Slice { start: s, len: 1 }, vec![image], 1)?
                } else {
                    image
                };
                let out = self.body(&sub.layers, src, &prefix, None)?;
                if self.nodes[out].jump.iter().any(|&j| (j - 1.0).abs() > 1e-9) {
                    return arch_err("subnetwork output must be at input resolution");
                }
                aux.push(self.classify(out, format!("{prefix}aux"), &Extent::Uniform(1))?);
                finals.push(out);
                prefixes.push(prefix);
            }
            let ch = finals.iter().map(|&n| self.nodes[n].channels).sum();
            let joined = self.push(PlanOp::Concat, finals, ch)?;
            self.body(&spec.layers, joined, "trunk.", None)?
        } else {
            match spec.feature_import {
                FeatureImport::None => self.body(&spec.layers, image, "", None)?,
                FeatureImport::InputLayer => {
                    let f = self.push(PlanOp::Features, vec![], spec.feature_channels)?;
                    let ch = spec.input_channels + spec.feature_channels;
                    let x = self.push(PlanOp::Concat, vec![image, f], ch)?;
                    self.body(&spec.layers, x, "", None)?
                }
                FeatureImport::PreFinal => {
                    let f = self.push(PlanOp::Features, vec![], spec.feature_channels)?;
                    let at = spec.layers.iter().rposition(|l| !l.is_trailing()).map_or(0, |p| p + 1);
                    self.body(&spec.layers, image, "", Some((at, f)))?
                }
                FeatureImport::SecondStream => {
                    let f = self.push(PlanOp::Features, vec![], spec.feature_channels)?;
                    let s1 = self.body(body, image, "s1.", None)?;
                    let ch = spec.input_channels + spec.feature_channels;
                    let x = self.push(PlanOp::Concat, vec![image, f], ch)?;
                    let s2 = self.body(body, x, "s2.", None)?;
                    let ch = self.nodes[s1].channels + self.nodes[s2].channels;
                    let joined = self.push(PlanOp::Concat, vec![s1, s2], ch)?;
                    self.classify(joined, cls_name, cls_kernel)?
                }
            }
        };
        if self.nodes[main].jump.iter().any(|&j| (j - 1.0).abs() > 1e-9) {
            return arch_err("network output is not at input resolution");
        }
        Ok(Plan {
            dims: spec.dims,
            classes: spec.classes,
            nodes: self.nodes,
            main,
            aux,
            subnetwork_prefixes: prefixes,
        })
    }
}
