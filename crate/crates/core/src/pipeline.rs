//! Data flow around the networks: intensity normalization, slice and patch
//! batches, feature extraction and dataset files.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::mvol;
use crate::tensor::Tensor;
use crate::volume::{class, crop_tensor, volume_shape, Dims, LabelVolume, Orientation, VolumeSet};

/// Median of the non-zero entries, or `None` when every entry is zero.
pub fn nonzero_median(values: &[f32]) -> Option<f64> {
    let mut nz: Vec<f32> = values.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return None;
    }
    let n = nz.len();
    let (_, &mut hi, _) = nz.select_nth_unstable_by(n / 2, f32::total_cmp);
    if n % 2 == 1 {
        return Some(f64::from(hi));
    }
    let lo = nz[..n / 2].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    Some((f64::from(lo) + f64::from(hi)) / 2.0)
}

/// Divide every present modality by the median of its non-zero voxels and
/// multiply by `constant`. Zero voxels stay zero; absent modalities are left
/// untouched.
pub fn normalize_intensity(volume: &VolumeSet, constant: f64) -> Result<VolumeSet> {
    if !(constant > 0.0 && constant.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "normalization constant {constant} must be positive"
        )));
    }
    let mut out = volume.clone();
    let vol: usize = volume.dims().iter().product();
    for (k, chunk) in out.image.data_mut().chunks_mut(vol).enumerate() {
        if !volume.present[k] {
            continue;
        }
        let median = nonzero_median(chunk).ok_or_else(|| Error::EmptyModality {
            patient: volume.patient_id.clone(),
            modality: k,
        })?;
        let scale = constant / median;
        for v in chunk.iter_mut() {
            *v = (f64::from(*v) * scale) as f32;
        }
    }
    Ok(out)
}

/// Class scores of three orientation networks restacked into one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    /// `[3·C, X, Y, Z]`: axial block, then coronal, then sagittal.
    pub features: Tensor<f32>,
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct FeatureSidecar {
    source: String,
    classes: usize,
    channels: Vec<String>,
}

impl FeatureVolume {
    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dims(&self) -> Dims {
        let s = self.features.shape();
        [s[1], s[2], s[3]]
    }

    /// Path of the channel-description file next to `path`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("channels.json")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        mvol::write_tensor(path, &self.features)?;
        let classes = self.channels() / Orientation::ALL.len();
        let sidecar = FeatureSidecar {
            source: self.source.clone(),
            classes,
            channels: Orientation::ALL
                .iter()
                .flat_map(|o| (0..classes).map(move |c| format!("{}:{c}", o.name())))
                .collect(),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Serde(e.to_string()))?;
        mvol::write_atomic(&Self::sidecar_path(path), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let features = mvol::read_tensor(path)?;
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: FeatureSidecar = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        if features.shape()[0] != 3 * sidecar.classes || sidecar.channels.len() != features.shape()[0] {
            return Err(Error::Serde(format!(
                "{}: {} channels but the sidecar describes {}",
                path.display(),
                features.shape()[0],
                sidecar.channels.len()
            )));
        }
        Ok(FeatureVolume {
            features,
            source: sidecar.source,
        })
    }
}

/// Total downsampling factor per spatial axis; inputs must be multiples of it.
pub fn spatial_multiple(model: &Model<f32>) -> Vec<usize> {
    let dims = model.plan().dims;
    let mut m = vec![1usize; dims];
    for node in &model.plan().nodes {
        for (a, &j) in node.jump.iter().enumerate() {
            m[a] = m[a].max(j.round().max(1.0) as usize);
        }
    }
    m
}

/// Copy a `[B, C, spatial...]` tensor into a zero tensor of larger spatial
/// extents, or back, keeping the origin corner aligned.
fn resize_spatial(t: &Tensor<f32>, spatial: &[usize]) -> Result<Tensor<f32>> {
    let shape = t.shape();
    let outer = shape[0] * shape[1];
    let src_sp = &shape[2..];
    let mut out_shape = shape[..2].to_vec();
    out_shape.extend_from_slice(spatial);
    let mut out = Tensor::zeros(&out_shape);
    let common: Vec<usize> = src_sp.iter().zip(spatial).map(|(a, b)| *a.min(b)).collect();
    let (src_len, dst_len): (usize, usize) = (src_sp.iter().product(), spatial.iter().product());
    let last = *common.last().expect("at least one spatial axis");
    let rows: usize = common[..common.len() - 1].iter().product();
    for o in 0..outer {
        for r in 0..rows {
            // multi-index of the row over all but the last axis
            let (mut rem, mut s_off, mut d_off) = (r, 0, 0);
            let (mut s_stride, mut d_stride) = (src_sp[src_sp.len() - 1], spatial[spatial.len() - 1]);
            for a in (0..common.len() - 1).rev() {
                let i = rem % common[a];
                rem /= common[a];
                s_off += i * s_stride;
                d_off += i * d_stride;
                s_stride *= src_sp[a];
                d_stride *= spatial[a];
            }
            let s = &t.data()[o * src_len + s_off..o * src_len + s_off + last];
            out.data_mut()[o * dst_len + d_off..o * dst_len + d_off + last].copy_from_slice(s);
        }
    }
    Ok(out)
}

/// Inference-mode class scores at the input's extents. Inputs whose extents
/// are not multiples of the network's downsampling factor are zero-padded
/// and the scores cropped back.
pub fn infer_scores(model: &Model<f32>, input: &Tensor<f32>) -> Result<Tensor<f32>> {
    let m = spatial_multiple(model);
    let sp = input.spatial().to_vec();
    if sp.len() != m.len() {
        return Err(Error::invalid_shape(
            "infer_scores",
            format!("{}D network given input {:?}", m.len(), input.shape()),
        ));
    }
    let padded: Vec<usize> = sp.iter().zip(&m).map(|(s, m)| s.div_ceil(*m) * m).collect();
    if padded == sp {
        return model.forward(input);
    }
    let out = model.forward(&resize_spatial(input, &padded)?)?;
    resize_spatial(&out, &sp)
}

/// Per-voxel argmax over the channel axis of `[1, C, X, Y, Z]` scores.
pub fn argmax_labels(scores: &Tensor<f32>) -> Result<LabelVolume> {
    let [_, c, x, y, z] = scores.shape() else {
        return Err(Error::invalid_shape("argmax_labels", format!("{:?}", scores.shape())));
    };
    let vol = x * y * z;
    let d = scores.data();
    let labels = (0..vol)
        .map(|i| {
            let mut best = 0;
            for k in 1..*c {
                if d[k * vol + i] > d[best * vol + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new([*x, *y, *z], labels)
}

/// Slices run through a 2D network per forward call.
const SLICE_CHUNK: usize = 16;

/// Class scores of a 2D network over every slice of one orientation,
/// restacked into channels `offset..offset + C` of `out`.
pub fn restack_scores(
    model: &Model<f32>,
    image: &Tensor<f32>,
    orientation: Orientation,
    out: &mut Tensor<f32>,
    offset: usize,
) -> Result<()> {
    let (k, dims) = volume_shape(image)?;
    if model.plan().dims != 2 || model.input_channels() != k {
        return Err(Error::invalid_shape(
            "slice network",
            format!(
                "{} expects {} channels of 2D slices, volume has {k}",
                model.variant(),
                model.input_channels()
            ),
        ));
    }
    let (nu, nv) = orientation.plane_dims(dims);
    let plane = k * nu * nv;
    let count = orientation.slice_count(dims);
    let c = model.classes();
    for start in (0..count).step_by(SLICE_CHUNK) {
        let end = (start + SLICE_CHUNK).min(count);
        let mut data = Vec::with_capacity((end - start) * plane);
        for i in start..end {
            data.extend_from_slice(orientation.slice(image, i)?.data());
        }
        let batch = Tensor::new(vec![end - start, k, nu, nv], data)?;
        let scores = infer_scores(model, &batch)?;
        for (j, chunk) in scores.data().chunks(c * nu * nv).enumerate() {
            let s = Tensor::new(vec![1, c, nu, nv], chunk.to_vec())?;
            orientation.restack(out, offset, start + j, &s)?;
        }
    }
    Ok(())
}

/// Run three orientation networks over every slice of `volume` and stack
/// their unnormalized class scores, axial block first.
///
/// Networks carrying an orientation must sit in the matching slot.
pub fn extract_features(volume: &VolumeSet, nets: [&Model<f32>; 3], source: &str) -> Result<FeatureVolume> {
    let c = nets[0].classes();
    for (net, o) in nets.iter().zip(Orientation::ALL) {
        if net.classes() != c {
            return Err(Error::InvalidArgument(format!(
                "orientation networks disagree on class count ({} vs {c})",
                net.classes()
            )));
        }
        if let Some(own) = net.variant().orientation() {
            if own != o {
                return Err(Error::InvalidArgument(format!(
                    "{} network given for the {} slot",
                    own.name(),
                    o.name()
                )));
            }
        }
    }
    let dims = volume.dims();
    let mut out = Tensor::zeros(&[3 * c, dims[0], dims[1], dims[2]]);
    for (b, (net, o)) in nets.iter().zip(Orientation::ALL).enumerate() {
        restack_scores(net, &volume.image, o, &mut out, b * c)?;
    }
    Ok(FeatureVolume {
        features: out,
        source: source.to_owned(),
    })
}

/// A 2D training batch of slices `(patient, index)` in one orientation.
/// All referenced volumes must share their in-plane extents.
pub fn slice_batch(volumes: &[VolumeSet], orientation: Orientation, picks: &[(usize, usize)]) -> Result<Batch<f32>> {
    let first = picks
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty slice batch".into()))?;
    let ref_vol = volumes
        .get(first.0)
        .ok_or_else(|| Error::Missing(format!("patient index {}", first.0)))?;
    let (nu, nv) = orientation.plane_dims(ref_vol.dims());
    let k = ref_vol.modalities();
    let mut data = Vec::with_capacity(picks.len() * k * nu * nv);
    let mut labels = Vec::with_capacity(picks.len() * nu * nv);
    for &(p, i) in picks {
        let v = volumes
            .get(p)
            .ok_or_else(|| Error::Missing(format!("patient index {p}")))?;
        if orientation.plane_dims(v.dims()) != (nu, nv) || v.modalities() != k {
            return Err(Error::shape(
                "slice_batch",
                &[v.modalities(), v.dims()[0], v.dims()[1], v.dims()[2]],
                &[k, nu, nv],
            ));
        }
        data.extend_from_slice(orientation.slice(&v.image, i)?.data());
        labels.extend(orientation.slice_labels(v.labels()?, i));
    }
    Ok(Batch {
        input: Tensor::new(vec![picks.len(), k, nu, nv], data)?,
        labels,
    })
}

/// How patch origins are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSampling {
    /// Every valid origin equally likely.
    #[default]
    Uniform,
    /// Half of the patches centered on a random tumor voxel.
    ClassBalanced,
}

/// One training patch: image channels then feature channels, plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: Dims,
    /// `[channels, px, py, pz]`.
    pub input: Tensor<f32>,
    pub labels: LabelVolume,
}

/// Draw `count` patches of extent `patch`. Deterministic in `seed`.
pub fn sample_patches(
    volume: &VolumeSet,
    features: Option<&FeatureVolume>,
    patch: Dims,
    count: usize,
    sampling: PatchSampling,
    seed: u64,
) -> Result<Vec<Patch>> {
    let dims = volume.dims();
    if (0..3).any(|a| patch[a] == 0 || patch[a] > dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "patch {patch:?} does not fit volume {dims:?} of patient {}",
            volume.patient_id
        )));
    }
    if let Some(f) = features {
        if f.dims() != dims {
            return Err(Error::shape("sample_patches features", &f.dims(), &dims));
        }
    }
    let labels = volume.labels()?;
    let tumor: Vec<usize> = match sampling {
        PatchSampling::Uniform => Vec::new(),
        PatchSampling::ClassBalanced => (0..labels.data().len())
            .filter(|&i| labels.data()[i] != class::BACKGROUND)
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let origin = if !tumor.is_empty() && rng.random_bool(0.5) {
            let i = tumor[rng.random_range(0..tumor.len())];
            let c = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            std::array::from_fn(|a| c[a].saturating_sub(patch[a] / 2).min(dims[a] - patch[a]))
        } else {
            std::array::from_fn(|a| rng.random_range(0..=dims[a] - patch[a]))
        };
        let image = crop_tensor(&volume.image, origin, patch)?;
        let input = match features {
            None => image,
            Some(f) => {
                let feat = crop_tensor(&f.features, origin, patch)?;
                let ch = image.shape()[0] + feat.shape()[0];
                let mut data = image.into_data();
                data.extend_from_slice(feat.data());
                Tensor::new(vec![ch, patch[0], patch[1], patch[2]], data)?
            }
        };
        out.push(Patch {
            origin,
            input,
            labels: labels.crop(origin, patch)?,
        });
    }
    Ok(out)
}

/// Stack patches of equal extent into one batch.
pub fn patch_batch(patches: &[Patch]) -> Result<Batch<f32>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty patch batch".into()))?;
    let mut shape = vec![patches.len()];
    shape.extend_from_slice(first.input.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut labels = Vec::new();
    for p in patches {
        if p.input.shape() != first.input.shape() {
            return Err(Error::shape("patch_batch", p.input.shape(), first.input.shape()));
        }
        data.extend_from_slice(p.input.data());
        labels.extend_from_slice(p.labels.data());
    }
    Ok(Batch {
        input: Tensor::new(shape, data)?,
        labels,
    })
}

/// Append feature channels to an image volume: `[K + 3C, X, Y, Z]`.
pub fn with_features(image: &Tensor<f32>, features: &FeatureVolume) -> Result<Tensor<f32>> {
    let (k, dims) = volume_shape(image)?;
    if features.dims() != dims {
        return Err(Error::shape("with_features", &features.dims(), &dims));
    }
    let mut data = image.data().to_vec();
    data.extend_from_slice(features.features.data());
    Tensor::new(vec![k + features.channels(), dims[0], dims[1], dims[2]], data)
}

/// Missing-modality assignment for `patients` patients with `modalities`
/// channels: a seeded shuffle split into `modalities + 1` near-equal
/// subsets; the first keeps every modality and subset `k + 1` lacks
/// modality `k`.
pub fn missing_modality_split(patients: usize, modalities: usize, seed: u64) -> Vec<Option<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let groups = modalities + 1;
    let mut out = vec![None; patients];
    for (rank, &p) in order.iter().enumerate() {
        let g = rank * groups / patients.max(1);
        out[p] = g.checked_sub(1);
    }
    out
}

const IMAGE_SUFFIX: &str = "_image.mvol";
const LABEL_SUFFIX: &str = "_labels.mvol";

/// Write `<id>_image.mvol` and, when labelled, `<id>_labels.mvol`.
pub fn save_volume_set(dir: impl AsRef<Path>, v: &VolumeSet) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    mvol::write_tensor(dir.join(format!("{}{IMAGE_SUFFIX}", v.patient_id)), &v.image)?;
    if let Some(l) = &v.labels {
        mvol::write_labels(dir.join(format!("{}{LABEL_SUFFIX}", v.patient_id)), l)?;
    }
    Ok(())
}

/// Load every `<id>_image.mvol` in `dir`, sorted by id, with labels when
/// present. An all-zero modality channel is marked absent.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<VolumeSet>> {
    let dir = dir.as_ref();
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(IMAGE_SUFFIX).map(str::to_owned))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Missing(format!("no *{IMAGE_SUFFIX} files in {}", dir.display())));
    }
    ids.iter()
        .map(|id| {
            let image = mvol::read_tensor(dir.join(format!("{id}{IMAGE_SUFFIX}")))?;
            let lp = dir.join(format!("{id}{LABEL_SUFFIX}"));
            let labels = if lp.is_file() {
                Some(mvol::read_labels(&lp)?)
            } else {
                None
            };
            let mut v = VolumeSet::new(id.clone(), image, labels)?;
            let vol: usize = v.dims().iter().product();
            for k in 0..v.modalities() {
                if v.image.data()[k * vol..(k + 1) * vol].iter().all(|&x| x == 0.0) {
                    v.present[k] = false;
                }
            }
            Ok(v)
        })
        .collect()
}

/// Feature volume path of a patient inside a features directory.
pub fn feature_path(dir: impl AsRef<Path>, patient: &str) -> PathBuf {
    dir.as_ref().join(format!("{patient}.mvol"))
}
