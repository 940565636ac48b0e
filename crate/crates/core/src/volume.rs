//! Multi-channel volumes, label volumes and orthogonal slicing.
//!
//! Volumes are `[channels, X, Y, Z]` tensors with `z` contiguous. Slices are
//! taken perpendicular to one axis: axial slices fix `z`, coronal slices fix
//! `y`, sagittal slices fix `x`. The remaining two axes keep their relative
//! order, so an axial slice is indexed `(x, y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial extents `[X, Y, Z]`.
pub type Dims = [usize; 3];

#[inline]
pub fn voxel_index([_, ny, nz]: Dims, x: usize, y: usize, z: usize) -> usize {
    (x * ny + y) * nz + z
}

/// Ground-truth classes.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    /// Necrotic and non-enhancing tumor core.
    pub const NECROTIC: u8 = 1;
    pub const EDEMA: u8 = 2;
    pub const ENHANCING: u8 = 3;
    pub const COUNT: usize = 4;
}

/// Integer label per voxel, same layout as one channel of a volume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) || dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid_shape(
                "label volume",
                format!("dims {dims:?} do not match {} labels", data.len()),
            ));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[voxel_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = voxel_index(self.dims, x, y, z);
        self.data[i] = v;
    }

    /// Labels of the box `origin .. origin + extent`.
    pub fn crop(&self, origin: Dims, extent: Dims) -> Result<LabelVolume> {
        check_box(self.dims, origin, extent)?;
        let mut out = Vec::with_capacity(extent.iter().product());
        for x in 0..extent[0] {
            for y in 0..extent[1] {
                let start = voxel_index(self.dims, origin[0] + x, origin[1] + y, origin[2]);
                out.extend_from_slice(&self.data[start..start + extent[2]]);
            }
        }
        LabelVolume::new(extent, out)
    }
}

pub(crate) fn check_box(dims: Dims, origin: Dims, extent: Dims) -> Result<()> {
    if (0..3).any(|a| extent[a] == 0 || origin[a] + extent[a] > dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "box at {origin:?} with extent {extent:?} exceeds volume {dims:?}"
        )));
    }
    Ok(())
}

/// Crop a `[channels, X, Y, Z]` tensor.
pub fn crop_tensor(t: &Tensor<f32>, origin: Dims, extent: Dims) -> Result<Tensor<f32>> {
    let (c, dims) = volume_shape(t)?;
    check_box(dims, origin, extent)?;
    let mut out = Vec::with_capacity(c * extent.iter().product::<usize>());
    let vol = dims.iter().product::<usize>();
    for ch in 0..c {
        let src = &t.data()[ch * vol..(ch + 1) * vol];
        for x in 0..extent[0] {
            for y in 0..extent[1] {
                let start = voxel_index(dims, origin[0] + x, origin[1] + y, origin[2]);
                out.extend_from_slice(&src[start..start + extent[2]]);
            }
        }
    }
    Tensor::new(vec![c, extent[0], extent[1], extent[2]], out)
}

pub(crate) fn volume_shape(t: &Tensor<f32>) -> Result<(usize, Dims)> {
    match t.shape() {
        [c, x, y, z] => Ok((*c, [*x, *y, *z])),
        s => Err(Error::invalid_shape(
            "volume",
            format!("expected [channels, X, Y, Z], got {s:?}"),
        )),
    }
}

/// Slicing plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Fixed `z`; in-plane axes `(x, y)`.
    Axial,
    /// Fixed `y`; in-plane axes `(x, z)`.
    Coronal,
    /// Fixed `x`; in-plane axes `(y, z)`.
    Sagittal,
}

impl Orientation {
    /// Fixed order used when stacking per-orientation feature blocks.
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }

    /// The volume axis held constant within a slice.
    pub fn normal_axis(self) -> usize {
        match self {
            Orientation::Axial => 2,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 0,
        }
    }

    fn plane_axes(self) -> (usize, usize) {
        match self {
            Orientation::Axial => (0, 1),
            Orientation::Coronal => (0, 2),
            Orientation::Sagittal => (1, 2),
        }
    }

    pub fn slice_count(self, dims: Dims) -> usize {
        dims[self.normal_axis()]
    }

    pub fn plane_dims(self, dims: Dims) -> (usize, usize) {
        let (a, b) = self.plane_axes();
        (dims[a], dims[b])
    }

    fn coords(self, index: usize, u: usize, v: usize) -> (usize, usize, usize) {
        let mut c = [0; 3];
        c[self.normal_axis()] = index;
        let (a, b) = self.plane_axes();
        c[a] = u;
        c[b] = v;
        (c[0], c[1], c[2])
    }

    /// Slice `index` of a `[channels, X, Y, Z]` volume as `[1, channels, U, V]`.
    pub fn slice(self, volume: &Tensor<f32>, index: usize) -> Result<Tensor<f32>> {
        let (c, dims) = volume_shape(volume)?;
        if index >= self.slice_count(dims) {
            return Err(Error::InvalidArgument(format!(
                "{} slice {index} out of range for {dims:?}",
                self.name()
            )));
        }
        let (nu, nv) = self.plane_dims(dims);
        let vol = dims.iter().product::<usize>();
        let mut out = Vec::with_capacity(c * nu * nv);
        for ch in 0..c {
            let src = &volume.data()[ch * vol..(ch + 1) * vol];
            for u in 0..nu {
                for v in 0..nv {
                    let (x, y, z) = self.coords(index, u, v);
                    out.push(src[voxel_index(dims, x, y, z)]);
                }
            }
        }
        Tensor::new(vec![1, c, nu, nv], out)
    }

    /// Label slice `index`, laid out `(U, V)`.
    pub fn slice_labels(self, labels: &LabelVolume, index: usize) -> Vec<u8> {
        let dims = labels.dims();
        let (nu, nv) = self.plane_dims(dims);
        let mut out = Vec::with_capacity(nu * nv);
        for u in 0..nu {
            for v in 0..nv {
                let (x, y, z) = self.coords(index, u, v);
                out.push(labels.get(x, y, z));
            }
        }
        out
    }

    /// Write a `[1, C, U, V]` slice into channels `channel_offset..+C` of a
    /// `[channels, X, Y, Z]` volume buffer.
    pub fn restack(
        self,
        volume: &mut Tensor<f32>,
        channel_offset: usize,
        index: usize,
        slice: &Tensor<f32>,
    ) -> Result<()> {
        let (c_total, dims) = volume_shape(volume)?;
        let (nu, nv) = self.plane_dims(dims);
        let c = slice.channels();
        if slice.shape() != [1, c, nu, nv] || channel_offset + c > c_total {
            return Err(Error::shape("restack", slice.shape(), volume.shape()));
        }
        if index >= self.slice_count(dims) {
            return Err(Error::InvalidArgument(format!("slice {index} out of range")));
        }
        let vol = dims.iter().product::<usize>();
        let dst = volume.data_mut();
        let src = slice.data();
        for ch in 0..c {
            let base = (channel_offset + ch) * vol;
            for u in 0..nu {
                for v in 0..nv {
                    let (x, y, z) = self.coords(index, u, v);
                    dst[base + voxel_index(dims, x, y, z)] = src[(ch * nu + u) * nv + v];
                }
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Orientation::Axial),
            "coronal" => Ok(Orientation::Coronal),
            "sagittal" => Ok(Orientation::Sagittal),
            _ => Err(Error::InvalidArgument(format!("unknown orientation {s:?}"))),
        }
    }
}

/// One patient: co-registered modalities, optional ground truth and which
/// modalities were actually acquired.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSet {
    pub patient_id: String,
    /// `[modalities, X, Y, Z]`; absent modalities are all zero.
    pub image: Tensor<f32>,
    pub labels: Option<LabelVolume>,
    pub present: Vec<bool>,
}

impl VolumeSet {
    pub fn new(patient_id: impl Into<String>, image: Tensor<f32>, labels: Option<LabelVolume>) -> Result<Self> {
        let (k, dims) = volume_shape(&image)?;
        if let Some(l) = &labels {
            if l.dims() != dims {
                return Err(Error::shape("volume set labels", &l.dims(), &dims));
            }
            if let Some(&bad) = l.data().iter().find(|&&v| v as usize >= class::COUNT) {
                return Err(Error::InvalidArgument(format!("label value {bad} not in 0..=3")));
            }
        }
        Ok(VolumeSet {
            patient_id: patient_id.into(),
            image,
            labels,
            present: vec![true; k],
        })
    }

    pub fn modalities(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn dims(&self) -> Dims {
        [self.image.shape()[1], self.image.shape()[2], self.image.shape()[3]]
    }

    pub fn has_all_modalities(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// Mark modality `k` as missing and zero its channel.
    pub fn drop_modality(&mut self, k: usize) {
        let vol: usize = self.dims().iter().product();
        self.image.data_mut()[k * vol..(k + 1) * vol].fill(0.0);
        self.present[k] = false;
    }

    pub fn labels(&self) -> Result<&LabelVolume> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("patient {} has no labels", self.patient_id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(c: usize, dims: Dims) -> Tensor<f32> {
        Tensor::from_fn(&[c, dims[0], dims[1], dims[2]], |i| i as f32)
    }

    #[test]
    fn slicing_then_restacking_is_exact_for_every_orientation() {
        let dims = [3, 4, 5];
        let v = numbered(2, dims);
        for o in Orientation::ALL {
            let mut back = Tensor::zeros(v.shape());
            for i in 0..o.slice_count(dims) {
                let s = o.slice(&v, i).unwrap();
                o.restack(&mut back, 0, i, &s).unwrap();
            }
            assert_eq!(back, v, "{o:?}");
        }
    }

    #[test]
    fn axial_slice_is_indexed_x_y() {
        let dims = [2, 3, 4];
        let v = numbered(1, dims);
        let s = Orientation::Axial.slice(&v, 1).unwrap();
        assert_eq!(s.shape(), &[1, 1, 2, 3]);
        // (x=1, y=2, z=1)
        assert_eq!(s.data()[3 + 2], v.data()[voxel_index(dims, 1, 2, 1)]);
    }

    #[test]
    fn crop_matches_indexing() {
        let dims = [4, 4, 4];
        let labels = LabelVolume::new(dims, (0..64).map(|i| (i % 4) as u8).collect()).unwrap();
        let c = labels.crop([1, 2, 0], [2, 2, 3]).unwrap();
        assert_eq!(c.get(1, 1, 2), labels.get(2, 3, 2));
        assert!(labels.crop([3, 0, 0], [2, 1, 1]).is_err());
    }

    #[test]
    fn label_extents_must_match_image() {
        let img = Tensor::zeros(&[4, 2, 2, 2]);
        assert!(VolumeSet::new("p", img, Some(LabelVolume::zeros([2, 2, 3]))).is_err());
    }
}
