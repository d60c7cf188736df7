//! Neighbor-offset decomposition of a volume into eight half-resolution
//! sub-volumes, per-view slicing, and adaptation of slices to an extractor's
//! expected input.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{BrainVolume, Metric};

/// Offset index of sub-volume `(dx, dy, dz)`: `k = dx*4 + dy*2 + dz`.
#[inline]
pub fn offset_index(dx: usize, dy: usize, dz: usize) -> usize {
    dx * 4 + dy * 2 + dz
}

#[inline]
pub fn offset_of(k: usize) -> (usize, usize, usize) {
    ((k >> 2) & 1, (k >> 1) & 1, k & 1)
}

#[derive(Clone, Debug)]
pub struct SubVolumeSet {
    pub subject_id: String,
    pub metric: Metric,
    /// Indexed by [`offset_index`].
    pub subvolumes: Vec<Tensor>,
}

pub fn decompose8(v: &BrainVolume) -> Result<SubVolumeSet> {
    let [nx, ny, nz] = v.dims();
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::invalid(format!("decompose8 needs even dims, got {:?}; apply pad_to_even first", v.dims())));
    }
    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
    let src = v.voxels.data();
    let subvolumes = (0..8)
        .map(|k| {
            let (dx, dy, dz) = offset_of(k);
            let mut data = Vec::with_capacity(hx * hy * hz);
            for i in 0..hx {
                for j in 0..hy {
                    let row = ((2 * i + dx) * ny + 2 * j + dy) * nz;
                    data.extend((0..hz).map(|l| src[row + 2 * l + dz]));
                }
            }
            Tensor::new(vec![hx, hy, hz], data).expect("half dims are positive")
        })
        .collect();
    Ok(SubVolumeSet { subject_id: v.subject_id.clone(), metric: v.metric, subvolumes })
}

/// Inverse of [`decompose8`]: interleaves the eight sub-volumes back into the parent grid.
pub fn reassemble8(subvolumes: &[Tensor]) -> Result<Tensor> {
    if subvolumes.len() != 8 {
        return Err(Error::shape(format!("expected 8 sub-volumes, got {}", subvolumes.len())));
    }
    let dims = subvolumes[0].dims().to_vec();
    if dims.len() != 3 || subvolumes.iter().any(|s| s.dims() != dims.as_slice()) {
        return Err(Error::shape("sub-volumes must be congruent rank-3 tensors"));
    }
    let (hx, hy, hz) = (dims[0], dims[1], dims[2]);
    let mut out = Tensor::zeros(vec![2 * hx, 2 * hy, 2 * hz])?;
    for (k, sv) in subvolumes.iter().enumerate() {
        let (dx, dy, dz) = offset_of(k);
        for i in 0..hx {
            for j in 0..hy {
                for l in 0..hz {
                    out.set(&[2 * i + dx, 2 * j + dy, 2 * l + dz], sv.get(&[i, j, l]));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Coronal, View::Sagittal];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
        }
    }

    /// Volume axis the view slices along: axial z, coronal y, sagittal x.
    pub fn slice_axis(self) -> usize {
        match self {
            View::Axial => 2,
            View::Coronal => 1,
            View::Sagittal => 0,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct SliceStack {
    pub view: View,
    /// Rank-2 slices in ascending anatomical order.
    pub slices: Vec<Tensor>,
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Axial slice `n` is the (x, y) plane at z = n, coronal the (x, z) plane at
/// y = n, sagittal the (y, z) plane at x = n.
pub fn extract_view_slices(sv: &Tensor, view: View) -> Result<SliceStack> {
    if sv.rank() != 3 {
        return Err(Error::shape(format!("expected a rank-3 volume, got {:?}", sv.dims())));
    }
    let d = sv.dims();
    let (nx, ny, nz) = (d[0], d[1], d[2]);
    let src = sv.data();
    let at = |x: usize, y: usize, z: usize| src[(x * ny + y) * nz + z];
    let slices = match view {
        View::Axial => (0..nz)
            .map(|n| {
                let data = (0..nx).flat_map(|x| (0..ny).map(move |y| (x, y))).map(|(x, y)| at(x, y, n));
                Tensor::new(vec![nx, ny], data.collect())
            })
            .collect::<Result<Vec<_>>>()?,
        View::Coronal => (0..ny)
            .map(|n| {
                let data = (0..nx).flat_map(|x| (0..nz).map(move |z| (x, z))).map(|(x, z)| at(x, n, z));
                Tensor::new(vec![nx, nz], data.collect())
            })
            .collect::<Result<Vec<_>>>()?,
        View::Sagittal => (0..nx)
            .map(|n| {
                let row = n * ny * nz;
                Tensor::new(vec![ny, nz], src[row..row + ny * nz].to_vec())
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(SliceStack { view, slices })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Copy the grayscale plane into three identical channels.
    Replicate3,
    Single,
}

impl ChannelMode {
    pub fn channels(self) -> usize {
        match self {
            ChannelMode::Replicate3 => 3,
            ChannelMode::Single => 1,
        }
    }
}

/// What the 2D extractor expects as input and produces as output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorDescriptor {
    pub input_height: usize,
    pub input_width: usize,
    pub channel_mode: ChannelMode,
    pub intensity_range: (f32, f32),
    /// (W, H, CH) of the per-slice feature map.
    pub out_dims: (usize, usize, usize),
}

impl ExtractorDescriptor {
    /// 299x299 RGB input in [-1, 1] producing 3x3x1536 maps.
    pub fn reference() -> Self {
        Self {
            input_height: 299,
            input_width: 299,
            channel_mode: ChannelMode::Replicate3,
            intensity_range: (-1.0, 1.0),
            out_dims: (3, 3, 1536),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::invalid("extractor input dims must be positive"));
        }
        let (lo, hi) = self.intensity_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("intensity range ({lo}, {hi}) needs lo < hi")));
        }
        let (w, h, ch) = self.out_dims;
        if w == 0 || h == 0 || ch == 0 {
            return Err(Error::invalid("extractor out_dims must be positive"));
        }
        if w > self.input_height || h > self.input_width {
            return Err(Error::invalid(format!(
                "output grid {w}x{h} is finer than the {}x{} input",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.input_height, self.input_width, self.channel_mode.channels()]
    }
}

/// Corner-aligned source coordinate of output sample `i` out of `n_out`.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear, corner-aligned resize of a rank-2 image.
pub fn resize_bilinear(s: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if s.rank() != 2 {
        return Err(Error::shape(format!("expected a rank-2 slice, got {:?}", s.dims())));
    }
    let (in_h, in_w) = (s.dims()[0], s.dims()[1]);
    let src = s.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = source_coord(i, in_h, out_h);
        let y0 = (y.floor() as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = y - y0 as f64;
        for j in 0..out_w {
            let x = source_coord(j, in_w, out_w);
            let x0 = (x.floor() as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = x - x0 as f64;
            let v00 = src[y0 * in_w + x0] as f64;
            let v01 = src[y0 * in_w + x1] as f64;
            let v10 = src[y1 * in_w + x0] as f64;
            let v11 = src[y1 * in_w + x1] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            out.push((top + (bottom - top) * fy) as f32);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Resizes, rescales [0, 1] to the descriptor's intensity range and lays out
/// channels. Output dims are `input_height x input_width x channels`.
pub fn adapt_slice(s: &Tensor, d: &ExtractorDescriptor) -> Result<Tensor> {
    let resized = resize_bilinear(s, d.input_height, d.input_width)?;
    let (lo, hi) = d.intensity_range;
    let channels = d.channel_mode.channels();
    let mut data = Vec::with_capacity(resized.len() * channels);
    for &v in resized.data() {
        let mapped = lo + v * (hi - lo);
        data.extend(std::iter::repeat_n(mapped, channels));
    }
    Tensor::new(vec![d.input_height, d.input_width, channels], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::volume::volume_from_tensor;

    fn random_volume(dims: [usize; 3], seed: u64) -> BrainVolume {
        let mut rng = SplitMix64::new(seed);
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.next_f64() as f32).collect();
        volume_from_tensor(Tensor::new(dims.to_vec(), data).unwrap(), "s", Metric::Gm).unwrap()
    }

    #[test]
    fn minimal_cube() {
        let t = Tensor::new(vec![2, 2, 2], (1..=8).map(|v| v as f32 / 8.0).collect()).unwrap();
        let v = volume_from_tensor(t, "s", Metric::Gm).unwrap();
        let set = decompose8(&v).unwrap();
        assert_eq!(set.subvolumes.len(), 8);
        for (k, sv) in set.subvolumes.iter().enumerate() {
            assert_eq!(sv.dims(), &[1, 1, 1]);
            // Row-major position of (dx, dy, dz) in a 2x2x2 cube is exactly k.
            assert_eq!(sv.data()[0], (k + 1) as f32 / 8.0);
        }
        assert_eq!(set.subvolumes[0].data()[0], v.voxels.get(&[0, 0, 0]));
        assert_eq!(set.subvolumes[7].data()[0], v.voxels.get(&[1, 1, 1]));
    }

    #[test]
    fn index_rule_and_reassembly() {
        let v = random_volume([6, 4, 8], 3);
        let set = decompose8(&v).unwrap();
        for (k, sv) in set.subvolumes.iter().enumerate() {
            let (dx, dy, dz) = offset_of(k);
            assert_eq!(offset_index(dx, dy, dz), k);
            for i in 0..3 {
                for j in 0..2 {
                    for l in 0..4 {
                        assert_eq!(sv.get(&[i, j, l]), v.voxels.get(&[2 * i + dx, 2 * j + dy, 2 * l + dz]));
                    }
                }
            }
        }
        assert_eq!(reassemble8(&set.subvolumes).unwrap(), v.voxels);
    }

    #[test]
    fn odd_dims_rejected() {
        let v = random_volume([3, 4, 4], 1);
        assert!(decompose8(&v).is_err());
    }

    #[test]
    fn reference_grid_decomposes_to_61_73_61() {
        let t = Tensor::filled(vec![122, 146, 122], 0.5).unwrap();
        let v = volume_from_tensor(t, "s", Metric::Gm).unwrap();
        let set = decompose8(&v).unwrap();
        for sv in &set.subvolumes {
            assert_eq!(sv.dims(), &[61, 73, 61]);
        }
        let axial = extract_view_slices(&set.subvolumes[0], View::Axial).unwrap();
        assert_eq!(axial.len(), 61);
        assert_eq!(axial.slices[0].dims(), &[61, 73]);
        let coronal = extract_view_slices(&set.subvolumes[0], View::Coronal).unwrap();
        assert_eq!(coronal.len(), 73);
        assert_eq!(coronal.slices[0].dims(), &[61, 61]);
        let sagittal = extract_view_slices(&set.subvolumes[0], View::Sagittal).unwrap();
        assert_eq!(sagittal.len(), 61);
        assert_eq!(sagittal.slices[0].dims(), &[73, 61]);
    }

    #[test]
    fn slice_orientation() {
        let v = random_volume([3, 4, 5], 9);
        let t = &v.voxels;
        let ax = extract_view_slices(t, View::Axial).unwrap();
        let co = extract_view_slices(t, View::Coronal).unwrap();
        let sa = extract_view_slices(t, View::Sagittal).unwrap();
        assert_eq!((ax.len(), co.len(), sa.len()), (5, 4, 3));
        for x in 0..3 {
            for y in 0..4 {
                for z in 0..5 {
                    let val = t.get(&[x, y, z]);
                    assert_eq!(ax.slices[z].get(&[x, y]), val);
                    assert_eq!(co.slices[y].get(&[x, z]), val);
                    assert_eq!(sa.slices[x].get(&[y, z]), val);
                }
            }
        }
    }

    #[test]
    fn degenerate_volume_slices() {
        let t = Tensor::filled(vec![1, 1, 1], 0.3).unwrap();
        for view in View::ALL {
            let s = extract_view_slices(&t, view).unwrap();
            assert_eq!(s.len(), 1);
            assert_eq!(s.slices[0].dims(), &[1, 1]);
        }
    }

    #[test]
    fn subvolume_stacks_are_congruent() {
        let v = random_volume([6, 8, 10], 4);
        let set = decompose8(&v).unwrap();
        for view in View::ALL {
            let stacks: Vec<_> = set.subvolumes.iter().map(|sv| extract_view_slices(sv, view).unwrap()).collect();
            for s in &stacks[1..] {
                assert_eq!(s.len(), stacks[0].len());
                assert_eq!(s.slices[0].dims(), stacks[0].slices[0].dims());
            }
        }
    }

    fn descriptor(h: usize, w: usize, mode: ChannelMode, range: (f32, f32)) -> ExtractorDescriptor {
        ExtractorDescriptor {
            input_height: h,
            input_width: w,
            channel_mode: mode,
            intensity_range: range,
            out_dims: (1, 1, 1),
        }
    }

    #[test]
    fn constant_slice_maps_to_midpoint() {
        let s = Tensor::filled(vec![5, 7], 0.5).unwrap();
        let out = adapt_slice(&s, &descriptor(9, 4, ChannelMode::Replicate3, (-1.0, 1.0))).unwrap();
        assert_eq!(out.dims(), &[9, 4, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let mut rng = SplitMix64::new(5);
        let s = Tensor::new(vec![4, 6], (0..24).map(|_| rng.next_f64() as f32).collect()).unwrap();
        assert_eq!(resize_bilinear(&s, 4, 6).unwrap(), s);
        let out = adapt_slice(&s, &descriptor(4, 6, ChannelMode::Single, (0.0, 1.0))).unwrap();
        assert_eq!(out.data(), s.data());
    }

    #[test]
    fn hand_computed_bilinear_row() {
        let s = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_bilinear(&s, 2, 4).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in 0..2 {
            for (c, e) in expected.iter().enumerate() {
                assert!((r.get(&[row, c]) - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn replicated_channels_are_identical() {
        let mut rng = SplitMix64::new(8);
        let s = Tensor::new(vec![7, 5], (0..35).map(|_| rng.next_f64() as f32).collect()).unwrap();
        let out = adapt_slice(&s, &descriptor(11, 13, ChannelMode::Replicate3, (-2.0, 3.0))).unwrap();
        for px in out.data().chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn descriptor_validation() {
        assert!(ExtractorDescriptor::reference().validate().is_ok());
        assert!(descriptor(4, 4, ChannelMode::Single, (1.0, 1.0)).validate().is_err());
        let mut d = descriptor(4, 4, ChannelMode::Single, (0.0, 1.0));
        d.out_dims = (0, 1, 1);
        assert!(d.validate().is_err());
    }
}
