//! Per-slice feature extraction behind a pluggable [`SliceExtractor`], the
//! import path for externally computed feature maps, and the eight-way
//! neighbor max-pooling that merges the sub-volume feature stacks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::decomposition::{adapt_slice, decompose8, extract_view_slices, ExtractorDescriptor, SliceStack, View};
use crate::error::{Error, Result};
use crate::rng::{derive_path, SplitMix64};
use crate::tensor::{tensor_read, Tensor};
use crate::volume::{pad_to_even, BrainVolume, DatasetManifest, Metric};

/// A frozen 2D network: adapted slice in, `W x H x CH` non-negative feature map out.
pub trait SliceExtractor: Sync {
    fn descriptor(&self) -> &ExtractorDescriptor;
    fn extract(&self, img: &Tensor) -> Result<Tensor>;
}

/// Weights above this many floats are regenerated per call instead of cached.
const MATERIALIZE_LIMIT: usize = 1 << 24;

/// Deterministic stand-in for a pre-trained network.
///
/// The input image is cut into a `W x H` grid of rectangular blocks: the
/// image rows are split into `W` bands and the columns into `H` bands of
/// `floor(len / bands)` pixels, the last band absorbing the remainder. For
/// grid cell `(w, h)` and channel `ch`,
/// `out[w, h, ch] = max(0, a . vec(block) + b)` where `vec(block)` lists the
/// block's pixels in row-major (row, column, channel) order.
///
/// `a` and `b` come from a SplitMix64 stream seeded with
/// `derive_path(seed, [w * H + h, ch])`: first `a` (one uniform in
/// `[-s, s)` per block element, in `vec(block)` order), then `b` from the
/// same range, where `s = 1 / sqrt(block element count)`.
pub struct StubExtractor {
    descriptor: ExtractorDescriptor,
    seed: u64,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
    /// Per cell: `ch`-major rows of `block_len` weights followed by `CH` biases.
    weights: Option<Vec<Vec<f32>>>,
}

fn bands(len: usize, n: usize) -> Vec<(usize, usize)> {
    let size = len / n;
    (0..n).map(|i| (i * size, if i + 1 == n { len } else { (i + 1) * size })).collect()
}

impl StubExtractor {
    pub fn new(descriptor: ExtractorDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let (w, h, _) = descriptor.out_dims;
        let rows = bands(descriptor.input_height, w);
        let cols = bands(descriptor.input_width, h);
        let mut stub = Self { descriptor, seed, rows, cols, weights: None };
        let total: usize = (0..w * h).map(|c| (stub.block_len(c) + 1) * stub.descriptor.out_dims.2).sum();
        if total <= MATERIALIZE_LIMIT {
            let ch = stub.descriptor.out_dims.2;
            let cells = (0..w * h)
                .map(|cell| {
                    let n = stub.block_len(cell);
                    let mut buf = vec![0.0f32; n * ch + ch];
                    for c in 0..ch {
                        let (row, bias) = buf.split_at_mut(n * ch);
                        stub.fill_channel(cell, c, &mut row[c * n..(c + 1) * n], &mut bias[c]);
                    }
                    buf
                })
                .collect();
            stub.weights = Some(cells);
        }
        Ok(stub)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn block_len(&self, cell: usize) -> usize {
        let h = self.descriptor.out_dims.1;
        let (r0, r1) = self.rows[cell / h];
        let (c0, c1) = self.cols[cell % h];
        (r1 - r0) * (c1 - c0) * self.descriptor.channel_mode.channels()
    }

    fn fill_channel(&self, cell: usize, ch: usize, row: &mut [f32], bias: &mut f32) {
        let s = 1.0 / (row.len() as f64).sqrt();
        let mut rng = SplitMix64::new(derive_path(self.seed, &[cell as u64, ch as u64]));
        for a in row.iter_mut() {
            *a = rng.uniform(-s, s) as f32;
        }
        *bias = rng.uniform(-s, s) as f32;
    }

    fn gather(&self, img: &Tensor, cell: usize, block: &mut Vec<f32>) {
        let h = self.descriptor.out_dims.1;
        let (r0, r1) = self.rows[cell / h];
        let (c0, c1) = self.cols[cell % h];
        let chans = self.descriptor.channel_mode.channels();
        let width = self.descriptor.input_width;
        let data = img.data();
        block.clear();
        for r in r0..r1 {
            block.extend_from_slice(&data[(r * width + c0) * chans..(r * width + c1) * chans]);
        }
    }
}

#[inline]
fn relu_dot(a: &[f32], x: &[f32], b: f32) -> f32 {
    let acc: f32 = a.iter().zip(x).map(|(a, x)| a * x).sum();
    (acc + b).max(0.0)
}

impl SliceExtractor for StubExtractor {
    fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    fn extract(&self, img: &Tensor) -> Result<Tensor> {
        let expected = self.descriptor.input_dims();
        if img.dims() != expected {
            return Err(Error::shape(format!("stub extractor expects input {expected:?}, got {:?}", img.dims())));
        }
        let (w, h, ch) = self.descriptor.out_dims;
        let mut out = Vec::with_capacity(w * h * ch);
        let mut block = Vec::new();
        let mut scratch = Vec::new();
        for cell in 0..w * h {
            self.gather(img, cell, &mut block);
            let n = block.len();
            match &self.weights {
                Some(cells) => {
                    let (rows, biases) = cells[cell].split_at(n * ch);
                    out.extend((0..ch).map(|c| relu_dot(&rows[c * n..(c + 1) * n], &block, biases[c])));
                }
                None => {
                    scratch.resize(n, 0.0);
                    for c in 0..ch {
                        let mut bias = 0.0;
                        self.fill_channel(cell, c, &mut scratch, &mut bias);
                        out.push(relu_dot(&scratch, &block, bias));
                    }
                }
            }
        }
        Tensor::new(vec![w, h, ch], out)
    }
}

/// One-shot form of [`StubExtractor::extract`].
pub fn stub_extract(img: &Tensor, seed: u64, d: &ExtractorDescriptor) -> Result<Tensor> {
    StubExtractor::new(d.clone(), seed)?.extract(img)
}

/// Feature maps `F^k(n, w, h, ch)` of one sub-volume `k` for one view.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    pub view: View,
    pub k: usize,
    /// Rank 4, `N x W x H x CH`.
    pub maps: Tensor,
}

/// Elementwise maximum over the eight neighbor sets, `N x W x H x CH`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPooledFeatures {
    pub view: View,
    pub maps: Tensor,
}

/// Runs the extractor over every slice of `stack` and stacks the results.
pub fn extract_stack<E: SliceExtractor + ?Sized>(stack: &SliceStack, extractor: &E) -> Result<Tensor> {
    let maps = stack
        .slices
        .par_iter()
        .map(|s| extractor.extract(&adapt_slice(s, extractor.descriptor())?))
        .collect::<Result<Vec<_>>>()?;
    let (w, h, ch) = extractor.descriptor().out_dims;
    let mut data = Vec::with_capacity(maps.len() * w * h * ch);
    for m in &maps {
        if m.dims() != [w, h, ch] {
            return Err(Error::shape(format!("extractor produced {:?}, expected {:?}", m.dims(), [w, h, ch])));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new(vec![maps.len(), w, h, ch], data)
}

/// Full per-branch feature path for one volume: pad, decompose into eight
/// sub-volumes, slice, extract and max-pool. With `skip_decomposition`
/// the padded volume is sliced directly and no pooling happens.
pub fn branch_features<E: SliceExtractor + ?Sized>(
    volume: &BrainVolume,
    view: View,
    extractor: &E,
    skip_decomposition: bool,
) -> Result<MaxPooledFeatures> {
    let padded = pad_to_even(volume);
    if skip_decomposition {
        let stack = extract_view_slices(&padded.voxels, view)?;
        return Ok(MaxPooledFeatures { view, maps: extract_stack(&stack, extractor)? });
    }
    let set = decompose8(&padded)?;
    let sets = set
        .subvolumes
        .par_iter()
        .enumerate()
        .map(|(k, sv)| {
            let stack = extract_view_slices(sv, view)?;
            Ok(FeatureMapSet { view, k, maps: extract_stack(&stack, extractor)? })
        })
        .collect::<Result<Vec<_>>>()?;
    maxpool8(&sets)
}

pub fn maxpool8(sets: &[FeatureMapSet]) -> Result<MaxPooledFeatures> {
    if sets.len() != 8 {
        return Err(Error::shape(format!("maxpool8 needs 8 feature sets, got {}", sets.len())));
    }
    let view = sets[0].view;
    let dims = sets[0].maps.dims();
    for s in sets {
        if s.view != view {
            return Err(Error::shape(format!("mixed views {} and {}", view, s.view)));
        }
        if s.maps.dims() != dims {
            return Err(Error::shape(format!(
                "set k={} has dims {:?}, set k={} has {:?}",
                sets[0].k,
                dims,
                s.k,
                s.maps.dims()
            )));
        }
    }
    let mut out = sets[0].maps.clone();
    for s in &sets[1..] {
        for (o, &v) in out.data_mut().iter_mut().zip(s.maps.data()) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(MaxPooledFeatures { view, maps: out })
}

pub fn feature_file_name(subject: &str, metric: Metric, view: View, k: usize) -> String {
    format!("{subject}_{metric}_{view}_{k}.v21t")
}

/// Reads and validates the eight `{subject}_{metric}_{view}_{k}.v21t` files
/// of one branch. `expected_out` optionally pins `(W, H, CH)`.
pub fn import_feature_group(
    dir: &Path,
    subject: &str,
    metric: Metric,
    view: View,
    expected_out: Option<(usize, usize, usize)>,
) -> Result<Vec<FeatureMapSet>> {
    let mut sets = Vec::with_capacity(8);
    for k in 0..8 {
        let path: PathBuf = dir.join(feature_file_name(subject, metric, view, k));
        if !path.is_file() {
            return Err(Error::MissingFeatures {
                subject: subject.to_string(),
                metric: metric.to_string(),
                view: view.to_string(),
                k,
                path,
            });
        }
        let maps = tensor_read(&path)?;
        if maps.rank() != 4 {
            return Err(Error::shape(format!("{}: expected rank 4, got {:?}", path.display(), maps.dims())));
        }
        if let Some((w, h, ch)) = expected_out {
            if maps.dims()[1..] != [w, h, ch] {
                return Err(Error::shape(format!(
                    "{}: per-slice dims {:?} differ from descriptor {:?}",
                    path.display(),
                    &maps.dims()[1..],
                    (w, h, ch)
                )));
            }
        }
        if let Some(first) = sets.first() {
            let first: &FeatureMapSet = first;
            if first.maps.dims() != maps.dims() {
                return Err(Error::shape(format!(
                    "{subject}/{metric}/{view}: k=0 has dims {:?} but k={k} has {:?}",
                    first.maps.dims(),
                    maps.dims()
                )));
            }
        }
        if let Some(&value) = maps.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::NegativeActivation { value, context: path.display().to_string() });
        }
        sets.push(FeatureMapSet { view, k, maps });
    }
    Ok(sets)
}

/// Key of one imported feature file: (subject, metric, view, k).
pub type FeatureKey = (String, Metric, View, usize);

pub fn import_external_features(
    dir: &Path,
    manifest: &DatasetManifest,
    expected_out: Option<(usize, usize, usize)>,
) -> Result<BTreeMap<FeatureKey, FeatureMapSet>> {
    let mut out = BTreeMap::new();
    for s in &manifest.subjects {
        for metric in Metric::ALL {
            for view in View::ALL {
                for set in import_feature_group(dir, &s.id, metric, view, expected_out)? {
                    out.insert((s.id.clone(), metric, view, set.k), set);
                }
            }
        }
    }
    Ok(out)
}
