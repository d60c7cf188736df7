//! Learned global pooling: keep the slices, then per slice the channels,
//! with the largest summed activation over the training subjects.

use serde::{Deserialize, Serialize};

use crate::decomposition::View;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::Metric;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSelection {
    /// Independent channel ranking for every retained slice.
    #[default]
    PerSlice,
    /// One channel ranking summed over all retained slices, shared by every slice.
    Global,
}

/// Divisors turning `N` and `CH` into the retained counts `J = N / slices`
/// and `K = CH / channels` (floored).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRule {
    pub slice_divisor: usize,
    pub channel_divisor: usize,
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self { slice_divisor: 2, channel_divisor: 4 }
    }
}

impl SelectionRule {
    /// Keeps every slice and channel.
    pub const IDENTITY: SelectionRule = SelectionRule { slice_divisor: 1, channel_divisor: 1 };

    pub fn counts(&self, n: usize, ch: usize) -> Result<(usize, usize)> {
        if self.slice_divisor == 0 || self.channel_divisor == 0 {
            return Err(Error::invalid("selection divisors must be positive"));
        }
        let (j, k) = (n / self.slice_divisor, ch / self.channel_divisor);
        if j == 0 || k == 0 {
            return Err(Error::invalid(format!("selection rule {self:?} keeps nothing of N={n}, CH={ch}")));
        }
        Ok((j, k))
    }
}

/// Max-pooled feature maps of the training subjects for one (metric, view).
#[derive(Clone, Debug)]
pub struct TrainingFeatureCorpus<'a> {
    pub view: View,
    pub subjects: Vec<&'a Tensor>,
}

impl<'a> TrainingFeatureCorpus<'a> {
    pub fn new(view: View, subjects: Vec<&'a Tensor>) -> Result<Self> {
        let first = subjects.first().ok_or_else(|| Error::invalid("empty training corpus"))?;
        if first.rank() != 4 {
            return Err(Error::shape(format!("corpus maps must be rank 4, got {:?}", first.dims())));
        }
        if let Some(bad) = subjects.iter().find(|t| t.dims() != first.dims()) {
            return Err(Error::shape(format!("corpus dims disagree: {:?} vs {:?}", first.dims(), bad.dims())));
        }
        Ok(Self { view, subjects })
    }

    /// `(N, W, H, CH)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.subjects[0].dims();
        (d[0], d[1], d[2], d[3])
    }

    /// `score(n) = sum over t, w, h, ch of F_t(n, w, h, ch)`, accumulated in
    /// subject, then n, w, h, ch order.
    pub fn slice_scores(&self) -> Vec<f64> {
        let (n, w, h, ch) = self.dims();
        let per_slice = w * h * ch;
        let mut scores = vec![0.0f64; n];
        for t in &self.subjects {
            for (s, chunk) in scores.iter_mut().zip(t.data().chunks_exact(per_slice)) {
                for &v in chunk {
                    *s += v as f64;
                }
            }
        }
        scores
    }

    /// `score(ch) = sum over t, w, h of F_t(slice, w, h, ch)`.
    pub fn channel_scores(&self, slice: usize) -> Vec<f64> {
        let (_, w, h, ch) = self.dims();
        let per_slice = w * h * ch;
        let mut scores = vec![0.0f64; ch];
        for t in &self.subjects {
            let block = &t.data()[slice * per_slice..(slice + 1) * per_slice];
            for pixel in block.chunks_exact(ch) {
                for (s, &v) in scores.iter_mut().zip(pixel) {
                    *s += v as f64;
                }
            }
        }
        scores
    }
}

/// Indices of the `count` largest scores, ties toward the smaller index,
/// returned in ascending index order.
pub fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionIndices {
    pub view: View,
    /// Slice count `N` of the maps the selection was learned on.
    pub n_slices: usize,
    /// Channel count `CH` of the maps the selection was learned on.
    pub n_channels: usize,
    /// `J` ascending slice indices.
    pub slice_indices: Vec<usize>,
    /// For each retained slice, `K` ascending channel indices.
    pub channel_indices: Vec<Vec<usize>>,
}

impl SelectionIndices {
    pub fn j(&self) -> usize {
        self.slice_indices.len()
    }

    pub fn k(&self) -> usize {
        self.channel_indices.first().map_or(0, Vec::len)
    }

    /// Keeps everything, in order.
    pub fn identity(view: View, n: usize, ch: usize) -> Self {
        Self {
            view,
            n_slices: n,
            n_channels: ch,
            slice_indices: (0..n).collect(),
            channel_indices: vec![(0..ch).collect(); n],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection serializes")
    }
}

pub fn learn_slice_selection(corpus: &TrainingFeatureCorpus, j: usize) -> Result<Vec<usize>> {
    let (n, ..) = corpus.dims();
    if j == 0 || j > n {
        return Err(Error::invalid(format!("cannot keep {j} of {n} slices")));
    }
    Ok(top_indices(&corpus.slice_scores(), j))
}

pub fn learn_channel_selection(
    corpus: &TrainingFeatureCorpus,
    slice_indices: &[usize],
    k: usize,
    mode: ChannelSelection,
) -> Result<Vec<Vec<usize>>> {
    let (n, _, _, ch) = corpus.dims();
    if k == 0 || k > ch {
        return Err(Error::invalid(format!("cannot keep {k} of {ch} channels")));
    }
    if let Some(&bad) = slice_indices.iter().find(|&&s| s >= n) {
        return Err(Error::invalid(format!("slice index {bad} out of range for N={n}")));
    }
    Ok(match mode {
        ChannelSelection::PerSlice => {
            slice_indices.iter().map(|&s| top_indices(&corpus.channel_scores(s), k)).collect()
        }
        ChannelSelection::Global => {
            let mut total = vec![0.0f64; ch];
            for &s in slice_indices {
                for (t, v) in total.iter_mut().zip(corpus.channel_scores(s)) {
                    *t += v;
                }
            }
            vec![top_indices(&total, k); slice_indices.len()]
        }
    })
}

/// Learns both selections with `J`, `K` given by `rule`.
pub fn learn_selection(
    corpus: &TrainingFeatureCorpus,
    rule: SelectionRule,
    mode: ChannelSelection,
) -> Result<SelectionIndices> {
    let (n, _, _, ch) = corpus.dims();
    let (j, k) = rule.counts(n, ch)?;
    let slice_indices = learn_slice_selection(corpus, j)?;
    let channel_indices = learn_channel_selection(corpus, &slice_indices, k, mode)?;
    Ok(SelectionIndices { view: corpus.view, n_slices: n, n_channels: ch, slice_indices, channel_indices })
}

/// Globally pooled maps of one subject and branch, `J x W x H x K`.
#[derive(Clone, Debug)]
pub struct PooledFeatures {
    pub subject_id: String,
    pub metric: Metric,
    pub view: View,
    pub maps: Tensor,
}

/// Gathers `out[j, w, h, c] = f[slice_indices[j], w, h, channel_indices[j][c]]`.
pub fn apply_selection(f: &Tensor, sel: &SelectionIndices) -> Result<Tensor> {
    if f.rank() != 4 {
        return Err(Error::shape(format!("expected rank-4 maps, got {:?}", f.dims())));
    }
    let d = f.dims();
    let (n, w, h, ch) = (d[0], d[1], d[2], d[3]);
    if n != sel.n_slices || ch != sel.n_channels {
        return Err(Error::shape(format!(
            "maps are {n} slices x {ch} channels, selection was learned on {} x {}",
            sel.n_slices, sel.n_channels
        )));
    }
    let (j, k) = (sel.j(), sel.k());
    let src = f.data();
    let mut out = Vec::with_capacity(j * w * h * k);
    for (&s, chans) in sel.slice_indices.iter().zip(&sel.channel_indices) {
        for p in 0..w * h {
            let base = (s * w * h + p) * ch;
            out.extend(chans.iter().map(|&c| src[base + c]));
        }
    }
    Tensor::new(vec![j, w, h, k], out)
}
