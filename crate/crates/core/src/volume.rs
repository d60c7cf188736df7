//! Probability-map volumes, cohort manifests and synthetic phantom cohorts.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{tensor_read, tensor_write, Tensor};

/// Values this close outside [0, 1] are clamped on load; anything further is rejected.
pub const PROBABILITY_TOLERANCE: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Gm,
    Wm,
    Csf,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Gm, Metric::Wm, Metric::Csf];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Gm => "gm",
            Metric::Wm => "wm",
            Metric::Csf => "csf",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Diagnostic label. `Sz` is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "SZ")]
    Sz,
    #[serde(rename = "HC")]
    Hc,
}

impl Label {
    /// Output index of the two-way classifier head: HC = 0, SZ = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Hc => 0,
            Label::Sz => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Sz
    }

    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Label::Sz
        } else {
            Label::Hc
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrainVolume {
    pub subject_id: String,
    pub metric: Metric,
    /// Rank-3 tensor indexed (x, y, z).
    pub voxels: Tensor,
}

impl BrainVolume {
    pub fn dims(&self) -> [usize; 3] {
        let d = self.voxels.dims();
        [d[0], d[1], d[2]]
    }
}

/// Loads a rank-3 `V21T` file as a probability map.
pub fn load_volume(path: impl AsRef<Path>, subject_id: &str, metric: Metric) -> Result<BrainVolume> {
    let path = path.as_ref();
    let voxels = tensor_read(path)?;
    volume_from_tensor(voxels, subject_id, metric).map_err(|e| e.context(format!("loading {}", path.display())))
}

pub fn volume_from_tensor(mut voxels: Tensor, subject_id: &str, metric: Metric) -> Result<BrainVolume> {
    if voxels.rank() != 3 {
        return Err(Error::shape(format!("volume must be rank 3, got dims {:?}", voxels.dims())));
    }
    for (i, v) in voxels.data_mut().iter_mut().enumerate() {
        if *v < -PROBABILITY_TOLERANCE || *v > 1.0 + PROBABILITY_TOLERANCE {
            return Err(Error::invalid(format!("voxel {i} has value {v}, outside the probability range [0, 1]")));
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(BrainVolume { subject_id: subject_id.to_string(), metric, voxels })
}

/// Zero-pads every odd dimension by one voxel at its high end.
pub fn pad_to_even(v: &BrainVolume) -> BrainVolume {
    let [x, y, z] = v.dims();
    let padded = [x + x % 2, y + y % 2, z + z % 2];
    if padded == [x, y, z] {
        return v.clone();
    }
    let mut out = Tensor::zeros(padded.to_vec()).expect("padded dims are positive");
    let src = v.voxels.data();
    let dst = out.data_mut();
    for i in 0..x {
        for j in 0..y {
            let s = (i * y + j) * z;
            let d = (i * padded[1] + j) * padded[2];
            dst[d..d + z].copy_from_slice(&src[s..s + z]);
        }
    }
    BrainVolume { subject_id: v.subject_id.clone(), metric: v.metric, voxels: out }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: Label,
    pub gm: PathBuf,
    pub wm: PathBuf,
    pub csf: PathBuf,
}

impl SubjectEntry {
    pub fn path(&self, metric: Metric) -> &Path {
        match metric {
            Metric::Gm => &self.gm,
            Metric::Wm => &self.wm,
            Metric::Csf => &self.csf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub subjects: Vec<SubjectEntry>,
    /// Directory that relative volume paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if s.id.is_empty() {
                return Err(Error::invalid("manifest contains an empty subject id"));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate subject id {:?}", s.id)));
            }
            for m in Metric::ALL {
                if s.path(m).as_os_str().is_empty() {
                    return Err(Error::invalid(format!("subject {} has no {m} path", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|source| Error::Json { context: path.display().to_string(), source })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, subject: &SubjectEntry, metric: Metric) -> PathBuf {
        self.base_dir.join(subject.path(metric))
    }

    pub fn load_volume(&self, subject: &SubjectEntry, metric: Metric) -> Result<BrainVolume> {
        load_volume(self.resolve(subject, metric), &subject.id, metric)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.subjects.iter().map(|s| s.label).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub gm: f32,
    pub wm: f32,
    pub csf: f32,
}

impl MetricDeltas {
    pub fn get(&self, metric: Metric) -> f32 {
        match metric {
            Metric::Gm => self.gm,
            Metric::Wm => self.wm,
            Metric::Csf => self.csf,
        }
    }
}

/// A ball of voxels whose intensities shift for positive-class subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectRegion {
    pub center: [usize; 3],
    pub radius: usize,
    pub delta: MetricDeltas,
}

impl EffectRegion {
    fn contains(&self, p: [usize; 3]) -> bool {
        let d2: usize = (0..3).map(|a| p[a].abs_diff(self.center[a]).pow(2)).sum();
        d2 <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_per_class: usize,
    pub dims: [usize; 3],
    pub effect_regions: Vec<EffectRegion>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let dims = [121, 145, 121];
        let delta = MetricDeltas { gm: -0.15, wm: 0.15, csf: 0.15 };
        Self {
            n_per_class: 10,
            dims,
            effect_regions: vec![
                EffectRegion { center: [40, 72, 60], radius: 10, delta },
                EffectRegion { center: [80, 60, 50], radius: 10, delta },
                EffectRegion { center: [60, 95, 75], radius: 10, delta },
            ],
            noise_sigma: 0.05,
            seed: 20_230_101,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::invalid("n_per_class must be at least 1"));
        }
        if self.dims.contains(&0) {
            return Err(Error::invalid(format!("phantom dims {:?} must be positive", self.dims)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        for (i, r) in self.effect_regions.iter().enumerate() {
            for a in 0..3 {
                if r.center[a] < r.radius || r.center[a] + r.radius >= self.dims[a] {
                    return Err(Error::invalid(format!(
                        "effect region {i} (center {:?}, radius {}) leaves dims {:?}",
                        r.center, r.radius, self.dims
                    )));
                }
            }
            for m in Metric::ALL {
                if !r.delta.get(m).is_finite() {
                    return Err(Error::invalid(format!("effect region {i} has a non-finite delta")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { context: path.display().to_string(), source })
    }

    pub fn subject_id(index: usize) -> String {
        format!("sub-{index:03}")
    }

    /// Label of subject `index`: the first `n_per_class` are SZ, the rest HC.
    pub fn label(&self, index: usize) -> Label {
        Label::from_positive(index < self.n_per_class)
    }
}

/// Smooth noise-free tissue map: an ellipsoidal blob filling the volume up to
/// normalized radius 0.8 and fading to zero background at 0.95. Inside the
/// blob every value lies in [0.2, 0.8] so that effect deltas up to 0.2 never
/// clip.
pub fn baseline_intensity(metric: Metric, dims: [usize; 3], p: [usize; 3]) -> f32 {
    let mut r2 = 0.0f64;
    for a in 0..3 {
        let u = (p[a] as f64 + 0.5) / dims[a] as f64 * 2.0 - 1.0;
        r2 += u * u;
    }
    let r = r2.sqrt();
    let shape = match metric {
        Metric::Gm => (-(r - 0.55).powi(2) / 0.05).exp(),
        Metric::Wm => (-r2 / 0.2).exp(),
        Metric::Csf => 1.0 - (-r2 / 0.6).exp(),
    };
    let t = ((0.95 - r) / 0.15).clamp(0.0, 1.0);
    let envelope = t * t * (3.0 - 2.0 * t);
    ((0.2 + 0.6 * shape) * envelope) as f32
}

/// Builds one phantom volume in memory. `rng` is consumed only when
/// `noise_sigma > 0`, one Gaussian per voxel in row-major order.
pub fn phantom_volume(spec: &PhantomSpec, metric: Metric, positive: bool, rng: &mut SplitMix64) -> Tensor {
    let [nx, ny, nz] = spec.dims;
    let mut data = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x, y, z];
                let mut v = baseline_intensity(metric, spec.dims, p);
                if positive {
                    for r in &spec.effect_regions {
                        if r.contains(p) {
                            v += r.delta.get(metric);
                        }
                    }
                }
                if spec.noise_sigma > 0.0 {
                    v += spec.noise_sigma * rng.gaussian() as f32;
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(spec.dims.to_vec(), data).expect("phantom dims validated")
}

/// Writes `volumes/{id}_{metric}.v21t` for every subject plus `manifest.json`
/// under `out_dir`, and returns the manifest.
pub fn generate_phantom_cohort(spec: &PhantomSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let vol_dir = out_dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;

    let n = 2 * spec.n_per_class;
    let subjects = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = PhantomSpec::subject_id(i);
            let label = spec.label(i);
            let mut rng = SplitMix64::new(derive_seed(spec.seed, i as u64));
            let mut rel = Vec::with_capacity(3);
            for metric in Metric::ALL {
                let t = phantom_volume(spec, metric, label.is_positive(), &mut rng);
                let name = PathBuf::from("volumes").join(format!("{id}_{metric}.v21t"));
                tensor_write(&t, out_dir.join(&name))?;
                rel.push(name);
            }
            let csf = rel.pop().unwrap();
            let wm = rel.pop().unwrap();
            let gm = rel.pop().unwrap();
            Ok(SubjectEntry { id, label, gm, wm, csf })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest { seed: spec.seed, subjects, base_dir: out_dir.to_path_buf() };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            n_per_class: 5,
            dims: [12, 10, 8],
            effect_regions: vec![EffectRegion {
                center: [5, 5, 4],
                radius: 2,
                delta: MetricDeltas { gm: 0.1, wm: -0.1, csf: 0.05 },
            }],
            noise_sigma: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn zeros_are_a_valid_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.v21t");
        tensor_write(&Tensor::zeros(vec![8, 8, 8]).unwrap(), &p).unwrap();
        let v = load_volume(&p, "s", Metric::Csf).unwrap();
        assert_eq!(v.dims(), [8, 8, 8]);
        assert_eq!(v.metric, Metric::Csf);
    }

    #[test]
    fn rank2_is_rejected() {
        let t = Tensor::zeros(vec![4, 4]).unwrap();
        assert!(matches!(volume_from_tensor(t, "s", Metric::Gm), Err(Error::Shape(_))));
    }

    #[test]
    fn out_of_range_values() {
        let t = Tensor::new(vec![1, 1, 2], vec![-5e-7, 1.0 + 5e-7]).unwrap();
        let v = volume_from_tensor(t, "s", Metric::Gm).unwrap();
        assert_eq!(v.voxels.data(), &[0.0, 1.0]);
        let t = Tensor::new(vec![1, 1, 1], vec![1.01]).unwrap();
        assert!(matches!(volume_from_tensor(t, "s", Metric::Gm), Err(Error::Invalid(_))));
    }

    #[test]
    fn reference_grid_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.v21t");
        tensor_write(&Tensor::filled(vec![121, 145, 121], 0.5).unwrap(), &p).unwrap();
        let v = load_volume(&p, "s", Metric::Wm).unwrap();
        assert_eq!(v.dims(), [121, 145, 121]);
        assert_eq!(pad_to_even(&v).dims(), [122, 146, 122]);
    }

    #[test]
    fn pad_even_is_identity() {
        let v = volume_from_tensor(Tensor::filled(vec![8, 8, 8], 0.25).unwrap(), "s", Metric::Gm).unwrap();
        assert_eq!(pad_to_even(&v), v);
    }

    #[test]
    fn pad_preserves_low_corner() {
        let data: Vec<f32> = (0..60).map(|i| i as f32 / 60.0).collect();
        let v = volume_from_tensor(Tensor::new(vec![3, 4, 5], data).unwrap(), "s", Metric::Gm).unwrap();
        let p = pad_to_even(&v);
        assert_eq!(p.dims(), [4, 4, 6]);
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..6 {
                    let expected = if x < 3 && z < 5 { v.voxels.get(&[x, y, z]) } else { 0.0 };
                    assert_eq!(p.voxels.get(&[x, y, z]).to_bits(), expected.to_bits());
                }
            }
        }
        assert_eq!(p.voxels.get(&[2, 3, 4]), v.voxels.get(&[2, 3, 4]));
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec();
        s.noise_sigma = -0.1;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.effect_regions[0].center = [1, 5, 4];
        assert!(s.validate().is_err());
        assert!(small_spec().validate().is_ok());
        assert!(PhantomSpec::default().validate().is_ok());
    }

    #[test]
    fn zero_noise_differs_only_on_effect_voxels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let m = generate_phantom_cohort(&spec, dir.path()).unwrap();
        assert_eq!(m.subjects.len(), 10);
        let sz = &m.subjects[0];
        let hc = &m.subjects[9];
        assert_eq!((sz.label, hc.label), (Label::Sz, Label::Hc));
        for metric in Metric::ALL {
            let a = m.load_volume(sz, metric).unwrap();
            let b = m.load_volume(hc, metric).unwrap();
            let region = &spec.effect_regions[0];
            for x in 0..12 {
                for y in 0..10 {
                    for z in 0..8 {
                        let differs = a.voxels.get(&[x, y, z]) != b.voxels.get(&[x, y, z]);
                        assert_eq!(differs, region.contains([x, y, z]), "{metric} at {x},{y},{z}");
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.05;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_phantom_cohort(&spec, d1.path()).unwrap();
        generate_phantom_cohort(&spec, d2.path()).unwrap();
        for s in &m1.subjects {
            for metric in Metric::ALL {
                let a = fs::read(d1.path().join(s.path(metric))).unwrap();
                let b = fs::read(d2.path().join(s.path(metric))).unwrap();
                assert_eq!(a, b);
            }
        }
        assert_eq!(
            fs::read(d1.path().join("manifest.json")).unwrap(),
            fs::read(d2.path().join("manifest.json")).unwrap()
        );
        let loaded = DatasetManifest::load(d1.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.subjects, m1.subjects);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = SubjectEntry { id: "a".into(), label: Label::Sz, gm: "g".into(), wm: "w".into(), csf: "c".into() };
        let m = DatasetManifest { seed: 0, subjects: vec![e.clone(), e], base_dir: PathBuf::new() };
        assert!(m.validate().is_err());
    }

    #[test]
    fn baseline_range() {
        let dims = [9, 11, 7];
        for m in Metric::ALL {
            for x in 0..9 {
                for y in 0..11 {
                    for z in 0..7 {
                        let v = baseline_intensity(m, dims, [x, y, z]);
                        assert!((0.0..=0.8).contains(&v));
                    }
                }
            }
            assert_eq!(baseline_intensity(m, dims, [0, 0, 0]), 0.0);
            assert!((0.2..=0.8).contains(&baseline_intensity(m, dims, [4, 5, 3])));
        }
    }
}
