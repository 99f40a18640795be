//! Embedding datasets: the MSCE binary format, synthetic Gaussian blobs and
//! task-sequence splitting.
//!
//! MSCE v1 layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MSCE"
//! 4       4     version u32 = 1
//! 8       4     dim u32
//! 12      2     views u16
//! 14      2     flags u16 (bit 0: labels present)
//! 16      8     count u64
//! 24      ...   count × { label i32 (−1 if absent), views × dim f32 }
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{self, Cursor};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MSCE_MAGIC: &[u8; 4] = b"MSCE";
pub const MSCE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;
const FLAG_LABELS: u16 = 1;

/// Fraction of each class held out for evaluation when a single file is split.
pub const TEST_FRACTION_DENOM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// `N` samples, each with `V` views of a `D`-dim embedding, plus optional
/// hidden labels used only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    views: usize,
    features: Vec<f64>,
    labels: Option<Vec<u32>>,
    pub split: Split,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, views: usize, features: Vec<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        if dim == 0 || views == 0 {
            return Err(Error::invalid(format!(
                "dataset needs positive dim and views, got dim={dim} views={views}"
            )));
        }
        if views > usize::from(u16::MAX) {
            return Err(Error::invalid(format!("too many views: {views}")));
        }
        let stride = dim * views;
        if features.len() % stride != 0 {
            return Err(Error::invalid("feature buffer is not a whole number of samples"));
        }
        let n = features.len() / stride;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} samples", l.len())));
            }
            if l.iter().any(|&x| x > i32::MAX as u32) {
                return Err(Error::invalid("label out of i32 range"));
            }
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(EmbeddingDataset {
            dim,
            views,
            features,
            labels,
            split: Split::Train,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / (self.dim * self.views)
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Labels, or an error naming `what` needs them.
    pub fn require_labels(&self, what: &str) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("{what} needs labelled data")))
    }

    /// Number of classes implied by the labels (`max + 1`), 0 without labels.
    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn view(&self, sample: usize, view: usize) -> &[f64] {
        let start = (sample * self.views + view) * self.dim;
        &self.features[start..start + self.dim]
    }

    pub fn raw_features(&self) -> &[f64] {
        &self.features
    }

    /// One view of every sample as an `N×D` matrix.
    pub fn view_matrix(&self, view: usize) -> Result<Matrix> {
        let rows: Vec<f64> = (0..self.len())
            .flat_map(|i| self.view(i, view).iter().copied())
            .collect();
        Matrix::from_vec(self.len(), self.dim, rows)
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<EmbeddingDataset> {
        let stride = self.dim * self.views;
        let mut features = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            features.extend_from_slice(&self.features[i * stride..(i + 1) * stride]);
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(EmbeddingDataset {
            dim: self.dim,
            views: self.views,
            features,
            labels,
            split: self.split,
        })
    }

    /// Concatenates datasets with matching shapes.
    pub fn concat(parts: &[&EmbeddingDataset]) -> Result<EmbeddingDataset> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero datasets"))?;
        if parts
            .iter()
            .any(|p| p.dim != first.dim || p.views != first.views || p.labels.is_some() != first.labels.is_some())
        {
            return Err(Error::invalid("datasets differ in dim, views or label presence"));
        }
        let features = parts.iter().flat_map(|p| p.features.iter().copied()).collect();
        let labels = first
            .labels
            .as_ref()
            .map(|_| parts.iter().flat_map(|p| p.labels.as_ref().unwrap().iter().copied()).collect());
        Ok(EmbeddingDataset {
            dim: first.dim,
            views: first.views,
            features,
            labels,
            split: first.split,
        })
    }

    /// Stable 64-bit FNV-1a digest of the feature buffer's bit patterns.
    pub fn feature_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in &self.features {
            for b in x.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

pub fn encode_embeddings(ds: &EmbeddingDataset) -> Vec<u8> {
    let n = ds.len();
    let mut out = Vec::with_capacity(HEADER_LEN as usize + n * (4 + 4 * ds.dim * ds.views));
    out.extend_from_slice(MSCE_MAGIC);
    out.extend_from_slice(&MSCE_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.views as u16).to_le_bytes());
    let flags = if ds.labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let stride = ds.dim * ds.views;
    for i in 0..n {
        let label = ds.label(i).map_or(-1, |l| l as i32);
        out.extend_from_slice(&label.to_le_bytes());
        binio::put_f32s(&mut out, &ds.features[i * stride..(i + 1) * stride]);
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut cur = Cursor::new(bytes);
    if &cur.bytes::<4>("magic")? != MSCE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"MSCE\"".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != MSCE_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported MSCE version {version}, expected {MSCE_VERSION}"),
        });
    }
    let dim = cur.u32("dim")? as usize;
    let views = usize::from(cur.u16("views")?);
    let flags = cur.u16("flags")?;
    let count = cur.u64("count")?;
    if dim == 0 || views == 0 {
        return Err(Error::Format {
            offset: 8,
            message: format!("dim and views must be positive, got dim={dim} views={views}"),
        });
    }
    let record = 4 + 4 * (dim as u64) * (views as u64);
    let expected = count
        .checked_mul(record)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format {
            offset: 16,
            message: format!("sample count {count} overflows"),
        })?;
    if expected != bytes.len() as u64 {
        return Err(Error::Format {
            offset: bytes.len().min(expected as usize) as u64,
            message: format!(
                "expected {expected} bytes for {count} samples, found {}",
                bytes.len()
            ),
        });
    }
    let has_labels = flags & FLAG_LABELS != 0;
    let n = count as usize;
    let mut features = Vec::with_capacity(n * dim * views);
    let mut labels = Vec::with_capacity(if has_labels { n } else { 0 });
    for _ in 0..n {
        let at = cur.offset();
        let label = cur.i32("label")?;
        if has_labels {
            if label < 0 {
                return Err(Error::Format {
                    offset: at,
                    message: format!("label {label} in a file flagged as labelled"),
                });
            }
            labels.push(label as u32);
        }
        cur.f32s_into(dim * views, &mut features, "features")?;
    }
    cur.expect_end()?;
    EmbeddingDataset::new(dim, views, features, has_labels.then_some(labels))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingDataset> {
    decode_embeddings(&binio::read_file(path)?)
}

pub fn write_embeddings(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_embeddings(ds))
}

/// Parameters of [`make_blobs`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub views: usize,
    pub center_scale: f64,
    pub within_std: f64,
    pub seed: u64,
}

/// Center radius for a separation ratio, measured as center norm over the
/// per-dimension within-class standard deviation.
pub fn center_scale_for_separation(ratio: f64, within_std: f64) -> f64 {
    ratio * within_std
}

/// Isotropic Gaussian blobs around centers drawn uniformly on a sphere of
/// radius `center_scale`. Samples are grouped by class.
pub fn make_blobs(spec: &BlobSpec) -> Result<EmbeddingDataset> {
    if spec.n_classes == 0 || spec.per_class == 0 || spec.dim == 0 || spec.views == 0 {
        return Err(Error::invalid("blob counts must be positive"));
    }
    if !(spec.within_std >= 0.0) || !(spec.center_scale >= 0.0) {
        return Err(Error::invalid("blob scales must be non-negative"));
    }
    let mut rng = crate::rng::derived(spec.seed, "blobs");
    let mut centers = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let mut c: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            c.iter_mut().for_each(|x| *x *= spec.center_scale / norm);
        }
        centers.push(c);
    }
    let mut features = Vec::with_capacity(spec.n_classes * spec.per_class * spec.views * spec.dim);
    let mut labels = Vec::with_capacity(spec.n_classes * spec.per_class);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            labels.push(k as u32);
            for _ in 0..spec.views {
                for &mu in center {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    features.push(mu + spec.within_std * noise);
                }
            }
        }
    }
    EmbeddingDataset::new(spec.dim, spec.views, features, Some(labels))
}

/// One task of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPart {
    /// Original class labels owned by this task.
    pub classes: Vec<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSplit {
    pub tasks: Vec<TaskPart>,
}

impl TaskSplit {
    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes.len()).collect()
    }
}

/// Per-task class counts: `⌈n/T⌉` for every task but the last, which takes the
/// remainder. When that would leave a task empty the classes are spread
/// evenly instead, extras going to the earliest tasks.
pub fn class_group_sizes(n_classes: usize, tasks: usize) -> Result<Vec<usize>> {
    if tasks == 0 {
        return Err(Error::invalid("need at least one task"));
    }
    if tasks > n_classes {
        return Err(Error::invalid(format!(
            "cannot split {n_classes} classes into {tasks} tasks"
        )));
    }
    let per = n_classes.div_ceil(tasks);
    if per * (tasks - 1) < n_classes {
        let mut sizes = vec![per; tasks - 1];
        sizes.push(n_classes - per * (tasks - 1));
        return Ok(sizes);
    }
    let (base, extra) = (n_classes / tasks, n_classes % tasks);
    Ok((0..tasks).map(|t| base + usize::from(t < extra)).collect())
}

fn distinct_classes(labels: &[u32]) -> Vec<u32> {
    labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

fn partition_classes(classes: &[u32], sizes: &[usize], seed: u64) -> Result<Vec<Vec<u32>>> {
    if sizes.iter().sum::<usize>() != classes.len() {
        return Err(Error::invalid(format!(
            "task class counts {sizes:?} do not sum to the {} classes present",
            classes.len()
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid("every task needs at least one class"));
    }
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(&mut crate::rng::derived(seed, "class-order"));
    let mut groups = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let mut g = shuffled[start..start + s].to_vec();
        g.sort_unstable();
        groups.push(g);
        start += s;
    }
    Ok(groups)
}

/// Splits one labelled dataset into `tasks` class-disjoint tasks, holding out
/// one fifth of every class as its test portion.
pub fn split_sequence(ds: &EmbeddingDataset, tasks: usize, seed: u64) -> Result<TaskSplit> {
    let labels = ds.require_labels("split_sequence")?;
    let classes = distinct_classes(labels);
    let sizes = class_group_sizes(classes.len(), tasks)?;
    split_sequence_with_sizes(ds, &sizes, seed)
}

pub fn split_sequence_with_sizes(ds: &EmbeddingDataset, sizes: &[usize], seed: u64) -> Result<TaskSplit> {
    let labels = ds.require_labels("split_sequence")?;
    let classes = distinct_classes(labels);
    let groups = partition_classes(&classes, sizes, seed)?;
    let mut rng = crate::rng::derived(seed, "holdout");
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut parts = Vec::with_capacity(groups.len());
    for group in groups {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in &group {
            let mut members = by_class[c].clone();
            members.shuffle(&mut rng);
            let n_test = members.len() / TEST_FRACTION_DENOM;
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        parts.push(TaskPart {
            classes: group,
            train,
            test,
        });
    }
    Ok(TaskSplit { tasks: parts })
}

/// Splits separate train and test datasets with one shared class partition;
/// `train` indices refer to `train_ds` and `test` indices to `test_ds`.
pub fn split_sequence_pair(
    train_ds: &EmbeddingDataset,
    test_ds: &EmbeddingDataset,
    sizes: Option<&[usize]>,
    tasks: usize,
    seed: u64,
) -> Result<TaskSplit> {
    let train_labels = train_ds.require_labels("split_sequence")?;
    let test_labels = test_ds.require_labels("evaluation")?;
    let classes = distinct_classes(train_labels);
    let sizes = match sizes {
        Some(s) => s.to_vec(),
        None => class_group_sizes(classes.len(), tasks)?,
    };
    let groups = partition_classes(&classes, &sizes, seed)?;
    let parts = groups
        .into_iter()
        .map(|group| {
            let owned: BTreeSet<u32> = group.iter().copied().collect();
            let pick = |labels: &[u32]| -> Vec<usize> {
                (0..labels.len()).filter(|&i| owned.contains(&labels[i])).collect()
            };
            TaskPart {
                train: pick(train_labels),
                test: pick(test_labels),
                classes: group,
            }
        })
        .collect();
    Ok(TaskSplit { tasks: parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blobs(n_classes: usize, per_class: usize, scale: f64, std: f64, seed: u64) -> EmbeddingDataset {
        make_blobs(&BlobSpec {
            n_classes,
            per_class,
            dim: 8,
            views: 2,
            center_scale: scale,
            within_std: std,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ds = blobs(3, 7, 4.0, 1.0, 1);
        // make values f32-representable so widening is lossless
        let f: Vec<f64> = ds.raw_features().iter().map(|&x| f64::from(x as f32)).collect();
        ds = EmbeddingDataset::new(8, 2, f, ds.labels().map(<[u32]>::to_vec)).unwrap();
        let back = decode_embeddings(&encode_embeddings(&ds)).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_embeddings(&back), encode_embeddings(&ds));
    }

    #[test]
    fn truncated_file_names_lengths() {
        let bytes = encode_embeddings(&blobs(2, 3, 1.0, 1.0, 2));
        let err = decode_embeddings(&bytes[..bytes.len() - 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("expected {} bytes", bytes.len())), "{msg}");
        assert!(msg.contains(&format!("found {}", bytes.len() - 5)), "{msg}");
        assert!(decode_embeddings(&bytes[..10]).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_embeddings(&blobs(2, 3, 1.0, 1.0, 2));
        bytes[4] = 2;
        let err = decode_embeddings(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");
        bytes[0] = b'N';
        assert!(matches!(
            decode_embeddings(&bytes).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));
    }

    #[test]
    fn unlabelled_flag_reads_as_absent() {
        let ds = blobs(2, 3, 1.0, 1.0, 2);
        let mut bytes = encode_embeddings(&ds);
        bytes[14] = 0;
        let back = decode_embeddings(&bytes).unwrap();
        assert!(back.labels().is_none());
        assert_eq!(back.len(), 6);
    }

    #[test]
    fn zero_std_blobs_sit_on_centers() {
        let ds = blobs(3, 4, 5.0, 0.0, 3);
        for i in 0..ds.len() {
            let first = ds.view(i - i % 4, 0);
            assert_eq!(ds.view(i, 0), first);
            assert_eq!(ds.view(i, 1), first);
            let norm = first.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_are_nearest_center_separable() {
        let ds = blobs(2, 2000, 8.0, 1.0, 4);
        let labels = ds.labels().unwrap();
        // oracle: class means as centers, nearest-center rule
        let mut centers = vec![vec![0.0; 8]; 2];
        for i in 0..ds.len() {
            for (c, x) in centers[labels[i] as usize].iter_mut().zip(ds.view(i, 0)) {
                *c += x / 2000.0;
            }
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let correct = (0..ds.len())
            .filter(|&i| {
                let pred = usize::from(dist(ds.view(i, 0), &centers[1]) < dist(ds.view(i, 0), &centers[0]));
                pred == labels[i] as usize
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.999);
    }

    #[test]
    fn blobs_are_reproducible() {
        assert_eq!(blobs(3, 5, 2.0, 1.0, 9), blobs(3, 5, 2.0, 1.0, 9));
        assert_ne!(blobs(3, 5, 2.0, 1.0, 9), blobs(3, 5, 2.0, 1.0, 10));
    }

    #[test]
    fn group_sizes_match_published_splits() {
        assert_eq!(class_group_sizes(100, 5).unwrap(), vec![20; 5]);
        assert_eq!(class_group_sizes(10, 2).unwrap(), vec![5, 5]);
        assert_eq!(class_group_sizes(683, 5).unwrap(), vec![137, 137, 137, 137, 135]);
        assert_eq!(class_group_sizes(683, 2).unwrap(), vec![342, 341]);
        assert_eq!(class_group_sizes(6, 4).unwrap(), vec![2, 2, 1, 1]);
        assert!(class_group_sizes(3, 4).is_err());
    }

    #[test]
    fn split_is_partition_with_holdout() {
        let ds = blobs(10, 10, 3.0, 1.0, 5);
        let split = split_sequence(&ds, 3, 0).unwrap();
        assert_eq!(split.class_counts(), vec![4, 4, 2]);
        let mut seen = vec![0usize; ds.len()];
        let labels = ds.labels().unwrap();
        for t in &split.tasks {
            assert_eq!(t.test.len(), t.classes.len() * 2);
            for &i in t.train.iter().chain(&t.test) {
                seen[i] += 1;
                assert!(t.classes.contains(&labels[i]));
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert!(split_sequence(&ds, 11, 0).is_err());
    }

    proptest! {
        #[test]
        fn msce_round_trip(
            dim in 1usize..9,
            views in 1usize..4,
            n in 0usize..12,
            labelled in any::<bool>(),
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let features: Vec<f64> = (0..n * dim * views)
                .map(|_| f64::from(rng.random_range(-1e3f32..1e3)))
                .collect();
            let labels = labelled.then(|| (0..n).map(|_| rng.random_range(0..50u32)).collect());
            let ds = EmbeddingDataset::new(dim, views, features, labels).unwrap();
            let bytes = encode_embeddings(&ds);
            prop_assert_eq!(bytes.len(), 24 + n * (4 + 4 * dim * views));
            let back = decode_embeddings(&bytes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(back.feature_digest(), ds.feature_digest());
        }

        #[test]
        fn split_partitions_classes(n_classes in 2usize..40, tasks in 1usize..6, seed in any::<u64>()) {
            prop_assume!(tasks <= n_classes);
            let labels: Vec<u32> = (0..n_classes as u32).flat_map(|c| [c, c, c]).collect();
            let ds = EmbeddingDataset::new(1, 1, vec![0.0; labels.len()], Some(labels)).unwrap();
            let split = split_sequence(&ds, tasks, seed).unwrap();
            let mut all: Vec<u32> = split.tasks.iter().flat_map(|t| t.classes.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n_classes as u32).collect::<Vec<_>>());
            prop_assert!(split.tasks.iter().all(|t| !t.classes.is_empty()));
        }
    }
}
