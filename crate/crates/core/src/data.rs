//! Synthetic multiple-instance datasets with known instance labels, binary
//! and JSON-lines persistence, and stratified splits.
//!
//! The labeling rule is the standard MIL assumption: a bag is negative iff
//! every instance is negative, otherwise its label is the positive class
//! present. The generator never mixes positive classes inside one bag; for
//! data loaded from files, a multi-positive bag is expected to carry the
//! largest positive class index present.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GPMB";
const FORMAT_VERSION: u32 = 1;

/// One bag: K instance feature vectors, a bag label, and optionally the
/// per-instance ground-truth labels (0 = negative/background).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBag {
    pub id: String,
    /// K x D feature matrix.
    pub features: Mat,
    pub bag_label: usize,
    pub instance_labels: Option<Vec<usize>>,
}

impl InstanceBag {
    pub fn n_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }
}

/// A labeled collection of bags with shared feature width and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bags: Vec<InstanceBag>,
    pub feat_dim: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Bags carrying a given label.
    pub fn class_count(&self, class: usize) -> usize {
        self.bags.iter().filter(|b| b.bag_label == class).count()
    }
}

/// Recipe for a synthetic dataset: Gaussian clusters per class, one shared
/// isotropic std, and a per-bag fraction of positive-class instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_bags: usize,
    /// Inclusive instance-count range per bag.
    pub k_range: (usize, usize),
    pub feat_dim: usize,
    pub n_classes: usize,
    /// One mean per class; index 0 is the negative/background cluster.
    pub class_means: Vec<Vec<f64>>,
    pub cluster_std: f64,
    /// Fraction of positive-cluster instances in a positive bag, drawn
    /// uniformly from this (inclusive) range.
    pub positive_fraction_range: (f64, f64),
    pub seed: u64,
}

impl SyntheticSpec {
    /// Cluster means on coordinate axes: class 0 at the origin, class c at
    /// separation * e_{c-1}.
    #[allow(clippy::too_many_arguments)]
    pub fn axis_separated(
        n_bags: usize,
        k_range: (usize, usize),
        feat_dim: usize,
        n_classes: usize,
        separation: f64,
        cluster_std: f64,
        positive_fraction_range: (f64, f64),
        seed: u64,
    ) -> SyntheticSpec {
        let mut class_means = vec![vec![0.0; feat_dim]];
        for c in 1..n_classes {
            let mut mean = vec![0.0; feat_dim];
            mean[(c - 1) % feat_dim] = separation;
            class_means.push(mean);
        }
        SyntheticSpec {
            n_bags,
            k_range,
            feat_dim,
            n_classes,
            class_means,
            cluster_std,
            positive_fraction_range,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_bags == 0 {
            return Err(Error::invalid("n_bags must be positive"));
        }
        if self.k_range.0 == 0 || self.k_range.0 > self.k_range.1 {
            return Err(Error::invalid("k_range must satisfy 1 <= min <= max"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.class_means.len() != self.n_classes {
            return Err(Error::invalid("one cluster mean per class required"));
        }
        for (c, mean) in self.class_means.iter().enumerate() {
            if mean.len() != self.feat_dim {
                return Err(Error::invalid(format!(
                    "cluster mean {c} has length {} but feat_dim is {}",
                    mean.len(),
                    self.feat_dim
                )));
            }
        }
        for a in 0..self.n_classes {
            for b in (a + 1)..self.n_classes {
                if self.class_means[a] == self.class_means[b] {
                    return Err(Error::invalid(format!(
                        "cluster means {a} and {b} coincide"
                    )));
                }
            }
        }
        if self.cluster_std <= 0.0 {
            return Err(Error::invalid("cluster_std must be positive"));
        }
        let (lo, hi) = self.positive_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(
                "positive_fraction_range must lie in (0, 1] with min <= max",
            ));
        }
        Ok(())
    }
}

/// Generate bags under the MIL labeling rule: class labels are assigned
/// round-robin (balanced within one), negative bags draw every instance from
/// cluster 0, and a class-c bag draws a sampled fraction (at least one
/// instance) from cluster c and the rest from cluster 0.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = StreamRng::new(spec.seed);
    let mut bags = Vec::with_capacity(spec.n_bags);
    for i in 0..spec.n_bags {
        let label = i % spec.n_classes;
        let k = spec.k_range.0 + rng.next_below(spec.k_range.1 - spec.k_range.0 + 1);
        let mut clusters = vec![0usize; k];
        if label > 0 {
            let (lo, hi) = spec.positive_fraction_range;
            let frac = rng.range_f64(lo, hi);
            let n_pos = ((frac * k as f64).round() as usize).clamp(1, k);
            for idx in rng.sample_indices(k, n_pos) {
                clusters[idx] = label;
            }
        }
        let features = Mat::from_fn(k, spec.feat_dim, |inst, d| {
            spec.class_means[clusters[inst]][d] + spec.cluster_std * rng.next_normal()
        });
        bags.push(InstanceBag {
            id: format!("bag-{i:05}"),
            features,
            bag_label: label,
            instance_labels: Some(clusters),
        });
    }
    let ds = Dataset {
        bags,
        feat_dim: spec.feat_dim,
        n_classes: spec.n_classes,
    };
    verify_mil_consistency(&ds)?;
    Ok(ds)
}

/// Exhaustively check the MIL labeling rule on every bag that carries
/// instance labels: the bag label is 0 iff all instance labels are 0,
/// otherwise it equals the largest positive class present.
pub fn verify_mil_consistency(ds: &Dataset) -> Result<()> {
    for (i, bag) in ds.bags.iter().enumerate() {
        if bag.bag_label >= ds.n_classes {
            return Err(Error::LabelOutOfRange {
                label: bag.bag_label,
                n_classes: ds.n_classes,
            });
        }
        if let Some(labels) = &bag.instance_labels {
            if labels.len() != bag.n_instances() {
                return Err(Error::Parse {
                    record: i,
                    message: "instance label count differs from instance count".into(),
                });
            }
            let max_positive = labels.iter().cloned().max().unwrap_or(0);
            if bag.bag_label != max_positive {
                return Err(Error::Parse {
                    record: i,
                    message: format!(
                        "bag label {} violates the MIL rule (max positive instance class {})",
                        bag.bag_label, max_positive
                    ),
                });
            }
        }
    }
    Ok(())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read, record: usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::Parse {
        record,
        message: format!("truncated u32: {e}"),
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, record: usize) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::Parse {
        record,
        message: format!("truncated u64: {e}"),
    })?;
    Ok(u64::from_le_bytes(buf))
}

/// Write the binary dataset format (features as little-endian f64 bits; the
/// round trip is exact).
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, ds.feat_dim as u32)?;
    write_u32(&mut w, ds.n_classes as u32)?;
    write_u64(&mut w, ds.bags.len() as u64)?;
    for bag in &ds.bags {
        write_u32(&mut w, bag.id.len() as u32)?;
        w.write_all(bag.id.as_bytes())?;
        write_u32(&mut w, bag.bag_label as u32)?;
        write_u32(&mut w, bag.n_instances() as u32)?;
        match &bag.instance_labels {
            Some(labels) => {
                w.write_all(&[1u8])?;
                for l in labels {
                    write_u32(&mut w, *l as u32)?;
                }
            }
            None => w.write_all(&[0u8])?,
        }
        for v in bag.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read the binary dataset format back; errors carry the bag ordinal.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Parse {
        record: 0,
        message: format!("missing header: {e}"),
    })?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            record: 0,
            message: "bad magic; not a dataset file".into(),
        });
    }
    let version = read_u32(&mut r, 0)?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            record: 0,
            message: format!("unsupported format version {version}"),
        });
    }
    let feat_dim = read_u32(&mut r, 0)? as usize;
    let n_classes = read_u32(&mut r, 0)? as usize;
    let n_bags = read_u64(&mut r, 0)? as usize;
    let mut bags = Vec::with_capacity(n_bags);
    for record in 0..n_bags {
        let id_len = read_u32(&mut r, record)? as usize;
        let mut id_buf = vec![0u8; id_len];
        r.read_exact(&mut id_buf).map_err(|e| Error::Parse {
            record,
            message: format!("truncated id: {e}"),
        })?;
        let id = String::from_utf8(id_buf).map_err(|_| Error::Parse {
            record,
            message: "bag id is not utf-8".into(),
        })?;
        let bag_label = read_u32(&mut r, record)? as usize;
        let k = read_u32(&mut r, record)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|e| Error::Parse {
            record,
            message: format!("truncated label flag: {e}"),
        })?;
        let instance_labels = if flag[0] == 1 {
            let mut labels = Vec::with_capacity(k);
            for _ in 0..k {
                labels.push(read_u32(&mut r, record)? as usize);
            }
            Some(labels)
        } else if flag[0] == 0 {
            None
        } else {
            return Err(Error::Parse {
                record,
                message: format!("invalid instance-label flag {}", flag[0]),
            });
        };
        if k == 0 {
            return Err(Error::Parse {
                record,
                message: "bag has no instances".into(),
            });
        }
        let mut data = Vec::with_capacity(k * feat_dim);
        let mut buf = [0u8; 8];
        for _ in 0..k * feat_dim {
            r.read_exact(&mut buf).map_err(|e| Error::Parse {
                record,
                message: format!("truncated features: {e}"),
            })?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::Parse {
                    record,
                    message: "non-finite feature value".into(),
                });
            }
            data.push(v);
        }
        bags.push(InstanceBag {
            id,
            features: Mat::from_vec(k, feat_dim, data),
            bag_label,
            instance_labels,
        });
    }
    Ok(Dataset {
        bags,
        feat_dim,
        n_classes,
    })
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    feat_dim: usize,
    n_classes: usize,
    n_bags: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonBag {
    id: String,
    bag_label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    instance_labels: Option<Vec<usize>>,
    features: Vec<Vec<f64>>,
}

/// JSON-lines variant of the dataset format, for debugging. One header
/// object, then one object per bag.
pub fn save_dataset_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = JsonHeader {
        feat_dim: ds.feat_dim,
        n_classes: ds.n_classes,
        n_bags: ds.bags.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serialize"))?;
    for bag in &ds.bags {
        let rec = JsonBag {
            id: bag.id.clone(),
            bag_label: bag.bag_label,
            instance_labels: bag.instance_labels.clone(),
            features: (0..bag.n_instances())
                .map(|i| bag.features.row(i).to_vec())
                .collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("serialize"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header_line = lines.next().ok_or_else(|| Error::Parse {
        record: 0,
        message: "empty file".into(),
    })??;
    let header: JsonHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        record: 0,
        message: format!("bad header: {e}"),
    })?;
    let mut bags = Vec::with_capacity(header.n_bags);
    for (record, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonBag = serde_json::from_str(&line).map_err(|e| Error::Parse {
            record,
            message: format!("bad bag record: {e}"),
        })?;
        let k = rec.features.len();
        let mut data = Vec::with_capacity(k * header.feat_dim);
        for row in &rec.features {
            if row.len() != header.feat_dim {
                return Err(Error::Parse {
                    record,
                    message: format!(
                        "feature row has {} entries, expected {}",
                        row.len(),
                        header.feat_dim
                    ),
                });
            }
            data.extend_from_slice(row);
        }
        bags.push(InstanceBag {
            id: rec.id,
            features: Mat::from_vec(k, header.feat_dim, data),
            bag_label: rec.bag_label,
            instance_labels: rec.instance_labels,
        });
    }
    if bags.len() != header.n_bags {
        return Err(Error::Parse {
            record: bags.len(),
            message: format!("expected {} bags, found {}", header.n_bags, bags.len()),
        });
    }
    Ok(Dataset {
        bags,
        feat_dim: header.feat_dim,
        n_classes: header.n_classes,
    })
}

/// Stratified split by bag label. Per-class counts follow the fractions by
/// largest remainder, with every nonzero-fraction part guaranteed at least
/// one bag per class; membership is a seeded shuffle.
pub fn split_dataset(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| *f < 0.0) {
        return Err(Error::invalid("split fractions must be non-negative"));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must sum to 1"));
    }
    let nonzero_parts = fr.iter().filter(|f| **f > 0.0).count();
    let mut rng = StreamRng::new(seed);
    let mut part_indices: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..ds.n_classes {
        let mut idx: Vec<usize> = (0..ds.len())
            .filter(|i| ds.bags[*i].bag_label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < nonzero_parts {
            return Err(Error::Stratification {
                class,
                available: idx.len(),
                needed: nonzero_parts,
            });
        }
        rng.shuffle(&mut idx);
        let n = idx.len();
        let mut counts = [0usize; 3];
        let mut residuals: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0usize;
        for p in 0..3 {
            let exact = fr[p] * n as f64;
            counts[p] = exact.floor() as usize;
            assigned += counts[p];
            residuals.push((p, exact - exact.floor()));
        }
        residuals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (p, _) in residuals.iter().take(n - assigned) {
            counts[*p] += 1;
        }
        // Guarantee support in every nonzero part, stealing from the largest.
        for p in 0..3 {
            while fr[p] > 0.0 && counts[p] == 0 {
                let donor = (0..3).max_by_key(|q| counts[*q]).unwrap();
                counts[donor] -= 1;
                counts[p] += 1;
            }
        }
        let mut cursor = 0usize;
        for p in 0..3 {
            part_indices[p].extend(idx[cursor..cursor + counts[p]].iter().copied());
            cursor += counts[p];
        }
    }
    let mut out = Vec::with_capacity(3);
    for indices in part_indices.iter_mut() {
        indices.sort_unstable();
        out.push(Dataset {
            bags: indices.iter().map(|i| ds.bags[*i].clone()).collect(),
            feat_dim: ds.feat_dim,
            n_classes: ds.n_classes,
        });
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n_bags: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec::axis_separated(n_bags, (5, 12), 4, 2, 3.0, 1.0, (0.2, 0.6), seed)
    }

    #[test]
    fn full_positive_fraction_labels_every_instance() {
        let mut spec = small_spec(6, 1);
        spec.positive_fraction_range = (1.0, 1.0);
        let ds = generate_synthetic(&spec).unwrap();
        for bag in ds.bags.iter().filter(|b| b.bag_label == 1) {
            for l in bag.instance_labels.as_ref().unwrap() {
                assert_eq!(*l, 1);
            }
        }
    }

    #[test]
    fn classes_balanced_within_one() {
        let ds = generate_synthetic(&small_spec(4, 2)).unwrap();
        assert_eq!(ds.class_count(0), 2);
        assert_eq!(ds.class_count(1), 2);
        let ds5 = generate_synthetic(&small_spec(5, 2)).unwrap();
        assert_eq!(ds5.class_count(0), 3);
        assert_eq!(ds5.class_count(1), 2);
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let a = generate_synthetic(&small_spec(20, 7)).unwrap();
        let b = generate_synthetic(&small_spec(20, 7)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.bags.iter().zip(&b.bags) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.bag_label, y.bag_label);
            assert_eq!(x.instance_labels, y.instance_labels);
            for (u, v) in x.features.data().iter().zip(y.features.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        verify_mil_consistency(&a).unwrap();
    }

    #[test]
    fn positive_bags_have_at_least_one_positive() {
        let mut spec = small_spec(30, 3);
        spec.positive_fraction_range = (0.01, 0.05);
        let ds = generate_synthetic(&spec).unwrap();
        for bag in ds.bags.iter().filter(|b| b.bag_label > 0) {
            let pos = bag
                .instance_labels
                .as_ref()
                .unwrap()
                .iter()
                .filter(|l| **l > 0)
                .count();
            assert!(pos >= 1);
        }
    }

    #[test]
    fn cluster_means_recovered() {
        let mut spec = small_spec(60, 11);
        spec.k_range = (30, 30);
        let ds = generate_synthetic(&spec).unwrap();
        // Pool positive-cluster instances and check the sample mean per
        // coordinate against mean_1 within 4 sigma / sqrt(n).
        let mut pooled: Vec<Vec<f64>> = Vec::new();
        for bag in &ds.bags {
            let labels = bag.instance_labels.as_ref().unwrap();
            for (i, l) in labels.iter().enumerate() {
                if *l == 1 {
                    pooled.push(bag.features.row(i).to_vec());
                }
            }
        }
        let n = pooled.len() as f64;
        for d in 0..spec.feat_dim {
            let mean = pooled.iter().map(|r| r[d]).sum::<f64>() / n;
            let expect = spec.class_means[1][d];
            let bound = 4.0 * spec.cluster_std / n.sqrt();
            assert!((mean - expect).abs() < bound, "dim {d}: {mean} vs {expect}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_spec(10, 1);
        s.positive_fraction_range = (0.0, 0.5);
        assert!(generate_synthetic(&s).is_err());
        let mut s = small_spec(10, 1);
        s.class_means[1] = s.class_means[0].clone();
        assert!(generate_synthetic(&s).is_err());
        let mut s = small_spec(10, 1);
        s.k_range = (0, 5);
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn binary_roundtrip_empty() {
        let dir = std::env::temp_dir().join("gpmil-data-test-empty");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.bags");
        let ds = Dataset {
            bags: vec![],
            feat_dim: 3,
            n_classes: 2,
        };
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn binary_roundtrip_single() {
        let dir = std::env::temp_dir().join("gpmil-data-test-single");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("one.bags");
        let ds = Dataset {
            bags: vec![InstanceBag {
                id: "only".into(),
                features: Mat::from_vec(1, 1, vec![0.1 + 0.2]),
                bag_label: 1,
                instance_labels: Some(vec![1]),
            }],
            feat_dim: 1,
            n_classes: 2,
        };
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(
            back.bags[0].features.get(0, 0).to_bits(),
            ds.bags[0].features.get(0, 0).to_bits()
        );
        assert_eq!(back, ds);
    }

    #[test]
    fn binary_roundtrip_is_byte_identical() {
        let dir = std::env::temp_dir().join("gpmil-data-test-hash");
        std::fs::create_dir_all(&dir).unwrap();
        let ds = generate_synthetic(&small_spec(50, 13)).unwrap();
        let p1 = dir.join("a.bags");
        let p2 = dir.join("b.bags");
        save_dataset(&ds, &p1).unwrap();
        let back = load_dataset(&p1).unwrap();
        save_dataset(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn jsonl_roundtrip_exact() {
        let dir = std::env::temp_dir().join("gpmil-data-test-jsonl");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.jsonl");
        let ds = generate_synthetic(&small_spec(8, 21)).unwrap();
        save_dataset_jsonl(&ds, &path).unwrap();
        let back = load_dataset_jsonl(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_file_reports_record() {
        let dir = std::env::temp_dir().join("gpmil-data-test-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.bags");
        let ds = generate_synthetic(&small_spec(4, 5)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn split_all_train() {
        let ds = generate_synthetic(&small_spec(10, 17)).unwrap();
        let (tr, va, te) = split_dataset(&ds, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(tr.len(), 10);
        assert_eq!(va.len(), 0);
        assert_eq!(te.len(), 0);
    }

    #[test]
    fn split_eight_one_one_per_class() {
        let ds = generate_synthetic(&small_spec(20, 19)).unwrap();
        let (tr, va, te) = split_dataset(&ds, (0.8, 0.1, 0.1), 2).unwrap();
        for class in 0..2 {
            assert_eq!(tr.class_count(class), 8);
            assert_eq!(va.class_count(class), 1);
            assert_eq!(te.class_count(class), 1);
        }
        // disjoint and exhaustive
        let mut ids: Vec<&str> = tr
            .bags
            .iter()
            .chain(&va.bags)
            .chain(&te.bags)
            .map(|b| b.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn split_is_deterministic() {
        let ds = generate_synthetic(&small_spec(30, 23)).unwrap();
        let a = split_dataset(&ds, (0.6, 0.2, 0.2), 9).unwrap();
        let b = split_dataset(&ds, (0.6, 0.2, 0.2), 9).unwrap();
        let ids = |d: &Dataset| d.bags.iter().map(|b| b.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.0), ids(&b.0));
        assert_eq!(ids(&a.1), ids(&b.1));
        assert_eq!(ids(&a.2), ids(&b.2));
    }

    #[test]
    fn split_rejects_undersized_class() {
        let mut ds = generate_synthetic(&small_spec(10, 29)).unwrap();
        ds.bags.retain(|b| b.bag_label == 0 || b.id == "bag-00001");
        assert!(matches!(
            split_dataset(&ds, (0.5, 0.25, 0.25), 3),
            Err(Error::Stratification { class: 1, .. })
        ));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = generate_synthetic(&small_spec(10, 31)).unwrap();
        assert!(split_dataset(&ds, (0.5, 0.5, 0.5), 1).is_err());
    }
}
