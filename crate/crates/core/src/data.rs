//! Synthetic labelled datasets and label-skew partitioning.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_vec, rng_from, TAG_PARTITION};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_labels: usize,
}

impl LabeledDataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::Data(format!("label {l} outside [0, {num_labels})")));
        }
        if let Some(d) = points.first().map(Vec::len) {
            if points.iter().any(|p| p.len() != d) {
                return Err(Error::Data("points have mixed dimensions".into()));
            }
        }
        Ok(Self {
            points,
            labels,
            num_labels,
        })
    }

    /// Fails if some label in `[0, num_labels)` has no points.
    pub fn require_all_labels(&self) -> Result<()> {
        let counts = self.label_counts();
        if let Some(l) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("label {l} has no points")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_labels];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_labels: self.num_labels,
        }
    }

    /// CSV with columns `x1..xd,label`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).chain(["label".into()]).collect();
        writeln!(out, "{}", header.join(","))?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            for v in p {
                write!(out, "{v},")?;
            }
            writeln!(out, "{l}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty dataset file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.last() != Some(&"label") {
            return Err(Error::Data("last column must be `label`".into()));
        }
        let d = cols.len() - 1;
        let (mut points, mut labels) = (Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Data(format!("row {}: expected {} fields", n + 2, d + 1)));
            }
            let bad = || Error::Data(format!("row {}: unparsable field", n + 2));
            let p = fields[..d]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            points.push(p);
            labels.push(fields[d].parse::<usize>().map_err(|_| bad())?);
        }
        let num_labels = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(points, labels, num_labels)
    }
}

/// `m` centres evenly spaced on a circle of the given radius.
pub fn circle_centers(m: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Isotropic Gaussian mixture with equal component counts; the remainder
/// goes to the lowest labels. Points are ordered by label.
pub fn make_gaussian_mixture(n: usize, centers: &[Vec<f64>], std: f64, seed: u64) -> Result<LabeledDataset> {
    if centers.is_empty() {
        return Err(Error::Argument("mixture needs at least one centre".into()));
    }
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Argument(format!("std must be positive, got {std}")));
    }
    if n < centers.len() {
        return Err(Error::Argument(format!(
            "{n} points cannot cover {} components",
            centers.len()
        )));
    }
    let m = centers.len();
    let d = centers[0].len();
    if centers.iter().any(|c| c.len() != d) {
        return Err(Error::Argument("centres have mixed dimensions".into()));
    }
    let mut rng = rng_from(seed);
    let (mut points, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (l, c) in centers.iter().enumerate() {
        let count = n / m + usize::from(l < n % m);
        for _ in 0..count {
            let z = normal_vec(&mut rng, d);
            points.push(c.iter().zip(&z).map(|(ci, zi)| ci + std * zi).collect());
            labels.push(l);
        }
    }
    LabeledDataset::new(points, labels, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Skew(u32),
    NonIid,
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionMode::Iid => f.write_str("iid"),
            PartitionMode::Skew(l) => write!(f, "skew{l}"),
            PartitionMode::NonIid => f.write_str("non_iid"),
        }
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    /// Accepts `iid`, `non_iid`, a bare skew level (`3`) or `skew3`/`skew:3`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "iid" => return Ok(PartitionMode::Iid),
            "non_iid" | "noniid" => return Ok(PartitionMode::NonIid),
            _ => {}
        }
        let level = s.strip_prefix("skew").map(|r| r.trim_start_matches(':')).unwrap_or(s);
        match level.parse::<u32>() {
            Ok(l) if l >= 1 => Ok(PartitionMode::Skew(l)),
            _ => Err(Error::Config(format!("unknown partition mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub parts: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 {
            return Err(Error::Config("partition count must be >= 1".into()));
        }
        if let PartitionMode::Skew(l) = self.mode {
            if !(1..=62).contains(&l) {
                return Err(Error::Config(format!("skew level {l} outside 1..=62")));
            }
        }
        Ok(())
    }
}

/// Per-label counts handed to each partition under a skew level:
/// `⌊N_l / (S + K − 1)⌋` for the first `K − 1`, the rest to the last one,
/// with `S = 2^(level − 1)`.
pub fn skew_counts(n_label: usize, parts: usize, level: u32) -> Vec<usize> {
    let s = 1usize << (level - 1);
    let base = n_label / (s + parts - 1);
    let mut c = vec![base; parts];
    c[parts - 1] = n_label - (parts - 1) * base;
    c
}

/// Shard membership as sorted point indices, one list per partition.
pub fn partition_indices(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let k = spec.parts;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); data.num_labels];
    for (i, &l) in data.labels.iter().enumerate() {
        by_label[l].push(i);
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    match spec.mode {
        PartitionMode::NonIid => {
            if data.num_labels < k {
                return Err(Error::Config(format!(
                    "non_iid partitioning needs at least as many labels ({}) as partitions ({k})",
                    data.num_labels
                )));
            }
            for (l, idx) in by_label.into_iter().enumerate() {
                shards[l % k].extend(idx);
            }
        }
        PartitionMode::Iid | PartitionMode::Skew(_) => {
            let mut cursor = 0;
            for (l, mut idx) in by_label.into_iter().enumerate() {
                let mut rng = rng_from(derive_seed(spec.seed, &[TAG_PARTITION, l as u64]));
                idx.shuffle(&mut rng);
                let counts = match spec.mode {
                    PartitionMode::Skew(level) => skew_counts(idx.len(), k, level),
                    _ => {
                        let mut c = vec![idx.len() / k; k];
                        for _ in 0..idx.len() % k {
                            c[cursor] += 1;
                            cursor = (cursor + 1) % k;
                        }
                        c
                    }
                };
                let mut start = 0;
                for (p, c) in counts.into_iter().enumerate() {
                    shards[p].extend_from_slice(&idx[start..start + c]);
                    start += c;
                }
            }
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

pub fn partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    Ok(partition_indices(data, spec)?
        .iter()
        .map(|idx| data.subset(idx))
        .collect())
}

/// Shard assignment CSV with columns `point_index,partition`.
pub fn write_assignment_csv<W: Write>(shards: &[Vec<usize>], mut out: W) -> Result<()> {
    let mut rows: Vec<(usize, usize)> = shards
        .iter()
        .enumerate()
        .flat_map(|(p, idx)| idx.iter().map(move |&i| (i, p)))
        .collect();
    rows.sort_unstable();
    writeln!(out, "point_index,partition")?;
    for (i, p) in rows {
        writeln!(out, "{i},{p}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewStats {
    /// `histograms[p][l]` = points of label `l` in partition `p`.
    pub histograms: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
    /// Largest over smallest shard size.
    pub size_ratio: f64,
}

pub fn skew_stats(shards: &[LabeledDataset]) -> Result<SkewStats> {
    if shards.is_empty() {
        return Err(Error::Argument("no shards".into()));
    }
    let histograms: Vec<Vec<usize>> = shards.iter().map(LabeledDataset::label_counts).collect();
    let sizes: Vec<usize> = shards.iter().map(LabeledDataset::len).collect();
    let max = *sizes.iter().max().expect("non-empty");
    let min = *sizes.iter().min().expect("non-empty");
    let size_ratio = if min == 0 { f64::INFINITY } else { max as f64 / min as f64 };
    Ok(SkewStats {
        histograms,
        sizes,
        size_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labelled(per_label: &[usize]) -> LabeledDataset {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (l, &n) in per_label.iter().enumerate() {
            for i in 0..n {
                points.push(vec![i as f64, l as f64]);
                labels.push(l);
            }
        }
        LabeledDataset::new(points, labels, per_label.len()).unwrap()
    }

    #[test]
    fn mixture_counts_and_order() {
        let d = make_gaussian_mixture(8, &circle_centers(4, 1.0), 0.1, 1).unwrap();
        assert_eq!(d.label_counts(), vec![2, 2, 2, 2]);
        let d = make_gaussian_mixture(10, &circle_centers(4, 1.0), 0.1, 1).unwrap();
        assert_eq!(d.label_counts(), vec![3, 3, 2, 2]);
        assert!(make_gaussian_mixture(10, &[], 0.1, 1).is_err());
        assert!(make_gaussian_mixture(10, &circle_centers(4, 1.0), 0.0, 1).is_err());
    }

    #[test]
    fn mixture_tiny_std_hits_centres() {
        let c = circle_centers(3, 2.0);
        let d = make_gaussian_mixture(30, &c, 1e-12, 3).unwrap();
        for (p, &l) in d.points.iter().zip(&d.labels) {
            for (a, b) in p.iter().zip(&c[l]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mixture_component_means() {
        let c = circle_centers(4, 1.0);
        let std = 0.3;
        let d = make_gaussian_mixture(20_000, &c, std, 8).unwrap();
        for l in 0..4 {
            let pts: Vec<&Vec<f64>> = d.points.iter().zip(&d.labels).filter(|(_, &x)| x == l).map(|(p, _)| p).collect();
            let tol = 3.0 * std / (pts.len() as f64).sqrt();
            for k in 0..2 {
                let m = pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64;
                assert!((m - c[l][k]).abs() <= tol, "label {l} dim {k}: {m}");
            }
        }
        assert_eq!(d, make_gaussian_mixture(20_000, &c, std, 8).unwrap());
    }

    #[test]
    fn skew_formula_examples() {
        assert_eq!(skew_counts(5000, 10, 1), vec![500; 10]);
        let c = skew_counts(5000, 10, 3);
        assert_eq!(&c[..9], &[384; 9]);
        assert_eq!(c[9], 1544);
    }

    #[test]
    fn skew_partition_counts_and_share() {
        let data = labelled(&[5000; 10]);
        let spec = PartitionSpec { parts: 10, mode: PartitionMode::Skew(3), seed: 2 };
        let shards = partition(&data, &spec).unwrap();
        let stats = skew_stats(&shards).unwrap();
        for l in 0..10 {
            for p in 0..9 {
                assert_eq!(stats.histograms[p][l], 384);
            }
            assert_eq!(stats.histograms[9][l], 1544);
            assert_eq!(stats.histograms[9][l] as f64 / 5000.0, 1544.0 / 5000.0);
        }
    }

    #[test]
    fn non_iid_assigns_whole_labels() {
        let data = labelled(&[7, 5, 9, 3]);
        let spec = PartitionSpec { parts: 4, mode: PartitionMode::NonIid, seed: 0 };
        let shards = partition(&data, &spec).unwrap();
        for (i, s) in shards.iter().enumerate() {
            assert!(s.labels.iter().all(|&l| l == i));
            assert_eq!(s.len(), data.label_counts()[i]);
        }
        let stats = skew_stats(&shards).unwrap();
        assert!(stats.histograms.iter().all(|h| h.iter().filter(|&&c| c > 0).count() == 1));

        let spec = PartitionSpec { parts: 5, mode: PartitionMode::NonIid, seed: 0 };
        assert!(matches!(partition(&data, &spec), Err(Error::Config(_))));

        let data = labelled(&[2, 2, 2, 2, 2]);
        let spec = PartitionSpec { parts: 2, mode: PartitionMode::NonIid, seed: 0 };
        let shards = partition(&data, &spec).unwrap();
        assert_eq!(shards[0].label_counts(), vec![2, 0, 2, 0, 2]);
    }

    #[test]
    fn iid_is_balanced() {
        let data = labelled(&[13, 7, 22]);
        let spec = PartitionSpec { parts: 4, mode: PartitionMode::Iid, seed: 5 };
        let shards = partition(&data, &spec).unwrap();
        let stats = skew_stats(&shards).unwrap();
        let max = *stats.sizes.iter().max().unwrap();
        let min = *stats.sizes.iter().min().unwrap();
        assert!(max - min <= 1);
        for h in &stats.histograms {
            for (l, &c) in h.iter().enumerate() {
                let n = data.label_counts()[l];
                assert!(c == n / 4 || c == n / 4 + 1);
            }
        }
        let data = labelled(&[100; 4]);
        let shards = partition(&data, &PartitionSpec { parts: 5, mode: PartitionMode::Iid, seed: 1 }).unwrap();
        assert_eq!(skew_stats(&shards).unwrap().size_ratio, 1.0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("iid".parse::<PartitionMode>().unwrap(), PartitionMode::Iid);
        assert_eq!("non_iid".parse::<PartitionMode>().unwrap(), PartitionMode::NonIid);
        assert_eq!("3".parse::<PartitionMode>().unwrap(), PartitionMode::Skew(3));
        assert_eq!("skew5".parse::<PartitionMode>().unwrap(), PartitionMode::Skew(5));
        assert_eq!("skew:2".parse::<PartitionMode>().unwrap(), PartitionMode::Skew(2));
        assert!("0".parse::<PartitionMode>().is_err());
        assert!("banana".parse::<PartitionMode>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = make_gaussian_mixture(12, &circle_centers(3, 1.0), 0.2, 4).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"x1,x2,label\n"));
        let back = LabeledDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);

        let shards = partition_indices(&d, &PartitionSpec { parts: 2, mode: PartitionMode::Iid, seed: 0 }).unwrap();
        let mut out = Vec::new();
        write_assignment_csv(&shards, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.starts_with("point_index,partition\n0,"));
    }

    proptest! {
        #[test]
        fn partitions_conserve_points(
            per_label in prop::collection::vec(1usize..60, 1..8),
            parts in 1usize..8,
            mode_pick in 0u32..6,
            seed in any::<u64>(),
        ) {
            let data = labelled(&per_label);
            let mode = match mode_pick {
                0 => PartitionMode::Iid,
                1 => PartitionMode::NonIid,
                l => PartitionMode::Skew(l - 1),
            };
            let spec = PartitionSpec { parts, mode, seed };
            let res = partition_indices(&data, &spec);
            if mode == PartitionMode::NonIid && per_label.len() < parts {
                prop_assert!(res.is_err());
                return Ok(());
            }
            let shards = res.unwrap();
            prop_assert_eq!(shards.len(), parts);
            let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
            prop_assert_eq!(&shards, &partition_indices(&data, &spec).unwrap());
            if let PartitionMode::Skew(level) = mode {
                let s = 1usize << (level - 1);
                for (l, &n) in per_label.iter().enumerate() {
                    for (p, shard) in shards.iter().enumerate() {
                        let c = shard.iter().filter(|&&i| data.labels[i] == l).count();
                        let want = if p + 1 < parts { n / (s + parts - 1) } else { n - (parts - 1) * (n / (s + parts - 1)) };
                        prop_assert_eq!(c, want);
                    }
                }
            }
        }
    }
}
