//! Quantile binning with boundary-closeness flags, holdout splits and
//! cross-validation fold plans.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Number of quantile bins.
pub const NUM_BINS: usize = 4;

/// Fraction of a bin's value span, at either end, that counts as close to the
/// neighbouring bin.
pub const CLOSENESS_FRACTION: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("metric `{metric}` has {distinct} distinct finite values; {NUM_BINS} are required")]
    Degenerate { metric: String, distinct: usize },
    #[error("split: {0}")]
    Split(String),
    #[error("fold plan: {0}")]
    Plan(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub metric: String,
    /// Interior edges, non-decreasing.
    pub edges: [f64; 3],
    pub min: f64,
    pub max: f64,
}

impl BinEdges {
    /// Value span `[a, b)` of `bin` (the top bin is closed).
    pub fn span(&self, bin: usize) -> (f64, f64) {
        let bounds = [self.min, self.edges[0], self.edges[1], self.edges[2], self.max];
        (bounds[bin], bounds[bin + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Closeness {
    None,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAssignment {
    pub owner: String,
    pub bin: usize,
    pub closeness: Closeness,
    pub value: f64,
}

impl BinAssignment {
    /// Adjacent bin this value is close to, if any.
    pub fn neighbor(&self) -> Option<usize> {
        match self.closeness {
            Closeness::None => None,
            Closeness::Lower => self.bin.checked_sub(1),
            Closeness::Upper => Some(self.bin + 1),
        }
    }
}

/// Quartile edges using linear interpolation between order statistics
/// (position `p * (n - 1)` in the sorted values).
pub fn quantile_edges(metric: &str, values: &[f64]) -> Result<BinEdges, LabelError> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < NUM_BINS || sorted.len() != values.len() {
        return Err(LabelError::Degenerate {
            metric: metric.to_string(),
            distinct: distinct.len(),
        });
    }
    let n = sorted.len();
    let quantile = |p: f64| {
        let h = p * (n - 1) as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let frac = h - lo as f64;
        if frac == 0.0 {
            sorted[lo]
        } else {
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    };
    Ok(BinEdges {
        metric: metric.to_string(),
        edges: [quantile(0.25), quantile(0.5), quantile(0.75)],
        min: sorted[0],
        max: sorted[n - 1],
    })
}

/// Assigns `value` to a bin over half-open intervals `[min, e1)`, `[e1, e2)`,
/// `[e2, e3)`, `[e3, max]` and flags values in the outer tenth of their bin's
/// span as close to the adjacent bin. Values outside `[min, max]` clamp to the
/// end bins without a closeness flag.
pub fn assign_bin(owner: &str, value: f64, edges: &BinEdges) -> BinAssignment {
    let make = |bin, closeness| BinAssignment {
        owner: owner.to_string(),
        bin,
        closeness,
        value,
    };
    if value < edges.min {
        return make(0, Closeness::None);
    }
    if value > edges.max {
        return make(NUM_BINS - 1, Closeness::None);
    }
    let bin = edges.edges.iter().take_while(|&&e| value >= e).count();
    let (a, b) = edges.span(bin);
    let width = b - a;
    let closeness = if bin + 1 < NUM_BINS && value > b - CLOSENESS_FRACTION * width {
        Closeness::Upper
    } else if bin > 0 && value < a + CLOSENESS_FRACTION * width {
        Closeness::Lower
    } else {
        Closeness::None
    };
    make(bin, closeness)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    /// A seeded random fraction of clusters is held out.
    Random { fraction_percent: u32 },
    /// Every cluster of one country is held out.
    CountryHoldout { country: String },
}

impl SplitKind {
    pub fn random30() -> Self {
        SplitKind::Random { fraction_percent: 30 }
    }

    pub fn label(&self) -> String {
        match self {
            SplitKind::Random { fraction_percent } => format!("random{fraction_percent}"),
            SplitKind::CountryHoldout { country } => format!("country_holdout:{country}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMember {
    pub id: String,
    pub country: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub kind: SplitKind,
    pub seed: u64,
}

/// Minimum cluster count for a random holdout.
pub const MIN_RANDOM_SPLIT: usize = 10;

pub fn make_split(members: &[SplitMember], kind: SplitKind, seed: u64) -> Result<Split, LabelError> {
    let mut ids: Vec<&SplitMember> = members.iter().collect();
    ids.sort_by(|a, b| a.id.cmp(&b.id));
    let (mut train, mut validation): (Vec<String>, Vec<String>) = match &kind {
        SplitKind::Random { fraction_percent } => {
            if ids.len() < MIN_RANDOM_SPLIT {
                return Err(LabelError::Split(format!(
                    "random holdout needs at least {MIN_RANDOM_SPLIT} clusters, got {}",
                    ids.len()
                )));
            }
            let n_val = (f64::from(*fraction_percent) / 100.0 * ids.len() as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
            let val = ids[..n_val].iter().map(|m| m.id.clone()).collect();
            let train = ids[n_val..].iter().map(|m| m.id.clone()).collect();
            (train, val)
        }
        SplitKind::CountryHoldout { country } => {
            let (val, train): (Vec<&SplitMember>, Vec<&SplitMember>) =
                ids.into_iter().partition(|m| &m.country == country);
            (
                train.into_iter().map(|m| m.id.clone()).collect(),
                val.into_iter().map(|m| m.id.clone()).collect(),
            )
        }
    };
    if train.is_empty() || validation.is_empty() {
        return Err(LabelError::Split(format!(
            "{} split leaves an empty side ({} train, {} validation)",
            kind.label(),
            train.len(),
            validation.len()
        )));
    }
    train.sort();
    validation.sort();
    Ok(Split {
        train,
        validation,
        kind,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldMode {
    Random,
    Spatial,
}

impl FoldMode {
    pub fn label(self) -> &'static str {
        match self {
            FoldMode::Random => "random",
            FoldMode::Spatial => "spatial",
        }
    }
}

/// A located cluster, the input to fold planning.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

impl From<&crate::survey::ClusterRecord> for Site {
    fn from(r: &crate::survey::ClusterRecord) -> Self {
        Site {
            id: r.cluster_id.clone(),
            lat: r.lat,
            lon: r.lon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub mode: FoldMode,
    /// Disjoint cluster-id sets, each sorted.
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Fold index of every cluster id.
    pub fn fold_of(&self) -> BTreeMap<&str, usize> {
        self.folds
            .iter()
            .enumerate()
            .flat_map(|(f, ids)| ids.iter().map(move |id| (id.as_str(), f)))
            .collect()
    }

    /// SHA-256 over the canonical fold listing.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.mode.label().as_bytes());
        h.update(self.seed.to_le_bytes());
        for (i, f) in self.folds.iter().enumerate() {
            for id in f {
                h.update(format!("{i}:{id}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Default number of outer folds.
pub const DEFAULT_FOLDS: usize = 5;

/// Partitions `sites` into `k` folds.
///
/// Random plans deal a seeded shuffle round-robin. Spatial plans run seeded
/// k-means (best of several k-means++ restarts) on `(lat, lon * cos(mean
/// lat))`, then move clusters from over-full to under-full folds, nearest to
/// the receiving centroid first, until sizes differ by at most one.
pub fn make_fold_plan(sites: &[Site], mode: FoldMode, k: usize, seed: u64) -> Result<FoldPlan, LabelError> {
    if k == 0 || sites.len() < k {
        return Err(LabelError::Plan(format!(
            "{} clusters cannot fill {k} folds",
            sites.len()
        )));
    }
    let mut uniq = HashSet::new();
    if let Some(dup) = sites.iter().find(|s| !uniq.insert(s.id.as_str())) {
        return Err(LabelError::Plan(format!("duplicate cluster id {}", dup.id)));
    }
    let mut sorted: Vec<&Site> = sites.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment: Vec<usize> = match mode {
        FoldMode::Random => {
            let mut order: Vec<usize> = (0..sorted.len()).collect();
            order.shuffle(&mut rng);
            let mut a = vec![0; sorted.len()];
            for (pos, &i) in order.iter().enumerate() {
                a[i] = pos % k;
            }
            a
        }
        FoldMode::Spatial => {
            let mean_lat = sorted.iter().map(|s| s.lat).sum::<f64>() / sorted.len() as f64;
            let scale = mean_lat.to_radians().cos();
            let pts: Vec<[f64; 2]> = sorted.iter().map(|s| [s.lat, s.lon * scale]).collect();
            spatial_assignment(&pts, k, &mut rng)
        }
    };
    let mut folds = vec![Vec::new(); k];
    for (site, f) in sorted.iter().zip(assignment) {
        folds[f].push(site.id.clone());
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldPlan { mode, folds, seed })
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 200;

fn spatial_assignment(pts: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>, Vec<[f64; 2]>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (inertia, labels, centers) = kmeans(pts, k, rng);
        if best.as_ref().is_none_or(|(b, _, _)| inertia < *b) {
            best = Some((inertia, labels, centers));
        }
    }
    let (_, mut labels, centers) = best.expect("at least one restart");
    balance(pts, &centers, &mut labels, k);
    labels
}

fn kmeans(pts: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>, Vec<[f64; 2]>) {
    let n = pts.len();
    // k-means++ seeding
    let mut centers = vec![pts[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = pts.iter().map(|p| dist2(*p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[next]);
        for (i, p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(dist2(*p, pts[next]));
        }
    }
    let nearest = |p: [f64; 2], centers: &[[f64; 2]]| {
        (0..centers.len())
            .min_by(|&a, &b| dist2(p, centers[a]).total_cmp(&dist2(p, centers[b])))
            .unwrap()
    };
    let mut labels: Vec<usize> = pts.iter().map(|p| nearest(*p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in pts.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            } else {
                // re-seed an empty cluster at the point farthest from its centre
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(pts[a], centers[labels[a]]).total_cmp(&dist2(pts[b], centers[labels[b]]))
                    })
                    .unwrap();
                centers[c] = pts[far];
                labels[far] = c;
            }
        }
        let next: Vec<usize> = pts.iter().map(|p| nearest(*p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = pts.iter().zip(&labels).map(|(p, &l)| dist2(*p, centers[l])).sum();
    (inertia, labels, centers)
}

fn balance(pts: &[[f64; 2]], centers: &[[f64; 2]], labels: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let big = (0..k).max_by_key(|&f| (sizes[f], std::cmp::Reverse(f))).unwrap();
        let small = (0..k).min_by_key(|&f| (sizes[f], f)).unwrap();
        if sizes[big] - sizes[small] <= 1 {
            return;
        }
        let mover = (0..pts.len())
            .filter(|&i| labels[i] == big)
            .min_by(|&a, &b| dist2(pts[a], centers[small]).total_cmp(&dist2(pts[b], centers[small])))
            .expect("over-full fold is non-empty");
        labels[mover] = small;
    }
}

/// Writes the split (and optionally a fold plan over its training side) as
/// `cluster_id,role,fold` with the seed in a leading comment line.
pub fn write_plan_csv(path: &Path, split: &Split, plan: Option<&FoldPlan>) -> Result<(), LabelError> {
    let io = |e: std::io::Error| LabelError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let plan_note = plan.map_or(String::new(), |p| format!(" folds={} fold_seed={}", p.mode.label(), p.seed));
    writeln!(out, "# seed={} split={}{}", split.seed, split.kind.label(), plan_note).map_err(io)?;
    writeln!(out, "cluster_id,role,fold").map_err(io)?;
    let fold_of = plan.map(FoldPlan::fold_of).unwrap_or_default();
    let mut rows: Vec<(&str, &str)> = split
        .train
        .iter()
        .map(|id| (id.as_str(), "train"))
        .chain(split.validation.iter().map(|id| (id.as_str(), "validation")))
        .collect();
    rows.sort();
    let mut w = csv::Writer::from_writer(out);
    for (id, role) in rows {
        let fold = fold_of.get(id).map_or(String::new(), |f| f.to_string());
        w.write_record([id, role, fold.as_str()]).map_err(|e| LabelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(io)
}

/// Reads back `(cluster_id, role, fold)` rows written by [`write_plan_csv`].
pub fn read_plan_csv(path: &Path) -> Result<Vec<(String, String, Option<usize>)>, LabelError> {
    let err = |message: String| LabelError::Io {
        path: path.display().to_string(),
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let fold = match rec.get(2).unwrap_or("") {
            "" => None,
            f => Some(f.parse().map_err(|_| err(format!("bad fold {f:?}")))?),
        };
        out.push((rec.get(0).unwrap_or("").to_string(), rec.get(1).unwrap_or("").to_string(), fold));
    }
    Ok(out)
}
