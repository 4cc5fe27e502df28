//! Shared queries and per-proposal key mining.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::partition::{BoundarySet, DistanceField, Lattice, Loc, Partition, PartitionSource};

/// Keys at squared distance at most this from the GT boundary are hard.
pub const HARD_DISTANCE_SQUARED: usize = 2;

/// Projected features `Z`, one `channels`-vector per lattice location.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedMap {
    pub lattice: Lattice,
    pub channels: usize,
    /// `H·W × C`, row-major over locations.
    pub data: Vec<f32>,
}

impl ProjectedMap {
    pub fn new(lattice: Lattice, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != lattice.len() * channels {
            return Err(Error::Shape(format!(
                "projected map has {} values, expected {}",
                data.len(),
                lattice.len() * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("projected map has non-finite values".into()));
        }
        Ok(ProjectedMap {
            lattice,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, loc: Loc) -> &[f32] {
        let i = self.lattice.index(loc) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Mean feature over a set of locations, accumulated in f64.
    pub fn mean_over(&self, locs: &[Loc]) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.channels];
        for &l in locs {
            for (a, &v) in acc.iter_mut().zip(self.at(l)) {
                *a += v as f64;
            }
        }
        let n = locs.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Key vectors together with the locations they were read from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyList {
    pub locs: Vec<Loc>,
    pub vecs: Vec<Vec<f32>>,
}

impl KeyList {
    fn gather(z: &ProjectedMap, mut locs: Vec<Loc>) -> Self {
        locs.sort_unstable();
        let vecs = locs.iter().map(|&l| z.at(l).to_vec()).collect();
        KeyList { locs, vecs }
    }

    pub fn len(&self) -> usize {
        self.locs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locs.is_empty()
    }
}

/// The four key collections of one proposal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeySets {
    pub fg_easy: KeyList,
    pub fg_hard: KeyList,
    pub bg_easy: KeyList,
    pub bg_hard: KeyList,
}

impl KeySets {
    pub fn total(&self) -> usize {
        self.fg_easy.len() + self.fg_hard.len() + self.bg_easy.len() + self.bg_hard.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedQueries {
    pub q_fg: Vec<f32>,
    pub q_bg: Vec<f32>,
    pub n_contributing: usize,
}

/// Foreground and background queries: the average over proposals of each
/// proposal's mean foreground (background) feature.
pub fn compute_shared_queries(batch: &[(&ProjectedMap, &Partition)]) -> Result<SharedQueries> {
    let (first, _) = batch.first().ok_or(Error::EmptyBatch)?;
    let c = first.channels;
    let mut fg = vec![0.0f64; c];
    let mut bg = vec![0.0f64; c];
    for (z, p) in batch {
        if z.channels != c || z.lattice != p.lattice {
            return Err(Error::Shape("batch maps disagree in shape".into()));
        }
        if p.fg.is_empty() || p.bg.is_empty() {
            return Err(Error::EmptyPartitionSide {
                side: if p.fg.is_empty() { "foreground" } else { "background" },
            });
        }
        for (a, m) in fg.iter_mut().zip(z.mean_over(&p.fg)) {
            *a += m;
        }
        for (a, m) in bg.iter_mut().zip(z.mean_over(&p.bg)) {
            *a += m;
        }
    }
    let n = batch.len() as f64;
    Ok(SharedQueries {
        q_fg: fg.iter().map(|v| (v / n) as f32).collect(),
        q_bg: bg.iter().map(|v| (v / n) as f32).collect(),
        n_contributing: batch.len(),
    })
}

/// Per-proposal queries (no sharing): the proposal's own fg/bg means.
pub fn individual_queries(z: &ProjectedMap, p: &Partition) -> Result<SharedQueries> {
    compute_shared_queries(&[(z, p)])
}

/// Number of locations [`sample_subset`] draws from a set of size `n`.
pub fn sample_count(n: usize, sigma: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((sigma * n as f64).round() as usize).clamp(1, n)
    }
}

/// Uniform sample without replacement of `max(1, round(σ·n))` locations,
/// returned in the input order.
pub fn sample_subset<R: Rng + ?Sized>(locations: &[Loc], sigma: f64, rng: &mut R) -> Vec<Loc> {
    let k = sample_count(locations.len(), sigma);
    if k == 0 {
        return Vec::new();
    }
    let mut idx = rand::seq::index::sample(rng, locations.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| locations[i]).collect()
}

/// Boundary-guided mining for proposals partitioned by a GT mask.
pub fn mine_keys_base<R: Rng + ?Sized>(
    z: &ProjectedMap,
    partition: &Partition,
    boundary: &BoundarySet,
    sigma: f64,
    rng: &mut R,
) -> Result<KeySets> {
    if partition.source != PartitionSource::GtMask {
        return Err(Error::Config(
            "boundary mining requires a ground-truth partition".into(),
        ));
    }
    if boundary.locations.is_empty() {
        return Err(Error::SingleValuedMask);
    }
    if z.lattice != partition.lattice || boundary.lattice != partition.lattice {
        return Err(Error::Shape("map, partition and boundary lattices differ".into()));
    }
    let field = DistanceField::new(boundary);
    let split = |locs: Vec<Loc>| -> (Vec<Loc>, Vec<Loc>) {
        locs.into_iter()
            .partition(|&l| field.get(l) <= HARD_DISTANCE_SQUARED)
    };
    let (fg_hard, fg_easy) = split(sample_subset(&partition.fg, sigma, rng));
    let (bg_hard, bg_easy) = split(sample_subset(&partition.bg, sigma, rng));
    Ok(KeySets {
        fg_easy: KeyList::gather(z, fg_easy),
        fg_hard: KeyList::gather(z, fg_hard),
        bg_easy: KeyList::gather(z, bg_easy),
        bg_hard: KeyList::gather(z, bg_hard),
    })
}

/// Random mining for CAM-partitioned proposals: each side's sample is split
/// into disjoint halves, the odd key going to the easy set.
pub fn mine_keys_novel<R: Rng + ?Sized>(
    z: &ProjectedMap,
    partition: &Partition,
    sigma: f64,
    rng: &mut R,
) -> Result<KeySets> {
    if partition.source != PartitionSource::Cam {
        return Err(Error::Config("random mining expects a CAM partition".into()));
    }
    if z.lattice != partition.lattice {
        return Err(Error::Shape("map and partition lattices differ".into()));
    }
    let mut halves = |locs: &[Loc]| -> (Vec<Loc>, Vec<Loc>) {
        let mut s = sample_subset(locs, sigma, rng);
        s.shuffle(rng);
        let easy = s.split_off(s.len() / 2);
        (s, easy)
    };
    let (fg_hard, fg_easy) = halves(&partition.fg);
    let (bg_hard, bg_easy) = halves(&partition.bg);
    Ok(KeySets {
        fg_easy: KeyList::gather(z, fg_easy),
        fg_hard: KeyList::gather(z, fg_hard),
        bg_easy: KeyList::gather(z, bg_easy),
        bg_hard: KeyList::gather(z, bg_hard),
    })
}
