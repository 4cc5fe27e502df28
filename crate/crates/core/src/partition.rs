//! Foreground/background partitions of an RoI lattice and GT boundaries.

use crate::data::Mask;
use crate::error::{Error, Result};

/// A lattice location as `(row, col)`.
pub type Loc = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lattice {
    pub height: usize,
    pub width: usize,
}

impl Lattice {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::Shape(format!(
                "lattice {height}x{width} is smaller than 2x2"
            )));
        }
        Ok(Lattice { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, loc: Loc) -> usize {
        loc.0 * self.width + loc.1
    }

    pub fn locations(&self) -> impl Iterator<Item = Loc> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionSource {
    GtMask,
    Cam,
}

/// Disjoint foreground and background location sets, both in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub lattice: Lattice,
    pub fg: Vec<Loc>,
    pub bg: Vec<Loc>,
    pub source: PartitionSource,
}

impl Partition {
    fn checked(self) -> Result<Self> {
        if self.fg.is_empty() {
            return Err(Error::EmptyPartitionSide { side: "foreground" });
        }
        if self.bg.is_empty() {
            return Err(Error::EmptyPartitionSide { side: "background" });
        }
        Ok(self)
    }

    /// Locations assigned to neither side (only possible for CAM partitions).
    pub fn unassigned(&self) -> usize {
        self.lattice.len() - self.fg.len() - self.bg.len()
    }

    /// 3-level rendering: background 0, unassigned 128, foreground 255.
    pub fn render(&self) -> Vec<u8> {
        let mut out = vec![128u8; self.lattice.len()];
        for &l in &self.fg {
            out[self.lattice.index(l)] = 255;
        }
        for &l in &self.bg {
            out[self.lattice.index(l)] = 0;
        }
        out
    }
}

/// Partition from a binary ground-truth mask; covers the whole lattice.
pub fn partition_from_mask(mask: &Mask) -> Result<Partition> {
    let lattice = Lattice::new(mask.height, mask.width)?;
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for loc in lattice.locations() {
        if mask.get(loc.0, loc.1) {
            fg.push(loc);
        } else {
            bg.push(loc);
        }
    }
    Partition {
        lattice,
        fg,
        bg,
        source: PartitionSource::GtMask,
    }
    .checked()
}

/// Partition from an activation map in [0, 1]: `a ≥ 1 − δ` is foreground,
/// `a ≤ δ` background, anything between is left unassigned.
pub fn partition_from_cam(cam: &[f32], lattice: Lattice, delta: f64) -> Result<Partition> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::Config(format!("delta {delta} outside (0, 0.5)")));
    }
    if cam.len() != lattice.len() {
        return Err(Error::Shape(format!(
            "cam has {} values for a {}x{} lattice",
            cam.len(),
            lattice.height,
            lattice.width
        )));
    }
    // thresholds compared at the map's own precision
    let (hi, lo) = ((1.0 - delta) as f32, delta as f32);
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for loc in lattice.locations() {
        let a = cam[lattice.index(loc)];
        if a >= hi {
            fg.push(loc);
        } else if a <= lo {
            bg.push(loc);
        }
    }
    Partition {
        lattice,
        fg,
        bg,
        source: PartitionSource::Cam,
    }
    .checked()
}

/// Inner 4-connected boundary of a mask: foreground locations with at least
/// one background 4-neighbor. Locations are row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundarySet {
    pub lattice: Lattice,
    pub locations: Vec<Loc>,
}

pub fn extract_boundary(mask: &Mask) -> Result<BoundarySet> {
    let lattice = Lattice::new(mask.height, mask.width)?;
    let n = mask.count();
    if n == 0 || n == lattice.len() {
        return Err(Error::SingleValuedMask);
    }
    let (h, w) = (mask.height, mask.width);
    let locations = lattice
        .locations()
        .filter(|&(r, c)| {
            mask.get(r, c)
                && ((r > 0 && !mask.get(r - 1, c))
                    || (r + 1 < h && !mask.get(r + 1, c))
                    || (c > 0 && !mask.get(r, c - 1))
                    || (c + 1 < w && !mask.get(r, c + 1)))
        })
        .collect();
    Ok(BoundarySet { lattice, locations })
}

#[inline]
fn dist2(a: Loc, b: Loc) -> usize {
    let dr = a.0.abs_diff(b.0);
    let dc = a.1.abs_diff(b.1);
    dr * dr + dc * dc
}

/// Nearest boundary location `b_i` to `loc` and its squared distance. Ties
/// resolve to the first boundary location in row-major order.
pub fn nearest_boundary(loc: Loc, boundary: &BoundarySet) -> Result<(Loc, usize)> {
    let mut best: Option<(Loc, usize)> = None;
    for &b in &boundary.locations {
        let d = dist2(loc, b);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((b, d));
        }
    }
    best.ok_or(Error::SingleValuedMask)
}

pub fn boundary_distance_squared(loc: Loc, boundary: &BoundarySet) -> Result<usize> {
    nearest_boundary(loc, boundary).map(|(_, d)| d)
}

/// Squared Euclidean distance from every lattice location to the nearest
/// boundary location, via the separable lower-envelope transform.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub lattice: Lattice,
    values: Vec<usize>,
}

impl DistanceField {
    pub fn new(boundary: &BoundarySet) -> Self {
        let lat = boundary.lattice;
        let (h, w) = (lat.height, lat.width);
        let inf = (h * h + w * w + 1) as f64;

        let mut grid = vec![inf; h * w];
        for &l in &boundary.locations {
            grid[lat.index(l)] = 0.0;
        }
        let mut buf = vec![0.0; h.max(w)];
        let mut out = vec![0.0; h.max(w)];
        // columns
        for c in 0..w {
            for r in 0..h {
                buf[r] = grid[r * w + c];
            }
            edt_1d(&buf[..h], &mut out[..h]);
            for r in 0..h {
                grid[r * w + c] = out[r];
            }
        }
        // rows
        for r in 0..h {
            buf[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
            edt_1d(&buf[..w], &mut out[..w]);
            grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
        }
        DistanceField {
            lattice: lat,
            values: grid.into_iter().map(|v| v.round() as usize).collect(),
        }
    }

    #[inline]
    pub fn get(&self, loc: Loc) -> usize {
        self.values[self.lattice.index(loc)]
    }
}

/// 1-D squared distance transform of a sampled function (Felzenszwalb &
/// Huttenlocher lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let intersect = |p: usize| {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
        };
        let mut s = intersect(v[k]);
        // z[0] = -inf stops the descent at k = 0
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}
