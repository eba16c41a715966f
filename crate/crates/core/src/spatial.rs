//! Distances between units and radius queries.
//!
//! All distances are in miles. Planar coordinates are taken to be in miles
//! already; spherical coordinates are (longitude, latitude) in degrees and use
//! the haversine formula on a sphere of radius [`EARTH_RADIUS_MILES`].

use std::collections::HashMap;
use std::io::Read;

use crate::error::{Error, Result};
use crate::panel::parse_decimal;

pub const EARTH_RADIUS_MILES: f64 = 3958.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Euclidean distance on (x, y) in miles.
    Planar,
    /// Great-circle distance on (lon, lat) in degrees.
    Haversine,
}

/// Great-circle distance in miles between two (lon, lat) points in degrees.
pub fn haversine_miles(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * h.clamp(0.0, 1.0).sqrt().asin()
}

fn planar(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Unit coordinates under one metric.
#[derive(Debug, Clone)]
pub struct PointSet {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
    coords: Vec<[f64; 2]>,
    metric: Metric,
}

impl PointSet {
    pub fn new(ids: Vec<String>, coords: Vec<[f64; 2]>, metric: Metric) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(Error::InvalidDesign(format!(
                "{} unit ids but {} coordinate pairs",
                ids.len(),
                coords.len()
            )));
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (k, (id, c)) in ids.iter().zip(&coords).enumerate() {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::InvalidCoordinate {
                    unit: id.clone(),
                    reason: "non-finite coordinate".into(),
                });
            }
            if metric == Metric::Haversine
                && (!(-180.0..=180.0).contains(&c[0]) || !(-90.0..=90.0).contains(&c[1]))
            {
                return Err(Error::InvalidCoordinate {
                    unit: id.clone(),
                    reason: format!("lon {} / lat {} out of range", c[0], c[1]),
                });
            }
            if lookup.insert(id.clone(), k).is_some() {
                return Err(Error::InvalidCoordinate {
                    unit: id.clone(),
                    reason: "unit listed twice".into(),
                });
            }
        }
        Ok(Self {
            ids,
            lookup,
            coords,
            metric,
        })
    }

    /// Reads `unit_id, x, y` (or `lon`, `lat`) columns with a header row. The
    /// unit column may be named `unit_id` or `unit`.
    pub fn load<R: Read>(source: R, metric: Metric, delimiter: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .from_reader(source);
        let headers = rdr.headers()?.clone();
        let find = |names: &[&str]| -> Result<usize> {
            names
                .iter()
                .find_map(|n| headers.iter().position(|h| h == *n))
                .ok_or_else(|| Error::MissingColumn(names.join("|")))
        };
        let unit_c = find(&["unit_id", "unit"])?;
        let x_c = find(&["x", "lon"])?;
        let y_c = find(&["y", "lat"])?;
        let mut ids = Vec::new();
        let mut coords = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let num = |c: usize| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("");
                parse_decimal(raw).ok_or_else(|| Error::InvalidNumber {
                    line,
                    column: headers.get(c).unwrap_or("").to_string(),
                    value: raw.to_string(),
                })
            };
            ids.push(rec.get(unit_c).unwrap_or("").to_string());
            coords.push([num(x_c)?, num(y_c)?]);
        }
        Self::new(ids, coords, metric)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    /// Distance between two units by position.
    pub fn distance_idx(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        match self.metric {
            Metric::Planar => planar(self.coords[i], self.coords[j]),
            Metric::Haversine => haversine_miles(self.coords[i], self.coords[j]),
        }
    }

    /// Distance in miles between two units by id.
    pub fn distance(&self, i: &str, j: &str) -> Result<f64> {
        Ok(self.distance_idx(self.require(i)?, self.require(j)?))
    }

    /// Minimum distance from `i` to a treated unit other than `i`;
    /// `+inf` when there is none.
    pub fn nearest_treated_distance(&self, treated: &[&str], i: &str) -> Result<f64> {
        let iu = self.require(i)?;
        let mut best = f64::INFINITY;
        for t in treated {
            let j = self.require(t)?;
            if j != iu {
                best = best.min(self.distance_idx(iu, j));
            }
        }
        Ok(best)
    }

    /// Units `j != i` with `d(i, j) < r`, via the index.
    pub fn units_within(&self, index: &SpatialIndex, i: &str, r: f64) -> Result<Vec<String>> {
        if r < 0.0 || r.is_nan() {
            return Err(Error::NegativeRadius(r));
        }
        let iu = self.require(i)?;
        let mut out: Vec<usize> = index
            .query(self, iu, r)
            .into_iter()
            .filter(|&(_, d)| d < r)
            .map(|(j, _)| j)
            .collect();
        out.sort_unstable();
        Ok(out.into_iter().map(|j| self.ids[j].clone()).collect())
    }
}

/// Uniform grid of buckets over the coordinates.
///
/// Queries return a superset of candidates from neighbouring cells and
/// filter them by exact distance, so results never depend on the cell size.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cell: f64,
    metric: Metric,
    n_cols: i64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

const MILES_PER_DEGREE: f64 = EARTH_RADIUS_MILES * std::f64::consts::PI / 180.0;

impl SpatialIndex {
    /// `cell_miles` is typically the largest query radius in use.
    pub fn build(points: &PointSet, cell_miles: f64) -> Self {
        let cell_miles = if cell_miles.is_finite() && cell_miles > 0.0 {
            cell_miles
        } else {
            default_cell(points)
        };
        let (cell, n_cols) = match points.metric {
            Metric::Planar => (cell_miles, 0),
            Metric::Haversine => {
                // Cells are square in degrees; at least 1e-6 degrees wide.
                let deg = (cell_miles / MILES_PER_DEGREE).clamp(1e-6, 360.0);
                (deg, (360.0 / deg).ceil() as i64)
            }
        };
        let mut idx = Self {
            cell,
            metric: points.metric,
            n_cols,
            buckets: HashMap::new(),
        };
        for (k, &c) in points.coords.iter().enumerate() {
            let key = idx.key(c);
            idx.buckets.entry(key).or_default().push(k);
        }
        idx
    }

    fn key(&self, c: [f64; 2]) -> (i64, i64) {
        match self.metric {
            Metric::Planar => (
                (c[0] / self.cell).floor() as i64,
                (c[1] / self.cell).floor() as i64,
            ),
            Metric::Haversine => (
                (((c[0] + 180.0) / self.cell).floor() as i64).rem_euclid(self.n_cols),
                ((c[1] + 90.0) / self.cell).floor() as i64,
            ),
        }
    }

    /// Units `j != i` with `d(i, j) <= r`, with their distances, unsorted.
    pub fn query(&self, points: &PointSet, i: usize, r: f64) -> Vec<(usize, f64)> {
        let c = points.coords[i];
        let mut out = Vec::new();
        let mut push = |j: usize| {
            if j != i {
                let d = points.distance_idx(i, j);
                if d <= r {
                    out.push((j, d));
                }
            }
        };
        match self.cells_for(c, r) {
            Some(cells) => {
                for key in cells {
                    if let Some(b) = self.buckets.get(&key) {
                        b.iter().for_each(|&j| push(j));
                    }
                }
            }
            None => (0..points.len()).for_each(&mut push),
        }
        out
    }

    /// Candidate cells for a radius query, or `None` to scan everything.
    fn cells_for(&self, c: [f64; 2], r: f64) -> Option<Vec<(i64, i64)>> {
        if !r.is_finite() {
            return None;
        }
        let budget = self.buckets.len().max(16) as i64;
        match self.metric {
            Metric::Planar => {
                let x0 = ((c[0] - r) / self.cell).floor() as i64 - 1;
                let x1 = ((c[0] + r) / self.cell).floor() as i64 + 1;
                let y0 = ((c[1] - r) / self.cell).floor() as i64 - 1;
                let y1 = ((c[1] + r) / self.cell).floor() as i64 + 1;
                if (x1 - x0 + 1).saturating_mul(y1 - y0 + 1) > budget {
                    return None;
                }
                Some((x0..=x1).flat_map(|x| (y0..=y1).map(move |y| (x, y))).collect())
            }
            Metric::Haversine => {
                let ang = r / EARTH_RADIUS_MILES;
                if ang >= std::f64::consts::PI {
                    return None;
                }
                let dlat = ang.to_degrees();
                let (lon, lat) = (c[0], c[1]);
                let y0 = ((lat - dlat + 90.0) / self.cell).floor() as i64 - 1;
                let y1 = ((lat + dlat + 90.0) / self.cell).floor() as i64 + 1;
                let cos_lat = lat.to_radians().cos();
                let all_cols = lat.abs() + dlat >= 90.0 || ang.sin() >= cos_lat;
                let cols: Vec<i64> = if all_cols {
                    (0..self.n_cols).collect()
                } else {
                    let dlon = (ang.sin() / cos_lat).asin().to_degrees();
                    let x0 = ((lon - dlon + 180.0) / self.cell).floor() as i64 - 1;
                    let x1 = ((lon + dlon + 180.0) / self.cell).floor() as i64 + 1;
                    if x1 - x0 + 1 >= self.n_cols {
                        (0..self.n_cols).collect()
                    } else {
                        let mut v: Vec<i64> = (x0..=x1).map(|x| x.rem_euclid(self.n_cols)).collect();
                        v.sort_unstable();
                        v.dedup();
                        v
                    }
                };
                if (cols.len() as i64).saturating_mul(y1 - y0 + 1) > budget {
                    return None;
                }
                Some(
                    cols.iter()
                        .flat_map(|&x| (y0..=y1).map(move |y| (x, y)))
                        .collect(),
                )
            }
        }
    }
}

fn default_cell(points: &PointSet) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &points.coords {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let span = match points.metric {
        Metric::Planar => span,
        Metric::Haversine => span * MILES_PER_DEGREE,
    };
    (span / (points.len() as f64).sqrt()).max(1e-6)
}

/// Precomputed pairwise distances in long form (`unit_i, unit_j, distance`).
/// Missing pairs are infinitely far apart.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
    /// Per unit, neighbours sorted by distance.
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl DistanceMatrix {
    pub fn from_pairs(pairs: Vec<(String, String, f64)>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut intern = |s: &str, ids: &mut Vec<String>| -> usize {
            if let Some(&k) = lookup.get(s) {
                return k;
            }
            ids.push(s.to_string());
            lookup.insert(s.to_string(), ids.len() - 1);
            ids.len() - 1
        };
        let mut edges: HashMap<(usize, usize), f64> = HashMap::new();
        for (a, b, d) in pairs {
            let i = intern(&a, &mut ids);
            let j = intern(&b, &mut ids);
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::InvalidCoordinate {
                    unit: a,
                    reason: format!("distance to `{b}` must be finite and non-negative, got {d}"),
                });
            }
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if let Some(&prev) = edges.get(&key) {
                if prev != d {
                    return Err(Error::InvalidCoordinate {
                        unit: a,
                        reason: format!("asymmetric distances to `{b}`: {prev} vs {d}"),
                    });
                }
            }
            edges.insert(key, d);
        }
        let mut neighbors = vec![Vec::new(); ids.len()];
        for (&(i, j), &d) in &edges {
            neighbors[i].push((j, d));
            neighbors[j].push((i, d));
        }
        for n in &mut neighbors {
            n.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        }
        let lookup = ids.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
        Ok(Self {
            ids,
            lookup,
            neighbors,
        })
    }

    /// Reads `unit_i, unit_j, distance` columns with a header row.
    pub fn load<R: Read>(source: R, delimiter: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .from_reader(source);
        let headers = rdr.headers()?.clone();
        let col = |n: &str| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::MissingColumn(n.to_string()))
        };
        let (ci, cj, cd) = (col("unit_i")?, col("unit_j")?, col("distance")?);
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let raw = rec.get(cd).unwrap_or("");
            let d = parse_decimal(raw).ok_or_else(|| Error::InvalidNumber {
                line,
                column: "distance".into(),
                value: raw.to_string(),
            })?;
            pairs.push((
                rec.get(ci).unwrap_or("").to_string(),
                rec.get(cj).unwrap_or("").to_string(),
                d,
            ));
        }
        Self::from_pairs(pairs)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn distance_idx(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.neighbors[i]
            .iter()
            .find(|&&(k, _)| k == j)
            .map_or(f64::INFINITY, |&(_, d)| d)
    }
}

/// Where distances come from: coordinates with a grid index, or a
/// precomputed matrix for non-geographic notions of distance.
#[derive(Debug, Clone)]
pub enum Geometry {
    Points { points: PointSet, index: SpatialIndex },
    Matrix(DistanceMatrix),
}

impl Geometry {
    pub fn from_points(points: PointSet, cell_miles: f64) -> Self {
        let index = SpatialIndex::build(&points, cell_miles);
        Geometry::Points { points, index }
    }

    pub fn len(&self) -> usize {
        self.ids().len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids().is_empty()
    }

    pub fn ids(&self) -> &[String] {
        match self {
            Geometry::Points { points, .. } => points.ids(),
            Geometry::Matrix(m) => m.ids(),
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        match self {
            Geometry::Points { points, .. } => points.index_of(id),
            Geometry::Matrix(m) => m.lookup.get(id).copied(),
        }
    }

    pub fn distance_idx(&self, i: usize, j: usize) -> f64 {
        match self {
            Geometry::Points { points, .. } => points.distance_idx(i, j),
            Geometry::Matrix(m) => m.distance_idx(i, j),
        }
    }

    /// Units `j != i` with `d(i, j) <= r`, with distances, unsorted.
    pub fn within_inclusive(&self, i: usize, r: f64) -> Vec<(usize, f64)> {
        match self {
            Geometry::Points { points, index } => index.query(points, i, r),
            Geometry::Matrix(m) => m.neighbors[i]
                .iter()
                .take_while(|&&(_, d)| d <= r)
                .copied()
                .collect(),
        }
    }

    /// Maps each id to its geometry position, failing on the first id with
    /// no coordinates.
    pub fn positions_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| Error::MissingCoordinates(id.clone()))
            })
            .collect()
    }

    /// Smallest distance between any two distinct units.
    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.min(self.distance_idx(i, j));
            }
        }
        best
    }
}

/// `rows × cols` lattice of points `spacing` miles apart, ids `u0000`, ….
pub fn grid_points(rows: usize, cols: usize, spacing: f64) -> PointSet {
    let n = rows * cols;
    let width = n.saturating_sub(1).to_string().len().max(4);
    let mut ids = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            ids.push(format!("u{:0width$}", r * cols + c, width = width));
            coords.push([c as f64 * spacing, r as f64 * spacing]);
        }
    }
    PointSet::new(ids, coords, Metric::Planar).expect("grid ids are unique and finite")
}
