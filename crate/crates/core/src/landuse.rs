//! Grid-level and zone-level plan containers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// POI category table.
pub struct PoiTaxonomy;

impl PoiTaxonomy {
    pub const COUNT: usize = 20;

    pub const NAMES: [&'static str; Self::COUNT] = [
        "road",
        "car service",
        "car repair",
        "motorbike service",
        "food service",
        "shopping",
        "daily life service",
        "recreation service",
        "medical service",
        "lodging",
        "tourist attraction",
        "real estate",
        "government place",
        "education",
        "transportation",
        "finance",
        "company",
        "road furniture",
        "specific address",
        "public service",
    ];

    /// Recreation service and tourist attraction.
    pub const GREEN: [usize; 2] = [7, 10];

    pub fn name(code: usize) -> Option<&'static str> {
        Self::NAMES.get(code).copied()
    }

    pub fn code(name: &str) -> Option<usize> {
        Self::NAMES.iter().position(|&n| n == name)
    }
}

/// `N x N x C` tensor of per-grid per-category POI counts.
///
/// Stored row-major over `(row, col, category)`, so the flat index is
/// `(row * N + col) * C + category`. Generated plans hold real values and may
/// be negative before clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct LandUseConfiguration {
    n: usize,
    c: usize,
    values: Vec<f64>,
}

impl LandUseConfiguration {
    pub fn zeros(n: usize, c: usize) -> Self {
        Self {
            n,
            c,
            values: vec![0.0; n * n * c],
        }
    }

    pub fn from_values(n: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || values.len() != n * n * c {
            return Err(Error::invalid(
                "configuration",
                format!("{} values for a {n}x{n}x{c} grid", values.len()),
            ));
        }
        Ok(Self { n, c, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn categories(&self) -> usize {
        self.c
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn index(&self, row: usize, col: usize, cat: usize) -> usize {
        (row * self.n + col) * self.c + cat
    }

    pub fn get(&self, row: usize, col: usize, cat: usize) -> f64 {
        self.values[self.index(row, col, cat)]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Total mass of one grid cell.
    pub fn cell_mass(&self, row: usize, col: usize) -> f64 {
        let start = self.index(row, col, 0);
        self.values[start..start + self.c].iter().sum()
    }

    /// Per-category totals over all grids.
    pub fn category_totals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        for cell in self.values.chunks(self.c) {
            for (o, &v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        out
    }

    /// Share of the green categories in the total mass; 0 for an empty grid.
    pub fn green_share(&self) -> f64 {
        let totals = self.category_totals();
        let all: f64 = totals.iter().sum();
        if all <= 0.0 {
            return 0.0;
        }
        PoiTaxonomy::GREEN
            .iter()
            .filter_map(|&g| totals.get(g))
            .sum::<f64>()
            / all
    }

    pub fn clamped_nonnegative(&self) -> Self {
        Self {
            n: self.n,
            c: self.c,
            values: self.values.iter().map(|v| v.max(0.0)).collect(),
        }
    }

    /// `N x N` raster of one category.
    pub fn category_raster(&self, cat: usize) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|r| (0..self.n).map(|c| self.get(r, c, cat)).collect())
            .collect()
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        self.values
            .chunks(self.n * self.c)
            .map(|row| row.chunks(self.c).map(<[f64]>::to_vec).collect())
            .collect()
    }

    pub fn from_nested(nested: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = nested.len();
        let c = nested.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if n == 0 || c == 0 {
            return Err(Error::invalid("configuration", "empty nested array"));
        }
        let mut values = Vec::with_capacity(n * n * c);
        for row in nested {
            if row.len() != n {
                return Err(Error::invalid("configuration", "grid is not square"));
            }
            for cell in row {
                if cell.len() != c {
                    return Err(Error::invalid("configuration", "ragged category axis"));
                }
                values.extend_from_slice(cell);
            }
        }
        Self::from_values(n, c, values)
    }
}

impl Serialize for LandUseConfiguration {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_nested().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LandUseConfiguration {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let nested = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        Self::from_nested(&nested).map_err(serde::de::Error::custom)
    }
}

/// `N x N` raster of functional-zone labels in `[0, M)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZonePlan {
    n: usize,
    labels: Vec<usize>,
}

impl ZonePlan {
    pub fn new(n: usize, labels: Vec<usize>) -> Result<Self> {
        if n == 0 || labels.len() != n * n {
            return Err(Error::invalid(
                "zone plan",
                format!("{} labels for a {n}x{n} grid", labels.len()),
            ));
        }
        Ok(Self { n, labels })
    }

    pub fn uniform(n: usize, label: usize) -> Self {
        Self {
            n,
            labels: vec![label; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.n + col]
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.labels.chunks(self.n) {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<usize>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::invalid("zone csv", format!("`{v}`: {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("zone csv", "raster is not square"));
        }
        Self::new(n, rows.concat())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_nested(&self) -> Vec<Vec<usize>> {
        self.labels.chunks(self.n).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_is_dense() {
        assert_eq!(PoiTaxonomy::NAMES.len(), 20);
        assert_eq!(PoiTaxonomy::name(7), Some("recreation service"));
        assert_eq!(PoiTaxonomy::name(10), Some("tourist attraction"));
        assert_eq!(PoiTaxonomy::code("public service"), Some(19));
        assert_eq!(PoiTaxonomy::name(20), None);
    }

    #[test]
    fn nested_layout_matches_flat_index() {
        let values: Vec<f64> = (0..2 * 2 * 3).map(f64::from).collect();
        let cfg = LandUseConfiguration::from_values(2, 3, values).unwrap();
        let nested = cfg.to_nested();
        assert_eq!(nested[1][0][2], cfg.get(1, 0, 2));
        assert_eq!(cfg.get(1, 0, 2), 8.0);
        assert_eq!(LandUseConfiguration::from_nested(&nested).unwrap(), cfg);
    }

    #[test]
    fn zone_csv_round_trip() {
        let plan = ZonePlan::new(2, vec![0, 1, 1, 3]).unwrap();
        assert_eq!(plan.to_csv(), "0,1\n1,3\n");
        assert_eq!(ZonePlan::from_csv(&plan.to_csv()).unwrap(), plan);
        assert!(ZonePlan::from_csv("0,1\n1\n").is_err());
    }
}
