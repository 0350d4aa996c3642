//! Distribution distances between original and generated configurations,
//! weighted by instruction group.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::citysynth::{Instruction, INSTRUCTION_LEVELS};
use crate::error::{Error, Result};
use crate::landuse::LandUseConfiguration;

pub const SMOOTHING: f64 = 1e-9;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Divergence {
    Kl,
    Js,
    Hellinger,
    Cosine,
}

impl Divergence {
    pub const ALL: [Divergence; 4] = [Divergence::Kl, Divergence::Js, Divergence::Hellinger, Divergence::Cosine];

    pub fn label(self) -> &'static str {
        match self {
            Divergence::Kl => "KL",
            Divergence::Js => "JS",
            Divergence::Hellinger => "HD",
            Divergence::Cosine => "Cos",
        }
    }
}

/// Adds `SMOOTHING` to each nonnegative entry and normalises.
pub fn normalize_smoothed(mass: &[f64]) -> Result<Vec<f64>> {
    if mass.is_empty() || mass.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("mass vector", "entries must be finite and nonnegative"));
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("mass vector", "all-zero total"));
    }
    let denom = total + SMOOTHING * mass.len() as f64;
    Ok(mass.iter().map(|v| (v + SMOOTHING) / denom).collect())
}

/// Aggregate per-category share over every grid of every configuration,
/// after clamping negative entries to zero.
pub fn category_distribution<'a>(configs: impl IntoIterator<Item = &'a LandUseConfiguration>) -> Result<Vec<f64>> {
    let mut totals: Option<Vec<f64>> = None;
    for cfg in configs {
        let t = totals.get_or_insert_with(|| vec![0.0; cfg.categories()]);
        if t.len() != cfg.categories() {
            return Err(Error::invalid("configurations", "category counts differ"));
        }
        for cell in cfg.values().chunks(cfg.categories()) {
            for (acc, v) in t.iter_mut().zip(cell) {
                *acc += v.max(0.0);
            }
        }
    }
    let totals = totals.ok_or_else(|| Error::invalid("configurations", "empty list"))?;
    normalize_smoothed(&totals)
}

fn check_simplex(name: &'static str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(name, "not a probability vector"));
    }
    Ok(())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(SMOOTHING)).ln())
        .sum()
}

pub fn divergence(kind: Divergence, p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("distributions", format!("lengths {} and {}", p.len(), q.len())));
    }
    check_simplex("P", p)?;
    check_simplex("Q", q)?;
    if p == q {
        return Ok(0.0);
    }
    let d = match kind {
        Divergence::Kl => kl(p, q),
        Divergence::Js => {
            let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(p, &mid) + 0.5 * kl(q, &mid)
        }
        Divergence::Hellinger => {
            let s: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
            (s / 2.0).sqrt()
        }
        Divergence::Cosine => {
            let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
            let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nq = q.iter().map(|b| b * b).sum::<f64>().sqrt();
            1.0 - dot / (np * nq)
        }
    };
    // rounding can leave tiny negatives at P = Q
    Ok(d.max(0.0))
}

/// `sum_j w_j d_j / sum_j w_j`, skipping zero-weight groups.
pub fn avg_metric(groups: &[(f64, f64)]) -> Result<f64> {
    if groups.iter().any(|(w, _)| *w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("group weights", "must be finite and nonnegative"));
    }
    let total: f64 = groups.iter().map(|g| g.0).sum();
    if total <= 0.0 {
        return Err(Error::invalid("group weights", "all zero"));
    }
    Ok(groups.iter().filter(|g| g.0 > 0.0).map(|(w, d)| w * d).sum::<f64>() / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub level: Instruction,
    pub weight: usize,
    pub kl: f64,
    pub js: f64,
    pub hd: f64,
    pub cos: f64,
}

impl GroupRow {
    pub fn get(&self, kind: Divergence) -> f64 {
        match kind {
            Divergence::Kl => self.kl,
            Divergence::Js => self.js,
            Divergence::Hellinger => self.hd,
            Divergence::Cosine => self.cos,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub kl: f64,
    pub js: f64,
    pub hd: f64,
    pub cos: f64,
}

impl Averages {
    pub fn get(&self, kind: Divergence) -> f64 {
        match kind {
            Divergence::Kl => self.kl,
            Divergence::Js => self.js,
            Divergence::Hellinger => self.hd,
            Divergence::Cosine => self.cos,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub groups: Vec<GroupRow>,
    pub averages: Averages,
}

impl GroupReport {
    /// Groups `(level, original, generated)` triples by level and compares
    /// the aggregate distributions of each group.
    pub fn build(items: &[(Instruction, &LandUseConfiguration, &LandUseConfiguration)]) -> Result<Self> {
        let mut groups = Vec::new();
        for level in Instruction::ALL {
            let members: Vec<_> = items.iter().filter(|it| it.0 == level).collect();
            if members.is_empty() {
                continue;
            }
            let p = category_distribution(members.iter().map(|m| m.1))?;
            let q = category_distribution(members.iter().map(|m| m.2))?;
            groups.push(GroupRow {
                level,
                weight: members.len(),
                kl: divergence(Divergence::Kl, &p, &q)?,
                js: divergence(Divergence::Js, &p, &q)?,
                hd: divergence(Divergence::Hellinger, &p, &q)?,
                cos: divergence(Divergence::Cosine, &p, &q)?,
            });
        }
        let avg = |kind| avg_metric(&groups.iter().map(|g| (g.weight as f64, g.get(kind))).collect::<Vec<_>>());
        let averages = Averages {
            kl: avg(Divergence::Kl)?,
            js: avg(Divergence::Js)?,
            hd: avg(Divergence::Hellinger)?,
            cos: avg(Divergence::Cosine)?,
        };
        Ok(Self { groups, averages })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,w,KL,JS,HD,Cos\n");
        for g in &self.groups {
            let _ = writeln!(out, "{},{},{},{},{},{}", g.level.label(), g.weight, g.kl, g.js, g.hd, g.cos);
        }
        let a = &self.averages;
        let _ = writeln!(out, "AVG,{},{},{},{},{}", self.groups.iter().map(|g| g.weight).sum::<usize>(), a.kl, a.js, a.hd, a.cos);
        out
    }
}

/// Weights per level, zero where the level is absent.
pub fn level_weights(report: &GroupReport) -> [usize; INSTRUCTION_LEVELS] {
    let mut w = [0; INSTRUCTION_LEVELS];
    for g in &report.groups {
        w[g.level.level() as usize] = g.weight;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_distribution_aggregates() {
        let a = LandUseConfiguration::from_values(1, 2, vec![2.0, 0.0]).unwrap();
        let b = LandUseConfiguration::from_values(1, 2, vec![0.0, 2.0]).unwrap();
        let d = category_distribution([&a, &b]).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);

        let single = LandUseConfiguration::from_values(1, 3, vec![5.0, 0.0, -1.0]).unwrap();
        let d = category_distribution([&single]).unwrap();
        assert!((d[0] - 1.0).abs() <= 2e-8 && d[1] <= 2e-8 && d[2] <= 2e-8);

        let zero = LandUseConfiguration::zeros(2, 3);
        assert!(category_distribution([&zero]).is_err());
        assert!(category_distribution(std::iter::empty()).is_err());
    }

    #[test]
    fn avg_metric_cases() {
        assert!((avg_metric(&[(1.0, 0.2), (3.0, 0.6)]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(avg_metric(&[(0.0, 9.0), (2.0, 0.3)]).unwrap(), 0.3);
        assert!(avg_metric(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let a = LandUseConfiguration::from_values(1, 2, vec![1.0, 3.0]).unwrap();
        let items = [(Instruction::new(2).unwrap(), &a, &a)];
        let r = GroupReport::build(&items).unwrap();
        assert_eq!(r.averages.kl, 0.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("level,w,KL,JS,HD,Cos\nGreen2,1,0,0,0,0\n"), "{csv}");
        let back: GroupReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
