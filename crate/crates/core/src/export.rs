//! Plan files and renderings of generated configurations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::citysynth::Instruction;
use crate::error::{Error, Result};
use crate::landuse::{LandUseConfiguration, PoiTaxonomy, ZonePlan};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Output of one generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub instruction: Instruction,
    pub context_id: usize,
    pub seed: u64,
    pub zones: Vec<Vec<usize>>,
    /// Raw planning-layer output; may hold negative values.
    pub configuration: LandUseConfiguration,
}

impl PlanFile {
    pub fn new(instruction: Instruction, context_id: usize, seed: u64, zones: &ZonePlan, raw: &LandUseConfiguration) -> Self {
        Self {
            schema_version: PLAN_SCHEMA_VERSION,
            instruction,
            context_id,
            seed,
            zones: zones.to_nested(),
            configuration: raw.clone(),
        }
    }

    pub fn zone_plan(&self) -> Result<ZonePlan> {
        ZonePlan::new(self.zones.len(), self.zones.concat())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if plan.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::format(path, format!("unsupported schema version {}", plan.schema_version)));
        }
        let zones = plan.zone_plan().map_err(|e| Error::format(path, e.to_string()))?;
        if zones.n() != plan.configuration.n() {
            return Err(Error::format(path, "zone raster and configuration sizes differ"));
        }
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Pgm,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "pgm" => Ok(Self::Pgm),
            "json" => Ok(Self::Json),
            other => Err(Error::invalid("export format", format!("`{other}` (expected csv, pgm or json)"))),
        }
    }
}

pub fn category_csv(cfg: &LandUseConfiguration, cat: usize) -> String {
    cfg.category_raster(cat)
        .iter()
        .map(|row| row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

/// Binary graymap of one category, scaled so the largest value is white.
/// Negative values render black.
pub fn category_pgm(cfg: &LandUseConfiguration, cat: usize) -> Vec<u8> {
    let raster = cfg.category_raster(cat);
    let n = cfg.n();
    let max = raster.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    for v in raster.iter().flatten() {
        let level = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
        out.push(level as u8);
    }
    out
}

fn slug(cat: usize) -> String {
    let name = PoiTaxonomy::name(cat).unwrap_or("category");
    format!("{cat:02}_{}", name.replace(' ', "_"))
}

/// Writes `plan` into `dir` in the given format; returns the files written.
pub fn export_plan(plan: &PlanFile, format: ExportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &plan.configuration;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    match format {
        ExportFormat::Csv => {
            for cat in 0..cfg.categories() {
                put(format!("{}.csv", slug(cat)), category_csv(cfg, cat).into_bytes())?;
            }
            put("zones.csv".into(), plan.zone_plan()?.to_csv().into_bytes())?;
        }
        ExportFormat::Pgm => {
            for cat in 0..cfg.categories() {
                put(format!("{}.pgm", slug(cat)), category_pgm(cfg, cat))?;
            }
        }
        ExportFormat::Json => {
            let text = serde_json::to_string(cfg).expect("configuration serializes") + "\n";
            put("configuration.json".into(), text.into_bytes())?;
        }
    }
    Ok(written)
}

pub fn import_configuration_json(path: &Path) -> Result<LandUseConfiguration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(values: Vec<f64>) -> PlanFile {
        let cfg = LandUseConfiguration::from_values(2, 20, values).unwrap();
        PlanFile::new(Instruction::new(3).unwrap(), 4, 9, &ZonePlan::uniform(2, 1), &cfg)
    }

    #[test]
    fn json_round_trip_is_exact() {
        let values: Vec<f64> = (0..80).map(|i| (i as f64 * 0.37).sin() * 3.1).collect();
        let p = plan(values);
        let dir = tempfile::tempdir().unwrap();
        let files = export_plan(&p, ExportFormat::Json, dir.path()).unwrap();
        assert_eq!(import_configuration_json(&files[0]).unwrap(), p.configuration);
        let pf = dir.path().join("plan.json");
        p.save(&pf).unwrap();
        assert_eq!(PlanFile::load(&pf).unwrap(), p);
    }

    #[test]
    fn pgm_layout() {
        let mut values = vec![0.0; 80];
        values[0] = 2.0;
        values[20] = 1.0;
        values[40] = -5.0;
        let p = plan(values);
        let img = category_pgm(&p.configuration, 0);
        assert_eq!(&img[..11], b"P5\n2 2\n255\n");
        assert_eq!(&img[11..], &[255, 128, 0, 0]);
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(export_plan(&p, ExportFormat::Pgm, dir.path()).unwrap().len(), 20);
    }

    #[test]
    fn zero_config_is_black() {
        let p = plan(vec![0.0; 80]);
        for cat in 0..20 {
            assert!(category_pgm(&p.configuration, cat)[11..].iter().all(|&b| b == 0));
        }
        assert!("png".parse::<ExportFormat>().is_err());
    }
}
