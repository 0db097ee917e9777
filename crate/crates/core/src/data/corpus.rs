//! City collections and their on-disk layout.
//!
//! A corpus directory holds `manifest.toml` plus one series archive per city
//! and role:
//!
//! ```toml
//! [[cities]]
//! id = "alpha"
//! role = "source"
//! file = "source-alpha.tpbs"
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::TrafficSeries;
use crate::archive::{Archive, ArrayData, Magic};
use crate::error::{Result, TpbError};

pub const SERIES_MAGIC: &Magic = b"TPBSERS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
    Test,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
            Role::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct City {
    pub series: TrafficSeries,
    /// Row-normalized prior adjacency, when known.
    pub prior_graph: Option<Array2<f64>>,
}

impl City {
    pub fn id(&self) -> &str {
        &self.series.city
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityCorpus {
    pub role: Role,
    pub cities: Vec<City>,
}

impl CityCorpus {
    pub fn new(role: Role, cities: Vec<City>) -> Result<Self> {
        match role {
            Role::Source if cities.is_empty() => {
                return Err(TpbError::InsufficientData("source corpus has no cities".into()))
            }
            Role::Target | Role::Test if cities.len() != 1 => {
                return Err(TpbError::InsufficientData(format!(
                    "{} corpus must hold exactly one city, found {}",
                    role.as_str(),
                    cities.len()
                )))
            }
            _ => {}
        }
        Ok(Self { role, cities })
    }

    pub fn ids(&self) -> Vec<String> {
        self.cities.iter().map(|c| c.id().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: CityCorpus,
    pub target: CityCorpus,
    pub test: CityCorpus,
}

impl Dataset {
    pub fn target_city(&self) -> &City {
        &self.target.cities[0]
    }

    pub fn test_city(&self) -> &City {
        &self.test.cities[0]
    }
}

pub fn save_series(city: &City, path: &Path) -> Result<()> {
    let s = &city.series;
    let mut a = Archive::new();
    a.set_meta("city", &s.city);
    a.set_meta("n_nodes", s.node_count());
    a.set_meta("n_steps", s.step_count());
    a.set_meta("channels", s.channels());
    a.set_meta("interval_minutes", s.interval_minutes);
    a.set_meta("start_timestamp", s.start_timestamp);
    a.push_f32("values", s.values.clone().into_dyn());
    if let Some(g) = &city.prior_graph {
        a.push_matrix("prior_graph", g);
    }
    a.write(path, SERIES_MAGIC)
}

pub fn load_series(path: &Path) -> Result<City> {
    let a = Archive::read(path, SERIES_MAGIC)?;
    let dims: (usize, usize, usize) = (a.meta("n_nodes")?, a.meta("n_steps")?, a.meta("channels")?);
    let values = match a.require("values")? {
        ArrayData::F32(v) => v.clone(),
        ArrayData::F64(_) => return Err(TpbError::corrupt(path, "values must be float32")),
    };
    let values: Array3<f32> = values
        .into_dimensionality()
        .map_err(|_| TpbError::corrupt(path, "values must be a rank-3 array"))?;
    if values.dim() != dims {
        return Err(TpbError::corrupt(path, "values shape disagrees with the header"));
    }
    let series = TrafficSeries::new(
        a.meta::<String>("city")?,
        a.meta("interval_minutes")?,
        a.meta("start_timestamp")?,
        values,
    )?;
    let prior_graph = match a.get("prior_graph") {
        Some(g) => Some(g.to_f64_2d()?),
        None => None,
    };
    Ok(City { series, prior_graph })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    role: Role,
    file: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    cities: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.toml";

pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TpbError::io(dir, e))?;
    let mut manifest = Manifest::default();
    for corpus in [&data.source, &data.target, &data.test] {
        for city in &corpus.cities {
            let file = format!("{}-{}.tpbs", corpus.role.as_str(), city.id());
            save_series(city, &dir.join(&file))?;
            manifest.cities.push(ManifestEntry {
                id: city.id().to_string(),
                role: corpus.role,
                file,
            });
        }
    }
    let text = toml::to_string(&manifest).map_err(|e| TpbError::Serde(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| TpbError::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(TpbError::Dependency(format!(
            "no corpus manifest at {}",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| TpbError::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| TpbError::corrupt(&path, e.to_string()))?;
    let by_role = |role: Role| -> Result<CityCorpus> {
        let cities = manifest
            .cities
            .iter()
            .filter(|e| e.role == role)
            .map(|e| load_series(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        CityCorpus::new(role, cities)
    };
    Ok(Dataset {
        source: by_role(Role::Source)?,
        target: by_role(Role::Target)?,
        test: by_role(Role::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, SynthSpec};

    fn small() -> SynthSpec {
        let mut s = SynthSpec::default();
        for c in &mut s.cities {
            c.nodes = 3;
            c.days = 3;
        }
        s
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&small()).unwrap().dataset;
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn missing_manifest_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(TpbError::Dependency(_))));
    }

    #[test]
    fn role_cardinality() {
        assert!(CityCorpus::new(Role::Source, vec![]).is_err());
        let d = generate_dataset(&small()).unwrap().dataset;
        let two = vec![d.source.cities[0].clone(), d.source.cities[1].clone()];
        assert!(CityCorpus::new(Role::Target, two).is_err());
    }
}
