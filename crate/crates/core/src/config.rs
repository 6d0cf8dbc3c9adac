//! TOML configuration files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Scenario;
use crate::sim::{MagneticMap, Profile, SensorModel};

/// Reads a TOML file; absent keys keep their defaults, unknown keys are
/// rejected.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

/// Seeded description of a [`MagneticMap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSpec {
    pub seed: u64,
    pub bumps: usize,
    /// Radius of the disc holding the bump centres, m.
    pub extent: f64,
    /// Bound on the disturbance norm, µT.
    pub max_perturbation: f64,
}

impl Default for MapSpec {
    fn default() -> Self {
        MapSpec {
            seed: 0,
            bumps: 12,
            extent: 20.0,
            max_perturbation: 10.0,
        }
    }
}

impl MapSpec {
    pub fn build(&self) -> Result<MagneticMap> {
        if !(self.extent > 0.0) || !(self.max_perturbation >= 0.0) {
            return Err(Error::Config(
                "map extent must be positive and max_perturbation non-negative".into(),
            ));
        }
        Ok(MagneticMap::random(
            self.seed,
            self.bumps,
            self.extent,
            self.max_perturbation,
        ))
    }
}

/// Settings of the `simulate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub rate_hz: f64,
    /// Seconds per recording.
    pub duration: f64,
    pub profile: Profile,
    pub sensor: SensorModel,
    pub map: MapSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        let s = Scenario::default();
        SimConfig {
            rate_hz: s.rate_hz,
            duration: s.duration,
            profile: s.profile,
            sensor: s.sensor,
            map: MapSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn scenario(&self) -> Result<Scenario> {
        if !(self.rate_hz > 0.0) || !(self.duration > 0.0) {
            return Err(Error::Config("rate_hz and duration must be positive".into()));
        }
        self.sensor.validate()?;
        Ok(Scenario {
            rate_hz: self.rate_hz,
            duration: self.duration,
            profile: self.profile.clone(),
            sensor: self.sensor.clone(),
            map: self.map.build()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orient::OrientTrainConfig;
    use crate::pipeline::PipelineConfig;
    use crate::posnet::PosTrainConfig;

    #[test]
    fn defaults_match_default_scenario() {
        assert_eq!(SimConfig::default().scenario().unwrap(), Scenario::default());
    }

    #[test]
    fn partial_files_keep_defaults() {
        let c: OrientTrainConfig = parse_toml("lr = 0.001\nwindow = 50\n").unwrap();
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.window, 50);
        assert_eq!(c.batch, OrientTrainConfig::default().batch);
        let p: PipelineConfig = parse_toml("[filter]\nupdate_every = 5\n[filter.ekf]\ndt = 0.02\n").unwrap();
        assert_eq!(p.filter.update_every, 5);
        assert_eq!(p.filter.ekf.dt, 0.02);
        assert_eq!(
            p.filter.ekf.process_noise,
            PipelineConfig::default().filter.ekf.process_noise
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse_toml::<PosTrainConfig>("learning_rate = 0.1\n").unwrap_err();
        assert_eq!(e.kind(), "config");
        assert!(parse_toml::<SimConfig>("[profile]\nkind = \"walk\"\nspeed = 2.0\n").is_err());
    }

    #[test]
    fn profiles_parse() {
        let s: SimConfig = parse_toml("duration = 30.0\n[profile]\nkind = \"walk\"\nspeed_max = 1.2\n").unwrap();
        match &s.profile {
            Profile::Walk(w) => assert_eq!(w.speed_max, 1.2),
            p => panic!("unexpected profile {p:?}"),
        }
        let s: SimConfig = parse_toml("[profile]\nkind = \"static\"\n").unwrap();
        assert_eq!(s.profile, Profile::Static);
    }

    #[test]
    fn configs_roundtrip() {
        let c = SimConfig::default();
        assert_eq!(parse_toml::<SimConfig>(&to_toml(&c).unwrap()).unwrap(), c);
        let p = PosTrainConfig::default();
        assert_eq!(parse_toml::<PosTrainConfig>(&to_toml(&p).unwrap()).unwrap(), p);
        let f = PipelineConfig::default();
        assert_eq!(parse_toml::<PipelineConfig>(&to_toml(&f).unwrap()).unwrap(), f);
    }
}
