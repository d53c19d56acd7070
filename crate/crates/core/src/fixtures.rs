//! Appliance fixture sets.

use std::path::Path;

use serde::Deserialize;

use crate::waveform::ApplianceProfile;
use crate::Error;

/// The five reference appliances shipped with the crate.
pub const BUILTIN_APPLIANCES: &str = include_str!("../fixtures/appliances.toml");

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ApplianceFixture {
    #[serde(flatten)]
    pub profile: ApplianceProfile<f64>,
    /// Published reactive power, when available.
    #[serde(default)]
    pub q_reference: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct FixtureFile {
    #[serde(default)]
    appliance: Vec<ApplianceFixture>,
}

pub fn parse_fixtures(text: &str) -> Result<Vec<ApplianceFixture>, Error> {
    let file: FixtureFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for fixture in &file.appliance {
        fixture.profile.validate()?;
    }
    Ok(file.appliance)
}

pub fn load_fixtures(path: impl AsRef<Path>) -> Result<Vec<ApplianceFixture>, Error> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_fixtures(&text)
}

pub fn builtin_fixtures() -> Vec<ApplianceFixture> {
    parse_fixtures(BUILTIN_APPLIANCES).expect("bundled fixtures are valid")
}

/// Looks up a bundled appliance by name.
pub fn builtin_profile(name: &str) -> Option<ApplianceProfile<f64>> {
    builtin_fixtures()
        .into_iter()
        .find(|f| f.profile.name.eq_ignore_ascii_case(name))
        .map(|f| f.profile)
}
