//! Scenario presets shipped with the binary.

use std::path::Path;

use crate::config::{ConfigError, ExperimentConfig};

pub struct Preset {
    pub name: &'static str,
    pub source: &'static str,
}

pub const PRESETS: [Preset; 6] = [
    Preset {
        name: "consistency-sweep",
        source: include_str!("../presets/consistency-sweep.toml"),
    },
    Preset {
        name: "new-client-generalization",
        source: include_str!("../presets/new-client-generalization.toml"),
    },
    Preset {
        name: "bound-verification",
        source: include_str!("../presets/bound-verification.toml"),
    },
    Preset {
        name: "local-vs-federated",
        source: include_str!("../presets/local-vs-federated.toml"),
    },
    Preset {
        name: "typical-case-sweep",
        source: include_str!("../presets/typical-case-sweep.toml"),
    },
    Preset {
        name: "comm-audit",
        source: include_str!("../presets/comm-audit.toml"),
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

impl Preset {
    pub fn config(&self) -> Result<ExperimentConfig, ConfigError> {
        let origin = format!("presets/{}.toml", self.name);
        ExperimentConfig::from_toml_str(self.source, Path::new(&origin))
    }

    /// First line of the preset's `description`, if any.
    pub fn description(&self) -> String {
        self.config().ok().and_then(|c| c.description).unwrap_or_default()
    }
}
