//! Experiment files. JSON, unknown fields rejected at every level.

use crate::analysis::{build_scenario, ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::lineargraph::HybridConfig;
use crate::model::NetworkConfig;
use crate::policies::{CharParams, LookaheadConfig, MdpConfig};
use crate::sim::TruthMode;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One network plus optional solver and mechanism settings. Exactly one of
/// `network` and `hybrid` is present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid: Option<HybridConfig>,
    /// Worst-case construction applied on top of `network`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char: Option<CharParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp: Option<MdpConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookahead: Option<LookaheadConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthMode>,
}

impl ExperimentConfig {
    pub fn parallel(network: NetworkConfig<f64>) -> Self {
        Self {
            network: Some(network),
            ..Self::default()
        }
    }

    pub fn hybrid(hybrid: HybridConfig) -> Self {
        Self {
            hybrid: Some(hybrid),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.network, &self.hybrid) {
            (Some(n), None) => n.validate()?,
            (None, Some(h)) => {
                h.validate()?;
                if self.scenario.is_some() {
                    return Err(Error::config("scenario", "constructions apply to parallel networks only"));
                }
            }
            (Some(_), Some(_)) => return Err(Error::config("network", "give either `network` or `hybrid`, not both")),
            (None, None) => return Err(Error::config("network", "missing; give `network` or `hybrid`")),
        }
        if let Some(c) = &self.char {
            c.validate()?;
        }
        if let Some(m) = &self.mdp {
            m.validate()?;
        }
        Ok(())
    }

    /// The parallel network after the optional construction.
    pub fn resolved(&self) -> Result<ScenarioSpec> {
        let base = self
            .network
            .as_ref()
            .ok_or_else(|| Error::config("network", "this command needs a parallel network"))?;
        let mut spec = match self.scenario {
            Some(kind) => build_scenario(kind, base)?,
            None => ScenarioSpec {
                kind: ScenarioKind::Fig3,
                truth: TruthMode::for_config(base),
                network: crate::analysis::ScenarioNetwork::Parallel(base.clone()),
                bound: None,
            },
        };
        if let Some(t) = self.truth {
            spec.truth = t;
        }
        Ok(spec)
    }
}

/// Bundled settings, by file name.
pub mod bundled {
    pub const FIG3: &str = include_str!("../data/fig3.json");
    pub const FIG5: &str = include_str!("../data/fig5.json");
    pub const HYBRID: &str = include_str!("../data/hybrid.json");
    pub const THEOREM1: &str = include_str!("../data/theorem1.json");
    pub const CHAR_WORST: &str = include_str!("../data/char_worst.json");
    pub const HIDING_OVER: &str = include_str!("../data/hiding_over.json");

    pub const ALL: [(&str, &str); 6] = [
        ("fig3.json", FIG3),
        ("fig5.json", FIG5),
        ("hybrid.json", HYBRID),
        ("theorem1.json", THEOREM1),
        ("char_worst.json", CHAR_WORST),
        ("hiding_over.json", HIDING_OVER),
    ];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{fig3_config, fig5_config};

    #[test]
    fn bundled_files_parse() {
        for (name, text) in bundled::ALL {
            ExperimentConfig::from_json(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        let f3 = ExperimentConfig::from_json(bundled::FIG3).unwrap();
        assert_eq!(f3.network.unwrap(), fig3_config(0.9));
        let f5 = ExperimentConfig::from_json(bundled::FIG5).unwrap();
        assert_eq!(f5.network.unwrap(), fig5_config());
        let h = ExperimentConfig::from_json(bundled::HYBRID).unwrap();
        assert_eq!(h.hybrid.unwrap(), HybridConfig::baseline());
    }

    #[test]
    fn rejects_bad_files() {
        let mut v: serde_json::Value = serde_json::from_str(bundled::FIG3).unwrap();
        v["network"]["hazard"]["alpha_low"] = 1.0.into();
        let e = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "hazard.alpha_low"), "{e}");

        let mut v: serde_json::Value = serde_json::from_str(bundled::FIG3).unwrap();
        v["network"]["surprise"] = 1.into();
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Json(_))));

        let mut v: serde_json::Value = serde_json::from_str(bundled::FIG3).unwrap();
        v["char"] = serde_json::json!({"x_th": 0.3, "p_low": 0.1, "p_high": 0.5, "prior_mass_below": 0.5});
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());

        assert!(ExperimentConfig::from_json("{}").is_err());
    }

    #[test]
    fn round_trips() {
        let c = ExperimentConfig::parallel(fig5_config());
        assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}
