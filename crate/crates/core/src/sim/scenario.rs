//! Scenario scripts: initial cluster plus timed actions, as JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::cluster::Bootstrap;
use crate::node::{HeartbeatConfig, RecoveryPolicy};
use crate::types::{GranuleId, GranuleLayout, Key, KeyRange, NodeId, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub nodes: Vec<u32>,
    pub granules: GranuleSpec,
    /// Granule id to node id; granules not listed are dealt round-robin.
    #[serde(default)]
    pub owners: BTreeMap<u32, u32>,
    #[serde(default)]
    pub rows: Vec<(Key, Value)>,
    #[serde(default)]
    pub settings: Settings,
    pub actions: Vec<TimedAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GranuleSpec {
    Uniform { count: u32, key_space: Key },
    Explicit(Vec<(u32, Key, Key)>),
}

/// Per-scenario overrides of the simulator defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub latency: Option<(u64, u64)>,
    /// `null` disables failure detection.
    #[serde(default, with = "double_option")]
    pub heartbeat: Option<Option<HeartbeatConfig>>,
    pub recovery_policy: Option<RecoveryPolicy>,
    pub warmup: Option<bool>,
    pub centralized: Option<bool>,
    pub throttle: Option<u32>,
    pub tick_budget: Option<u64>,
    pub vote_timeout: Option<u64>,
    pub decision_timeout: Option<u64>,
}

mod double_option {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer>(v: &Option<Option<T>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(inner) => inner.serialize(s),
        }
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Option<Option<T>>, D::Error> {
        Option::<T>::deserialize(d).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum Action {
    AddNode { node: u32 },
    Migrate { granules: Vec<u32>, src: u32, dst: u32 },
    /// `count` migrations of random granules to random other nodes.
    MigrateBatch {
        count: u32,
        #[serde(default)]
        spacing: u64,
    },
    Crash { node: u32 },
    Recover { node: u32 },
    Pause { node: u32 },
    Resume { node: u32 },
    Partition { groups: Vec<Vec<u32>> },
    Heal,
    /// One user transaction sent by a fresh client, which follows redirects.
    User {
        node: u32,
        #[serde(default)]
        reads: Vec<Key>,
        #[serde(default)]
        writes: Vec<(Key, Value)>,
    },
    ClientLoad {
        clients: u32,
        until: u64,
        #[serde(default = "default_ops")]
        ops: u32,
        #[serde(default = "default_think")]
        think: (u64, u64),
        #[serde(default = "default_write_ratio")]
        write_percent: u32,
    },
    Scan { node: u32 },
}

fn default_ops() -> u32 {
    2
}

fn default_think() -> (u64, u64) {
    (1, 4)
}

fn default_write_ratio() -> u32 {
    50
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("granule layout: {0}")]
    Layout(#[from] crate::types::LayoutError),
    #[error("scenario: {0}")]
    Invalid(String),
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<ScenarioSpec, ScenarioError> {
        let s: ScenarioSpec = serde_json::from_str(text)?;
        s.bootstrap()?;
        Ok(s)
    }

    pub fn layout(&self) -> Result<GranuleLayout, ScenarioError> {
        Ok(match &self.granules {
            GranuleSpec::Uniform { count, key_space } => {
                if *count == 0 || *key_space < *count as Key {
                    return Err(ScenarioError::Invalid("need 1 <= count <= key_space".into()));
                }
                GranuleLayout::uniform(*count, *key_space)
            }
            GranuleSpec::Explicit(v) => GranuleLayout::new(
                v.iter()
                    .map(|(g, lo, hi)| (GranuleId(*g), KeyRange::new(*lo, *hi)))
                    .collect(),
            )?,
        })
    }

    pub fn bootstrap(&self) -> Result<Bootstrap, ScenarioError> {
        if self.nodes.is_empty() {
            return Err(ScenarioError::Invalid("no initial nodes".into()));
        }
        let nodes: Vec<NodeId> = self.nodes.iter().map(|n| NodeId(*n)).collect();
        let layout = self.layout()?;
        let mut owners = BTreeMap::new();
        for (i, g) in layout.granules().enumerate() {
            let o = match self.owners.get(&g.0) {
                Some(n) if self.nodes.contains(n) => NodeId(*n),
                Some(n) => return Err(ScenarioError::Invalid(format!("owner N{n} of {g} is not an initial node"))),
                None => nodes[i % nodes.len()],
            };
            owners.insert(g, o);
        }
        Ok(Bootstrap {
            nodes,
            layout,
            owners,
            rows: self.rows.clone(),
        })
    }
}

/// Scenarios shipped with the crate.
pub mod bundled {
    pub const FIG5_SCALEOUT: &str = include_str!("../../scenarios/fig5_scaleout.json");
    pub const FIG6_FAILOVER: &str = include_str!("../../scenarios/fig6_failover.json");
    pub const MIXED: &str = include_str!("../../scenarios/mixed.json");
    pub const SCALEOUT_4_TO_8: &str = include_str!("../../scenarios/scaleout_4_to_8.json");

    pub fn all() -> [(&'static str, &'static str); 4] {
        [
            ("fig5_scaleout", FIG5_SCALEOUT),
            ("fig6_failover", FIG6_FAILOVER),
            ("mixed", MIXED),
            ("scaleout_4_to_8", SCALEOUT_4_TO_8),
        ]
    }

    pub fn get(name: &str) -> Option<&'static str> {
        all().into_iter().find(|(n, _)| *n == name).map(|(_, s)| s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_bootstrap() {
        for (name, text) in bundled::all() {
            let spec = ScenarioSpec::from_json(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let boot = spec.bootstrap().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(boot.nodes.len(), spec.nodes.len(), "{name}");
        }
        assert!(bundled::get("nope").is_none());
    }

    #[test]
    fn rejects_more_granules_than_keys() {
        let text = r#"{"name":"x","nodes":[1],"granules":{"count":10,"key_space":5},"actions":[]}"#;
        assert!(matches!(ScenarioSpec::from_json(text), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn rejects_owner_outside_the_cluster() {
        let text = r#"{"name":"x","nodes":[1],"granules":{"count":2,"key_space":20},"owners":{"2":7},"actions":[]}"#;
        assert!(matches!(ScenarioSpec::from_json(text), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn rejects_unknown_settings() {
        let text = r#"{"name":"x","nodes":[1],"granules":{"count":2,"key_space":20},"settings":{"speed":1},"actions":[]}"#;
        assert!(matches!(ScenarioSpec::from_json(text), Err(ScenarioError::Json(_))));
    }
}
