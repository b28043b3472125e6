//! Run configuration: everything a command needs, with provenance labels for
//! `--print-config`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{AodError, Result};
use crate::eval::{ApProtocol, DetectConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub iou_thresh: f64,
    pub protocol: ApProtocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = DetectConfig::default();
        EvalConfig {
            score_thresh: d.score_thresh,
            nms_thresh: d.nms_thresh,
            iou_thresh: 0.5,
            protocol: ApProtocol::Voc07ElevenPoint,
        }
    }
}

impl EvalConfig {
    pub fn detect(&self) -> DetectConfig {
        DetectConfig {
            score_thresh: self.score_thresh,
            nms_thresh: self.nms_thresh,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<String>,
    pub test_data: Option<String>,
    pub out: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "SceneConfig")]
    pub scene: SceneConfig,
    #[serde(rename = "TrainConfig")]
    pub train: TrainConfig,
    #[serde(rename = "EvalConfig")]
    pub eval: EvalConfig,
    pub paths: Paths,
}

/// Fields whose defaults are stated by the method's authors.
const PAPER_FIELDS: &[&str] = &[
    "TrainConfig.images_per_batch",
    "TrainConfig.fg_per_image",
    "TrainConfig.bg_per_image",
    "TrainConfig.RLConfig.n_episodes",
    "TrainConfig.RLConfig.sigma",
    "TrainConfig.RLConfig.return_scale",
    "TrainConfig.RLConfig.reward_kind",
    "TrainConfig.RLConfig.baseline_kind",
    "TrainConfig.RLConfig.include_background",
    "TrainConfig.AODConfig.T",
    "TrainConfig.AODConfig.glimpse_embed_dim",
    "TrainConfig.AODConfig.stacked_rnn",
    "TrainConfig.AODConfig.eltwise_max",
    "TrainConfig.AODConfig.glimpse_dof",
];

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.train.aod.num_classes != self.scene.num_classes {
            return Err(AodError::config(
                "TrainConfig.AODConfig.K",
                format!("{} differs from SceneConfig.K = {}", self.train.aod.num_classes, self.scene.num_classes),
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_thresh) {
            return Err(AodError::config("EvalConfig.iou_thresh", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Reads a config file: either a bare config or the `--print-config`
    /// envelope `{ "config": ..., "provenance": ... }`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let shown = path.display().to_string();
        let mut v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| AodError::parse(&shown, e.to_string()))?;
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        serde_json::from_value(v).map_err(|e| AodError::parse(shown, e.to_string()))
    }

    /// Dotted field path -> `paper`, `spec-default` or `user` (differs from
    /// the default).
    pub fn provenance(&self) -> Result<BTreeMap<String, String>> {
        let mut now = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut now);
        let mut base = BTreeMap::new();
        flatten("", &serde_json::to_value(RunConfig::default())?, &mut base);
        Ok(now
            .into_iter()
            .map(|(k, v)| {
                let label = if base.get(&k) != Some(&v) {
                    "user"
                } else if PAPER_FIELDS.contains(&k.as_str()) {
                    "paper"
                } else {
                    "spec-default"
                };
                (k, label.to_string())
            })
            .collect())
    }

    pub fn to_envelope(&self) -> Result<String> {
        let env = serde_json::json!({
            "config": self,
            "provenance": self.provenance()?,
        });
        Ok(serde_json::to_string_pretty(&env)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trips() {
        let mut c = RunConfig::default();
        c.train.lr = 0.02;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, c.to_envelope().unwrap()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
        let prov = c.provenance().unwrap();
        assert_eq!(prov["TrainConfig.lr"], "user");
        assert_eq!(prov["TrainConfig.AODConfig.T"], "paper");
        assert_eq!(prov["TrainConfig.momentum"], "spec-default");
    }

    #[test]
    fn partial_files_fill_defaults_and_typos_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"TrainConfig": {"AODConfig": {"T": 2}}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.train.aod.steps, 2);
        assert_eq!(c.train.rl.n_episodes, 8);
        std::fs::write(&p, r#"{"TrainConfig": {"lrr": 2}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(AodError::Parse { .. })));
    }

    #[test]
    fn defaults_are_consistent() {
        RunConfig::default().validate().unwrap();
    }
}
