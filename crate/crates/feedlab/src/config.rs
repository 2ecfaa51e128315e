//! Run configuration: a TOML document, then `FEEDLAB_*` environment
//! variables, then command-line flags (flags win).
//!
//! ```toml
//! data_dir = "feedlab-data"
//! listen = "127.0.0.1:8080"
//! seed = 1
//!
//! [study]
//! id = "pilot"
//! arms = [
//!   { label = "control", weight = 0.5 },
//!   { label = "treatment", weight = 0.5, plan = "downrank_political" },
//! ]
//! ```
//!
//! An arm's `plan` is a bundled plan name or a path to a plan document,
//! relative to the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use feedlab_core::coordination::{Arm, ClientMode, Eligibility, StudyDesign};
use feedlab_core::measurement::SurveySchedule;
use feedlab_core::plan::{shipped_plan, TransformPlan};
use feedlab_core::platform::InventorySpec;
use feedlab_core::store::{StoreConfig, SyncPolicy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("config is not valid TOML: {0}")]
    Toml(String),
    #[error("{var}: {reason}")]
    Env { var: String, reason: String },
    #[error("arm `{arm}`: {reason}")]
    Plan { arm: String, reason: String },
    #[error("study invalid: {0}")]
    Study(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Backend plus coordination listener.
    pub listen: String,
    /// Mock platform listener.
    pub mock_listen: String,
    /// Public URL of the coordination service, used in recovery links.
    pub base_url: Option<String>,
    /// Mock platform polled for monitored accounts by `serve`.
    pub mock_url: Option<String>,
    pub seed: u64,
    pub server_budget_ms: u64,
    pub client_deadline_ms: u64,
    pub sync: SyncPolicy,
    pub max_store_bytes: Option<u64>,
    pub study: StudyConfig,
    pub inventory: InventoryConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub id: String,
    pub ends_at: Option<i64>,
    pub allow_forced_arm: bool,
    pub default_timezone: String,
    pub extension_store_url: String,
    pub eligibility: BTreeMap<String, Vec<String>>,
    pub schedule: SurveySchedule,
    pub arms: Vec<ArmConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub label: String,
    pub weight: f64,
    #[serde(default)]
    pub plan: Option<String>,
    #[serde(default)]
    pub mode: ClientMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InventoryConfig {
    pub posts: usize,
    pub accounts: usize,
    pub political: f64,
    pub positive: f64,
    pub neutral: f64,
    pub page_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("feedlab-data"),
            listen: "127.0.0.1:8080".into(),
            mock_listen: "127.0.0.1:8090".into(),
            base_url: None,
            mock_url: None,
            seed: 1,
            server_budget_ms: 300,
            client_deadline_ms: feedlab_core::protocol::DEFAULT_CLIENT_DEADLINE_MS,
            sync: SyncPolicy::Always,
            max_store_bytes: None,
            study: StudyConfig::default(),
            inventory: InventoryConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            id: "feedlab-study".into(),
            ends_at: None,
            allow_forced_arm: false,
            default_timezone: "+00:00".into(),
            extension_store_url: "https://extensions.example/feedlab".into(),
            eligibility: BTreeMap::new(),
            schedule: SurveySchedule::default(),
            arms: vec![
                ArmConfig { label: "control".into(), weight: 0.5, plan: None, mode: ClientMode::Server },
                ArmConfig {
                    label: "treatment".into(),
                    weight: 0.5,
                    plan: Some("downrank_political".into()),
                    mode: ClientMode::Server,
                },
            ],
        }
    }
}

impl Default for InventoryConfig {
    fn default() -> Self {
        Self { posts: 2000, accounts: 50, political: 0.3, positive: 0.3, neutral: 0.4, page_size: 20 }
    }
}

impl RunConfig {
    /// Reads `path` if given, otherwise starts from the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_owned(), reason: e.to_string() })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Toml(e.to_string()))?;
        cfg.base_dir = path.parent().map(Path::to_owned).unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    /// Applies `FEEDLAB_*` overrides from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(var: &str, v: &str) -> Result<T, ConfigError> {
            v.parse().map_err(|_| ConfigError::Env { var: var.into(), reason: format!("`{v}` is not a number") })
        }
        for (k, v) in vars {
            match k.as_str() {
                "FEEDLAB_DATA_DIR" => self.data_dir = PathBuf::from(v),
                "FEEDLAB_LISTEN" => self.listen = v,
                "FEEDLAB_MOCK_LISTEN" => self.mock_listen = v,
                "FEEDLAB_BASE_URL" => self.base_url = Some(v),
                "FEEDLAB_MOCK_URL" => self.mock_url = Some(v),
                "FEEDLAB_SEED" => self.seed = num(&k, &v)?,
                "FEEDLAB_SERVER_BUDGET_MS" => self.server_budget_ms = num(&k, &v)?,
                "FEEDLAB_CLIENT_DEADLINE_MS" => self.client_deadline_ms = num(&k, &v)?,
                "FEEDLAB_MAX_STORE_BYTES" => self.max_store_bytes = Some(num(&k, &v)?),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn public_base_url(&self) -> String {
        self.base_url.clone().unwrap_or_else(|| format!("http://{}", self.listen))
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig { dir: self.data_dir.join("events"), max_bytes: self.max_store_bytes, sync: self.sync }
    }

    pub fn registry_path(&self) -> PathBuf {
        self.data_dir.join("registry.json")
    }

    pub fn inventory_spec(&self) -> InventorySpec {
        let inv = &self.inventory;
        let mut spec = InventorySpec::new(self.seed, inv.posts, inv.accounts);
        spec.topic_mix = [
            ("political".to_string(), inv.political),
            ("positive".to_string(), inv.positive),
            ("neutral".to_string(), inv.neutral),
        ]
        .into_iter()
        .collect();
        spec
    }

    /// Resolves arms and plans into a validated study design.
    pub fn study_design(&self) -> Result<StudyDesign, ConfigError> {
        let mut arms = Vec::new();
        for a in &self.study.arms {
            let plan = a.plan.as_deref().map(|p| resolve_plan(p, &self.base_dir)).transpose().map_err(|reason| {
                ConfigError::Plan { arm: a.label.clone(), reason }
            })?;
            arms.push(Arm { label: a.label.clone(), weight: a.weight, plan, mode: a.mode });
        }
        let mut s = StudyDesign::new(self.study.id.clone(), arms, self.seed);
        s.ends_at = self.study.ends_at;
        s.allow_forced_arm = self.study.allow_forced_arm;
        s.default_timezone = self.study.default_timezone.clone();
        s.extension_store_url = self.study.extension_store_url.clone();
        s.eligibility = Eligibility { required: self.study.eligibility.clone() };
        s.schedule = self.study.schedule.clone();
        s.base_url = self.public_base_url();
        s.validate().map_err(|e| ConfigError::Study(e.to_string()))?;
        Ok(s)
    }
}

/// A bundled plan name, or a plan document path relative to `base`.
pub fn resolve_plan(reference: &str, base: &Path) -> Result<TransformPlan, String> {
    if let Some(plan) = shipped_plan(reference) {
        return Ok(plan);
    }
    let path = base.join(reference);
    TransformPlan::load(&path).map_err(|e| e.to_string())
}
