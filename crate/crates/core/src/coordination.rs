//! Registration flow: recruitment parameters, consent, instructions, config
//! claim through a persistent browser entry, and recovery links.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use indexmap::IndexMap;
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::measurement::SurveySchedule;
use crate::model::{Millis, ParticipantId};
use crate::plan::TransformPlan;
use crate::store::{load_snapshot, save_snapshot};

pub const RECRUITMENT_KEY: &str = "recruitment_id";
pub const FORCED_ARM_KEY: &str = "arm";
pub const COOKIE_NAME: &str = "flc";
pub const COOKIE_MAX_AGE_SECS: u64 = 30 * 24 * 3600;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoordError {
    #[error("unknown registration")]
    UnknownRegistration,
    #[error("no persistent entry presented")]
    NoPersistentEntry,
    #[error("consent has not been recorded")]
    NotConsented,
    #[error("instructions have not been shown")]
    NotInstructed,
    #[error("registration missing `{RECRUITMENT_KEY}`")]
    MissingRecruitmentId,
    #[error("participant does not qualify: {0}")]
    Ineligible(String),
    #[error("arm weights invalid: {0}")]
    WeightsInvalid(String),
    #[error("unknown arm `{0}`")]
    UnknownArm(String),
    #[error("registry snapshot failed: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegState {
    Entered,
    Consented,
    Instructed,
    Claimed,
    Recovered,
    /// Consent declined; the registration is closed for good.
    Declined,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    #[default]
    Server,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub weight: f64,
    /// No plan means control: every page passes through.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<TransformPlan>,
    #[serde(default)]
    pub mode: ClientMode,
}

impl Arm {
    pub fn control(label: impl Into<String>, weight: f64) -> Self {
        Self { label: label.into(), weight, plan: None, mode: ClientMode::Server }
    }

    pub fn treatment(label: impl Into<String>, weight: f64, plan: TransformPlan) -> Self {
        Self { label: label.into(), weight, plan: Some(plan), mode: ClientMode::Server }
    }

    pub fn is_control(&self) -> bool {
        self.plan.is_none()
    }
}

/// Screening over recruitment parameters: each listed key must be present
/// with one of the allowed values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eligibility {
    pub required: BTreeMap<String, Vec<String>>,
}

impl Eligibility {
    pub fn check(&self, params: &IndexMap<String, String>) -> Result<(), String> {
        for (key, allowed) in &self.required {
            match params.get(key) {
                Some(v) if allowed.iter().any(|a| a == v) => {}
                Some(v) => return Err(format!("{key}={v}")),
                None => return Err(format!("{key} missing")),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub study_id: String,
    pub arms: Vec<Arm>,
    pub assignment_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ends_at: Option<Millis>,
    #[serde(default)]
    pub eligibility: Eligibility,
    /// Honor an `arm` recruitment parameter (scripted cohorts only).
    #[serde(default)]
    pub allow_forced_arm: bool,
    #[serde(default = "default_timezone")]
    pub default_timezone: String,
    #[serde(default)]
    pub schedule: SurveySchedule,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub extension_store_url: String,
}

fn default_timezone() -> String {
    "+00:00".into()
}

impl StudyDesign {
    pub fn new(study_id: impl Into<String>, arms: Vec<Arm>, assignment_seed: u64) -> Self {
        Self {
            study_id: study_id.into(),
            arms,
            assignment_seed,
            ends_at: None,
            eligibility: Eligibility::default(),
            allow_forced_arm: false,
            default_timezone: default_timezone(),
            schedule: SurveySchedule::default(),
            base_url: String::new(),
            extension_store_url: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), CoordError> {
        let weights: Vec<(String, f64)> = self.arms.iter().map(|a| (a.label.clone(), a.weight)).collect();
        validate_weights(&weights)?;
        for arm in &self.arms {
            if let Some(plan) = &arm.plan {
                plan.validate().map_err(|e| CoordError::WeightsInvalid(format!("arm {}: {e}", arm.label)))?;
            }
        }
        self.schedule.validate().map_err(CoordError::WeightsInvalid)
    }

    pub fn arm(&self, label: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.label == label)
    }

    pub fn is_over(&self, now: Millis) -> bool {
        self.ends_at.is_some_and(|end| now >= end)
    }
}

fn validate_weights(arms: &[(String, f64)]) -> Result<(), CoordError> {
    if arms.is_empty() {
        return Err(CoordError::WeightsInvalid("no arms".into()));
    }
    if let Some((l, w)) = arms.iter().find(|(_, w)| !w.is_finite() || *w < 0.0) {
        return Err(CoordError::WeightsInvalid(format!("arm {l} has weight {w}")));
    }
    let total: f64 = arms.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoordError::WeightsInvalid(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Uniform value in [0, 1) from SHA-256(seed ‖ participant_id).
pub fn assignment_bucket(participant_id: &ParticipantId, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(participant_id.as_str().as_bytes());
    let x = u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic weighted assignment of `participant_id` to an arm.
pub fn assign_condition(participant_id: &ParticipantId, arms: &[(String, f64)], seed: u64) -> Result<String, CoordError> {
    validate_weights(arms)?;
    let u = assignment_bucket(participant_id, seed);
    let mut acc = 0.0;
    for (label, w) in arms {
        acc += w;
        if u < acc {
            return Ok(label.clone());
        }
    }
    // Rounding left u above the last cumulative weight.
    Ok(arms.iter().rev().find(|(_, w)| *w > 0.0).expect("weights sum to 1").0.clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub email: String,
    pub consented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantConfig {
    pub participant_id: ParticipantId,
    pub token: String,
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_ref: Option<String>,
    pub mode: ClientMode,
    /// The plan itself, shipped only for local mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<TransformPlan>,
    pub survey_schedule: SurveySchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<Contact>,
    pub timezone: String,
    pub recruitment_params: IndexMap<String, String>,
    pub issued_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSession {
    pub registration_id: String,
    pub recruitment_params: IndexMap<String, String>,
    pub state: RegState,
    pub created_at: Millis,
    pub persistent_entry_value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ParticipantConfig>,
    #[serde(default)]
    pub claims: u32,
    /// State transitions with timestamps.
    #[serde(default)]
    pub history: Vec<(RegState, Millis)>,
}

impl RegistrationSession {
    fn set_state(&mut self, state: RegState, at: Millis) {
        if self.state != state {
            self.state = state;
            self.history.push((state, at));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeginOutcome {
    pub registration_id: String,
    pub persistent_entry_value: String,
    pub state: RegState,
    /// An existing registration for the same recruitment id was resumed.
    pub resumed: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Registry {
    registrations: IndexMap<String, RegistrationSession>,
    #[serde(skip)]
    by_recruitment: HashMap<String, String>,
    #[serde(skip)]
    by_entry: HashMap<String, String>,
    #[serde(skip)]
    by_token: HashMap<String, String>,
}

impl Registry {
    fn reindex(&mut self) {
        self.by_recruitment.clear();
        self.by_entry.clear();
        self.by_token.clear();
        for (id, r) in &self.registrations {
            if let Some(rid) = r.recruitment_params.get(RECRUITMENT_KEY) {
                self.by_recruitment.insert(rid.clone(), id.clone());
            }
            self.by_entry.insert(r.persistent_entry_value.clone(), id.clone());
            if let Some(c) = &r.config {
                self.by_token.insert(c.token.clone(), id.clone());
            }
        }
    }
}

/// The registration service. All registry operations are serialized.
pub struct Coordinator {
    study: StudyDesign,
    clock: SharedClock,
    rng: Mutex<ChaCha20Rng>,
    registry: Mutex<Registry>,
    snapshot: Option<PathBuf>,
}

impl Coordinator {
    pub fn new(study: StudyDesign, clock: SharedClock, token_seed: u64) -> Result<Self, CoordError> {
        study.validate()?;
        Ok(Self {
            study,
            clock,
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(token_seed)),
            registry: Mutex::new(Registry::default()),
            snapshot: None,
        })
    }

    /// Persists the registry to `path` after every change, loading it first
    /// if present.
    pub fn with_snapshot(mut self, path: impl Into<PathBuf>) -> Result<Self, CoordError> {
        let path = path.into();
        let loaded: Option<Registry> = load_snapshot(&path).map_err(|e| CoordError::Snapshot(e.to_string()))?;
        if let Some(mut reg) = loaded {
            reg.reindex();
            // Move the token stream past what the earlier run handed out.
            let n = reg.registrations.len() as u64;
            let mut rng = self.rng.lock();
            let base = rng.next_u64();
            *rng = ChaCha20Rng::seed_from_u64(base ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            drop(rng);
            *self.registry.get_mut() = reg;
        }
        self.snapshot = Some(path);
        Ok(self)
    }

    pub fn study(&self) -> &StudyDesign {
        &self.study
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    fn token(&self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.lock().fill_bytes(&mut bytes);
        hex::encode(bytes)
    }

    fn persist(&self, reg: &Registry) -> Result<(), CoordError> {
        match &self.snapshot {
            Some(path) => save_snapshot(path, reg).map_err(|e| CoordError::Snapshot(e.to_string())),
            None => Ok(()),
        }
    }

    /// Starts (or resumes, for a known recruitment id) a registration.
    pub fn begin_registration(&self, params: IndexMap<String, String>) -> Result<BeginOutcome, CoordError> {
        let rid = params.get(RECRUITMENT_KEY).filter(|v| !v.is_empty()).cloned().ok_or(CoordError::MissingRecruitmentId)?;
        let mut reg = self.registry.lock();
        if let Some(id) = reg.by_recruitment.get(&rid) {
            let r = &reg.registrations[id];
            return Ok(BeginOutcome {
                registration_id: r.registration_id.clone(),
                persistent_entry_value: r.persistent_entry_value.clone(),
                state: r.state,
                resumed: true,
            });
        }
        self.study.eligibility.check(&params).map_err(CoordError::Ineligible)?;
        let now = self.now();
        let id = format!("reg-{:06}", reg.registrations.len() + 1);
        let entry = self.token();
        let session = RegistrationSession {
            registration_id: id.clone(),
            recruitment_params: params,
            state: RegState::Entered,
            created_at: now,
            persistent_entry_value: entry.clone(),
            config: None,
            claims: 0,
            history: vec![(RegState::Entered, now)],
        };
        reg.by_recruitment.insert(rid, id.clone());
        reg.by_entry.insert(entry.clone(), id.clone());
        reg.registrations.insert(id.clone(), session);
        self.persist(&reg)?;
        Ok(BeginOutcome { registration_id: id, persistent_entry_value: entry, state: RegState::Entered, resumed: false })
    }

    pub fn registration(&self, registration_id: &str) -> Option<RegistrationSession> {
        self.registry.lock().registrations.get(registration_id).cloned()
    }

    pub fn registration_by_entry(&self, entry: &str) -> Option<RegistrationSession> {
        let reg = self.registry.lock();
        reg.by_entry.get(entry).map(|id| reg.registrations[id].clone())
    }

    pub fn registrations(&self) -> Vec<RegistrationSession> {
        self.registry.lock().registrations.values().cloned().collect()
    }

    /// Records the consent decision. Repeats are idempotent; a decline closes
    /// the registration permanently.
    pub fn record_consent(&self, registration_id: &str, accepted: bool) -> Result<RegState, CoordError> {
        let mut reg = self.registry.lock();
        let now = self.now();
        let r = reg.registrations.get_mut(registration_id).ok_or(CoordError::UnknownRegistration)?;
        if r.state == RegState::Entered {
            r.set_state(if accepted { RegState::Consented } else { RegState::Declined }, now);
        }
        let state = r.state;
        self.persist(&reg)?;
        Ok(state)
    }

    /// Shows the instructions page for the registration behind `entry`.
    pub fn view_instructions(&self, entry: Option<&str>) -> Result<RegistrationSession, CoordError> {
        let entry = entry.ok_or(CoordError::NoPersistentEntry)?;
        let mut reg = self.registry.lock();
        let now = self.now();
        let id = reg.by_entry.get(entry).cloned().ok_or(CoordError::NoPersistentEntry)?;
        let r = reg.registrations.get_mut(&id).expect("indexed");
        match r.state {
            RegState::Entered | RegState::Declined => return Err(CoordError::NotConsented),
            RegState::Consented | RegState::Recovered => r.set_state(RegState::Instructed, now),
            RegState::Instructed | RegState::Claimed => {}
        }
        let out = r.clone();
        self.persist(&reg)?;
        Ok(out)
    }

    /// Issues the participant config for the registration behind `entry`.
    /// The first claim assigns the arm; later claims return the same config.
    pub fn claim_config(&self, entry: Option<&str>) -> Result<ParticipantConfig, CoordError> {
        let entry = entry.filter(|e| !e.is_empty()).ok_or(CoordError::NoPersistentEntry)?;
        let mut reg = self.registry.lock();
        let now = self.now();
        let id = reg.by_entry.get(entry).cloned().ok_or(CoordError::NoPersistentEntry)?;
        let r = reg.registrations.get_mut(&id).expect("indexed");
        match r.state {
            RegState::Entered | RegState::Declined => return Err(CoordError::NotConsented),
            RegState::Consented | RegState::Recovered => return Err(CoordError::NotInstructed),
            RegState::Instructed | RegState::Claimed => {}
        }
        r.claims += 1;
        if let Some(config) = &r.config {
            tracing::info!(registration = %id, claims = r.claims, "config re-issued");
            let config = config.clone();
            self.persist(&reg)?;
            return Ok(config);
        }
        let participant_id = ParticipantId(format!("P{}", &self.token()[..16]));
        let forced = r
            .recruitment_params
            .get(FORCED_ARM_KEY)
            .filter(|_| self.study.allow_forced_arm)
            .cloned();
        let arm_label = match forced {
            Some(label) => self.study.arm(&label).ok_or_else(|| CoordError::UnknownArm(label.clone()))?.label.clone(),
            None => {
                let weights: Vec<(String, f64)> = self.study.arms.iter().map(|a| (a.label.clone(), a.weight)).collect();
                assign_condition(&participant_id, &weights, self.study.assignment_seed)?
            }
        };
        let arm = self.study.arm(&arm_label).expect("assigned arm exists");
        let contact = r
            .recruitment_params
            .get("email")
            .map(|e| Contact { email: e.clone(), consented: r.recruitment_params.get("email_consent").is_some_and(|v| v == "1" || v == "true") });
        let config = ParticipantConfig {
            participant_id,
            token: self.token(),
            arm: arm.label.clone(),
            plan_ref: arm.plan.as_ref().map(|p| p.id.clone()),
            mode: arm.mode,
            plan: arm.plan.clone().filter(|_| arm.mode == ClientMode::Local),
            survey_schedule: self.study.schedule.clone(),
            contact,
            timezone: r.recruitment_params.get("tz").cloned().unwrap_or_else(|| self.study.default_timezone.clone()),
            recruitment_params: r.recruitment_params.clone(),
            issued_at: now,
        };
        r.config = Some(config.clone());
        r.set_state(RegState::Claimed, now);
        reg.by_token.insert(config.token.clone(), id);
        self.persist(&reg)?;
        Ok(config)
    }

    /// A link that rebuilds the persistent entry in any browser.
    pub fn issue_recovery_link(&self, registration_id: &str) -> Result<String, CoordError> {
        let reg = self.registry.lock();
        let r = reg.registrations.get(registration_id).ok_or(CoordError::UnknownRegistration)?;
        let query: String = form_urlencoded::Serializer::new(String::new())
            .extend_pairs(r.recruitment_params.iter())
            .finish();
        Ok(format!("{}/reg/recover/{}?{}", self.study.base_url, r.persistent_entry_value, query))
    }

    /// Opens a recovery link. In-progress registrations return to the
    /// instructions step; declined ones stay closed; claimed ones stay claimed.
    /// An unknown entry with a recruitment id in `params` resumes by that id.
    pub fn open_recovery(&self, entry: &str, params: IndexMap<String, String>) -> Result<RegistrationSession, CoordError> {
        let id = {
            let reg = self.registry.lock();
            reg.by_entry.get(entry).cloned().or_else(|| {
                params.get(RECRUITMENT_KEY).and_then(|rid| reg.by_recruitment.get(rid)).cloned()
            })
        };
        let id = match id {
            Some(id) => id,
            None if params.contains_key(RECRUITMENT_KEY) => self.begin_registration(params)?.registration_id,
            None => return Err(CoordError::UnknownRegistration),
        };
        let mut reg = self.registry.lock();
        let now = self.now();
        let r = reg.registrations.get_mut(&id).expect("indexed");
        if matches!(r.state, RegState::Consented | RegState::Instructed | RegState::Recovered) {
            r.set_state(RegState::Recovered, now);
            r.set_state(RegState::Instructed, now);
        }
        let out = r.clone();
        self.persist(&reg)?;
        Ok(out)
    }

    /// Resolves a participant token to its config.
    pub fn authenticate(&self, token: &str) -> Option<ParticipantConfig> {
        let reg = self.registry.lock();
        let id = reg.by_token.get(token)?;
        let r = &reg.registrations[id];
        (r.state == RegState::Claimed).then(|| r.config.clone()).flatten()
    }

    pub fn configs(&self) -> Vec<ParticipantConfig> {
        self.registry.lock().registrations.values().filter_map(|r| r.config.clone()).collect()
    }

    /// Arm per participant, for reports.
    pub fn arm_map(&self) -> BTreeMap<ParticipantId, String> {
        self.configs().into_iter().map(|c| (c.participant_id, c.arm)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn study() -> StudyDesign {
        StudyDesign::new(
            "s",
            vec![Arm::control("control", 0.5), Arm::treatment("treatment", 0.5, TransformPlan::identity("id"))],
            7,
        )
    }

    fn coordinator() -> Coordinator {
        Coordinator::new(study(), ManualClock::new(1_000), 1).unwrap()
    }

    fn params(rid: &str) -> IndexMap<String, String> {
        [(RECRUITMENT_KEY.to_string(), rid.to_string()), ("q1".to_string(), "a b&c=é".to_string())].into_iter().collect()
    }

    #[test]
    fn happy_path() {
        let c = coordinator();
        let b = c.begin_registration(params("r1")).unwrap();
        assert_eq!(b.state, RegState::Entered);
        assert_eq!(c.claim_config(Some(&b.persistent_entry_value)), Err(CoordError::NotConsented));
        assert_eq!(c.record_consent(&b.registration_id, true).unwrap(), RegState::Consented);
        assert_eq!(c.record_consent(&b.registration_id, true).unwrap(), RegState::Consented);
        assert_eq!(c.claim_config(Some(&b.persistent_entry_value)), Err(CoordError::NotInstructed));
        c.view_instructions(Some(&b.persistent_entry_value)).unwrap();
        let cfg = c.claim_config(Some(&b.persistent_entry_value)).unwrap();
        assert_eq!(cfg.recruitment_params, params("r1"));
        let again = c.claim_config(Some(&b.persistent_entry_value)).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(c.authenticate(&cfg.token).unwrap().participant_id, cfg.participant_id);
    }

    #[test]
    fn same_recruitment_id_resumes() {
        let c = coordinator();
        let a = c.begin_registration(params("r1")).unwrap();
        let b = c.begin_registration(params("r1")).unwrap();
        assert_eq!(a.registration_id, b.registration_id);
        assert!(b.resumed);
    }

    #[test]
    fn missing_cookie() {
        assert_eq!(coordinator().claim_config(None), Err(CoordError::NoPersistentEntry));
        assert_eq!(coordinator().claim_config(Some("nope")), Err(CoordError::NoPersistentEntry));
    }

    #[test]
    fn declined_stays_closed() {
        let c = coordinator();
        let b = c.begin_registration(params("r1")).unwrap();
        assert_eq!(c.record_consent(&b.registration_id, false).unwrap(), RegState::Declined);
        assert_eq!(c.record_consent(&b.registration_id, true).unwrap(), RegState::Declined);
        let r = c.open_recovery(&b.persistent_entry_value, IndexMap::new()).unwrap();
        assert_eq!(r.state, RegState::Declined);
        assert_eq!(c.claim_config(Some(&b.persistent_entry_value)), Err(CoordError::NotConsented));
    }

    #[test]
    fn recovery_returns_to_instructions() {
        let c = coordinator();
        let b = c.begin_registration(params("r1")).unwrap();
        c.record_consent(&b.registration_id, true).unwrap();
        let link = c.issue_recovery_link(&b.registration_id).unwrap();
        assert!(link.starts_with(&format!("/reg/recover/{}?recruitment_id=r1", b.persistent_entry_value)));
        let r = c.open_recovery(&b.persistent_entry_value, IndexMap::new()).unwrap();
        assert_eq!(r.state, RegState::Instructed);
        assert!(r.history.iter().any(|(s, _)| *s == RegState::Recovered));
        let r2 = c.open_recovery(&b.persistent_entry_value, IndexMap::new()).unwrap();
        assert_eq!(r2.state, RegState::Instructed);
    }

    #[test]
    fn unknown_registration() {
        let c = coordinator();
        assert_eq!(c.record_consent("reg-x", true), Err(CoordError::UnknownRegistration));
        assert_eq!(c.issue_recovery_link("reg-x"), Err(CoordError::UnknownRegistration));
    }

    #[test]
    fn assignment_is_deterministic() {
        let arms = vec![("A".to_string(), 0.5), ("B".to_string(), 0.5)];
        let id = ParticipantId::from("P1");
        assert_eq!(assign_condition(&id, &arms, 3).unwrap(), assign_condition(&id, &arms, 3).unwrap());
        let only_a = vec![("A".to_string(), 1.0)];
        for i in 0..100 {
            assert_eq!(assign_condition(&format!("P{i}").into(), &only_a, 3).unwrap(), "A");
        }
        assert!(matches!(
            assign_condition(&id, &[("A".into(), 0.6), ("B".into(), 0.6)], 3),
            Err(CoordError::WeightsInvalid(_))
        ));
    }

    #[test]
    fn ineligible_is_rejected() {
        let mut s = study();
        s.eligibility.required.insert("country".into(), vec!["DE".into()]);
        let c = Coordinator::new(s, ManualClock::new(0), 1).unwrap();
        assert!(matches!(c.begin_registration(params("r1")), Err(CoordError::Ineligible(_))));
    }

    #[test]
    fn snapshot_restores_registry() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("registry.json");
        let c = coordinator().with_snapshot(&path).unwrap();
        let b = c.begin_registration(params("r1")).unwrap();
        c.record_consent(&b.registration_id, true).unwrap();
        c.view_instructions(Some(&b.persistent_entry_value)).unwrap();
        let cfg = c.claim_config(Some(&b.persistent_entry_value)).unwrap();
        drop(c);
        let c = coordinator().with_snapshot(&path).unwrap();
        assert_eq!(c.authenticate(&cfg.token).unwrap(), cfg);
        assert!(c.begin_registration(params("r1")).unwrap().resumed);
    }
}
