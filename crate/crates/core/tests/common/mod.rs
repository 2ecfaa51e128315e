#![allow(dead_code)]

pub mod oracle;

use std::sync::Arc;

use feedlab_core::clock::{ManualClock, SharedClock};
use feedlab_core::coordination::{Arm, Coordinator, ParticipantConfig, StudyDesign, RECRUITMENT_KEY};
use feedlab_core::payload::{serialize_feed_payload, MOCK_FORMAT_ID};
use feedlab_core::platform::{generate_inventory, serve_feed_page, Inventory, InventorySpec, Ranking};
use feedlab_core::protocol::{Backend, BackendConfig};
use feedlab_core::store::{EventStore, StoreConfig};
use feedlab_core::TransformPlan;
use indexmap::IndexMap;
use tempfile::TempDir;

pub const T0: i64 = 1_760_000_000_000;

pub struct Rig {
    pub backend: Backend,
    pub clock: Arc<ManualClock>,
    pub dir: TempDir,
}

pub fn study(arms: Vec<Arm>) -> StudyDesign {
    let mut s = StudyDesign::new("study", arms, 7);
    s.base_url = "http://coord.test".into();
    s
}

pub fn rig(study: StudyDesign) -> Rig {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T0);
    let shared: SharedClock = clock.clone();
    let coord = Arc::new(Coordinator::new(study, shared.clone(), 11).unwrap());
    let store = Arc::new(EventStore::open(StoreConfig::new(dir.path().join("events"))).unwrap());
    let backend = Backend::new(coord, store, shared, BackendConfig::default()).unwrap();
    Rig { backend, clock, dir }
}

pub fn one_arm(plan: Option<TransformPlan>) -> Rig {
    let arm = match plan {
        Some(p) => Arm::treatment("treatment", 1.0, p),
        None => Arm::control("control", 1.0),
    };
    rig(study(vec![arm]))
}

/// Walks a registration through consent, instructions and claim.
pub fn enroll(coord: &Coordinator, recruitment_id: &str) -> ParticipantConfig {
    let mut params = IndexMap::new();
    params.insert(RECRUITMENT_KEY.to_string(), recruitment_id.to_string());
    let begin = coord.begin_registration(params).unwrap();
    coord.record_consent(&begin.registration_id, true).unwrap();
    coord.view_instructions(Some(&begin.persistent_entry_value)).unwrap();
    coord.claim_config(Some(&begin.persistent_entry_value)).unwrap()
}

pub fn inventory(seed: u64, n: usize) -> Inventory {
    generate_inventory(&InventorySpec::new(seed, n, 12)).unwrap()
}

/// Consecutive mock-v1 payloads walking the engagement ranking.
pub fn payloads(inv: &Inventory, page_size: usize, pages: usize) -> Vec<Vec<u8>> {
    let mut cursor: Option<String> = None;
    let mut out = Vec::new();
    for _ in 0..pages {
        let page = serve_feed_page(inv, cursor.as_deref(), Ranking::Engagement, page_size).unwrap();
        out.push(serialize_feed_payload(&page, MOCK_FORMAT_ID).unwrap());
        if page.cursor.is_empty() {
            break;
        }
        cursor = Some(page.cursor);
    }
    out
}

pub fn plan(name: &str) -> TransformPlan {
    let text = match name {
        "downrank" => include_str!("../../plans/downrank_political.json"),
        "identity" => include_str!("../../plans/identity.json"),
        "insert" => include_str!("../../plans/insert_positive.json"),
        "remove" => include_str!("../../plans/remove_video.json"),
        other => panic!("no plan {other}"),
    };
    TransformPlan::from_json(text).unwrap()
}
