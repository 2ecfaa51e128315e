//! The registration flow in process: entry, consent, instructions, a lost
//! cookie recovered through the recovery link, and the final config claim.
//!
//! `cargo run -p feedlab --example registration`

use feedlab::core::clock::ManualClock;
use feedlab::core::coordination::{Arm, Coordinator, StudyDesign, RECRUITMENT_KEY};
use feedlab::core::plan::shipped_plan;
use indexmap::IndexMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut study = StudyDesign::new(
        "demo-study",
        vec![Arm::control("control", 0.5), Arm::treatment("treatment", 0.5, shipped_plan("downrank_political").expect("bundled"))],
        11,
    );
    study.base_url = "https://study.example".into();
    let coord = Coordinator::new(study, ManualClock::new(1_760_000_000_000), 99)?;

    let mut params = IndexMap::new();
    params.insert(RECRUITMENT_KEY.to_string(), "panel-0042".to_string());
    params.insert("tz".to_string(), "+02:00".to_string());
    let begin = coord.begin_registration(params)?;
    println!("registration {} state {:?}", begin.registration_id, begin.state);
    println!("consent: {:?}", coord.record_consent(&begin.registration_id, true)?);

    let link = coord.issue_recovery_link(&begin.registration_id)?;
    println!("recovery link {link}");
    // A second browser without the cookie follows the link.
    let (entry, query) = link.rsplit_once("/reg/recover/").map(|(_, rest)| rest.split_once('?').unwrap_or((rest, ""))).expect("link shape");
    let query: IndexMap<String, String> =
        query.split('&').filter_map(|kv| kv.split_once('=')).map(|(k, v)| (k.into(), v.into())).collect();
    let session = coord.open_recovery(entry, query)?;
    println!("recovered, state {:?}", session.state);

    let cfg = coord.claim_config(Some(entry))?;
    let again = coord.claim_config(Some(&begin.persistent_entry_value))?;
    assert_eq!(cfg, again);
    println!("participant {} arm {} mode {:?} tz {}", cfg.participant_id, cfg.arm, cfg.mode, cfg.timezone);
    Ok(())
}
