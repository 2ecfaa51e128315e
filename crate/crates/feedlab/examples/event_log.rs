//! The append-only event log: append, reopen, withdraw a participant,
//! compact, and export CSV.
//!
//! `cargo run -p feedlab --example event_log`

use feedlab::core::measurement::{EngagementEvent, EngagementKind};
use feedlab::core::model::ParticipantId;
use feedlab::core::store::{export_csv, EventStore, NewRecord, RecordBody, RecordFilter, StoreConfig};

fn like(p: &str, seq: u64) -> NewRecord {
    let body = RecordBody::Engagement(EngagementEvent {
        participant_id: p.into(),
        post_id: Some("m000001".into()),
        kind: EngagementKind::Like,
        value: None,
        occurred_at: 1_760_000_000_000 + seq as i64,
    });
    NewRecord::new(p.into(), 1_760_000_000_000 + seq as i64, body).in_session("s".into(), Some(seq))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = EventStore::open(StoreConfig::new(dir.path().join("events")))?;
    let offsets = store.append_batch((1..=3).map(|i| like("P1", i)).chain((1..=2).map(|i| like("P2", i))).collect())?;
    println!("appended at offsets {offsets:?}");
    drop(store);

    let store = EventStore::open(StoreConfig::new(dir.path().join("events")))?;
    println!("reopened with {} records", store.len());
    store.withdraw(&ParticipantId::from("P1"), "requested", 1_760_000_100_000)?;
    println!("P1 withdrawn: {}; visible records {}", store.is_withdrawn(&"P1".into()), store.scan(0, &RecordFilter::all()).len());
    println!("compaction removed {}", store.compact()?);

    for f in export_csv(&store.scan(0, &RecordFilter::all()), &dir.path().join("export"))? {
        println!("--- {}\n{}", f.display(), std::fs::read_to_string(&f)?);
    }
    Ok(())
}
