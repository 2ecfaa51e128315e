use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::sync::Arc;

use feedlab_core::measurement::{engagement_report, EngagementEvent, EngagementKind, Grouping};
use feedlab_core::model::ParticipantId;
use feedlab_core::store::{
    decode_segment, encode_record, segment_name, EventRecord, EventStore, NewRecord, RecordBody, RecordFilter,
    RecordKind, StoreConfig, StoreError,
};
use proptest::prelude::*;

const T0: i64 = 1_760_000_000_000;

fn like(p: &str, at: i64) -> NewRecord {
    let e = EngagementEvent {
        participant_id: p.into(),
        post_id: Some("m000001".into()),
        kind: EngagementKind::Like,
        value: None,
        occurred_at: at,
    };
    NewRecord::new(p.into(), at, RecordBody::Engagement(e)).in_session("s".into(), None)
}

#[test]
fn concurrent_appends_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(EventStore::open(StoreConfig::new(dir.path())).unwrap());
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let store = store.clone();
            std::thread::spawn(move || {
                (0..100).map(|i| store.append(like(&format!("P{t}"), T0 + i)).unwrap()).collect::<Vec<u64>>()
            })
        })
        .collect();
    let mut acked: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    acked.sort_unstable();
    assert_eq!(acked, (0..400).collect::<Vec<_>>());
    let before = store.scan(0, &RecordFilter::all());
    drop(store);

    let reopened = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    assert_eq!(reopened.scan(0, &RecordFilter::all()), before);
    assert_eq!(reopened.next_offset(), 400);
}

#[test]
fn records_span_day_segments() {
    let dir = tempfile::tempdir().unwrap();
    let store = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    store.append(like("P1", T0)).unwrap();
    store.append(like("P1", T0 + 86_400_000)).unwrap();
    assert_ne!(segment_name(T0), segment_name(T0 + 86_400_000));
    drop(store);
    let store = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    assert_eq!(store.len(), 2);
}

#[test]
fn torn_tail_is_truncated_and_appends_resume() {
    let dir = tempfile::tempdir().unwrap();
    let store = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    for i in 0..10 {
        store.append(like("P1", T0 + i)).unwrap();
    }
    drop(store);
    let seg = dir.path().join(segment_name(T0));
    // A crash in the middle of the next write leaves a partial record.
    OpenOptions::new().append(true).open(&seg).unwrap().write_all(&[0, 0, 1, 0, b'{', b'"']).unwrap();

    let store = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    assert_eq!(store.len(), 10);
    assert_eq!(store.append(like("P1", T0 + 20)).unwrap(), 10);
    drop(store);
    assert_eq!(EventStore::open(StoreConfig::new(dir.path())).unwrap().len(), 11);
}

#[test]
fn mid_segment_damage_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let store = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    for i in 0..3 {
        store.append(like("P1", T0 + i)).unwrap();
    }
    drop(store);
    let seg = dir.path().join(segment_name(T0));
    let mut bytes = std::fs::read(&seg).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&seg, bytes).unwrap();
    assert!(matches!(EventStore::open(StoreConfig::new(dir.path())), Err(StoreError::Corrupt { at: 0, .. })));
}

#[test]
fn full_store_rejects_whole_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = StoreConfig::new(dir.path());
    cfg.max_bytes = Some(1000);
    let store = EventStore::open(cfg).unwrap();
    let batch: Vec<_> = (0..20).map(|i| like("P1", T0 + i)).collect();
    assert!(matches!(store.append_batch(batch), Err(StoreError::StorageFull { used: 0, limit: 1000 })));
    assert!(store.is_empty());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn withdrawal_survives_reopen_and_compaction() {
    let dir = tempfile::tempdir().unwrap();
    let store = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    for i in 0..5 {
        store.append(like("P1", T0 + i)).unwrap();
        store.append(like("P2", T0 + i)).unwrap();
    }
    store.withdraw(&"P2".into(), "participant request", T0 + 10).unwrap();
    let arms: BTreeMap<ParticipantId, String> = [("P1".into(), "a".into()), ("P2".into(), "a".into())].into();
    let report = engagement_report(&store.scan(0, &RecordFilter::all()), &arms, Grouping::Participant);
    assert!(report.row("P2").is_none());
    assert_eq!(report.row("P1").unwrap().likes, 5);
    drop(store);

    let store = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    assert!(store.is_withdrawn(&"P2".into()));
    assert!(store.scan(0, &RecordFilter::all().participant("P2")).is_empty());
    let before = store.bytes_used();
    assert_eq!(store.compact().unwrap(), 5);
    assert!(store.bytes_used() < before);
    drop(store);

    let store = EventStore::open(StoreConfig::new(dir.path())).unwrap();
    assert_eq!(store.len(), 6);
    assert_eq!(store.withdrawn(), vec![ParticipantId::from("P2")]);
    assert_eq!(store.scan(0, &RecordFilter::kind(RecordKind::Engagement)).len(), 5);
}

proptest! {
    #[test]
    fn segment_encoding_round_trips(n in 0usize..30, cut in 0usize..400) {
        let records: Vec<EventRecord> = (0..n)
            .map(|i| {
                let r = like(&format!("P{}", i % 3), T0 + i as i64);
                EventRecord { offset: i as u64, participant_id: r.participant_id, session_id: r.session_id, seq: Some(i as u64), server_received_at: r.server_received_at, body: r.body }
            })
            .collect();
        let bytes: Vec<u8> = records.iter().flat_map(encode_record).collect();
        let (decoded, good) = decode_segment(&bytes).unwrap();
        prop_assert_eq!(&decoded, &records);
        prop_assert_eq!(good, bytes.len());
        // Any truncation keeps a clean prefix of whole records.
        let cut = cut.min(bytes.len());
        let (prefix, good) = decode_segment(&bytes[..cut]).unwrap();
        prop_assert!(good <= cut);
        prop_assert_eq!(&prefix[..], &records[..prefix.len()]);
    }
}
