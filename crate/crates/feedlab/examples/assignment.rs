//! Deterministic weighted assignment: the same id and seed always land in
//! the same arm, and shares track the weights.
//!
//! `cargo run -p feedlab --example assignment`

use std::collections::BTreeMap;

use feedlab::core::coordination::assign_condition;
use feedlab::core::model::ParticipantId;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arms = vec![("control".to_string(), 0.5), ("downrank".to_string(), 0.3), ("insert".to_string(), 0.2)];
    for seed in [1, 2] {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for i in 0..20_000 {
            *counts.entry(assign_condition(&ParticipantId(format!("P{i}")), &arms, seed)?).or_default() += 1;
        }
        println!("seed {seed}: {counts:?}");
    }
    let id = ParticipantId("P123".into());
    println!("P123 -> {} (again {})", assign_condition(&id, &arms, 1)?, assign_condition(&id, &arms, 1)?);
    println!("bad weights -> {:?}", assign_condition(&id, &[("a".into(), 0.7), ("b".into(), 0.7)], 1).err());
    Ok(())
}
