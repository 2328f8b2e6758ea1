mod common;

use logtgn::detector::Decision;

#[test]
fn unseen_templates_grow_memory_and_get_verdicts() {
    let out = common::unseen_templates_run(3);
    assert_eq!(out.memory_before, 5);
    assert_eq!(out.memory_after, 10);
    assert_eq!(out.verdicts.len(), out.test_events);
    let seqs: Vec<usize> = out.verdicts.iter().map(|v| v.seq_index).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    for v in &out.verdicts {
        assert_eq!(v.decision == Decision::Anomaly, v.trigger_hop.is_some());
        assert!(v.probabilities.iter().all(|&(_, p)| (0.0..=1.0).contains(&p)));
    }
}
