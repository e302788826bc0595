//! Training pairs must see exactly the conditioning the controller builds online.

use prodapt_core::controller::{ControllerConfig, EpisodeMemory};
use prodapt_core::data::{collect, fit_normalization, make_pairs, replay_keypoints, CollectConfig};
use prodapt_core::keypoints::KeypointConfig;

#[test]
fn offline_pairs_match_online_memory_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (_, demos) = collect(&CollectConfig::new(10, 31), dir.path()).unwrap();
    let kp = KeypointConfig::default();
    let norm = fit_normalization(&demos, &kp).unwrap();
    for cfg in [ControllerConfig::default(), ControllerConfig::baseline(3), ControllerConfig::baseline(50)] {
        let pairs = make_pairs(&demos, &cfg, &kp, &norm);
        assert_eq!(pairs.len(), demos.iter().map(|d| d.ticks.len()).sum::<usize>());
        let mut k = 0;
        for demo in &demos {
            let mut memory = EpisodeMemory::new(kp);
            for tick in &demo.ticks {
                memory.push(tick.obs, tick.t);
                let online = memory.conditioning(&cfg, &norm).flatten();
                assert_eq!(online.len(), cfg.cond_dim());
                let same = online.iter().zip(&pairs[k].cond).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same && online.len() == pairs[k].cond.len(), "pair {k} differs (h_o {})", cfg.h_o);
                k += 1;
            }
        }
    }
}

#[test]
fn keypoint_slots_fill_on_contact_demos() {
    let dir = tempfile::tempdir().unwrap();
    let (_, demos) = collect(&CollectConfig::new(10, 32), dir.path()).unwrap();
    let kp = KeypointConfig::default();
    let most = demos
        .iter()
        .map(|d| {
            let mut memory = EpisodeMemory::new(kp);
            for tick in &d.ticks {
                memory.push(tick.obs, tick.t);
            }
            memory.keypoints().buffer().len()
        })
        .max()
        .unwrap();
    assert!(most > 0, "no demonstration produced a keypoint");
}

#[test]
fn replayed_final_buffer_equals_the_collection_log() {
    let dir = tempfile::tempdir().unwrap();
    let (_, demos) = collect(&CollectConfig::new(10, 33), dir.path()).unwrap();
    let kp = KeypointConfig::default();
    for (i, demo) in demos.iter().enumerate() {
        let replayed = replay_keypoints(demo, &kp).buffer().to_vec();
        let logged = &demo.keypoints[demo.keypoints.len().saturating_sub(kp.n_kp)..];
        assert_eq!(replayed.len(), logged.len(), "demo {i}");
        for (r, l) in replayed.iter().zip(logged) {
            assert_eq!(
                (r.position.x, r.position.y, r.normal_sin, r.normal_cos),
                (l.x, l.y, l.sin, l.cos),
                "demo {i}"
            );
        }
    }
}
