use proptest::prelude::*;

use pmil::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use pmil::config::RunConfig;
use pmil::infer::normalize_per_class;
use pmil::mil::MilScores;
use pmil::numerics::Matrix;
use pmil::pmil::{irc_clusters, pce_pseudo_labels, PmilParams, ScfeMode};
use pmil::proposals::{
    generate_candidates, interval_iou, nms_greedy, soft_nms, threshold_regions, CandidateConfig, Proposal,
    ProposalKind, ScoredDetection, SoftNmsConfig, ThresholdMode,
};
use pmil::smil::SmilParams;

fn span(t: usize) -> impl Strategy<Value = Proposal> {
    (0..t).prop_flat_map(move |s| (Just(s), s + 1..=t)).prop_map(|(s, e)| Proposal::action(s, e))
}

fn scored(n: usize) -> impl Strategy<Value = Vec<(Proposal, f64)>> {
    prop::collection::vec((span(40), 0.0f64..1.0), 0..n)
}

fn dets(n: usize) -> impl Strategy<Value = Vec<ScoredDetection>> {
    prop::collection::vec((0.0f64..30.0, 0.1f64..10.0, 0.0f64..1.0), 0..n).prop_map(|v| {
        v.into_iter()
            .map(|(s, l, score)| ScoredDetection {
                video_id: "v".into(),
                class_id: 0,
                start_sec: s,
                end_sec: s + l,
                score,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn regions_are_disjoint_sorted_and_hit(
        a in prop::collection::vec(0.0f64..1.0, 1..64),
        theta in 0.05f64..0.95,
        min_len in 0usize..4,
    ) {
        for mode in [ThresholdMode::Above, ThresholdMode::Below] {
            let runs = threshold_regions(&a, theta, mode, min_len);
            for w in runs.windows(2) {
                prop_assert!(w[0].1 < w[1].0, "runs touch or overlap: {:?}", w);
            }
            for &(s, e) in &runs {
                prop_assert!(e - s >= min_len.max(1));
                for &v in &a[s..e] {
                    let hit = match mode {
                        ThresholdMode::Above => v > theta,
                        ThresholdMode::Below => v < theta,
                    };
                    prop_assert!(hit);
                }
            }
        }
    }

    #[test]
    fn candidates_are_unique_and_ordered(a in prop::collection::vec(0.0f64..1.0, 1..64), bkg in any::<bool>()) {
        let cfg = CandidateConfig { include_background: bkg, ..CandidateConfig::default() };
        let c = generate_candidates(&a, &cfg);
        for w in c.windows(2) {
            prop_assert!((w[0].start, w[0].end, w[0].kind) < (w[1].start, w[1].end, w[1].kind));
        }
        prop_assert!(bkg || c.iter().all(|p| p.kind == ProposalKind::Action));
        prop_assert!(c.iter().all(|p| p.end <= a.len() && p.start < p.end));
    }

    #[test]
    fn nms_survivors_respect_the_threshold(items in scored(30), thr in 0.0f64..1.0) {
        let kept = nms_greedy(&items, thr);
        let mut seen = kept.clone();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), kept.len());
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(interval_iou(&items[a].0, &items[b].0) <= thr);
            }
        }
        // every dropped item is covered by a kept one
        for j in 0..items.len() {
            if !kept.contains(&j) {
                prop_assert!(kept.iter().any(|&k| interval_iou(&items[k].0, &items[j].0) > thr));
            }
        }
    }

    #[test]
    fn soft_nms_output_is_sorted_and_above_floor(d in dets(25), sigma in 0.05f64..1.0) {
        let cfg = SoftNmsConfig { sigma, score_floor: 1e-3 };
        let out = soft_nms(d.clone(), &cfg);
        prop_assert!(out.len() <= d.len());
        prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert!(out.iter().all(|x| x.score >= cfg.score_floor));
        if let Some(top) = d.iter().map(|x| x.score).filter(|&s| s >= cfg.score_floor).reduce(f64::max) {
            prop_assert_eq!(out[0].score, top);
        }
    }

    #[test]
    fn normalized_scores_lie_in_unit_interval(d in dets(25)) {
        let n = normalize_per_class(&d);
        prop_assert_eq!(n.len(), d.len());
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(&x.score)));
        if d.len() >= 2 {
            prop_assert!(n.iter().any(|x| x.score == 1.0));
        }
    }

    #[test]
    fn pseudo_labels_cover_the_top_proposal(
        props in prop::collection::vec(span(50), 1..15),
        seed in 0u64..1000,
        gamma in 0.1f64..1.0,
    ) {
        let attention: Vec<f64> = (0..props.len()).map(|i| ((seed + 7 * i as u64) % 97) as f64 / 97.0 + 0.01).collect();
        let set = pce_pseudo_labels(&attention, &props, gamma, 0.0).unwrap();
        let top = (0..props.len()).fold(0, |b, i| if attention[i] > attention[b] { i } else { b });
        prop_assert_eq!(set.q[top], 1.0);
        prop_assert!(set.q.iter().all(|q| (0.0..=1.0).contains(q)));
    }

    #[test]
    fn clusters_contain_their_centre(props in prop::collection::vec(span(50), 1..15), seed in 0u64..1000) {
        let attention: Vec<f64> = (0..props.len()).map(|i| ((seed + 13 * i as u64) % 31) as f64 / 31.0).collect();
        let clusters = irc_clusters(&attention, &props);
        prop_assert!(!clusters.is_empty());
        for members in &clusters {
            let centre = members.iter().copied().find(|&r| {
                members.iter().all(|&i| i == r || interval_iou(&props[i], &props[r]) > 0.0)
            });
            prop_assert!(centre.is_some());
        }
    }

    #[test]
    fn supp_scores_form_distributions(
        att in prop::collection::vec(0.0f64..1.0, 1..20),
        c in 1usize..5,
        k_ratio in 0.05f64..1.0,
    ) {
        let t = att.len();
        let s = Matrix::from_vec(t, c + 1, (0..t * (c + 1)).map(|i| (i as f64 * 0.37).sin() * 3.0).collect()).unwrap();
        let out = MilScores::new(att, s, k_ratio).unwrap();
        prop_assert!(out.k() >= 1 && out.k() <= t);
        let mut labels = vec![0u8; c];
        labels[0] = 1;
        let loss = out.cls_loss(&labels).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..500, d in 1usize..6, h in 1usize..6, c in 1usize..4, m in 0usize..3) {
        let mode = [ScfeMode::Contrast, ScfeMode::Concat, ScfeMode::NoExtend][m];
        for ckpt in [Checkpoint::Smil(SmilParams::new(seed, 2 * d, h, c)), Checkpoint::Pmil(PmilParams::new(seed, d, h, c, mode))] {
            prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap(), ckpt);
        }
    }

    #[test]
    fn fingerprint_survives_serialization(seed in any::<u64>(), lr in 1e-6f64..1e-2, epochs in 1usize..300) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.smil.adam.lr = lr;
        cfg.pmil.epochs = epochs;
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back.fingerprint(), cfg.fingerprint());
        let mut other = cfg.clone();
        other.seed = seed.wrapping_add(1);
        prop_assert_ne!(other.fingerprint(), cfg.fingerprint());
    }
}
