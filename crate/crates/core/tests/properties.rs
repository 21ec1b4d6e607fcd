use std::collections::BTreeMap;
use std::num::NonZeroUsize;

use bikelane_core::evaluate::{byte_histogram, parse_verdict, rank_order, RankedEntry, RankedPool, VerdictMode};
use bikelane_core::metrics::{
    accept_case, evaluator_accuracy, ComplianceRecord, ConstraintStatus, FidelityScore, GoldLabel,
};
use bikelane_core::template::{placeholders, PromptTemplate};
use bikelane_core::workflow::replay;
use bikelane_core::{
    apply_mask, cosine_similarity, select_final, top_k, Disposition, Embedding, Mask, Raster, Rgb, Verdict,
};
use proptest::prelude::*;

fn nonzero_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..24).prop_flat_map(|n| {
        let v = prop::collection::vec(-1e3f64..1e3, n).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-6));
        (v.clone(), v)
    })
}

fn emb(v: &[f64]) -> Embedding {
    Embedding::new(v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cosine_is_bounded_symmetric_and_reflexive((a, b) in nonzero_pair()) {
        let (ea, eb) = (emb(&a), emb(&b));
        let ab = cosine_similarity(&ea, &eb).unwrap();
        let ba = cosine_similarity(&eb, &ea).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((cosine_similarity(&ea, &ea).unwrap() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn common_positive_scaling_keeps_the_ranking(
        reference in prop::collection::vec(0.01f64..10.0, 8),
        pool in prop::collection::vec(prop::collection::vec(0.01f64..10.0, 8), 5..=10),
        factor in 1e-3f64..1e3,
    ) {
        let r = emb(&reference);
        let rank = |scale: f64| {
            let entries = pool
                .iter()
                .enumerate()
                .map(|(i, v)| RankedEntry {
                    candidate_id: format!("c{i}"),
                    similarity: Some(cosine_similarity(&emb(v).scaled(scale).unwrap(), &r).unwrap()),
                    empty_mask: false,
                })
                .collect();
            RankedPool::new("ds1", true, entries)
        };
        let (plain, scaled) = (rank(1.0), rank(factor));
        for e in &plain.entries {
            let other = scaled.similarity_of(&e.candidate_id).unwrap();
            prop_assert!((e.similarity.unwrap() - other).abs() <= 1e-12);
        }
        let gaps_clear = plain.entries.windows(2).all(|w| w[0].similarity.unwrap() - w[1].similarity.unwrap() > 1e-9);
        if gaps_clear {
            let ids = |p: &RankedPool| p.entries.iter().map(|e| e.candidate_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&plain), ids(&scaled));
        }
    }

    #[test]
    fn ranking_matches_brute_force(
        sims in prop::collection::vec(prop::option::weighted(0.9, (0u8..20).prop_map(|q| f64::from(q) / 19.0)), 5..=10),
        k in 1usize..=5,
    ) {
        let entries: Vec<RankedEntry> = sims
            .iter()
            .enumerate()
            .map(|(i, s)| RankedEntry { candidate_id: format!("cand-{i:02}"), similarity: *s, empty_mask: false })
            .collect();
        let pool = RankedPool::new("ds2", true, entries.clone());

        // Selection sort: repeatedly take the best remaining entry.
        let mut remaining = entries;
        let mut expected = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (a, b) = (&remaining[i], &remaining[best]);
                let better = match (a.similarity, b.similarity) {
                    (Some(x), Some(y)) => x > y || (x == y && a.candidate_id < b.candidate_id),
                    (Some(_), None) => true,
                    (None, Some(_)) => false,
                    (None, None) => a.candidate_id < b.candidate_id,
                };
                if better {
                    best = i;
                }
            }
            expected.push(remaining.remove(best));
        }
        prop_assert_eq!(&pool.entries, &expected);

        let top = top_k(&pool, NonZeroUsize::new(k).unwrap());
        let scored: Vec<&RankedEntry> = expected.iter().filter(|e| e.similarity.is_some()).collect();
        prop_assert_eq!(top.len(), k.min(scored.len()));
        for (id, e) in top.iter().zip(&scored) {
            prop_assert_eq!(id, &e.candidate_id);
        }
        let cutoff = top.len().checked_sub(1).map(|i| scored[i].similarity.unwrap());
        if let Some(c) = cutoff {
            for e in &scored[top.len()..] {
                prop_assert!(e.similarity.unwrap() <= c);
            }
        }
    }

    #[test]
    fn rank_order_is_a_total_order(
        a in prop::option::of(0.0f64..1.0),
        b in prop::option::of(0.0f64..1.0),
        ida in "[a-c]{1,2}",
        idb in "[a-c]{1,2}",
    ) {
        let ea = RankedEntry { candidate_id: ida, similarity: a, empty_mask: false };
        let eb = RankedEntry { candidate_id: idb, similarity: b, empty_mask: false };
        prop_assert_eq!(rank_order(&ea, &eb), rank_order(&eb, &ea).reverse());
    }

    #[test]
    fn masking_only_sees_pixels_inside_the_mask(
        w in 1u32..24,
        h in 1u32..24,
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let mask = Mask::from_fn(w, h, |_, _| next() % 3 != 0);
        let inside: Vec<u8> = (0..w * h * 3).map(|_| next() as u8).collect();
        let mut other = inside.clone();
        for (i, px) in other.chunks_exact_mut(3).enumerate() {
            if mask.bits()[i] == 0 {
                px.copy_from_slice(&[next() as u8, next() as u8, next() as u8]);
            }
        }
        let a = Raster::from_rgb8(w, h, inside).unwrap();
        let b = Raster::from_rgb8(w, h, other).unwrap();
        let ma = apply_mask(&a, &mask, Rgb::MID_GRAY).unwrap();
        let mb = apply_mask(&b, &mask, Rgb::MID_GRAY).unwrap();
        prop_assert_eq!(&ma, &mb);
        let reference = byte_histogram(&Raster::filled(w, h, Rgb([30, 160, 60])), 32);
        let (sa, sb) = (
            cosine_similarity(&byte_histogram(&ma, 32), &reference).unwrap(),
            cosine_similarity(&byte_histogram(&mb, 32), &reference).unwrap(),
        );
        prop_assert!((sa - sb).abs() <= 1e-12);
    }

    #[test]
    fn strict_verdicts_accept_only_exact_tokens(raw in "[ A-Za-z.!]{0,6}") {
        match parse_verdict(&raw, VerdictMode::Strict) {
            Ok(p) => {
                let t = raw.trim().to_lowercase();
                prop_assert!(t == "yes" || t == "no");
                prop_assert_eq!(p.flagged, raw != t);
            }
            Err(_) => {
                let t = raw.trim().to_lowercase();
                prop_assert!(t != "yes" && t != "no");
            }
        }
        if let Ok(strict) = parse_verdict(&raw, VerdictMode::Strict) {
            prop_assert_eq!(parse_verdict(&raw, VerdictMode::Lenient).unwrap().verdict, strict.verdict);
        }
    }

    #[test]
    fn accuracy_ignores_label_order_and_grows_with_matches(
        outcomes in prop::collection::vec((1u8..=8, any::<bool>()), 1..120),
        rotate in 0usize..120,
    ) {
        let mut labels = Vec::new();
        let mut picks = BTreeMap::new();
        for (i, (scenario, hit)) in outcomes.iter().enumerate() {
            let case_id = format!("case-{i}");
            labels.push(GoldLabel { case_id: case_id.clone(), scenario_id: *scenario, correct_candidate_id: "r1-c1".into() });
            picks.insert(case_id, if *hit { "r1-c1".to_string() } else { "r1-c2".to_string() });
        }
        let table = evaluator_accuracy(&labels, &picks).unwrap();
        let mut shuffled = labels.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rotate % n);
        shuffled.reverse();
        prop_assert_eq!(&evaluator_accuracy(&shuffled, &picks).unwrap(), &table);

        if let Some(miss) = outcomes.iter().position(|(_, hit)| !hit) {
            picks.insert(format!("case-{miss}"), "r1-c1".into());
            let better = evaluator_accuracy(&labels, &picks).unwrap();
            let scenario = outcomes[miss].0;
            prop_assert!(better.row(scenario).unwrap().percent_tenths >= table.row(scenario).unwrap().percent_tenths);
            prop_assert!(better.overall.unwrap().matches == table.overall.unwrap().matches + 1);
        }
    }

    #[test]
    fn accept_case_requires_every_condition(
        lane in 1u8..=5,
        scene in 1u8..=5,
        background in 1u8..=5,
        flag in any::<bool>(),
        hard_ok in any::<bool>(),
    ) {
        let mut f = FidelityScore::new(lane, scene, background);
        f.background_change_flag = flag;
        let mut c = ComplianceRecord::default();
        c.hard.insert("left".into(), if hard_ok { ConstraintStatus::Satisfied } else { ConstraintStatus::Unsatisfied });
        let mean = (f64::from(lane) + f64::from(scene) + f64::from(background)) / 3.0;
        let expected = mean >= 4.0 - 1e-9 && !flag && hard_ok;
        prop_assert_eq!(accept_case(&f, &c, 0.0), expected);
    }

    #[test]
    fn rendering_with_a_complete_map_leaves_no_placeholders(
        names in prop::collection::btree_set("[A-Z][A-Z_]{0,8}", 1..6),
        value in "[a-z {}]{0,12}",
    ) {
        let body: String = names.iter().map(|n| format!("x {{{n}}} y ")).collect();
        let t = PromptTemplate::parse("p", &format!("[system]\n{body}\n[user]\n{body}\n")).unwrap();
        let value = value.to_lowercase();
        let vars: BTreeMap<&str, &str> = names.iter().map(|n| (n.as_str(), value.as_str())).collect();
        let r = t.render(&vars).unwrap();
        prop_assert!(placeholders(&r.system).is_empty());
        prop_assert!(placeholders(&r.user).is_empty());
    }
}

// Run state machine --------------------------------------------------------

#[path = "support/state_machine.rs"]
mod state_machine;

use state_machine::{check_exhaustive, walk, MAX_ROUNDS};

#[test]
fn every_state_event_pair_follows_the_graph() {
    let probes = check_exhaustive(400).unwrap();
    assert!(probes > 10_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn replay_rebuilds_random_legal_runs(choices in prop::collection::vec(any::<u16>(), 1..80)) {
        let (log, run) = walk(&choices, false);
        prop_assert_eq!(replay(&log).unwrap(), run);
        let text: Vec<String> = log.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        let parsed: Vec<_> = text.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
        prop_assert_eq!(replay(&parsed).unwrap(), replay(&log).unwrap());
    }

    #[test]
    fn all_no_verdicts_never_exceed_the_round_budget(choices in prop::collection::vec(any::<u16>(), 1..120)) {
        let (_, run) = walk(&choices, true);
        prop_assert!(run.round <= MAX_ROUNDS);
        prop_assert!(run.agent_selection.is_none());
    }

    #[test]
    fn select_final_disposition(
        verdicts in prop::collection::vec(prop_oneof![Just(Verdict::Yes), Just(Verdict::No)], 3),
        round in 1u32..=3,
    ) {
        let entries = (0..5).map(|i| RankedEntry { candidate_id: format!("c{i}"), similarity: Some(1.0 - f64::from(i) / 10.0), empty_mask: false }).collect();
        let pool = RankedPool::new("ds1", true, entries);
        let map: BTreeMap<String, Verdict> = verdicts.iter().enumerate().map(|(i, v)| (format!("c{i}"), *v)).collect();
        let out = select_final(&pool, &map, NonZeroUsize::new(3).unwrap(), round, 3).unwrap();
        let first_yes = verdicts.iter().position(|v| *v == Verdict::Yes).map(|i| format!("c{i}"));
        prop_assert_eq!(&out.selected, &first_yes);
        let want = match (first_yes.is_some(), round < 3) {
            (true, _) => Disposition::Selected,
            (false, true) => Disposition::Regenerate,
            (false, false) => Disposition::Exhausted,
        };
        prop_assert_eq!(out.disposition, want);
    }
}
