use std::sync::OnceLock;

use objret::embedstore::{build_store, EmbeddingStore};
use objret::geometry::{iou, Rect};
use objret::metrics::average_recall;
use objret::probe::{collect_training_set, train_probe, AnchorConfig, ObjectnessProbe, ProbeTrainConfig};
use objret::recret::{
    assemble_candidates, check_injection, score_candidates, RecQuery, ToyScorer, DEFAULT_INJECT_IOU,
};
use objret::retrieval::{evaluate_leaf_retrieval, DEFAULT_THRESHOLD};
use objret::synthworld::{generate_corpus, Corpus, WorldConfig};
use proptest::prelude::*;

fn trained_store(cfg: &WorldConfig, k: usize) -> (Corpus, EmbeddingStore) {
    let corpus = generate_corpus(cfg).unwrap();
    let anchors = AnchorConfig::default();
    let data = collect_training_set(&corpus.scenes, &anchors).unwrap();
    let probe = train_probe(&data, &ProbeTrainConfig { seed: cfg.seed, ..Default::default() }).unwrap().probe;
    let store = build_store(&corpus, &probe, &anchors.with_k(k)).unwrap();
    (corpus, store)
}

#[test]
fn trained_probe_recalls_every_object() {
    let (corpus, store) = trained_store(&WorldConfig::new(200, 64, 0), 300);
    let (props, gts) = (store.proposal_map(), corpus.gt_by_image());
    let r100 = average_recall(&props, &gts, 100);
    let r300 = average_recall(&props, &gts, 300);
    assert!(r100.ar50 >= 0.99, "{r100:?}");
    assert!(r300.ar_avg >= r100.ar_avg && r300.ar50 >= r100.ar50);
}

#[test]
fn leaf_retrieval_is_exact_without_noise_and_robust_with_it() {
    let (corpus, store) = trained_store(&WorldConfig::new(200, 64, 1), 100);
    let r = evaluate_leaf_retrieval(&corpus, &store, DEFAULT_THRESHOLD, false).unwrap();
    assert_eq!(r.macro_avg.f1, Some(1.0));

    let (corpus, store) = trained_store(&WorldConfig::new(200, 64, 1).with_noise(0.3), 100);
    let r = evaluate_leaf_retrieval(&corpus, &store, DEFAULT_THRESHOLD, false).unwrap();
    assert!(r.macro_avg.f1.unwrap() >= 0.8, "{r:?}");
    let mut prev: Option<objret::retrieval::RetrievalReport> = None;
    for t in [-1.0, 0.0, 0.2, 0.5, 0.9] {
        let fed = evaluate_leaf_retrieval(&corpus, &store, t, true).unwrap();
        assert!(fed.macro_avg.p.is_none() && fed.macro_avg.f1.is_none());
        if let Some(p) = &prev {
            for (c, v) in &fed.per_class {
                assert!(v.r <= p.per_class[c].r, "{c} at {t}");
            }
        }
        prev = Some(fed);
    }
}

struct Fixture {
    corpus: Corpus,
    store: EmbeddingStore,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = generate_corpus(&WorldConfig::new(8, 16, 4)).unwrap();
        let store = build_store(&corpus, &ObjectnessProbe::init(16, 4), &AnchorConfig::default().with_k(12)).unwrap();
        Fixture { corpus, store }
    })
}

fn shuffle(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut objret::rng::stream(seed, "perm"));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scorer_is_permutation_invariant(img in 0usize..8, seed in any::<u64>(), term in 0usize..4) {
        let f = fixture();
        let scene = &f.corpus.scenes[img];
        let rec = f.store.get(&scene.image_id).unwrap();
        let cands = assemble_candidates(scene, rec, &scene.gt_boxes(), DEFAULT_INJECT_IOU).unwrap();
        let terms = [vec!["red_car".to_string()], vec!["leftmost".into(), "dog".into()], vec!["animal".into()], vec!["rightmost".into(), "green_bus".into()]];
        let q = RecQuery::compose(&f.corpus.embedder, &terms[term]).unwrap();
        let scorer = ToyScorer::init(16, 6, seed);
        let base = score_candidates(&scorer, &q, &cands).unwrap();
        let perm = shuffle(cands.len(), seed);
        let moved = score_candidates(&scorer, &q, &cands.permuted(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(moved.scores[i].to_bits(), base.scores[p].to_bits());
        }
        prop_assert_eq!(scorer.invocations(), 2);
    }

    #[test]
    fn injection_covers_arbitrary_ground_truth(
        img in 0usize..8,
        raw in prop::collection::vec((0.0..56.0f64, 0.0..56.0f64, 1.0..30.0f64, 1.0..30.0f64), 0..6),
    ) {
        let f = fixture();
        let scene = &f.corpus.scenes[img];
        let rec = f.store.get(&scene.image_id).unwrap();
        let gts: Vec<_> = raw
            .iter()
            .map(|&(x, y, w, h)| Rect::new(x, y, (x + w).min(64.0), (y + h).min(64.0)).unwrap())
            .collect();
        let cands = assemble_candidates(scene, rec, &gts, DEFAULT_INJECT_IOU).unwrap();
        prop_assert!(check_injection(&cands, &gts, 0.5).is_ok());
        for g in &gts {
            prop_assert!(cands.boxes.iter().any(|b| iou(b, g) >= 0.5));
        }
        prop_assert_eq!(cands.len(), rec.len() + cands.injected());
    }
}
