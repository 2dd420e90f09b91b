use qrw_core::corpus::{difficulty_score, Scheme};
use qrw_core::metrics::BleuConfig;
use qrw_harness::synth::{gen_synthetic, SyntheticSpec, RECIPES};
use qrw_harness::HarnessError;

fn small(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        train_per_class: 40,
        valid_per_class: 30,
        test_per_class: 30,
        ..SyntheticSpec::new(seed)
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(&small(17)).unwrap().write(a.path()).unwrap();
    gen_synthetic(&small(17)).unwrap().write(b.path()).unwrap();
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let other = gen_synthetic(&small(18)).unwrap();
    assert_ne!(other.train, gen_synthetic(&small(17)).unwrap().train);
}

#[test]
fn class_counts_match_the_spec_exactly() {
    let spec = small(5);
    let c = gen_synthetic(&spec).unwrap();
    for (name, recs, n) in [
        ("train", &c.train, spec.train_per_class),
        ("valid", &c.valid, spec.valid_per_class),
        ("test", &c.test, spec.test_per_class),
    ] {
        for recipe in RECIPES {
            let k = recs.iter().filter(|r| r.class_label.as_deref() == Some(recipe)).count();
            assert_eq!(k, n, "{name}/{recipe}");
        }
    }
}

#[test]
fn every_record_scores_into_its_recipe_class() {
    let c = gen_synthetic(&small(9)).unwrap();
    let scheme = Scheme::table3();
    let labels = scheme.labels();
    let bleu = BleuConfig::default();
    for (_, recs) in c.splits() {
        for r in recs {
            let z = difficulty_score(r, true, &bleu).unwrap();
            let class = scheme.classify(z).map(|i| labels[i].as_str());
            assert_eq!(class, r.class_label.as_deref(), "{}", r.id());
        }
    }
}

#[test]
fn easy_records_need_the_pronoun_rule_to_score_one() {
    let c = gen_synthetic(&small(11)).unwrap();
    let bleu = BleuConfig::default();
    let easy: Vec<_> = c.train.iter().filter(|r| r.class_label.as_deref() == Some("easy")).collect();
    assert!(!easy.is_empty());
    for r in easy {
        assert!(difficulty_score(r, false, &bleu).unwrap() < 1.0, "{}", r.id());
        assert_eq!(difficulty_score(r, true, &bleu).unwrap(), 1.0, "{}", r.id());
    }
}

#[test]
fn too_few_records_per_class_is_a_config_error() {
    let spec = SyntheticSpec {
        valid_per_class: 29,
        ..SyntheticSpec::new(1)
    };
    assert!(matches!(gen_synthetic(&spec), Err(HarnessError::Config(_))));
}
