use proptest::prelude::*;
use qrw_core::metrics::TokenSeq;
use qrw_core::model::*;
use qrw_core::training::*;
use qrw_tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent NLL: explicit log-sum-exp per position, mean over non-empty rows.
fn nll_oracle(logits: &[f64], targets: &[usize], t: usize, v: usize) -> f64 {
    let mut total = 0.0;
    let mut rows = 0;
    for (r, row) in targets.chunks(t).enumerate() {
        if row.iter().all(|&x| x == PAD) {
            continue;
        }
        rows += 1;
        for (p, &y) in row.iter().enumerate() {
            if y == PAD {
                continue;
            }
            let l = &logits[(r * t + p) * v..(r * t + p + 1) * v];
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - l[y];
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

fn loss_value(f: impl FnOnce(&mut Tape, qrw_tensor::Var) -> qrw_core::training::Result<qrw_tensor::Var>, shape: &[usize], logits: Vec<f64>) -> f64 {
    let mut t = Tape::new();
    let l = t.constant(shape, logits).unwrap();
    let out = f(&mut t, l).unwrap();
    t.scalar(out).unwrap()
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()
}

#[test]
fn nll_matches_log_sum_exp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, t, v) = (4, 5, 7);
    for _ in 0..20 {
        let logits = random_logits(&mut rng, b * t * v);
        let mut targets: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..v)).collect();
        targets[t..2 * t].iter_mut().for_each(|x| *x = PAD);
        let got = loss_value(|tp, l| nll_loss(tp, l, &targets), &[b, t, v], logits.clone());
        assert!((got - nll_oracle(&logits, &targets, t, v)).abs() < 1e-10);
    }
}

#[test]
fn uniform_logits_give_length_times_log_vocab() {
    let (t, v) = (3, 10);
    let targets = vec![5, 6, 7];
    let got = loss_value(|tp, l| nll_loss(tp, l, &targets), &[1, t, v], vec![0.7; t * v]);
    assert!((got - 3.0 * 10f64.ln()).abs() < 1e-9);
}

#[test]
fn confident_correct_model_has_near_zero_loss() {
    let (t, v) = (2, 4);
    let targets = vec![1, 3];
    let mut logits = vec![-50.0; t * v];
    logits[1] = 50.0;
    logits[v + 3] = 50.0;
    let got = loss_value(|tp, l| nll_loss(tp, l, &targets), &[1, t, v], logits);
    assert!(got.abs() < 1e-12);
}

#[test]
fn all_pad_targets_contribute_nothing() {
    let got = loss_value(|tp, l| nll_loss(tp, l, &[PAD; 6]), &[2, 3, 4], vec![1.0; 24]);
    assert_eq!(got, 0.0);
}

#[test]
fn distillation_identities_hold_per_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, t, v) = (3, 4, 6);
    for _ in 0..10 {
        let logits = random_logits(&mut rng, b * t * v);
        let targets: Vec<usize> = (0..b * t).map(|_| rng.random_range(1..v)).collect();
        let teacher = softmax_rows(&random_logits(&mut rng, b * t * v), v);
        let nll = loss_value(|tp, l| nll_loss(tp, l, &targets), &[b, t, v], logits.clone());
        let kd = loss_value(|tp, l| kd_loss(tp, l, &teacher, &targets), &[b, t, v], logits.clone());
        let d1 = loss_value(|tp, l| distill_loss(tp, l, &teacher, &targets, 1.0), &[b, t, v], logits.clone());
        let d0 = loss_value(|tp, l| distill_loss(tp, l, &teacher, &targets, 0.0), &[b, t, v], logits.clone());
        assert!((d1 - nll).abs() < 1e-12);
        assert!((d0 - kd).abs() < 1e-12);

        let mut one_hot = vec![0.0; b * t * v];
        for (i, &y) in targets.iter().enumerate() {
            one_hot[i * v + y] = 1.0;
        }
        let kd1 = loss_value(|tp, l| kd_loss(tp, l, &one_hot, &targets), &[b, t, v], logits.clone());
        assert!((kd1 - nll).abs() < 1e-12);
        for g in [0.0, 0.3, 1.0] {
            let d = loss_value(|tp, l| distill_loss(tp, l, &one_hot, &targets, g), &[b, t, v], logits.clone());
            assert!((d - nll).abs() < 1e-12);
        }
    }
}

#[test]
fn self_distillation_on_uniform_teacher_is_its_entropy() {
    let (t, v) = (2, 4);
    let targets = vec![1, 2];
    let teacher = vec![0.25; t * v];
    let got = loss_value(|tp, l| kd_loss(tp, l, &teacher, &targets), &[1, t, v], vec![0.0; t * v]);
    assert!((got - 2.0 * 4f64.ln()).abs() < 1e-9);
}

proptest! {
    #[test]
    fn kd_is_at_least_teacher_entropy(
        teacher_logits in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 5),
        student_logits in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 5),
    ) {
        let (b, t, v) = (2, 3, 5);
        let targets = vec![1; b * t];
        let teacher = softmax_rows(&teacher_logits, v);
        let entropy: f64 = -teacher.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>() / b as f64;
        let kd = loss_value(|tp, l| kd_loss(tp, l, &teacher, &targets), &[b, t, v], student_logits);
        prop_assert!(kd >= entropy - 1e-9);
        let self_kd = loss_value(
            |tp, l| kd_loss(tp, l, &teacher, &targets),
            &[b, t, v],
            teacher.iter().map(|p| p.ln()).collect(),
        );
        prop_assert!((self_kd - entropy).abs() < 1e-9);
    }
}

fn quadratic_store() -> ParamStore {
    let mut s = ParamStore::new();
    s.push("x", Tensor::new(&[3], vec![2.0, -1.0, 0.5]).unwrap().with_requires_grad(true));
    s
}

fn quadratic_step(s: &mut ParamStore, adam: &mut Adam) -> f64 {
    let mut t = Tape::new();
    let vars = s.bind(&mut t);
    let sq = t.mul(vars[0], vars[0]).unwrap();
    let loss = t.sum_all(sq);
    let value = t.scalar(loss).unwrap();
    t.backward(loss).unwrap();
    s.collect_grads(&t, &vars).unwrap();
    adam.step(s);
    s.zero_grad();
    value
}

#[test]
fn adam_descends_a_quadratic() {
    let mut s = quadratic_store();
    let mut adam = Adam::new(0.05);
    let first = quadratic_step(&mut s, &mut adam);
    let mut last = first;
    for _ in 0..200 {
        last = quadratic_step(&mut s, &mut adam);
    }
    assert!(last < first * 0.01, "{first} -> {last}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut s = quadratic_store();
    let before = s.tensors()[0].data().to_vec();
    let mut adam = Adam::new(0.0);
    for _ in 0..5 {
        quadratic_step(&mut s, &mut adam);
    }
    assert_eq!(s.tensors()[0].data(), before);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut s = ParamStore::new();
    s.push("a", Tensor::zeros(&[2]).with_requires_grad(true));
    s.push("b", Tensor::zeros(&[3]).with_requires_grad(true));
    s.tensors_mut()[0].accumulate_grad(&[3.0, 4.0]).unwrap();
    s.tensors_mut()[1].accumulate_grad(&[12.0, 0.0, 0.0]).unwrap();
    assert!((grad_norm(&s) - 13.0).abs() < 1e-12);
    let pre = clip_grad_norm(&mut s, 1.0);
    assert!((pre - 13.0).abs() < 1e-12);
    assert!(grad_norm(&s) <= 1.0 + 1e-12);
    let post = clip_grad_norm(&mut s, 5.0);
    assert!((post - grad_norm(&s)).abs() < 1e-12);
}

fn copy_examples(n: usize, seed: u64, vocab: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let src: Vec<usize> = (0..rng.random_range(2..5)).map(|_| rng.random_range(5..vocab)).collect();
            let mut tgt = src.clone();
            tgt.push(END);
            Example {
                record_id: format!("c{i}"),
                src,
                tgt,
                reference: TokenSeq::from_spaced("x"),
                class: None,
            }
        })
        .collect()
}

fn tiny_vocab() -> Vocab {
    Vocab::from_tokens((0..6).map(|i| format!("w{i}")))
}

#[test]
fn shared_training_learns_to_copy() {
    let cfg = ModelConfig::tiny();
    let mut base = BaseWeights::init(&cfg, 17).unwrap();
    let train = copy_examples(300, 1, cfg.vocab_size);
    let test = copy_examples(50, 2, cfg.vocab_size);
    let mut tc = TrainConfig::new(TrainMode::FinetuneAll);
    tc.learning_rate = 0.01;
    tc.epochs = 30;
    tc.seed = 17;
    train_shared(&mut base, &train, &[], &tiny_vocab(), &tc).unwrap();
    let correct = test
        .iter()
        .filter(|e| {
            let s = ModelScorer::new(&base, None, &e.src).unwrap();
            greedy_decode(&s, 8).unwrap().tokens == e.src
        })
        .count();
    assert!(correct as f64 / test.len() as f64 > 0.95, "{correct}/{}", test.len());
}

fn adapter_run(seed: u64, epochs: usize) -> (BaseWeights, TrainedModel) {
    let cfg = ModelConfig::tiny();
    let base = BaseWeights::init(&cfg, 3).unwrap();
    let train = copy_examples(40, 4, cfg.vocab_size);
    let mut tc = TrainConfig::new(TrainMode::AdapterOnly);
    tc.learning_rate = 0.01;
    tc.epochs = epochs;
    tc.batch_size = 8;
    tc.seed = seed;
    let m = train_private(&base, None, &train, &[], &tiny_vocab(), &tc, "p").unwrap();
    (base, m)
}

#[test]
fn adapter_training_is_deterministic_and_keeps_base_frozen() {
    let (base, a) = adapter_run(17, 3);
    let (_, b) = adapter_run(17, 3);
    assert_eq!(a.base_fingerprint, base.fingerprint());
    assert_eq!(a.base_fingerprint, BaseWeights::init(base.config(), 3).unwrap().fingerprint());
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_adapters(&pa, base.config(), a.adapters.as_ref().unwrap()).unwrap();
    save_adapters(&pb, base.config(), b.adapters.as_ref().unwrap()).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let (_, c) = adapter_run(18, 3);
    assert_ne!(c.adapters.unwrap().fingerprint(), a.adapters.unwrap().fingerprint());
}

#[test]
fn zero_epochs_leave_the_model_equal_to_the_base() {
    let (base, m) = adapter_run(17, 0);
    let adapters = m.adapters.unwrap();
    let src = vec![5, 6, 7];
    let with = ModelScorer::new(&base, Some(&adapters), &src).unwrap();
    let without = ModelScorer::new(&base, None, &src).unwrap();
    let (mut s1, mut s2) = (with.init().unwrap(), without.init().unwrap());
    let a = with.advance(&mut s1, START).unwrap();
    let b = without.advance(&mut s2, START).unwrap();
    let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-12);
}

#[test]
fn training_rejects_empty_corpora_and_bad_modes() {
    let cfg = ModelConfig::tiny();
    let base = BaseWeights::init(&cfg, 3).unwrap();
    let tc = TrainConfig::new(TrainMode::AdapterOnly);
    assert!(matches!(
        train_private(&base, None, &[], &[], &tiny_vocab(), &tc, "p"),
        Err(TrainError::EmptyCorpus)
    ));
    let set = AdapterSet::new(&cfg, "p", 1).unwrap();
    let full = TrainConfig::new(TrainMode::FinetuneAll);
    let train = copy_examples(4, 5, cfg.vocab_size);
    assert!(matches!(
        train_adapters(&base, set, &train, &[], &tiny_vocab(), &full, &nll_objective),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn best_validating_epoch_is_kept() {
    let cfg = ModelConfig::tiny();
    let base = BaseWeights::init(&cfg, 3).unwrap();
    let train = copy_examples(16, 6, cfg.vocab_size);
    let mut tc = TrainConfig::new(TrainMode::AdapterOnly);
    tc.learning_rate = 0.01;
    tc.epochs = 2;
    let m = train_private(&base, None, &train, &train[..4], &tiny_vocab(), &tc, "p").unwrap();
    let valid: Vec<f64> = m.log.iter().filter(|e| e.split == "valid").filter_map(|e| e.bleu).collect();
    assert_eq!(valid.len(), 3);
    let best = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(valid[m.best_epoch], best);
    assert_eq!(valid.iter().position(|&x| x == best).unwrap(), m.best_epoch);
}
