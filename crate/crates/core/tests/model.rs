use qrw_core::model::*;
use qrw_core::training::nll_loss;
use qrw_tensor::{grad_check, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(UNK..vocab)).collect()
}

/// Adapters with every tensor randomized, so no branch is the identity.
fn random_adapters(cfg: &ModelConfig, seed: u64) -> AdapterSet {
    let mut set = AdapterSet::new(cfg, "r", seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in set.store_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    set
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

#[test]
fn zero_init_adapters_leave_encoder_and_logits_unchanged() {
    let cfg = ModelConfig::tiny();
    let base = BaseWeights::init(&cfg, 1).unwrap();
    let set = AdapterSet::new(&cfg, "z", 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let src = random_seq(&mut rng, cfg.vocab_size, 5);
        let a = encode(&base, None, &[src.clone()]).unwrap();
        let b = encode(&base, Some(&set), &[src.clone()]).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
        let prefix = vec![START, 6, 7];
        let la = decode_step(&base, None, &a, &[5], &[prefix.clone()]).unwrap();
        let lb = decode_step(&base, Some(&set), &b, &[5], &[prefix]).unwrap();
        assert!(max_diff(&la, &lb) < 1e-12);
    }
}

#[test]
fn padding_values_do_not_leak_into_unmasked_positions() {
    let cfg = ModelConfig::tiny();
    let base = BaseWeights::init(&cfg, 4).unwrap();
    let adapters = random_adapters(&cfg, 5);
    let model = Model::new(&base, Some(&adapters)).unwrap();
    let run = |filler: usize| {
        let mut t = Tape::new();
        let mut m = model.bind(&mut t);
        let batch = PaddedBatch {
            ids: vec![5, 6, 7, filler, filler, 8, 9, 10, 5, 6],
            lens: vec![3, 5],
            width: 5,
        };
        let enc = m.encode(&mut t, &batch).unwrap();
        t.value(enc.states).to_vec()
    };
    let (a, b) = (run(PAD), run(9));
    let d = cfg.d_model;
    assert_eq!(a[..3 * d], b[..3 * d]);
    assert_eq!(a[5 * d..], b[5 * d..]);
    assert_ne!(a[3 * d..5 * d], b[3 * d..5 * d]);
}

#[test]
fn single_token_input_has_expected_shape() {
    let base = BaseWeights::init(&ModelConfig::tiny(), 1).unwrap();
    assert_eq!(encode(&base, None, &[vec![5]]).unwrap().shape(), &[1, 1, 8]);
}

#[test]
fn decoder_is_causal() {
    let cfg = ModelConfig::tiny();
    let base = BaseWeights::init(&cfg, 6).unwrap();
    let adapters = random_adapters(&cfg, 7);
    let model = Model::new(&base, Some(&adapters)).unwrap();
    let logits = |tgt: Vec<usize>| {
        let mut t = Tape::new();
        let mut m = model.bind(&mut t);
        let enc = m.encode(&mut t, &PaddedBatch::new(&[vec![5, 6, 7, 8]]).unwrap()).unwrap();
        let out = m.decode(&mut t, &enc, &PaddedBatch::new(&[tgt]).unwrap()).unwrap();
        t.value(out).to_vec()
    };
    let a = logits(vec![START, 5, 6, 7, 8]);
    let b = logits(vec![START, 5, 9, 10, 4]);
    let v = cfg.vocab_size;
    assert_eq!(a[..2 * v], b[..2 * v]);
    assert_ne!(a[2 * v..3 * v], b[2 * v..3 * v]);
}

#[test]
fn batch_order_permutes_logits() {
    let cfg = ModelConfig::tiny();
    let base = BaseWeights::init(&cfg, 8).unwrap();
    let states = encode(&base, None, &[vec![5, 6, 7]]).unwrap();
    let two = Tensor::new(&[2, 3, 8], states.data().repeat(2)).unwrap();
    let (p, q) = (vec![START, 5], vec![START, 9, 10]);
    let ab = decode_step(&base, None, &two, &[3, 3], &[p.clone(), q.clone()]).unwrap();
    let ba = decode_step(&base, None, &two, &[3, 3], &[q, p]).unwrap();
    let v = cfg.vocab_size;
    assert_eq!(ab.data()[..v], ba.data()[v..]);
    assert_eq!(ab.data()[v..], ba.data()[..v]);
}

#[test]
fn incremental_decoding_matches_tape_bit_for_bit() {
    let mut cfg = ModelConfig::tiny();
    cfg.vocab_size = 23;
    let base = BaseWeights::init(&cfg, 9).unwrap();
    let adapters = random_adapters(&cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for adapters in [None, Some(&adapters)] {
        for _ in 0..5 {
            let src = random_seq(&mut rng, cfg.vocab_size, 6);
            let prefix: Vec<usize> = std::iter::once(START).chain(random_seq(&mut rng, cfg.vocab_size, 4)).collect();
            let inc = Incremental::new(&base, adapters).unwrap();
            let cross = inc.prepare(&src).unwrap();
            let mut cache = inc.empty_cache();
            let states = encode(&base, adapters, &[src.clone()]).unwrap();
            for t in 0..prefix.len() {
                let fast = inc.step(&cross, &mut cache, prefix[t]).unwrap();
                let slow = decode_step(&base, adapters, &states, &[src.len()], &[prefix[..=t].to_vec()]).unwrap();
                assert_eq!(fast, slow.data());
            }
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let base = BaseWeights::init(&cfg, 12).unwrap();
    let adapters = random_adapters(&cfg, 13);
    let skel = base.skeleton();
    let n_base = base.store().len();
    let mut params: Vec<Tensor> = base
        .store()
        .tensors()
        .iter()
        .chain(adapters.store().tensors())
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let src = PaddedBatch::new(&[vec![5, 6, 7, 8], vec![9, 10]]).unwrap();
    let dec = PaddedBatch::new(&[vec![START, 5, 7], vec![START, 9]]).unwrap();
    let targets = vec![5, 7, END, 9, END, PAD];
    let report = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let mut m = BoundModel::attach(skel.clone(), v[..n_base].to_vec(), Some(v[n_base..].to_vec()));
            let enc = m.encode(t, &src).map_err(as_tensor)?;
            let logits = m.decode(t, &enc, &dec).map_err(as_tensor)?;
            nll_loss(t, logits, &targets).map_err(|e| match e {
                qrw_core::training::TrainError::Tensor(e) => e,
                other => panic!("{other}"),
            })
        },
        &mut params,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}

fn as_tensor(e: ModelError) -> qrw_tensor::TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn beam_width_one_equals_greedy() {
    let mut cfg = ModelConfig::tiny();
    cfg.vocab_size = 30;
    let base = BaseWeights::init(&cfg, 14).unwrap();
    let adapters = random_adapters(&cfg, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let len = rng.random_range(1..8);
        let src = random_seq(&mut rng, cfg.vocab_size, len);
        let s = ModelScorer::new(&base, Some(&adapters), &src).unwrap();
        let g = greedy_decode(&s, 12).unwrap();
        let b = beam_decode(&s, 1, 12).unwrap();
        assert_eq!(b[0].tokens, g.tokens);
        assert_eq!(b[0].log_prob, g.log_prob);
    }
}

#[test]
fn adapter_counts_at_bart_base_geometry() {
    let counts: Vec<usize> = [384, 256, 64]
        .iter()
        .map(|&b| count_adapter_params(&ModelConfig::bart_base(b)))
        .collect();
    assert_eq!(counts, vec![17_729_280, 11_827_200, 2_974_080]);
}
