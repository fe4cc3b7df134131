use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stat_core::ar::{
    mean_cross_entropy, train_ar, ArConfig, ArModel, ArSequence, TokenizedSet, ARGMAX_TEMPERATURE,
};
use stat_core::autodiff::Graph;

const K: usize = 12;
const L: usize = 6;

fn model(seed: u64) -> ArModel {
    let cfg = ArConfig {
        hidden_dim: 16,
        layers: 2,
        heads: 2,
        ..ArConfig::default()
    };
    ArModel::new(cfg, K, L, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn bits(g: &Graph, v: stat_core::autodiff::Var) -> Vec<u32> {
    g.data(v).iter().map(|x| x.to_bits()).collect()
}

#[test]
fn causality_under_perturbation() {
    let m = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = L + 1;
    let v = m.vocab_size();
    for _ in 0..5 {
        let codes: Vec<usize> = (0..2 * L).map(|_| rng.gen_range(0..K)).collect();
        let t = rng.gen_range(0..L);
        let mut other = codes.clone();
        other[t] = (other[t] + 1 + rng.gen_range(0..K - 1)) % K;
        let mut g1 = Graph::inference();
        let a = m.logits(&mut g1, &m.params, &[0, 2], &codes, s).unwrap();
        let mut g2 = Graph::inference();
        let b = m.logits(&mut g2, &m.params, &[0, 2], &other, s).unwrap();
        let (a, b) = (bits(&g1, a), bits(&g2, b));
        // Code t sits at position t + 1; earlier outputs must not move.
        let prefix = (t + 1) * v;
        assert_eq!(a[..prefix], b[..prefix]);
        assert_ne!(a[prefix..s * v], b[prefix..s * v]);
        // The second sequence is untouched apart from its own inputs.
        assert_eq!(a[s * v..], b[s * v..]);
    }
}

#[test]
fn garbage_after_eos_leaves_the_loss_unchanged() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 1..=L {
        let codes: Vec<usize> = (0..k).map(|_| rng.gen_range(0..K)).collect();
        let mut targets = vec![None; L + 1];
        for (t, &c) in codes.iter().enumerate() {
            targets[t] = Some(c);
        }
        targets[k] = Some(m.eos());
        let mut clean = codes.clone();
        clean.resize(L, 0);
        let mut dirty = codes.clone();
        dirty.extend((k..L).map(|_| rng.gen_range(0..K)));
        let mut g1 = Graph::new();
        let a = m
            .loss_on(&mut g1, &m.params, &[1], &clean, &targets)
            .unwrap();
        let mut g2 = Graph::new();
        let b = m
            .loss_on(&mut g2, &m.params, &[1], &dirty, &targets)
            .unwrap();
        assert_eq!(
            g1.value(a).item().to_bits(),
            g2.value(b).item().to_bits(),
            "k={k}"
        );

        let seq = ArSequence { class_id: 1, codes };
        let mut g3 = Graph::new();
        let c = m
            .loss(
                &mut g3,
                &m.params,
                &[seq],
                0.0,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        assert_eq!(g1.value(a).item().to_bits(), g3.value(c).item().to_bits());
    }
}

#[test]
fn sampling_always_terminates_within_bounds() {
    let m = model(5);
    for class in 0..3 {
        for (temp, guidance) in [
            (1.0, 1.0),
            (1.0, 1.5),
            (2.0, 3.0),
            (ARGMAX_TEMPERATURE, 1.5),
        ] {
            let seqs = m.sample_many(class, 20, temp, guidance, 7).unwrap();
            for s in seqs {
                assert_eq!(s.class_id, class);
                assert!((1..=L).contains(&s.eos_pos()));
                assert!(s.codes.iter().all(|&c| c < K));
            }
        }
    }
    assert!(m
        .sample(3, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0))
        .is_err());
    assert!(m
        .sample(0, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0))
        .is_err());
}

#[test]
fn sampling_is_reproducible() {
    let m = model(6);
    let a = m.sample_many(1, 8, 1.0, 1.5, 11).unwrap();
    let b = m.sample_many(1, 8, 1.0, 1.5, 11).unwrap();
    assert_eq!(a, b);
    let argmax = m.sample_many(1, 4, ARGMAX_TEMPERATURE, 1.5, 0).unwrap();
    assert!(argmax.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_lowers_cross_entropy() {
    let latent = 4;
    let n = 24;
    let mut set = TokenizedSet {
        latent_len: latent,
        labels: Vec::new(),
        codes: Vec::new(),
        p: Vec::new(),
    };
    for i in 0..n {
        let class = i % 3;
        set.labels.push(class);
        set.codes.extend((0..latent).map(|t| (class * 3 + t) % K));
        set.p.extend([0.9, 0.8, 0.3, 0.1]);
    }
    let cfg = ArConfig {
        hidden_dim: 16,
        layers: 1,
        heads: 2,
        batch_size: 8,
        steps: 150,
        warmup_steps: 10,
        base_lr: 3e-3,
        ..ArConfig::default()
    };
    let (m, log) = train_ar(cfg.clone(), &set, K, 3, 1).unwrap();
    assert_eq!(log.len(), 150);
    let seqs: Vec<ArSequence> = (0..n)
        .map(|i| ArSequence {
            class_id: set.labels[i],
            codes: set.codes_row(i)[..2].to_vec(),
        })
        .collect();
    let ce = mean_cross_entropy(&m, &seqs).unwrap();
    assert!(ce < ((K + 1) as f64).ln() - 0.5, "ce {ce}");

    let (again, log2) = train_ar(cfg, &set, K, 3, 1).unwrap();
    assert_eq!(log, log2);
    assert_eq!(again.params.params(), m.params.params());
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = model(7);
    let mut g = Graph::new();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let empty = ArSequence {
        class_id: 0,
        codes: vec![],
    };
    assert!(m.loss(&mut g, &m.params, &[empty], 0.0, &mut r).is_err());
    let long = ArSequence {
        class_id: 0,
        codes: vec![0; L + 1],
    };
    assert!(m.loss(&mut g, &m.params, &[long], 0.0, &mut r).is_err());
    let bad_code = ArSequence {
        class_id: 0,
        codes: vec![K],
    };
    assert!(m.loss(&mut g, &m.params, &[bad_code], 0.0, &mut r).is_err());
    assert!(m.logits(&mut g, &m.params, &[4], &[], 1).is_err());
}
