use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stat_core::allocation::DropMask;
use stat_core::autodiff::{Graph, Tensor};
use stat_core::losses::{composite, LossWeights, Stage};
use stat_core::model::{nearest_code, Tokenizer, TokenizerConfig};
use stat_core::trainer::stage2_parts;

fn tiny() -> TokenizerConfig {
    TokenizerConfig {
        image_size: 8,
        patch_size: 4,
        hidden_dim: 8,
        latent_len: 4,
        code_dim: 4,
        codebook_size: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        prob_head_hidden: 8,
    }
}

fn images(rng: &mut ChaCha8Rng, b: usize, size: usize) -> Tensor {
    let n = b * 3 * size * size;
    Tensor::new(
        [b, 3, size, size],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn model(seed: u64) -> Tokenizer {
    Tokenizer::new(tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn output_shapes() {
    let tok = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = images(&mut rng, 3, 8);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let enc = tok.encode(&mut g, &tok.params, xv).unwrap();
    assert_eq!(g.shape(enc.z_l), &[3, 4, 8]);
    assert_eq!(g.shape(enc.p), &[3, 4]);
    assert!(g.data(enc.p).iter().all(|&p| p > 0.0 && p < 1.0));
    let q = tok.quantize(&mut g, &tok.params, enc.z_l, None).unwrap();
    assert_eq!(q.indices.len(), 12);
    assert!(q.indices.iter().all(|&i| i < 16));
    assert_eq!(g.shape(q.z_q), &[3, 4, 4]);
    let out = tok.forward_stage1(&mut g, &tok.params, xv, 2).unwrap();
    assert_eq!(g.shape(out.x_hat), &[3, 3, 8, 8]);
    assert!(g
        .data(out.x_hat)
        .iter()
        .all(|v| v.is_finite() && v.abs() <= 1.0));

    let a = tok.analyze(&x).unwrap();
    assert_eq!((a.batch, a.latent_len, a.p.len()), (3, 4, 12));
    let empty = tok
        .decode_codes(&a.indices, &DropMask::prefixes(4, &[0, 0, 0]))
        .unwrap();
    assert!(empty.data().iter().all(|v| v.is_finite()));
}

#[test]
fn geometry_is_checked() {
    let tok = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(tok.analyze(&images(&mut rng, 1, 12)).is_err());
    let a = tok.analyze(&images(&mut rng, 2, 8)).unwrap();
    assert!(tok
        .decode_codes(&a.indices, &DropMask::prefixes(3, &[1, 1]))
        .is_err());
    let mut bad = a.indices.clone();
    bad[0] = 16;
    assert!(tok
        .decode_codes(&bad, &DropMask::prefixes(4, &[1, 1]))
        .is_err());
    let mut g = Graph::new();
    let xv = g.constant(images(&mut rng, 1, 8));
    assert!(tok.forward_stage1(&mut g, &tok.params, xv, 0).is_err());
    assert!(tok.forward_stage1(&mut g, &tok.params, xv, 5).is_err());
}

#[test]
fn batch_permutation_equivariance() {
    let tok = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = images(&mut rng, 4, 8);
    let per = 3 * 8 * 8;
    let perm = [2, 0, 3, 1];
    let mut px = Vec::new();
    for &j in &perm {
        px.extend_from_slice(&x.data()[j * per..(j + 1) * per]);
    }
    let px = Tensor::new([4, 3, 8, 8], px).unwrap();
    let a = tok.analyze(&x).unwrap();
    let b = tok.analyze(&px).unwrap();
    for (row, &j) in perm.iter().enumerate() {
        assert_eq!(b.codes_row(row), a.codes_row(j));
        for (u, v) in b.p_row(row).iter().zip(a.p_row(j)) {
            assert!((u - v).abs() < 1e-5);
        }
    }
}

#[test]
fn dropped_tokens_do_not_affect_the_reconstruction() {
    let tok = model(5);
    let mask = DropMask::from_bits(2, 4, vec![1, 0, 1, 0, 1, 1, 0, 0]).unwrap();
    let codes = vec![3, 7, 1, 9, 0, 2, 4, 5];
    let base = tok.decode_codes(&codes, &mask).unwrap();
    let mut other = codes.clone();
    other[1] = 15;
    other[3] = 8;
    other[6] = 11;
    other[7] = 12;
    let changed = tok.decode_codes(&other, &mask).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&base), bits(&changed));
    other[0] = 14;
    assert_ne!(bits(&base), bits(&tok.decode_codes(&other, &mask).unwrap()));
}

#[test]
fn quantizer_examples() {
    assert_eq!(nearest_code(&[0.0, 0.0, 1.0, 1.0], 2, &[0.9, 0.8]), 1);
    assert_eq!(nearest_code(&[0.0, 0.0, 1.0, 1.0], 2, &[0.1, 0.2]), 0);
    assert_eq!(nearest_code(&[1.0, 0.0, -1.0, 0.0], 2, &[0.0, 0.0]), 0);
    assert_eq!(
        nearest_code(&[5.0, 5.0, 1.0, 1.0, 1.0, 1.0], 2, &[1.0, 1.0]),
        1
    );
}

#[test]
fn exact_entry_gives_zero_vq_losses() {
    let mut tok = model(6);
    for name in ["quant.proj.weight", "quant.proj.bias"] {
        let id = tok.params.id(name).unwrap();
        tok.params.tensor_mut(id).data_mut().fill(0.0);
    }
    let cb = tok.codebook_id();
    tok.params.tensor_mut(cb).data_mut()[12..16].fill(0.0);
    let mut g = Graph::new();
    let z = g.leaf(Tensor::new([1, 4, 8], vec![0.3; 32]).unwrap());
    let q = tok.quantize(&mut g, &tok.params, z, None).unwrap();
    assert_eq!(q.indices, vec![3; 4]);
    assert_eq!(g.value(q.codebook_loss).item(), 0.0);
    assert_eq!(g.value(q.commitment_loss).item(), 0.0);
}

#[test]
fn quantizer_matches_brute_force_in_the_model() {
    let tok = model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = images(&mut rng, 6, 8);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let enc = tok.encode(&mut g, &tok.params, xv).unwrap();
    let q = tok.quantize(&mut g, &tok.params, enc.z_l, None).unwrap();
    let cb = tok.params.tensor(tok.codebook_id()).data().to_vec();
    // Recompute the projection by hand: proj = z_l W + b.
    let w = tok
        .params
        .tensor(tok.params.id("quant.proj.weight").unwrap())
        .data()
        .to_vec();
    let b = tok
        .params
        .tensor(tok.params.id("quant.proj.bias").unwrap())
        .data()
        .to_vec();
    let z = g.data(enc.z_l).to_vec();
    for (t, &got) in q.indices.iter().enumerate() {
        let zl = &z[t * 8..(t + 1) * 8];
        let proj: Vec<f64> = (0..4)
            .map(|o| {
                b[o] as f64
                    + (0..8)
                        .map(|i| zl[i] as f64 * w[i * 4 + o] as f64)
                        .sum::<f64>()
            })
            .collect();
        let dist = |k: usize| -> f64 {
            (0..4)
                .map(|d| (proj[d] - cb[k * 4 + d] as f64).powi(2))
                .sum()
        };
        let best = (0..16).fold(0, |best, k| if dist(k) < dist(best) { k } else { best });
        assert!(
            got == best || (dist(got) - dist(best)).abs() < 1e-9,
            "token {t}"
        );
    }
}

#[test]
fn every_parameter_gets_gradient_in_a_stage2_step() {
    let mut tok = model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // Spread the codebook so distinct latents pick distinct entries.
    let cb = tok.codebook_id();
    for v in tok.params.tensor_mut(cb).data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let x = images(&mut rng, 4, 8);
    let grads_for = |w: &LossWeights, tok: &Tokenizer| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut mrng = ChaCha8Rng::seed_from_u64(11);
        let out = tok
            .forward_stage2(&mut g, &tok.params, xv, &mut mrng, None)
            .unwrap();
        let parts = stage2_parts(&mut g, xv, &out, w.p_star, None).unwrap();
        let (loss, _) = composite(&mut g, Stage::Two, &parts, w).unwrap();
        let grads = g.backward(loss).unwrap();
        g.param_vars()
            .into_iter()
            .map(|(id, v)| {
                let norm: f64 = grads
                    .get(v)
                    .map_or(0.0, |d| d.iter().map(|&x| (x as f64).abs()).sum());
                (tok.params.get(id).name.clone(), norm)
            })
            .collect::<Vec<_>>()
    };
    let full = grads_for(&LossWeights::default(), &tok);
    assert_eq!(full.len(), tok.params.len());
    for (name, norm) in &full {
        assert!(*norm > 0.0, "{name} got no gradient");
    }
    let no_codebook_loss = LossWeights {
        w_vq_codebook: 0.0,
        ..LossWeights::default()
    };
    let blocked = grads_for(&no_codebook_loss, &tok);
    let (_, cb_norm) = blocked.iter().find(|(n, _)| n == "quant.codebook").unwrap();
    assert_eq!(*cb_norm, 0.0);
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let tok = model(12);
    let ck = stat_core::trainer::tokenizer_checkpoint(&tok).unwrap();
    let back = stat_core::trainer::load_tokenizer(
        &stat_core::checkpoint::Checkpoint::from_bytes(&ck.to_bytes()).unwrap(),
    )
    .unwrap();
    assert_eq!(back.config, tok.config);
    let x = images(&mut ChaCha8Rng::seed_from_u64(13), 2, 8);
    assert_eq!(back.analyze(&x).unwrap(), tok.analyze(&x).unwrap());
}
