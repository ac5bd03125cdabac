use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{check_param_gradients, DecoderInput, Model, ModelConfig};

fn cfg(m: usize, k: usize, r: usize, layers: usize) -> RetroConfig {
    let base = ModelConfig::new(17, 8, 2, layers).with_max_seq_len(32);
    RetroConfig::new(base, m, k, r)
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..17)).collect()
}

fn random_batch(rng: &mut ChaCha8Rng, chunks: usize, k: usize, r: usize) -> NeighborBatch {
    NeighborBatch {
        chunks: (0..chunks)
            .map(|u| {
                (0..k)
                    .map(|j| Neighbor {
                        tokens: random_ids(rng, r),
                        source: u * k + j,
                    })
                    .collect()
            })
            .collect(),
    }
}

fn model_with_gates(c: RetroConfig, seed: u64, gate: f64) -> Model {
    let mut m = Model::retro(c, seed).unwrap();
    m.set_cca_gates(gate).unwrap();
    m
}

#[test]
fn split_into_chunks_cases() {
    let ids: Vec<usize> = (0..8).collect();
    assert_eq!(split_into_chunks(&ids, 4).unwrap().len(), 2);
    assert_eq!(split_into_chunks(&ids[..4], 4).unwrap(), vec![&ids[..4]]);
    assert!(matches!(
        split_into_chunks(&ids[..6], 4),
        Err(Error::NotChunkAligned { len: 6, chunk: 4 })
    ));
}

#[test]
fn attending_rows_follow_alignment() {
    assert_eq!(attending_rows(0, 4, 12), 3..7);
    assert_eq!(attending_rows(1, 4, 12), 7..11);
    assert_eq!(attending_rows(2, 4, 12), 11..12);
    assert_eq!(attending_rows(0, 1, 3), 0..1);
}

#[test]
fn encoder_output_has_chunk_neighbor_length_width_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = cfg(4, 2, 6, 1);
    let model = Model::retro(c.clone(), 0).unwrap();
    let batch = random_batch(&mut rng, 2, 2, 6);
    let mut g = Graph::new(&model.params);
    let hidden = g.tape.constant(crate::model::normal_tensor(&mut rng, &[8, 8], 1.0));
    let enc = encode_neighbors(&mut g, &c, &batch, hidden).unwrap().unwrap();
    assert_eq!(enc.uniform_dims(8), Some([2, 2, 6, 8]));
    assert_eq!(g.tape.shape(enc.var), &[24, 8]);
}

#[test]
fn identical_neighbors_and_hiddens_give_identical_encodings() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = cfg(4, 2, 5, 1);
    let model = Model::retro(c.clone(), 0).unwrap();
    let one = random_batch(&mut rng, 1, 2, 5).chunks.remove(0);
    let batch = NeighborBatch {
        chunks: vec![one.clone(), one],
    };
    let h = crate::model::normal_tensor(&mut rng, &[4, 8], 1.0);
    let hidden = Tensor::from_rows(&(0..8).map(|i| h.row(i % 4).to_vec()).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new(&model.params);
    let hv = g.tape.constant(hidden);
    let enc = encode_neighbors(&mut g, &c, &batch, hv).unwrap().unwrap();
    let out = g.tape.value(enc.var);
    let per_chunk = 2 * 5 * 8;
    assert_eq!(&out.data()[..per_chunk], &out.data()[per_chunk..]);
}

#[test]
fn truncates_long_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = cfg(4, 1, 3, 1);
    let model = Model::retro(c.clone(), 0).unwrap();
    let batch = random_batch(&mut rng, 1, 1, 9);
    let mut g = Graph::new(&model.params);
    let hv = g.tape.constant(Tensor::zeros(&[4, 8]));
    let enc = encode_neighbors(&mut g, &c, &batch, hv).unwrap().unwrap();
    assert_eq!(enc.total_rows(), 3);
}

#[test]
fn zero_gates_reproduce_plain_decoder_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = cfg(4, 2, 4, 4);
    let model = Model::retro(c.clone(), 9).unwrap();
    let ids = random_ids(&mut rng, 12);
    let batch = random_batch(&mut rng, 3, 2, 4);
    let retro = retro_forward(&c, &model.params, &ids, &batch).unwrap();
    let gpt = crate::model::gpt_forward(&c.base, &model.backbone_params(), &ids).unwrap();
    assert!(retro.bitwise_eq(&gpt));
}

#[test]
fn chunks_without_neighbors_pass_through_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = cfg(4, 2, 4, 1);
    let model = model_with_gates(c.clone(), 0, 0.7);
    let mut g = Graph::new(&model.params);
    let h = g.tape.constant(crate::model::normal_tensor(&mut rng, &[8, 8], 1.0));
    let out = chunked_cross_attention(&mut g, &c, 0, h, None, 2).unwrap();
    assert!(g.tape.value(out).bitwise_eq(g.tape.value(h)));
    assert!(matches!(
        chunked_cross_attention(&mut g, &c, 0, h, None, 3),
        Err(Error::MisalignedNeighbors { .. })
    ));
}

#[test]
fn empty_neighbor_batch_equals_gate_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = cfg(4, 2, 4, 1);
    let model = model_with_gates(c.clone(), 1, 0.9);
    let ids = random_ids(&mut rng, 8);
    let a = retro_forward(&c, &model.params, &ids, &NeighborBatch::empty(2)).unwrap();
    let b = crate::model::gpt_forward(&c.base, &model.backbone_params(), &ids).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn first_chunk_prefix_ignores_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = 4;
    let c = cfg(m, 2, 4, 2);
    let model = model_with_gates(c.clone(), 2, 1.0);
    let ids = random_ids(&mut rng, 12);
    let a = retro_forward(&c, &model.params, &ids, &random_batch(&mut rng, 3, 2, 4)).unwrap();
    let b = retro_forward(&c, &model.params, &ids, &random_batch(&mut rng, 3, 2, 4)).unwrap();
    let v = c.base.vocab_size;
    assert_eq!(&a.data()[..(m - 1) * v], &b.data()[..(m - 1) * v]);
    assert_ne!(&a.data()[(m - 1) * v..m * v], &b.data()[(m - 1) * v..m * v]);
}

#[test]
fn perturbing_chunk_neighbors_only_affects_later_positions() {
    let m = 4;
    let c = cfg(m, 2, 3, 2);
    let v = c.base.vocab_size;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let model = model_with_gates(c.clone(), seed, 0.8);
        let ids = random_ids(&mut rng, 16);
        let base = random_batch(&mut rng, 4, 2, 3);
        let a = retro_forward(&c, &model.params, &ids, &base).unwrap();
        for u in 0..4 {
            let mut changed = base.clone();
            changed.chunks[u][0].tokens = random_ids(&mut rng, 3);
            let b = retro_forward(&c, &model.params, &ids, &changed).unwrap();
            let first = u * m + m - 1;
            assert_eq!(&a.data()[..first * v], &b.data()[..first * v], "chunk {u}");
        }
    }
}

#[test]
fn neighbor_order_within_chunk_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = cfg(4, 3, 4, 2);
    let model = model_with_gates(c.clone(), 3, 0.6);
    let ids = random_ids(&mut rng, 8);
    let batch = random_batch(&mut rng, 2, 3, 4);
    let mut perm = batch.clone();
    for chunk in &mut perm.chunks {
        chunk.rotate_left(1);
        chunk.swap(0, 1);
    }
    let a = retro_forward(&c, &model.params, &ids, &batch).unwrap();
    let b = retro_forward(&c, &model.params, &ids, &perm).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-9);
}

#[test]
fn misaligned_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cfg(4, 2, 4, 1);
    let model = Model::retro(c.clone(), 0).unwrap();
    let ids = random_ids(&mut rng, 6);
    assert!(matches!(
        retro_forward(&c, &model.params, &ids, &NeighborBatch::empty(2)),
        Err(Error::NotChunkAligned { .. })
    ));
    let ids = random_ids(&mut rng, 8);
    assert!(matches!(
        retro_forward(&c, &model.params, &ids, &NeighborBatch::empty(3)),
        Err(Error::MisalignedNeighbors { expected: 2, got: 3 })
    ));
    let too_many = random_batch(&mut rng, 2, 3, 4);
    assert!(retro_forward(&c, &model.params, &ids, &too_many).is_err());
}

#[test]
fn gradients_through_encoder_and_cca_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = ModelConfig::new(11, 4, 2, 2).with_max_seq_len(16);
    let c = RetroConfig::new(base, 3, 2, 3);
    let model = model_with_gates(c, 5, 0.5);
    let ids: Vec<usize> = (0..9).map(|_| rng.random_range(0..11)).collect();
    let batch = NeighborBatch {
        chunks: (0..3)
            .map(|_| {
                (0..2)
                    .map(|j| Neighbor {
                        tokens: (0..3).map(|_| rng.random_range(0..11)).collect(),
                        source: j,
                    })
                    .collect()
            })
            .collect(),
    };
    let mut targets: Vec<Option<usize>> = ids[1..].iter().copied().map(Some).collect();
    targets.push(None);
    let paths: Vec<String> = model
        .params
        .paths()
        .filter(|p| p.starts_with("enc.") || p.contains(".cca") || p.as_str() == "tok_emb")
        .cloned()
        .collect();
    let report = check_param_gradients(&model.params, &paths, 1e-6, 4, |ps| {
        let m = Model {
            params: ps.clone(),
            ..model.clone()
        };
        m.loss(
            &DecoderInput {
                tokens: &ids,
                virtual_at: 0,
                neighbors: Some(&batch),
            },
            &targets,
        )
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}
