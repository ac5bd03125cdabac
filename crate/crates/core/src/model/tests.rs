use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Extras};
use super::layers::attention;
use super::*;
use crate::autodiff::Tensor;
use crate::optim::{Adam, AdamConfig};

fn tiny(v: usize, d: usize, h: usize, l: usize) -> ModelConfig {
    ModelConfig::new(v, d, h, l).with_max_seq_len(32)
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

fn next_token_targets(tokens: &[usize]) -> Vec<Option<usize>> {
    let mut t: Vec<Option<usize>> = tokens[1..].iter().copied().map(Some).collect();
    t.push(None);
    t
}

#[test]
fn suffix_perturbation_leaves_prefix_logits_bitwise_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::gpt(tiny(20, 8, 2, 2), 3).unwrap();
    for _ in 0..5 {
        let mut ids = random_tokens(&mut rng, 10, 20);
        let a = model.logits(&DecoderInput::plain(&ids)).unwrap();
        ids[9] = (ids[9] + 1) % 20;
        let b = model.logits(&DecoderInput::plain(&ids)).unwrap();
        assert_eq!(&a.data()[..9 * 20], &b.data()[..9 * 20]);
        assert_ne!(&a.data()[9 * 20..], &b.data()[9 * 20..]);
    }
}

#[test]
fn forward_is_pure() {
    let model = Model::gpt(tiny(12, 8, 2, 1), 0).unwrap();
    let ids = [1, 5, 7, 2];
    let a = model.logits(&DecoderInput::plain(&ids)).unwrap();
    let b = model.logits(&DecoderInput::plain(&ids)).unwrap();
    assert!(a.bitwise_eq(&b));
    let c = gpt_forward(model.config(), &model.params, &ids).unwrap();
    assert!(a.bitwise_eq(&c));
}

fn attention_params(rng: &mut ChaCha8Rng, d: usize) -> ParameterSet {
    let mut ps = ParameterSet::new();
    for p in ["q", "k", "v", "o"] {
        ps.insert(format!("a.{p}"), normal_tensor(rng, &[d, d], 0.5), ParamKind::Base)
            .unwrap();
    }
    ps
}

fn value_projection(x: &[f64], ps: &ParameterSet, d: usize) -> Vec<f64> {
    let wv = ps.tensor("a.v").unwrap().data();
    let wo = ps.tensor("a.o").unwrap().data();
    let v: Vec<f64> = (0..d).map(|j| (0..d).map(|i| x[i] * wv[i * d + j]).sum()).collect();
    (0..d).map(|j| (0..d).map(|i| v[i] * wo[i * d + j]).sum()).collect()
}

#[test]
fn single_token_self_attention_is_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 8;
    let ps = attention_params(&mut rng, d);
    let x = normal_tensor(&mut rng, &[1, d], 1.0);
    let mut g = Graph::new(&ps);
    let xv = g.tape.constant(x.clone());
    let mask = g.tape.constant(layers::causal_mask(1));
    let out = attention(&mut g, xv, xv, "a", 2, Some(mask)).unwrap();
    let expect = value_projection(x.data(), &ps, d);
    for (a, b) in g.tape.value(out).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_single_and_duplicated_key() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 8;
    let ps = attention_params(&mut rng, d);
    let q = normal_tensor(&mut rng, &[3, d], 1.0);
    let kv = normal_tensor(&mut rng, &[1, d], 1.0);
    let expect = value_projection(kv.data(), &ps, d);

    let mut g = Graph::new(&ps);
    let qv = g.tape.constant(q.clone());
    let kvv = g.tape.constant(kv.clone());
    let out = attention(&mut g, qv, kvv, "a", 4, None).unwrap();
    let single = g.tape.value(out).clone();
    for r in 0..3 {
        for (a, b) in single.row(r).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let twice = Tensor::from_rows(&[kv.row(0).to_vec(), kv.row(0).to_vec()]).unwrap();
    let kv2 = g.tape.constant(twice);
    let out2 = attention(&mut g, qv, kv2, "a", 4, None).unwrap();
    assert!(g.tape.value(out2).max_abs_diff(&single) < 1e-12);
}

#[test]
fn cross_attention_dimension_mismatch_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ps = attention_params(&mut rng, 8);
    let mut g = Graph::new(&ps);
    let q = g.tape.constant(Tensor::zeros(&[2, 8]));
    let kv = g.tape.constant(Tensor::zeros(&[2, 6]));
    assert!(attention(&mut g, q, kv, "a", 2, None).is_err());
}

#[test]
fn gpt_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..2 {
        let heads = [1, 2][seed as usize];
        let model = Model::gpt(tiny(9, 4, heads, 2), seed).unwrap();
        let ids = random_tokens(&mut rng, 6, 9);
        let targets = next_token_targets(&ids);
        let paths: Vec<String> = model.params.paths().cloned().collect();
        let report = check_param_gradients(&model.params, &paths, 1e-6, 4, |ps| {
            let m = Model {
                params: ps.clone(),
                ..model.clone()
            };
            m.loss(&DecoderInput::plain(&ids), &targets)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}

#[test]
fn id_out_of_range_and_too_long_are_rejected() {
    let model = Model::gpt(tiny(10, 8, 2, 1), 0).unwrap();
    assert!(matches!(
        model.logits(&DecoderInput::plain(&[1, 10])),
        Err(Error::TokenOutOfRange { id: 10, vocab: 10 })
    ));
    let long = vec![1; 33];
    assert!(matches!(
        model.logits(&DecoderInput::plain(&long)),
        Err(Error::SequenceTooLong { len: 33, max: 32 })
    ));
    assert!(matches!(
        model.logits(&DecoderInput::plain(&[])),
        Err(Error::EmptyPrompt)
    ));
}

/// Independent count: embeddings, per layer (two norms, four d×d projections,
/// MLP with biases), final norm, output head.
fn closed_form_count(v: usize, d: usize, l: usize, max_len: usize) -> usize {
    let f = 4 * d;
    v * d + max_len * d + l * (2 * 2 * d + 4 * d * d + d * f + f + f * d + d) + 2 * d + d * v
}

#[test]
fn parameter_count_matches_closed_form() {
    for (v, d, h, l) in [(10, 8, 2, 1), (50, 16, 4, 3), (7, 12, 3, 2)] {
        let model = Model::gpt(tiny(v, d, h, l), 0).unwrap();
        let n = model.params.numel(|_| true);
        assert_eq!(n, closed_form_count(v, d, l, 32));
    }
}

fn train_steps(model: &mut Model, seqs: &[Vec<usize>], steps: usize, lr: f64) -> f64 {
    let mut adam = Adam::new(AdamConfig::new(lr));
    let mut last = f64::INFINITY;
    for s in 0..steps {
        let ids = &seqs[s % seqs.len()];
        let (mut g, loss) = model
            .loss(&DecoderInput::plain(ids), &next_token_targets(ids))
            .unwrap();
        last = g.tape.value(loss).item();
        g.tape.backward(loss).unwrap();
        adam.step(&mut model.params, &g.grads()).unwrap();
    }
    last
}

#[test]
fn single_layer_overfits_one_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ids = random_tokens(&mut rng, 16, 12);
    let mut model = Model::gpt(tiny(12, 8, 2, 1), 0).unwrap();
    let mut adam = Adam::new(AdamConfig::new(0.03));
    let targets = next_token_targets(&ids);
    let mut reached = None;
    for step in 0..500 {
        let (mut g, loss) = model.loss(&DecoderInput::plain(&ids), &targets).unwrap();
        if g.tape.value(loss).item() < 0.05 {
            reached = Some(step);
            break;
        }
        g.tape.backward(loss).unwrap();
        adam.step(&mut model.params, &g.grads()).unwrap();
    }
    assert!(reached.is_some(), "loss never fell below 0.05");
}

#[test]
fn decode_after_overfitting_question_answer_pairs() {
    // vocabulary: 0 = eos, 1 = "->", 2..6 questions, 6..10 answers
    let pairs: Vec<Vec<usize>> = (0..4).map(|i| vec![2 + i, 1, 6 + i, 0]).collect();
    let mut model = Model::gpt(tiny(10, 16, 2, 1), 1).unwrap();
    let loss = train_steps(&mut model, &pairs, 400, 0.02);
    assert!(loss < 0.1, "loss {loss}");
    for (i, p) in pairs.iter().enumerate() {
        let out = greedy_decode(&model, &p[..2], &DecodeOptions::new(5, Some(0)), None).unwrap();
        assert_eq!(out, vec![2 + i, 1, 6 + i, 0]);
    }
}

#[test]
fn decode_edge_cases() {
    let model = Model::gpt(tiny(10, 8, 2, 1), 0).unwrap();
    let prompt = [3, 4];
    let out = greedy_decode(&model, &prompt, &DecodeOptions::new(0, None), None).unwrap();
    assert_eq!(out, prompt);
    assert!(matches!(
        greedy_decode(&model, &[], &DecodeOptions::new(3, None), None),
        Err(Error::EmptyPrompt)
    ));
    let out = greedy_decode(&model, &prompt, &DecodeOptions::new(100, None), None).unwrap();
    assert_eq!(out.len(), 32);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::gpt(tiny(10, 8, 2, 2), 4).unwrap();
    model.params.get_mut("ln_f.g").unwrap().trainable = false;
    let mut extras = Extras::default();
    extras.aux.insert("buf".into(), vec![1.5, f64::MIN_POSITIVE, -0.0]);
    extras.meta.insert("note".into(), "x".into());
    checkpoint::save(dir.path(), &model, &extras).unwrap();
    let (back, ex) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.arch, model.arch);
    for (k, p) in model.params.iter() {
        let q = back.params.get(k).unwrap();
        assert!(p.tensor.bitwise_eq(&q.tensor), "{k}");
        assert_eq!(p.trainable, q.trainable);
    }
    assert_eq!(ex.aux["buf"][2].to_bits(), (-0.0f64).to_bits());
    assert_eq!(ex.meta["note"], "x");
}

#[test]
fn truncated_tensor_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::gpt(tiny(10, 8, 2, 1), 0).unwrap();
    checkpoint::save(dir.path(), &model, &Extras::default()).unwrap();
    let f = dir.path().join(checkpoint::TENSORS_FILE);
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn size_presets_are_valid() {
    for p in [SizePreset::Xs, SizePreset::S, SizePreset::M] {
        p.config(100, 64).validate().unwrap();
    }
}
