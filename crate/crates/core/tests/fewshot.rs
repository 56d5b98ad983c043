use proptest::prelude::*;
use prototransfer::autodiff::Tensor;
use prototransfer::backbone::EmbeddingNetwork;
use prototransfer::data::{make_synthetic_dataset, sample_episode, Dataset, SyntheticSpec};
use prototransfer::eval::{evaluate, Adaptor, EvalSpec};
use prototransfer::fewshot::{
    classify_prototypes, compute_prototypes, embed, init_head, proto_tune, train_pre_linear,
    train_protonet_supervised, BnMode, FineTuneConfig, PreLinearConfig, ProtoNetConfig, Scope,
};
use prototransfer::rng;
use rand::Rng;

fn random_matrix(seed: u64, tag: u64, rows: usize, cols: usize, scale: f32) -> Tensor {
    let mut r = rng::stream(seed, &[31, tag]);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn nearest(protos: &Tensor, z: &[f32]) -> usize {
    let d = z.len();
    let dist = |c: &[f32]| c.iter().zip(z).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
    let rows: Vec<&[f32]> = protos.data().chunks(d).collect();
    (0..rows.len()).fold(0, |best, n| if dist(rows[n]) < dist(rows[best]) { n } else { best })
}

fn bits(net: &EmbeddingNetwork) -> Vec<u32> {
    let ck = net.to_checkpoint();
    ck.entries().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn prototype_examples() {
    let emb = Tensor::new(vec![3, 2], vec![1.0, 1.0, 3.0, 3.0, 7.0, -1.0]).unwrap();
    let p = compute_prototypes(&emb, &[0, 0, 1], 2).unwrap();
    assert_eq!(p.data(), &[2.0, 2.0, 7.0, -1.0]);
    assert!(compute_prototypes(&emb, &[0, 0, 0], 2).is_err());
    let head = init_head(&Tensor::new(vec![2, 2], vec![2.0, 2.0, 0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(head.weight.data(), &[4.0, 4.0, 0.0, 0.0]);
    assert_eq!(head.bias.data(), &[-8.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prototypes_match_a_loop_and_ignore_sample_order(seed in any::<u64>(), n in 1usize..6, extra in 0usize..25, d in 1usize..8) {
        use rand::seq::SliceRandom;
        let m = n + extra;
        let emb = random_matrix(seed, 0, m, d, 3.0);
        let mut labels: Vec<usize> = (0..m).map(|i| i % n).collect();
        labels.shuffle(&mut rng::stream(seed, &[1]));
        let p = compute_prototypes(&emb, &labels, n).unwrap();
        for c in 0..n {
            let members: Vec<usize> = (0..m).filter(|&i| labels[i] == c).collect();
            for k in 0..d {
                let mean = members.iter().map(|&i| emb.data()[i * d + k] as f64).sum::<f64>() / members.len() as f64;
                prop_assert!((p.data()[c * d + k] as f64 - mean).abs() < 1e-6);
            }
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng::stream(seed, &[2]));
        let rows: Vec<f32> = order.iter().flat_map(|&i| emb.data()[i * d..(i + 1) * d].to_vec()).collect();
        let shuffled = Tensor::new(vec![m, d], rows).unwrap();
        let relabeled: Vec<usize> = order.iter().map(|&i| (labels[i] + 1) % n).collect();
        let q = compute_prototypes(&shuffled, &relabeled, n).unwrap();
        for c in 0..n {
            for k in 0..d {
                prop_assert!((q.data()[((c + 1) % n) * d + k] - p.data()[c * d + k]).abs() < 1e-5);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn initialized_head_is_the_nearest_prototype_rule(seed in any::<u64>(), n in 2usize..10, d in 1usize..16) {
        let protos = random_matrix(seed, 0, n, d, 2.0);
        let z = random_matrix(seed, 1, 1, d, 2.0);
        let head = init_head(&protos).unwrap();
        prop_assert_eq!(head.predict(&z).unwrap().labels[0], nearest(&protos, z.data()));
        prop_assert_eq!(classify_prototypes(&protos, &z).unwrap().labels[0], nearest(&protos, z.data()));
    }
}

#[test]
fn ties_go_to_the_lowest_class() {
    let protos = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
    let p = classify_prototypes(&protos, &Tensor::zeros(&[1, 1])).unwrap();
    assert_eq!(p.labels, vec![0]);
    assert_eq!(p.scores[0], vec![0.5, 0.5]);
    let p = classify_prototypes(&protos, &Tensor::full(&[1, 1], 1.0)).unwrap();
    assert_eq!(p.labels, vec![1]);
    assert!(p.scores[0][1] > p.scores[0][0]);
}

fn episode_tensors(ds: &Dataset, ways: usize, shots: usize, seed: u64) -> (Tensor, Vec<usize>, Tensor, Vec<usize>) {
    let ep = sample_episode(ds, ways, shots, 10, &mut rng::stream(seed, &[9])).unwrap();
    (
        ep.support_tensor(ds).unwrap(),
        ep.support_labels.clone(),
        ep.query_tensor(ds).unwrap(),
        ep.query_labels.clone(),
    )
}

fn data(classes: usize, noise: f32, sample_offset: usize) -> Dataset {
    make_synthetic_dataset(&SyntheticSpec {
        n_classes: classes,
        n_per_class: 30,
        noise_std: noise,
        sample_offset,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn zero_epochs_is_nearest_prototype() {
    let ds = data(8, 0.2, 0);
    let net = EmbeddingNetwork::init_conv4(1, 16, 4).unwrap();
    let (s, sl, q, _) = episode_tensors(&ds, 5, 3, 0);
    let cfg = FineTuneConfig { epochs: 0, ..Default::default() };
    let adapted = proto_tune(&net, &s, &sl, 5, &cfg, BnMode::Eval, &mut rng::stream(0, &[0])).unwrap();
    assert_eq!(adapted.steps, 0);
    let protos = compute_prototypes(&embed(&net, &s, BnMode::Eval).unwrap(), &sl, 5).unwrap();
    let expected = classify_prototypes(&protos, &embed(&net, &q, BnMode::Eval).unwrap()).unwrap();
    assert_eq!(adapted.predict(&net, &q, BnMode::Eval).unwrap().labels, expected.labels);
}

#[test]
fn one_shot_defaults_take_fifteen_steps() {
    let ds = data(8, 0.05, 0);
    let net = EmbeddingNetwork::init_conv4(1, 16, 4).unwrap();
    let (s, sl, _, _) = episode_tensors(&ds, 5, 1, 1);
    let adapted = proto_tune(&net, &s, &sl, 5, &FineTuneConfig::default(), BnMode::Eval, &mut rng::stream(0, &[0])).unwrap();
    assert_eq!(adapted.steps, 15);
    assert_eq!(adapted.epoch_losses.len(), 15);
}

#[test]
fn head_tuning_fits_separable_support_and_freezes_backbone() {
    let ds = data(8, 0.05, 0);
    let net = EmbeddingNetwork::init_conv4(1, 16, 4).unwrap();
    let before = bits(&net);
    for seed in 0..3 {
        let (s, sl, _, _) = episode_tensors(&ds, 5, 5, seed);
        let adapted = proto_tune(&net, &s, &sl, 5, &FineTuneConfig::default(), BnMode::Eval, &mut rng::stream(seed, &[0])).unwrap();
        assert!(adapted.net.is_none());
        assert_eq!(adapted.predict(&net, &s, BnMode::Eval).unwrap().accuracy(&sl), 1.0);
        let l = &adapted.epoch_losses;
        assert!(l.last().unwrap() < l.first().unwrap(), "{l:?}");
    }
    assert_eq!(bits(&net), before);
}

#[test]
fn full_model_tuning_updates_a_copy() {
    let ds = data(8, 0.05, 0);
    let net = EmbeddingNetwork::init_conv4(1, 16, 4).unwrap();
    let before = bits(&net);
    let (s, sl, _, _) = episode_tensors(&ds, 5, 2, 3);
    let cfg = FineTuneConfig { epochs: 2, scope: Scope::FullModel, ..Default::default() };
    let adapted = proto_tune(&net, &s, &sl, 5, &cfg, BnMode::Eval, &mut rng::stream(0, &[0])).unwrap();
    assert_ne!(bits(adapted.net.as_ref().unwrap()), before);
    assert_eq!(bits(&net), before);
}

#[test]
fn protonet_zero_iterations_is_a_no_op() {
    let ds = data(8, 0.05, 0);
    let mut net = EmbeddingNetwork::init_conv4(1, 16, 1).unwrap();
    let before = bits(&net);
    let cfg = ProtoNetConfig { ways: 5, iterations: 0, ..Default::default() };
    assert!(train_protonet_supervised(&ds, &mut net, &cfg).unwrap().is_empty());
    assert_eq!(bits(&net), before);
}

// Premise: a freshly initialized network gives near-uniform softmax over
// the episode classes. The unnormalized Conv-4 embeddings are spread far
// enough that the first-episode loss sits well below ln(ways).
#[test]
fn protonet_initial_loss_is_near_log_ways() {
    let ds = data(64, 0.2, 0);
    for (seed, ways) in [(0u64, 20usize), (1, 10), (2, 5)] {
        let mut net = EmbeddingNetwork::init_conv4(1, 16, seed).unwrap();
        let cfg = ProtoNetConfig { ways, iterations: 1, seed, ..Default::default() };
        let first = train_protonet_supervised(&ds, &mut net, &cfg).unwrap()[0];
        assert!((first - (ways as f32).ln()).abs() <= 0.5, "{ways}-way: {first} vs {}", (ways as f32).ln());
    }
}

#[test]
fn protonet_separates_synthetic_classes() {
    let train = data(8, 0.05, 0);
    let held_out = data(8, 0.05, 1000);
    let mut net = EmbeddingNetwork::init_conv4(1, 16, 0).unwrap();
    let cfg = ProtoNetConfig { ways: 5, shots: 5, queries: 5, iterations: 2000, ..Default::default() };
    train_protonet_supervised(&train, &mut net, &cfg).unwrap();
    let r = evaluate(Some(&net), &held_out, &EvalSpec::new(5, 5, 200, Adaptor::Proto, 1), "held-out").unwrap();
    assert!(r.mean >= 0.95, "{}", r.mean);
}

#[test]
fn pre_linear_needs_two_classes() {
    let ds = data(2, 0.05, 0);
    let one = prototransfer::data::restrict(&ds, Some(1), None, 0).unwrap();
    let mut net = EmbeddingNetwork::init_conv4(1, 16, 0).unwrap();
    assert!(train_pre_linear(&one, &mut net, &PreLinearConfig::default()).is_err());
}

#[test]
fn pre_linear_initial_loss_is_near_log_classes() {
    let ds = data(8, 0.05, 0);
    let mut net = EmbeddingNetwork::init_conv4(1, 16, 0).unwrap();
    let cfg = PreLinearConfig { epochs: 1, ..Default::default() };
    let (_, losses) = train_pre_linear(&ds, &mut net, &cfg).unwrap();
    assert!((losses[0] - 8f32.ln()).abs() <= 0.5, "{} vs {}", losses[0], 8f32.ln());
}

#[test]
fn pre_linear_then_probe_classifies_held_out_samples() {
    let train = data(8, 0.05, 0);
    let held_out = data(8, 0.05, 1000);
    let mut net = EmbeddingNetwork::init_conv4(1, 16, 0).unwrap();
    train_pre_linear(&train, &mut net, &PreLinearConfig { epochs: 30, ..Default::default() }).unwrap();
    let r = evaluate(Some(&net), &held_out, &EvalSpec::new(5, 5, 100, Adaptor::Linear, 2), "held-out").unwrap();
    assert!(r.mean >= 0.9, "{}", r.mean);
}
