mod common;

use common::{max_row_diff, perturb_at, random_sequence, rng};
use rand::Rng;
use seqintent_core::config::{HeadSpec, HeadTarget, MultiLabelScoring};
use seqintent_core::data::{generate_catalog, generate_users, Interaction};
use seqintent_core::encoder::{time_bucket, time_buckets};
use seqintent_core::intent::mix_projections;
use seqintent_core::tensor::{grad_check, Graph, Tensor, TensorError, DEFAULT_EPS};
use seqintent_core::trainer::{duration_weights, sequence_loss, target_durations};
use seqintent_core::{Arch, Config, Model};

fn micro(arch: Arch) -> Config {
    let mut cfg = Config::micro();
    cfg.variant.arch = arch;
    if arch == Arch::V0 {
        cfg.heads.clear();
    }
    cfg
}

#[test]
fn time_buckets_start_at_zero_and_clip() {
    let ts = [100, 160, 160 + 86_400, 160 + 86_400];
    let b = time_buckets(&ts, 64, 180 * 86_400);
    assert_eq!(b[0], 0);
    assert_eq!(b[2], b[3]);
    assert!(b[1] < b[2]);
    assert_eq!(time_bucket(10 * 365 * 86_400, 64, 180 * 86_400), 63);
    assert_eq!(time_bucket(180 * 86_400, 64, 180 * 86_400), 63);
}

/// All per-position outputs of one forward pass, materialized.
fn outputs(model: &Model, seq: &[Interaction]) -> Vec<Tensor> {
    let mut g = model.graph();
    let out = model.net.forward(&mut g, seq).unwrap();
    let mut vars = vec![out.inputs.concat, out.item_enc, out.item_logits];
    vars.extend(out.intent_enc);
    vars.extend(out.heads.iter().map(|h| h.scores));
    if let Some(agg) = &out.aggregate {
        vars.extend([agg.alpha, agg.z]);
    }
    vars.into_iter().map(|v| g.value(v).clone()).collect()
}

#[test]
fn every_variant_is_causal() {
    let mut r = rng(21);
    let archs = [Arch::V0, Arch::V1, Arch::V2, Arch::V3];
    for trial in 0..100 {
        let arch = archs[trial % 4];
        let mut cfg = micro(arch);
        cfg.features.window = seqintent_core::config::Window(20 * 86_400);
        let model = Model::new(&cfg).unwrap();
        let n = r.random_range(2..9);
        let seq = random_sequence(&mut r, 0, n, 12);
        let base = outputs(&model, &seq.interactions);
        let j = r.random_range(1..n);
        let mut pert = seq.interactions.clone();
        perturb_at(&mut pert, j, &mut r, 12);
        let shift = r.random_range(1..86_400);
        pert[j..].iter_mut().for_each(|i| i.timestamp += shift);
        let after = outputs(&model, &pert);
        for (a, b) in base.iter().zip(&after) {
            assert!(max_row_diff(a, b, j) < 1e-12, "{arch} position {j} leaked");
        }
        // the perturbed position itself must react in the item path
        assert!(max_row_diff(&base[2], &after[2], j + 1) > 0.0);
    }
}

#[test]
fn single_interaction_forward() {
    let mut r = rng(22);
    let seq = random_sequence(&mut r, 0, 1, 12);
    for arch in [Arch::V0, Arch::V1, Arch::V2, Arch::V3] {
        let model = Model::new(&micro(arch)).unwrap();
        let a = outputs(&model, &seq.interactions);
        let b = outputs(&model, &seq.interactions);
        assert_eq!(a, b);
        assert_eq!(a[2].shape(), &[1, 12]);
    }
}

#[test]
fn head_scores_are_distributions() {
    let mut r = rng(23);
    let seq = random_sequence(&mut r, 0, 5, 12);
    let mut cfg = micro(Arch::V3);
    let model = Model::new(&cfg).unwrap();
    let mut g = model.graph();
    let out = model.net.forward(&mut g, &seq.interactions).unwrap();
    for h in &out.heads {
        let t = g.value(h.scores);
        for k in 0..5 {
            assert!((t.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let agg = out.aggregate.unwrap();
    for k in 0..5 {
        assert!((g.value(agg.alpha).row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let genre = cfg
        .heads
        .iter()
        .position(|h| h.target == HeadTarget::Genre)
        .unwrap();
    cfg.heads[genre].scoring = MultiLabelScoring::Sigmoid;
    let model = Model::new(&cfg).unwrap();
    let mut g = model.graph();
    let out = model.net.forward(&mut g, &seq.interactions).unwrap();
    assert!(g
        .value(out.heads[genre].scores)
        .data()
        .iter()
        .all(|&p| p > 0.0 && p < 1.0));
}

fn zero_heads(model: &mut Model) {
    for name in model.net.head_param_names() {
        let id = model.params.id(&name).unwrap();
        model
            .params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

#[test]
fn zero_heads_give_uniform_or_half() {
    let mut r = rng(24);
    let seq = random_sequence(&mut r, 0, 3, 12);
    let mut cfg = micro(Arch::V2);
    cfg.heads = vec![
        HeadSpec::new("tsr", HeadTarget::Tsr, 3, false),
        HeadSpec::new("genre", HeadTarget::Genre, 21, true),
    ];
    cfg.heads[1].scoring = MultiLabelScoring::Sigmoid;
    let mut model = Model::new(&cfg).unwrap();
    zero_heads(&mut model);
    let mut g = model.graph();
    let out = model.net.forward(&mut g, &seq.interactions).unwrap();
    assert!(g
        .value(out.heads[0].scores)
        .data()
        .iter()
        .all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    assert!(g
        .value(out.heads[1].scores)
        .data()
        .iter()
        .all(|&p| p == 0.5));

    cfg.heads[1].scoring = MultiLabelScoring::Softmax;
    let mut model = Model::new(&cfg).unwrap();
    zero_heads(&mut model);
    let mut g = model.graph();
    let out = model.net.forward(&mut g, &seq.interactions).unwrap();
    assert!(g
        .value(out.heads[1].scores)
        .data()
        .iter()
        .all(|&p| (p - 1.0 / 21.0).abs() < 1e-15));
}

fn rows(r: &mut impl Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(
        n,
        d,
        (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

#[test]
fn single_head_mix_is_the_projection() {
    let mut r = rng(25);
    let mut g = Graph::new();
    let p = g.input(rows(&mut r, 4, 5));
    let logits = g.input(rows(&mut r, 4, 1));
    let (alpha, z) = mix_projections(&mut g, &[p], logits).unwrap();
    assert!(g.value(alpha).data().iter().all(|&a| a == 1.0));
    assert_eq!(g.value(z), g.value(p));
}

#[test]
fn shifting_attention_logits_leaves_z_unchanged() {
    let mut r = rng(26);
    for _ in 0..20 {
        let mut g = Graph::new();
        let projs: Vec<_> = (0..4).map(|_| g.input(rows(&mut r, 3, 6))).collect();
        let l = rows(&mut r, 3, 4);
        let c: f64 = r.random_range(-50.0..50.0);
        let shifted = Tensor::matrix(3, 4, l.data().iter().map(|v| v + c).collect()).unwrap();
        let a = g.input(l);
        let b = g.input(shifted);
        let (alpha_a, za) = mix_projections(&mut g, &projs, a).unwrap();
        let (_, zb) = mix_projections(&mut g, &projs, b).unwrap();
        for (x, y) in g.value(za).data().iter().zip(g.value(zb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for k in 0..3 {
            assert!((g.value(alpha_a).row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_projections_mix_to_themselves() {
    let mut r = rng(27);
    let mut g = Graph::new();
    let v = rows(&mut r, 2, 5);
    let projs: Vec<_> = (0..3).map(|_| g.input(v.clone())).collect();
    let logits = g.input(rows(&mut r, 2, 3));
    let (_, z) = mix_projections(&mut g, &projs, logits).unwrap();
    for (x, y) in g.value(z).data().iter().zip(v.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn micro_users(seed: u64) -> Vec<seqintent_core::data::UserSequence> {
    let cfg = Config::micro();
    let mut data = cfg.data.clone();
    data.seed = seed;
    let catalog = generate_catalog(data.num_items, seed).unwrap();
    generate_users(&catalog, &data).unwrap().sequences
}

/// Item-loss gradient of every head output parameter.
fn item_grad_on_heads(arch: Arch) -> Vec<f64> {
    let model = Model::new(&micro(arch)).unwrap();
    let users = micro_users(3);
    let seq = &users[0].interactions;
    let w = duration_weights(
        &target_durations(seq),
        model.config().training.duration_weighting,
    );
    let mut g = model.graph();
    let out = model.net.forward(&mut g, seq).unwrap();
    let l = sequence_loss(&mut g, &out, &model.net.heads, seq, &w, 1.0, 1.0).unwrap();
    let grads = g.backward(l.item).unwrap();
    model
        .net
        .head_param_names()
        .iter()
        .flat_map(|n| {
            let id = model.params.id(n).unwrap();
            let len = model.params.get(id).len();
            grads.param(id).map_or(vec![0.0; len], <[f64]>::to_vec)
        })
        .collect()
}

#[test]
fn item_loss_reaches_heads_only_through_the_hierarchy() {
    let flat = item_grad_on_heads(Arch::V1);
    assert!(!flat.is_empty());
    assert!(flat.iter().all(|&v| v == 0.0));
    for arch in [Arch::V2, Arch::V3] {
        let g = item_grad_on_heads(arch);
        assert!(g.iter().any(|&v| v != 0.0), "{arch}");
    }
}

fn full_grad_check(cfg: &Config) -> f64 {
    let model = Model::new(cfg).unwrap();
    let users = micro_users(5);
    let seqs: Vec<&[Interaction]> = users
        .iter()
        .take(2)
        .map(|u| u.interactions.as_slice())
        .collect();
    let durs: Vec<f64> = seqs.iter().flat_map(|s| target_durations(s)).collect();
    let w = duration_weights(&durs, cfg.training.duration_weighting);
    let norm = 1.0 / durs.len() as f64;
    let report = grad_check(&model.params, DEFAULT_EPS, |g: &mut Graph<'_>| {
        let wrap = |e: seqintent_core::Error| TensorError::Contract(e.to_string());
        let mut total = None;
        let mut at = 0;
        for s in &seqs {
            let out = model.net.forward(g, s).map_err(wrap)?;
            let ws = &w[at..at + s.len() - 1];
            at += s.len() - 1;
            let l = sequence_loss(g, &out, &model.net.heads, s, ws, norm, cfg.training.lambda)
                .map_err(wrap)?;
            total = Some(match total {
                None => l.total,
                Some(t) => g.add(t, l.total)?,
            });
        }
        Ok(total.expect("two users"))
    })
    .unwrap();
    assert!(report.entries == model.params.numel());
    report.max_rel_err
}

#[test]
fn micro_gradients_match_finite_differences_for_every_variant() {
    for arch in [Arch::V0, Arch::V1, Arch::V2] {
        let err = full_grad_check(&micro(arch));
        assert!(err < 1e-4, "{arch}: {err}");
    }
    let mut cfg = micro(Arch::V3);
    let genre = cfg
        .heads
        .iter()
        .position(|h| h.target == HeadTarget::Genre)
        .unwrap();
    cfg.heads[genre].scoring = MultiLabelScoring::Sigmoid;
    let err = full_grad_check(&cfg);
    assert!(err < 1e-4, "V3 sigmoid genre: {err}");
}
