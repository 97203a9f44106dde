use divdec_core::corpus::{DaVector, TokenId, BOS_ID, EOS_ID};
use divdec_core::generator::*;
use divdec_core::numkit::{Matrix, ParamStore, TrainConfig};

fn build(cfg: GeneratorConfig, fill: impl Fn(&str, usize, usize) -> f64) -> Generator {
    let (v, e, h, da) = (cfg.vocab, cfg.embed, cfg.hidden, cfg.da_dim);
    let mut store = ParamStore::new();
    for (name, rows, cols) in [
        ("emb", v, e),
        ("l0.w_x", 4 * h, e),
        ("l0.w_h", 4 * h, h),
        ("l0.b", 4 * h, 1),
        ("l0.w_dc", h, da),
        ("r.w_x", da, e),
        ("r.w_h", da, h),
        ("r.b", da, 1),
        ("out.w", v, h),
        ("out.b", v, 1),
    ] {
        let data = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| fill(name, r, c)).collect();
        store.add(name, Matrix::from_vec(rows, cols, data).unwrap()).unwrap();
    }
    Generator::from_parts(cfg, store).unwrap()
}

fn cfg(vocab: usize, embed: usize, hidden: usize, da_dim: usize) -> GeneratorConfig {
    GeneratorConfig {
        vocab,
        embed,
        hidden,
        da_dim,
        layers: 1,
        dropout: 0.0,
    }
}

#[test]
fn step_matches_high_precision_hand_evaluation() {
    // every weight is 0.5 sin(tag + 1.3 r + 0.7 c); values from mpmath at 40 digits
    let tag = |name: &str| match name {
        "emb" => 1.0,
        "l0.w_x" => 2.0,
        "l0.w_h" => 3.0,
        "l0.b" => 4.0,
        "l0.w_dc" => 5.0,
        "r.w_x" => 6.0,
        "r.w_h" => 7.0,
        "r.b" => 8.0,
        "out.w" => 9.0,
        "out.b" => 10.0,
        _ => unreachable!(),
    };
    let g = build(cfg(3, 2, 2, 2), |n, r, c| 0.5 * (tag(n) + 1.3 * r as f64 + 0.7 * c as f64).sin());
    let ctx = g.init_context(&DaVector(vec![1.0, 1.0])).unwrap();
    let s1 = g.step(&ctx, BOS_ID).unwrap();
    let s2 = g.step(&s1.next, 2).unwrap();
    let p1 = [0.27106167400584934335, 0.26994196354934204593, 0.45899636244480861072];
    let p2 = [0.29068585451826221166, 0.25865026734656490424, 0.4506638781351728841];
    let d2 = [0.36888183936064708451, 0.24595590628112884081];
    for (a, b) in s1.distribution.iter().zip(p1) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for (a, b) in s2.distribution.iter().zip(p2) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for (a, b) in s2.next.d.iter().zip(d2) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(s2.next.last, [BOS_ID, BOS_ID, 2]);
    assert_eq!(s2.next.t, 2);
}

/// One-hot embeddings, saturated gates and an output layer mapping each
/// token's hidden unit to its successor: <s> → 2 → 3 → 4 → </s>.
fn chain_model() -> Generator {
    let succ = [2usize, 1, 3, 4, 1];
    build(cfg(5, 5, 5, 1), |name, r, c| match name {
        "emb" => (r == c) as u8 as f64,
        "l0.w_x" if r >= 15 => 3.0 * ((r - 15) == c) as u8 as f64,
        "l0.b" => match r / 5 {
            1 => -20.0,
            3 => 0.0,
            _ => 20.0,
        },
        "out.w" => 20.0 * (succ[c] == r) as u8 as f64,
        _ => 0.0,
    })
}

#[test]
fn greedy_rollout_of_hand_built_chain() {
    let g = chain_model();
    let start = g.start(&DaVector(vec![0.0])).unwrap();
    assert_eq!(g.greedy_rollout(&start.next, 10).unwrap(), (vec![2, 3, 4], true));
    assert_eq!(g.greedy_rollout(&start.next, 2).unwrap(), (vec![2, 3], false));
    let after = g.advance(&start.next, 3).unwrap();
    assert_eq!(g.greedy_rollout(&after, 10).unwrap(), (vec![4], true));
    assert_eq!(g.greedy_rollout(&start.next, 10).unwrap(), g.greedy_rollout(&start.next, 10).unwrap());
    assert!(g.greedy_rollout(&start.next, 0).is_err());
}

#[test]
fn certain_end_of_sentence_gives_empty_continuation() {
    let g = build(cfg(4, 2, 3, 2), |name, r, c| match name {
        "out.b" if r == EOS_ID as usize => 1000.0,
        "out.b" => 0.0,
        _ => 0.1 * (r + c) as f64,
    });
    let start = g.start(&DaVector(vec![1.0, 0.0])).unwrap();
    assert_eq!(start.distribution[EOS_ID as usize], 1.0);
    assert_eq!(g.greedy_rollout(&start.next, 5).unwrap(), (vec![], true));
}

fn random_model(seed: u64) -> Generator {
    Generator::new(cfg(7, 4, 6, 3), seed).unwrap()
}

#[test]
fn sequence_logprob_replays_step_by_step() {
    let g = random_model(3);
    let enc = DaVector(vec![1.0, 0.0, 1.0]);
    let seq: Vec<TokenId> = vec![3, 5, 2, EOS_ID];
    let (per, total) = g.sequence_logprob(&seq, &enc).unwrap();
    let mut ctx = g.init_context(&enc).unwrap();
    let mut input = BOS_ID;
    let mut manual = 0.0;
    for (k, &t) in seq.iter().enumerate() {
        let out = g.step(&ctx, input).unwrap();
        let lp = out.distribution[t as usize].ln();
        assert!((per[k] - lp).abs() < 1e-12);
        manual += lp;
        ctx = out.next;
        input = t;
    }
    assert!((total - manual).abs() < 1e-12);
    assert_eq!(total, per.iter().sum::<f64>());

    let (_, eos_only) = g.sequence_logprob(&[EOS_ID], &enc).unwrap();
    let first = g.start(&enc).unwrap().distribution[EOS_ID as usize].ln();
    assert!((eos_only - first).abs() < 1e-12);

    let (_, reversed) = g.sequence_logprob(&[2, 5, 3, EOS_ID], &enc).unwrap();
    assert_ne!(reversed, total);
    assert!(g.sequence_logprob(&[3, 9, EOS_ID], &enc).is_err());
    assert!(g.sequence_logprob(&[3, 4], &enc).is_err());
}

#[test]
fn contexts_serialize_round_trip() {
    let g = random_model(5);
    let ctx = g.advance(&g.init_context(&DaVector(vec![0.0, 1.0, 1.0])).unwrap(), 4).unwrap();
    let text = serde_json::to_string(&ctx).unwrap();
    let back: StepContext = serde_json::from_str(&text).unwrap();
    assert_eq!(back, ctx);
    let zero = g.init_context(&DaVector(vec![0.0; 3])).unwrap();
    assert!(zero.d.iter().all(|&v| v == 0.0));
    assert!(g.init_context(&DaVector(vec![1.0])).is_err());
}

fn single_example() -> Vec<Example> {
    vec![(DaVector(vec![1.0, 0.0, 1.0]), vec![3, 4, 5, 6, EOS_ID])]
}

#[test]
fn single_instance_is_memorised() {
    let data = single_example();
    let tc = TrainConfig {
        learning_rate: 0.05,
        epochs: 200,
        patience: 200,
        ..Default::default()
    };
    let (model, log) = train_model(random_model(1), &data, &data, &tc).unwrap();
    let losses: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses[0] > losses[1] && losses[1] > losses[2] && losses[2] > losses[3], "{losses:?}");
    let mut m = model;
    let final_loss = mean_loss(&mut m, &data).unwrap();
    assert!(final_loss < 0.05, "loss {final_loss}");
}

#[test]
fn lm_memorises_without_control_vector() {
    let data = vec![(DaVector(vec![]), vec![3, 4, 5, EOS_ID])];
    let tc = TrainConfig {
        learning_rate: 0.05,
        epochs: 200,
        patience: 200,
        ..Default::default()
    };
    let lm = Generator::new(cfg(7, 4, 6, 0), 2).unwrap();
    let (mut lm, _) = train_model(lm, &data, &data, &tc).unwrap();
    assert!(mean_loss(&mut lm, &data).unwrap() < 0.05);
    assert_eq!(lm.config().da_dim, 0);
}

#[test]
fn patience_one_stops_after_two_worsening_epochs() {
    let train = single_example();
    // the validation sentence uses words training pushes down
    let val = vec![(DaVector(vec![1.0, 0.0, 1.0]), vec![2, 2, 2, EOS_ID])];
    let tc = TrainConfig {
        learning_rate: 0.05,
        epochs: 30,
        patience: 1,
        ..Default::default()
    };
    let (_, log) = train_model(random_model(1), &train, &val, &tc).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs[1].val_loss > log.epochs[0].val_loss);
    assert_eq!(log.best_epoch, 0);
}

#[test]
fn training_is_deterministic() {
    let data = single_example();
    let tc = TrainConfig {
        epochs: 5,
        ..Default::default()
    };
    let (a, la) = train_model(random_model(4), &data, &data, &tc).unwrap();
    let (b, lb) = train_model(random_model(4), &data, &data, &tc).unwrap();
    assert_eq!(a.store(), b.store());
    assert_eq!(la, lb);
}

#[test]
fn empty_splits_are_rejected() {
    let tc = TrainConfig::default();
    assert!(train_model(random_model(1), &[], &single_example(), &tc).is_err());
}
