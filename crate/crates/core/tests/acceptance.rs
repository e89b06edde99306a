//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use kgc_core::eval::{
    aggregate, evaluate_link_prediction, evaluate_relation_prediction,
    evaluate_triple_classification, rank_link_all, rank_relation_all, EvalOptions, Metrics,
    TieRule,
};
use kgc_core::sampling::Corrupter;
use kgc_core::scorers::classifier::{ClassifierState, Gradients, Target, Vocabulary};
use kgc_core::scorers::embedding::{
    distmult_score_grad, distmult_score_vec, margin_loss, transe_margin_loss_grad,
    transe_score_vec, EmbeddingModel, Norm,
};
use kgc_core::scorers::{
    relation_loss, relation_loss_logit_grad, train, triple_loss, triple_loss_logit_grad,
    RelationDistribution, ScoreVector, ScorerKind, Task, TrainConfig,
};
use kgc_core::textgen::{self, Token};
use kgc_core::{RelationId, Side, Triple};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const RUN_BUDGET: Duration = Duration::from_secs(30 * 60);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut compared = 0usize;
    for g in 0..10u64 {
        let bundle = random_bundle(1000 + g, 30, 5, 200);
        let kg = &bundle.graph;
        let filter = bundle.full_positives();
        let transe = random_state(kg, EmbeddingModel::Transe, 4, g);
        let distmult = random_state(kg, EmbeddingModel::Distmult, 4, g + 50);
        let coarse = Coarse(random_state(kg, EmbeddingModel::Transe, 4, g + 100), 0.5);
        for tie in [TieRule::Mean, TieRule::Optimistic, TieRule::Pessimistic] {
            for scorer in [&transe as &dyn kgc_core::Scorer, &distmult, &coarse] {
                let ranks = rank_link_all(scorer, kg, &bundle.test, filter, tie)
                    .map_err(|e| e.to_string())?;
                for r in &ranks {
                    let expected = oracle_link_rank(scorer, kg, &r.triple, r.side, filter, tie);
                    if r.rank != expected {
                        return Err(format!(
                            "graph {g}: link rank {} != oracle {expected} for {:?}",
                            r.rank, r
                        ));
                    }
                    compared += 1;
                }
                let ranks = rank_relation_all(scorer, kg, &bundle.test, filter, tie)
                    .map_err(|e| e.to_string())?;
                for r in &ranks {
                    let expected = oracle_relation_rank(scorer, kg, &r.triple, filter, tie);
                    if r.rank != expected {
                        return Err(format!(
                            "graph {g}: relation rank {} != oracle {expected}",
                            r.rank
                        ));
                    }
                    compared += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(10),
        format!(
            "{compared} ranks identical to brute force over 10 graphs in {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_fidelity() -> Outcome {
    let half = ScoreVector { p0: 0.5, p1: 0.5 };
    let uniform = RelationDistribution::uniform(3);
    let cases = [
        (
            "triple loss y=1 p0=0.5",
            triple_loss(&[half], &[1]).unwrap(),
            std::f64::consts::LN_2,
        ),
        (
            "triple loss y=1 p0=1",
            triple_loss(&[ScoreVector { p0: 1.0, p1: 0.0 }], &[1]).unwrap(),
            0.0,
        ),
        (
            "triple loss y=(1,0) p0=0.5",
            triple_loss(&[half, half], &[1, 0]).unwrap(),
            2.0 * std::f64::consts::LN_2,
        ),
        (
            "relation loss uniform R=3",
            relation_loss(std::slice::from_ref(&uniform), &[RelationId(2)]).unwrap(),
            1.09861228866811,
        ),
        (
            "relation loss point mass",
            relation_loss(
                &[RelationDistribution {
                    probs: vec![0.0, 1.0, 0.0],
                }],
                &[RelationId(1)],
            )
            .unwrap(),
            0.0,
        ),
        (
            "relation loss two uniform R=3",
            relation_loss(&[uniform.clone(), uniform], &[RelationId(0), RelationId(1)]).unwrap(),
            2.19722457733622,
        ),
    ];
    let worst = cases
        .iter()
        .map(|(_, got, want)| (got - want).abs())
        .fold(0.0, f64::max);
    let failing: Vec<_> = cases
        .iter()
        .filter(|(_, g, w)| (g - w).abs() > 1e-9)
        .map(|c| c.0)
        .collect();
    check(
        failing.is_empty(),
        format!(
            "{} hand-computed cases, max abs error {worst:.1e} (tolerance 1e-9){}",
            cases.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing {failing:?}")
            }
        ),
    )
}

fn tiny_classifier(rng: &mut ChaCha8Rng, relations: usize) -> ClassifierState {
    let mut vocab = Vocabulary::default();
    for w in ["w0", "w1", "w2", "w3", "w4"] {
        vocab.insert(w);
    }
    let mut s = ClassifierState::init(vocab, relations, 4, 12, 0.0, rng);
    for x in s
        .triple_head
        .data
        .iter_mut()
        .chain(s.relation_head.data.iter_mut())
    {
        *x = rng.random_range(-1.0..1.0);
    }
    for x in s.hidden_bias.data.iter_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
    s
}

/// Max relative error of the classifier's backward pass against finite
/// differences over every parameter touched by one sample.
fn classifier_grad_error(rng: &mut ChaCha8Rng, target_kind: Task) -> f64 {
    let relations = 3;
    let s = tiny_classifier(rng, relations);
    let words: Vec<Vec<Token>> = (0..3)
        .map(|_| {
            (0..rng.random_range(1..3))
                .map(|_| Token::word(format!("w{}", rng.random_range(0..5))))
                .collect()
        })
        .collect();
    let elements = if target_kind == Task::Rp {
        vec![(words[0].clone(), 0), (words[2].clone(), 0)]
    } else {
        vec![
            (words[0].clone(), 0),
            (words[1].clone(), 1),
            (words[2].clone(), 0),
        ]
    };
    let seq = textgen::assemble(elements, 12).unwrap();
    let enc = s.encode_ids(&seq);
    let target = if target_kind == Task::Rp {
        Target::Relation(RelationId(rng.random_range(0..relations as u32)))
    } else {
        Target::Triple(rng.random_range(0..2))
    };
    let mut grads = Gradients::zeros_like(&s);
    let fwd = s.forward::<ChaCha8Rng>(&enc, None);
    s.backward(&enc, &fwd, target, &mut grads);

    let mut worst = 0.0f64;
    let mut compare = |analytic: f64, pick: &dyn Fn(&mut ClassifierState) -> &mut f64| {
        let mut p = s.clone();
        let orig = *pick(&mut p);
        *pick(&mut p) = orig + FD_STEP;
        let up = p.sample_loss(&enc, target);
        *pick(&mut p) = orig - FD_STEP;
        let down = p.sample_loss(&enc, target);
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
    };
    let h = s.hidden_size();
    for i in 0..h * h {
        compare(grads.hidden_weights.data[i], &|p| {
            &mut p.hidden_weights.data[i]
        });
    }
    for i in 0..h {
        compare(grads.hidden_bias.data[i], &|p| &mut p.hidden_bias.data[i]);
    }
    for i in 0..2 * h {
        compare(grads.segment.data[i], &|p| {
            &mut p.segment_embeddings.data[i]
        });
    }
    let head_len = if target_kind == Task::Rp {
        relations * h
    } else {
        2 * h
    };
    for i in 0..head_len {
        if target_kind == Task::Rp {
            compare(grads.relation_head.data[i], &|p| {
                &mut p.relation_head.data[i]
            });
        } else {
            compare(grads.triple_head.data[i], &|p| &mut p.triple_head.data[i]);
        }
    }
    let rows: Vec<usize> = grads.token.touched().collect();
    for row in rows {
        for k in 0..h {
            let a = grads.token.get(row).unwrap()[k];
            compare(a, &|p| &mut p.token_embeddings.row_mut(row)[k]);
        }
    }
    let rows: Vec<usize> = grads.position.touched().collect();
    for row in rows {
        for k in 0..h {
            let a = grads.position.get(row).unwrap()[k];
            compare(a, &|p| &mut p.position_embeddings.row_mut(row)[k]);
        }
    }
    worst
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 6];
    for i in 0..100 {
        // Triple loss with respect to the two logits.
        let z = random_vec(&mut rng, 2, 4.0);
        let y = rng.random_range(0..2u8);
        let g = triple_loss_logit_grad(z[0], z[1], y);
        let n = numeric_grad(&z, |z| {
            triple_loss(&[ScoreVector::from_logits(z[0], z[1])], &[y]).unwrap()
        });
        worst[0] = worst[0]
            .max(max_rel_err(&g, &n))
            .max(classifier_grad_error(&mut rng, Task::Tc));

        // Relation loss with respect to R logits.
        let r = rng.random_range(2..9usize);
        let z = random_vec(&mut rng, r, 4.0);
        let truth = RelationId(rng.random_range(0..r as u32));
        let g = relation_loss_logit_grad(&z, truth);
        let n = numeric_grad(&z, |z| {
            relation_loss(&[RelationDistribution::from_logits(z)], &[truth]).unwrap()
        });
        worst[1] = worst[1]
            .max(max_rel_err(&g, &n))
            .max(classifier_grad_error(&mut rng, Task::Rp));

        // TransE margin loss with respect to all six vectors.
        let d = rng.random_range(2..9usize);
        let norm = if i % 2 == 0 { Norm::L2 } else { Norm::L1 };
        let margin = rng.random_range(0.5..3.0);
        let x = random_vec(&mut rng, 6 * d, 1.0);
        let loss = |x: &[f64]| {
            let v = |k: usize| &x[k * d..(k + 1) * d];
            margin_loss(
                transe_score_vec(v(0), v(1), v(2), norm),
                transe_score_vec(v(3), v(4), v(5), norm),
                margin,
            )
        };
        let v = |k: usize| &x[k * d..(k + 1) * d];
        let (l, grads) =
            transe_margin_loss_grad([v(0), v(1), v(2)], [v(3), v(4), v(5)], margin, norm);
        worst[2] = worst[2].max(rel_err(l, loss(&x)));
        worst[3] = worst[3].max(max_rel_err(&grads.concat(), &numeric_grad(&x, loss)));

        // DistMult score with respect to h, r, t.
        let x = random_vec(&mut rng, 3 * d, 1.0);
        let f = |x: &[f64]| distmult_score_vec(&x[..d], &x[d..2 * d], &x[2 * d..]);
        let (_, g) = distmult_score_grad(&x[..d], &x[d..2 * d], &x[2 * d..]);
        worst[4] = worst[4].max(max_rel_err(&g.concat(), &numeric_grad(&x, f)));
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    check(
        max < 1e-4,
        format!(
            "100 instances each; max rel err triple loss {:.1e}, relation loss {:.1e}, TransE margin {:.1e}, DistMult {:.1e} (limit 1e-4)",
            worst[0], worst[1], worst[3].max(worst[2]), worst[4]
        ),
    )
}

fn corruption_run(bundle: &kgc_core::DatasetBundle, seed: u64, n: usize) -> Vec<Triple> {
    let corrupter = Corrupter::for_graph(&bundle.graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let side = if rng.random_bool(0.5) {
                Side::Head
            } else {
                Side::Tail
            };
            corrupter
                .corrupt(&bundle.train[i % bundle.train.len()], side, &mut rng)
                .unwrap()
        })
        .collect()
}

fn sampling_soundness(umls: &kgc_core::DatasetBundle) -> Outcome {
    let n = 100_000;
    let first = corruption_run(umls, 7, n);
    let positives = first
        .iter()
        .filter(|t| umls.full_positives().contains(t))
        .count();
    let second = corruption_run(umls, 7, n);
    let other = corruption_run(umls, 8, n);
    let corrupter = Corrupter::for_graph(&umls.graph);
    let par_a = corrupter
        .par_negative_batch(&umls.train, 3, 11, 256)
        .unwrap();
    let par_b = corrupter
        .par_negative_batch(&umls.train, 3, 11, 256)
        .unwrap();
    check(
        positives == 0 && first == second && first != other && par_a == par_b,
        format!(
            "{n} corruptions of UMLS train, {positives} known positives; same seed identical: {}; parallel batches identical: {}",
            first == second,
            par_a == par_b
        ),
    )
}

fn metric_invariants() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    let ranks = prop::collection::vec((1u32..400, any::<bool>()), 1..200);
    let hits = prop::collection::btree_set(1usize..50, 1..6);
    runner
        .run(&(ranks, hits), |(raw, ns)| {
            let ranks: Vec<f64> = raw
                .iter()
                .map(|&(r, half)| r as f64 + if half { 0.5 } else { 0.0 })
                .collect();
            let ns: Vec<usize> = ns.into_iter().collect();
            let m = Metrics::from_ranks(&ranks, &ns).unwrap();
            prop_assert!(m.mr >= 1.0);
            prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
            let h: Vec<f64> = m.hits.values().copied().collect();
            prop_assert!(h.windows(2).all(|w| w[0] <= w[1]));
            Ok(())
        })
        .map_err(|e| format!("metric bounds: {e}"))?;

    let mut runner = TestRunner::new(Config {
        cases: 64,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(0u64..10_000, 0usize..3), |(seed, which)| {
            let bundle = random_bundle(seed, 20, 4, 80);
            let kg = &bundle.graph;
            let base = random_state(kg, EmbeddingModel::Transe, 3, seed);
            let f: fn(f64) -> f64 =
                [|x: f64| x.exp(), |x: f64| 2.0 * x - 1.0, |x: f64| x * x * x][which];
            let mapped = Monotone(base.clone(), f);
            let filter = bundle.full_positives();
            let a = rank_link_all(&base, kg, &bundle.test, filter, TieRule::Mean).unwrap();
            let b = rank_link_all(&mapped, kg, &bundle.test, filter, TieRule::Mean).unwrap();
            prop_assert_eq!(&a, &b);
            let a = rank_relation_all(&base, kg, &bundle.test, filter, TieRule::Mean).unwrap();
            let b = rank_relation_all(&mapped, kg, &bundle.test, filter, TieRule::Mean).unwrap();
            prop_assert_eq!(&a, &b);
            let report = aggregate(&a, &[1, 3, 10], kg).unwrap();
            prop_assert!(report.check_invariants().is_ok());
            Ok(())
        })
        .map_err(|e| format!("rank invariance: {e}"))?;
    Ok("256 random rank lists (Hits monotone, MRR in (0,1], MR >= 1); 64 random graphs ranked identically under exp, affine and cubic score maps".into())
}

fn umls_ingestion(umls: &kgc_core::DatasetBundle) -> Outcome {
    let got = (
        umls.graph.num_entities(),
        umls.graph.num_relations(),
        umls.train.len(),
        umls.dev.len(),
        umls.test.len(),
    );
    check(
        got == (135, 46, 5216, 652, 661),
        format!(
            "{} entities, {} relations, {}/{}/{} triples (expected 135, 46, 5216/652/661)",
            got.0, got.1, got.2, got.3, got.4
        ),
    )
}

fn embedding_reproduction(umls: &kgc_core::DatasetBundle) -> Outcome {
    let opts = EvalOptions::default();
    let start = Instant::now();
    let transe = train(
        ScorerKind::Transe,
        umls,
        Task::Lp,
        &TrainConfig::embedding(ScorerKind::Transe),
    )
    .map_err(|e| e.to_string())?;
    let (lp, _) =
        evaluate_link_prediction(&transe.model, umls, &opts).map_err(|e| e.to_string())?;
    let tc =
        evaluate_triple_classification(&transe.model, umls, &opts).map_err(|e| e.to_string())?;
    let transe_time = start.elapsed();

    let start = Instant::now();
    let distmult = train(
        ScorerKind::Distmult,
        umls,
        Task::Tc,
        &TrainConfig::embedding(ScorerKind::Distmult),
    )
    .map_err(|e| e.to_string())?;
    let dm_tc =
        evaluate_triple_classification(&distmult.model, umls, &opts).map_err(|e| e.to_string())?;
    let distmult_time = start.elapsed();

    let hits10 = lp.hits[&10];
    let transe_acc = tc.accuracy.unwrap();
    let dm_acc = dm_tc.accuracy.unwrap();
    check(
        hits10 >= 0.80
            && (0.70..=0.86).contains(&transe_acc)
            && (0.78..=0.94).contains(&dm_acc)
            && transe_time < RUN_BUDGET
            && distmult_time < RUN_BUDGET,
        format!(
            "TransE LP Hits@10 {hits10:.4} (>= 0.80), TransE TC {transe_acc:.4} (in [0.70, 0.86]), DistMult TC {dm_acc:.4} (in [0.78, 0.94]); runs {:.1}s / {:.1}s",
            transe_time.as_secs_f64(),
            distmult_time.as_secs_f64()
        ),
    )
}

/// Desk-scale regime for the from-scratch encoder.
pub fn desk_classifier_config(task: Task) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 30,
        resample_negatives: true,
        ..TrainConfig::classifier(task)
    }
}

fn classifier_reproduction(umls: &kgc_core::DatasetBundle) -> Outcome {
    let opts = EvalOptions::default();
    let start = Instant::now();
    let tc_model = train(
        ScorerKind::Classifier,
        umls,
        Task::Tc,
        &desk_classifier_config(Task::Tc),
    )
    .map_err(|e| e.to_string())?;
    let tc =
        evaluate_triple_classification(&tc_model.model, umls, &opts).map_err(|e| e.to_string())?;
    let rp_model = train(
        ScorerKind::Classifier,
        umls,
        Task::Rp,
        &desk_classifier_config(Task::Rp),
    )
    .map_err(|e| e.to_string())?;
    let (rp, _) =
        evaluate_relation_prediction(&rp_model.model, umls, &opts).map_err(|e| e.to_string())?;
    let acc = tc.accuracy.unwrap();
    let hits1 = rp.hits[&1];
    check(
        acc >= 0.75 && hits1 >= 0.40,
        format!(
            "TC accuracy {acc:.4} (>= 0.75), RP Hits@1 {hits1:.4} (>= 0.40); {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    // `cargo test -- --list` and name filters are passed to every target.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    let umls = load_umls();
    let criteria: Vec<Criterion> = vec![
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("loss fidelity", Box::new(loss_fidelity)),
        ("gradient checks", Box::new(gradient_checks)),
        ("sampling soundness", Box::new(|| sampling_soundness(&umls))),
        (
            "UMLS embedding baselines",
            Box::new(|| embedding_reproduction(&umls)),
        ),
        (
            "UMLS native classifier",
            Box::new(|| classifier_reproduction(&umls)),
        ),
        ("metric invariants", Box::new(metric_invariants)),
        ("UMLS ingestion", Box::new(|| umls_ingestion(&umls))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
