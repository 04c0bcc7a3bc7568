//! Suites shared by the focused integration tests and the acceptance run.
//! Each returns a one-line summary on success and a diagnosis on failure.

#![allow(dead_code)]

use std::cell::Cell;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use shapemoe_core::metrics::{self, SampleOutcome};
use shapemoe_core::model::{forward_sample, model_from_tensors, scene_tensors, total_loss, Model, ModelConfig};
use shapemoe_core::numerics::{
    grad_check, grad_check_tensors, ops, GradCheckOptions, GradCheckReport, Graph, SparseSoftmaxGrad, Tensor, Var,
};
use shapemoe_core::router::{self, gate_from_scores, route};
use shapemoe_core::synth_data::{generate_corpus, Dataset, GenConfig, Mask, SceneRecord};
use shapemoe_core::trainer::{TrainConfig, Trainer};

pub type Outcome = Result<String, String>;

pub fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

pub fn corpus(seed: u64, count: usize, side: usize) -> Dataset {
    generate_corpus(&GenConfig {
        seed,
        count,
        side,
        ..GenConfig::default()
    })
    .expect("corpus generation")
}

pub fn tiny_model(experts: usize, topk: usize) -> ModelConfig {
    ModelConfig {
        side: 16,
        experts,
        topk,
        latent_dim: 4,
        embed_dim: 8,
        mask_channels: 4,
        trunk_channels: 4,
        feature_channels: 8,
        mlp_hidden: 6,
        expert_hidden: 3,
        ..ModelConfig::default()
    }
}

// ---------------------------------------------------------------- gradients

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Weighted sum with fixed random weights, so every output coordinate
/// carries a distinct upstream gradient.
fn head(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> shapemoe_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?);
    let y = g.mul(x, w)?;
    g.sum(y)
}

type OpFn<'a> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> shapemoe_core::Result<Var> + 'a;

/// Finite-difference checks of every differentiable graph operation.
pub fn op_gradient_reports(seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let x = random(&mut rng, &[3, 4]);
    let y = random(&mut rng, &[3, 4]);
    let a = random(&mut rng, &[5, 3]);
    let v = random(&mut rng, &[6]);
    let s = random(&mut rng, &[1]);
    let img = random(&mut rng, &[2, 6, 6]);
    let k1 = random(&mut rng, &[3, 2, 3, 3]);
    let b1 = random(&mut rng, &[3]);
    let target = Tensor::new([3, 4], (0..12).map(|i| f64::from(i % 3 == 0)).collect()).unwrap();
    let imp = Tensor::vector(vec![1.3, 0.4, 2.2, 0.9]);

    let mut out = Vec::new();
    let mut check = |name: &str, params: &[Tensor<f64>], f: &OpFn<'_>| {
        out.push(grad_check_tensors(name, params, |g, p| f(g, p), &opts).expect(name));
    };
    check("matmul", &[a.clone(), x.clone()], &|g, p| {
        let m = g.matmul(p[0], p[1])?;
        head(g, m, 1)
    });
    check("add", &[x.clone(), y.clone()], &|g, p| {
        let m = g.add(p[0], p[1])?;
        head(g, m, 2)
    });
    check("mul", &[x.clone(), y.clone()], &|g, p| {
        let m = g.mul(p[0], p[1])?;
        head(g, m, 3)
    });
    check("scale", std::slice::from_ref(&x), &|g, p| {
        let m = g.scale(p[0], -1.7)?;
        head(g, m, 4)
    });
    check("scale_by", &[x.clone(), s.clone()], &|g, p| {
        let m = g.scale_by(p[0], p[1])?;
        head(g, m, 5)
    });
    check("add_scalar", &[x.clone(), s.clone()], &|g, p| {
        let m = g.add_scalar(p[0], p[1])?;
        head(g, m, 6)
    });
    check("relu", std::slice::from_ref(&x), &|g, p| {
        let m = g.relu(p[0])?;
        head(g, m, 7)
    });
    check("sigmoid", std::slice::from_ref(&x), &|g, p| {
        let m = g.sigmoid(p[0])?;
        head(g, m, 8)
    });
    check("softplus", std::slice::from_ref(&x), &|g, p| {
        let m = g.softplus(p[0])?;
        head(g, m, 9)
    });
    check("softmax", std::slice::from_ref(&v), &|g, p| {
        let m = g.softmax(p[0])?;
        head(g, m, 10)
    });
    check("mask_except", std::slice::from_ref(&v), &|g, p| {
        let m = g.mask_except(p[0], &[1, 4])?;
        let m = g.softmax(m)?;
        head(g, m, 11)
    });
    check("sparse_softmax", std::slice::from_ref(&v), &|g, p| {
        let m = g.sparse_softmax(p[0], &[0, 2, 5], SparseSoftmaxGrad::Exact)?;
        head(g, m, 12)
    });
    check("mean_pool_spatial", std::slice::from_ref(&img), &|g, p| {
        let m = g.mean_pool_spatial(p[0])?;
        head(g, m, 13)
    });
    check("bilinear_upsample", std::slice::from_ref(&img), &|g, p| {
        let m = g.bilinear_upsample(p[0], 4)?;
        head(g, m, 14)
    });
    for stride in [1, 2] {
        check(&format!("conv2d_s{stride}"), &[img.clone(), k1.clone(), b1.clone()], &|g, p| {
            let m = g.conv2d(p[0], p[1], p[2], stride)?;
            head(g, m, 15)
        });
    }
    check("concat", &[x.clone(), v.clone()], &|g, p| {
        let m = g.concat(&[p[0], p[1]])?;
        head(g, m, 16)
    });
    check("reshape", std::slice::from_ref(&x), &|g, p| {
        let m = g.reshape(p[0], &[2, 6])?;
        head(g, m, 17)
    });
    check("select", std::slice::from_ref(&v), &|g, p| {
        let m = g.select(p[0], 3)?;
        g.mul(m, m)
    });
    check("sum", std::slice::from_ref(&x), &|g, p| {
        let m = g.mul(p[0], p[0])?;
        g.sum(m)
    });
    check("mean", std::slice::from_ref(&x), &|g, p| {
        let m = g.mul(p[0], p[0])?;
        g.mean(m)
    });
    check("bce_with_logits", std::slice::from_ref(&x), &|g, p| g.bce_with_logits(p[0], target.clone()));
    check("cv_squared", std::slice::from_ref(&imp), &|g, p| g.cv_squared(p[0]));
    out
}

/// Central differences over the whole model on two 16×16 scenes with frozen
/// `η`, exact sparse-softmax gradients and the full training loss.
pub fn full_model_gradient(topk: usize, seed: u64, coords: Option<usize>) -> GradCheckReport {
    let cfg = ModelConfig {
        side: 16,
        topk,
        gate_grad: SparseSoftmaxGrad::Exact,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg.clone(), seed).unwrap().cast::<f64>();
    let data = corpus(seed + 100, 2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let etas: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let inputs: Vec<_> = data.records.iter().map(|r| scene_tensors::<f64>(r, 16).unwrap()).collect();
    let targets: Vec<&Mask> = data.records.iter().map(|r| &r.amodal).collect();
    let p = &model.params;
    grad_check(
        &format!("full_model_k{topk}"),
        &model.store,
        |g| {
            let mut logits = Vec::new();
            let mut gates = Vec::new();
            for ((input, vis), eta) in inputs.iter().zip(&etas) {
                let s = forward_sample(g, &cfg, p, input.clone(), vis.clone(), Some(eta), None)?;
                logits.push(s.logits);
                gates.push(s.route.gate);
            }
            Ok(total_loss(g, &logits, &targets, &gates, 1.0)?.total)
        },
        &GradCheckOptions {
            max_coords_per_param: coords,
            seed,
            ..GradCheckOptions::default()
        },
    )
    .unwrap()
}

// ---------------------------------------------------------------- routing

fn scores_and_k() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1usize..=8).prop_flat_map(|n| (prop::collection::vec(-50.0f64..50.0, n), 1..=n))
}

pub fn sparsity_and_normalization(cases: u32) -> Outcome {
    runner(cases)
        .run(&scores_and_k(), |(s, k)| {
            let d = gate_from_scores(&s, k).map_err(|e| fail(e.to_string()))?;
            let positive = d.gate.iter().filter(|&&p| p > 0.0).count();
            prop_assert!(positive <= k, "{positive} positive gates for k={k}");
            prop_assert_eq!(d.selected.len(), k);
            let total: f64 = d.gate.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6, "gates sum to {total}");
            Ok(())
        })
        .map(|_| format!("{cases} cases"))
        .map_err(|e| e.to_string())
}

pub fn masking_is_exact(cases: u32) -> Outcome {
    let strat = scores_and_k().prop_flat_map(|(s, k)| {
        let n = s.len();
        (Just(s), Just(k), prop::collection::vec(0.0f64..100.0, n))
    });
    runner(cases)
        .run(&strat, |(s, k, drops)| {
            let d = gate_from_scores(&s, k).map_err(|e| fail(e.to_string()))?;
            let top = d.selected.iter().map(|&j| s[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = d.selected.iter().map(|&j| (s[j] - top).exp()).sum();
            for j in 0..s.len() {
                if d.selected.contains(&j) {
                    let want = (s[j] - top).exp() / z;
                    prop_assert!((d.gate[j] - want).abs() <= 1e-12, "gate {j}: {} vs {want}", d.gate[j]);
                } else {
                    prop_assert!(d.gate[j] == 0.0 && d.gate[j].is_sign_positive(), "unselected gate {j} = {}", d.gate[j]);
                }
            }
            // Lowering unselected scores cannot change the selection, and
            // since they are masked to -inf the gate must not move a bit.
            let mut lowered = s.clone();
            for j in 0..s.len() {
                if !d.selected.contains(&j) {
                    lowered[j] -= drops[j];
                }
            }
            let d2 = gate_from_scores(&lowered, k).map_err(|e| fail(e.to_string()))?;
            prop_assert_eq!(&d2.selected, &d.selected);
            let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&d2.gate), bits(&d.gate));
            Ok(())
        })
        .map(|_| format!("{cases} cases"))
        .map_err(|e| e.to_string())
}

pub fn ties_prefer_lower_index(cases: u32) -> Outcome {
    let strat = (1usize..=8).prop_flat_map(|n| (prop::collection::vec(-2i32..=2, n), 1..=n));
    runner(cases)
        .run(&strat, |(raw, k)| {
            let s: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| raw[b].cmp(&raw[a]).then(a.cmp(&b)));
            let mut want = order[..k].to_vec();
            want.sort_unstable();
            let got = router::top_k_indices(&s, k).map_err(|e| fail(e.to_string()))?;
            prop_assert_eq!(got, want);
            Ok(())
        })
        .map(|_| format!("{cases} cases"))
        .map_err(|e| e.to_string())
}

pub fn shift_invariance(cases: u32) -> Outcome {
    let strat = (1usize..=8).prop_flat_map(|n| (prop::collection::vec(-80i32..80, n), 1..=n, -100i32..100));
    runner(cases)
        .run(&strat, |(raw, k, c)| {
            // Eighths and integers are exact in binary, so the shift cannot
            // create or break ties.
            let s: Vec<f64> = raw.iter().map(|&v| f64::from(v) / 8.0).collect();
            let shifted: Vec<f64> = s.iter().map(|v| v + f64::from(c)).collect();
            let a = gate_from_scores(&s, k).map_err(|e| fail(e.to_string()))?;
            let b = gate_from_scores(&shifted, k).map_err(|e| fail(e.to_string()))?;
            prop_assert_eq!(&a.selected, &b.selected);
            for (x, y) in a.gate.iter().zip(&b.gate) {
                prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
            Ok(())
        })
        .map(|_| format!("{cases} cases"))
        .map_err(|e| e.to_string())
}

pub fn relabeling_equivariance(cases: u32) -> Outcome {
    let strat = (2usize..=8, 1usize..=6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * d),
            prop::collection::vec(-2.0f64..2.0, d),
            1..=n,
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            Just(d),
        )
    });
    runner(cases)
        .run(&strat, |(w, l, k, perm, d)| {
            let n = perm.len();
            let wt = Tensor::new([n, d], w.clone()).unwrap();
            let base = route(&l, &wt, k).map_err(|e| fail(e.to_string()))?;
            let mut sorted = base.scores.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assume!(sorted.windows(2).all(|p| p[1] - p[0] > 1e-9));
            let wp: Vec<f64> = perm.iter().flat_map(|&j| w[j * d..(j + 1) * d].iter().copied()).collect();
            let moved = route(&l, &Tensor::new([n, d], wp).unwrap(), k).map_err(|e| fail(e.to_string()))?;
            for i in 0..n {
                prop_assert!((moved.gate[i] - base.gate[perm[i]]).abs() <= 1e-12);
                prop_assert_eq!(moved.selected.contains(&i), base.selected.contains(&perm[i]));
            }
            Ok(())
        })
        .map(|_| format!("{cases} cases"))
        .map_err(|e| e.to_string())
}

/// Relabels the experts of a whole model: new expert `i` is old expert
/// `perm[i]`.
pub fn permute_experts(model: &Model, perm: &[usize]) -> Model {
    let d = model.config.latent_dim;
    let mut tensors = Vec::new();
    for (name, t) in model.store.iter() {
        let t = if name == "router.weight" {
            let w = t.data();
            let data = perm.iter().flat_map(|&j| w[j * d..(j + 1) * d].iter().copied()).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        } else {
            t.clone()
        };
        let name = match name.strip_prefix("expert").and_then(|r| r.split_once('.').or(Some((r, "")))) {
            Some((idx, rest)) if idx.parse::<usize>().is_ok() => {
                let old: usize = idx.parse().unwrap();
                let new = perm.iter().position(|&p| p == old).unwrap();
                if rest.is_empty() { format!("expert{new}") } else { format!("expert{new}.{rest}") }
            }
            _ => name.to_string(),
        };
        tensors.push((name, t));
    }
    model_from_tensors(model.config.clone(), tensors).unwrap()
}

pub fn model_relabeling_equivariance(cases: u32) -> Outcome {
    let data = corpus(71, 8, 16);
    let strat = (2usize..=5).prop_flat_map(|n| {
        (
            any::<u64>(),
            1..=n,
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            0..8usize,
        )
    });
    runner(cases)
        .run(&strat, |(seed, k, perm, idx)| {
            let n = perm.len();
            let model = Model::init(tiny_model(n, k), seed).unwrap();
            let moved = permute_experts(&model, &perm);
            let r = &data.records[idx];
            let a = model.predict(r, None, None).map_err(|e| fail(e.to_string()))?;
            let b = moved.predict(r, None, None).map_err(|e| fail(e.to_string()))?;
            let mut sorted = a.decision.scores.clone();
            sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assume!(sorted.windows(2).all(|p| p[1] - p[0] > 1e-5));
            for i in 0..n {
                prop_assert!((b.decision.gate[i] - a.decision.gate[perm[i]]).abs() <= 1e-6);
            }
            for (x, y) in a.mask.logits.iter().zip(&b.mask.logits) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
            }
            Ok(())
        })
        .map(|_| format!("{cases} cases"))
        .map_err(|e| e.to_string())
}

/// One optimizer step from a fresh model; every expert that no sample in
/// the batch selected must keep its parameters, router row and Adam
/// moments bit for bit. At least 100 cases must have an idle expert.
pub fn unselected_immutability(cases: u32) -> Outcome {
    let data = corpus(83, 16, 16);
    let nontrivial = Cell::new(0usize);
    let strat = (3usize..=6).prop_flat_map(|n| (any::<u64>(), Just(n), 1..n, 2usize..=3, any::<bool>(), 0..13usize));
    runner(cases)
        .run(&strat, |(seed, n, k, batch, exact, start)| {
            let mut model = tiny_model(n, k);
            if exact {
                model.gate_grad = SparseSoftmaxGrad::Exact;
            }
            let cfg = TrainConfig {
                seed,
                batch_size: batch,
                model,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(cfg).map_err(|e| fail(e.to_string()))?;
            let before = t.model.store.clone();
            let recs: Vec<&SceneRecord> = data.records[start..start + batch].iter().collect();
            t.train_step(&recs).map_err(|e| fail(e.to_string()))?;
            let counts = t.counter.counts();
            let idle: Vec<usize> = (0..n).filter(|&j| counts[j] == 0).collect();
            if !idle.is_empty() {
                nontrivial.set(nontrivial.get() + 1);
            }
            let d = t.config.model.latent_dim;
            for id in before.ids() {
                let name = before.name(id);
                let old = before.get(id).data();
                let new = t.model.store.get(id).data();
                let (m, v) = (t.adam.m[id.0].data(), t.adam.v[id.0].data());
                for &j in &idle {
                    let prefix = format!("expert{j}.");
                    let range = if name.starts_with(&prefix) {
                        0..old.len()
                    } else if name == "router.weight" {
                        j * d..(j + 1) * d
                    } else {
                        continue;
                    };
                    for i in range {
                        prop_assert!(old[i].to_bits() == new[i].to_bits(), "{name}[{i}] moved for idle expert {j}");
                        prop_assert!(m[i] == 0.0 && v[i] == 0.0, "{name}[{i}] has nonzero moments");
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    if nontrivial.get() < 100 {
        return Err(format!("only {} of {cases} cases had an idle expert", nontrivial.get()));
    }
    Ok(format!("{cases} cases, {} with idle experts", nontrivial.get()))
}

pub fn routing_suite(cases: u32) -> Vec<(&'static str, Outcome)> {
    vec![
        ("sparsity and normalization", sparsity_and_normalization(cases)),
        ("-inf masking exactness", masking_is_exact(cases)),
        ("lower-index tie-breaking", ties_prefer_lower_index(cases)),
        ("score-shift invariance", shift_invariance(cases)),
        ("router relabeling equivariance", relabeling_equivariance(cases)),
        ("model relabeling equivariance", model_relabeling_equivariance(cases)),
        ("unselected-expert immutability", unselected_immutability(cases.max(256))),
    ]
}

// ---------------------------------------------------------------- CV²

/// Population variance over squared mean, written out independently of the
/// library.
pub fn cv2_oracle(imp: &[f64]) -> f64 {
    let n = imp.len() as f64;
    let mean = imp.iter().sum::<f64>() / n;
    let var = imp.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var / (mean * mean + 1e-10)
}

pub fn cv2_suite(cases: u32) -> Vec<(&'static str, Outcome)> {
    let examples: [(&[f64], f64); 3] = [(&[2.0, 2.0, 2.0, 2.0], 0.0), (&[4.0, 0.0, 0.0, 0.0], 3.0), (&[3.0, 1.0], 0.25)];
    let mut fixed = Ok(String::from("3 vectors"));
    for (imp, want) in examples {
        let got = ops::cv_squared(imp);
        let graph = {
            let store = shapemoe_core::numerics::ParamStore::<f64>::new();
            let mut g = Graph::new(&store);
            let v = g.constant(Tensor::vector(imp.to_vec()));
            let c = g.cv_squared(v).unwrap();
            g.value(c).item()
        };
        if (got - want).abs() > 1e-6 || (graph - want).abs() > 1e-6 {
            fixed = Err(format!("{imp:?}: value {got}, graph {graph}, expected {want}"));
            break;
        }
    }

    let batch = {
        // Importance through the router's batch aggregation: four one-hot
        // samples on expert 0 give [4,0,0,0].
        let one_hot = |j: usize| router::RoutingDecision {
            scores: vec![0.0; 4],
            gate: (0..4).map(|i| f64::from(i == j)).collect(),
            selected: vec![j],
        };
        let collapsed = router::cv2_loss(&[one_hot(0), one_hot(0), one_hot(0), one_hot(0)]).unwrap();
        let spread = router::cv2_loss(&[one_hot(0), one_hot(1), one_hot(2), one_hot(3)]).unwrap();
        if (collapsed - 3.0).abs() <= 1e-6 && spread.abs() <= 1e-6 {
            Ok("batch importance".to_string())
        } else {
            Err(format!("collapsed batch {collapsed}, balanced batch {spread}"))
        }
    };

    let strat = (1usize..=8).prop_flat_map(|n| (prop::collection::vec(0u32..6, n), 0.1f64..10.0));
    let zero_iff_balanced = runner(cases)
        .run(&strat, |(raw, unit)| {
            let imp: Vec<f64> = raw.iter().map(|&v| f64::from(v) * unit).collect();
            let got = ops::cv_squared(&imp);
            let want = cv2_oracle(&imp);
            prop_assert!((got - want).abs() <= 1e-6 * (1.0 + want), "{imp:?}: {got} vs {want}");
            let balanced = raw.iter().all(|&v| v == raw[0]);
            prop_assert_eq!(got == 0.0, balanced, "{:?}: loss {}", imp, got);
            Ok(())
        })
        .map(|_| format!("{cases} cases"))
        .map_err(|e| e.to_string());

    vec![
        ("closed-form examples", fixed),
        ("batch aggregation", batch),
        ("oracle match and zero iff balanced", zero_iff_balanced),
    ]
}

// ---------------------------------------------------------------- metrics

pub fn brute_iou(a: &Mask, b: &Mask) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            inter += usize::from(p && q);
            union += usize::from(p || q);
        }
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

pub fn metric_suite(pairs: usize) -> Vec<(&'static str, Outcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut iou_result = Ok(format!("{pairs} random 8×8 pairs"));
    for i in 0..pairs {
        let density: f64 = rng.random_range(0.0..1.0);
        let mut a = Mask::empty(8, 8);
        let mut b = Mask::empty(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                a.set(y, x, rng.random_bool(density));
                b.set(y, x, rng.random_bool(density));
            }
        }
        if i == 0 {
            a = Mask::empty(8, 8);
            b = Mask::empty(8, 8);
        }
        let got = metrics::iou(&a, &b).unwrap();
        if got != brute_iou(&a, &b) {
            iou_result = Err(format!("pair {i}: {got:?} vs {:?}", brute_iou(&a, &b)));
            break;
        }
    }

    let exclusion = (|| -> Outcome {
        let data = generate_corpus(&GenConfig {
            seed: 9,
            count: 60,
            side: 16,
            unoccluded_prob: 0.4,
            ..GenConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let unoccluded = data.records.iter().filter(|r| r.amodal.and_not(&r.visible).is_empty_mask()).count();
        if unoccluded == 0 {
            return Err("corpus has no unoccluded samples".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<Mask> = data
            .records
            .iter()
            .map(|r| {
                let mut m = r.amodal.clone();
                for _ in 0..12 {
                    let (y, x) = (rng.random_range(0..16), rng.random_range(0..16));
                    m.set(y, x, !m.get(y, x));
                }
                m
            })
            .collect();
        let outcomes: Vec<SampleOutcome<'_>> = data
            .records
            .iter()
            .zip(&preds)
            .map(|(r, p)| SampleOutcome {
                family: r.family,
                predicted: p.clone(),
                visible: &r.visible,
                amodal: &r.amodal,
                gate: vec![1.0],
                primary: 0,
            })
            .collect();
        let report = metrics::summarize(&outcomes, 1).map_err(|e| e.to_string())?;
        let mut occ = Vec::new();
        let mut full = Vec::new();
        for (r, p) in data.records.iter().zip(&preds) {
            full.push(brute_iou(p, &r.amodal).unwrap());
            let gt = r.amodal.and_not(&r.visible);
            if gt.count() > 0 {
                occ.push(brute_iou(&p.and_not(&r.visible), &gt).unwrap());
            }
        }
        let want_occ = occ.iter().sum::<f64>() / occ.len() as f64;
        let want_full = full.iter().sum::<f64>() / full.len() as f64;
        if report.n_occluded_samples != data.len() - unoccluded {
            return Err(format!("{} occluded samples counted, expected {}", report.n_occluded_samples, data.len() - unoccluded));
        }
        if (report.miou_occ.unwrap() - want_occ).abs() > 1e-12 || (report.miou_full - want_full).abs() > 1e-12 {
            return Err(format!("mIoU mismatch: {:?} vs occ {want_occ} full {want_full}", report));
        }
        let only_unoccluded: Vec<SampleOutcome<'_>> = outcomes
            .iter()
            .zip(&data.records)
            .filter(|(_, r)| r.amodal.and_not(&r.visible).is_empty_mask())
            .map(|(o, _)| o.clone())
            .collect();
        let none = metrics::summarize(&only_unoccluded, 1).map_err(|e| e.to_string())?;
        if none.miou_occ.is_some() || none.n_occluded_samples != 0 {
            return Err("unoccluded-only corpus produced an occluded score".into());
        }
        Ok(format!("{unoccluded} of {} samples excluded", data.len()))
    })();

    vec![("iou vs pixel enumeration", iou_result), ("mIoU_occ exclusion rule", exclusion)]
}

pub fn print_outcomes(label: &str, outcomes: &[(&str, Outcome)]) -> bool {
    let mut ok = true;
    for (name, o) in outcomes {
        match o {
            Ok(s) => println!("  {label} / {name}: ok ({s})"),
            Err(e) => {
                ok = false;
                println!("  {label} / {name}: FAILED {e}");
            }
        }
    }
    ok
}

// ---------------------------------------------------------------- training

pub struct OverfitRun {
    /// First epoch whose mean training loss fell below 0.05.
    pub below_threshold_at: Option<u32>,
    pub final_loss: f64,
    pub report: metrics::EvalReport,
    pub distinct_codes: usize,
}

/// Trains on a 32-sample subset for 200 epochs, then evaluates on the same
/// samples.
pub fn overfit_run() -> OverfitRun {
    let data = corpus(31, 32, 64);
    let empty = Dataset::new(64, 64, vec![]).unwrap();
    let cfg = TrainConfig {
        seed: 4,
        balance_weight: 0.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg).unwrap();
    let mut last = f64::INFINITY;
    let mut below_threshold_at = None;
    for epoch in 1..=200 {
        last = t.run_epoch(&data, &empty).unwrap().train_loss;
        if last < 0.05 && below_threshold_at.is_none() {
            below_threshold_at = Some(epoch);
        }
    }
    let report = metrics::evaluate(&t.model, &data, metrics::RoutingMode::Mean).unwrap();
    let probe = corpus(32, 100, 64);
    let mut codes: Vec<Vec<u32>> = probe
        .records
        .iter()
        .map(|r| {
            let p = t.model.predict(r, None, None).unwrap();
            p.distribution.mu.iter().chain(&p.distribution.sigma_raw).map(|v| v.to_bits()).collect()
        })
        .collect();
    codes.sort();
    codes.dedup();
    OverfitRun {
        below_threshold_at,
        final_loss: last,
        report,
        distinct_codes: codes.len(),
    }
}
