//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Oracles here are written independently of the library: joint matrices,
//! entropies, finite differences, dense linear solves and per-row FixMatch
//! sums are recomputed from scratch.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use muscle::data::{compose_batch, split_labeled, unlabeled_count, Dataset, SplitPlan};
use muscle::labelprop::{assign_pseudo_labels, diffuse, AffinityGraph, SolverConfig};
use muscle::losses::{self, nodes, FixMatchConfig, LikelihoodBatch};
use muscle::model::{init_params, ClassifierConfig, EmaTeacher};
use muscle::numcore::{Graph, NodeId, Tensor};
use muscle::train::{self, ExperimentConfig, Method};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TREND_CONFIG: &str = include_str!("../../../configs/trend.toml");
const SEQUESTER_CONFIG: &str = include_str!("../../../configs/sequester.toml");

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

// ---------- shared oracles ----------

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, classes: usize, scale: f64) -> LikelihoodBatch {
    let logits: Vec<f64> = (0..rows * classes)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    LikelihoodBatch::new(rows, classes, softmax_rows(&logits, classes)).unwrap()
}

fn one_hot_batch(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> LikelihoodBatch {
    let mut v = vec![0.0; rows * classes];
    for i in 0..rows {
        v[i * classes + rng.random_range(0..classes)] = 1.0;
    }
    LikelihoodBatch::new(rows, classes, v).unwrap()
}

/// Symmetrised joint matrix, summed directly over outer products.
fn oracle_joint(a: &LikelihoodBatch, b: &LikelihoodBatch) -> Vec<f64> {
    let (n, c) = (a.rows(), a.classes());
    let mut p = vec![0.0; c * c];
    for i in 0..n {
        for x in 0..c {
            for y in 0..c {
                p[x * c + y] += (a.row(i)[x] * b.row(i)[y] + b.row(i)[x] * a.row(i)[y]) / (2.0 * n as f64);
            }
        }
    }
    p
}

/// `H(z) - H(z|z')` from the joint matrix.
fn oracle_decomposition(p: &[f64], c: usize) -> f64 {
    let marg: Vec<f64> = (0..c).map(|x| (0..c).map(|y| p[x * c + y]).sum()).collect();
    let h = -marg.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let mut h_cond = 0.0;
    for x in 0..c {
        for y in 0..c {
            let v = p[x * c + y];
            if v > 0.0 {
                h_cond -= v * (v / marg[y]).ln();
            }
        }
    }
    h - h_cond
}

fn library_mi(a: &LikelihoodBatch, b: &LikelihoodBatch) -> f64 {
    losses::mutual_information(&losses::joint_matrix(a, b).unwrap())
}

// ---------- criteria ----------

fn mi_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_decomp = 0.0f64;
    let mut worst_sym = 0.0f64;
    for case in 0..1000 {
        let rows = rng.random_range(1..=24);
        let classes = rng.random_range(2..=8);
        let scale = [0.1, 1.0, 4.0, 30.0][case % 4];
        let a = if case % 10 == 9 { one_hot_batch(&mut rng, rows, classes) } else { random_batch(&mut rng, rows, classes, scale) };
        let b = if case % 7 == 6 { a.clone() } else { random_batch(&mut rng, rows, classes, scale) };
        let i_ab = library_mi(&a, &b);
        let i_ba = library_mi(&b, &a);
        let ln_c = (classes as f64).ln();
        ensure((0.0..=ln_c + 1e-9).contains(&i_ab), || format!("case {case}: I = {i_ab} outside [0, ln {classes}]"))?;
        let decomp = oracle_decomposition(&oracle_joint(&a, &b), classes);
        worst_decomp = worst_decomp.max((i_ab - decomp).abs());
        worst_sym = worst_sym.max((i_ab - i_ba).abs());
    }
    ensure(worst_decomp <= 1e-9, || format!("decomposition off by {worst_decomp:e}"))?;
    ensure(worst_sym <= 1e-12, || format!("argument order changes I by {worst_sym:e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!(
        "1000 pairs; max |I - (H(z) - H(z|z'))| = {worst_decomp:.1e}, max asymmetry = {worst_sym:.1e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn analytic_anchors() -> Outcome {
    let mut worst_top = 0.0f64;
    let mut worst_zero = 0.0f64;
    for classes in 2..=10 {
        for reps in [1, 3] {
            let rows: Vec<Vec<f64>> = (0..classes * reps)
                .map(|i| (0..classes).map(|c| f64::from(u8::from(c == i % classes))).collect())
                .collect();
            let z = LikelihoodBatch::from_rows(&rows).unwrap();
            worst_top = worst_top.max((library_mi(&z, &z) - (classes as f64).ln()).abs());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(classes as u64);
        let row = random_batch(&mut rng, 1, classes, 2.0).row(0).to_vec();
        let constant = LikelihoodBatch::repeated(&row, 17).unwrap();
        worst_zero = worst_zero.max(library_mi(&constant, &constant).abs());
    }
    ensure(worst_top <= 1e-9, || format!("balanced one-hot: |I - ln C| = {worst_top:e}"))?;
    ensure(worst_zero <= 1e-9, || format!("constant prediction: |I| = {worst_zero:e}"))?;
    Ok(format!("C = 2..10; |I - ln C| <= {worst_top:.1e}, constant |I| <= {worst_zero:.1e}"))
}

/// Relative error between the analytic gradient of `build` and central
/// differences, over every entry of every input.
fn gradient_error(inputs: &[(&str, Tensor)], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    const H: f64 = 1e-5;
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|(n, _)| g.input(n)).collect();
    let out = build(&mut g, &ids);
    g.set_output(out);
    let mut bindings: HashMap<String, Tensor> = inputs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let names: Vec<&str> = inputs.iter().map(|(n, _)| *n).collect();
    let grads = g.gradients(&bindings, &names).unwrap();
    let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
    for (name, t) in inputs {
        let analytic = grads[*name].values();
        for k in 0..t.len() {
            let mut eval_at = |delta: f64| {
                let mut v = t.values().to_vec();
                v[k] += delta;
                bindings.insert(name.to_string(), Tensor::new(t.shape().to_vec(), v).unwrap());
                g.evaluate(&bindings).unwrap().item().unwrap()
            };
            let numeric = (eval_at(H) - eval_at(-H)) / (2.0 * H);
            bindings.insert(name.to_string(), t.clone());
            diff += (analytic[k] - numeric).powi(2);
            an += analytic[k].powi(2);
            nu += numeric.powi(2);
        }
    }
    let scale = an.sqrt().max(nu.sqrt());
    if scale < 1e-10 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

fn logits(rng: &mut ChaCha8Rng, rows: usize, classes: usize, scale: f64) -> Tensor {
    let v = (0..rows * classes).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, classes, v).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut report = Vec::new();
    type Case = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;
    let cases: Vec<(&str, Case)> = vec![
        (
            "mutual information",
            Box::new(|rng| {
                let (n, c) = (rng.random_range(2..=6), rng.random_range(2..=5));
                let mask: Option<Vec<bool>> = rng.random_bool(0.5).then(|| (0..n).map(|i| i == 0 || rng.random_bool(0.6)).collect());
                gradient_error(&[("a", logits(rng, n, c, 1.5)), ("b", logits(rng, n, c, 1.5))], &|g, x| {
                    let (pa, pb) = (g.softmax(x[0]), g.softmax(x[1]));
                    nodes::mi_between(g, pa, pb, n, c, mask.as_deref()).unwrap()
                })
            }),
        ),
        (
            "supervised cross-entropy",
            Box::new(|rng| {
                let (n, c) = (rng.random_range(2..=6), rng.random_range(2..=5));
                let mut labelled = Vec::new();
                for r in 0..n {
                    if rng.random_bool(0.7) {
                        labelled.push((r, rng.random_range(0..c)));
                    }
                }
                gradient_error(&[("z", logits(rng, n, c, 1.5))], &|g, x| {
                    let p = g.softmax(x[0]);
                    nodes::supervised_ce(g, p, n, c, &labelled).unwrap()
                })
            }),
        ),
        (
            "weighted pseudo-label cross-entropy",
            Box::new(|rng| {
                let (n, c) = (rng.random_range(2..=6), rng.random_range(2..=5));
                let pseudo: Vec<(usize, usize, f64)> = (0..n).map(|r| (r, rng.random_range(0..c), rng.random::<f64>())).collect();
                gradient_error(&[("z", logits(rng, n, c, 1.5))], &|g, x| {
                    let p = g.softmax(x[0]);
                    nodes::weighted_pseudo_ce(g, p, n, c, &pseudo).unwrap()
                })
            }),
        ),
        (
            "fixmatch",
            Box::new(|rng| {
                let (n, c) = (rng.random_range(2..=6), rng.random_range(2..=5));
                let weak = random_batch(rng, n, c, 6.0);
                let cfg = FixMatchConfig::new(0.8).unwrap();
                gradient_error(&[("s", logits(rng, n, c, 1.5))], &|g, x| {
                    let p = g.softmax(x[0]);
                    nodes::fixmatch(g, &weak, p, &cfg).unwrap()
                })
            }),
        ),
        (
            "consistency mse",
            Box::new(|rng| {
                let (n, c) = (rng.random_range(2..=6), rng.random_range(2..=5));
                gradient_error(&[("t", logits(rng, n, c, 1.5)), ("s", logits(rng, n, c, 1.5))], &|g, x| {
                    let (t, s) = (g.softmax(x[0]), g.softmax(x[1]));
                    nodes::consistency_mse(g, t, s, n)
                })
            }),
        ),
        (
            "consistency l2",
            Box::new(|rng| {
                let (n, c) = (rng.random_range(2..=6), rng.random_range(2..=5));
                gradient_error(&[("t", logits(rng, n, c, 1.5)), ("s", logits(rng, n, c, 1.5))], &|g, x| {
                    let (t, s) = (g.softmax(x[0]), g.softmax(x[1]));
                    nodes::consistency_l2(g, t, s)
                })
            }),
        ),
        (
            "total loss",
            Box::new(|rng| {
                let (n, c) = (rng.random_range(2..=6), rng.random_range(2..=5));
                let (alpha, beta) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
                let labelled: Vec<(usize, usize)> = (0..n).map(|r| (r, rng.random_range(0..c))).collect();
                gradient_error(
                    &[("a", logits(rng, n, c, 1.5)), ("b", logits(rng, n, c, 1.5)), ("t", logits(rng, n, c, 1.5))],
                    &|g, x| {
                        let (pa, pb, pt) = (g.softmax(x[0]), g.softmax(x[1]), g.softmax(x[2]));
                        let ls = nodes::supervised_ce(g, pa, n, c, &labelled).unwrap();
                        let lu = nodes::mi_between(g, pa, pb, n, c, None).unwrap();
                        let lc = nodes::consistency_mse(g, pt, pa, n);
                        nodes::linear_combination(g, &[(ls, 1.0), (lu, -alpha), (lc, beta)])
                    },
                )
            }),
        ),
    ];
    let mut failures = Vec::new();
    for (i, (name, case)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + i as u64);
        let worst = (0..100).map(|_| case(&mut rng)).fold(0.0f64, f64::max);
        report.push(format!("{name} {worst:.1e}"));
        if worst >= 1e-4 {
            failures.push(format!("{name}: relative error {worst:e}"));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    within(start.elapsed(), 60)?;
    Ok(format!("100 instances per loss; worst relative error: {}; {:.2}s", report.join(", "), start.elapsed().as_secs_f64()))
}

fn ema_contract() -> Outcome {
    let cfg = ClassifierConfig::mlp(5, 3);
    let student = init_params(&cfg, 1).unwrap();
    let teacher0 = init_params(&cfg, 2).unwrap();
    let mut t = EmaTeacher::new(teacher0.clone(), 0.0).unwrap();
    t.update(&student).unwrap();
    ensure(t.params().values() == student.values(), || "mu = 0 must copy the student".into())?;
    let mut t = EmaTeacher::new(teacher0.clone(), 1.0).unwrap();
    t.update(&student).unwrap();
    ensure(t.params().values() == teacher0.values(), || "mu = 1 must freeze the teacher".into())?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for mu in [0.9, 0.99, 0.999] {
        let mut t = EmaTeacher::new(teacher0.clone(), mu).unwrap();
        let mut d = dist(t.params().values(), student.values());
        for step in 0..50 {
            t.update(&student).unwrap();
            let next = dist(t.params().values(), student.values());
            let err = (next / d - mu).abs();
            ensure(err <= 1e-10, || format!("mu = {mu}, step {step}: ratio off by {err:e}"))?;
            worst = worst.max(err);
            d = next;
        }
    }
    Ok(format!("boundaries exact; 50-step contraction ratio within {worst:.1e} of mu"))
}

fn fixmatch_gate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut gated_rows = 0;
    let mut boundary_rows = 0;
    for case in 0..100 {
        let n = rng.random_range(2..=12);
        let c = rng.random_range(2..=5);
        let tau = [0.5, 0.8, 0.95][case % 3];
        let mut weak_rows: Vec<Vec<f64>> = (0..n).map(|_| random_batch(&mut rng, 1, c, 5.0).row(0).to_vec()).collect();
        // A row sitting exactly on the threshold must stay closed.
        let k = rng.random_range(0..n);
        let mut row = vec![(1.0 - tau) / (c - 1) as f64; c];
        row[rng.random_range(0..c)] = tau;
        weak_rows[k] = row;
        let weak = LikelihoodBatch::from_rows(&weak_rows).unwrap();
        let strong = random_batch(&mut rng, n, c, 1.0);
        let cfg = FixMatchConfig::new(tau).unwrap();

        // Per-row oracle.
        let mut expected = 0.0;
        let mut open = vec![false; n];
        for i in 0..n {
            let (arg, max) = weak.row(i).iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            if max > tau {
                open[i] = true;
                expected -= strong.row(i)[arg].ln() / n as f64;
            }
        }
        boundary_rows += usize::from(!open[k]);
        gated_rows += open.iter().filter(|o| !**o).count();

        let mut g = Graph::new();
        let s = g.input("s");
        let out = nodes::fixmatch(&mut g, &weak, s, &cfg).unwrap();
        g.set_output(out);
        let mut b = HashMap::new();
        b.insert("s".to_string(), strong.to_tensor());
        let (value, grads) = g.value_and_gradients(&b, &["s"]).unwrap();
        ensure((value - expected).abs() <= 1e-12, || format!("case {case}: loss {value} vs oracle {expected}"))?;
        let grad = grads["s"].values();
        for i in (0..n).filter(|&i| !open[i]) {
            ensure(grad[i * c..(i + 1) * c].iter().all(|&v| v == 0.0), || format!("case {case}: gated row {i} has gradient"))?;
        }
        // Changing a gated row's strong prediction leaves the loss bit-identical.
        if let Some(i) = (0..n).find(|&i| !open[i]) {
            let mut v = strong.values().to_vec();
            v[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = 1.0 / c as f64);
            b.insert("s".to_string(), Tensor::matrix(n, c, v).unwrap());
            let moved = g.evaluate(&b).unwrap().item().unwrap();
            ensure(moved.to_bits() == value.to_bits(), || format!("case {case}: gated row {i} changed the loss"))?;
        }
        let lib = losses::fixmatch_loss(&weak, &strong, &cfg).unwrap();
        ensure((lib - expected).abs() <= 1e-12, || format!("case {case}: value path {lib} vs oracle {expected}"))?;
    }
    ensure(boundary_rows == 100, || "a row at exactly the threshold passed the gate".into())?;
    Ok(format!("100 batches, {gated_rows} gated rows (100 exactly at tau): zero value and zero gradient"))
}

fn batch_composer() -> Outcome {
    let n = 600;
    let features: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let ds = Dataset::new(features, 2, labels, 4).unwrap();
    let plan = split_labeled(&ds, 16, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for r in [0.0, 0.5, 1.0, 2.0, 3.0, 4.0] {
        let expect = (r * 16.0f64).round() as usize;
        ensure(unlabeled_count(r, 16) == expect, || format!("r = {r}: I = {} not {expect}", unlabeled_count(r, 16)))?;
        for draw in 0..1000 {
            let b = compose_batch(&ds, &plan, r, 16, &mut rng).unwrap();
            ensure(
                b.unlabeled_count == expect && b.labeled_count == 16 && b.indices.len() == expect + 16,
                || format!("r = {r}, draw {draw}: {} + {}", b.unlabeled_count, b.labeled_count),
            )?;
            ensure(b.indices[..expect].iter().all(|&i| !plan.is_labeled(i)), || format!("r = {r}: labelled row in the unlabelled part"))?;
            ensure(b.indices[expect..].iter().all(|&i| plan.is_labeled(i)), || format!("r = {r}: unlabelled row in the labelled part"))?;
        }
    }
    let b = compose_batch(&ds, &plan, 1.0, 64, &mut rng).unwrap();
    ensure(b.indices.len() == 128 && b.labeled_count == 64, || format!("r = 1, J = 64 gave {} / {}", b.indices.len(), b.labeled_count))?;
    Ok("r in {0, 0.5, 1, 2, 3, 4}, J = 16: I = round(rJ) in 6000 draws; r = 1, J = 64 gives 128 rows with 64 labelled".into())
}

/// Dense Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs())).unwrap();
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
        }
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    x
}

fn label_propagation() -> Outcome {
    let start = Instant::now();
    // Two disconnected rings, one labelled node each.
    let half = 40;
    let mut trip = Vec::new();
    for comp in 0..2 {
        let base = comp * half;
        for i in 0..half {
            trip.push((base + i, base + (i + 1) % half, 0.5 + (i % 3) as f64 * 0.25));
            trip.push((base + i, base + (i + 7) % half, 0.2));
        }
    }
    let graph = AffinityGraph::from_triplets(2 * half, &trip, 0.99).unwrap();
    let truth: Vec<usize> = (0..2 * half).map(|i| i / half).collect();
    let mut seeds = vec![None; 2 * half];
    seeds[3] = Some(0);
    seeds[half + 11] = Some(1);
    let z = diffuse(&graph, &seeds, 2, &SolverConfig::default()).unwrap();
    let plan = SplitPlan {
        labeled: vec![3, half + 11],
        unlabeled: (0..2 * half).filter(|&i| i != 3 && i != half + 11).collect(),
        seed: 0,
    };
    let pseudo = assign_pseudo_labels(&z, &plan, &truth, None).unwrap();
    let acc = pseudo.accuracy(&truth);
    ensure(acc == 1.0, || format!("two-component accuracy {acc}"))?;
    ensure(
        (0..2 * half).all(|i| pseudo.mask[i] && pseudo.weights[i] > 0.0 && pseudo.classes[i] == truth[i]),
        || "some node was left without its component's label".into(),
    )?;

    // Random sparse graphs against a dense direct solve.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for &n in &[5usize, 30, 90, 200] {
        for _ in 0..3 {
            let mut trip = Vec::new();
            for i in 0..n {
                for _ in 0..4 {
                    let j = rng.random_range(0..n);
                    if j != i {
                        trip.push((i, j, rng.random_range(0.05..1.0)));
                    }
                }
            }
            let kappa = rng.random_range(0.5..0.99);
            let graph = AffinityGraph::from_triplets(n, &trip, kappa).unwrap();
            let classes = 3;
            let seeds: Vec<Option<usize>> = (0..n).map(|i| (i % 5 == 0).then_some(i % classes)).collect();
            let z = diffuse(&graph, &seeds, classes, &SolverConfig::default()).unwrap();
            let w = graph.to_dense();
            let d: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w[i * n + j]).sum()).collect();
            let inv = |v: f64| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 };
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = f64::from(u8::from(i == j)) - kappa * inv(d[i]) * w[i * n + j] * inv(d[j]);
                }
            }
            for c in 0..classes {
                let y: Vec<f64> = seeds.iter().map(|s| f64::from(u8::from(*s == Some(c)))).collect();
                let x = dense_solve(a.clone(), y, n);
                for i in 0..n {
                    worst = worst.max((z.row(i)[c] - x[i].max(0.0)).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-5, || format!("iterative vs dense differ by {worst:e}"))?;
    within(start.elapsed(), 30)?;
    Ok(format!(
        "two components: 100% pseudo-label accuracy; N <= 200: max |Z_cg - Z_dense| = {worst:.1e}; {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn trend_config(method: Method, labels_per_class: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(
        TREND_CONFIG,
        &[format!("method={}", method.name()), format!("data.labels_per_class={labels_per_class}")],
    )
    .unwrap()
}

fn mean_top1(runs: &[train::RunOutput]) -> f64 {
    runs.iter().map(|r| r.last().student.top1).sum::<f64>() / runs.len() as f64
}

/// Shared by the trend and no-collapse criteria.
struct TrendRuns {
    gap_scarce: f64,
    gap_rich: f64,
    detail: String,
    marginal_entropies: Vec<f64>,
    classes: usize,
    slowest: Duration,
}

fn trend_runs() -> Result<TrendRuns, String> {
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    let mut marginal = Vec::new();
    let mut slowest = Duration::ZERO;
    for labels in [2, 50] {
        let mut means = Vec::new();
        for method in [Method::Supervised, Method::MuscleMt] {
            let start = Instant::now();
            let runs = train::run_seeds(&trend_config(method, labels), None).map_err(|e| e.to_string())?;
            slowest = slowest.max(start.elapsed());
            means.push(mean_top1(&runs));
            if method == Method::MuscleMt {
                marginal.extend(runs.iter().map(|r| r.last().student.marginal_entropy));
            }
        }
        gaps.push(means[1] - means[0]);
        detail.push(format!(
            "{labels}/class: supervised {:.2}%, muscle-mt {:.2}%",
            100.0 * means[0],
            100.0 * means[1]
        ));
    }
    let classes = trend_config(Method::Supervised, 2).data.synthetic.unwrap().class_count();
    Ok(TrendRuns {
        gap_scarce: gaps[0],
        gap_rich: gaps[1],
        detail: detail.join("; "),
        marginal_entropies: marginal,
        classes,
        slowest,
    })
}

fn end_to_end_trend(runs: &Result<TrendRuns, String>) -> Outcome {
    let t = runs.as_ref().map_err(Clone::clone)?;
    let msg = format!(
        "{}; gaps {:+.2} pp and {:+.2} pp; slowest method {:.1}s",
        t.detail,
        100.0 * t.gap_scarce,
        100.0 * t.gap_rich,
        t.slowest.as_secs_f64()
    );
    ensure(t.gap_scarce >= 0.10, || format!("2/class gap below 10 pp: {msg}"))?;
    ensure(t.gap_rich >= 0.0, || format!("50/class gap negative: {msg}"))?;
    ensure(t.gap_rich < t.gap_scarce, || format!("gap does not shrink: {msg}"))?;
    within(t.slowest, 300)?;
    Ok(msg)
}

fn no_collapse(runs: &Result<TrendRuns, String>) -> Outcome {
    let t = runs.as_ref().map_err(Clone::clone)?;
    let bound = 0.9 * (t.classes as f64).ln();
    let min = t.marginal_entropies.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(min >= bound, || format!("marginal entropy {min:.4} below 0.9 ln C = {bound:.4}"))?;
    Ok(format!("min H(z) over {} muscle-mt runs = {min:.4} >= {bound:.4}", t.marginal_entropies.len()))
}

fn sequestered_classes() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml_str(SEQUESTER_CONFIG, &[]).unwrap();
    let rows = train::sequester(&cfg, None).map_err(|e| e.to_string())?;
    let spread = |m: Method| {
        let e: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.entropy_mean).collect();
        e.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - e.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let (sup, mus) = (spread(Method::Supervised), spread(cfg.method));
    ensure(mus < sup, || format!("{} spread {mus:.4} not below supervised {sup:.4}", cfg.method.name()))?;
    within(start.elapsed(), 300)?;
    Ok(format!(
        "entropy spread across class types: supervised {sup:.4}, {} {mus:.4}; {:.1}s",
        cfg.method.name(),
        start.elapsed().as_secs_f64()
    ))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut checked = 0;
    for method in [Method::MuscleMtLp, Method::MuscleFixMatch] {
        let cfg = ExperimentConfig::from_toml_str(
            TREND_CONFIG,
            &[
                format!("method={}", method.name()),
                "seeds=[3]".into(),
                "optim.epochs=6".into(),
                "model.use_dropout=true".into(),
            ],
        )
        .unwrap();
        for d in &dirs {
            train::run_seeds(&cfg, Some(&d.path().join(method.name()))).map_err(|e| e.to_string())?;
        }
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(method.name()).join("seed-3/metrics.csv")).unwrap();
        ensure(read(&dirs[0]) == read(&dirs[1]), || format!("{}: metrics differ between runs", method.name()))?;
        checked += 1;
    }
    Ok(format!("{checked} configs run twice: metrics.csv byte-identical"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut line = |n: usize, name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS criterion {n:>2} ({name}): {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL criterion {n:>2} ({name}): {detail}");
        }
    };
    line(1, "MI correctness", mi_correctness());
    line(2, "analytic anchors", analytic_anchors());
    line(3, "gradient suite", gradient_suite());
    line(4, "EMA contract", ema_contract());
    line(5, "FixMatch gate", fixmatch_gate());
    line(6, "batch composer", batch_composer());
    line(7, "label propagation", label_propagation());
    let trend = trend_runs();
    line(8, "end-to-end trend", end_to_end_trend(&trend));
    line(9, "no collapse", no_collapse(&trend));
    line(10, "sequestered classes", sequestered_classes());
    line(11, "determinism", determinism());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
