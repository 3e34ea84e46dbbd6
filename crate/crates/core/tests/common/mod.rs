//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use heightfuse::metrics::{InstanceRecord, Rle};
use heightfuse::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from the ReLU kink.
pub fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.05 apart in random order, so max-pool windows
/// have a clear winner under ±1e-4 perturbations.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Builds a scalar from the leaves; `leaves[i]` are placed on the graph in
/// order and passed to `f`.
pub type ScalarFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn eval(f: &ScalarFn, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Largest relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the analytic
/// gradient and central differences with step `eps`, over the first
/// `n_diff` inputs. The remaining inputs are constants.
pub fn grad_check(f: &ScalarFn, inputs: &[Tensor], n_diff: usize, eps: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i < n_diff {
                g.leaf(t.clone().with_requires_grad(true))
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate().take(n_diff) {
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            numeric[j] = (eval(f, &plus) - eval(f, &minus)) / (2.0 * eps);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        worst = worst.max(rel);
    }
    worst
}

/// `sum(out ⊙ w)` for a fixed random weighting `w`, which exercises every
/// entry of the Jacobian.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed ^ 0xA5A5);
    let w = g.constant(uniform(&shape, -1.0, 1.0, &mut r));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

pub struct GradCase {
    pub op: &'static str,
    pub worst: f64,
}

/// Runs the finite-difference suite for every differentiable op, `seeds`
/// random inputs each.
pub fn gradient_suite(seeds: u64, eps: f64) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut run = |op: &'static str, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: &ScalarFn| {
        let mut worst: f64 = 0.0;
        for s in 0..seeds {
            let mut r = rng(1000 + s);
            let inputs = make(&mut r);
            // a loss target is data, not a parameter
            let n_diff = if op == "smooth_l1_loss" { 1 } else { inputs.len() };
            worst = worst.max(grad_check(f, &inputs, n_diff, eps));
        }
        cases.push(GradCase { op, worst });
    };
    run(
        "conv2d",
        &|r| {
            vec![
                uniform(&[2, 2, 5, 5], -1.0, 1.0, r),
                uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
                uniform(&[3], -1.0, 1.0, r),
            ]
        },
        &|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
            weighted_sum(g, y, 1)
        },
    );
    run(
        "conv2d_strided",
        &|r| vec![uniform(&[1, 3, 6, 6], -1.0, 1.0, r), uniform(&[2, 3, 3, 3], -1.0, 1.0, r)],
        &|g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1).unwrap();
            weighted_sum(g, y, 2)
        },
    );
    run(
        "relu",
        &|r| vec![off_zero(&[2, 3, 4, 4], r)],
        &|g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 3)
        },
    );
    run(
        "max_pool2d",
        &|r| vec![distinct(&[1, 2, 6, 6], r)],
        &|g, v| {
            let y = g.max_pool2d(v[0], 2, 2).unwrap();
            weighted_sum(g, y, 4)
        },
    );
    run(
        "adaptive_avg_pool2d",
        &|r| vec![uniform(&[1, 2, 7, 5], -1.0, 1.0, r)],
        &|g, v| {
            let y = g.adaptive_avg_pool2d(v[0], 3, 2).unwrap();
            weighted_sum(g, y, 5)
        },
    );
    run(
        "bilinear_upsample",
        &|r| vec![uniform(&[1, 2, 3, 4], -1.0, 1.0, r)],
        &|g, v| {
            let y = g.bilinear_upsample(v[0], 7, 9).unwrap();
            weighted_sum(g, y, 6)
        },
    );
    run(
        "concat",
        &|r| vec![uniform(&[1, 2, 3, 3], -1.0, 1.0, r), uniform(&[1, 1, 3, 3], -1.0, 1.0, r)],
        &|g, v| {
            let y = g.concat(&[v[0], v[1]], 1).unwrap();
            weighted_sum(g, y, 7)
        },
    );
    run(
        "narrow",
        &|r| vec![uniform(&[2, 4, 3, 3], -1.0, 1.0, r)],
        &|g, v| {
            let y = g.narrow(v[0], 1, 1, 2).unwrap();
            weighted_sum(g, y, 8)
        },
    );
    run(
        "add",
        &|r| vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)],
        &|g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, y, 9)
        },
    );
    run(
        "mul",
        &|r| vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)],
        &|g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            weighted_sum(g, y, 10)
        },
    );
    run(
        "scale",
        &|r| vec![uniform(&[4], -1.0, 1.0, r)],
        &|g, v| {
            let y = g.scale(v[0], -2.5);
            weighted_sum(g, y, 11)
        },
    );
    run(
        "sum",
        &|r| vec![uniform(&[3, 2], -1.0, 1.0, r)],
        &|g, v| g.sum(v[0]),
    );
    run(
        "smooth_l1_loss",
        &|r| {
            // differences land in (0, 0.8) or (1.2, 2) in magnitude, clear of beta = 1
            let target = uniform(&[1, 1, 4, 4], -3.0, 3.0, r);
            let pred = Tensor::from_fn([1, 1, 4, 4], |i| {
                let d = if r.gen_bool(0.5) { r.gen_range(0.05..0.8) } else { r.gen_range(1.2..2.0) };
                target.data()[i] + if r.gen_bool(0.5) { d } else { -d }
            });
            vec![pred, target]
        },
        &|g, v| g.smooth_l1_loss(v[0], v[1], 1.0).unwrap(),
    );
    cases
}

// ---- height metric oracles -------------------------------------------------

pub fn naive_delta1(pred: &[f64], gt: &[f64]) -> f64 {
    let mut hits = 0;
    for i in 0..pred.len() {
        let mut p = pred[i];
        if p < 0.0 {
            p = 0.0;
        }
        if p < 1.0 {
            p = 1.0;
        }
        let y = if gt[i] < 1.0 { 1.0 } else { gt[i] };
        let r = if y / p > p / y { y / p } else { p / y };
        if r < 1.25 {
            hits += 1;
        }
    }
    hits as f64 / pred.len() as f64
}

pub fn naive_rmse(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i]).powi(2);
    }
    (s / pred.len() as f64).sqrt()
}

pub fn naive_mae(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i]).abs();
    }
    s / pred.len() as f64
}

/// Two-pass R²: `1 − Σ(y−ŷ)² / Σ(y−ȳ)²`.
pub fn naive_r2(pred: &[f64], gt: &[f64]) -> f64 {
    let mut mean = 0.0;
    for y in gt {
        mean += y;
    }
    mean /= gt.len() as f64;
    let (mut res, mut tot) = (0.0, 0.0);
    for i in 0..gt.len() {
        res += (gt[i] - pred[i]).powi(2);
        tot += (gt[i] - mean).powi(2);
    }
    1.0 - res / tot
}

// ---- AP oracle ---------------------------------------------------------------

pub fn record(image_id: u64, category_id: u64, h: usize, w: usize, mask: &[bool], score: Option<f64>) -> InstanceRecord {
    InstanceRecord {
        image_id,
        category_id,
        mask: Rle::from_mask(h, w, mask).unwrap(),
        score,
    }
}

fn pixel_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Brute-force AP50: greedy matching on decoded masks, then for each of the
/// 101 recall levels the maximum precision over all ranks reaching it.
pub fn brute_force_ap50(preds: &[InstanceRecord], gts: &[InstanceRecord]) -> f64 {
    let mut cats: Vec<u64> = gts.iter().map(|g| g.category_id).collect();
    cats.sort();
    cats.dedup();
    let mut aps = Vec::new();
    for &c in &cats {
        let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].category_id == c).collect();
        let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].category_id == c).collect();
        // stable: equal scores keep insertion order
        order.sort_by(|&a, &b| preds[b].score.unwrap().partial_cmp(&preds[a].score.unwrap()).unwrap());
        let mut used = vec![false; gts.len()];
        let mut tp_flags = Vec::new();
        for &p in &order {
            let pm = preds[p].mask.decode();
            let mut best: Option<(usize, f64)> = None;
            for &gi in &gt_idx {
                if used[gi] || gts[gi].image_id != preds[p].image_id {
                    continue;
                }
                let iou = pixel_iou(&pm, &gts[gi].mask.decode());
                if iou >= 0.5 && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
            }
            tp_flags.push(best.is_some());
        }
        let n_gt = gt_idx.len() as f64;
        let mut prec = Vec::new();
        let mut rec = Vec::new();
        let mut tp = 0.0;
        for (k, &t) in tp_flags.iter().enumerate() {
            if t {
                tp += 1.0;
            }
            prec.push(tp / (k + 1) as f64);
            rec.push(tp / n_gt);
        }
        let mut total = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let mut best = 0.0;
            for k in 0..prec.len() {
                if rec[k] >= r && prec[k] > best {
                    best = prec[k];
                }
            }
            total += best;
        }
        aps.push(total / 101.0);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Random rectangle masks on a `size × size` image.
pub fn random_rect(r: &mut ChaCha8Rng, size: usize) -> Vec<bool> {
    let x0 = r.gen_range(0..size);
    let y0 = r.gen_range(0..size);
    let x1 = r.gen_range(x0 + 1..=size);
    let y1 = r.gen_range(y0 + 1..=size);
    let mut m = vec![false; size * size];
    for y in y0..y1 {
        for x in x0..x1 {
            m[y * size + x] = true;
        }
    }
    m
}

/// A random instance set: ≤4 GTs, ≤6 predictions over up to two images, 16×16
/// masks. Predictions are noisy copies of GTs or fresh rectangles, with
/// scores quantized so ties occur.
pub fn random_instance_set(seed: u64) -> (Vec<InstanceRecord>, Vec<InstanceRecord>) {
    let mut r = rng(seed);
    let size = 16;
    let n_gt = r.gen_range(1..=4);
    let gts: Vec<InstanceRecord> = (0..n_gt)
        .map(|_| {
            let m = random_rect(&mut r, size);
            record(r.gen_range(0..2), 1, size, size, &m, None)
        })
        .collect();
    let n_pred = r.gen_range(0..=6);
    let preds = (0..n_pred)
        .map(|_| {
            let score = Some(r.gen_range(0..5) as f64 / 4.0);
            if r.gen_bool(0.6) {
                let g = &gts[r.gen_range(0..gts.len())];
                let mut m = g.mask.decode();
                for _ in 0..r.gen_range(0..40) {
                    let i = r.gen_range(0..m.len());
                    m[i] = !m[i];
                }
                record(g.image_id, 1, size, size, &m, score)
            } else {
                let m = random_rect(&mut r, size);
                record(r.gen_range(0..2), 1, size, size, &m, score)
            }
        })
        .collect();
    (preds, gts)
}
