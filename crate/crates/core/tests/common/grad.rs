//! Finite-difference checks of every tape op and of the full losses.

use ptum::autodiff::gradcheck::{check_gradients, GradMismatch};
use ptum::autodiff::{ParamId, ParamStore, Tape, Tensor, Var, MASK_LOGIT};
use ptum::finetune::{ClassificationHead, CtrHead};
use ptum::model::{MaskMode, TokenBatch};
use ptum::pretrain::{forward_losses, make_mbp_sample, make_nbp_sample, Objective};
use ptum::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_corpus, random_users, tiny_config, tiny_model, VARIANTS};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;

#[derive(Debug)]
pub struct GradResult {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

type LossFn = Box<dyn Fn(&mut Tape) -> Result<Var>>;

fn run(
    name: &'static str,
    per_param: usize,
    mut make: impl FnMut(&mut ChaCha8Rng, usize) -> (ParamStore, LossFn),
) -> GradResult {
    let mut out = GradResult {
        name,
        instances: 0,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for i in 0..INSTANCES {
        let seed = name
            .bytes()
            .fold(i as u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, f) = make(&mut rng, i);
        let r = check_gradients(&mut store, STEP, per_param, &mut rng, f).unwrap();
        out.instances += 1;
        out.checked += r.checked;
        if r.max_rel_error >= out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst = r.worst;
        }
    }
    out
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn param(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, shape: &[usize]) -> ParamId {
    store.register(name, rand_tensor(rng, shape)).unwrap()
}

/// `Σ x ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn readout(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn dims(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=4)).collect()
}

/// Unary elementwise op on a random `[m, n]` parameter.
fn unary(name: &'static str, f: fn(&mut Tape, Var) -> Var, away_from_zero: bool) -> GradResult {
    run(name, 8, move |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 2);
        let a = param(&mut s, "a", rng, &shape);
        if away_from_zero {
            for x in s.value_mut(a).data_mut() {
                *x = x.signum() * (0.05 + x.abs());
            }
        }
        let w = rand_tensor(rng, &shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let y = f(t, x);
                readout(t, y, &w)
            }),
        )
    })
}

pub fn op_suite() -> Vec<GradResult> {
    let mut out = Vec::new();

    out.push(run("embedding", 8, |rng, _| {
        let mut s = ParamStore::new();
        let (v, d, n) = (rng.gen_range(2..7), rng.gen_range(1..5), rng.gen_range(1..8));
        let table = param(&mut s, "e", rng, &[v, d]);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        let w = rand_tensor(rng, &[n, d]);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.embedding(table, &ids)?;
                readout(t, x, &w)
            }),
        )
    }));

    out.push(run("matmul", 8, |rng, _| {
        let mut s = ParamStore::new();
        let d = dims(rng, 3);
        let a = param(&mut s, "a", rng, &[d[0], d[1]]);
        let b = param(&mut s, "b", rng, &[d[1], d[2]]);
        let w = rand_tensor(rng, &[d[0], d[2]]);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let (a, b) = (t.param(a), t.param(b));
                let y = t.matmul(a, b)?;
                readout(t, y, &w)
            }),
        )
    }));

    for trans in [false, true] {
        out.push(run(
            if trans { "batch_matmul_trans_b" } else { "batch_matmul" },
            8,
            move |rng, _| {
                let mut s = ParamStore::new();
                let d = dims(rng, 4);
                let a = param(&mut s, "a", rng, &[d[0], d[1], d[2]]);
                let bshape = if trans { [d[0], d[3], d[2]] } else { [d[0], d[2], d[3]] };
                let b = param(&mut s, "b", rng, &bshape);
                let w = rand_tensor(rng, &[d[0], d[1], d[3]]);
                (
                    s,
                    Box::new(move |t: &mut Tape| {
                        let (a, b) = (t.param(a), t.param(b));
                        let y = t.batch_matmul(a, b, trans)?;
                        readout(t, y, &w)
                    }),
                )
            },
        ));
    }

    out.push(run("add", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 3);
        let a = param(&mut s, "a", rng, &shape);
        let b = param(&mut s, "b", rng, &shape);
        let w = rand_tensor(rng, &shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let (a, b) = (t.param(a), t.param(b));
                let y = t.add(a, b)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("add_row", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 3);
        let a = param(&mut s, "a", rng, &shape);
        let b = param(&mut s, "b", rng, &[shape[2]]);
        let w = rand_tensor(rng, &shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let (a, b) = (t.param(a), t.param(b));
                let y = t.add_row(a, b)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("mul", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 2);
        let a = param(&mut s, "a", rng, &shape);
        let b = param(&mut s, "b", rng, &shape);
        let w = rand_tensor(rng, &shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let (a, b) = (t.param(a), t.param(b));
                let y = t.mul(a, b)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("scale", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 2);
        let a = param(&mut s, "a", rng, &shape);
        let c: f64 = rng.gen_range(-3.0..3.0);
        let w = rand_tensor(rng, &shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let y = t.scale(x, c);
                readout(t, y, &w)
            }),
        )
    }));

    out.push(unary("tanh", |t, x| t.tanh(x), false));
    out.push(unary("sigmoid", |t, x| t.sigmoid(x), false));
    out.push(unary("relu", |t, x| t.relu(x), true));

    out.push(run("sum", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 3);
        let a = param(&mut s, "a", rng, &shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            }),
        )
    }));

    out.push(run("mean_axis", 8, |rng, i| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 3);
        let axis = i % 3;
        let a = param(&mut s, "a", rng, &shape);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let w = rand_tensor(rng, &out_shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let y = t.mean_axis(x, axis)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("concat", 8, |rng, i| {
        let mut s = ParamStore::new();
        let axis = i % 3;
        let base = dims(rng, 3);
        let mut total = base.clone();
        total[axis] = 0;
        let mut parts = Vec::new();
        for k in 0..rng.gen_range(1..=3) {
            let mut sh = base.clone();
            sh[axis] = rng.gen_range(1..=3);
            total[axis] += sh[axis];
            parts.push(param(&mut s, &format!("p{k}"), rng, &sh));
        }
        let w = rand_tensor(rng, &total);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let vars: Vec<Var> = parts.iter().map(|&p| t.param(p)).collect();
                let y = t.concat(&vars, axis)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("mask_fill", 8, |rng, i| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 2);
        let a = param(&mut s, "a", rng, &shape);
        // alternate full-size and row-broadcast masks
        let n = if i % 2 == 0 { shape[0] * shape[1] } else { shape[1] };
        let keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        let fill: f64 = rng.gen_range(-1.0..1.0);
        let w = rand_tensor(rng, &shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let y = t.mask_fill(x, &keep, fill)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("softmax", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 3);
        let a = param(&mut s, "a", rng, &shape);
        let w = rand_tensor(rng, &shape);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let y = t.softmax(x)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("masked_softmax", 8, |rng, _| {
        let mut s = ParamStore::new();
        let (m, n) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
        let a = param(&mut s, "a", rng, &[m, n]);
        let mut keep: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.6)).collect();
        for r in 0..m {
            keep[r * n + rng.gen_range(0..n)] = true;
        }
        let w = rand_tensor(rng, &[m, n]);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let y = t.mask_fill(x, &keep, MASK_LOGIT)?;
                let y = t.softmax(y)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("cross_entropy", 8, |rng, _| {
        let mut s = ParamStore::new();
        let (b, c) = (rng.gen_range(1..=5), rng.gen_range(2..=6));
        let a = param(&mut s, "a", rng, &[b, c]);
        let gold: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                t.cross_entropy(x, &gold)
            }),
        )
    }));

    out.push(run("bce_with_logits", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 2);
        let a = param(&mut s, "a", rng, &shape);
        for x in s.value_mut(a).data_mut() {
            *x *= 4.0;
        }
        let labels: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.gen_range(0..2) as f64).collect();
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                t.bce_with_logits(x, &labels)
            }),
        )
    }));

    out.push(run("gather_rows", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 3);
        let a = param(&mut s, "a", rng, &shape);
        let n = rng.gen_range(1..=6);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..shape[0])).collect();
        let w = rand_tensor(rng, &[n, shape[1], shape[2]]);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let y = t.gather_rows(x, &idx)?;
                readout(t, y, &w)
            }),
        )
    }));

    out.push(run("reshape", 8, |rng, _| {
        let mut s = ParamStore::new();
        let shape = dims(rng, 3);
        let a = param(&mut s, "a", rng, &shape);
        let flat = [shape[0] * shape[1], shape[2]];
        let w = rand_tensor(rng, &flat);
        (
            s,
            Box::new(move |t: &mut Tape| {
                let x = t.param(a);
                let y = t.reshape(x, &flat)?;
                let y = t.tanh(y);
                readout(t, y, &w)
            }),
        )
    }));

    out
}

const VOCAB: usize = 12;

/// Encoder variants and mask mode for instance `i`, cycling through all
/// combinations.
fn combo(i: usize) -> ptum::model::ModelConfig {
    let mode = if i.is_multiple_of(2) {
        MaskMode::Replace
    } else {
        MaskMode::Remove
    };
    tiny_config(VOCAB, VARIANTS[i % 3], VARIANTS[(i / 3) % 3], mode)
}

pub fn model_suite() -> Vec<GradResult> {
    let mut out = Vec::new();

    out.push(run("mbp_loss", 3, |rng, i| {
        let cfg = combo(i);
        let mut s = ParamStore::new();
        let model = tiny_model(&mut s, &cfg, rng);
        let corpus = random_corpus(rng, 5, 2, 5, VOCAB);
        let samples: Vec<_> = (0..3)
            .filter_map(|u| make_mbp_sample(&corpus, u, 2, rng).unwrap())
            .collect();
        let obj = Objective {
            mbp: true,
            nbp: false,
            lambda: 1.0,
        };
        (
            s,
            Box::new(move |t: &mut Tape| Ok(forward_losses(t, &model, &corpus, &samples, &[], obj)?.total)),
        )
    }));

    out.push(run("nbp_loss", 3, |rng, i| {
        let cfg = combo(i);
        let mut s = ParamStore::new();
        let model = tiny_model(&mut s, &cfg, rng);
        let corpus = random_corpus(rng, 5, 3, 6, VOCAB);
        let samples: Vec<_> = (0..3)
            .filter_map(|u| make_nbp_sample(&corpus, u, None, 2, 2, rng).unwrap())
            .collect();
        let obj = Objective {
            mbp: false,
            nbp: true,
            lambda: 1.0,
        };
        (
            s,
            Box::new(move |t: &mut Tape| Ok(forward_losses(t, &model, &corpus, &[], &samples, obj)?.total)),
        )
    }));

    out.push(run("joint_loss", 3, |rng, i| {
        let cfg = combo(i);
        let mut s = ParamStore::new();
        let model = tiny_model(&mut s, &cfg, rng);
        let corpus = random_corpus(rng, 5, 3, 6, VOCAB);
        let mbp: Vec<_> = (0..3)
            .filter_map(|u| make_mbp_sample(&corpus, u, 2, rng).unwrap())
            .collect();
        let nbp: Vec<_> = (0..3)
            .filter_map(|u| make_nbp_sample(&corpus, u, None, 2, 2, rng).unwrap())
            .collect();
        let obj = Objective {
            mbp: true,
            nbp: true,
            lambda: rng.gen_range(0.0..2.0),
        };
        (
            s,
            Box::new(move |t: &mut Tape| Ok(forward_losses(t, &model, &corpus, &mbp, &nbp, obj)?.total)),
        )
    }));

    out.push(run("classification_head", 3, |rng, i| {
        let cfg = combo(i);
        let mut s = ParamStore::new();
        let model = tiny_model(&mut s, &cfg, rng);
        let head = ClassificationHead::new(&mut s, model.dim(), 3, rng).unwrap();
        super::randomize(&mut s, rng, 0.7);
        let users = random_users(rng, 4, 1, 5, VOCAB, 5);
        let gold: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        (
            s,
            Box::new(move |t: &mut Tape| {
                let refs: Vec<_> = users.iter().collect();
                let u = model.encode_records(t, &refs)?;
                let z = head.logits(t, u)?;
                t.cross_entropy(z, &gold)
            }),
        )
    }));

    out.push(run("ctr_head", 3, |rng, i| {
        let cfg = combo(i);
        let mut s = ParamStore::new();
        let model = tiny_model(&mut s, &cfg, rng);
        let head = CtrHead::new(&mut s, &model, rng).unwrap();
        super::randomize(&mut s, rng, 0.7);
        let users = random_users(rng, 4, 1, 5, VOCAB, 5);
        let ads: Vec<Vec<u32>> = (0..4)
            .map(|_| {
                (0..rng.gen_range(1..6))
                    .map(|_| rng.gen_range(2..VOCAB as u32))
                    .collect()
            })
            .collect();
        let y: Vec<f64> = (0..4).map(|_| rng.gen_range(0..2) as f64).collect();
        (
            s,
            Box::new(move |t: &mut Tape| {
                let refs: Vec<_> = users.iter().collect();
                let u = model.encode_records(t, &refs)?;
                let z = head.logits(t, u, &TokenBatch::new(&ads)?)?;
                t.bce_with_logits(z, &y)
            }),
        )
    }));

    out
}
