//! Central-difference checks of every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use xmodal_core::adapter::AdapterStack;
use xmodal_core::gradcheck::{grad_check, numeric_gradient, DEFAULT_STEP};
use xmodal_core::losses::{
    bce, bce_grad, l1_loss, l1_loss_grad, modality_loss, modality_loss_grad, siou_loss, siou_loss_grad,
    template_sim_loss, template_sim_loss_grad, tracking_loss, tracking_loss_grad, EpochSchedule, TrackingWeights,
    ALPHA_MODALITY, ZETA_TEMPLATE,
};
use xmodal_core::nn::{
    attention_backward, attention_forward, cosine_similarity, cosine_similarity_backward, linear, linear_backward,
    sigmoid, sigmoid_backward, softmax, softmax_backward,
};
use xmodal_core::switch::Modality;
use xmodal_core::{BBox, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const TRIALS: usize = 10;

pub const OPS: [&str; 12] = [
    "linear", "sigmoid", "softmax", "attention", "cosine", "adapter", "l1", "siou", "tracking", "bce", "modality",
    "template",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn reshape(like: &Tensor, x: &[f64]) -> Tensor {
    Tensor::new(like.shape(), x.to_vec()).expect("shape")
}

/// A box pair at least `gap` away from every point where SIoU or L1 has a kink.
fn box_pair(rng: &mut ChaCha8Rng, gap: f64) -> (BBox, BBox) {
    loop {
        let mut draw = || {
            BBox::new(
                rng.random_range(0.0..40.0),
                rng.random_range(0.0..40.0),
                rng.random_range(4.0..20.0),
                rng.random_range(4.0..20.0),
            )
        };
        let (p, g) = (draw(), draw());
        let (px0, py0, px1, py1) = p.corners();
        let (gx0, gy0, gx1, gy1) = g.corners();
        let mut gaps = vec![p.cx - g.cx, p.cy - g.cy, p.w - g.w, p.h - g.h];
        for a in [px0, px1] {
            gaps.extend([a - gx0, a - gx1]);
        }
        for a in [py0, py1] {
            gaps.extend([a - gy0, a - gy1]);
        }
        if gaps.iter().all(|d| d.abs() > gap) {
            return (p, g);
        }
    }
}

type Check = fn(&mut ChaCha8Rng, f64) -> f64;

fn check_linear(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (x, w, b, up) = (tensor(rng, &[3, 4]), tensor(rng, &[4, 5]), tensor(rng, &[5]), tensor(rng, &[3, 5]));
    let g = linear_backward(&x, &w, &up).unwrap();
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| linear(x, w, b).unwrap().dot(&up).unwrap();
    [
        grad_check(|v| f(&reshape(&x, v), &w, &b), x.data(), g.input.scale(bug).data(), DEFAULT_STEP),
        grad_check(|v| f(&x, &reshape(&w, v), &b), w.data(), g.weight.scale(bug).data(), DEFAULT_STEP),
        grad_check(|v| f(&x, &w, &reshape(&b, v)), b.data(), g.bias.scale(bug).data(), DEFAULT_STEP),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn check_sigmoid(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (x, up) = (tensor(rng, &[6]).scale(4.0), tensor(rng, &[6]));
    let g = sigmoid_backward(&sigmoid(&x), &up).unwrap().scale(bug);
    grad_check(|v| sigmoid(&reshape(&x, v)).dot(&up).unwrap(), x.data(), g.data(), DEFAULT_STEP)
}

fn check_softmax(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (x, up) = (tensor(rng, &[3, 5]).scale(3.0), tensor(rng, &[3, 5]));
    let g = softmax_backward(&softmax(&x, 1).unwrap(), &up, 1).unwrap().scale(bug);
    grad_check(|v| softmax(&reshape(&x, v), 1).unwrap().dot(&up).unwrap(), x.data(), g.data(), DEFAULT_STEP)
}

fn check_attention(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (q, k, v, up) = (tensor(rng, &[4, 6]), tensor(rng, &[3, 6]), tensor(rng, &[3, 6]), tensor(rng, &[4, 6]));
    let (_, cache) = attention_forward(&q, &k, &v).unwrap();
    let g = attention_backward(&cache, &up).unwrap();
    let f = |q: &Tensor, k: &Tensor, v: &Tensor| attention_forward(q, k, v).unwrap().0.dot(&up).unwrap();
    [
        grad_check(|x| f(&reshape(&q, x), &k, &v), q.data(), g.q.scale(bug).data(), DEFAULT_STEP),
        grad_check(|x| f(&q, &reshape(&k, x), &v), k.data(), g.k.scale(bug).data(), DEFAULT_STEP),
        grad_check(|x| f(&q, &k, &reshape(&v, x)), v.data(), g.v.scale(bug).data(), DEFAULT_STEP),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn check_cosine(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (a, b) = (tensor(rng, &[7]), tensor(rng, &[7]));
    let (ga, gb) = cosine_similarity_backward(&a, &b).unwrap();
    grad_check(|x| cosine_similarity(&reshape(&a, x), &b).unwrap(), a.data(), ga.scale(bug).data(), DEFAULT_STEP).max(
        grad_check(|x| cosine_similarity(&a, &reshape(&b, x)).unwrap(), b.data(), gb.scale(bug).data(), DEFAULT_STEP),
    )
}

fn check_adapter(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let d = 8;
    let mut sample = || rng.random_range(-0.5..0.5);
    let stack = AdapterStack::from_fn(2, d, &mut sample).unwrap();
    let (f, dy, up) = (tensor(rng, &[5, d]), tensor(rng, &[3, d]), tensor(rng, &[5, d]));
    let m = rng.random_range(0.1..0.9);
    let (_, cache) = stack.forward(&f, &dy, m, Modality::Nir).unwrap();
    let g = stack.backward(&cache, &up).unwrap();
    let loss = |st: &AdapterStack, f: &Tensor, dy: &Tensor| st.adapt(f, dy, m, Modality::Nir).unwrap().dot(&up).unwrap();
    let mut worst = grad_check(|x| loss(&stack, &reshape(&f, x), &dy), f.data(), g.f_sr.scale(bug).data(), DEFAULT_STEP)
        .max(grad_check(|x| loss(&stack, &f, &reshape(&dy, x)), dy.data(), g.f_dyn.scale(bug).data(), DEFAULT_STEP));
    for (li, grads) in g.layers.iter().enumerate() {
        for (pi, grad) in grads.iter().enumerate() {
            let p = &stack.layers()[li].params()[pi];
            let f_param = |x: &[f64]| {
                let mut st = stack.clone();
                st.layers_mut()[li].params_mut()[pi] = reshape(p, x);
                loss(&st, &f, &dy)
            };
            // a constant key shift cancels in the softmax, so the key bias has a
            // structurally zero gradient; relative error is meaningless there
            if grad.norm() < 1e-10 {
                let numeric = numeric_gradient(f_param, p.data(), DEFAULT_STEP);
                let tiny = numeric.iter().all(|v| v.abs() < 1e-8);
                worst = worst.max(if tiny { 0.0 } else { f64::INFINITY });
                continue;
            }
            worst = worst.max(grad_check(f_param, p.data(), grad.scale(bug).data(), DEFAULT_STEP));
        }
    }
    worst
}

fn box_check(p: &BBox, analytic: [f64; 4], bug: f64, f: impl Fn(&BBox) -> f64) -> f64 {
    let a = analytic.map(|v| v * bug);
    grad_check(|x| f(&BBox::new(x[0], x[1], x[2], x[3])), &p.to_array(), &a, DEFAULT_STEP)
}

fn check_l1(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (p, g) = box_pair(rng, 0.5);
    box_check(&p, l1_loss_grad(&p, &g), bug, |b| l1_loss(b, &g))
}

fn check_siou(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (p, g) = box_pair(rng, 0.5);
    box_check(&p, siou_loss_grad(&p, &g).unwrap(), bug, |b| siou_loss(b, &g).unwrap())
}

fn check_tracking(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (p, g) = box_pair(rng, 0.5);
    let w = TrackingWeights::default();
    let sched = EpochSchedule::new(3, 10).unwrap();
    let ce = rng.random_range(0.0..2.0);
    box_check(&p, tracking_loss_grad(&p, &g, &w).unwrap(), bug, |b| tracking_loss(b, &g, ce, &sched, &w).unwrap())
}

fn check_bce(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (t, p) = (rng.random_range(0.0..1.0), rng.random_range(0.05..0.95));
    grad_check(|x| bce(t, x[0]).unwrap(), &[p], &[bce_grad(t, p).unwrap() * bug], DEFAULT_STEP)
}

fn check_modality(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (m, p) = (if rng.random_bool(0.5) { 1.0 } else { 0.0 }, rng.random_range(0.05..0.95));
    let g = modality_loss_grad(m, p, ALPHA_MODALITY).unwrap() * bug;
    grad_check(|x| modality_loss(m, x[0], ALPHA_MODALITY).unwrap(), &[p], &[g], DEFAULT_STEP)
}

fn check_template(rng: &mut ChaCha8Rng, bug: f64) -> f64 {
    let (a, b) = (tensor(rng, &[2, 4]), tensor(rng, &[2, 4]));
    let sched = EpochSchedule::new(2, 8).unwrap();
    let (ga, gb) = template_sim_loss_grad(&a, &b, &sched, ZETA_TEMPLATE).unwrap();
    let f = |a: &Tensor, b: &Tensor| template_sim_loss(a, b, &sched, ZETA_TEMPLATE).unwrap();
    grad_check(|x| f(&reshape(&a, x), &b), a.data(), ga.scale(bug).data(), DEFAULT_STEP)
        .max(grad_check(|x| f(&a, &reshape(&b, x)), b.data(), gb.scale(bug).data(), DEFAULT_STEP))
}

fn registry() -> [(&'static str, Check); 12] {
    [
        ("linear", check_linear),
        ("sigmoid", check_sigmoid),
        ("softmax", check_softmax),
        ("attention", check_attention),
        ("cosine", check_cosine),
        ("adapter", check_adapter),
        ("l1", check_l1),
        ("siou", check_siou),
        ("tracking", check_tracking),
        ("bce", check_bce),
        ("modality", check_modality),
        ("template", check_template),
    ]
}

/// Runs every registered op. `inject_bug` names an op whose analytic gradient
/// is scaled by 1.01 before comparison.
pub fn run_all(seed: u64, inject_bug: Option<&str>) -> Vec<OpReport> {
    registry()
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let bug = if inject_bug == Some(*name) { 1.01 } else { 1.0 };
            let max_rel_err = (0..TRIALS).map(|_| check(&mut rng, bug)).fold(0.0, f64::max);
            OpReport {
                op: (*name).into(),
                max_rel_err,
                passed: max_rel_err < TOLERANCE,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_matches_names() {
        let names: Vec<&str> = registry().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, OPS);
    }

    #[test]
    fn all_ops_pass() {
        for r in run_all(0, None) {
            assert!(r.passed, "{} {}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn injected_bug_is_caught() {
        for op in OPS {
            let reports = run_all(0, Some(op));
            for r in reports {
                assert_eq!(r.passed, r.op != op, "{}", r.op);
            }
        }
    }
}
