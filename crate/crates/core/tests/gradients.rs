mod common;

use common::reference::{self, Arr};
use common::*;
use vxlab::tensor::{batchnorm2d, conv2d, linear, RunningStats};
use vxlab::{CaptureSpec, Group, MiniResNet, Mode, Tensor};

#[test]
fn conv_matches_sliding_window_oracle_on_grid() {
    let (worst, cases) = conv_oracle_grid(11);
    assert!(cases > 500, "grid too small: {cases}");
    assert!(worst < 1e-5, "max deviation {worst}");
}

#[test]
fn conv_small_oracle_example() {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, &[1, 2, 4, 4], 1.0);
    let k = rand_tensor(&mut r, &[3, 2, 3, 3], 1.0);
    let (got, _) = conv2d(&x, &k, None, 1, 1).unwrap();
    let want = naive_conv(&x, &k, None, 1, 1);
    assert_eq!(got.shape(), &[1, 3, 4, 4]);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
}

#[test]
fn every_primitive_passes_finite_differences() {
    for rep in all_gradient_reports(100, 24) {
        assert!(rep.ok(), "{rep:?}");
    }
}

#[test]
fn backward_is_linear_in_upstream() {
    let mut r = rng(9);
    let x = rand_tensor(&mut r, &[2, 3, 4, 4], 1.0);
    let k = rand_tensor(&mut r, &[4, 3, 3, 3], 1.0);
    let (y, conv) = conv2d(&x, &k, None, 2, 1).unwrap();
    let mut stats = RunningStats::new(3);
    let (_, bn) = batchnorm2d(&x, &Tensor::full(vec![3], 1.3), &Tensor::zeros(vec![3]), &mut stats, Mode::Train).unwrap();
    let w = rand_tensor(&mut r, &[5, 6], 1.0);
    let lx = rand_tensor(&mut r, &[2, 6], 1.0);
    let (ly, lin) = linear(&lx, &w, &Tensor::zeros(vec![5])).unwrap();
    let (a, b) = (0.7f32, -1.9f32);

    let check = |u: &Tensor, v: &Tensor, f: &dyn Fn(&Tensor) -> Tensor| {
        let combo = u.scale(a).add(&v.scale(b)).unwrap();
        let lhs = f(&combo);
        let rhs = f(u).scale(a).add(&f(v).scale(b)).unwrap();
        let diff = lhs.max_abs_diff(&rhs).unwrap();
        assert!(diff < 1e-5, "linearity violated by {diff}");
    };
    let (u, v) = (rand_tensor(&mut r, y.shape(), 1.0), rand_tensor(&mut r, y.shape(), 1.0));
    check(&u, &v, &|t| conv.backward(t).unwrap().d_input);
    check(&u, &v, &|t| conv.backward(t).unwrap().param("weight").unwrap().clone());
    let (u, v) = (rand_tensor(&mut r, x.shape(), 1.0), rand_tensor(&mut r, x.shape(), 1.0));
    check(&u, &v, &|t| bn.backward(t).unwrap().d_input);
    let (u, v) = (rand_tensor(&mut r, ly.shape(), 1.0), rand_tensor(&mut r, ly.shape(), 1.0));
    check(&u, &v, &|t| lin.backward(t).unwrap().d_input);
}

#[test]
fn repeated_calls_are_bit_identical() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[2, 3, 5, 5], 1.0);
    let k = rand_tensor(&mut r, &[4, 3, 3, 3], 1.0);
    let (a, ca) = conv2d(&x, &k, None, 1, 1).unwrap();
    let (b, cb) = conv2d(&x, &k, None, 1, 1).unwrap();
    assert_eq!(a, b);
    let up = rand_tensor(&mut r, a.shape(), 1.0);
    assert_eq!(ca.backward(&up).unwrap().d_input, cb.backward(&up).unwrap().d_input);

    let model = MiniResNet::build(2, 4).unwrap();
    let img = rand_tensor(&mut r, &[3, 3, 64, 64], 1.0);
    assert_eq!(model.predict(&img).unwrap(), model.predict(&img).unwrap());
}

#[test]
fn class_score_gradient_matches_finite_differences_on_activations() {
    let mut r = rng(21);
    let mut model = MiniResNet::build(2, 8).unwrap();
    for _ in 0..3 {
        model.forward(&rand_tensor(&mut r, &[4, 3, 64, 64], 1.0), Mode::Train, &CaptureSpec::none()).unwrap();
    }
    let x = rand_tensor(&mut r, &[1, 3, 64, 64], 1.0);
    let stages = [Group::Stem, Group::Layer2, Group::Layer3, Group::Layer4];
    let (_, cap) = model.forward(&x, Mode::Eval, &CaptureSpec::new(stages).unwrap()).unwrap();
    let cap = model.backward_from_class_score(cap, 1).unwrap();
    for stage in stages {
        let sc = cap.get(stage).unwrap();
        let g = sc.gradient.as_ref().unwrap();
        assert_eq!(g.shape(), sc.activation.shape());
        let score = |a: &Tensor| reference::net_from(&model, stage, &Arr::of(a)).data[1];
        // The eight largest-gradient coordinates plus a few fixed ones.
        let mut idx: Vec<usize> = (0..g.numel()).collect();
        idx.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
        idx.truncate(8);
        idx.extend([0, g.numel() / 2, g.numel() - 1]);
        let probe: std::collections::BTreeSet<usize> = idx.into_iter().collect();
        // The eval-mode tail is piecewise linear in the activation, so the two
        // one-sided slopes differ exactly when a ReLU kink lies within the step.
        let crosses_kink = |i: usize| {
            let x = sc.activation.data()[i];
            let slope = |d: f32| {
                let mut a = sc.activation.clone();
                a.data_mut()[i] += d;
                let step = a.data()[i] as f64 - x as f64;
                (score(&a) - score(&sc.activation)) / step
            };
            let (left, right) = (slope(-FD_STEP), slope(FD_STEP));
            (left - right).abs() > 1e-6 * left.abs().max(right.abs()).max(FD_MIN_MAG)
        };
        let (worst, checked) =
            fd_max_rel_err(&sc.activation, g, score, |i| !probe.contains(&i) || crosses_kink(i));
        assert!(checked >= 8, "{stage}: only {checked} coordinates checked");
        assert!(worst < FD_TOL, "{stage}: relative error {worst}");
    }
}

#[test]
fn network_forward_matches_reference() {
    let mut r = rng(4);
    let mut model = MiniResNet::build(3, 6).unwrap();
    for _ in 0..3 {
        model.forward(&rand_tensor(&mut r, &[4, 3, 64, 64], 1.0), Mode::Train, &CaptureSpec::none()).unwrap();
    }
    let x = rand_tensor(&mut r, &[2, 3, 64, 64], 1.0);
    let want = reference::net(&model, &Arr::of(&x));
    let got = model.predict(&x).unwrap();
    assert!(want.deviation(&got) < 1e-4, "deviation {}", want.deviation(&got));
    let (_, cap) = model.forward(&x, Mode::Eval, &CaptureSpec::new([Group::Layer2]).unwrap()).unwrap();
    let act = &cap.get(Group::Layer2).unwrap().activation;
    let tail = model.forward_from(Group::Layer2, act).unwrap();
    assert!(reference::net_from(&model, Group::Layer2, &Arr::of(act)).deviation(&tail) < 1e-4);
    assert_eq!(tail, got);
}

#[test]
fn empty_capture_leaves_logits_unchanged() {
    let mut r = rng(2);
    let mut model = MiniResNet::build(2, 1).unwrap();
    let x = rand_tensor(&mut r, &[2, 3, 64, 64], 1.0);
    let (plain, empty) = model.forward(&x, Mode::Eval, &CaptureSpec::none()).unwrap();
    assert!(empty.is_empty());
    let (captured, cap) = model.forward(&x, Mode::Eval, &CaptureSpec::new([Group::Layer4]).unwrap()).unwrap();
    assert_eq!(plain, captured);
    assert_eq!(cap.get(Group::Layer4).unwrap().activation.shape(), &[2, 128, 4, 4]);
}
