use jointdistill::nn::{
    build_connector, build_student, build_teacher, fuse_features, joint_tasks, Bind, Mode, ModelGraph, TaskKind,
    BN_EPS, CONNECTOR_WIDTHS, STUDENT_WIDTHS, TEACHER_WIDTHS,
};
use jointdistill::tensor::{Graph, Tensor};
use jointdistill::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn set(model: &mut ModelGraph, name: &str, t: Tensor) {
    let i = model.params().iter().position(|(n, _)| n == name).unwrap();
    *model.params_mut().at_mut(i) = t;
}

fn run(model: &ModelGraph, x: &Tensor, mode: Mode) -> (Vec<usize>, Vec<Tensor>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, mode, Bind::Frozen).unwrap();
    let heads = out.heads.iter().map(|&h| g.value(h).clone()).collect();
    (g.value(out.features).shape().to_vec(), heads)
}

#[test]
fn teacher_shapes_and_determinism() {
    let x = random(&mut ChaCha8Rng::seed_from_u64(1), &[1, 3, 8, 8]);
    let seg = build_teacher(TaskKind::Segmentation { classes: 4 }, &TEACHER_WIDTHS, 5).unwrap();
    let (f, h) = run(&seg, &x, Mode::Train);
    assert_eq!(f, vec![1, 32, 8, 8]);
    assert_eq!(h[0].shape(), &[1, 4, 8, 8]);
    let depth = build_teacher(TaskKind::Depth, &TEACHER_WIDTHS, 5).unwrap();
    assert_eq!(run(&depth, &x, Mode::Train).1[0].shape(), &[1, 1, 8, 8]);

    let again = build_teacher(TaskKind::Segmentation { classes: 4 }, &TEACHER_WIDTHS, 5).unwrap();
    assert_eq!(seg, again);
    let bits = |m: &ModelGraph| -> Vec<u64> {
        m.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    assert_eq!(bits(&seg), bits(&again));
    assert_ne!(
        seg,
        build_teacher(TaskKind::Segmentation { classes: 4 }, &TEACHER_WIDTHS, 6).unwrap()
    );
}

#[test]
fn initialization_follows_the_scheme() {
    let m = build_teacher(TaskKind::Depth, &TEACHER_WIDTHS, 9).unwrap();
    for (name, t) in m.params().iter() {
        if name.ends_with("bias") || name.ends_with("beta") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else if name.ends_with("gamma") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        } else {
            let fan_in: usize = t.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
        }
    }
}

#[test]
fn student_shapes_and_size() {
    let tasks = joint_tasks(4);
    let s = build_student(&tasks, &STUDENT_WIDTHS, 3).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(2), &[1, 3, 8, 8]);
    let (f, h) = run(&s, &x, Mode::Train);
    assert_eq!(f, vec![1, 16, 8, 8]);
    assert_eq!(h[0].shape(), &[1, 4, 8, 8]);
    assert_eq!(h[1].shape(), &[1, 1, 8, 8]);
    let t = build_teacher(tasks[0], &TEACHER_WIDTHS, 3).unwrap();
    // Backbone 3*32*9+32+64 + 2*(32*32*9+32+64), head 32*4+4.
    assert_eq!(t.param_count(), 896 + 64 + 2 * (9216 + 96) + 132);
    assert!(s.param_count() < t.param_count());
    assert!(build_student(&tasks[..1], &STUDENT_WIDTHS, 3).is_err());
}

#[test]
fn student_heads_share_the_backbone() {
    let tasks = joint_tasks(4);
    let s = build_student(&tasks, &STUDENT_WIDTHS, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 6, 6]);
    for head in 0..2 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = s.forward(&mut g, xv, Mode::Train, Bind::Trainable).unwrap();
        let loss = g.sum(out.heads[head]);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(&g, out.features).data().iter().any(|&v| v != 0.0));
    }

    let (_, base) = run(&s, &x, Mode::Eval);
    let mut moved = s.clone();
    let w = moved.params().get("stage1.conv.weight").unwrap().clone();
    let mut w2 = w.clone();
    w2.data_mut()[5] += 0.1;
    set(&mut moved, "stage1.conv.weight", w2);
    let (_, after) = run(&moved, &x, Mode::Eval);
    for (a, b) in base.iter().zip(&after) {
        assert_ne!(a.data(), b.data());
    }
}

#[test]
fn connector_shapes_and_errors() {
    let tasks = joint_tasks(4);
    let c = build_connector(&[32, 32], &tasks, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let a = g.constant(random(&mut rng, &[1, 32, 8, 8]));
    let b = g.constant(random(&mut rng, &[1, 32, 8, 8]));
    let fused = fuse_features(&mut g, &[a, b]).unwrap();
    let out = c.forward(&mut g, fused, Mode::Train, Bind::Trainable).unwrap();
    assert_eq!(g.value(out.features).shape(), &[1, CONNECTOR_WIDTHS[1], 8, 8]);
    assert_eq!(g.value(out.heads[0]).shape(), &[1, 4, 8, 8]);
    assert_eq!(g.value(out.heads[1]).shape(), &[1, 1, 8, 8]);

    let narrow = g.constant(random(&mut rng, &[1, 48, 8, 8]));
    match c.forward(&mut g, narrow, Mode::Train, Bind::Trainable) {
        Err(Error::ShapeMismatch {
            axis, expected, found, ..
        }) => {
            assert_eq!(axis, 1);
            assert_eq!((expected.min(found), expected.max(found)), (48, 64));
        }
        Err(e) => panic!("unexpected {e}"),
        Ok(_) => panic!("accepted 48 channels"),
    }
    assert!(build_connector(&[], &tasks, 7).is_err());
}

#[test]
fn connector_on_zero_input_emits_head_biases() {
    let tasks = joint_tasks(4);
    let mut c = build_connector(&[32, 32], &tasks, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Nonzero conv biases wash out: a constant channel normalizes to beta = 0,
    // up to rounding in the batch mean amplified by 1/sqrt(eps).
    set(&mut c, "stage0.conv.bias", random(&mut rng, &[32]));
    set(&mut c, "stage1.conv.bias", random(&mut rng, &[32]));
    let hb0 = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
    let hb1 = Tensor::from_vec(vec![-0.75]);
    set(&mut c, "head0.bias", hb0.clone());
    set(&mut c, "head1.bias", hb1.clone());
    let (_, heads) = run(&c, &Tensor::zeros(&[1, 64, 8, 8]), Mode::Train);
    for (out, bias) in heads.iter().zip([&hb0, &hb1]) {
        for (i, &v) in out.data().iter().enumerate() {
            assert!((v - bias.data()[i / 64]).abs() < 1e-9);
        }
    }

    // With beta set, the head sees relu(beta) at every pixel.
    let beta = random(&mut rng, &[32]);
    set(&mut c, "stage1.bn.beta", beta.clone());
    let (_, heads) = run(&c, &Tensor::zeros(&[1, 64, 8, 8]), Mode::Train);
    let w = c.params().get("head1.weight").unwrap();
    let want: f64 = hb1.data()[0]
        + w.data()
            .iter()
            .zip(beta.data())
            .map(|(w, b)| w * b.max(0.0))
            .sum::<f64>();
    assert!(heads[1].data().iter().all(|v| (v - want).abs() < 1e-9));
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new();
    let mut d = vec![0.0; 2 * 3 * 4];
    for (i, v) in d.iter_mut().enumerate() {
        *v = ((i / 4) % 3) as f64 * 2.5 - 1.0;
    }
    let x = g.constant(Tensor::new(vec![2, 3, 2, 2], d).unwrap());
    let gamma = g.constant(Tensor::from_vec(vec![1.5, 0.5, 2.0]));
    let beta = g.constant(Tensor::from_vec(vec![0.1, -0.2, 0.3]));
    let (y, _) = g.batch_norm_train(x, gamma, beta, BN_EPS).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        assert_eq!(v, [0.1, -0.2, 0.3][(i / 4) % 3]);
    }

    // Already standardized per channel: zero mean, unit population variance.
    let z = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let zv = g.constant(z.clone());
    let one = g.constant(Tensor::from_vec(vec![1.0]));
    let zero = g.constant(Tensor::from_vec(vec![0.0]));
    let (y, _) = g.batch_norm_train(zv, one, zero, BN_EPS).unwrap();
    for (a, b) in g.value(y).data().iter().zip(z.data()) {
        // The eps guard shrinks unit-variance data by 1/sqrt(1 + eps), about 5e-6.
        assert!((a - b / (1.0 + BN_EPS).sqrt()).abs() < 1e-15);
        assert!((a - b).abs() < 1e-5);
    }

    let tiny = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    assert!(g.batch_norm_train(tiny, one, zero, BN_EPS).is_err());
}

#[test]
fn batch_norm_matches_two_pass_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let (n, c, h, w) = (
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(2..5),
            rng.random_range(1..5),
        );
        let x = random(&mut rng, &[n, c, h, w]);
        let gamma = random(&mut rng, &[c]);
        let beta = random(&mut rng, &[c]);
        let mut g = Graph::new();
        let (xv, gv, bv) = (
            g.constant(x.clone()),
            g.constant(gamma.clone()),
            g.constant(beta.clone()),
        );
        let (y, stats) = g.batch_norm_train(xv, gv, bv, BN_EPS).unwrap();
        let hw = h * w;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((stats.mean[ch] - mean).abs() < 1e-10 && (stats.var[ch] - var).abs() < 1e-10);
            for s in 0..n {
                for p in 0..hw {
                    let i = (s * c + ch) * hw + p;
                    let want = gamma.data()[ch] * (x.data()[i] - mean) / (var + BN_EPS).sqrt() + beta.data()[ch];
                    assert!((g.value(y).data()[i] - want).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn running_statistics_update_only_on_commit() {
    let tasks = joint_tasks(4);
    let mut s = build_student(&tasks, &STUDENT_WIDTHS, 10).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(7), &[2, 3, 5, 5]);
    let before = s.buffers().clone();
    let (_, a) = run(&s, &x, Mode::Eval);
    let (_, b) = run(&s, &x, Mode::Eval);
    assert_eq!(a, b);
    assert_eq!(s.buffers(), &before);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = s.forward(&mut g, xv, Mode::Train, Bind::Trainable).unwrap();
    assert_eq!(s.buffers(), &before);
    let st = &out.bn_stats[0];
    s.commit_batch_stats(&out.bn_stats).unwrap();
    let rm = s.buffers().get("stage0.bn.running_mean").unwrap();
    let rv = s.buffers().get("stage0.bn.running_var").unwrap();
    let unbias = st.count as f64 / (st.count as f64 - 1.0);
    for ch in 0..STUDENT_WIDTHS[0] {
        assert!((rm.data()[ch] - 0.1 * st.mean[ch]).abs() < 1e-15);
        assert!((rv.data()[ch] - (0.9 + 0.1 * st.var[ch] * unbias)).abs() < 1e-15);
    }
    assert!(s.commit_batch_stats(&out.bn_stats[..1]).is_err());
}

#[test]
fn train_forward_is_repeatable() {
    let tasks = joint_tasks(4);
    let s = build_student(&tasks, &STUDENT_WIDTHS, 11).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(8), &[2, 3, 7, 7]);
    assert_eq!(run(&s, &x, Mode::Train), run(&s, &x, Mode::Train));
}

#[test]
fn bad_specs_are_rejected() {
    assert!(build_teacher(TaskKind::Segmentation { classes: 1 }, &TEACHER_WIDTHS, 0).is_err());
    assert!(build_teacher(TaskKind::Depth, &[], 0).is_err());
    assert!(build_teacher(TaskKind::Depth, &[8, 0], 0).is_err());
}
