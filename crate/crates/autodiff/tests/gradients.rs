use autodiff::gradcheck::{central_difference, max_relative_error, spread_indices};
use autodiff::{Init, ParameterSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

/// Compares the tape gradient of `build(input)` with central differences.
fn check(shape: Vec<usize>, init: &[f64], tol: f64, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
    let x0 = Tensor::new(shape.clone(), init.to_vec()).unwrap();
    let mut tape = Tape::new();
    let x = tape.variable(x0.clone());
    let loss = build(&mut tape, x);
    tape.backward(loss).unwrap();
    let analytic = tape.grad_or_zeros(x);
    let coords = spread_indices(init.len(), 48);
    let numeric = central_difference(init, &coords, H, |probe| {
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new(shape.clone(), probe.to_vec()).unwrap());
        let l = build(&mut t, xv);
        t.value(l).item()
    });
    let picked: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
    let err = max_relative_error(&picked, &numeric, FLOOR);
    assert!(err < tol, "max relative error {err:e} >= {tol:e}");
}

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Weighted sum so every output element contributes a distinct gradient.
fn readout(tape: &mut Tape<f64>, y: Var) -> Var {
    let n = tape.value(y).len();
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::from_fn(shape, |i| ((i * 37 % 11) as f64 - 5.0) / 7.0 + 0.1 * (n as f64).recip()));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 24, -2.0, 2.0);
    check(vec![4, 6], &x, 1e-4, |t, v| {
        let a = t.sigmoid(v);
        let b = t.tanh(a);
        let c = t.softplus(v);
        let d = t.mul(b, c).unwrap();
        let e = t.exp(d);
        let f = t.affine(e, 0.5, 0.25);
        readout(t, f)
    });
    let pos = random(&mut rng, 24, 0.2, 2.0);
    check(vec![4, 6], &pos, 1e-4, |t, v| {
        let l = t.ln(v);
        let c = t.clamp(l, -10.0, 10.0);
        readout(t, c)
    });
}

#[test]
fn random_three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParameterSet::<f64>::new();
    let dims = [5usize, 16, 16, 3];
    for l in 0..3 {
        params
            .add(format!("w{l}"), vec![dims[l], dims[l + 1]], Init::FanIn(dims[l]), &mut rng)
            .unwrap();
        params
            .add(format!("b{l}"), vec![dims[l + 1]], Init::Uniform(0.1), &mut rng)
            .unwrap();
    }
    let input = Tensor::new(vec![8, 5], random(&mut rng, 40, -1.0, 1.0)).unwrap();
    let forward = |t: &mut Tape<f64>, ps: &ParameterSet<f64>, bind_grad: bool| {
        let b = if bind_grad { ps.bind(t) } else { ps.bind_frozen(t) };
        let mut h = t.constant(input.clone());
        for l in 0..3 {
            let w = b.var(ps.id(&format!("w{l}")).unwrap());
            let bias = b.var(ps.id(&format!("b{l}")).unwrap());
            h = t.matmul(h, w).unwrap();
            h = t.add_bias(h, bias).unwrap();
            if l < 2 {
                h = t.relu(h);
            }
        }
        let l = readout(t, h);
        (l, b)
    };
    let mut tape = Tape::new();
    let (loss, bound) = forward(&mut tape, &params, true);
    tape.backward(loss).unwrap();
    let grads = bound.grads(&tape);
    for id in params.ids() {
        let base = params.get(id).data().to_vec();
        let coords = spread_indices(base.len(), 32);
        let numeric = central_difference(&base, &coords, H, |probe| {
            let mut ps = params.clone();
            ps.get_mut(id).data_mut().copy_from_slice(probe);
            let mut t = Tape::new();
            let (l, _) = forward(&mut t, &ps, false);
            t.value(l).item()
        });
        let g = grads.grads[id.index()].as_ref().unwrap();
        let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i]).collect();
        let err = max_relative_error(&analytic, &numeric, FLOOR);
        assert!(err < 1e-4, "param {:?}: {err:e}", id);
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 30, -1.0, 1.0);
    check(vec![5, 6], &x, 1e-4, |t, v| {
        let a = t.slice_cols(v, 1, 3).unwrap();
        let b = t.slice_cols(v, 4, 2).unwrap();
        let c = t.concat(&[a, b, v]).unwrap();
        let s = t.softmax(c);
        let r = t.reshape(s, vec![55]).unwrap();
        let r = t.reshape(r, vec![5, 11]).unwrap();
        readout(t, r)
    });
    check(vec![5, 6], &x, 1e-4, |t, v| {
        let mask = (0..30).map(|i| i % 4 != 0).collect();
        let s = t.masked_softmax(v, mask).unwrap();
        readout(t, s)
    });
    check(vec![5, 6], &x, 1e-4, |t, v| {
        let p = t.pos_encode(v, 4).unwrap();
        readout(t, p)
    });
    check(vec![6, 3], &x[..18], 1e-4, |t, v| {
        let w = t.slice_cols(v, 0, 2).unwrap();
        let w = t.reshape(w, vec![3, 4]).unwrap();
        let vals = t.constant(Tensor::from_fn(vec![12, 2], |i| (i as f64 * 0.37).sin()));
        let s = t.group_weighted_sum(w, vals).unwrap();
        readout(t, s)
    });
}

#[test]
fn conv_and_upsample_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random(&mut rng, 6 * 6 * 2, -1.0, 1.0);
    let weight = Tensor::new(vec![18, 3], random(&mut rng, 54, -0.5, 0.5)).unwrap();
    let bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap();
    for stride in [1, 2] {
        check(vec![6, 6, 2], &img, 1e-4, |t, v| {
            let w = t.constant(weight.clone());
            let b = t.constant(bias.clone());
            let y = t.conv2d(v, w, b, stride).unwrap();
            let y = t.upsample2x(y).unwrap();
            readout(t, y)
        });
        check(vec![18, 3], weight.data(), 1e-4, |t, w| {
            let x = t.constant(Tensor::new(vec![6, 6, 2], img.clone()).unwrap());
            let b = t.constant(bias.clone());
            let y = t.conv2d(x, w, b, stride).unwrap();
            readout(t, y)
        });
    }
}

#[test]
fn conv_stride_two_halves_resolution() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![64, 64, 4]));
    let w = tape.constant(Tensor::zeros(vec![36, 8]));
    let b = tape.constant(Tensor::zeros(vec![8]));
    let y = tape.conv2d(x, w, b, 2).unwrap();
    assert_eq!(tape.shape(y), &[32, 32, 8]);
}

#[test]
fn bilinear_sample_interpolates_and_differentiates() {
    let (h, w, c) = (4usize, 5usize, 3usize);
    let map = Tensor::<f64>::from_fn(vec![h, w, c], |i| ((i * 13 % 17) as f64) / 17.0);
    let texel = |y: usize, x: usize| &map.data()[(y * w + x) * c..(y * w + x + 1) * c];

    let mut tape = Tape::<f64>::new();
    let m = tape.constant(map.clone());
    let uv = tape.constant(Tensor::matrix(4, 2, &[2.0, 1.0, 1.5, 2.5, -0.1, 1.0, 4.0, 3.0]).unwrap());
    let (out, valid) = tape.bilinear_sample(m, uv).unwrap();
    let o = tape.value(out).data().to_vec();
    assert_eq!(valid, vec![true, true, false, true]);
    assert_eq!(&o[0..3], texel(1, 2));
    for ch in 0..c {
        let mean = (texel(2, 1)[ch] + texel(2, 2)[ch] + texel(3, 1)[ch] + texel(3, 2)[ch]) / 4.0;
        assert!((o[3 + ch] - mean).abs() < 1e-12);
    }
    assert_eq!(&o[6..9], &[0.0; 3]);
    assert_eq!(&o[9..12], texel(3, 4));

    // Gradient w.r.t. coordinates at off-grid points.
    let coords = [0.3, 0.7, 2.4, 1.2, 3.6, 2.9, 1.1, 0.2];
    check(vec![4, 2], &coords, 1e-4, |t, v| {
        let m = t.constant(map.clone());
        let (s, _) = t.bilinear_sample(m, v).unwrap();
        readout(t, s)
    });
    // Gradient w.r.t. the map.
    check(vec![h, w, c], map.data(), 1e-4, |t, v| {
        let uv = t.constant(Tensor::matrix(4, 2, &coords).unwrap());
        let (s, _) = t.bilinear_sample(v, uv).unwrap();
        readout(t, s)
    });
}

#[test]
fn composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rays, s) = (3usize, 6usize);
    let sigma = random(&mut rng, rays * s, 0.0, 3.0);
    let color = random(&mut rng, rays * s * 3, 0.0, 1.0);
    let mut depths = Vec::new();
    for _ in 0..rays {
        let mut t0 = 1.0;
        for _ in 0..s {
            t0 += rng.random_range(0.05..0.3);
            depths.push(t0);
        }
    }
    let far: Vec<f64> = (0..rays).map(|r| depths[r * s + s - 1] + 0.2).collect();
    let tt = Tensor::new(vec![rays, s], depths.clone()).unwrap();
    let cc = Tensor::new(vec![rays * s, 3], color.clone()).unwrap();
    let ss = Tensor::new(vec![rays, s], sigma.clone()).unwrap();
    check(vec![rays, s], &sigma, 1e-4, |t, v| {
        let c = t.constant(cc.clone());
        let d = t.constant(tt.clone());
        let o = t.composite(v, c, d, far.clone()).unwrap();
        readout(t, o)
    });
    check(vec![rays * s, 3], &color, 1e-4, |t, v| {
        let sg = t.constant(ss.clone());
        let d = t.constant(tt.clone());
        let o = t.composite(sg, v, d, far.clone()).unwrap();
        readout(t, o)
    });
    check(vec![rays, s], &depths, 1e-4, |t, v| {
        let sg = t.constant(ss.clone());
        let c = t.constant(cc.clone());
        let o = t.composite(sg, c, v, far.clone()).unwrap();
        readout(t, o)
    });
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ps = ParameterSet::<f32>::new();
        let w = ps.add("w", vec![7, 9], Init::FanIn(7), &mut rng).unwrap();
        let mut t = Tape::new();
        let b = ps.bind(&mut t);
        let x = t.constant(Tensor::from_fn(vec![11, 7], |i| (i as f32 * 0.1).cos()));
        let y = t.matmul(x, b.var(w)).unwrap();
        let y = t.softplus(y);
        t.value(y).to_le_bytes()
    };
    assert_eq!(run(), run());
}
