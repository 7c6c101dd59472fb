use quadra::quadneuron::{
    count_macs, count_params, forward, init_params, polynomial_degree_probe, record_layer, symbolic_backward,
    LayerKind, LayerParams, NeuronFamily, ParamRole, QuadraticLayerSpec,
};
use quadra::tensor::{Mode, Tape, Tensor, Var};
use quadra::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_params(spec: &QuadraticLayerSpec, rng: &mut ChaCha8Rng) -> LayerParams {
    let tensors = spec
        .family
        .roles()
        .iter()
        .map(|&r| (r, random(&spec.param_shape(r), rng)))
        .collect();
    LayerParams::new(spec, tensors).unwrap()
}

fn scalar_params(spec: &QuadraticLayerSpec, values: &[(ParamRole, f64)]) -> LayerParams {
    let tensors = spec
        .family
        .roles()
        .iter()
        .map(|&r| {
            let v = values.iter().find(|(q, _)| *q == r).map_or(0.0, |(_, v)| *v);
            (r, Tensor::full(&spec.param_shape(r), v))
        })
        .collect();
    LayerParams::new(spec, tensors).unwrap()
}

#[test]
fn proposed_scalar_forward_and_gradient() {
    let spec = QuadraticLayerSpec::fc(NeuronFamily::Proposed, 1, 1);
    use ParamRole::*;
    let params = scalar_params(&spec, &[(Wa, 1.0), (Wb, 3.0), (Wc, -1.0)]);
    let x = Tensor::scalar(2.0).reshape(&[1, 1]).unwrap();
    let (y, cache) = forward(&spec, &params, &x).unwrap();
    assert_eq!(y.data(), &[10.0]);
    let g = symbolic_backward(&spec, &params, &cache, &Tensor::ones(&[1, 1])).unwrap();
    // exact product rule: 2·Wa·Wb·X + Wc
    assert_eq!(g.dx.data(), &[11.0]);
}

#[test]
fn proposed_scalar_gradient_law_holds_everywhere() {
    let spec = QuadraticLayerSpec::fc(NeuronFamily::Proposed, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (wa, wb, wc, x) = (
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        use ParamRole::*;
        let params = scalar_params(&spec, &[(Wa, wa), (Wb, wb), (Wc, wc)]);
        let xt = Tensor::new([1, 1], vec![x]).unwrap();
        let (_, cache) = forward(&spec, &params, &xt).unwrap();
        let g = symbolic_backward(&spec, &params, &cache, &Tensor::ones(&[1, 1])).unwrap();
        let law = 2.0 * wa * wb * x + wc;
        assert!((g.dx.data()[0] - law).abs() <= 1e-14 * (1.0 + law.abs()));
    }
}

#[test]
fn proposed_degenerates_to_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [LayerKind::Fc, LayerKind::Conv] {
        let (spec, fo_spec, x) = match kind {
            LayerKind::Fc => (
                QuadraticLayerSpec::fc(NeuronFamily::Proposed, 5, 3),
                QuadraticLayerSpec::fc(NeuronFamily::FirstOrder, 5, 3),
                random(&[4, 5], &mut rng),
            ),
            _ => (
                QuadraticLayerSpec::conv(NeuronFamily::Proposed, 2, 3, 3, 1, 1),
                QuadraticLayerSpec::conv(NeuronFamily::FirstOrder, 2, 3, 3, 1, 1),
                random(&[2, 2, 5, 5], &mut rng),
            ),
        };
        let base = random_params(&spec, &mut rng);
        for zeroed in [ParamRole::Wa, ParamRole::Wb] {
            let tensors = base
                .iter()
                .map(|(r, t)| {
                    let keep_bias_zero = matches!(
                        (zeroed, r),
                        (ParamRole::Wa, ParamRole::Ba) | (ParamRole::Wb, ParamRole::Bb)
                    );
                    if r == zeroed || keep_bias_zero {
                        (r, Tensor::zeros(t.shape()))
                    } else {
                        (r, t.clone())
                    }
                })
                .collect();
            let params = LayerParams::new(&spec, tensors).unwrap();
            let fo = LayerParams::new(
                &fo_spec,
                vec![
                    (ParamRole::W, params.get(ParamRole::Wc).clone()),
                    (ParamRole::B, params.get(ParamRole::Bc).clone()),
                ],
            )
            .unwrap();
            let (y, cache) = forward(&spec, &params, &x).unwrap();
            let (y_fo, _) = forward(&fo_spec, &fo, &x).unwrap();
            assert_eq!(y, y_fo);
            let dy = random(y.shape(), &mut rng);
            let g = symbolic_backward(&spec, &params, &cache, &dy).unwrap();
            // first-order reference gradients from the tape
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let pv: Vec<Var> = fo.tensors().into_iter().map(|t| tape.leaf(t)).collect();
            let out = record_layer(&mut tape, &fo_spec, &pv, &xv, Mode::Auto).unwrap();
            let r = tape.leaf(dy.clone());
            let h = tape.hadamard(&out, &r).unwrap();
            let loss = tape.sum(&h);
            let grads = tape.backward(&loss, &[&pv[0], &pv[1]]).unwrap();
            assert_eq!(g.get(ParamRole::Wc).unwrap(), grads.get(&pv[0]).unwrap());
            assert_eq!(g.get(ParamRole::Bc).unwrap(), grads.get(&pv[1]).unwrap());
        }
    }
}

/// Scalar-by-scalar evaluation of each family's formula for one sample.
fn brute_force(family: NeuronFamily, p: &LayerParams, x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    let dot =
        |role: ParamRole, j: usize, v: &[f64]| -> f64 { (0..n).map(|i| p.get(role).data()[j * n + i] * v[i]).sum() };
    let bias = |role: ParamRole, j: usize| p.get(role).data()[j];
    let quad = |j: usize| -> f64 {
        let wq = p.get(ParamRole::Wq).data();
        let mut s = 0.0;
        for i in 0..n {
            for k in 0..n {
                s += x[i] * wq[j * n * n + i * n + k] * x[k];
            }
        }
        s
    };
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    use ParamRole::*;
    (0..m)
        .map(|j| match family {
            NeuronFamily::FirstOrder => dot(W, j, x) + bias(B, j),
            NeuronFamily::T1Full => quad(j) + dot(Wb, j, x) + bias(B, j),
            NeuronFamily::T1Pure => quad(j) + bias(B, j),
            NeuronFamily::T2 => dot(Wa, j, &x2) + bias(Ba, j),
            NeuronFamily::T3 => (dot(Wa, j, x) + bias(Ba, j)).powi(2),
            NeuronFamily::T4 => (dot(Wa, j, x) + bias(Ba, j)) * (dot(Wb, j, x) + bias(Bb, j)),
            NeuronFamily::T1And2 => quad(j) + dot(Wb, j, &x2) + bias(B, j),
            NeuronFamily::T2And4 => {
                (dot(Wa, j, x) + bias(Ba, j)) * (dot(Wb, j, x) + bias(Bb, j)) + dot(Wc, j, &x2) + bias(Bc, j)
            }
            NeuronFamily::Proposed => {
                (dot(Wa, j, x) + bias(Ba, j)) * (dot(Wb, j, x) + bias(Bb, j)) + dot(Wc, j, x) + bias(Bc, j)
            }
        })
        .collect()
}

#[test]
fn fc_forward_matches_brute_force_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for family in NeuronFamily::ALL {
        let spec = QuadraticLayerSpec::fc(family, 4, 3);
        let params = random_params(&spec, &mut rng);
        let x = random(&[5, 4], &mut rng);
        let (y, _) = forward(&spec, &params, &x).unwrap();
        for s in 0..5 {
            let expect = brute_force(family, &params, &x.data()[s * 4..(s + 1) * 4], 3);
            for (a, e) in y.data()[s * 3..(s + 1) * 3].iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-12, "{family}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn conv_branches_match_direct_evaluation() {
    // a 1x1 stride-1 conv is an fc layer applied at every pixel
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for family in NeuronFamily::ALL.into_iter().filter(|f| !f.is_t1()) {
        let spec = QuadraticLayerSpec::conv(family, 3, 2, 1, 1, 0);
        let params = random_params(&spec, &mut rng);
        let x = random(&[2, 3, 3, 3], &mut rng);
        let (y, _) = forward(&spec, &params, &x).unwrap();
        let flat = LayerParams::new(
            &QuadraticLayerSpec::fc(family, 3, 2),
            params
                .iter()
                .map(|(r, t)| {
                    (
                        r,
                        t.reshape(&QuadraticLayerSpec::fc(family, 3, 2).param_shape(r)).unwrap(),
                    )
                })
                .collect(),
        )
        .unwrap();
        for n in 0..2 {
            for pix in 0..9 {
                let xs: Vec<f64> = (0..3).map(|c| x.data()[(n * 3 + c) * 9 + pix]).collect();
                let expect = brute_force(family, &flat, &xs, 2);
                for f in 0..2 {
                    let a = y.data()[(n * 2 + f) * 9 + pix];
                    assert!((a - expect[f]).abs() <= 1e-12, "{family}");
                }
            }
        }
    }
}

fn instance(family: NeuronFamily, kind: LayerKind, rng: &mut ChaCha8Rng) -> (QuadraticLayerSpec, Tensor) {
    match kind {
        LayerKind::Fc => {
            let (n, m, b) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..4));
            (QuadraticLayerSpec::fc(family, n, m), random(&[b, n], rng))
        }
        LayerKind::Conv => {
            let (c, f) = (rng.random_range(1..4), rng.random_range(1..4));
            let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
            let (r, s, p) = (rng.random_range(1..4), rng.random_range(1..3), rng.random_range(0..2));
            (
                QuadraticLayerSpec::conv(family, c, f, r, s, p),
                random(&[2, c, h, w], rng),
            )
        }
        LayerKind::DepthwiseConv => {
            let c = rng.random_range(1..4);
            let mut spec = QuadraticLayerSpec::conv(family, c, c, 3, 1, 1);
            spec.kind = LayerKind::DepthwiseConv;
            (spec, random(&[2, c, 4, 5], rng))
        }
    }
}

/// Records the layer under `mode` and returns (dx, param grads, cached bytes).
fn tape_grads(
    spec: &QuadraticLayerSpec,
    params: &LayerParams,
    x: &Tensor,
    dy: &Tensor,
    mode: Mode,
) -> (Vec<Tensor>, usize) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv: Vec<Var> = params.tensors().into_iter().map(|t| tape.leaf(t)).collect();
    let r = tape.leaf(dy.clone());
    let before = tape.memory().current_bytes;
    let y = record_layer(&mut tape, spec, &pv, &xv, mode).unwrap();
    let cached = tape.memory().current_bytes - before;
    let h = tape.hadamard(&y, &r).unwrap();
    let loss = tape.sum(&h);
    let mut wrt = vec![&xv];
    wrt.extend(pv.iter());
    let grads = tape.backward(&loss, &wrt).unwrap();
    (wrt.iter().map(|v| grads.get(v).unwrap().clone()).collect(), cached)
}

#[test]
fn symbolic_matches_auto_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for family in NeuronFamily::ALL.into_iter().filter(|f| f.has_symbolic()) {
        for kind in [LayerKind::Fc, LayerKind::Conv, LayerKind::DepthwiseConv] {
            if family.is_t1() && kind != LayerKind::Fc {
                continue;
            }
            for _ in 0..100 {
                let (spec, x) = instance(family, kind, &mut rng);
                let params = random_params(&spec, &mut rng);
                let (y, _) = forward(&spec, &params, &x).unwrap();
                let dy = random(y.shape(), &mut rng);
                let (auto, auto_bytes) = tape_grads(&spec, &params, &x, &dy, Mode::Auto);
                let (sym, sym_bytes) = tape_grads(&spec, &params, &x, &dy, Mode::Symbolic);
                for (a, s) in auto.iter().zip(&sym) {
                    let rel = a.max_rel_diff(s, 1e-300).unwrap();
                    assert!(rel <= 1e-10, "{family} {kind:?}: relative error {rel}");
                }
                assert!(sym_bytes < auto_bytes, "{family} {kind:?}: {sym_bytes} >= {auto_bytes}");
            }
        }
    }
}

#[test]
fn symbolic_node_caches_exactly_its_declared_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for family in NeuronFamily::ALL.into_iter().filter(|f| f.has_symbolic()) {
        let (spec, x) = instance(family, LayerKind::Fc, &mut rng);
        let params = random_params(&spec, &mut rng);
        // the input is a non-leaf here so its buffer is charged to the layer
        let mut tape = Tape::new();
        let x0 = tape.leaf(x.clone());
        let xs = tape.scale(&x0, 1.0);
        let before = tape.memory().current_bytes;
        let pv: Vec<Var> = params.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        record_layer(&mut tape, &spec, &pv, &xs, Mode::Symbolic).unwrap();
        let charged = tape.memory().current_bytes - before;
        let (y, cache) = forward(&spec, &params, &x).unwrap();
        let outputs = match family {
            NeuronFamily::Proposed | NeuronFamily::T4 | NeuronFamily::T2And4 => 2,
            _ => 0,
        };
        assert_eq!(charged, outputs * y.byte_size(), "{family}");
        assert_eq!(cache.byte_size(), x.byte_size() + outputs * y.byte_size());
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for family in NeuronFamily::ALL.into_iter().filter(|f| f.has_symbolic()) {
        let (spec, x) = instance(family, LayerKind::Fc, &mut rng);
        let params = random_params(&spec, &mut rng);
        let (y, cache) = forward(&spec, &params, &x).unwrap();
        let g = symbolic_backward(&spec, &params, &cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(g.dx.data().iter().all(|&v| v == 0.0));
        assert!(g.params.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn stale_cache_is_an_integrity_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let spec = QuadraticLayerSpec::fc(NeuronFamily::Proposed, 3, 2);
    let params = random_params(&spec, &mut rng);
    let other = random_params(&spec, &mut rng);
    let x = random(&[2, 3], &mut rng);
    let (y, cache) = forward(&spec, &params, &x).unwrap();
    let err = symbolic_backward(&spec, &other, &cache, &Tensor::ones(y.shape())).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)));
    let t4 = QuadraticLayerSpec::fc(NeuronFamily::T4, 3, 2);
    let t4p = random_params(&t4, &mut rng);
    assert!(matches!(
        symbolic_backward(&t4, &t4p, &cache, &Tensor::ones(y.shape())),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn first_order_symbolic_is_a_config_error() {
    let spec = QuadraticLayerSpec::fc(NeuronFamily::FirstOrder, 2, 2);
    let params = init_params(&spec, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[1, 2]));
    let pv: Vec<Var> = params.tensors().into_iter().map(|t| tape.leaf(t)).collect();
    assert!(matches!(
        record_layer(&mut tape, &spec, &pv, &x, Mode::Symbolic),
        Err(Error::Config(_))
    ));
}

#[test]
fn forward_agrees_with_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    for family in NeuronFamily::ALL {
        for kind in [LayerKind::Fc, LayerKind::Conv] {
            if family.is_t1() && kind != LayerKind::Fc {
                continue;
            }
            let (spec, x) = instance(family, kind, &mut rng);
            let params = random_params(&spec, &mut rng);
            let (y, _) = forward(&spec, &params, &x).unwrap();
            let dy = random(y.shape(), &mut rng);
            let (grads, _) = tape_grads(&spec, &params, &x, &dy, Mode::Auto);
            let objective = |xx: &Tensor, pp: &LayerParams| -> f64 {
                let (y, _) = forward(&spec, pp, xx).unwrap();
                y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
            };
            let mut leaves = vec![x.clone()];
            leaves.extend(params.tensors());
            for (li, leaf) in leaves.iter().enumerate() {
                for i in 0..leaf.len() {
                    let bump = |d: f64| {
                        let mut v = leaf.to_vec();
                        v[i] += d;
                        let t = Tensor::new(leaf.shape(), v).unwrap();
                        let mut all = leaves.clone();
                        all[li] = t;
                        let pp = params.replace(all[1..].to_vec());
                        objective(&all[0], &pp)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = grads[li].data()[i];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel <= 1e-4, "{family} {kind:?} leaf {li}[{i}]: {an} vs {fd}");
                }
            }
        }
    }
}

#[test]
fn parameter_counts_follow_definitions() {
    for n in [4, 10, 32] {
        let fo = count_params(&QuadraticLayerSpec::fc(NeuronFamily::FirstOrder, n, n)).weights;
        assert_eq!(
            count_params(&QuadraticLayerSpec::fc(NeuronFamily::T4, n, n)).weights,
            2 * fo
        );
        assert_eq!(
            count_params(&QuadraticLayerSpec::fc(NeuronFamily::Proposed, n, n)).weights,
            3 * fo
        );
        assert_eq!(
            count_params(&QuadraticLayerSpec::fc(NeuronFamily::T2, n, n)).weights,
            fo
        );
        assert_eq!(
            count_params(&QuadraticLayerSpec::fc(NeuronFamily::T1Pure, n, 1)).weights,
            n * n
        );
        assert_eq!(
            count_params(&QuadraticLayerSpec::fc(NeuronFamily::T1Full, n, 1)).weights,
            n * n + n
        );
    }
}

#[test]
fn mac_ratio_grows_linearly_for_t1() {
    let ratios: Vec<f64> = [8, 16, 32, 64]
        .iter()
        .map(|&n| {
            let t1 = count_macs(&QuadraticLayerSpec::fc(NeuronFamily::T1Pure, n, n), &[n]).unwrap();
            let p = count_macs(&QuadraticLayerSpec::fc(NeuronFamily::Proposed, n, n), &[n]).unwrap();
            t1 as f64 / p as f64
        })
        .collect();
    for w in ratios.windows(2) {
        let growth = w[1] / w[0];
        assert!((1.8..=2.2).contains(&growth), "{ratios:?}");
    }
}

// ---- polynomial structure -------------------------------------------------

type Poly = Vec<f64>;

fn padd(a: &Poly, b: &Poly) -> Poly {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, v) in a.iter().enumerate() {
        out[i] += v;
    }
    for (i, v) in b.iter().enumerate() {
        out[i] += v;
    }
    out
}

fn pmul(a: &Poly, b: &Poly) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn pscale(a: &Poly, s: f64) -> Poly {
    a.iter().map(|v| v * s).collect()
}

/// Symbolic expansion of one fc layer over polynomial inputs.
fn expand(family: NeuronFamily, p: &LayerParams, xs: &[Poly], m: usize) -> Vec<Poly> {
    let n = xs.len();
    let lin = |role: ParamRole, j: usize, v: &[Poly]| -> Poly {
        (0..n).fold(vec![0.0], |acc, i| {
            padd(&acc, &pscale(&v[i], p.get(role).data()[j * n + i]))
        })
    };
    let b = |role: ParamRole, j: usize| vec![p.get(role).data()[j]];
    let sq: Vec<Poly> = xs.iter().map(|v| pmul(v, v)).collect();
    use ParamRole::*;
    (0..m)
        .map(|j| match family {
            NeuronFamily::T4 => pmul(&padd(&lin(Wa, j, xs), &b(Ba, j)), &padd(&lin(Wb, j, xs), &b(Bb, j))),
            NeuronFamily::Proposed => padd(
                &pmul(&padd(&lin(Wa, j, xs), &b(Ba, j)), &padd(&lin(Wb, j, xs), &b(Bb, j))),
                &padd(&lin(Wc, j, xs), &b(Bc, j)),
            ),
            NeuronFamily::T2 => padd(&lin(Wa, j, &sq), &b(Ba, j)),
            _ => unimplemented!(),
        })
        .collect()
}

fn scalar_net(
    families: &[NeuronFamily],
    width: usize,
    zero_bias: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<(QuadraticLayerSpec, LayerParams)> {
    let l = families.len();
    families
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let spec = QuadraticLayerSpec::fc(f, if i == 0 { 1 } else { width }, if i == l - 1 { 1 } else { width });
            let mut params = random_params(&spec, rng);
            if zero_bias {
                params = params.replace(
                    params
                        .iter()
                        .map(|(r, t)| {
                            if r.is_bias() {
                                Tensor::zeros(t.shape())
                            } else {
                                t.clone()
                            }
                        })
                        .collect(),
                );
            }
            (spec, params)
        })
        .collect()
}

#[test]
fn probe_single_proposed_unit() {
    let spec = QuadraticLayerSpec::fc(NeuronFamily::Proposed, 1, 1);
    use ParamRole::*;
    let params = scalar_params(&spec, &[(Wa, 1.0), (Wb, 1.0), (Wc, 1.0)]);
    let fit = polynomial_degree_probe(&[(spec, params)]).unwrap();
    let expect = [0.0, 1.0, 1.0];
    for (c, e) in fit.coeffs.iter().zip(expect) {
        assert!((c - e).abs() <= 1e-12);
    }
}

#[test]
fn probe_matches_symbolic_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for depth in 1..=3 {
        for family in [NeuronFamily::Proposed, NeuronFamily::T4, NeuronFamily::T2] {
            let net = scalar_net(&vec![family; depth], 3, false, &mut rng);
            let fit = polynomial_degree_probe(&net).unwrap();
            assert_eq!(fit.coeffs.len(), (1 << depth) + 1);
            let mut polys = vec![vec![0.0, 1.0]];
            for (spec, p) in &net {
                polys = expand(spec.family, p, &polys, spec.outputs);
            }
            let oracle = &polys[0];
            let scale = oracle.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for k in 0..fit.coeffs.len() {
                let o = oracle.get(k).copied().unwrap_or(0.0);
                assert!((fit.coeffs[k] - o).abs() <= 1e-8 * scale, "{family} L={depth} k={k}");
            }
        }
    }
}

#[test]
fn bias_free_t4_net_is_a_monomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = scalar_net(&[NeuronFamily::T4, NeuronFamily::T4], 3, true, &mut rng);
    let fit = polynomial_degree_probe(&net).unwrap();
    for (k, c) in fit.coeffs.iter().enumerate() {
        if k == 4 {
            assert!(c.abs() > 1e-10);
        } else {
            assert!(c.abs() <= 1e-10, "coefficient {k} = {c}");
        }
    }
}

#[test]
fn probe_flags_degree_violations() {
    // a relu breaks polynomial structure; the probe rejects it up front
    let spec =
        QuadraticLayerSpec::fc(NeuronFamily::Proposed, 1, 1).with_activation(quadra::quadneuron::Activation::Relu);
    let params = init_params(&spec, 0).unwrap();
    assert!(polynomial_degree_probe(&[(spec, params)]).is_err());
}
