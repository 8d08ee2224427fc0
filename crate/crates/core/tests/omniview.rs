use ovr::encoder::{tokenize, Encoder};
use ovr::image::Image;
use ovr::nn::{AttentionBlock, Init, Linear};
use ovr::numeric::{Graph, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use ovr::omniview::{cell_broadcast, OmniView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;
const HEADS: usize = 2;

fn omniview(grid: usize, layers: usize) -> (OmniView, ParamStore<f64>) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ov = OmniView::new(&mut Init::new(&mut ps, &mut rng), "ov", grid, DIM, HEADS, layers, 2).unwrap();
    (ov, ps)
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

// ---------------------------------------------------------------- oracle

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt()).collect()
}

fn linear(ps: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = ps.value(l.w).data();
    let b = ps.value(l.b).data();
    (0..l.fan_out)
        .map(|j| b[j] + (0..l.fan_in).map(|i| x[i] * w[i * l.fan_out + j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn ffn(ps: &ParamStore<f64>, b: &AttentionBlock, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(ps, &b.ffn.fc1, &layer_norm(x)).into_iter().map(gelu).collect();
    linear(ps, &b.ffn.fc2, &h)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn set(ps: &mut ParamStore<f64>, l: &Linear, w: impl Fn(usize, usize) -> f64, b: f64) {
    let (fi, fo) = (l.fan_in, l.fan_out);
    *ps.value_mut(l.w) = Tensor::from_fn(&[fi, fo], |k| w(k / fo, k % fo));
    *ps.value_mut(l.b) = Tensor::full(&[fo], b);
}

fn zero_block(ps: &mut ParamStore<f64>, b: &AttentionBlock) {
    for l in [&b.q, &b.k, &b.v, &b.out, &b.ffn.fc1, &b.ffn.fc2] {
        set(ps, l, |_, _| 0.0, 0.0);
    }
}

// ----------------------------------------------------------------- tests

#[test]
fn single_token_fusion_is_value_path_plus_ffn() {
    let (ov, ps) = omniview(1, 1);
    let x = random(1, DIM, 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = ov.unposed_view_fusion(&mut g, &ps, 0, xv).unwrap();
    let probs = g.attention_probs(g.attention_nodes()[0]).unwrap().to_vec();
    assert!(probs.iter().all(|&p| p == 1.0), "single key must get weight 1");

    let b = &ov.layers[0].uvf;
    let x0 = x.data();
    let v = linear(&ps, &b.v, &layer_norm(x0));
    let h = add(x0, &linear(&ps, &b.out, &v));
    let expect = add(&h, &ffn(&ps, b, &h));
    for (a, e) in g.value(y).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn fusion_preserves_shape() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ov = OmniView::new(&mut Init::new(&mut ps, &mut rng), "ov", 7, 64, 4, 2, 2).unwrap();
    let mut g = Graph::new();
    let x = g.constant(random(49, 64, 2));
    let y = ov.unposed_view_fusion(&mut g, &ps, 1, x).unwrap();
    assert_eq!(g.shape(y), &[49, 64]);
}

#[test]
fn fusion_is_equivariant_to_joint_permutation() {
    let (mut ov, mut ps) = omniview(3, 1);
    let x = random(9, DIM, 3);
    let perm = [4, 0, 8, 2, 7, 1, 6, 3, 5];
    let permute = |t: &Tensor<f64>| {
        let r = rows(t);
        Tensor::new(&[9, DIM], perm.iter().flat_map(|&i| r[i].clone()).collect()).unwrap()
    };

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let xp = ov.add_positions(&mut g, &ps, xv).unwrap();
    let y = ov.unposed_view_fusion(&mut g, &ps, 0, xp).unwrap();
    let y = g.value(y).clone();

    let pos = ps.value(ov.pos_embed).clone();
    ov.pos_embed = ps.add("ov.pos_embed_permuted", permute(&pos));
    let mut g = Graph::new();
    let xv = g.constant(permute(&x));
    let xp = ov.add_positions(&mut g, &ps, xv).unwrap();
    let yp = ov.unposed_view_fusion(&mut g, &ps, 0, xp).unwrap();
    assert!(g.value(yp).max_abs_diff(&permute(&y)) < 1e-12);
}

#[test]
fn aggregation_hand_trace_with_identity_values() {
    let (ov, mut ps) = omniview(2, 1);
    let b = ov.layers[0].oca.clone();
    set(&mut ps, &b.v, |i, j| (i == j) as u8 as f64, 0.0);
    set(&mut ps, &b.out, |i, j| (i == j) as u8 as f64, 0.0);
    set(&mut ps, &b.ffn.fc2, |_, _| 0.0, 0.0);

    let x = random(4, DIM, 4);
    let mut g = Graph::new();
    let o = g.constant(x.clone());
    let s = g.constant(x.clone());
    let y = ov.origin_centric_aggregation(&mut g, &ps, 0, o, s).unwrap();

    // Per head: softmax(q kᵀ / √d) over layer-normed source tokens.
    let xr = rows(&x);
    let normed: Vec<Vec<f64>> = xr.iter().map(|r| layer_norm(r)).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|r| linear(&ps, &b.q, r)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|r| linear(&ps, &b.k, r)).collect();
    let d = DIM / HEADS;
    let out = rows(g.value(y));
    for i in 0..4 {
        let mut attended = vec![0.0; DIM];
        for h in 0..HEADS {
            let cols = h * d..(h + 1) * d;
            let logits: Vec<f64> = (0..4)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols {
                attended[c] = (0..4).map(|j| e[j] / z * normed[j][c]).sum();
            }
        }
        let expect = add(&xr[i], &attended);
        for (a, e) in out[i].iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "token {i}: {a} vs {e}");
        }
    }
}

#[test]
fn no_sources_leaves_fused_origin_untouched() {
    let (ov, ps) = omniview(3, 2);
    let x = random(9, DIM, 5);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = ov.run(&mut g, &ps, xv, &[]).unwrap();
    let mut expect = xv;
    for l in 0..2 {
        expect = ov.unposed_view_fusion(&mut g, &ps, l, expect).unwrap();
    }
    assert_eq!(g.value(y), g.value(expect));
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ov = OmniView::new(&mut Init::new(&mut ps, &mut rng), "ov", 7, 16, 4, 1, 2).unwrap();
    let mut g = Graph::new();
    let o = g.constant(random(49, 16, 6));
    let s = g.constant(random(49, 16, 7).map(|v| 5.0 * v));
    ov.origin_centric_aggregation(&mut g, &ps, 0, o, s).unwrap();
    let probs = g.attention_probs(g.attention_nodes()[0]).unwrap();
    assert_eq!(probs.len(), 4 * 49 * 49);
    for row in probs.chunks(49) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn channel_mismatch_is_rejected() {
    let (ov, ps) = omniview(2, 1);
    let mut g = Graph::new();
    let o = g.constant(random(4, DIM, 1));
    let s = g.constant(random(4, DIM + 1, 2));
    assert!(ov.origin_centric_aggregation(&mut g, &ps, 0, o, s).is_err());
}

#[test]
fn zeroed_blocks_are_an_identity() {
    let (ov, mut ps) = omniview(2, 2);
    for layer in &ov.layers {
        zero_block(&mut ps, &layer.uvf);
        zero_block(&mut ps, &layer.oca);
    }
    let x = random(4, DIM, 8);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let srcs = [g.constant(random(4, DIM, 9)), g.constant(random(4, DIM, 10))];
    let y = ov.run(&mut g, &ps, xv, &srcs).unwrap();
    assert_eq!(g.value(y), &x);

    // The map update vanishes with it.
    let map = g.constant(Tensor::from_fn(&[4, 6, DIM], |i| (i as f64 * 0.37).sin()));
    let tokens = tokenize(&mut g, map, 2).unwrap();
    let (flat, _) = ov.aggregate(&mut g, &ps, map, tokens, &srcs).unwrap();
    assert_eq!(g.value(flat).data(), g.value(map).data());
}

#[test]
fn aggregation_is_deterministic_and_uses_every_source() {
    let (ov, ps) = omniview(2, 2);
    let eval = |k: usize| {
        let mut g = Graph::new();
        let o = g.constant(random(4, DIM, 20));
        let srcs: Vec<Var> = (0..k).map(|i| g.constant(random(4, DIM, 30 + i as u64))).collect();
        let y = ov.run(&mut g, &ps, o, &srcs).unwrap();
        g.value(y).clone()
    };
    assert_eq!(eval(2), eval(2));
    assert!(eval(1).max_abs_diff(&eval(2)) > 1e-6);
    assert!(eval(0).max_abs_diff(&eval(1)) > 1e-6);
}

#[test]
fn source_order_matters() {
    let (ov, ps) = omniview(2, 1);
    let eval = |order: [u64; 2]| {
        let mut g = Graph::new();
        let o = g.constant(random(4, DIM, 20));
        let srcs: Vec<Var> = order.iter().map(|&s| g.constant(random(4, DIM, s))).collect();
        let y = ov.run(&mut g, &ps, o, &srcs).unwrap();
        g.value(y).clone()
    };
    assert!(eval([1, 2]).max_abs_diff(&eval([2, 1])) > 1e-9);
}

#[test]
fn token_shape_is_stable_across_layers() {
    for layers in [1, 3, 5] {
        let (ov, ps) = omniview(3, layers);
        let mut g = Graph::new();
        let o = g.constant(random(9, DIM, 1));
        let s = g.constant(random(9, DIM, 2));
        let y = ov.run(&mut g, &ps, o, &[s]).unwrap();
        assert_eq!(g.shape(y), &[9, DIM]);
    }
}

#[test]
fn broadcast_assigns_each_texel_its_cell() {
    let mix = cell_broadcast::<f64>(4, 6, 2);
    let tokens = [1.0, 2.0, 3.0, 4.0];
    let out = mix.apply(&tokens, 1);
    #[rustfmt::skip]
    let expect = [
        1.0, 1.0, 1.0, 2.0, 2.0, 2.0,
        1.0, 1.0, 1.0, 2.0, 2.0, 2.0,
        3.0, 3.0, 3.0, 4.0, 4.0, 4.0,
        3.0, 3.0, 3.0, 4.0, 4.0, 4.0,
    ];
    assert_eq!(out, expect);
}

#[test]
fn gradient_reaches_encoder_through_source_tokens() {
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut init = Init::new(&mut ps, &mut rng);
    let enc = Encoder::new(&mut init, "enc", 8).unwrap();
    let ov = OmniView::new(&mut init, "ov", 2, 8, 2, 1, 2).unwrap();
    let mut pix = ChaCha8Rng::seed_from_u64(1);
    let img = Image::new(32, 32, (0..32 * 32 * 3).map(|_| pix.gen::<f32>()).collect()).unwrap();

    let mut g = Graph::new();
    let origin = g.constant(random(4, 8, 3));
    let map = enc.forward(&mut g, &ps, &img).unwrap();
    let src = tokenize(&mut g, map, 2).unwrap();
    let src = ov.add_positions(&mut g, &ps, src).unwrap();
    let y = ov.run(&mut g, &ps, origin, &[src]).unwrap();
    let w = g.constant(random(4, 8, 9));
    let p = g.mul(y, w).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    let stem = ps.find("enc.stem.w").unwrap();
    let norm: f64 = grads.param(stem).unwrap().iter().map(|v| v * v).sum();
    assert!(norm > 0.0);
}
