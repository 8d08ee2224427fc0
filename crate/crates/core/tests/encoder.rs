use ovr::encoder::{feature_side, tokenize, Encoder};
use ovr::image::Image;
use ovr::nn::Init;
use ovr::numeric::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encoder(channels: usize) -> (Encoder, ParamStore<f64>) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = Encoder::new(&mut Init::new(&mut ps, &mut rng), "enc", channels).unwrap();
    (enc, ps)
}

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn map_shape(enc: &Encoder, ps: &ParamStore<f64>, img: &Image) -> Vec<usize> {
    let mut g = Graph::new();
    let m = enc.forward(&mut g, ps, img).unwrap();
    g.shape(m).to_vec()
}

#[test]
fn downsampling_arithmetic() {
    let (enc, ps) = encoder(8);
    assert_eq!(map_shape(&enc, &ps, &noise_image(64, 64, 0)), vec![8, 8, 8]);
    assert_eq!(map_shape(&enc, &ps, &noise_image(504, 378, 0)), vec![48, 63, 8]);
    assert_eq!(map_shape(&enc, &ps, &noise_image(33, 40, 0)), vec![5, 5, 8]);
    assert_eq!(feature_side(504), 63);
    assert_eq!(feature_side(378), 48);
}

#[test]
fn undersized_images_are_rejected() {
    let (enc, ps) = encoder(8);
    let mut g = Graph::new();
    assert!(enc.forward(&mut g, &ps, &noise_image(31, 64, 0)).is_err());
    assert!(enc.forward(&mut g, &ps, &noise_image(64, 16, 0)).is_err());
}

#[test]
fn channels_must_split_into_stages() {
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(Encoder::new(&mut Init::new(&mut ps, &mut rng), "enc", 6).is_err());
}

#[test]
fn identical_images_give_identical_grids() {
    let (enc, ps) = encoder(8);
    let img = noise_image(48, 40, 7);
    let a = enc.encode(&ps, &img, 3, 0).unwrap();
    let b = enc.encode(&ps, &img.clone(), 3, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.grid(), 3);
}

#[test]
fn token_count_is_resolution_independent() {
    let (enc, ps) = encoder(8);
    for (w, h) in [(32, 32), (64, 64), (96, 80), (72, 56)] {
        let grid = enc.encode(&ps, &noise_image(w, h, 1), 4, 0).unwrap();
        assert_eq!(grid.tokens.shape(), &[16, 8], "{w}x{h}");
    }
}

#[test]
fn default_grid_has_49_tokens() {
    let (enc, ps) = encoder(8);
    let grid = enc.encode(&ps, &noise_image(64, 64, 2), 7, 0).unwrap();
    assert_eq!(grid.tokens.shape(), &[49, 8]);
}

#[test]
fn constant_map_gives_constant_tokens() {
    let mut g = Graph::<f64>::new();
    let map = g.constant(Tensor::from_fn(&[9, 11, 4], |i| (i % 4) as f64 + 0.25));
    let t = tokenize(&mut g, map, 7).unwrap();
    let v = g.value(t);
    assert_eq!(v.shape(), &[49, 4]);
    for r in 0..49 {
        for c in 0..4 {
            assert!((v.data()[r * 4 + c] - (c as f64 + 0.25)).abs() < 1e-12);
        }
    }
}

#[test]
fn even_pooling_averages_two_by_two_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..14 * 14 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::<f64>::new();
    let map = g.constant(Tensor::new(&[14, 14, 3], data.clone()).unwrap());
    let t = tokenize(&mut g, map, 7).unwrap();
    let v = g.value(t).data();
    for cy in 0..7 {
        for cx in 0..7 {
            for c in 0..3 {
                let at = |y: usize, x: usize| data[(y * 14 + x) * 3 + c];
                let expect = (at(2 * cy, 2 * cx)
                    + at(2 * cy, 2 * cx + 1)
                    + at(2 * cy + 1, 2 * cx)
                    + at(2 * cy + 1, 2 * cx + 1))
                    / 4.0;
                assert!((v[(cy * 7 + cx) * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn uneven_pooling_cells_overlap() {
    // 3 texels into 2 cells: [0, 2) and [1, 3).
    let mut g = Graph::<f64>::new();
    let map = g.constant(Tensor::from_fn(&[3, 3, 1], |i| (i % 3) as f64));
    let t = tokenize(&mut g, map, 2).unwrap();
    assert_eq!(g.value(t).data(), &[0.5, 1.5, 0.5, 1.5]);
}

#[test]
fn map_smaller_than_grid_is_rejected() {
    let mut g = Graph::<f64>::new();
    let map = g.constant(Tensor::zeros(&[6, 8, 2]));
    assert!(tokenize(&mut g, map, 7).is_err());
}

#[test]
fn every_pixel_influences_the_features() {
    let (enc, ps) = encoder(8);
    let img = noise_image(32, 32, 9);
    let base = enc.encode(&ps, &img, 2, 0).unwrap();
    for (x, y) in [(0, 0), (31, 0), (0, 31), (31, 31), (16, 9), (5, 27)] {
        let mut changed = img.clone();
        let p = changed.pixel(x, y);
        changed.set_pixel(x, y, [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]);
        let out = enc.encode(&ps, &changed, 2, 0).unwrap();
        assert!(
            out.full_map.max_abs_diff(&base.full_map) > 1e-9,
            "pixel ({x}, {y}) has no effect"
        );
    }
}
