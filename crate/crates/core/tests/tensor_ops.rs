use proptest::prelude::*;

use cloudseg_core::tensor::{
    batchnorm_infer, bilinear_upsample2x, concat_channels, conv2d, resize_bilinear, softmax_channels, BatchNorm,
    ConvWeights, Dims, Tensor, WeightStore,
};

fn naive_conv(input: &Tensor, w: &ConvWeights) -> Vec<f64> {
    let d = input.dims();
    let out = w.output_dims(d).unwrap();
    let cout_g = w.out_channels / w.groups;
    let mut res = Vec::with_capacity(out.len());
    for n in 0..out.n {
        for oc in 0..out.c {
            let g = oc / cout_g;
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut acc = w.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
                    for ic in 0..w.in_per_group {
                        for ky in 0..w.kh {
                            for kx in 0..w.kw {
                                let iy = (oy * w.stride + ky) as isize - w.padding as isize;
                                let ix = (ox * w.stride + kx) as isize - w.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                                    let k = w.kernel[((oc * w.in_per_group + ic) * w.kh + ky) * w.kw + kx];
                                    acc += k as f64
                                        * input.at(n, g * w.in_per_group + ic, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                    }
                    res.push(acc);
                }
            }
        }
    }
    res
}

prop_compose! {
    fn conv_case()(groups in 1usize..=3, cin_g in 1usize..=3, cout_g in 1usize..=3,
                   k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..=3, extra in 0usize..=2,
                   h in 5usize..=11, w in 5usize..=11, bias in any::<bool>(), seed in any::<u64>())
        -> (Tensor, ConvWeights)
    {
        let mut s = seed | 1;
        let mut next = move || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s % 2001) as f32 / 1000.0 - 1.0 };
        let c = groups * cin_g;
        let o = groups * cout_g;
        let input = Tensor::from_fn(Dims::new(2, c, h, w), |_, _, _, _| next());
        let kernel = (0..o * cin_g * k * k).map(|_| next()).collect();
        let bias = bias.then(|| (0..o).map(|_| next()).collect());
        let weights = ConvWeights::new(kernel, o, cin_g, k, k, bias, stride, k / 2 + extra.min(1), groups).unwrap();
        (input, weights)
    }
}

proptest! {
    #[test]
    fn conv_matches_nested_loops((input, weights) in conv_case()) {
        let got = conv2d(&input, &weights).unwrap();
        let want = naive_conv(&input, &weights);
        prop_assert_eq!(got.dims(), weights.output_dims(input.dims()).unwrap());
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn conv_is_linear_in_the_input((input, weights) in conv_case(), alpha in -2.0f32..2.0) {
        let mut no_bias = weights.clone();
        no_bias.bias = None;
        let scaled = input.map(|v| v * alpha);
        let a = conv2d(&scaled, &no_bias).unwrap();
        let b = conv2d(&input, &no_bias).unwrap().map(|v| v * alpha);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-4);
        }
    }

    #[test]
    fn softmax_sites_sum_to_one(vals in prop::collection::vec(-50.0f32..50.0, 4 * 6)) {
        let t = Tensor::new(Dims::new(1, 4, 2, 3), vals).unwrap();
        let p = softmax_channels(&t);
        for s in 0..6 {
            let sum: f32 = (0..4).map(|c| p.plane(0, c)[s]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn resize_preserves_constants(h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20, v in -5.0f32..5.0) {
        let t = Tensor::full(Dims::new(1, 2, h, w), v);
        let r = resize_bilinear(&t, oh, ow).unwrap();
        prop_assert!(r.data().iter().all(|&x| x == v));
    }
}

#[test]
fn identity_kernel_reproduces_input() {
    let input = Tensor::from_fn(Dims::new(1, 1, 4, 5), |_, _, y, x| (y * 5 + x) as f32);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let out = conv2d(&input, &ConvWeights::dense(k, 1, 1, 3, None, 1, 1).unwrap()).unwrap();
    assert_eq!(out, input);
}

#[test]
fn upsample_row_interpolates_at_half_pixels() {
    let t = Tensor::new(Dims::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
    let up = bilinear_upsample2x(&t);
    assert_eq!(up.dims(), Dims::new(1, 1, 2, 4));
    assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn batchnorm_matches_formula() {
    let x = Tensor::from_fn(Dims::new(1, 2, 2, 2), |_, c, y, x| (c * 4 + y * 2 + x) as f32);
    let bn = BatchNorm {
        gamma: vec![2.0, 0.5],
        beta: vec![1.0, -1.0],
        mean: vec![1.0, 5.0],
        var: vec![4.0, 0.25],
        eps: 0.0,
    };
    let y = batchnorm_infer(&x, &bn).unwrap();
    for c in 0..2 {
        for (i, &v) in y.plane(0, c).iter().enumerate() {
            let xin = x.plane(0, c)[i];
            let want = (xin - bn.mean[c]) * bn.gamma[c] / bn.var[c].sqrt() + bn.beta[c];
            assert!((v - want).abs() < 1e-6);
        }
    }
}

#[test]
fn concat_stacks_channels_in_order() {
    let a = Tensor::full(Dims::new(1, 2, 3, 3), 1.0);
    let b = Tensor::full(Dims::new(1, 1, 3, 3), 2.0);
    let c = concat_channels(&a, &b).unwrap();
    assert_eq!(c.dims(), Dims::new(1, 3, 3, 3));
    assert!(c.plane(0, 2).iter().all(|&v| v == 2.0));
    assert!(concat_channels(&a, &Tensor::zeros(Dims::new(1, 1, 2, 3))).is_err());
}

#[test]
fn weight_store_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = WeightStore::new();
    store
        .insert("a.weight", vec![2, 3], (0..6).map(|v| v as f32).collect())
        .unwrap();
    store.insert("a.bias", vec![2], vec![-1.0, 1.5]).unwrap();
    store.save(dir.path()).unwrap();
    let back = WeightStore::load(dir.path()).unwrap();
    assert_eq!(back, store);
    let offsets: Vec<u64> = back.manifest().iter().map(|e| e.offset).collect();
    assert_eq!(offsets, vec![0, 24]);
}

#[test]
fn truncated_weights_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = WeightStore::new();
    store.insert("w", vec![4], vec![1.0; 4]).unwrap();
    store.save(dir.path()).unwrap();
    let path = dir.path().join("weights.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..10]).unwrap();
    assert!(WeightStore::load(dir.path()).is_err());
}
