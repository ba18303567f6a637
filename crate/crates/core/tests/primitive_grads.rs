//! Gradient soundness of every primitive op against central differences,
//! over ten seeded shape/value draws each.

use htmnet_core::gradcheck::grad_check;
use htmnet_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-6;
const TRIALS: u64 = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, v).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn check<F>(name: &str, mut make: F)
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>),
{
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 17);
        let (inputs, f) = make(&mut rng);
        let err = grad_check(|t| f(t), &inputs, EPS).unwrap();
        assert!(err <= TOL, "{name} seed {seed}: rel err {err:e}");
    }
}

#[test]
fn elementwise_binary_with_broadcast() {
    check("add/sub/mul/div", |rng| {
        let (n, c, h) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
        let a = rand_tensor(rng, &[n, c, h]);
        let b = rand_tensor(rng, &[1, c, 1]);
        let d = rand_tensor(rng, &[h]).add_scalar(3.0).unwrap();
        (
            vec![a, b, d],
            Box::new(|t| t[0].add(&t[1])?.mul(&t[0])?.sub(&t[1])?.div(&t[2])),
        )
    });
}

#[test]
fn activations() {
    check("activations", |rng| {
        let n = dim(rng, 1, 12);
        let x = rand_tensor(rng, &[n]).mul_scalar(3.0).unwrap();
        (
            vec![x],
            Box::new(|t| {
                let x = &t[0];
                x.silu()?
                    .add(&x.gelu()?)?
                    .add(&x.sigmoid()?)?
                    .add(&x.softplus()?)?
                    .add(&x.exp()?)?
                    .add(&x.square()?)?
                    .add(&x.rsub_scalar(2.0)?)
            }),
        )
    });
}

#[test]
fn relu_away_from_kink() {
    check("relu", |rng| {
        let n = dim(rng, 1, 12);
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let m = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        (vec![Tensor::new(&[n], v).unwrap()], Box::new(|t| t[0].relu()))
    });
}

#[test]
fn matmul_batched_and_shared() {
    check("matmul", |rng| {
        let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
        let a = rand_tensor(rng, &[b, m, k]);
        let x = rand_tensor(rng, &[b, k, n]);
        let w = rand_tensor(rng, &[n, m]);
        (vec![a, x, w], Box::new(|t| t[0].matmul(&t[1])?.matmul(&t[2])))
    });
}

#[test]
fn linear_with_bias() {
    check("linear", |rng| {
        let (r, din, dout) = (dim(rng, 1, 5), dim(rng, 1, 6), dim(rng, 1, 6));
        let x = rand_tensor(rng, &[2, r, din]);
        let w = rand_tensor(rng, &[din, dout]);
        let b = rand_tensor(rng, &[dout]);
        (vec![x, w, b], Box::new(|t| t[0].linear(&t[1], Some(&t[2]))))
    });
}

#[test]
fn conv2d_ordinary_strided_grouped() {
    check("conv2d", |rng| {
        let groups = dim(rng, 1, 2);
        let cin = groups * dim(rng, 1, 2);
        let cout = groups * dim(rng, 1, 2);
        let k = dim(rng, 1, 3);
        let stride = dim(rng, 1, 2);
        let pad = dim(rng, 0, 1);
        let h = dim(rng, k.max(2), 6);
        let w = dim(rng, k.max(2), 6);
        let n = dim(rng, 1, 2);
        let x = rand_tensor(rng, &[n, cin, h, w]);
        let wt = rand_tensor(rng, &[cout, cin / groups, k, k]);
        let b = rand_tensor(rng, &[cout]);
        (
            vec![x, wt, b],
            Box::new(move |t| t[0].conv2d(&t[1], Some(&t[2]), stride, pad, groups)),
        )
    });
}

#[test]
fn conv2d_depthwise() {
    check("depthwise conv2d", |rng| {
        let c = dim(rng, 1, 4);
        let k = [3, 7][dim(rng, 0, 1)];
        let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
        let x = rand_tensor(rng, &[1, c, h, w]);
        let wt = rand_tensor(rng, &[c, 1, k, k]);
        (vec![x, wt], Box::new(move |t| t[0].conv2d(&t[1], None, 1, k / 2, c)))
    });
}

#[test]
fn causal_conv1d() {
    check("causal_conv1d", |rng| {
        let (n, l, c, k) = (dim(rng, 1, 2), dim(rng, 1, 6), dim(rng, 1, 4), dim(rng, 1, 4));
        let x = rand_tensor(rng, &[n, l, c]);
        let w = rand_tensor(rng, &[c, k]);
        let b = rand_tensor(rng, &[c]);
        (vec![x, w, b], Box::new(|t| t[0].causal_conv1d(&t[1], &t[2])))
    });
}

#[test]
fn pooling() {
    check("pools", |rng| {
        let (c, h, w) = (dim(rng, 1, 3), dim(rng, 2, 6), dim(rng, 2, 6));
        let n = dim(rng, 1, 2);
        let x = rand_tensor(rng, &[n, c, h, w]);
        let (oh, ow) = (dim(rng, 1, h), dim(rng, 1, w));
        (
            vec![x],
            Box::new(move |t| {
                let x = &t[0];
                let a = x.adaptive_avg_pool2d(oh, ow)?.sum()?;
                let b = x.global_avg_pool2d()?.sum()?;
                let c = x.global_max_pool2d()?.sum()?;
                let d = x.channel_mean()?.sum()?;
                let e = x.channel_max()?.sum()?;
                let f = x.max_pool2d(3, 2, 1)?.sum()?;
                a.add(&b)?.add(&c)?.add(&d)?.add(&e)?.add(&f)
            }),
        )
    });
}

#[test]
fn bilinear_upsample() {
    check("upsample_bilinear", |rng| {
        let scale = dim(rng, 2, 4);
        let (c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4));
        let x = rand_tensor(rng, &[1, c, h, w]);
        (vec![x], Box::new(move |t| t[0].upsample_bilinear(scale)))
    });
}

#[test]
fn softmax_and_layer_norm() {
    check("softmax/layer_norm", |rng| {
        let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 2, 5));
        let axis = dim(rng, 0, 2);
        let x = rand_tensor(rng, &[a, b, c]);
        let g = rand_tensor(rng, &[c]);
        let be = rand_tensor(rng, &[c]);
        (
            vec![x, g, be],
            Box::new(move |t| t[0].softmax(axis)?.add(&t[0].layer_norm(&t[1], &t[2])?)),
        )
    });
}

#[test]
fn shape_ops() {
    check("reshape/permute/concat/slice/gather/roll/expand", |rng| {
        let (a, b, c) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3));
        let x = rand_tensor(rng, &[a, b, c]);
        let y = rand_tensor(rng, &[a, 1, c]);
        let idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..b)).collect();
        let shift = rng.gen_range(-3..=3);
        (
            vec![x, y],
            Box::new(move |t| {
                let p = t[0].permute(&[2, 0, 1])?.reshape(&[c * a, b])?;
                let q = Tensor::concat(&[&t[0], &t[1]], 1)?.slice(1, 1, b)?;
                let r = t[0].gather_axis(1, &idx)?.roll(1, shift)?;
                let e = t[1].expand(&[a, b, c])?;
                p.sum()?
                    .add(&q.mul(&e)?.sum()?)?
                    .add(&r.square()?.sum()?)?
                    .add(&t[0].sum_axis(1)?.mean_axis(2)?.sum()?)
            }),
        )
    });
}
