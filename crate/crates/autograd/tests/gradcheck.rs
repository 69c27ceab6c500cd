//! Central finite differences against the analytic backward rule of every op.

use derefl_autograd::{Tensor, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Checks d/dx sum(f(x) * proj) for each input slot of `f`.
fn check<F>(shapes: &[&[usize]], f: F, tol: f32)
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values: Vec<Vec<f32>> = shapes
        .iter()
        .map(|s| random(&mut rng, s.iter().product()))
        .collect();
    let vars: Vec<Tensor> = values
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::variable(v.clone(), s).unwrap())
        .collect();
    let out = f(&vars).unwrap();
    let proj = Tensor::new(random(&mut rng, out.elem_count()), out.shape()).unwrap();
    let scalar = |inputs: &[Tensor]| -> f64 {
        let o = f(inputs).unwrap();
        o.data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };
    let loss = out.mul(&proj).unwrap().sum();
    let grads = loss.backward().unwrap();
    let eps = 1e-2f32;
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("gradient reaches every input");
        for i in 0..values[slot].len() {
            let eval = |delta: f32| {
                let inputs: Vec<Tensor> = values
                    .iter()
                    .zip(shapes)
                    .enumerate()
                    .map(|(j, (v, s))| {
                        let mut v = v.clone();
                        if j == slot {
                            v[i] += delta;
                        }
                        Tensor::new(v, s).unwrap()
                    })
                    .collect();
                scalar(&inputs)
            };
            let numeric = ((eval(eps) - eval(-eps)) / (2.0 * eps as f64)) as f32;
            let a = analytic[i];
            assert!(
                (a - numeric).abs() <= tol * (1.0 + numeric.abs()),
                "input {slot} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    check(&[&[2, 3], &[2, 3]], |t| t[0].add(&t[1]), 1e-3);
    check(&[&[2, 3], &[2, 3]], |t| t[0].sub(&t[1]), 1e-3);
    check(&[&[2, 3], &[2, 3]], |t| t[0].mul(&t[1]), 1e-3);
    check(&[&[4]], |t| Ok(t[0].affine(-2.5, 0.3)), 1e-3);
    check(&[&[1, 2, 2, 2]], |t| t[0].channel_affine(&[2.0, -0.5], &[0.1, 0.2]), 1e-3);
    check(&[&[7]], |t| Ok(t[0].sigmoid()), 1e-3);
    check(&[&[2, 5]], |t| Ok(t[0].leaky_relu(0.2).mul(&t[0])?), 5e-3);
}

#[test]
fn reductions_and_losses() {
    check(&[&[3, 4]], |t| Ok(t[0].sum()), 1e-3);
    check(&[&[3, 4]], |t| Ok(t[0].mean()), 1e-3);
    check(&[&[3, 4], &[3, 4]], |t| t[0].mse(&t[1]), 1e-3);
    check(&[&[3, 4], &[3, 4]], |t| t[0].l1(&t[1]), 1e-3);
    check(&[&[2, 6]], |t| t[0].bce_with_logits(1.0), 1e-3);
    check(&[&[2, 6]], |t| t[0].bce_with_logits(0.0), 1e-3);
}

#[test]
fn conv2d_padded_and_strided() {
    check(
        &[&[2, 3, 5, 6], &[4, 3, 3, 3], &[4]],
        |t| t[0].conv2d(&t[1], Some(&t[2]), 1, 1),
        2e-3,
    );
    check(
        &[&[1, 2, 8, 7], &[3, 2, 4, 4], &[3]],
        |t| t[0].conv2d(&t[1], Some(&t[2]), 2, 1),
        2e-3,
    );
    check(&[&[1, 2, 4, 4], &[3, 2, 1, 1]], |t| t[0].conv2d(&t[1], None, 1, 0), 2e-3);
}

#[test]
fn transposed_conv() {
    check(
        &[&[2, 3, 3, 2], &[3, 4, 2, 2], &[4]],
        |t| t[0].conv_transpose2x2(&t[1], Some(&t[2])),
        2e-3,
    );
}

#[test]
fn pooling_and_norm() {
    check(&[&[1, 2, 4, 6]], |t| t[0].max_pool2x2(), 1e-3);
    check(&[&[2, 3, 3, 4]], |t| t[0].instance_norm(1e-5), 5e-3);
}

#[test]
fn spatial_remaps() {
    check(&[&[1, 2, 3, 4]], |t| t[0].pad_reflect(2, 4, 3, 1), 1e-3);
    check(&[&[1, 2, 5, 4]], |t| t[0].crop(1, 1, 3, 2), 1e-3);
    check(&[&[2, 1, 3, 4]], |t| t[0].flip_horizontal(), 1e-3);
    check(&[&[2, 1, 3, 4], &[2, 2, 3, 4]], |t| Tensor::cat_channels(&[&t[0], &t[1]]), 1e-3);
    check(&[&[2, 4, 3, 3]], |t| t[0].narrow_channels(1, 2), 1e-3);
    check(&[&[1, 2, 3, 5]], |t| t[0].diff_x(), 1e-3);
    check(&[&[1, 2, 4, 3]], |t| t[0].diff_y(), 1e-3);
    check(&[&[2, 6]], |t| t[0].reshape(&[3, 4]), 1e-3);
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x*x + x, dy/dx = 2x + 1
    let x = Tensor::variable(vec![0.5, -2.0], &[2]).unwrap();
    let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
    let g = y.backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[2.0, -3.0]);
}

#[test]
fn detach_stops_gradient() {
    let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.detach().mul(&x).unwrap().sum();
    let g = y.backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w, o, k, s, p) = (2, 6, 5, 3, 3, 2, 1);
    let x = random(&mut rng, c * h * w);
    let wt = random(&mut rng, o * c * k * k);
    let xt = Tensor::new(x.clone(), &[1, c, h, w]).unwrap();
    let wtt = Tensor::new(wt.clone(), &[o, c, k, k]).unwrap();
    let y = xt.conv2d(&wtt, None, s, p).unwrap();
    let (_, _, oh, ow) = y.dims4().unwrap();
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (oy * s + ki) as isize - p as isize;
                            let ix = (ox * s + kj) as isize - p as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x[(ci * h + iy as usize) * w + ix as usize] as f64
                                    * wt[((oc * c + ci) * k + ki) * k + kj] as f64;
                            }
                        }
                    }
                }
                let got = y.data()[(oc * oh + oy) * ow + ox];
                assert!((got as f64 - acc).abs() < 1e-5);
            }
        }
    }
}
