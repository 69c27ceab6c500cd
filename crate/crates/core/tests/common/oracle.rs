//! Independent f64 re-implementation of the micro-model forward pass and the
//! multi-step loss. The f32 engine's rounding noise is larger than the spacing
//! of ReLU kinks at usable finite-difference step sizes, so finite
//! differences are taken here instead.

use std::collections::BTreeMap;

use derefl::imagecore::ImageRGB;
use derefl::losses::{multi_step_loss, FeatureExtractor, LossConfig, LossMode, IMAGENET_MEAN, IMAGENET_STD};
use derefl::networks::{init_model, ModelBundle, UNetConfig};
use derefl_autograd::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Weights = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Clone)]
pub struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Map { c: s[1], h: s[2], w: s[3], v: t.data().iter().map(|&x| f64::from(x)).collect() }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

pub fn weights_of(store: &ParamStore, prefix: &str) -> Weights {
    store
        .iter()
        .map(|p| {
            let t = p.tensor();
            let v = t.data().iter().map(|&x| f64::from(x)).collect();
            (format!("{prefix}{}", p.name()), (t.shape().to_vec(), v))
        })
        .collect()
}

pub fn conv(x: &Map, w: &(Vec<usize>, Vec<f64>), b: Option<&(Vec<usize>, Vec<f64>)>, pad: usize) -> Map {
    let (o, c, k) = (w.0[0], w.0[1], w.0[2]);
    assert_eq!(c, x.c);
    let mut v = vec![0.0; o * x.h * x.w];
    for oc in 0..o {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = b.map_or(0.0, |b| b.1[oc]);
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (y + ky, xx + kx);
                            if sy < pad || sx < pad || sy - pad >= x.h || sx - pad >= x.w {
                                continue;
                            }
                            acc += w.1[((oc * c + ic) * k + ky) * k + kx] * x.at(ic, sy - pad, sx - pad);
                        }
                    }
                }
                v[(oc * x.h + y) * x.w + xx] = acc;
            }
        }
    }
    Map { c: o, h: x.h, w: x.w, v }
}

pub fn conv_t(x: &Map, w: &(Vec<usize>, Vec<f64>), b: &(Vec<usize>, Vec<f64>)) -> Map {
    let o = w.0[1];
    let (h, wd) = (2 * x.h, 2 * x.w);
    let mut v = vec![0.0; o * h * wd];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..wd {
                let (iy, ix, dy, dx) = (y / 2, xx / 2, y % 2, xx % 2);
                let mut acc = b.1[oc];
                for ic in 0..x.c {
                    acc += x.at(ic, iy, ix) * w.1[((ic * o + oc) * 2 + dy) * 2 + dx];
                }
                v[(oc * h + y) * wd + xx] = acc;
            }
        }
    }
    Map { c: o, h, w: wd, v }
}

pub fn instance_norm(x: &Map) -> Map {
    let plane = x.h * x.w;
    let mut v = x.v.clone();
    for ch in v.chunks_mut(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / plane as f64;
        let is = 1.0 / (var + 1e-5).sqrt();
        ch.iter_mut().for_each(|a| *a = (*a - mean) * is);
    }
    Map { v, ..*x }
}

pub fn leaky(x: &Map, slope: f64) -> Map {
    Map { v: x.v.iter().map(|&a| if a > 0.0 { a } else { slope * a }).collect(), ..*x }
}

pub fn pool(x: &Map) -> Map {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut v = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| x.at(c, 2 * y + dy, 2 * xx + dx))
                    .fold(f64::NEG_INFINITY, f64::max);
                v.push(m);
            }
        }
    }
    Map { c: x.c, h, w, v }
}

pub fn cat(a: &Map, b: &Map) -> Map {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Map { c: a.c + b.c, h: a.h, w: a.w, v }
}

pub fn unet(ws: &Weights, p: &str, depth: usize, x: &Map) -> Map {
    // Level 0 has biased convs and no normalization.
    let block = |x: &Map, name: &str, slope: f64, norm: bool| {
        let layer = |x: &Map, c: &str| {
            let bias = ws.get(&format!("{p}{name}.{c}.bias"));
            let y = conv(x, &ws[&format!("{p}{name}.{c}.weight")], bias, 1);
            leaky(&if norm { instance_norm(&y) } else { y }, slope)
        };
        layer(&layer(x, "conv1"), "conv2")
    };
    let mut skips = Vec::new();
    let mut cur = x.clone();
    for l in 0..depth {
        if l > 0 {
            cur = pool(&cur);
        }
        cur = block(&cur, &format!("enc{l}"), 0.2, l > 0);
        skips.push(cur.clone());
    }
    let mut cur = skips.pop().unwrap();
    for l in (0..depth - 1).rev() {
        let up = conv_t(&cur, &ws[&format!("{p}up{l}.weight")], &ws[&format!("{p}up{l}.bias")]);
        cur = block(&cat(&skips[l], &up), &format!("dec{l}"), 0.0, l > 0);
    }
    let out = conv(&cur, &ws[&format!("{p}head.weight")], Some(&ws[&format!("{p}head.bias")]), 0);
    Map { v: out.v.iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect(), ..out }
}

/// Taps after ReLU of the first convolution of blocks 1 and 4.
pub fn vgg_taps(ws: &Weights, x: &Map) -> Vec<Map> {
    let plane = x.h * x.w;
    let v = x
        .v
        .iter()
        .enumerate()
        .map(|(i, a)| (a - f64::from(IMAGENET_MEAN[i / plane])) / f64::from(IMAGENET_STD[i / plane]))
        .collect();
    let mut cur = Map { v, ..*x };
    let mut taps = Vec::new();
    for idx in [0, 2, 4, 5, 7, 9, 10, 12, 14, 16, 18, 19] {
        if [4, 9, 18].contains(&idx) {
            cur = pool(&cur);
            continue;
        }
        let w = &ws[&format!("features.{idx}.weight")];
        cur = leaky(&conv(&cur, w, Some(&ws[&format!("features.{idx}.bias")]), 1), 0.0);
        if idx == 0 || idx == 19 {
            taps.push(cur.clone());
        }
    }
    taps
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn forward_diffs(m: &Map) -> (Vec<f64>, Vec<f64>) {
    let n = m.v.len();
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (y, x) = ((i / m.w) % m.h, i % m.w);
        if x + 1 < m.w {
            gx[i] = m.v[i + 1] - m.v[i];
        }
        if y + 1 < m.h {
            gy[i] = m.v[i + m.w] - m.v[i];
        }
    }
    (gx, gy)
}

pub fn oracle_loss(ws: &Weights, depth: usize, ambient: &Map, aux: &Map, t: &Map, r: &Map, steps: usize) -> f64 {
    let t_taps = vgg_taps(ws, t);
    let (tgx, tgy) = forward_diffs(t);
    let mut input = ambient.clone();
    let mut total = 0.0;
    for step in 0..steps {
        let r_hat = unet(ws, "rcnn.", depth, &cat(&input, aux));
        let t_hat = unet(ws, "tcnn.", depth, &cat(&cat(&input, &r_hat), aux));
        let r_target: Vec<f64> = if step == 0 {
            r.v.clone()
        } else {
            input.v.iter().zip(&t.v).map(|(a, b)| (a - b).clamp(0.0, 1.0)).collect()
        };
        let pixel = mse(&t_hat.v, &t.v) + mse(&r_hat.v, &r_target);
        let feature: f64 = vgg_taps(ws, &t_hat)
            .iter()
            .zip(&t_taps)
            .map(|(a, b)| a.v.iter().zip(&b.v).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.v.len() as f64)
            .sum();
        let (gx, gy) = forward_diffs(&t_hat);
        total += pixel + feature + mse(&gx, &tgx) + mse(&gy, &tgy);
        input = t_hat;
    }
    total
}

pub fn image(phase: f32) -> ImageRGB {
    ImageRGB::from_fn(16, 16, |y, x, c| {
        0.5 + 0.35 * ((y as f32 * 0.7 + x as f32 * 0.45 + c as f32 + phase).sin())
    })
}

/// Outcome of one directional-derivative comparison.
#[derive(Debug, Clone, Copy)]
pub struct DirectionalCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Compare the engine's backprop gradient of the `steps`-step loss on a
/// depth-3, width-4 model against central differences (eps 1e-6) of the f64
/// oracle along a random unit direction. Fails if the two forward passes
/// disagree beyond 1e-5 relative.
pub fn directional_check(seed: u64, steps: usize) -> Result<DirectionalCheck, String> {
    let depth = 3;
    let bundle: ModelBundle = init_model(
        UNetConfig::rcnn().with_size(depth, 4),
        UNetConfig::tcnn().with_size(depth, 4),
        seed,
    )
    .unwrap();
    let ext = FeatureExtractor::test_default();
    let t = image(0.0).to_tensor();
    let r = ImageRGB::from_fn(16, 16, |y, x, _| if (x + 2 * y) % 5 == 0 { 0.25 } else { 0.05 }).to_tensor();
    let ambient = Tensor::new(
        t.data().iter().zip(r.data()).map(|(a, b)| (0.8 * a + b).min(1.0)).collect(),
        t.shape(),
    )
    .unwrap();
    let aux = Tensor::new((0..256).map(|i| ((i / 16 + i % 3) % 4) as f32 / 3.0).collect(), &[1, 1, 16, 16]).unwrap();

    let out = multi_step_loss(
        &bundle, &ambient, &aux, &t, Some(&r), LossMode::MultiStep(steps), &ext, &LossConfig::default(),
    )
    .unwrap();
    let grads = out.total.backward().unwrap();

    let mut ws = weights_of(&bundle.rcnn.params().clone(), "rcnn.");
    ws.extend(weights_of(&bundle.tcnn.params().clone(), "tcnn."));
    let net_keys: Vec<String> = ws.keys().cloned().collect();
    ws.extend(weights_of(ext.params(), ""));
    let mut analytic_grad: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (prefix, net) in [("rcnn.", &bundle.rcnn), ("tcnn.", &bundle.tcnn)] {
        for (p, g) in net.params().iter().zip(net.params().collect_grads(&grads)) {
            analytic_grad.insert(format!("{prefix}{}", p.name()), g);
        }
    }

    let maps = |x: &Tensor| Map::from_tensor(x);
    let (am, xm, tm, rm) = (maps(&ambient), maps(&aux), maps(&t), maps(&r));
    let base = oracle_loss(&ws, depth, &am, &xm, &tm, &rm, steps);
    if (base - out.breakdown.total).abs() > 1e-5 * base {
        return Err(format!("oracle forward {base} vs engine {}", out.breakdown.total));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1);
    let mut dir: BTreeMap<String, Vec<f64>> = net_keys
        .iter()
        .map(|k| (k.clone(), (0..ws[k].1.len()).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let norm = dir.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
    dir.values_mut().flatten().for_each(|v| *v /= norm);

    let analytic: f64 = net_keys
        .iter()
        .map(|k| {
            analytic_grad[k].iter().zip(&dir[k]).map(|(g, d)| f64::from(*g) * d).sum::<f64>()
        })
        .sum();

    let eps = 1e-6;
    let shifted = |sign: f64| {
        let mut w = ws.clone();
        for k in &net_keys {
            let entry = w.get_mut(k).unwrap();
            for (v, d) in entry.1.iter_mut().zip(&dir[k]) {
                *v += sign * eps * d;
            }
        }
        oracle_loss(&w, depth, &am, &xm, &tm, &rm, steps)
    };
    let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
    let rel = (numeric - analytic).abs() / analytic.abs();
    Ok(DirectionalCheck { analytic, numeric, rel })
}
