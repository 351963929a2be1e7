//! Shared test oracles: naive f64 reference implementations of the network
//! ops and losses, and central finite-difference gradient checks against them.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use volseg_core::losses::{graph_loss, LossKind, PROB_CLAMP};
use volseg_core::nn::{Graph, Tensor};
use volseg_core::rng::{seeded, Rng as ChaRng};

pub type S5 = [usize; 5];

pub fn numel(s: S5) -> usize {
    s.iter().product()
}

/// Distinct values at least 0.01 apart, shuffled and kept away from 0, so
/// finite differences with h = 1e-3 never cross a ReLU kink or a max tie.
pub fn spaced_values(rng: &mut ChaRng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - (n / 2) as f64) * 0.01 + 0.005).collect();
    v.shuffle(rng);
    v
}

pub fn uniform(rng: &mut ChaRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn conv3d_naive(x: &[f64], xs: S5, w: &[f64], ws: S5, b: &[f64]) -> Vec<f64> {
    let [n, ci, d, h, wd] = xs;
    let [co, _, kd, kh, kw] = ws;
    let (pd, ph, pw) = ((kd - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let mut y = vec![0.0; n * co * d * h * wd];
    for bn in 0..n {
        for o in 0..co {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let (sz, sy, sx) = (
                                            z as isize + a as isize - pd as isize,
                                            yy as isize + bb as isize - ph as isize,
                                            xx as isize + cc as isize - pw as isize,
                                        );
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((bn * ci + c) * d + sz as usize) * h + sy as usize) * wd + sx as usize;
                                        let wi = (((o * ci + c) * kd + a) * kh + bb) * kw + cc;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        y[(((bn * co + o) * d + z) * h + yy) * wd + xx] = acc;
                    }
                }
            }
        }
    }
    y
}

pub fn maxpool_naive(x: &[f64], xs: S5, win: [usize; 3]) -> Vec<f64> {
    let [n, c, d, h, w] = xs;
    let (od, oh, ow) = (d / win[0], h / win[1], w / win[2]);
    let mut y = Vec::with_capacity(n * c * od * oh * ow);
    for nc in 0..n * c {
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..win[0] {
                        for b in 0..win[1] {
                            for cc in 0..win[2] {
                                let i = ((nc * d + z * win[0] + a) * h + yy * win[1] + b) * w + xx * win[2] + cc;
                                m = m.max(x[i]);
                            }
                        }
                    }
                    y.push(m);
                }
            }
        }
    }
    y
}

pub fn upsample_naive(x: &[f64], xs: S5, f: [usize; 3]) -> Vec<f64> {
    let [n, c, d, h, w] = xs;
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let mut y = Vec::with_capacity(n * c * od * oh * ow);
    for nc in 0..n * c {
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    y.push(x[((nc * d + z / f[0]) * h + yy / f[1]) * w + xx / f[2]]);
                }
            }
        }
    }
    y
}

pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dice_loss_naive(p: &[f64], g: &[f64], r: &[f64], eps: f64) -> f64 {
    let (mut pg, mut ps, mut gs) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if r[i] != 0.0 {
            pg += p[i] * g[i];
            ps += p[i];
            gs += g[i];
        }
    }
    1.0 - 2.0 * pg / (ps + gs + eps)
}

pub fn wbce_naive(p: &[f64], g: &[f64], r: &[f64]) -> f64 {
    let na = (0..p.len()).filter(|&i| r[i] != 0.0 && g[i] != 0.0).count() as f64;
    let nb = (0..p.len()).filter(|&i| r[i] != 0.0 && g[i] == 0.0).count() as f64;
    let wa = if na == 0.0 {
        0.0
    } else if nb == 0.0 {
        1.0
    } else {
        nb / na
    };
    let mut s = 0.0;
    for i in 0..p.len() {
        if r[i] == 0.0 {
            continue;
        }
        let q = p[i].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        s += if g[i] != 0.0 { wa * q.ln() } else { (1.0 - q).ln() };
    }
    -s / (na + nb)
}

/// Central differences of `f` at `x`; entries for which `skip(i)` are NaN.
pub fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = xp[i];
            xp[i] = x0 + h;
            let fp = f(&xp);
            xp[i] = x0 - h;
            let fm = f(&xp);
            xp[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖b‖₂, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

pub const H: f64 = 1e-3;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rand_shape(rng: &mut ChaRng, max_c: usize, max_sp: usize) -> S5 {
    [
        rng.gen_range(1..=2),
        rng.gen_range(1..=max_c),
        rng.gen_range(1..=max_sp),
        rng.gen_range(1..=max_sp),
        rng.gen_range(1..=max_sp),
    ]
}

/// Worst gradient error of one randomized trial of each op.
pub struct OpResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub worst: f64,
    pub trials: usize,
}

impl OpResult {
    pub fn pass(&self) -> bool {
        self.worst < self.tolerance
    }
}

pub fn conv_trial(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let xs = rand_shape(&mut rng, 2, 4);
    let k = [0, 0, 0].map(|_| if rng.gen_bool(0.5) { 3 } else { 1 });
    let co = rng.gen_range(1..=3);
    let ws = [co, xs[1], k[0], k[1], k[2]];
    let x = uniform(&mut rng, numel(xs), -1.0, 1.0);
    let w = uniform(&mut rng, numel(ws), -1.0, 1.0);
    let b = uniform(&mut rng, co, -1.0, 1.0);
    let ys = [xs[0], co, xs[2], xs[3], xs[4]];
    let r = uniform(&mut rng, numel(ys), -1.0, 1.0);

    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(xs, to_f32(&x)).unwrap(), true);
    let wv = g.leaf(Tensor::new(ws, to_f32(&w)).unwrap(), true);
    let bv = g.leaf(Tensor::new([co, 1, 1, 1, 1], to_f32(&b)).unwrap(), true);
    let y = g.conv3d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y).shape(), ys, "same padding keeps shape");
    g.backward_with(y, to_f32(&r)).unwrap();
    let ga = [xv, wv, bv].map(|v| to_f64(g.grad(v).unwrap()));

    let fx = |xx: &[f64]| dot(&conv3d_naive(xx, xs, &w, ws, &b), &r);
    let fw = |ww: &[f64]| dot(&conv3d_naive(&x, xs, ww, ws, &b), &r);
    let fb = |bb: &[f64]| dot(&conv3d_naive(&x, xs, &w, ws, bb), &r);
    let e = [
        rel_err(&ga[0], &fd_grad(&fx, &x, H)),
        rel_err(&ga[1], &fd_grad(&fw, &w, H)),
        rel_err(&ga[2], &fd_grad(&fb, &b, H)),
    ];
    // forward agrees with the oracle as well
    let fwd = rel_err(&to_f64(g.value(y).data()), &conv3d_naive(&x, xs, &w, ws, &b));
    e.into_iter().fold(fwd, f64::max)
}

pub fn maxpool_trial(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let win = [0, 0, 0].map(|_| rng.gen_range(1..=2));
    let mut xs = rand_shape(&mut rng, 2, 2);
    for a in 0..3 {
        xs[2 + a] *= win[a];
    }
    let x = spaced_values(&mut rng, numel(xs));
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(xs, to_f32(&x)).unwrap(), true);
    let y = g.maxpool3d(xv, win).unwrap();
    let r = uniform(&mut rng, g.value(y).numel(), -1.0, 1.0);
    g.backward_with(y, to_f32(&r)).unwrap();
    let ga = to_f64(g.grad(xv).unwrap());
    let f = |xx: &[f64]| dot(&maxpool_naive(xx, xs, win), &r);
    rel_err(&ga, &fd_grad(&f, &x, H))
}

pub fn upsample_trial(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let fac = [0, 0, 0].map(|_| rng.gen_range(1..=2));
    let xs = rand_shape(&mut rng, 2, 3);
    let x = uniform(&mut rng, numel(xs), -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(xs, to_f32(&x)).unwrap(), true);
    let y = g.upsample3d(xv, fac).unwrap();
    let r = uniform(&mut rng, g.value(y).numel(), -1.0, 1.0);
    g.backward_with(y, to_f32(&r)).unwrap();
    let ga = to_f64(g.grad(xv).unwrap());
    let f = |xx: &[f64]| dot(&upsample_naive(xx, xs, fac), &r);
    rel_err(&ga, &fd_grad(&f, &x, H))
}

pub fn relu_trial(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let xs = rand_shape(&mut rng, 3, 4);
    let x = spaced_values(&mut rng, numel(xs));
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(xs, to_f32(&x)).unwrap(), true);
    let y = g.relu(xv);
    let r = uniform(&mut rng, numel(xs), -1.0, 1.0);
    g.backward_with(y, to_f32(&r)).unwrap();
    let ga = to_f64(g.grad(xv).unwrap());
    let f = |xx: &[f64]| xx.iter().zip(&r).map(|(v, r)| v.max(0.0) * r).sum();
    rel_err(&ga, &fd_grad(&f, &x, H))
}

pub fn sigmoid_trial(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let xs = rand_shape(&mut rng, 3, 4);
    let x = uniform(&mut rng, numel(xs), -4.0, 4.0);
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(xs, to_f32(&x)).unwrap(), true);
    let y = g.sigmoid(xv);
    let r = uniform(&mut rng, numel(xs), -1.0, 1.0);
    g.backward_with(y, to_f32(&r)).unwrap();
    let ga = to_f64(g.grad(xv).unwrap());
    let f = |xx: &[f64]| xx.iter().zip(&r).map(|(v, r)| sigmoid64(*v) * r).sum();
    rel_err(&ga, &fd_grad(&f, &x, H))
}

pub fn concat_trial(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let sa = rand_shape(&mut rng, 3, 3);
    let sb = [sa[0], rng.gen_range(1..=3), sa[2], sa[3], sa[4]];
    let a = uniform(&mut rng, numel(sa), -1.0, 1.0);
    let b = uniform(&mut rng, numel(sb), -1.0, 1.0);
    let mut g = Graph::new();
    let av = g.leaf(Tensor::new(sa, to_f32(&a)).unwrap(), true);
    let bv = g.leaf(Tensor::new(sb, to_f32(&b)).unwrap(), true);
    let y = g.concat_channels(av, bv).unwrap();
    let r = uniform(&mut rng, g.value(y).numel(), -1.0, 1.0);
    g.backward_with(y, to_f32(&r)).unwrap();
    let n = sa[2] * sa[3] * sa[4];
    let cat = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = Vec::new();
        for bi in 0..sa[0] {
            out.extend_from_slice(&a[bi * sa[1] * n..(bi + 1) * sa[1] * n]);
            out.extend_from_slice(&b[bi * sb[1] * n..(bi + 1) * sb[1] * n]);
        }
        out
    };
    let fa = |aa: &[f64]| dot(&cat(aa, &b), &r);
    let fb = |bb: &[f64]| dot(&cat(&a, bb), &r);
    rel_err(&to_f64(g.grad(av).unwrap()), &fd_grad(&fa, &a, H))
        .max(rel_err(&to_f64(g.grad(bv).unwrap()), &fd_grad(&fb, &b, H)))
}

pub fn loss_trial(kind: LossKind, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let n = rng.gen_range(8..200);
    let p = uniform(&mut rng, n, 0.1, 0.9);
    let gt: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.2) as u8 as f64).collect();
    let mut roi: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.8) as u8 as f64).collect();
    roi[0] = 1.0;
    let eps = 1e-7;
    let mut g = Graph::new();
    let pv = g.leaf(Tensor::new([1, 1, 1, 1, n], to_f32(&p)).unwrap(), true);
    let l = graph_loss(&mut g, pv, &to_f32(&gt), &to_f32(&roi), kind, eps).unwrap();
    g.backward(l).unwrap();
    let ga = to_f64(g.grad(pv).unwrap());
    let f = |pp: &[f64]| match kind {
        LossKind::Dice => dice_loss_naive(pp, &gt, &roi, eps),
        LossKind::Wbce => wbce_naive(pp, &gt, &roi),
    };
    let value_err = ((g.value(l).item() as f64) - f(&p)).abs() / f(&p).abs().max(1e-12);
    rel_err(&ga, &fd_grad(&f, &p, H)).max(value_err.min(1.0) * 1e-3)
}

/// Runs `trials` randomized checks of every differentiable op.
pub fn gradcheck_all(trials: u64) -> Vec<OpResult> {
    let run = |name: &'static str, tolerance: f64, f: &dyn Fn(u64) -> f64| OpResult {
        name,
        tolerance,
        worst: (0..trials).map(|s| f(1000 + s)).fold(0.0, f64::max),
        trials: trials as usize,
    };
    vec![
        run("conv3d", 1e-3, &conv_trial),
        run("maxpool3d", 1e-3, &maxpool_trial),
        run("upsample3d", 1e-3, &upsample_trial),
        run("relu", 1e-4, &relu_trial),
        run("sigmoid", 1e-4, &sigmoid_trial),
        run("concat", 1e-4, &concat_trial),
        run("dice loss", 1e-3, &|s| loss_trial(LossKind::Dice, s)),
        run("wBCE loss", 1e-3, &|s| loss_trial(LossKind::Wbce, s)),
    ]
}
