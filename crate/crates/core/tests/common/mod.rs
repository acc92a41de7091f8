//! Independent oracles and finite-difference harnesses shared by the integration suites and the
//! acceptance runner. Nothing here calls the code path it checks except through its public API.
#![allow(dead_code)]

use fs2ffpe_autograd::check::{directional_fd, rel_err};
use fs2ffpe_autograd::{Tape, Tensor, Var};
use fs2ffpe_core::config::GanMode;
use fs2ffpe_core::error::Result;
use fs2ffpe_core::models::{
    Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, OutputKind, ParamSet, ProjectionHeads,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds a scalar from bound inputs.
pub type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------------------------
// Finite differences

/// Worst relative error between reverse-mode and central-difference directional derivatives of
/// `<f(inputs), u>`, probing each input group along `probes` random directions.
///
/// `f` receives the tape and one `Var` per input tensor; `groups` partitions input indices.
pub fn fd_check(inputs: &[Tensor<f64>], groups: &[Vec<usize>], f: &Graph<'_>, probes: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let out_shape = {
        let mut t = Tape::no_grad();
        let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &v).expect("forward");
        t.value(y).shape().to_vec()
    };
    let u = random(&out_shape, -1.0, 1.0, &mut r);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vars).expect("forward");
    let uv = tape.constant(u.clone());
    let l = tape.dot(y, uv).expect("dot");
    let grads = tape.backward(l).expect("backward");
    let g: Vec<Tensor<f64>> = vars.iter().zip(inputs).map(|(&v, x)| grads.get_or_zeros(v, x)).collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::no_grad();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &v).expect("forward");
        dot(t.value(y), &u)
    };

    let mut worst = 0.0f64;
    for group in groups {
        for _ in 0..probes {
            let dirs: Vec<Tensor<f64>> = group.iter().map(|&i| random(inputs[i].shape(), -1.0, 1.0, &mut r)).collect();
            let analytic: f64 = group.iter().zip(&dirs).map(|(&i, d)| dot(&g[i], d)).sum();
            // flatten the group into one vector for the shared FD helper
            let x0: Vec<f64> = group.iter().flat_map(|&i| inputs[i].data().to_vec()).collect();
            let d0: Vec<f64> = dirs.iter().flat_map(|d| d.data().to_vec()).collect();
            let mut fx = |flat: &[f64]| {
                let mut xs = inputs.to_vec();
                let mut off = 0;
                for &i in group {
                    let n = xs[i].data().len();
                    xs[i] = Tensor::from_vec(inputs[i].shape(), flat[off..off + n].to_vec()).expect("shape");
                    off += n;
                }
                eval(&xs)
            };
            let numeric = directional_fd(&mut fx, &x0, &d0, 1e-6);
            worst = worst.max(rel_err(analytic, numeric, 1e-8));
        }
    }
    worst
}

/// Parameters plus input of a network as one input list: params first, input last.
fn with_input(params: &ParamSet<f64>, x: Tensor<f64>) -> (Vec<Tensor<f64>>, Vec<Vec<usize>>) {
    let mut v = params.tensors().to_vec();
    let np = v.len();
    v.push(x);
    (v, vec![(0..np).collect(), vec![np]])
}

pub const GRAD_SIDE: usize = 8;

/// Worst FD error of a generator (all parameters jointly, then the input) on `[3, 8, 8]`.
pub fn generator_fd(output: OutputKind, seed: u64) -> f64 {
    let spec = GeneratorSpec { base_width: 3, n_resblocks: 1, downsample_levels: 1, output };
    let mut r = rng(seed);
    let g = Generator::<f64>::new(spec, 0.3, &mut r).expect("generator");
    let (lo, hi) = match output {
        OutputKind::Tanh => (-0.8, 0.8),
        OutputKind::Linear => (-1.5, 1.5),
    };
    let x = random(&[3, GRAD_SIDE, GRAD_SIDE], lo, hi, &mut r);
    let (inputs, groups) = with_input(&g.params, x);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let np = v.len() - 1;
        let bound = fs2ffpe_core::models::Bound::from_vars(v[..np].to_vec());
        Ok(g.forward(t, &bound, v[np], &[])?.0)
    };
    fd_check(&inputs, &groups, &f, 3, seed ^ 0xF00D)
}

/// Worst FD error of a one-layer PatchGAN on `[3, 8, 8]`.
pub fn discriminator_fd(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = Discriminator::<f64>::new(DiscriminatorSpec { base_width: 4, n_layers: 1 }, 0.3, &mut r).expect("disc");
    let x = random(&[3, GRAD_SIDE, GRAD_SIDE], -1.0, 1.0, &mut r);
    let (inputs, groups) = with_input(&d.params, x);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let np = v.len() - 1;
        let bound = fs2ffpe_core::models::Bound::from_vars(v[..np].to_vec());
        d.forward(t, &bound, v[np])
    };
    fd_check(&inputs, &groups, &f, 3, seed ^ 0xD15C)
}

/// Worst FD errors per loss on `[3, 8, 8]` images (or the matching logit / feature shapes).
pub fn loss_fd(seed: u64) -> Vec<(&'static str, f64)> {
    use fs2ffpe_core::losses::*;
    let mut r = rng(seed);
    let img = |r: &mut ChaCha8Rng| random(&[3, GRAD_SIDE, GRAD_SIDE], -1.0, 1.0, r);
    let mut out = Vec::new();

    // crcm: the teacher is detached, so only the 10x argument is probed
    let (a, b) = (img(&mut r), img(&mut r));
    let f = |t: &mut Tape<f64>, v: &[Var]| crcm_loss_var(t, v[0], v[1], GRAD_SIDE / 2);
    out.push(("crcm", fd_check(&[a, b], &[vec![1]], &f, 4, seed + 1)));

    let (a, b) = (img(&mut r), img(&mut r));
    let f = |t: &mut Tape<f64>, v: &[Var]| wdgm_loss_var(t, v[0], v[1]);
    out.push(("wdgm", fd_check(&[a, b], &[vec![0], vec![1]], &f, 4, seed + 2)));

    for (name, mode) in [("gan_lsgan", GanMode::Lsgan), ("gan_bce", GanMode::Bce)] {
        let (a, b) = (random(&[1, 2, 2], -2.0, 2.0, &mut r), random(&[1, 2, 2], -2.0, 2.0, &mut r));
        let fd_d = |t: &mut Tape<f64>, v: &[Var]| gan_d_loss_var(t, v[0], v[1], mode);
        let fd_g = |t: &mut Tape<f64>, v: &[Var]| gan_g_loss_var(t, v[1], mode);
        let e1 = fd_check(&[a.clone(), b.clone()], &[vec![0], vec![1]], &fd_d, 4, seed + 3);
        let e2 = fd_check(&[a, b], &[vec![1]], &fd_g, 4, seed + 4);
        out.push((name, e1.max(e2)));
    }

    // patchNCE: keys are detached, so only the output feature maps are probed
    let gspec = GeneratorSpec { base_width: 4, n_resblocks: 1, downsample_levels: 1, output: OutputKind::Tanh };
    let heads = ProjectionHeads::<f64>::new(&gspec, &[0, 1], 6, 0.5, &mut r).expect("heads");
    let src: Vec<Tensor<f64>> =
        [3usize, 4].iter().map(|&c| random(&[c, GRAD_SIDE, GRAD_SIDE], -1.0, 1.0, &mut r)).collect();
    let outs: Vec<Tensor<f64>> =
        [3usize, 4].iter().map(|&c| random(&[c, GRAD_SIDE, GRAD_SIDE], -1.0, 1.0, &mut r)).collect();
    let locs: Vec<Vec<usize>> = (0..2).map(|_| sample_locations(&mut r, GRAD_SIDE * GRAD_SIDE, 10).unwrap()).collect();
    let nh = heads.params.len();
    let mut inputs = heads.params.tensors().to_vec();
    inputs.extend(src.iter().cloned());
    inputs.extend(outs.iter().cloned());
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let hp = fs2ffpe_core::models::Bound::from_vars(v[..nh].to_vec());
        let s: Vec<Var> = v[nh..nh + 2].to_vec();
        let o: Vec<Var> = v[nh + 2..].to_vec();
        patchnce_loss_var(t, &heads, &hp, &s, &o, &locs, 0.07)
    };
    out.push(("patchnce_features", fd_check(&inputs, &[vec![nh + 2], vec![nh + 3]], &f, 4, seed + 5)));

    let (q, k) = (random(&[12, 6], -1.0, 1.0, &mut r), random(&[12, 6], -1.0, 1.0, &mut r));
    let f = |t: &mut Tape<f64>, v: &[Var]| info_nce_var(t, v[0], v[1], 0.07);
    out.push(("info_nce", fd_check(&[q, k], &[vec![0], vec![1]], &f, 4, seed + 6)));
    out
}

// ---------------------------------------------------------------------------------------------
// Loss oracles: plain loops over raw slices

fn px(t: &Tensor<f64>, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[(c * s[1] + y) * s[2] + x]
}

/// `mean |crop_c(a) - box2(b)|` for `[3, 2c, 2c]` images.
pub fn crcm_oracle(out5: &Tensor<f64>, out10: &Tensor<f64>) -> f64 {
    let n = out10.shape()[1];
    let c = n / 2;
    let off = (n - c) / 2;
    let mut s = 0.0;
    for ch in 0..3 {
        for y in 0..c {
            for x in 0..c {
                let teacher = px(out5, ch, off + y, off + x);
                let student = 0.25
                    * (px(out10, ch, 2 * y, 2 * x)
                        + px(out10, ch, 2 * y + 1, 2 * x)
                        + px(out10, ch, 2 * y, 2 * x + 1)
                        + px(out10, ch, 2 * y + 1, 2 * x + 1));
                s += (teacher - student).abs();
            }
        }
    }
    s / (3 * c * c) as f64
}

pub fn wdgm_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(l_D, l_G)` in closed form.
pub fn gan_oracle(real: &[f64], fake: &[f64], mode: GanMode) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    match mode {
        GanMode::Lsgan => (
            0.5 * mean(real, &|x| (x - 1.0) * (x - 1.0)) + 0.5 * mean(fake, &|x| x * x),
            mean(fake, &|x| (x - 1.0) * (x - 1.0)),
        ),
        // -log sigmoid(x) = softplus(-x), -log(1 - sigmoid(x)) = softplus(x)
        GanMode::Bce => {
            (0.5 * mean(real, &|x| softplus(-x)) + 0.5 * mean(fake, &softplus), mean(fake, &|x| softplus(-x)))
        }
    }
}

/// Two-layer MLP + L2 normalisation on row vectors, straight from the parameter layout.
fn project_rows(
    feats: &[Vec<f64>],
    w1: &Tensor<f64>,
    b1: &Tensor<f64>,
    w2: &Tensor<f64>,
    b2: &Tensor<f64>,
) -> Vec<Vec<f64>> {
    let (d, c) = (w1.shape()[0], w1.shape()[1]);
    feats
        .iter()
        .map(|f| {
            let h: Vec<f64> = (0..d)
                .map(|i| (b1.data()[i] + (0..c).map(|j| w1.data()[i * c + j] * f[j]).sum::<f64>()).max(0.0))
                .collect();
            let y: Vec<f64> =
                (0..d).map(|i| b2.data()[i] + (0..d).map(|j| w2.data()[i * d + j] * h[j]).sum::<f64>()).collect();
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-7;
            y.iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Mean cross-entropy of each row of `q k^T / tau` against its diagonal entry.
pub fn info_nce_oracle(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> f64 {
    let n = q.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / n as f64
}

/// patchNCE over layers with given flat locations.
pub fn patchnce_oracle(
    heads: &ProjectionHeads<f64>,
    src: &[Tensor<f64>],
    out: &[Tensor<f64>],
    locations: &[Vec<usize>],
    tau: f64,
) -> f64 {
    let p = heads.params.tensors();
    let gather = |t: &Tensor<f64>, locs: &[usize]| -> Vec<Vec<f64>> {
        let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
        locs.iter().map(|&l| (0..c).map(|ch| t.data()[ch * hw + l]).collect()).collect()
    };
    let mut s = 0.0;
    for k in 0..src.len() {
        let w = &p[4 * k..4 * k + 4];
        let q = project_rows(&gather(&out[k], &locations[k]), &w[0], &w[1], &w[2], &w[3]);
        let key = project_rows(&gather(&src[k], &locations[k]), &w[0], &w[1], &w[2], &w[3]);
        s += info_nce_oracle(&q, &key, tau);
    }
    s / src.len() as f64
}

// ---------------------------------------------------------------------------------------------
// Metric oracles

/// Unbiased MMD^2 with `k(x, y) = (x.y/d + 1)^3`, times 100, by explicit double loops.
pub fn mmd_oracle_x100(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len() as f64;
    let k = |x: &[f64], y: &[f64]| (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3);
    let (m, n) = (a.len() as f64, b.len() as f64);
    let mut kxx = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            if i != j {
                kxx += k(&a[i], &a[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            if i != j {
                kyy += k(&b[i], &b[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for x in a {
        for y in b {
            kxy += k(x, y);
        }
    }
    100.0 * (kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
}

/// Frechet distance of Gaussians with covariances sharing the eigenbasis `q`:
/// `|mu_a - mu_b|^2 + sum_i (l_a + l_b - 2 sqrt(l_a l_b))`.
pub fn commuting_fid_oracle(mu_a: &[f64], mu_b: &[f64], la: &[f64], lb: &[f64]) -> f64 {
    let m: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    m + la.iter().zip(lb).map(|(a, b)| a + b - 2.0 * (a * b).sqrt()).sum::<f64>()
}

/// 1-D earth mover's distance between two 256-bin histograms, in units of the full range.
pub fn emd_256(a: &[u64; 256], b: &[u64; 256]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (mut ca, mut cb, mut s) = (0.0, 0.0, 0.0);
    for i in 0..256 {
        ca += a[i] as f64 / na;
        cb += b[i] as f64 / nb;
        s += (ca - cb).abs();
    }
    s / 255.0
}

// ---------------------------------------------------------------------------------------------
// Instance sweeps: worst `|got - want| / max(1, |want|)` over random instances

use fs2ffpe_core::image::{ImageTensor, Magnification, ValueRange};
use fs2ffpe_core::models::FeatureStack;

fn scaled_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn unbounded(t: Tensor<f64>) -> ImageTensor<f64> {
    ImageTensor::with_range(t, ValueRange::Unbounded, Magnification::X10, "x").expect("image")
}

pub fn crcm_sweep(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..instances)
        .map(|i| {
            let n = [8, 12, 16, 24][i % 4];
            let (a, b) = (random(&[3, n, n], -1.0, 1.0, &mut r), random(&[3, n, n], -1.0, 1.0, &mut r));
            let got = fs2ffpe_core::losses::crcm_loss(&unbounded(a.clone()), &unbounded(b.clone())).unwrap();
            scaled_err(got, crcm_oracle(&a, &b))
        })
        .fold(0.0, f64::max)
}

pub fn wdgm_sweep(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..instances)
        .map(|i| {
            let n = 8 + 2 * (i % 5);
            let (a, b) = (random(&[3, n, n], -2.0, 2.0, &mut r), random(&[3, n, n], -2.0, 2.0, &mut r));
            let got = fs2ffpe_core::losses::wdgm_loss(&unbounded(a.clone()), &unbounded(b.clone())).unwrap();
            scaled_err(got, wdgm_oracle(&a, &b))
        })
        .fold(0.0, f64::max)
}

/// Both GAN modes, both the D and G objectives.
pub fn gan_sweep(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let side = 1 + i % 6;
        let real = random(&[1, side, side], -4.0, 4.0, &mut r);
        let fake = random(&[1, side, side], -4.0, 4.0, &mut r);
        for mode in [GanMode::Lsgan, GanMode::Bce] {
            let (d, g) = fs2ffpe_core::losses::gan_losses(&real, &fake, mode).unwrap();
            let (od, og) = gan_oracle(real.data(), fake.data(), mode);
            worst = worst.max(scaled_err(d, od)).max(scaled_err(g, og));
        }
    }
    worst
}

pub fn info_nce_sweep(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..instances)
        .map(|i| {
            let (n, d) = (2 + i % 20, 1 + i % 7);
            let q = random(&[n, d], -1.0, 1.0, &mut r);
            let k = random(&[n, d], -1.0, 1.0, &mut r);
            let rows = |t: &Tensor<f64>| t.data().chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>();
            let tau = r.gen_range(0.05..1.0);
            let got = fs2ffpe_core::losses::info_nce(&q, &k, tau).unwrap();
            scaled_err(got, info_nce_oracle(&rows(&q), &rows(&k), tau))
        })
        .fold(0.0, f64::max)
}

/// `patchnce_loss` with its own location sampling, replayed for the oracle from a cloned stream.
pub fn patchnce_sweep(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let spec =
            GeneratorSpec { base_width: 2 + i % 3, n_resblocks: 1, downsample_levels: 2, output: OutputKind::Tanh };
        let ids = vec![0, 1, 2];
        let heads = ProjectionHeads::<f64>::new(&spec, &ids, 4 + i % 5, 0.4, &mut r).unwrap();
        let sides = [10usize, 8, 4];
        let maps = |r: &mut ChaCha8Rng| -> Vec<Tensor<f64>> {
            ids.iter()
                .zip(sides)
                .map(|(&id, s)| random(&[spec.tap_channels(id).unwrap(), s, s], -1.0, 1.0, r))
                .collect()
        };
        let (src, out) = (maps(&mut r), maps(&mut r));
        let n = 3 + i % 10;
        let tau = 0.07;
        let mut replay = r.clone();
        let locs: Vec<Vec<usize>> =
            sides.iter().map(|s| fs2ffpe_core::losses::sample_locations(&mut replay, s * s, n).unwrap()).collect();
        let got = fs2ffpe_core::losses::patchnce_loss(
            &heads,
            &FeatureStack { layer_ids: ids.clone(), maps: src.clone() },
            &FeatureStack { layer_ids: ids.clone(), maps: out.clone() },
            n,
            tau,
            &mut r,
        )
        .unwrap();
        worst = worst.max(scaled_err(got, patchnce_oracle(&heads, &src, &out, &locs, tau)));
    }
    worst
}

/// Shared-eigenbasis Gaussian pairs of dimension 1..8; also returns the worst asymmetry.
pub fn fid_sweep(instances: usize, seed: u64) -> (f64, f64) {
    use fs2ffpe_core::eval::{fid, FeatureSetStats};
    use nalgebra::{DMatrix, DVector};
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let stats = |mean: Vec<f64>, cov: DMatrix<f64>| FeatureSetStats {
        mean: DVector::from_vec(mean),
        cov,
        n: 100,
        extractor_id: "t".into(),
    };
    let (mut worst, mut asym) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let d = r.gen_range(1..8);
        let q = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut r)).qr().q();
        let la: Vec<f64> = (0..d).map(|_| r.gen_range(0.05..3.0)).collect();
        let lb: Vec<f64> = (0..d).map(|_| r.gen_range(0.05..3.0)).collect();
        let cov = |l: &[f64]| &q * DMatrix::from_diagonal(&DVector::from_vec(l.to_vec())) * q.transpose();
        let ma: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mb: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (a, b) = (stats(ma.clone(), cov(&la)), stats(mb.clone(), cov(&lb)));
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        worst = worst.max((ab - commuting_fid_oracle(&ma, &mb, &la, &lb)).abs());
        asym = asym.max((ab - ba).abs());
    }
    (worst, asym)
}

pub fn gaussian_set(n: usize, d: usize, shift: f64, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *r);
                    shift + z
                })
                .collect()
        })
        .collect()
}

/// `kid_x100` with one subset holding every sample (order-free) against the double-loop MMD.
pub fn kid_sweep(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..instances)
        .map(|i| {
            let n = r.gen_range(2..=200);
            let d = r.gen_range(1..16);
            let a = gaussian_set(n, d, 0.0, &mut r);
            let shift = r.gen_range(-1.0..1.0);
            let b = gaussian_set(n, d, shift, &mut r);
            let got = fs2ffpe_core::eval::kid_x100(&a, &b, n, 1, i as u64).unwrap();
            let want = mmd_oracle_x100(&a, &b);
            (got - want).abs() / want.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}
