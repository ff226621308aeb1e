//! Central-difference checks of every differentiable op, the residual blocks
//! and the whole desk model. Shared by the gradient tests and the acceptance
//! run.

#![allow(dead_code)]

use std::cell::RefCell;

use mmtvae_core::autograd::{Graph, Var};
use mmtvae_core::data::Label;
use mmtvae_core::gradcheck::{GradCheck, GradReport};
use mmtvae_core::loss::{
    bce_loss, kl_loss, squared_distance, ssim_loss, triplet_loss, vae_loss, LossConfig, SsimConfig, Triplet,
    TripletConfig,
};
use mmtvae_core::model::{reparameterize, sample_eps, ModelConfig, TripletVae};
use mmtvae_core::nn::{Mode, ParamKind, ParamStore, ResidualDownBlock, ResidualUpBlock, Session};
use mmtvae_core::tensor::Result;
use mmtvae_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub probes: usize,
    pub worst: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst < TOLERANCE
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradReport>;

fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, to keep clear of piecewise kinks.
fn off_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random-weighted sum, so every output coordinate carries its own weight.
fn readout(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let r = g.constant(weights.clone());
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check<F>(inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck::default().run(&inputs, rng, f)
}

fn elementwise(rng: &mut ChaCha8Rng, op: fn(&mut Graph, Var, Var) -> Result<Var>, b_shape: &[usize]) -> Result<GradReport> {
    let a = uniform(&[2, 3, 4], -1.0, 1.0, rng);
    let b = uniform(b_shape, -1.0, 1.0, rng);
    let r = uniform(&[2, 3, 4], -1.0, 1.0, rng);
    check(vec![a, b], rng, move |g, v| {
        let y = op(g, v[0], v[1])?;
        readout(g, y, &r)
    })
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, op: fn(&mut Graph, Var) -> Result<Var>) -> Result<GradReport> {
    let r = uniform(x.shape(), -1.0, 1.0, rng);
    check(vec![x], rng, move |g, v| {
        let y = op(g, v[0])?;
        readout(g, y, &r)
    })
}

fn conv_case(rng: &mut ChaCha8Rng, x: [usize; 4], w: [usize; 4], bias: bool, stride: usize, pad: usize) -> Result<GradReport> {
    let xs = uniform(&x, -1.0, 1.0, rng);
    let ws = uniform(&w, -0.5, 0.5, rng);
    let oh = (x[2] + 2 * pad - w[2]) / stride + 1;
    let ow = (x[3] + 2 * pad - w[3]) / stride + 1;
    let r = uniform(&[x[0], w[0], oh, ow], -1.0, 1.0, rng);
    let mut inputs = vec![xs, ws];
    if bias {
        inputs.push(uniform(&[w[0]], -0.5, 0.5, rng));
    }
    check(inputs, rng, move |g, v| {
        let y = g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)?;
        readout(g, y, &r)
    })
}

fn batch_norm_case(rng: &mut ChaCha8Rng, batch_stats: bool) -> Result<GradReport> {
    let x = uniform(&[3, 2, 3, 3], -1.0, 1.0, rng);
    let gamma = uniform(&[2], 0.5, 1.5, rng);
    let beta = uniform(&[2], -0.5, 0.5, rng);
    let r = uniform(&[3, 2, 3, 3], -1.0, 1.0, rng);
    let mean = vec![rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let var = vec![rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
    check(vec![x, gamma, beta], rng, move |g, v| {
        let stats = if batch_stats { None } else { Some((&mean[..], &var[..])) };
        let (y, _, _) = g.batch_norm(v[0], v[1], v[2], stats, 1e-5)?;
        readout(g, y, &r)
    })
}

/// Triplets whose hinge is clearly active or clearly inactive, so a small
/// perturbation cannot cross the kink.
fn stable_triplets(mu: &Tensor, margin: f64) -> Vec<Triplet> {
    let n = mu.shape()[0];
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            for q in 0..n {
                if a == p || a == q || p == q {
                    continue;
                }
                let t = squared_distance(mu, a, p) - squared_distance(mu, a, q) + margin;
                if t.abs() > 1e-3 {
                    out.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: q,
                    });
                }
            }
        }
    }
    out
}

fn with_session<T>(g: &mut Graph, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
    let mut s = Session::inference(std::mem::replace(g, Graph::new()));
    let out = f(&mut s);
    *g = s.graph;
    out
}

/// Central differences over randomly chosen trainable parameter
/// coordinates. `loss(store, true)` must also leave gradients in `store`.
fn check_params<F>(store: &mut ParamStore, probes: usize, rng: &mut ChaCha8Rng, loss: F) -> Result<GradReport>
where
    F: Fn(&mut ParamStore, bool) -> Result<f64>,
{
    let gc = GradCheck::default();
    loss(store, true)?;
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = GradReport::default();
    for _ in 0..probes {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.value(id).numel());
        let analytic = store.get(id).grad.as_ref().expect("gradient collected").data()[j];
        let x0 = store.value(id).data()[j];
        let numeric = gc.central_difference(|dx| {
            store.value_mut(id).data_mut()[j] = x0 + dx;
            loss(store, false)
        })?;
        store.value_mut(id).data_mut()[j] = x0;
        let err = gc.rel_error(analytic, numeric);
        report.probes += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((id.index(), j, analytic, numeric));
        }
    }
    Ok(report)
}

fn merge(a: GradReport, b: GradReport) -> GradReport {
    GradReport {
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        probes: a.probes + b.probes,
        worst: if b.max_rel_error > a.max_rel_error { b.worst } else { a.worst },
    }
}

fn block_case(rng: &mut ChaCha8Rng, up: bool) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let (x_shape, out_shape) = if up { ([2, 3, 2, 2], [2, 2, 4, 4]) } else { ([2, 3, 4, 4], [2, 2, 2, 2]) };
    enum Block {
        Down(ResidualDownBlock),
        Up(ResidualUpBlock),
    }
    let block = if up {
        Block::Up(ResidualUpBlock::new(&mut store, "up", 3, 2, 0.2, rng))
    } else {
        Block::Down(ResidualDownBlock::new(&mut store, "down", 3, 2, 0.2, rng))
    };
    let x = off_zero(&x_shape, rng);
    let r = uniform(&out_shape, -1.0, 1.0, rng);
    let forward = |s: &mut Session, store: &mut ParamStore, x: Var| match &block {
        Block::Down(b) => b.forward(s, store, x, Mode::Train),
        Block::Up(b) => b.forward(s, store, x, Mode::Train),
    };
    let cell = RefCell::new(store.clone());
    let wrt_input = check(vec![x.clone()], rng, |g, v| {
        let y = with_session(g, |s| forward(s, &mut cell.borrow_mut(), v[0]))?;
        readout(g, y, &r)
    })?;
    let wrt_params = check_params(&mut store, 30, rng, |store, grads| {
        let mut s = Session::new(Graph::new());
        let xv = s.graph.constant(x.clone());
        let y = forward(&mut s, store, xv)?;
        let l = readout(&mut s.graph, y, &r)?;
        if grads {
            s.graph.backward(l)?;
            store.zero_grads();
            s.collect_grads(store);
        }
        s.graph.value(l).item()
    })?;
    Ok(merge(wrt_input, wrt_params))
}

/// Full desk model and training loss on three samples (two sharing a class,
/// so triplets exist), checked against both its inputs and its parameters.
fn desk_model_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let cfg = ModelConfig::desk();
    let model = TripletVae::new(cfg.clone(), rng.random())?;
    let s = cfg.image_size;
    let images = uniform(&[3, 3, s, s], 0.05, 0.95, rng);
    let wbts = uniform(&[3, 1, s, s], 0.05, 0.95, rng);
    let labels = [Label::AOM.index(), Label::AOM.index(), Label::OME.index()];
    let eps = sample_eps(&[3, cfg.latent_dim], rng);
    let loss_cfg = LossConfig {
        ssim: SsimConfig::desk(),
        ..LossConfig::default()
    };
    let loss = |model: &mut TripletVae, g: Graph, iv: Option<Var>, wv: Option<Var>, grads: bool| -> Result<(Graph, Var)> {
        let mut sess = if grads { Session::new(g) } else { Session::inference(g) };
        let iv = iv.unwrap_or_else(|| sess.graph.constant(images.clone()));
        let wv = wv.unwrap_or_else(|| sess.graph.constant(wbts.clone()));
        let out = model.forward(&mut sess, iv, wv, eps.clone(), Mode::Train)?;
        let lv = vae_loss(&mut sess.graph, &out, iv, wv, &labels, &loss_cfg)?;
        if grads {
            sess.graph.backward(lv.total)?;
            model.params.zero_grads();
            sess.collect_grads(&mut model.params);
        }
        Ok((sess.graph, lv.total))
    };
    let cell = RefCell::new(model.clone());
    let gc = GradCheck {
        max_probes: Some(8),
        ..GradCheck::default()
    };
    let wrt_input = gc.run(&[images.clone(), wbts.clone()], rng, |g, v| {
        let taken = std::mem::replace(g, Graph::new());
        let (graph, l) = loss(&mut cell.borrow_mut(), taken, Some(v[0]), Some(v[1]), false)?;
        *g = graph;
        Ok(l)
    })?;
    let params = &mut model.params.clone();
    let m = RefCell::new(model);
    let wrt_params = check_params(params, 12, rng, |store, grads| {
        let mut model = m.borrow_mut();
        model.params.copy_values_from(store)?;
        let (g, l) = loss(&mut model, Graph::new(), None, None, grads)?;
        if grads {
            for (dst, src) in store.iter_mut().zip(model.params.iter()) {
                dst.grad = src.1.grad.clone();
            }
        }
        g.value(l).item()
    })?;
    Ok(merge(wrt_input, wrt_params))
}

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |rng| elementwise(rng, Graph::add, &[2, 3, 4])),
        ("sub", |rng| elementwise(rng, Graph::sub, &[2, 3, 4])),
        ("mul", |rng| elementwise(rng, Graph::mul, &[2, 3, 4])),
        ("mul_trailing_broadcast", |rng| elementwise(rng, Graph::mul, &[2, 3, 1])),
        ("add_trailing_broadcast", |rng| elementwise(rng, Graph::add, &[2, 3, 1])),
        ("neg", |rng| {
            let x = uniform(&[3, 4], -1.0, 1.0, rng);
            unary(rng, x, Graph::neg)
        }),
        ("exp", |rng| {
            let x = uniform(&[3, 4], -2.0, 2.0, rng);
            unary(rng, x, Graph::exp)
        }),
        ("log", |rng| {
            let x = uniform(&[3, 4], 0.2, 3.0, rng);
            unary(rng, x, Graph::log)
        }),
        ("sigmoid", |rng| {
            let x = uniform(&[3, 4], -4.0, 4.0, rng);
            unary(rng, x, Graph::sigmoid)
        }),
        ("leaky_relu", |rng| {
            let x = off_zero(&[3, 4], rng);
            unary(rng, x, |g, v| g.leaky_relu(v, 0.2))
        }),
        ("scale", |rng| {
            let x = uniform(&[3, 4], -1.0, 1.0, rng);
            unary(rng, x, |g, v| g.scale(v, -1.7))
        }),
        ("sum", |rng| {
            let x = uniform(&[2, 5], -1.0, 1.0, rng);
            check(vec![x], rng, |g, v| {
                let e = g.exp(v[0])?;
                g.sum(e)
            })
        }),
        ("mean", |rng| {
            let x = uniform(&[2, 5], -1.0, 1.0, rng);
            check(vec![x], rng, |g, v| {
                let e = g.exp(v[0])?;
                g.mean(e)
            })
        }),
        ("reshape", |rng| {
            let x = uniform(&[2, 6], -1.0, 1.0, rng);
            let r = uniform(&[3, 4], -1.0, 1.0, rng);
            check(vec![x], rng, move |g, v| {
                let y = g.reshape(v[0], [3, 4])?;
                readout(g, y, &r)
            })
        }),
        ("conv2d_k3_s1_p1_bias", |rng| conv_case(rng, [2, 3, 5, 5], [4, 3, 3, 3], true, 1, 1)),
        ("conv2d_k4_s2_p1", |rng| conv_case(rng, [2, 2, 6, 6], [3, 2, 4, 4], false, 2, 1)),
        ("conv2d_k2_s1_p0_bias", |rng| conv_case(rng, [2, 4, 2, 2], [3, 4, 2, 2], true, 1, 0)),
        ("avg_pool2", |rng| {
            let x = uniform(&[2, 2, 4, 6], -1.0, 1.0, rng);
            let r = uniform(&[2, 2, 2, 3], -1.0, 1.0, rng);
            check(vec![x], rng, move |g, v| {
                let y = g.avg_pool2(v[0])?;
                readout(g, y, &r)
            })
        }),
        ("upsample2", |rng| {
            let x = uniform(&[2, 2, 2, 3], -1.0, 1.0, rng);
            let r = uniform(&[2, 2, 4, 6], -1.0, 1.0, rng);
            check(vec![x], rng, move |g, v| {
                let y = g.upsample2(v[0])?;
                readout(g, y, &r)
            })
        }),
        ("concat_channels", |rng| {
            let a = uniform(&[2, 1, 3, 3], -1.0, 1.0, rng);
            let b = uniform(&[2, 2, 3, 3], -1.0, 1.0, rng);
            let r = uniform(&[2, 3, 3, 3], -1.0, 1.0, rng);
            check(vec![a, b], rng, move |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                readout(g, y, &r)
            })
        }),
        ("batch_norm_batch_stats", |rng| batch_norm_case(rng, true)),
        ("batch_norm_fixed_stats", |rng| batch_norm_case(rng, false)),
        ("reparameterize", |rng| {
            let mu = uniform(&[3, 4], -1.0, 1.0, rng);
            let logvar = uniform(&[3, 4], -1.0, 1.0, rng);
            let eps = uniform(&[3, 4], -2.0, 2.0, rng);
            let r = uniform(&[3, 4], -1.0, 1.0, rng);
            check(vec![mu, logvar], rng, move |g, v| {
                let e = g.constant(eps.clone());
                let z = reparameterize(g, v[0], v[1], e)?;
                readout(g, z, &r)
            })
        }),
        ("bce_loss", |rng| {
            let logits = uniform(&[2, 1, 3, 3], -3.0, 3.0, rng);
            let target = uniform(&[2, 1, 3, 3], 0.0, 1.0, rng);
            check(vec![logits, target], rng, |g, v| {
                let p = g.sigmoid(v[0])?;
                bce_loss(g, p, v[1])
            })
        }),
        ("kl_loss", |rng| {
            let mu = uniform(&[3, 4], -1.5, 1.5, rng);
            let logvar = uniform(&[3, 4], -1.5, 1.5, rng);
            check(vec![mu, logvar], rng, |g, v| kl_loss(g, v[0], v[1]))
        }),
        ("ssim_loss", |rng| {
            let x = uniform(&[2, 2, 9, 9], 0.0, 1.0, rng);
            let y = uniform(&[2, 2, 9, 9], 0.0, 1.0, rng);
            check(vec![x, y], rng, |g, v| ssim_loss(g, v[0], v[1], &SsimConfig::desk()))
        }),
        ("triplet_loss", |rng| {
            let mu = uniform(&[5, 3], -0.5, 0.5, rng);
            let cfg = TripletConfig::default();
            let triplets = stable_triplets(&mu, cfg.margin);
            check(vec![mu], rng, move |g, v| triplet_loss(g, v[0], triplets.clone(), &cfg))
        }),
        ("residual_down_block", |rng| block_case(rng, false)),
        ("residual_up_block", |rng| block_case(rng, true)),
        ("desk_model", desk_model_case),
    ]
}

pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (k, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
        let mut worst: f64 = 0.0;
        let mut probes = 0;
        for _ in 0..instances {
            let r = case(&mut rng)?;
            worst = worst.max(r.max_rel_error);
            probes += r.probes;
        }
        out.push(CaseResult {
            name,
            instances,
            probes,
            worst,
        });
    }
    Ok(out)
}

