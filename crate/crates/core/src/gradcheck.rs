//! Central finite-difference checks of every differentiable op and of two
//! complete alignment stacks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::fusion::{FusionBlock, FusionMode};
use crate::netbuilder::parse_arch;
use crate::stacks::{AlignmentStack, StackConfig, StackKind};

pub const EPSILON: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const STACK_TOLERANCE: f64 = 1e-3;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Largest `max|analytic - numeric| / max(max|analytic|, max|numeric|)`
    /// over the checked tensors.
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<28} max rel err {:.3e} (tol {:.0e}) worst {}[{}]",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.worst_tensor,
            self.worst_index
        )
    }
}

fn weighted_sum(g: &mut Graph, y: Var, weights: &[f64]) -> Result<Var> {
    let w = g.constant(Tensor::new(g.shape(y).to_vec(), weights.to_vec())?);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

/// Compares the backward pass of `build` against central differences with
/// respect to every scalar in `store`. The checked scalar is `sum(w * y)`
/// for fixed random weights `w`, so every output element contributes.
pub fn check<F>(name: &str, store: &mut ParamStore, build: F, tolerance: f64, fault: Option<&str>, seed: u64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut probe = Graph::new();
    let y = build(&mut probe, store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights: Vec<f64> = (0..probe.value(y).numel()).map(|_| rng.sample(StandardNormal)).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let y = build(&mut g, store)?;
        let l = weighted_sum(&mut g, y, &weights)?;
        Ok(g.data(l)[0])
    };

    store.zero_grads();
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_gradient_fault(op);
    }
    let y = build(&mut g, store)?;
    let l = weighted_sum(&mut g, y, &weights)?;
    g.backward(l)?;
    store.accumulate_grads(&g);

    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        tolerance,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let analytic: Vec<f64> = store.get(id).grad().map_or(vec![0.0; n], <[f64]>::to_vec);
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + EPSILON;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig - EPSILON;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * EPSILON);
        }
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(1e-10_f64, |m, v| m.max(v.abs()));
        let (idx, diff) = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .enumerate()
            .fold((0, 0.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
        let rel = diff / scale;
        if rel > report.max_rel_error || report.worst_tensor.is_empty() {
            report.max_rel_error = rel;
            report.worst_tensor = store.entry(id).name.clone();
            report.worst_index = idx;
        }
    }
    store.zero_grads();
    Ok(report)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let d = Uniform::new(lo, hi).expect("range");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape")
}

fn store_of(tensors: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in tensors {
        s.add(name, ParamGroup::Alignment, t);
    }
    s
}

fn p(store: &ParamStore, g: &mut Graph, name: &str) -> Var {
    g.param(store, store.find(name).expect("param exists"))
}

/// One check per differentiable op, plus the warp pipeline, a small network
/// and a fusion block, all at [`OP_TOLERANCE`].
pub fn op_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, mut store: ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var>| -> Result<()> {
        out.push(check(name, &mut store, build, OP_TOLERANCE, fault, seed)?);
        Ok(())
    };

    let ab = |rng: &mut ChaCha8Rng| store_of(vec![("a", randn(rng, &[3, 4], 1.0)), ("b", randn(rng, &[3, 4], 1.0))]);
    run("add", ab(&mut rng), &|g, s| {
        let (a, b) = (p(s, g, "a"), p(s, g, "b"));
        g.add(a, b)
    })?;
    run("sub", ab(&mut rng), &|g, s| {
        let (a, b) = (p(s, g, "a"), p(s, g, "b"));
        g.sub(a, b)
    })?;
    run("mul", ab(&mut rng), &|g, s| {
        let (a, b) = (p(s, g, "a"), p(s, g, "b"));
        g.mul(a, b)
    })?;
    let x = |rng: &mut ChaCha8Rng| store_of(vec![("x", randn(rng, &[2, 3, 4], 1.0))]);
    run("affine", x(&mut rng), &|g, s| {
        let v = p(s, g, "x");
        Ok(g.scale(v, -1.7))
    })?;
    run("sum", x(&mut rng), &|g, s| {
        let v = p(s, g, "x");
        Ok(g.sum(v))
    })?;
    run("mean", x(&mut rng), &|g, s| {
        let v = p(s, g, "x");
        Ok(g.mean(v))
    })?;
    run("reshape", x(&mut rng), &|g, s| {
        let v = p(s, g, "x");
        let r = g.reshape(v, &[4, 6])?;
        let w = g.constant(Tensor::new(vec![4, 6], (0..24).map(|i| i as f64).collect())?);
        g.mul(r, w)
    })?;
    run(
        "concat",
        store_of(vec![("a", randn(&mut rng, &[2, 3], 1.0)), ("b", randn(&mut rng, &[2, 5], 1.0))]),
        &|g, s| {
            let (a, b) = (p(s, g, "a"), p(s, g, "b"));
            g.concat_cols(&[a, b])
        },
    )?;
    for (stride, pad) in [(1, 1), (2, 0)] {
        run(
            &format!("conv2d(s{stride},p{pad})"),
            store_of(vec![("x", randn(&mut rng, &[2, 2, 6, 6], 1.0)), ("k", randn(&mut rng, &[3, 2, 3, 3], 0.5))]),
            &|g, s| {
                let (x, k) = (p(s, g, "x"), p(s, g, "k"));
                g.conv2d(x, k, stride, pad)
            },
        )?;
    }
    run(
        "channel_bias",
        store_of(vec![("x", randn(&mut rng, &[2, 3, 2, 2], 1.0)), ("b", randn(&mut rng, &[3], 1.0))]),
        &|g, s| {
            let (x, b) = (p(s, g, "x"), p(s, g, "b"));
            g.channel_bias(x, b)
        },
    )?;
    run("maxpool2", store_of(vec![("x", randn(&mut rng, &[2, 2, 4, 4], 1.0))]), &|g, s| {
        let v = p(s, g, "x");
        g.maxpool2(v)
    })?;
    run(
        "dense",
        store_of(vec![
            ("x", randn(&mut rng, &[3, 5], 1.0)),
            ("w", randn(&mut rng, &[5, 4], 0.5)),
            ("b", randn(&mut rng, &[4], 1.0)),
        ]),
        &|g, s| {
            let (x, w, b) = (p(s, g, "x"), p(s, g, "w"), p(s, g, "b"));
            g.dense(x, w, b)
        },
    )?;
    run("tanh", x(&mut rng), &|g, s| {
        let v = p(s, g, "x");
        Ok(g.tanh(v))
    })?;
    run("relu", x(&mut rng), &|g, s| {
        let v = p(s, g, "x");
        Ok(g.relu(v))
    })?;
    run("dropout", x(&mut rng), &|g, s| {
        let v = p(s, g, "x");
        let mut mask_rng = ChaCha8Rng::seed_from_u64(11);
        g.dropout(v, 0.7, true, &mut mask_rng)
    })?;
    let labels = [2usize, 0, 4];
    run("softmax_xent", store_of(vec![("z", randn(&mut rng, &[3, 5], 2.0))]), &|g, s| {
        let v = p(s, g, "z");
        g.softmax_xent(v, &labels)
    })?;
    run(
        "smooth_l1",
        store_of(vec![("a", randn(&mut rng, &[4, 4, 2], 2.0)), ("b", randn(&mut rng, &[4, 4, 2], 2.0))]),
        &|g, s| {
            let (a, b) = (p(s, g, "a"), p(s, g, "b"));
            g.smooth_l1(a, b)
        },
    )?;
    let params = |rng: &mut ChaCha8Rng| store_of(vec![("p", uniform(rng, &[2, 8], -0.15, 0.15))]);
    run("generate_grid", params(&mut rng), &|g, s| {
        let v = p(s, g, "p");
        g.warp_grid(v, 5, 6)
    })?;
    run(
        "bilinear_sample",
        store_of(vec![
            ("image", uniform(&mut rng, &[2, 2, 5, 6], 0.0, 1.0)),
            ("grid", uniform(&mut rng, &[2, 4, 3, 2], -1.2, 1.2)),
        ]),
        &|g, s| {
            let (img, grid) = (p(s, g, "image"), p(s, g, "grid"));
            g.bilinear_sample(img, grid)
        },
    )?;
    let pts = [[0.0, 0.0], [7.0, 0.0], [7.0, 7.0], [0.0, 7.0], [3.3, 4.1]];
    run("project_points", params(&mut rng), &|g, s| {
        let v = p(s, g, "p");
        g.project_points(v, &pts, 8, 8)
    })?;
    run(
        "warp(p -> grid -> sample)",
        store_of(vec![
            ("p", uniform(&mut rng, &[2, 8], -0.15, 0.15)),
            ("image", uniform(&mut rng, &[2, 1, 6, 6], 0.0, 1.0)),
        ]),
        &|g, s| {
            let (pv, img) = (p(s, g, "p"), p(s, g, "image"));
            let grid = g.warp_grid(pv, 6, 6)?;
            g.bilinear_sample(img, grid)
        },
    )?;

    // A localization network and a fusion block with all parameters random.
    let mut net_store = ParamStore::new();
    let arch = parse_arch("conv3-3 | P | conv3-4(2) | FC(6) | FC(8)")?;
    let net = crate::netbuilder::build_network(
        &arch,
        1,
        (8, 8),
        crate::netbuilder::NetRole::Localization,
        &mut net_store,
        "net",
        ParamGroup::Alignment,
        &mut rng,
    )?;
    randomize(&mut net_store, &mut rng, 0.4);
    let input = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    run("network", net_store, &|g, s| {
        let x = g.constant(input.clone());
        net.forward(g, s, x)
    })?;

    for mode in [FusionMode::ExpansionContraction, FusionMode::Bottleneck] {
        let mut fs = ParamStore::new();
        let block = FusionBlock::new(mode, 3, 4, 0.9, &mut fs, "fusion", &mut rng)?;
        randomize(&mut fs, &mut rng, 0.3);
        let ups: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 8], -0.2, 0.2)).collect();
        for (i, u) in ups.into_iter().enumerate() {
            fs.add(format!("u{i}"), ParamGroup::Alignment, u);
        }
        run(&format!("fusion({mode})"), fs, &|g, s| {
            let ups: Vec<Var> = (0..3).map(|i| p(s, g, &format!("u{i}"))).collect();
            let mut drop = ChaCha8Rng::seed_from_u64(5);
            block.forward(g, s, &ups, true, &mut drop)
        })?;
    }
    Ok(out)
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    for e in store.entries_mut() {
        for v in e.tensor.data_mut() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// CSTN-2 and DeSTNet-2 (fusion width 4) on 8x8 rasters with random
/// non-zero heads and initial warps, classified by a small dense head, at
/// [`STACK_TOLERANCE`].
pub fn stack_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for kind in [StackKind::Cstn, StackKind::Destnet] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(kind as u64 + 1));
        let cfg = StackConfig {
            kind,
            levels: 2,
            arch: parse_arch("conv3-4 | P | FC(8)")?,
            fusion: FusionMode::ExpansionContraction,
            kf: 4,
            keep_prob: 0.9,
        };
        let mut store = ParamStore::new();
        let stack = AlignmentStack::build(&cfg, 1, (8, 8), &mut store, &mut rng)?;
        for e in store.entries_mut() {
            let std = if e.name.starts_with("loc") { 0.05 } else { 0.3 };
            for v in e.tensor.data_mut() {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        store.add("p_init", ParamGroup::Alignment, uniform(&mut rng, &[2, 8], -0.08, 0.08));
        let image = smooth_image(&mut rng, 2, 8);
        let name = match kind {
            StackKind::Cstn => "CSTN-2 end to end",
            _ => "DeSTNet-2 end to end",
        };
        out.push(check(
            name,
            &mut store,
            |g, s| {
                let x = g.constant(image.clone());
                let p0 = p(s, g, "p_init");
                let mut drop = ChaCha8Rng::seed_from_u64(9);
                let r = stack.forward(g, s, x, Some(p0), true, &mut drop)?;
                let warped = g.flatten(r.warped)?;
                g.concat_cols(&[warped, r.final_params])
            },
            STACK_TOLERANCE,
            fault,
            seed,
        )?);
    }
    Ok(out)
}

/// Random blurred blobs in `[0, 1]`, smooth enough that resampling is
/// well conditioned.
fn smooth_image(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * s * s);
    for _ in 0..n {
        let cx = rng.random_range(2.0..s as f64 - 2.0);
        let cy = rng.random_range(2.0..s as f64 - 2.0);
        let r2 = rng.random_range(2.0..6.0);
        for y in 0..s {
            for x in 0..s {
                let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                data.push((-d / r2).exp());
            }
        }
    }
    Tensor::new(vec![n, 1, s, s], data).expect("shape")
}

/// Every op check followed by both stack checks.
pub fn run_all(seed: u64, fault: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut all = op_suite(seed, fault)?;
    all.extend(stack_suite(seed, fault)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_exact() {
        let mut s = store_of(vec![("x", Tensor::from_vec(vec![0.5, -2.0, 3.0]))]);
        let r = check(
            "square",
            &mut s,
            |g, s| {
                let x = p(s, g, "x");
                g.mul(x, x)
            },
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn fault_is_detected() {
        let mut s = store_of(vec![("x", Tensor::from_vec(vec![0.5, -2.0, 3.0]))]);
        let r = check(
            "tanh",
            &mut s,
            |g, s| {
                let x = p(s, g, "x");
                Ok(g.tanh(x))
            },
            OP_TOLERANCE,
            Some("tanh"),
            0,
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{}", r.max_rel_error);
    }
}
