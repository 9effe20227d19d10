//! Finite-difference checks over every differentiable op, one encoder block
//! with its head, and one aggregator stack with MTL heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{
    aggregator_forward, encoder_forward, head_forward, init_aggregator, init_encoder, init_head, mtl_forward,
    AggregatorConfig, ContextConfig, EncoderConfig,
};
use crate::tensor::{finite_difference_check, Gradients, Graph, ParamStore, Reduction, Result, Tensor, TensorError, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Uniform values in `±[lo, hi]`; `lo > 0` keeps ReLU inputs away from the kink.
fn values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), values(rng, n, lo, hi)).expect("shape matches length")
}

/// Contracts `v` against fixed pseudo-random weights so every output entry
/// contributes a distinct amount to the scalar.
fn project(g: &mut Graph<'_>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 23) as f64 / 23.0 - 0.4).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(v, w)?;
    g.sum(p)
}

type Body<'a> = dyn for<'p> Fn(&mut Graph<'p>, &'p ParamStore) -> Result<Var> + 'a;

fn check(name: &str, params: ParamStore, body: &Body<'_>) -> Result<OpCheck> {
    let f = |p: &ParamStore| -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let loss = body(&mut g, p)?;
        Ok((g.scalar(loss), g.backward(loss)?))
    };
    let r = finite_difference_check(&params, f, STEP, None)?;
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_err: r.max_rel_err,
        entries: r.entries_checked,
    })
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut p = ParamStore::new();
    for (name, t) in entries {
        p.insert(name, t);
    }
    p
}

fn p<'p>(g: &mut Graph<'p>, params: &'p ParamStore, name: &str) -> Result<Var> {
    Ok(g.param(name, params.require(name)?))
}

fn model_err(e: crate::model::ModelError) -> TensorError {
    e.into_tensor()
}

/// Runs every check. Inputs are drawn from a fixed seed.
pub fn run_suite() -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = &mut rng;
    let mut out = Vec::new();

    let ab = store(vec![("a", tensor(r, &[2, 3, 4], 0.1, 1.0)), ("b", tensor(r, &[4], 0.1, 1.0))]);
    out.push(check("add", ab, &|g, ps| {
        let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
        let y = g.add(a, b)?;
        project(g, y)
    })?);
    let ab = store(vec![("a", tensor(r, &[3, 4], 0.1, 1.0)), ("b", tensor(r, &[3, 4], 0.1, 1.0))]);
    out.push(check("mul", ab, &|g, ps| {
        let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
        let y = g.mul(a, b)?;
        project(g, y)
    })?);
    let x = || store(vec![("x", tensor(&mut ChaCha8Rng::seed_from_u64(3), &[4, 5], 0.1, 2.0))]);
    out.push(check("scale", x(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.scale(x, -1.7)?;
        project(g, y)
    })?);
    out.push(check("relu", x(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.relu(x)?;
        project(g, y)
    })?);
    out.push(check("gelu", x(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.gelu(x)?;
        project(g, y)
    })?);
    let ab = store(vec![("a", tensor(r, &[2, 3, 4], 0.1, 1.0)), ("b", tensor(r, &[4, 5], 0.1, 1.0))]);
    out.push(check("matmul", ab, &|g, ps| {
        let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
        let y = g.matmul(a, b)?;
        project(g, y)
    })?);
    let ab = store(vec![("a", tensor(r, &[2, 3, 4], 0.1, 1.0)), ("b", tensor(r, &[2, 4, 3], 0.1, 1.0))]);
    out.push(check("bmm", ab, &|g, ps| {
        let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
        let y = g.bmm(a, b)?;
        project(g, y)
    })?);
    let x3 = || store(vec![("x", tensor(&mut ChaCha8Rng::seed_from_u64(4), &[2, 3, 4], 0.1, 1.5))]);
    out.push(check("reshape", x3(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.reshape(x, &[6, 4])?;
        let y = g.mul(y, y)?;
        project(g, y)
    })?);
    out.push(check("permute", x3(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.permute(x, &[2, 0, 1])?;
        let y = g.mul(y, y)?;
        project(g, y)
    })?);
    out.push(check("softmax", x3(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.softmax(x, 1)?;
        project(g, y)
    })?);
    let ln = store(vec![
        ("x", tensor(r, &[3, 6], 0.1, 2.0)),
        ("g", tensor(r, &[6], 0.5, 1.5)),
        ("b", tensor(r, &[6], 0.0, 0.5)),
    ]);
    out.push(check("layer_norm", ln, &|g, ps| {
        let (x, gain, bias) = (p(g, ps, "x")?, p(g, ps, "g")?, p(g, ps, "b")?);
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        project(g, y)
    })?);
    let conv = store(vec![
        ("x", tensor(r, &[3, 9], 0.1, 1.0)),
        ("w", tensor(r, &[4, 3, 5], 0.1, 0.6)),
        ("b", tensor(r, &[4], 0.0, 0.3)),
    ]);
    out.push(check("conv1d", conv, &|g, ps| {
        let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
        let y = g.conv1d(x, w, b)?;
        project(g, y)
    })?);
    let logits = || store(vec![("z", tensor(&mut ChaCha8Rng::seed_from_u64(5), &[6, 5], 0.1, 2.0))]);
    out.push(check("masked_cross_entropy", logits(), &|g, ps| {
        let z = p(g, ps, "z")?;
        g.masked_cross_entropy(z, &[0, 4, 2, 1, 3, 2], &[true, true, false, true, true, false], Reduction::Mean)
    })?);
    out.push(check("bce_with_logits", logits(), &|g, ps| {
        let z = p(g, ps, "z")?;
        let t: Vec<f64> = (0..30).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        g.bce_with_logits(z, &t, &[true, false, true, true, true, false], Reduction::Sum)
    })?);
    out.push(check("squared_error", logits(), &|g, ps| {
        let z = p(g, ps, "z")?;
        let t: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        g.squared_error(z, &t)
    })?);
    out.push(check("sum", x3(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.mul(x, x)?;
        g.sum(y)
    })?);
    out.push(check("mean", x3(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.mul(x, x)?;
        g.mean(y)
    })?);
    out.push(check("mean_axis", x3(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.mean_axis(x, 1)?;
        let y = g.mul(y, y)?;
        project(g, y)
    })?);
    out.push(check("masked_mean_rows", logits(), &|g, ps| {
        let z = p(g, ps, "z")?;
        let y = g.masked_mean_rows(z, &[true, false, true, true, false, true])?;
        let y = g.mul(y, y)?;
        project(g, y)
    })?);
    out.push(check("narrow", x3(), &|g, ps| {
        let x = p(g, ps, "x")?;
        let y = g.narrow(x, 2, 1, 2)?;
        let y = g.mul(y, y)?;
        project(g, y)
    })?);
    let cat = store(vec![("a", tensor(r, &[2, 3], 0.1, 1.0)), ("b", tensor(r, &[2, 2], 0.1, 1.0))]);
    out.push(check("concat", cat, &|g, ps| {
        let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
        let y = g.concat(&[a, b], 1)?;
        let y = g.mul(y, y)?;
        project(g, y)
    })?);

    out.push(encoder_block_check(r)?);
    out.push(aggregator_stack_check(r)?);
    Ok(out)
}

/// Jitters every parameter so that zero-initialised biases do not hide errors.
fn jitter(params: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn encoder_block_check(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let cfg = EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 4,
        d_ff: 8,
        patch_len: 3,
        n_channels: 2,
        samples_per_epoch: 9,
        mlp_hidden: 5,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    let mut params = init_encoder(&cfg, 11).map_err(model_err)?;
    params.extend(init_head(&cfg, 12).map_err(model_err)?);
    jitter(&mut params, rng, 0.1);
    let epochs: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..cfg.n_channels * cfg.samples_per_epoch).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    check_boxed("encoder_block", params, move |g, ps| {
        let refs: Vec<&[f32]> = epochs.iter().map(Vec::as_slice).collect();
        let out = encoder_forward(g, ps, &cfg, &refs, true, None).map_err(model_err)?;
        let logits = head_forward(g, ps, &cfg, out.tokens, true).map_err(model_err)?;
        g.masked_cross_entropy(logits, &[1, 3, 0], &[true; 3], Reduction::Mean)
    })
}

fn aggregator_stack_check(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let cfg = AggregatorConfig {
        n_layers: 3,
        d_hidden: 4,
        kernel: 3,
        out_dim: 5,
        max_len: 16,
    };
    let mut params = init_aggregator(&cfg, 3, ContextConfig::Mtl, 13).map_err(model_err)?;
    jitter(&mut params, rng, 0.1);
    let x = tensor(rng, &[10, 3], 0.1, 1.0);
    let mask: Vec<bool> = (0..10).map(|i| i < 8).collect();
    let labels: Vec<usize> = (0..10).map(|i| (i * 3) % 5).collect();
    let targets: Vec<f64> = (0..70).map(|i| (i % 4 == 0) as u8 as f64).collect();
    check_boxed("aggregator_stack", params, move |g, ps| {
        let xv = g.constant(x.clone());
        let out = aggregator_forward(g, ps, &cfg, xv, true).map_err(model_err)?;
        let ce = g.masked_cross_entropy(out.logits, &labels, &mask, Reduction::Sum)?;
        let m = mtl_forward(g, ps, out.hidden, &mask, true).map_err(model_err)?;
        let ev = g.bce_with_logits(m.event_logits, &targets, &mask, Reduction::Sum)?;
        let sex = g.bce_with_logits(m.sex_logit, &[0.0], &[true], Reduction::Sum)?;
        let age = g.squared_error(m.age_pred, &[0.4])?;
        let bmi = g.squared_error(m.bmi_pred, &[-0.8])?;
        let mut loss = ce;
        for t in [ev, sex, age, bmi] {
            loss = g.add(loss, t)?;
        }
        Ok(loss)
    })
}

fn check_boxed<F>(name: &str, params: ParamStore, body: F) -> Result<OpCheck>
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParamStore) -> Result<Var>,
{
    check(name, params, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let checks = run_suite().unwrap();
        assert_eq!(checks.len(), 23);
        for c in &checks {
            assert!(c.passed(), "{}: {:e}", c.name, c.max_rel_err);
            assert!(c.entries > 0);
        }
    }
}
