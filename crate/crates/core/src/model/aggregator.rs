use super::{insert_linear, leaf, linear, AggregatorConfig, ContextConfig, ModelError, Result};
use crate::ingest::N_EVENT_KINDS;
use crate::seed::derive_seed;
use crate::tensor::{xavier_uniform_init, Graph, ParamStore, Tensor, Var};

fn conv_name(i: usize) -> String {
    format!("agg.conv{i:02}")
}

/// Aggregator weights under `agg.`, plus `mtl.` heads for the MTL arm.
pub fn init_aggregator(cfg: &AggregatorConfig, in_dim: usize, ctx: ContextConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    for i in 0..cfg.n_layers {
        let cin = if i == 0 { in_dim } else { cfg.d_hidden };
        let cout = if i + 1 == cfg.n_layers { cfg.out_dim } else { cfg.d_hidden };
        let name = conv_name(i);
        let w = xavier_uniform_init(&[cout, cin, cfg.kernel], derive_seed(seed, &format!("{name}.w")))?;
        p.insert(format!("{name}.w"), w);
        p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
    if ctx == ContextConfig::Mtl {
        insert_linear(&mut p, "mtl.event", cfg.d_hidden, N_EVENT_KINDS, seed)?;
        for head in ["sex", "age", "bmi"] {
            insert_linear(&mut p, &format!("mtl.{head}"), cfg.d_hidden, 1, seed)?;
        }
    }
    Ok(p)
}

/// Rows to evaluate for a night of `t` epochs. Outputs at rows below `t`
/// match a full `max_len` evaluation bit for bit, because nothing past
/// `t + radius` reaches them.
pub fn cone_len(t: usize, cfg: &AggregatorConfig) -> usize {
    (t + cfg.radius()).min(cfg.max_len).max(t)
}

pub struct AggregatorOutput {
    /// `[L, 5]`
    pub logits: Var,
    /// Output of the last hidden layer (after ReLU), `[d_hidden, L]`.
    pub hidden: Var,
}

/// Same-padded conv stack over `x[L, in_dim]`; ReLU after every layer but
/// the last.
pub fn aggregator_forward<'p>(
    g: &mut Graph<'p>,
    params: &'p ParamStore,
    cfg: &AggregatorConfig,
    x: Var,
    trainable: bool,
) -> Result<AggregatorOutput> {
    let shape = g.shape(x).to_vec();
    let in_dim = params.require(&format!("{}.w", conv_name(0)))?.shape()[1];
    if shape.len() != 2 || shape[1] != in_dim {
        return Err(ModelError::Shape(format!("aggregator expects [L, {in_dim}], got {shape:?}")));
    }
    let mut h = g.permute(x, &[1, 0])?;
    let mut hidden = h;
    for i in 0..cfg.n_layers {
        let w = leaf(g, params, &format!("{}.w", conv_name(i)), trainable)?;
        let b = leaf(g, params, &format!("{}.b", conv_name(i)), trainable)?;
        h = g.conv1d(h, w, b)?;
        if i + 1 < cfg.n_layers {
            h = g.relu(h)?;
            hidden = h;
        }
    }
    let logits = g.permute(h, &[1, 0])?;
    Ok(AggregatorOutput { logits, hidden })
}

pub struct MtlOutput {
    /// `[L, 7]`
    pub event_logits: Var,
    /// `[1, 1]` each.
    pub sex_logit: Var,
    pub age_pred: Var,
    pub bmi_pred: Var,
}

/// Per-epoch event head and mask-pooled subject heads on `hidden[D, L]`.
pub fn mtl_forward<'p>(
    g: &mut Graph<'p>,
    params: &'p ParamStore,
    hidden: Var,
    mask: &[bool],
    trainable: bool,
) -> Result<MtlOutput> {
    let rows = g.permute(hidden, &[1, 0])?;
    let event_logits = linear(g, params, "mtl.event", rows, trainable)?;
    let pooled = g.masked_mean_rows(rows, mask)?;
    let d = g.shape(pooled)[0];
    let pooled = g.reshape(pooled, &[1, d])?;
    let sex_logit = linear(g, params, "mtl.sex", pooled, trainable)?;
    let age_pred = linear(g, params, "mtl.age", pooled, trainable)?;
    let bmi_pred = linear(g, params, "mtl.bmi", pooled, trainable)?;
    Ok(MtlOutput {
        event_logits,
        sex_logit,
        age_pred,
        bmi_pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, Reduction};

    fn small() -> AggregatorConfig {
        AggregatorConfig {
            n_layers: 3,
            d_hidden: 4,
            kernel: 3,
            out_dim: 5,
            max_len: 40,
        }
    }

    fn input(l: usize, d: usize, t: usize) -> Tensor {
        let data = (0..l * d)
            .map(|i| if i / d < t { ((i * 31 % 17) as f64 - 8.0) / 8.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![l, d], data).unwrap()
    }

    fn logits(p: &ParamStore, cfg: &AggregatorConfig, x: Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = aggregator_forward(&mut g, p, cfg, xv, false).unwrap();
        g.value(out.logits).to_vec()
    }

    #[test]
    fn output_shape_full_size_config() {
        let cfg = AggregatorConfig {
            d_hidden: 8,
            ..AggregatorConfig::default()
        };
        let p = init_aggregator(&cfg, 138, ContextConfig::Both, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1500, 138]));
        let out = aggregator_forward(&mut g, &p, &cfg, x, false).unwrap();
        assert_eq!(g.shape(out.logits), &[1500, 5]);
    }

    #[test]
    fn cone_matches_full_length() {
        let cfg = small();
        let p = init_aggregator(&cfg, 3, ContextConfig::None, 1).unwrap();
        for t in [1, 5, 20, 35, 40] {
            let full = logits(&p, &cfg, input(cfg.max_len, 3, t));
            let l = cone_len(t, &cfg);
            let cone = logits(&p, &cfg, input(l, 3, t));
            assert_eq!(&full[..t * 5], &cone[..t * 5], "t = {t}");
        }
    }

    #[test]
    fn locality_bound() {
        let cfg = small();
        let p = init_aggregator(&cfg, 3, ContextConfig::None, 2).unwrap();
        let base = input(cfg.max_len, 3, 40);
        let r = cfg.radius();
        let probe = 20;
        for far in [probe + r + 1, probe - r - 1] {
            let mut x = base.clone();
            x.data_mut()[far * 3] += 10.0;
            assert_eq!(logits(&p, &cfg, x)[probe * 5..probe * 5 + 5], logits(&p, &cfg, base.clone())[probe * 5..probe * 5 + 5]);
        }
        let mut near = base.clone();
        near.data_mut()[(probe + r) * 3] += 10.0;
        assert_ne!(logits(&p, &cfg, near)[probe * 5..probe * 5 + 5], logits(&p, &cfg, base)[probe * 5..probe * 5 + 5]);
    }

    #[test]
    fn mtl_pooling_ignores_padding_and_zero_features() {
        let cfg = small();
        let p = init_aggregator(&cfg, 3, ContextConfig::Mtl, 3).unwrap();
        let run = |l: usize| {
            let mut g = Graph::new();
            let x = g.constant(input(l, 3, 10));
            let out = aggregator_forward(&mut g, &p, &cfg, x, false).unwrap();
            let mut mask = vec![true; 10];
            mask.resize(l, false);
            let m = mtl_forward(&mut g, &p, out.hidden, &mask, false).unwrap();
            assert_eq!(g.shape(m.event_logits), &[l, 7]);
            (g.scalar(m.sex_logit), g.scalar(m.age_pred), g.scalar(m.bmi_pred))
        };
        // Row 9's cone ends at 9 + 2 (layer-2 hidden output), well inside 20.
        assert_eq!(run(20), run(40));

        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(&[4, 6]));
        let m = mtl_forward(&mut g, &p, zeros, &[true; 6], false).unwrap();
        let prob = g.value(m.sex_logit)[0];
        assert_eq!(1.0 / (1.0 + (-prob).exp()), 0.5);
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(&[4, 6]));
        assert!(mtl_forward(&mut g, &p, zeros, &[false; 6], false).is_err());
    }

    #[test]
    fn gradient_check_aggregator_with_mtl() {
        let cfg = small();
        let mut params = init_aggregator(&cfg, 3, ContextConfig::Mtl, 4).unwrap();
        for (i, (_, t)) in params.iter_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * (((i * 7 + j * 3) % 11) as f64 - 5.0) / 5.0;
            }
        }
        let x = input(12, 3, 9);
        let labels: Vec<usize> = (0..12).map(|i| i % 5).collect();
        let mut mask = vec![true; 9];
        mask.resize(12, false);
        let targets: Vec<f64> = (0..12 * 7).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let f = |p: &ParamStore| -> crate::tensor::Result<_> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = aggregator_forward(&mut g, p, &cfg, xv, true).map_err(ModelError::into_tensor)?;
            let ce = g.masked_cross_entropy(out.logits, &labels, &mask, Reduction::Sum)?;
            let m = mtl_forward(&mut g, p, out.hidden, &mask, true).map_err(ModelError::into_tensor)?;
            let ev = g.bce_with_logits(m.event_logits, &targets, &mask, Reduction::Sum)?;
            let sex = g.bce_with_logits(m.sex_logit, &[1.0], &[true], Reduction::Sum)?;
            let age = g.squared_error(m.age_pred, &[0.3])?;
            let bmi = g.squared_error(m.bmi_pred, &[-1.2])?;
            let mut loss = ce;
            for term in [ev, sex, age, bmi] {
                loss = g.add(loss, term)?;
            }
            Ok((g.scalar(loss), g.backward(loss)?))
        };
        let r = finite_difference_check(&params, f, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-4, "{:?}", r.per_param);
    }
}
