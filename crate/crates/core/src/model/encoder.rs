use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{insert_linear, leaf, linear, EncoderConfig, ModelError, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Standard sinusoidal table `[P, d]`.
pub fn positional_encoding(n_pos: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n_pos * d];
    for p in 0..n_pos {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 * freq;
            data[p * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![n_pos, d], data).expect("consistent shape")
}

/// Encoder weights under `enc.`: patch projection, `block{i}` layers, final norm.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    insert_linear(&mut p, "enc.patch", cfg.patch_dim(), d, seed)?;
    for i in 0..cfg.n_layers {
        let b = format!("enc.block{i}");
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{b}.{ln}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{b}.{ln}.b"), Tensor::zeros(&[d]));
        }
        for proj in ["q", "k", "v", "o"] {
            insert_linear(&mut p, &format!("{b}.attn.{proj}"), d, d, seed)?;
        }
        insert_linear(&mut p, &format!("{b}.ff1"), d, cfg.d_ff, seed)?;
        insert_linear(&mut p, &format!("{b}.ff2"), cfg.d_ff, d, seed)?;
    }
    p.insert("enc.ln_f.g", Tensor::full(&[d], 1.0));
    p.insert("enc.ln_f.b", Tensor::zeros(&[d]));
    Ok(p)
}

/// MLP head weights under `head.`: `P·d → hidden (ReLU) → 5`.
pub fn init_head(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    insert_linear(&mut p, "head.fc1", cfg.n_patches() * cfg.d_model, cfg.mlp_hidden, seed)?;
    insert_linear(&mut p, "head.fc2", cfg.mlp_hidden, 5, seed)?;
    Ok(p)
}

pub struct EncoderOutput {
    /// `[B, P, d]`
    pub tokens: Var,
    /// `[B, d]`
    pub pooled: Var,
}

/// Rearranges epochs `[C, S]` into patch rows `[B·P, C·patch_len]`,
/// channel-major within each patch.
fn patchify(cfg: &EncoderConfig, epochs: &[&[f32]]) -> Result<Tensor> {
    let (c, s, pl, np) = (cfg.n_channels, cfg.samples_per_epoch, cfg.patch_len, cfg.n_patches());
    let row = c * pl;
    let mut data = vec![0.0; epochs.len() * np * row];
    for (b, x) in epochs.iter().enumerate() {
        if x.len() != c * s {
            return Err(ModelError::Shape(format!("epoch has {} values, expected {c}×{s}", x.len())));
        }
        for p in 0..np {
            let dst = &mut data[(b * np + p) * row..(b * np + p + 1) * row];
            for ch in 0..c {
                let src = &x[ch * s + p * pl..ch * s + (p + 1) * pl];
                for (d, v) in dst[ch * pl..(ch + 1) * pl].iter_mut().zip(src) {
                    *d = *v as f64;
                }
            }
        }
    }
    Ok(Tensor::new(vec![epochs.len() * np, row], data)?)
}

fn dropout(g: &mut Graph<'_>, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    Ok(g.mul(x, m)?)
}

/// Pre-norm block: `h + MHA(LN(h))`, then `h + FFN(LN(h))`. `h` is `[B·P, d]`.
fn block<'p>(
    g: &mut Graph<'p>,
    params: &'p ParamStore,
    cfg: &EncoderConfig,
    i: usize,
    h: Var,
    batch: usize,
    trainable: bool,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let pre = format!("enc.block{i}");
    let (np, d, nh) = (cfg.n_patches(), cfg.d_model, cfg.n_heads);
    let dh = cfg.head_dim();

    let g1 = leaf(g, params, &format!("{pre}.ln1.g"), trainable)?;
    let b1 = leaf(g, params, &format!("{pre}.ln1.b"), trainable)?;
    let a = g.layer_norm(h, g1, b1, cfg.ln_eps)?;
    let heads = |g: &mut Graph<'p>, proj: &str, axes: &[usize]| -> Result<Var> {
        let y = linear(g, params, &format!("{pre}.attn.{proj}"), a, trainable)?;
        let y = g.reshape(y, &[batch, np, nh, dh])?;
        let y = g.permute(y, axes)?;
        let shape = g.shape(y).to_vec();
        Ok(g.reshape(y, &[batch * nh, shape[2], shape[3]])?)
    };
    let q = heads(g, "q", &[0, 2, 1, 3])?;
    let kt = heads(g, "k", &[0, 2, 3, 1])?;
    let v = heads(g, "v", &[0, 2, 1, 3])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let att = g.softmax(scores, 2)?;
    let ctx = g.bmm(att, v)?;
    let ctx = g.reshape(ctx, &[batch, nh, np, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch * np, d])?;
    let o = linear(g, params, &format!("{pre}.attn.o"), ctx, trainable)?;
    let o = dropout(g, o, cfg.dropout, rng)?;
    let h = g.add(h, o)?;

    let g2 = leaf(g, params, &format!("{pre}.ln2.g"), trainable)?;
    let b2 = leaf(g, params, &format!("{pre}.ln2.b"), trainable)?;
    let f = g.layer_norm(h, g2, b2, cfg.ln_eps)?;
    let f = linear(g, params, &format!("{pre}.ff1"), f, trainable)?;
    let f = g.gelu(f)?;
    let f = linear(g, params, &format!("{pre}.ff2"), f, trainable)?;
    let f = dropout(g, f, cfg.dropout, rng)?;
    Ok(g.add(h, f)?)
}

/// Encodes a batch of independent epochs, each `[C, S]` row-major.
///
/// Passing `rng` enables dropout; inference passes `None`.
pub fn encoder_forward<'p>(
    g: &mut Graph<'p>,
    params: &'p ParamStore,
    cfg: &EncoderConfig,
    epochs: &[&[f32]],
    trainable: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let batch = epochs.len();
    if batch == 0 {
        return Err(ModelError::Shape("empty batch".into()));
    }
    let (np, d) = (cfg.n_patches(), cfg.d_model);
    let x = g.constant(patchify(cfg, epochs)?);
    let h = linear(g, params, "enc.patch", x, trainable)?;
    let h = g.reshape(h, &[batch, np, d])?;
    let pe = g.constant(positional_encoding(np, d));
    let h = g.add(h, pe)?;
    let mut h = g.reshape(h, &[batch * np, d])?;
    for i in 0..cfg.n_layers {
        h = block(g, params, cfg, i, h, batch, trainable, &mut rng)?;
    }
    let gf = leaf(g, params, "enc.ln_f.g", trainable)?;
    let bf = leaf(g, params, "enc.ln_f.b", trainable)?;
    let h = g.layer_norm(h, gf, bf, cfg.ln_eps)?;
    let tokens = g.reshape(h, &[batch, np, d])?;
    let pooled = g.mean_axis(tokens, 1)?;
    Ok(EncoderOutput { tokens, pooled })
}

/// `tokens[B, P, d]` → logits `[B, 5]`.
pub fn head_forward<'p>(
    g: &mut Graph<'p>,
    params: &'p ParamStore,
    cfg: &EncoderConfig,
    tokens: Var,
    trainable: bool,
) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] != cfg.n_patches() || shape[2] != cfg.d_model {
        return Err(ModelError::Shape(format!("head expects [B, {}, {}], got {shape:?}", cfg.n_patches(), cfg.d_model)));
    }
    let flat = g.reshape(tokens, &[shape[0], shape[1] * shape[2]])?;
    let h = linear(g, params, "head.fc1", flat, trainable)?;
    let h = g.relu(h)?;
    linear(g, params, "head.fc2", h, trainable)
}

/// Inference-only encoding of `epochs` in chunks of `chunk`. Returns
/// `(tokens [N, P·d], pooled [N, d])` as flat row-major arrays.
pub fn encode_epochs(params: &ParamStore, cfg: &EncoderConfig, epochs: &[&[f32]], chunk: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tokens = Vec::with_capacity(epochs.len() * cfg.n_patches() * cfg.d_model);
    let mut pooled = Vec::with_capacity(epochs.len() * cfg.d_model);
    for part in epochs.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let out = encoder_forward(&mut g, params, cfg, part, false, None)?;
        tokens.extend_from_slice(g.value(out.tokens));
        pooled.extend_from_slice(g.value(out.pooled));
    }
    Ok((tokens, pooled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn small() -> EncoderConfig {
        EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 6,
            patch_len: 2,
            n_channels: 2,
            samples_per_epoch: 6,
            mlp_hidden: 3,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    fn epoch(seed: usize, cfg: &EncoderConfig) -> Vec<f32> {
        (0..cfg.n_channels * cfg.samples_per_epoch)
            .map(|i| ((i * 7 + seed * 13) as f32 * 0.37).sin())
            .collect()
    }

    #[test]
    fn full_size_parameter_count() {
        let cfg = EncoderConfig::default();
        let (d, f, pd) = (cfg.d_model, cfg.d_ff, cfg.patch_dim());
        let per_block = 2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        let expected = (pd * d + d) + cfg.n_layers * per_block + 2 * d;
        let p = init_encoder(&cfg, 0).unwrap();
        assert_eq!(p.num_values(), expected);
        assert_eq!(p.num_values(), 1_218_816);
    }

    #[test]
    fn output_shapes() {
        let cfg = EncoderConfig {
            n_layers: 1,
            ..EncoderConfig::default()
        };
        let enc = init_encoder(&cfg, 1).unwrap();
        let head = init_head(&cfg, 1).unwrap();
        let x = vec![0.1f32; 9 * 750];
        let mut g = Graph::new();
        let out = encoder_forward(&mut g, &enc, &cfg, &[&x], false, None).unwrap();
        assert_eq!(g.shape(out.tokens), &[1, 30, 128]);
        assert_eq!(g.shape(out.pooled), &[1, 128]);
        let logits = head_forward(&mut g, &head, &cfg, out.tokens, false).unwrap();
        assert_eq!(g.shape(logits), &[1, 5]);
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let cfg = small();
        let enc = init_encoder(&cfg, 2).unwrap();
        let mut head = init_head(&cfg, 2).unwrap();
        for (_, t) in head.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let x = epoch(0, &cfg);
        let mut g = Graph::new();
        let out = encoder_forward(&mut g, &enc, &cfg, &[&x], false, None).unwrap();
        let logits = head_forward(&mut g, &head, &cfg, out.tokens, false).unwrap();
        let probs = g.softmax(logits, 1).unwrap();
        assert!(g.value(probs).iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn batch_permutation_equivariance() {
        let cfg = small();
        let enc = init_encoder(&cfg, 3).unwrap();
        let (a, b) = (epoch(1, &cfg), epoch(2, &cfg));
        let (_, ab) = encode_epochs(&enc, &cfg, &[&a, &b], 8).unwrap();
        let (_, ba) = encode_epochs(&enc, &cfg, &[&b, &a], 8).unwrap();
        let d = cfg.d_model;
        assert_eq!(&ab[..d], &ba[d..]);
        assert_eq!(&ab[d..], &ba[..d]);
        let (_, single) = encode_epochs(&enc, &cfg, &[&a], 8).unwrap();
        assert_eq!(&ab[..d], &single[..]);
    }

    #[test]
    fn gradient_check_full_encoder_and_head() {
        let cfg = small();
        let mut params = init_encoder(&cfg, 4).unwrap();
        params.extend(init_head(&cfg, 4).unwrap());
        // Non-trivial norms so their gradients are exercised.
        for (name, t) in params.iter_mut() {
            if name.contains(".ln") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v += 0.1 * (i as f64 + 1.0);
                }
            }
        }
        let xs = [epoch(5, &cfg), epoch(6, &cfg)];
        let f = |p: &ParamStore| -> crate::tensor::Result<_> {
            let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
            let mut g = Graph::new();
            let out = encoder_forward(&mut g, p, &cfg, &refs, true, None).map_err(ModelError::into_tensor)?;
            let logits = head_forward(&mut g, p, &cfg, out.tokens, true).unwrap();
            let loss = g.masked_cross_entropy(logits, &[1, 3], &[true, true], crate::tensor::Reduction::Mean)?;
            Ok((g.scalar(loss), g.backward(loss)?))
        };
        let r = finite_difference_check(&params, f, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-4, "{:?}", r.per_param);
    }

    #[test]
    fn dropout_only_with_rng() {
        use rand::SeedableRng;
        let cfg = EncoderConfig {
            dropout: 0.5,
            ..small()
        };
        let enc = init_encoder(&cfg, 7).unwrap();
        let x = epoch(0, &cfg);
        let run = |rng: Option<&mut ChaCha8Rng>| {
            let mut g = Graph::new();
            let out = encoder_forward(&mut g, &enc, &cfg, &[&x], false, rng).unwrap();
            g.value(out.pooled).to_vec()
        };
        assert_eq!(run(None), run(None));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_ne!(run(None), run(Some(&mut rng)));
    }
}
