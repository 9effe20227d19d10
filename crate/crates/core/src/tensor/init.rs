use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

/// Fan-in/fan-out for a weight shape.
///
/// Dense weights are stored `[in, out]`. Convolution kernels are
/// `[out, in, k...]` and scale both fans by the receptive field size.
fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 | 1 => Err(TensorError::InvalidShape(format!(
            "xavier init needs at least 2 dims, got {shape:?}"
        ))),
        2 => Ok((shape[0], shape[1])),
        _ => {
            let receptive: usize = shape[2..].iter().product();
            Ok((shape[1] * receptive, shape[0] * receptive))
        }
    }
}

/// Half-width `sqrt(6 / (fan_in + fan_out))` of the Xavier uniform range.
pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    let (fan_in, fan_out) = fans(shape)?;
    if fan_in + fan_out == 0 {
        return Err(TensorError::InvalidShape(format!("zero-sized weight {shape:?}")));
    }
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Xavier/Glorot uniform weights drawn from a ChaCha8 stream seeded by `seed`.
pub fn xavier_uniform_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    let bound = xavier_bound(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_and_range() {
        let t = xavier_uniform_init(&[4, 4], 0).unwrap();
        let a = (6.0f64 / 8.0).sqrt();
        assert!((a - 0.8660).abs() < 1e-4);
        assert!(t.data().iter().all(|v| v.abs() <= a));
        assert!((xavier_bound(&[128, 128]).unwrap() - 0.15309).abs() < 1e-5);
    }

    #[test]
    fn mean_tends_to_zero() {
        let t = xavier_uniform_init(&[256, 256], 3).unwrap();
        let mean: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let bound = xavier_bound(&[256, 256]).unwrap();
        assert!(mean.abs() < 0.01 * bound);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(xavier_uniform_init(&[5, 7], 11).unwrap(), xavier_uniform_init(&[5, 7], 11).unwrap());
        assert_ne!(xavier_uniform_init(&[5, 7], 11).unwrap(), xavier_uniform_init(&[5, 7], 12).unwrap());
    }

    #[test]
    fn conv_fans_use_kernel_length() {
        // [out=8, in=4, k=7]: fan_in 28, fan_out 56.
        assert!((xavier_bound(&[8, 4, 7]).unwrap() - (6.0f64 / 84.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_low_rank_shapes() {
        assert!(xavier_uniform_init(&[], 0).is_err());
        assert!(xavier_uniform_init(&[3], 0).is_err());
    }
}
