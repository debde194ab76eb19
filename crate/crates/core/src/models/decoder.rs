use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Result};
use crate::numerics::nn::sigmoid;
use crate::numerics::{Cache, Net, NetGrads, Real, Tensor};

/// How the last decoder network's output becomes an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    /// The network output is the image.
    Direct,
    /// The network emits `3·P` logits split into `(x̂₁, x̂₂, σ)`; each passes
    /// through a logistic and the image is `σ⊙x̂₁ + (1−σ)⊙x̂₂`.
    Split,
}

impl OutputHead {
    pub fn image_dim(self, net_out: usize) -> usize {
        match self {
            OutputHead::Direct => net_out,
            OutputHead::Split => net_out / 3,
        }
    }
}

/// `σ⊙x̂₁ + (1−σ)⊙x̂₂`, elementwise.
pub fn combine_split<T: Real>(x1: &[T], x2: &[T], sigma: &[T]) -> Vec<T> {
    x1.iter()
        .zip(x2)
        .zip(sigma)
        .map(|((a, b), s)| {
            let s = s.to_f64();
            T::from_f64(s * a.to_f64() + (1.0 - s) * b.to_f64())
        })
        .collect()
}

pub(crate) struct ChainCache<T> {
    caches: Vec<Cache<T>>,
    /// Logistic outputs `(x̂₁, x̂₂, σ)` per element, for the split head.
    split: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn split_forward<T: Real>(raw: &Tensor<T>) -> Result<(Tensor<T>, (Vec<f64>, Vec<f64>, Vec<f64>))> {
    let m = raw.rows();
    let w = raw.row_len();
    if w % 3 != 0 {
        return Err(dim_mismatch("split head width", "multiple of 3", w));
    }
    let p = w / 3;
    let mut x1 = Vec::with_capacity(m * p);
    let mut x2 = Vec::with_capacity(m * p);
    let mut s = Vec::with_capacity(m * p);
    for i in 0..m {
        let r = raw.row(i);
        x1.extend(r[..p].iter().map(|v| sigmoid(v.to_f64())));
        x2.extend(r[p..2 * p].iter().map(|v| sigmoid(v.to_f64())));
        s.extend(r[2 * p..].iter().map(|v| sigmoid(v.to_f64())));
    }
    let out = combine_split(&x1, &x2, &s)
        .into_iter()
        .map(|v| T::from_f64(v))
        .collect();
    Ok((Tensor::new(vec![m, p], out)?, (x1, x2, s)))
}

pub(crate) fn chain_forward<T: Real>(
    nets: &[&Net<T>],
    head: OutputHead,
    codes: &Tensor<T>,
) -> Result<(Tensor<T>, ChainCache<T>)> {
    let mut caches = Vec::with_capacity(nets.len());
    let mut x = codes.as_matrix();
    for net in nets {
        let (y, c) = net.forward(&x)?;
        caches.push(c);
        x = y;
    }
    match head {
        OutputHead::Direct => Ok((
            x,
            ChainCache {
                caches,
                split: None,
            },
        )),
        OutputHead::Split => {
            let (out, parts) = split_forward(&x)?;
            Ok((
                out,
                ChainCache {
                    caches,
                    split: Some(parts),
                },
            ))
        }
    }
}

/// Reverse pass through the head and every network. Returns per-network
/// parameter gradients and the gradient for the codes.
pub(crate) fn chain_backward<T: Real>(
    nets: &[&Net<T>],
    cache: &ChainCache<T>,
    grad_images: &Tensor<T>,
) -> Result<(Vec<NetGrads<T>>, Tensor<T>)> {
    let mut g = match &cache.split {
        None => grad_images.as_matrix(),
        Some((x1, x2, s)) => {
            let m = grad_images.rows();
            let p = grad_images.row_len();
            let mut data = vec![T::default(); m * 3 * p];
            for i in 0..m {
                for j in 0..p {
                    let k = i * p + j;
                    let go = grad_images.data()[k].to_f64();
                    let row = &mut data[i * 3 * p..(i + 1) * 3 * p];
                    row[j] = T::from_f64(go * s[k] * x1[k] * (1.0 - x1[k]));
                    row[p + j] = T::from_f64(go * (1.0 - s[k]) * x2[k] * (1.0 - x2[k]));
                    row[2 * p + j] = T::from_f64(go * (x1[k] - x2[k]) * s[k] * (1.0 - s[k]));
                }
            }
            Tensor::new(vec![m, 3 * p], data)?
        }
    };
    let mut grads = Vec::with_capacity(nets.len());
    for (net, c) in nets.iter().zip(&cache.caches).rev() {
        let (pg, gi) = net.backward(c, &g)?;
        grads.push(pg);
        g = gi;
    }
    grads.reverse();
    Ok((grads, g))
}

pub(crate) fn decode_chain<T: Real>(
    nets: &[&Net<T>],
    head: OutputHead,
    codes: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut x = codes.as_matrix();
    for net in nets {
        x = net.predict(&x)?;
    }
    match head {
        OutputHead::Direct => Ok(x),
        OutputHead::Split => Ok(split_forward(&x)?.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_one_selects_first_image() {
        let x1 = [0.1f32, 0.7, 0.3];
        let x2 = [0.9f32, 0.2, 0.5];
        assert_eq!(combine_split(&x1, &x2, &[1.0; 3]), x1.to_vec());
    }

    #[test]
    fn half_sigma_averages() {
        let out = combine_split(&[0.0f32; 4], &[1.0f32; 4], &[0.5; 4]);
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn split_head_matches_direct_recomputation() {
        let raw = Tensor::<f64>::from_fn(&[2, 9], |i| (i as f64 * 0.37).sin() * 4.0);
        let (out, _) = split_forward(&raw).unwrap();
        for i in 0..2 {
            let r = raw.row(i);
            for j in 0..3 {
                let s = 1.0 / (1.0 + (-r[6 + j]).exp());
                let a = 1.0 / (1.0 + (-r[j]).exp());
                let b = 1.0 / (1.0 + (-r[3 + j]).exp());
                assert!((out.row(i)[j] - (s * a + (1.0 - s) * b)).abs() < 1e-12);
                assert!(s > 0.0 && s < 1.0);
            }
        }
    }
}
