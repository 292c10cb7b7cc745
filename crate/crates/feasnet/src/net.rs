//! MLP predictor mapping an instance `x` to a candidate solution.
//!
//! Parameters live in one flat vector, per layer the row-major `out x in`
//! weight block followed by the bias. The forward pass is written over
//! [`Algebra`], so inference and tape recording share the same arithmetic
//! and agree bitwise; training lifts each layer as a tracked leaf pair.

use crate::algebra::{Algebra, Plain, Taped};
use crate::autodiff::{NodeId, Tape};
use crate::rawio;
use crate::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Hidden-layer widths used by the desk-scale pipeline.
pub const DEFAULT_HIDDEN: [usize; 4] = [256, 256, 256, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    /// Full size chain: input, hidden widths, output.
    pub sizes: Vec<usize>,
    /// Concatenated `[W_0, b_0, W_1, b_1, ...]`.
    pub flat: Vec<f64>,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelParams {
    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `(fan_in, fan_out)` of layer `i`.
    pub fn layer_dims(&self, i: usize) -> (usize, usize) {
        (self.sizes[i], self.sizes[i + 1])
    }

    /// Offsets of layer `i`'s weight block and bias block in `flat`.
    pub fn layer_ranges(&self, i: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut off = 0;
        for j in 0..i {
            let (fi, fo) = self.layer_dims(j);
            off += fi * fo + fo;
        }
        let (fi, fo) = self.layer_dims(i);
        (off..off + fi * fo, off + fi * fo..off + fi * fo + fo)
    }

    pub fn param_count(&self) -> usize {
        (0..self.layer_count())
            .map(|i| {
                let (fi, fo) = self.layer_dims(i);
                fi * fo + fo
            })
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

/// Glorot-uniform weights (`a = sqrt(6 / (fan_in + fan_out))`), zero
/// biases, deterministic per seed.
pub fn init_mlp(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<ModelParams> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input_dim);
    sizes.extend_from_slice(hidden);
    sizes.push(output_dim);
    if sizes.contains(&0) {
        return Err(Error::Dim("init_mlp: every layer size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = Vec::new();
    for w in sizes.windows(2) {
        let (fi, fo) = (w[0], w[1]);
        let a = (6.0 / (fi + fo) as f64).sqrt();
        for _ in 0..fi * fo {
            flat.push(rng.random_range(-a..a));
        }
        flat.extend(std::iter::repeat_n(0.0, fo));
    }
    Ok(ModelParams { sizes, flat, activation: Activation::Silu, seed })
}

/// Per-layer `(weights, bias)` carriers.
pub type LayerCarriers<V> = Vec<(V, V)>;

/// Bind parameters as constants (inference).
pub fn lift_params<A: Algebra>(alg: &mut A, params: &ModelParams) -> LayerCarriers<A::V> {
    (0..params.layer_count())
        .map(|i| {
            let (wr, br) = params.layer_ranges(i);
            (alg.lift(&params.flat[wr]), alg.lift(&params.flat[br]))
        })
        .collect()
}

/// Bind parameters as tracked leaves (training).
pub fn leaf_params(alg: &mut Taped, params: &ModelParams) -> LayerCarriers<NodeId> {
    (0..params.layer_count())
        .map(|i| {
            let (wr, br) = params.layer_ranges(i);
            (alg.leaf(&params.flat[wr]), alg.leaf(&params.flat[br]))
        })
        .collect()
}

/// Affine then SiLU per hidden layer, bare affine at the output.
pub fn forward_of<A: Algebra>(
    alg: &mut A,
    sizes: &[usize],
    layers: &LayerCarriers<A::V>,
    x: &A::V,
) -> A::V {
    let last = layers.len() - 1;
    let mut cur = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        let (fi, fo) = (sizes[i], sizes[i + 1]);
        let wx = alg.matvec(w, fo, fi, false, &cur);
        let aff = alg.add(&wx, b);
        cur = if i < last { alg.silu(&aff) } else { aff };
    }
    cur
}

/// Record the network on a tape with both `x` and the parameters as
/// tracked leaves; returns the output node.
pub fn forward(params: &ModelParams, x: &[f64], tape: &mut Tape) -> NodeId {
    assert_eq!(x.len(), params.input_dim(), "forward: x has wrong length");
    let mut alg = Taped::new(tape);
    let layers = leaf_params(&mut alg, params);
    let xn = alg.leaf(x);
    forward_of(&mut alg, &params.sizes, &layers, &xn)
}

pub fn forward_plain(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), params.input_dim(), "forward_plain: x has wrong length");
    let mut alg = Plain;
    let layers = lift_params(&mut alg, params);
    let xv = x.to_vec();
    forward_of(&mut alg, &params.sizes, &layers, &xv)
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    sizes: Vec<usize>,
    activation: Activation,
    seed: u64,
}

pub fn save_model(params: &ModelParams, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        sizes: params.sizes.clone(),
        activation: params.activation,
        seed: params.seed,
    };
    std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)?)?;
    rawio::write_f64(&dir.join("model.f64"), &params.flat)
}

pub fn load_model(dir: &Path) -> Result<ModelParams> {
    let mpath = dir.join("model.json");
    let text = std::fs::read_to_string(&mpath).map_err(|_| Error::Missing(mpath.clone()))?;
    let m: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        why: e.to_string(),
    })?;
    if m.sizes.len() < 2 || m.sizes.contains(&0) {
        return Err(Error::Corrupt {
            path: mpath,
            why: "model manifest needs at least input and output sizes, all nonzero".into(),
        });
    }
    let params = ModelParams {
        sizes: m.sizes,
        flat: Vec::new(),
        activation: m.activation,
        seed: m.seed,
    };
    let count = params.param_count();
    let flat = rawio::read_f64(&dir.join("model.f64"), count)?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Corrupt {
            path: dir.join("model.f64"),
            why: "non-finite parameter value".into(),
        });
    }
    Ok(ModelParams { flat, ..params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        let p = init_mlp(2, &[4], 3, 1).unwrap();
        assert_eq!(p.flat.len(), 2 * 4 + 4 + 4 * 3 + 3);
        assert_eq!(p.param_count(), 27);

        let p = init_mlp(5, &[], 2, 1).unwrap();
        assert_eq!(p.flat.len(), 5 * 2 + 2);

        assert!(init_mlp(0, &[4], 3, 1).is_err());
        assert!(init_mlp(2, &[0], 3, 1).is_err());
    }

    #[test]
    fn init_is_deterministic_with_glorot_bounds() {
        let a = init_mlp(3, &[8, 8], 2, 42).unwrap();
        let b = init_mlp(3, &[8, 8], 2, 42).unwrap();
        assert_eq!(
            a.flat.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.flat.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = init_mlp(3, &[8, 8], 2, 43).unwrap();
        assert_ne!(a.flat, c.flat);

        for i in 0..a.layer_count() {
            let (wr, br) = a.layer_ranges(i);
            let (fi, fo) = a.layer_dims(i);
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            assert!(a.flat[wr].iter().all(|v| v.abs() < bound));
            assert!(a.flat[br].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_weights_propagate_final_bias() {
        let mut p = init_mlp(2, &[3], 2, 7).unwrap();
        p.flat.iter_mut().for_each(|v| *v = 0.0);
        let (_, br) = p.layer_ranges(1);
        p.flat[br.clone()].copy_from_slice(&[1.5, -2.5]);
        assert_eq!(forward_plain(&p, &[0.3, -0.9]), vec![1.5, -2.5]);
    }

    #[test]
    fn identity_affine_layer_is_identity() {
        let mut p = init_mlp(3, &[], 3, 7).unwrap();
        p.flat.iter_mut().for_each(|v| *v = 0.0);
        let (wr, _) = p.layer_ranges(0);
        for i in 0..3 {
            p.flat[wr.start + i * 3 + i] = 1.0;
        }
        let x = [0.25, -4.0, 17.0];
        assert_eq!(forward_plain(&p, &x), x.to_vec());
    }

    #[test]
    fn taped_and_plain_forward_agree_bitwise() {
        let p = init_mlp(4, &[6, 5], 3, 11).unwrap();
        let x = [0.4, -1.2, 0.05, 2.2];
        let plain = forward_plain(&p, &x);
        let mut tape = Tape::new();
        let node = forward(&p, &x, &mut tape);
        let taped = tape.val(node);
        assert_eq!(plain.len(), 3);
        for (a, b) in plain.iter().zip(taped) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let p = init_mlp(2, &[3], 2, 5).unwrap();
        let x = [0.7, -0.4];

        // loss = |y|^2 recorded with per-layer leaves
        let mut tape = Tape::new();
        let mut alg = Taped::new(&mut tape);
        let layers = leaf_params(&mut alg, &p);
        let xn = alg.lift(&x);
        let y = forward_of(&mut alg, &p.sizes, &layers, &xn);
        let sq = alg.square(&y);
        let loss = alg.sum(&sq);
        let grads = tape.backward(loss);

        let mut g_ad = vec![0.0; p.flat.len()];
        for (i, (wn, bn)) in layers.iter().enumerate() {
            let (wr, br) = p.layer_ranges(i);
            g_ad[wr].copy_from_slice(grads.wrt(*wn).unwrap());
            g_ad[br].copy_from_slice(grads.wrt(*bn).unwrap());
        }

        let eval = |flat: &[f64]| -> f64 {
            let q = ModelParams { flat: flat.to_vec(), ..p.clone() };
            forward_plain(&q, &x).iter().map(|v| v * v).sum()
        };
        let step = 1e-6;
        let mut flat = p.flat.clone();
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + step;
            let fp = eval(&flat);
            flat[i] = orig - step;
            let fm = eval(&flat);
            flat[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let denom = fd.abs().max(g_ad[i].abs()).max(1.0);
            assert!(
                (fd - g_ad[i]).abs() / denom <= 1e-5,
                "param {i}: ad {} vs fd {fd}",
                g_ad[i]
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_mlp(3, &[4, 4], 2, 99).unwrap();
        save_model(&p, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(p.sizes, back.sizes);
        assert_eq!(p.seed, back.seed);
        for (a, b) in p.flat.iter().zip(&back.flat) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        std::fs::write(dir.path().join("model.json"), "{not json").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Corrupt { .. })));
        std::fs::remove_file(dir.path().join("model.json")).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Missing(_))));
    }
}
