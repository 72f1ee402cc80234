use imp_tensor::{ParamTree, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            path: path.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Weight matrix `[fan_in, fan_out]` with `N(0, 1/fan_in)` entries.
pub(crate) fn dense(path: String, fan_in: usize, fan_out: usize) -> ParamSpec {
    ParamSpec::new(
        path,
        &[fan_in, fan_out],
        Init::Normal {
            std: (fan_in as f64).recip().sqrt(),
        },
    )
}

/// Counter-based stream for `(seed, tag)`: the same pair always yields the
/// same sequence, independent of anything else drawn in the process.
pub fn keyed_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Materializes every spec; each tensor draws from its own path-keyed stream,
/// so adding a parameter never perturbs the others. Values are drawn in `f64`
/// and rounded, so `f32` and `f64` runs start from the same point.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], seed: u64) -> Result<ParamTree<T>> {
    let mut tree = ParamTree::new();
    for spec in specs {
        let value = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape)?,
            Init::Ones => Tensor::ones(&spec.shape)?,
            Init::Constant(c) => Tensor::full(&spec.shape, T::lit(c))?,
            Init::Normal { std } => {
                let mut rng = keyed_rng(seed, &format!("param/{}", spec.path));
                Tensor::from_fn(&spec.shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z * std)
                })?
            }
        };
        tree.insert(spec.path.clone(), value)?;
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_keyed_by_path() {
        let a = [ParamSpec::new("x", &[4], Init::Normal { std: 1.0 })];
        let b = [
            ParamSpec::new("a", &[3], Init::Normal { std: 1.0 }),
            ParamSpec::new("x", &[4], Init::Normal { std: 1.0 }),
        ];
        let ta = init_params::<f64>(&a, 7).unwrap();
        let tb = init_params::<f64>(&b, 7).unwrap();
        assert_eq!(ta.get("x").unwrap(), tb.get("x").unwrap());
        let other = init_params::<f64>(&a, 8).unwrap();
        assert_ne!(ta.get("x").unwrap(), other.get("x").unwrap());
    }

    #[test]
    fn precisions_agree_after_rounding() {
        let specs = [ParamSpec::new("w", &[8], Init::Normal { std: 0.5 })];
        let t32 = init_params::<f32>(&specs, 1).unwrap();
        let t64 = init_params::<f64>(&specs, 1).unwrap();
        let rounded: Vec<f32> = t64
            .get("w")
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f32)
            .collect();
        assert_eq!(t32.get("w").unwrap().data(), rounded.as_slice());
    }
}
