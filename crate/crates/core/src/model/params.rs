use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const POSITION_BANK: &str = "queries.position";

/// Named parameter arrays of one network. Student and teacher share the
/// same names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameter names and shapes for a configuration, in a fixed order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.feature_dim;
    let mut shapes = vec![
        ("encoder.w1".to_string(), vec![6, c]),
        ("encoder.b1".to_string(), vec![c]),
        ("encoder.w2".to_string(), vec![c, c]),
        ("encoder.b2".to_string(), vec![c]),
        ("posenc.w".to_string(), vec![config.fourier_width(), c]),
        ("posenc.b".to_string(), vec![c]),
        ("class_head.w".to_string(), vec![c, config.num_classes + 1]),
        ("class_head.b".to_string(), vec![config.num_classes + 1]),
        (POSITION_BANK.to_string(), vec![config.num_queries, 3]),
    ];
    for l in 0..config.decoder_layers {
        for block in ["cross", "self"] {
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.push((format!("layer{l}.{block}.{w}"), vec![c, c]));
            }
        }
        for norm in ["norm1", "norm2", "norm3"] {
            shapes.push((format!("layer{l}.{norm}.gamma"), vec![c]));
            shapes.push((format!("layer{l}.{norm}.beta"), vec![c]));
        }
        shapes.push((format!("layer{l}.ffn.w1"), vec![c, config.ffn_dim]));
        shapes.push((format!("layer{l}.ffn.b1"), vec![config.ffn_dim]));
        shapes.push((format!("layer{l}.ffn.w2"), vec![config.ffn_dim, c]));
        shapes.push((format!("layer{l}.ffn.b2"), vec![c]));
    }
    shapes
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform matrices, zero biases, unit layer-norm gains and a
    /// position bank drawn uniformly from the unit cube.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_shapes(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == POSITION_BANK {
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            tensors.insert(name, Tensor::from_f64(&shape, &data)?);
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_map(config: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self, ModelError> {
        let expected = param_shapes(config);
        if tensors.len() != expected.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} arrays given, configuration needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(ModelError::ShapeMismatch(format!("missing array {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::ShapeMismatch(format!(
                        "{name} has shape {:?}, configuration needs {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(ModelError::ShapeMismatch(format!("{name} holds non-finite values")))
                }
                _ => {}
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn same_shapes(&self, other: &ModelParams<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    /// All values concatenated in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&self, values: &[T]) -> Result<Self, ModelError> {
        if values.len() != self.num_values() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        let mut out = self.clone();
        for t in out.tensors.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Inserts every array on the tape, as gradient-tracked leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Binds every array as a view into one flat vector laid out as by
    /// [`flatten`](Self::flatten); gradients then arrive on `flat`.
    pub fn bind_flat(&self, tape: &mut Tape<T>, flat: Var) -> Result<BoundParams, ModelError> {
        let mut offset = 0;
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.view(flat, offset, t.shape())?);
            offset += t.numel();
        }
        Ok(BoundParams { vars })
    }
}

/// Tape handles of a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_declared_shapes() {
        let config = ModelConfig::desk();
        let p = ModelParams::<f32>::init(&config, 1).unwrap();
        for (name, shape) in param_shapes(&config) {
            assert_eq!(p.get(&name).unwrap().shape(), shape.as_slice(), "{name}");
        }
        let bank = p.get(POSITION_BANK).unwrap();
        assert!(bank.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn flatten_round_trip() {
        let config = ModelConfig::desk();
        let p = ModelParams::<f64>::init(&config, 2).unwrap();
        let q = p.unflatten(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(p.unflatten(&[0.0]).is_err());
    }

    #[test]
    fn from_map_checks_shapes() {
        let config = ModelConfig::desk();
        let p = ModelParams::<f64>::init(&config, 2).unwrap();
        let mut map: BTreeMap<_, _> = p.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert!(ModelParams::from_map(&config, map.clone()).is_ok());
        map.insert("encoder.b1".into(), Tensor::zeros(&[3]));
        assert!(matches!(ModelParams::from_map(&config, map), Err(ModelError::ShapeMismatch(_))));
    }
}
