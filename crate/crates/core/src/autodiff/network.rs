use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Feed-forward network: tanh on every hidden layer, identity on the output.
///
/// `weights[l]` has shape `(layer_dims[l + 1], layer_dims[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layer_dims: Vec<usize>,
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
    activation: Activation,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::config(
            "model.layer_dims",
            format!("need at least 2 entries, got {}", layer_dims.len()),
        ));
    }
    if let Some(pos) = layer_dims.iter().position(|&w| w == 0) {
        return Err(Error::config(
            format!("model.layer_dims[{pos}]"),
            "layer widths must be positive",
        ));
    }
    Ok(())
}

impl Network {
    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = glorot_bound(fan_in, fan_out);
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                rng.random_range(-bound..=bound)
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Network {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation: Activation::Tanh,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        Ok(Network {
            layer_dims: layer_dims.to_vec(),
            weights: layer_dims
                .windows(2)
                .map(|p| Array2::zeros((p[1], p[0])))
                .collect(),
            biases: layer_dims.windows(2).map(|p| Array1::zeros(p[1])).collect(),
            activation: Activation::Tanh,
        })
    }

    /// Builds a network from explicit layer parameters.
    pub fn from_layers(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut dims = vec![weights[0].ncols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *dims.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::Shape(format!(
                    "layer {l}: weight {:?} and bias {} do not chain",
                    w.dim(),
                    b.len()
                )));
            }
            dims.push(w.nrows());
        }
        check_dims(&dims)?;
        Ok(Network {
            layer_dims: dims,
            weights,
            biases,
            activation: Activation::Tanh,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &Array1<f64> {
        &self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Flat parameter vector: per layer, row-major weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, network has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for (dst, src) in w.iter_mut().zip(&flat[offset..]) {
                *dst = *src;
            }
            offset += w.len();
            for (dst, src) in b.iter_mut().zip(&flat[offset..]) {
                *dst = *src;
            }
            offset += b.len();
        }
        Ok(())
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(flat)?;
        Ok(net)
    }

    /// Plain evaluation at one point.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut a = Array1::from(x.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.dot(&a) + b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        Ok(a.to_vec())
    }

    /// SHA-256 over layer dims and the little-endian parameter bytes.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for d in &self.layer_dims {
            hasher.update((*d as u64).to_le_bytes());
        }
        for p in self.params() {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            format: "derl-network".to_string(),
            version: 1,
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        };
        serde_json::to_string(&file).expect("network serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)
            .map_err(|e| Error::format("<network json>", e.to_string()))?;
        file.into_network()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: NetworkFile =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        file.into_network()
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl NetworkFile {
    fn into_network(self) -> Result<Network> {
        check_dims(&self.layer_dims)?;
        let n = self.layer_dims.len() - 1;
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::Shape("layer count does not match layer_dims".into()));
        }
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for (l, (w, b)) in self.weights.into_iter().zip(self.biases).enumerate() {
            let (rows, cols) = (self.layer_dims[l + 1], self.layer_dims[l]);
            weights.push(
                Array2::from_shape_vec((rows, cols), w)
                    .map_err(|e| Error::Shape(format!("layer {l} weights: {e}")))?,
            );
            if b.len() != rows {
                return Err(Error::Shape(format!("layer {l} bias length {}", b.len())));
            }
            biases.push(Array1::from(b));
        }
        Ok(Network {
            layer_dims: self.layer_dims,
            weights,
            biases,
            activation: self.activation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = Network::init(&[3, 50, 50, 50, 50, 1], 0).unwrap();
        let b = Network::init(&[3, 50, 50, 50, 50, 1], 0).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Network::init(&[3, 50, 50, 50, 50, 1], 1).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn output_bias_starts_at_zero() {
        for seed in 0..5 {
            let net = Network::init(&[2, 1], seed).unwrap();
            assert_eq!(net.biases(0)[0], 0.0);
        }
    }

    #[test]
    fn weights_within_glorot_bound() {
        let net = Network::init(&[3, 50, 1], 1).unwrap();
        for l in 0..net.num_layers() {
            let w = net.weights(l);
            let bound = (6.0 / (w.ncols() + w.nrows()) as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
            // bound is actually used, not some much smaller range
            assert!(w.iter().any(|v| v.abs() > 0.5 * bound));
        }
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(matches!(Network::init(&[], 0), Err(Error::Config { .. })));
        assert!(matches!(Network::init(&[3], 0), Err(Error::Config { .. })));
        assert!(matches!(Network::init(&[3, 0, 1], 0), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_network_outputs_bias() {
        let mut net = Network::zeros(&[2, 8, 3]).unwrap();
        net.biases[1] = Array1::from(vec![0.5, -1.0, 2.0]);
        assert_eq!(net.forward(&[0.3, -4.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn single_linear_layer_bypasses_tanh() {
        let net =
            Network::from_layers(vec![Array2::from_elem((1, 1), 1.0)], vec![Array1::zeros(1)])
                .unwrap();
        assert_eq!(net.forward(&[0.3]).unwrap(), vec![0.3]);
    }

    #[test]
    fn forward_rejects_wrong_input_len() {
        let net = Network::init(&[2, 4, 1], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_matches_naive_loops() {
        let net = Network::init(&[3, 7, 5, 2], 11).unwrap();
        let x = [0.2, -0.7, 1.3];
        // independent reference: explicit index loops
        let mut a: Vec<f64> = x.to_vec();
        for l in 0..net.num_layers() {
            let w = net.weights(l);
            let b = net.biases(l);
            let mut z = vec![0.0; w.nrows()];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut s = b[r];
                for c in 0..w.ncols() {
                    s += w[[r, c]] * a[c];
                }
                *zr = if l + 1 < net.num_layers() { s.tanh() } else { s };
            }
            a = z;
        }
        let got = net.forward(&x).unwrap();
        for (g, e) in got.iter().zip(&a) {
            assert!((g - e).abs() <= 1e-14 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let net = Network::init(&[2, 9, 9, 3], 5).unwrap();
        let back = Network::from_json(&net.to_json()).unwrap();
        assert_eq!(net, back);
        assert_eq!(net.hash(), back.hash());
    }

    #[test]
    fn params_round_trip() {
        let net = Network::init(&[2, 4, 1], 3).unwrap();
        let mut other = Network::zeros(&[2, 4, 1]).unwrap();
        other.set_params(&net.params()).unwrap();
        assert_eq!(net, other);
        assert!(other.set_params(&[1.0]).is_err());
    }
}
