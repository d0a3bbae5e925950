use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = apply(z)`.
    #[inline]
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return None,
        })
    }
}

/// Output layer and the loss paired with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Softmax probabilities with cross-entropy loss.
    #[default]
    SoftmaxCrossEntropy,
    /// Linear outputs with half squared error. Targets are one-hot for
    /// multi-output models and the raw label for a single output.
    LinearSquared,
}

impl Head {
    fn code(self) -> u8 {
        match self {
            Head::SoftmaxCrossEntropy => 0,
            Head::LinearSquared => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Head::SoftmaxCrossEntropy),
            1 => Some(Head::LinearSquared),
            _ => None,
        }
    }
}

/// Feed-forward architecture `f(x) = f_n(...f_1(x))` with `f_i = σ(w_i·x + b_i)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub head: Head,
}

impl ModelArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self, ModelError> {
        let arch = ModelArchitecture {
            layer_sizes,
            activation,
            head: Head::SoftmaxCrossEntropy,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::Structure(format!(
                "architecture needs at least 2 layers, got {}",
                self.layer_sizes.len()
            )));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&d| d == 0) {
            return Err(ModelError::Structure(format!("layer {pos} has zero width")));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One dense layer: `weights` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }
}

/// The parameter collection `θ = {w_i, b_i}` of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ModelArchitecture,
    pub layers: Vec<DenseLayer>,
}

const BLOB_MAGIC: &[u8; 4] = b"DFMP";
const BLOB_VERSION: u8 = 1;

/// JSON sidecar written next to a flat parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSidecar {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
    pub num_params: usize,
    pub dtype: String,
    pub byte_order: String,
}

impl ModelParams {
    pub fn zeros(arch: &ModelArchitecture) -> Result<Self, ModelError> {
        arch.validate()?;
        let layers = arch
            .layer_sizes
            .windows(2)
            .map(|w| DenseLayer::zeros(w[0], w[1]))
            .collect();
        Ok(ModelParams {
            arch: arch.clone(),
            layers,
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &ModelArchitecture, rng: &mut R) -> Result<Self, ModelError> {
        let mut params = Self::zeros(arch)?;
        for layer in &mut params.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(params)
    }

    /// Builds params from a flat vector laid out as `w_1, b_1, w_2, b_2, ...`.
    pub fn from_flat(arch: &ModelArchitecture, flat: &[f64]) -> Result<Self, ModelError> {
        let mut params = Self::zeros(arch)?;
        if flat.len() != arch.num_params() {
            return Err(ModelError::Structure(format!(
                "expected {} parameters, got {}",
                arch.num_params(),
                flat.len()
            )));
        }
        let mut cursor = 0;
        for layer in &mut params.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[cursor..cursor + nw]);
            cursor += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&flat[cursor..cursor + nb]);
            cursor += nb;
        }
        params.check_finite()?;
        Ok(params)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend_from_slice(&layer.weights);
            flat.extend_from_slice(&layer.biases);
        }
        flat
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// Structural agreement: same architecture and consistent layer shapes.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.inputs == b.inputs
                    && a.outputs == b.outputs
                    && a.weights.len() == b.weights.len()
                    && a.biases.len() == b.biases.len()
            })
    }

    pub fn check_shape(&self) -> Result<(), ModelError> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.num_layers() {
            return Err(ModelError::Structure(format!(
                "{} layers for an architecture with {}",
                self.layers.len(),
                self.arch.num_layers()
            )));
        }
        for (i, (layer, w)) in self
            .layers
            .iter()
            .zip(self.arch.layer_sizes.windows(2))
            .enumerate()
        {
            if layer.inputs != w[0]
                || layer.outputs != w[1]
                || layer.weights.len() != w[0] * w[1]
                || layer.biases.len() != w[1]
            {
                return Err(ModelError::Structure(format!(
                    "layer {i} shape does not match {}x{}",
                    w[1], w[0]
                )));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer
                .weights
                .iter()
                .chain(&layer.biases)
                .any(|v| !v.is_finite())
            {
                return Err(ModelError::NonFinite { layer: i });
            }
        }
        Ok(())
    }

    /// Self-describing wire encoding:
    /// `"DFMP" | version u8 | activation u8 | head u8 | n u16 | n × size u32 | values f64 LE`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = &self.arch.layer_sizes;
        let mut out = Vec::with_capacity(9 + sizes.len() * 4 + self.num_params() * 8);
        out.extend_from_slice(BLOB_MAGIC);
        out.push(BLOB_VERSION);
        out.push(self.arch.activation.code());
        out.push(self.arch.head.code());
        out.extend_from_slice(&(sizes.len() as u16).to_be_bytes());
        for &s in sizes {
            out.extend_from_slice(&(s as u32).to_be_bytes());
        }
        for v in self.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let malformed = |what: &str| ModelError::Format(what.to_string());
        if bytes.len() < 9 || &bytes[..4] != BLOB_MAGIC {
            return Err(malformed("missing parameter blob magic"));
        }
        if bytes[4] != BLOB_VERSION {
            return Err(malformed("unsupported parameter blob version"));
        }
        let activation =
            Activation::from_code(bytes[5]).ok_or_else(|| malformed("unknown activation"))?;
        let head = Head::from_code(bytes[6]).ok_or_else(|| malformed("unknown head"))?;
        let n = u16::from_be_bytes([bytes[7], bytes[8]]) as usize;
        let sizes_end = 9 + n * 4;
        if bytes.len() < sizes_end {
            return Err(malformed("truncated layer sizes"));
        }
        let layer_sizes: Vec<usize> = bytes[9..sizes_end]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let arch = ModelArchitecture {
            layer_sizes,
            activation,
            head,
        };
        arch.validate()?;
        let body = &bytes[sizes_end..];
        if body.len() != arch.num_params() * 8 {
            return Err(malformed("parameter payload length mismatch"));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_flat(&arch, &flat)
    }

    /// Flat little-endian f64 array, layers in order `w_1, b_1, w_2, b_2, ...`.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        self.values().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn sidecar(&self) -> SnapshotSidecar {
        SnapshotSidecar {
            layer_sizes: self.arch.layer_sizes.clone(),
            activation: self.arch.activation,
            head: self.arch.head,
            num_params: self.num_params(),
            dtype: "f64".into(),
            byte_order: "little".into(),
        }
    }

    /// Writes `<path>` (raw values) and `<path>.json` (sidecar).
    pub fn save_snapshot(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.snapshot_bytes())?;
        let sidecar = serde_json::to_vec_pretty(&self.sidecar())
            .map_err(|e| ModelError::Format(e.to_string()))?;
        std::fs::write(sidecar_path(path), sidecar)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, ModelError> {
        let sidecar: SnapshotSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)
            .map_err(|e| ModelError::Format(e.to_string()))?;
        let raw = std::fs::read(path)?;
        if raw.len() % 8 != 0 {
            return Err(ModelError::Format("snapshot length is not a multiple of 8".into()));
        }
        let flat: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let arch = ModelArchitecture {
            layer_sizes: sidecar.layer_sizes,
            activation: sidecar.activation,
            head: sidecar.head,
        };
        Self::from_flat(&arch, &flat)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ModelArchitecture {
        ModelArchitecture::new(vec![3, 5, 2], Activation::Tanh).unwrap()
    }

    #[test]
    fn architecture_rejects_degenerate_shapes() {
        assert!(ModelArchitecture::new(vec![4], Activation::Tanh).is_err());
        assert!(ModelArchitecture::new(vec![4, 0, 2], Activation::Tanh).is_err());
        assert_eq!(arch().num_params(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn blob_rejects_garbage_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&arch(), &mut rng).unwrap();
        let bytes = p.to_bytes();
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ModelParams::from_bytes(b"not a model").is_err());
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn blob_rejects_non_finite_values() {
        let mut p = ModelParams::zeros(&arch()).unwrap();
        p.layers[1].biases[0] = f64::NAN;
        let err = ModelParams::from_bytes(&p.to_bytes()).unwrap_err();
        assert!(matches!(err, ModelError::NonFinite { layer: 1 }));
    }

    #[test]
    fn snapshot_writes_flat_array_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init(&arch(), &mut rng).unwrap();
        p.save_snapshot(&path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(raw.len(), p.num_params() * 8);
        assert_eq!(&raw[..8], &p.layers[0].weights[0].to_le_bytes());
        let sidecar: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("theta.bin.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["layer_sizes"], serde_json::json!([3, 5, 2]));
        assert_eq!(ModelParams::load_snapshot(&path).unwrap(), p);
    }
}
