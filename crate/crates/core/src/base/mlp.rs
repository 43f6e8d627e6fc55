//! Feedforward 4→3→1 network mapping a metered cell's local measurements
//! (n_i, q_i, d_i, o_{i-1}) to an ALINEA gain.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ScenarioError, TrainingError};

pub const N_INPUTS: usize = 4;
pub const N_HIDDEN: usize = 3;
/// Number of trainable parameters: 3·4 + 3 + 3 + 1.
pub const N_PARAMS: usize = N_HIDDEN * N_INPUTS + N_HIDDEN + N_HIDDEN + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Logistic,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Logistic => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation value.
    #[inline]
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Logistic => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Logistic => "logistic",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub hidden_weights: [[f64; N_INPUTS]; N_HIDDEN],
    pub hidden_bias: [f64; N_HIDDEN],
    pub output_weights: [f64; N_HIDDEN],
    pub output_bias: f64,
    pub activation: Activation,
    /// Inputs are mapped to [0, 1] by (x − min) / (max − min).
    pub input_min: [f64; N_INPUTS],
    pub input_max: [f64; N_INPUTS],
}

impl MlpParams {
    pub fn zeros(input_min: [f64; N_INPUTS], input_max: [f64; N_INPUTS]) -> Self {
        MlpParams {
            hidden_weights: [[0.0; N_INPUTS]; N_HIDDEN],
            hidden_bias: [0.0; N_HIDDEN],
            output_weights: [0.0; N_HIDDEN],
            output_bias: 0.0,
            activation: Activation::Logistic,
            input_min,
            input_max,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for k in 0..N_INPUTS {
            let span = self.input_max[k] - self.input_min[k];
            if !self.input_min[k].is_finite() || !span.is_finite() || span == 0.0 {
                return Err(format!("input scaling {k} has invalid range [{}, {}]", self.input_min[k], self.input_max[k]));
            }
        }
        if !self.to_vector().iter().all(|v| v.is_finite()) {
            return Err("non-finite weight".into());
        }
        Ok(())
    }

    pub fn scale(&self, inputs: &[f64; N_INPUTS]) -> [f64; N_INPUTS] {
        let mut x = [0.0; N_INPUTS];
        for k in 0..N_INPUTS {
            x[k] = (inputs[k] - self.input_min[k]) / (self.input_max[k] - self.input_min[k]);
        }
        x
    }

    /// Flat parameter layout: hidden weights row-major, hidden bias,
    /// output weights, output bias.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_PARAMS);
        self.hidden_weights.iter().for_each(|row| v.extend_from_slice(row));
        v.extend_from_slice(&self.hidden_bias);
        v.extend_from_slice(&self.output_weights);
        v.push(self.output_bias);
        v
    }

    pub fn set_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), N_PARAMS, "parameter vector length");
        for h in 0..N_HIDDEN {
            self.hidden_weights[h].copy_from_slice(&v[h * N_INPUTS..(h + 1) * N_INPUTS]);
        }
        let b = N_HIDDEN * N_INPUTS;
        self.hidden_bias.copy_from_slice(&v[b..b + N_HIDDEN]);
        self.output_weights.copy_from_slice(&v[b + N_HIDDEN..b + 2 * N_HIDDEN]);
        self.output_bias = v[N_PARAMS - 1];
    }

    pub(crate) fn forward_scaled(&self, x: &[f64; N_INPUTS]) -> ([f64; N_HIDDEN], f64) {
        let mut hidden = [0.0; N_HIDDEN];
        let mut out = self.output_bias;
        for h in 0..N_HIDDEN {
            let z = self.hidden_bias[h] + (0..N_INPUTS).map(|k| self.hidden_weights[h][k] * x[k]).sum::<f64>();
            hidden[h] = self.activation.apply(z);
            out += self.output_weights[h] * hidden[h];
        }
        (hidden, out)
    }

    /// Accumulates ∂out/∂params · `upstream` into `grad` for one scaled input.
    pub(crate) fn backprop(&self, x: &[f64; N_INPUTS], upstream: f64, grad: &mut [f64]) -> f64 {
        let (hidden, out) = self.forward_scaled(x);
        let b = N_HIDDEN * N_INPUTS;
        for h in 0..N_HIDDEN {
            grad[b + N_HIDDEN + h] += upstream * hidden[h];
            let dz = upstream * self.output_weights[h] * self.activation.slope(hidden[h]);
            grad[b + h] += dz;
            for k in 0..N_INPUTS {
                grad[h * N_INPUTS + k] += dz * x[k];
            }
        }
        grad[N_PARAMS - 1] += upstream;
        out
    }
}

/// Forward pass: scale, hidden activation, linear output.
pub fn mlp_forward(params: &MlpParams, inputs: &[f64; N_INPUTS]) -> Result<f64, TrainingError> {
    if !inputs.iter().all(|v| v.is_finite()) {
        return Err(TrainingError::NonFiniteInput(*inputs));
    }
    Ok(params.forward_scaled(&params.scale(inputs)).1)
}

// ---------------------------------------------------------------------------
// Parameter file

pub const MLP_FILE_FORMAT: &str = "basepar-mlp";
pub const MLP_FILE_VERSION: u32 = 1;

/// One network of the parameter file.
///
/// `hidden_weights` is the 3×4 input-to-hidden matrix flattened row-major
/// (row = hidden unit), `output_weights` the 1×3 hidden-to-output matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    /// Index of the metered cell this network serves.
    pub cell: usize,
    /// Layer sizes, always [4, 3, 1].
    pub shape: Vec<usize>,
    pub activation: Activation,
    /// Always "identity".
    pub output_activation: String,
    pub input_names: Vec<String>,
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub format: String,
    pub version: u32,
    /// Interval the network outputs are clamped to before use.
    pub gain_bounds: [f64; 2],
    pub networks: Vec<MlpRecord>,
}

impl MlpRecord {
    pub fn from_params(cell: usize, p: &MlpParams) -> Self {
        MlpRecord {
            cell,
            shape: vec![N_INPUTS, N_HIDDEN, 1],
            activation: p.activation,
            output_activation: "identity".into(),
            input_names: ["n", "q", "d", "o_upstream"].iter().map(|s| s.to_string()).collect(),
            input_min: p.input_min.to_vec(),
            input_max: p.input_max.to_vec(),
            hidden_weights: p.hidden_weights.iter().flatten().copied().collect(),
            hidden_bias: p.hidden_bias.to_vec(),
            output_weights: p.output_weights.to_vec(),
            output_bias: vec![p.output_bias],
            validation_rmse: None,
            target_std: None,
        }
    }

    pub fn to_params(&self) -> Result<MlpParams, String> {
        if self.shape != [N_INPUTS, N_HIDDEN, 1] {
            return Err(format!("cell {}: shape {:?}, expected [4, 3, 1]", self.cell, self.shape));
        }
        if self.output_activation != "identity" {
            return Err(format!("cell {}: unsupported output activation {}", self.cell, self.output_activation));
        }
        let lens = [
            ("input_min", self.input_min.len(), N_INPUTS),
            ("input_max", self.input_max.len(), N_INPUTS),
            ("hidden_weights", self.hidden_weights.len(), N_HIDDEN * N_INPUTS),
            ("hidden_bias", self.hidden_bias.len(), N_HIDDEN),
            ("output_weights", self.output_weights.len(), N_HIDDEN),
            ("output_bias", self.output_bias.len(), 1),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(format!("cell {}: {name} has {got} values, expected {want}", self.cell));
            }
        }
        let mut p = MlpParams::zeros(
            self.input_min.clone().try_into().expect("length checked"),
            self.input_max.clone().try_into().expect("length checked"),
        );
        p.activation = self.activation;
        let mut v = self.hidden_weights.clone();
        v.extend_from_slice(&self.hidden_bias);
        v.extend_from_slice(&self.output_weights);
        v.extend_from_slice(&self.output_bias);
        p.set_vector(&v);
        p.validate().map_err(|e| format!("cell {}: {e}", self.cell))?;
        Ok(p)
    }
}

impl MlpFile {
    pub fn new(gain_bounds: [f64; 2], networks: Vec<MlpRecord>) -> Self {
        MlpFile {
            format: MLP_FILE_FORMAT.into(),
            version: MLP_FILE_VERSION,
            gain_bounds,
            networks,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let file: MlpFile = serde_json::from_str(text).map_err(|e| ScenarioError::ParamFile(e.to_string()))?;
        if file.format != MLP_FILE_FORMAT || file.version != MLP_FILE_VERSION {
            return Err(ScenarioError::ParamFile(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let [lo, hi] = file.gain_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(ScenarioError::ParamFile(format!("gain bounds [{lo}, {hi}]")));
        }
        for r in &file.networks {
            r.to_params().map_err(ScenarioError::ParamFile)?;
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        MlpFile::from_json(&text)
    }
}

/// One gain network per metered ramp, in metered-cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnBank {
    pub cells: Vec<usize>,
    pub networks: Vec<MlpParams>,
    pub gain_bounds: (f64, f64),
}

impl AnnBank {
    /// θ for each metered ramp, clamped to the gain bounds.
    pub fn gains(&self, inputs: &[[f64; N_INPUTS]]) -> Result<Vec<f64>, TrainingError> {
        self.networks
            .iter()
            .zip(inputs)
            .map(|(net, x)| Ok(mlp_forward(net, x)?.clamp(self.gain_bounds.0, self.gain_bounds.1)))
            .collect()
    }

    pub fn to_file(&self) -> MlpFile {
        MlpFile::new(
            [self.gain_bounds.0, self.gain_bounds.1],
            self.cells
                .iter()
                .zip(&self.networks)
                .map(|(&c, p)| MlpRecord::from_params(c, p))
                .collect(),
        )
    }

    pub fn from_file(file: &MlpFile) -> Result<Self, ScenarioError> {
        let networks = file
            .networks
            .iter()
            .map(|r| r.to_params().map_err(ScenarioError::ParamFile))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AnnBank {
            cells: file.networks.iter().map(|r| r.cell).collect(),
            networks,
            gain_bounds: (file.gain_bounds[0], file.gain_bounds[1]),
        })
    }
}
