use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{LstmWeights, Matrix, Node, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// One-hidden-layer tanh MLP applied to each concept embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub hidden_w: Matrix,
    pub hidden_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_input: Matrix,
    pub w_hidden: Matrix,
    pub bias: Matrix,
}

/// Additive pointer scorer:
/// `score_j = out^T tanh(state_w^T h + cand_w^T e_j + target_w^T x_T + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    pub state_w: Matrix,
    pub cand_w: Matrix,
    pub target_w: Matrix,
    pub bias: Matrix,
    pub out: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KtParams {
    pub hidden_w: Matrix,
    pub hidden_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

/// Every trainable weight of the recommender.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: Matrix,
    pub attention: Option<AttentionParams>,
    pub mlp: Option<MlpParams>,
    /// Maps `[x_c ; y]` history rows to the LSTM input width.
    pub history_proj: Matrix,
    pub lstm: LstmParams,
    pub scorer: ScorerParams,
    pub kt: KtParams,
}

fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

fn init_bias<R: Rng + ?Sized>(fan_in: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::uniform(1, cols, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.lstm_hidden;
        let a = config.score_dim;
        let enc = config.encoder_width();
        let lstm_in = config.lstm_input_width();

        let embedding = Matrix::uniform(config.num_concepts, d, 1.0 / (d as f64).sqrt(), rng);
        let attention = config.encoder.uses_attention().then(|| AttentionParams {
            query: init_weight(d, d, rng),
            key: init_weight(d, d, rng),
            value: init_weight(d, d, rng),
        });
        let mlp = config.encoder.uses_mlp().then(|| MlpParams {
            hidden_w: init_weight(d, d, rng),
            hidden_b: init_bias(d, d, rng),
            out_w: init_weight(d, d, rng),
            out_b: init_bias(d, d, rng),
        });
        let history_proj = init_weight(d + 1, lstm_in, rng);

        let mut bias = init_bias(lstm_in, 4 * h, rng);
        for j in h..2 * h {
            bias.set(0, j, 1.0);
        }
        let lstm = LstmParams {
            w_input: init_weight(lstm_in, 4 * h, rng),
            w_hidden: init_weight(h, 4 * h, rng),
            bias,
        };
        let scorer = ScorerParams {
            state_w: init_weight(h, a, rng),
            cand_w: init_weight(enc, a, rng),
            target_w: init_weight(d, a, rng),
            bias: init_bias(h, a, rng),
            out: init_weight(a, 1, rng),
        };
        let kt = KtParams {
            hidden_w: init_weight(h, a, rng),
            hidden_b: init_bias(h, a, rng),
            out_w: init_weight(a, 1, rng),
            out_b: init_bias(a, 1, rng),
        };
        Ok(Self {
            embedding,
            attention,
            mlp,
            history_proj,
            lstm,
            scorer,
            kt,
        })
    }

    /// Tensors in canonical order with stable names.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("embedding", &self.embedding)];
        if let Some(at) = &self.attention {
            out.extend([
                ("attention.query", &at.query),
                ("attention.key", &at.key),
                ("attention.value", &at.value),
            ]);
        }
        if let Some(m) = &self.mlp {
            out.extend([
                ("mlp.hidden_w", &m.hidden_w),
                ("mlp.hidden_b", &m.hidden_b),
                ("mlp.out_w", &m.out_w),
                ("mlp.out_b", &m.out_b),
            ]);
        }
        out.extend([
            ("history_proj", &self.history_proj),
            ("lstm.w_input", &self.lstm.w_input),
            ("lstm.w_hidden", &self.lstm.w_hidden),
            ("lstm.bias", &self.lstm.bias),
            ("scorer.state_w", &self.scorer.state_w),
            ("scorer.cand_w", &self.scorer.cand_w),
            ("scorer.target_w", &self.scorer.target_w),
            ("scorer.bias", &self.scorer.bias),
            ("scorer.out", &self.scorer.out),
            ("kt.hidden_w", &self.kt.hidden_w),
            ("kt.hidden_b", &self.kt.hidden_b),
            ("kt.out_w", &self.kt.out_w),
            ("kt.out_b", &self.kt.out_b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        if let Some(at) = &mut self.attention {
            out.extend([&mut at.query, &mut at.key, &mut at.value]);
        }
        if let Some(m) = &mut self.mlp {
            out.extend([&mut m.hidden_w, &mut m.hidden_b, &mut m.out_w, &mut m.out_b]);
        }
        out.extend([
            &mut self.history_proj,
            &mut self.lstm.w_input,
            &mut self.lstm.w_hidden,
            &mut self.lstm.bias,
            &mut self.scorer.state_w,
            &mut self.scorer.cand_w,
            &mut self.scorer.target_w,
            &mut self.scorer.bias,
            &mut self.scorer.out,
            &mut self.kt.hidden_w,
            &mut self.kt.hidden_b,
            &mut self.kt.out_w,
            &mut self.kt.out_b,
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m.clone()).collect()
    }

    /// Rebuilds parameters from canonical-order tensors, checking shapes
    /// against a freshly laid-out template.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        let mut template = Self::zeros(config)?;
        let slots = template.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "ModelParams::from_tensors",
                    left: slot.shape(),
                    right: t.shape(),
                });
            }
            *slot = t;
        }
        Ok(template)
    }

    fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Self::init(config, &mut rng)?;
        for t in p.tensors_mut() {
            *t = Matrix::zeros(t.rows(), t.cols());
        }
        Ok(p)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.named_tensors().iter().map(|(_, m)| m.squared_norm()).sum()
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let nodes = self
            .named_tensors()
            .into_iter()
            .map(|(_, m)| tape.leaf(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        BoundParams::from_nodes(self.attention.is_some(), self.mlp.is_some(), nodes)
    }
}

/// Tape handles mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub embedding: Node,
    pub attention: Option<[Node; 3]>,
    pub mlp: Option<[Node; 4]>,
    pub history_proj: Node,
    pub lstm: LstmWeights,
    pub scorer_state_w: Node,
    pub scorer_cand_w: Node,
    pub scorer_target_w: Node,
    pub scorer_bias: Node,
    pub scorer_out: Node,
    pub kt: [Node; 4],
    nodes: Vec<Node>,
}

impl BoundParams {
    /// Wraps leaves already on the tape, in canonical order.
    pub fn from_nodes(attention: bool, mlp: bool, nodes: Vec<Node>) -> Result<Self> {
        let expected = 1 + 3 * attention as usize + 4 * mlp as usize + 13;
        if nodes.len() != expected {
            return Err(Error::Validation(format!(
                "expected {expected} parameter nodes, got {}",
                nodes.len()
            )));
        }
        let mut it = nodes.iter().copied();
        let mut next = || it.next().expect("length checked");
        let embedding = next();
        let attention = attention.then(|| [next(), next(), next()]);
        let mlp = mlp.then(|| [next(), next(), next(), next()]);
        let history_proj = next();
        let lstm = LstmWeights {
            w_input: next(),
            w_hidden: next(),
            bias: next(),
        };
        Ok(Self {
            embedding,
            attention,
            mlp,
            history_proj,
            lstm,
            scorer_state_w: next(),
            scorer_cand_w: next(),
            scorer_target_w: next(),
            scorer_bias: next(),
            scorer_out: next(),
            kt: [next(), next(), next(), next()],
            nodes,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
}

const CHECKPOINT_FORMAT: &str = "pathrank-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Serializes config and weights as JSON. Floats use shortest round-trip
/// formatting so a reload is bit-exact.
pub fn checkpoint_to_string(config: &ModelConfig, params: &ModelParams) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors: params
            .named_tensors()
            .into_iter()
            .map(|(name, m)| TensorRecord {
                name: name.into(),
                rows: m.rows(),
                cols: m.cols(),
                data: m.as_slice().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_str(s: &str) -> Result<(ModelConfig, ModelParams)> {
    let file: CheckpointFile = serde_json::from_str(s)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Validation(format!("not a checkpoint: format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(file.version));
    }
    file.config.validate()?;
    let expected: Vec<&str> = ModelParams::zeros(&file.config)?
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let names: Vec<&str> = file.tensors.iter().map(|t| t.name.as_str()).collect();
    if names != expected {
        return Err(Error::Validation(format!(
            "checkpoint tensors {names:?} do not match the {:?} layout",
            file.config.encoder
        )));
    }
    let tensors = file
        .tensors
        .into_iter()
        .map(|t| Matrix::new(t.rows, t.cols, t.data))
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(&file.config, tensors)?;
    Ok((file.config, params))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(config, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

impl EncoderVariant {
    pub fn uses_attention(self) -> bool {
        matches!(self, EncoderVariant::Combined | EncoderVariant::AttentionOnly)
    }

    pub fn uses_mlp(self) -> bool {
        matches!(self, EncoderVariant::Combined | EncoderVariant::MlpOnly)
    }
}
