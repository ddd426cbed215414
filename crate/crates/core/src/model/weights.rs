use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[d_model, 3 * d_model]`, columns ordered q | k | v, heads contiguous inside each.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub attn_out_weight: Tensor,
    pub attn_out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

/// Full parameter set. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

pub type Gradients = Weights;

const LAYER_TENSORS: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc.weight",
    "mlp.fc.bias",
    "mlp.proj.weight",
    "mlp.proj.bias",
];

/// Names and shapes of every tensor, in canonical order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, s) = (
        config.vocab_size,
        config.d_model,
        config.d_ff,
        config.max_seq_len,
    );
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![s, d]),
    ];
    let layer_shapes = [
        vec![d],
        vec![d],
        vec![d, 3 * d],
        vec![3 * d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, f],
        vec![f],
        vec![f, d],
        vec![d],
    ];
    for l in 0..config.n_layers {
        for (name, shape) in LAYER_TENSORS.iter().zip(layer_shapes.iter()) {
            out.push((format!("layers.{l}.{name}"), shape.clone()));
        }
    }
    out.push(("lnf.gain".into(), vec![d]));
    out.push(("lnf.bias".into(), vec![d]));
    out.push(("out.weight".into(), vec![d, v]));
    out.push(("out.bias".into(), vec![v]));
    out
}

impl Weights {
    /// Builds a parameter set from tensors in [`tensor_layout`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = tensor_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: next(),
                ln1_bias: next(),
                qkv_weight: next(),
                qkv_bias: next(),
                attn_out_weight: next(),
                attn_out_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc_weight: next(),
                fc_bias: next(),
                proj_weight: next(),
                proj_bias: next(),
            })
            .collect();
        Ok(Weights {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: next(),
            lnf_bias: next(),
            out_weight: next(),
            out_bias: next(),
        })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let tensors = tensor_layout(config)
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self::from_tensors(*config, tensors).expect("layout is self-consistent")
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.qkv_weight,
                &l.qkv_bias,
                &l.attn_out_weight,
                &l.attn_out_bias,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.fc_weight,
                &l.fc_bias,
                &l.proj_weight,
                &l.proj_bias,
            ]);
        }
        out.extend([
            &self.lnf_gain,
            &self.lnf_bias,
            &self.out_weight,
            &self.out_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.qkv_weight,
                &mut l.qkv_bias,
                &mut l.attn_out_weight,
                &mut l.attn_out_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.fc_weight,
                &mut l.fc_bias,
                &mut l.proj_weight,
                &mut l.proj_bias,
            ]);
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        tensor_layout(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flat view of every scalar, in canonical order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn scale(&mut self, factor: f32) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }
}

/// Output-projection init is shrunk so logits start near uniform.
pub const OUTPUT_INIT_SCALE: f32 = 0.1;

/// Seeded initialization: embeddings ~ N(0, 1), matrices ~ N(0, 1/fan_in),
/// layer-norm gains one, biases zero.
pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = Weights::zeros(config);
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    let fill = |t: &mut Tensor, std: f32, rng: &mut ChaCha8Rng| {
        for v in t.data.iter_mut() {
            *v = unit.sample(rng) * std;
        }
    };
    let d = config.d_model as f32;
    let f = config.d_ff as f32;
    fill(&mut w.tok_emb, 1.0, &mut rng);
    fill(&mut w.pos_emb, 1.0, &mut rng);
    for l in &mut w.layers {
        l.ln1_gain.data.fill(1.0);
        l.ln2_gain.data.fill(1.0);
        fill(&mut l.qkv_weight, 1.0 / d.sqrt(), &mut rng);
        fill(&mut l.attn_out_weight, 1.0 / d.sqrt(), &mut rng);
        fill(&mut l.fc_weight, 1.0 / d.sqrt(), &mut rng);
        fill(&mut l.proj_weight, 1.0 / f.sqrt(), &mut rng);
    }
    w.lnf_gain.data.fill(1.0);
    fill(&mut w.out_weight, OUTPUT_INIT_SCALE / d.sqrt(), &mut rng);
    Ok(w)
}
