use rand::Rng;

use super::ModelConfig;

/// Dense row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
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
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    /// [dim, 3*dim], columns ordered q | k | v
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

/// Every learnable array of the network. Gradients and optimizer moments use
/// the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// [3 * patch^2, dim]
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    /// [tokens, dim]
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    /// [dim, channels]
    pub dec_proj_w: Tensor,
    pub dec_proj_b: Tensor,
    /// [9 * channels, channels]
    pub dec1_w: Tensor,
    pub dec1_b: Tensor,
    pub dec2_w: Tensor,
    pub dec2_b: Tensor,
    /// [channels, 1]
    pub head_w: Tensor,
    pub head_b: Tensor,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w", "proj_b", "ln2_g", "ln2_b", "fc1_w", "fc1_b",
    "fc2_w", "fc2_b",
];

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b,
            &self.ln2_g, &self.ln2_b, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.qkv_w, &mut self.qkv_b,
            &mut self.proj_w, &mut self.proj_b, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b,
        ]
    }
}

impl Params {
    /// Canonical array names and shapes for a configuration, in storage order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.embed_dim;
        let c = config.decoder_channels;
        let m = config.mlp_hidden();
        let p = config.patch_size;
        let mut out = vec![
            ("patch_w".to_string(), vec![3 * p * p, d]),
            ("patch_b".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![config.num_tokens(), d]),
        ];
        for i in 0..config.n_blocks {
            let shapes = [
                vec![d], vec![d], vec![d, 3 * d], vec![3 * d], vec![d, d], vec![d],
                vec![d], vec![d], vec![d, m], vec![m], vec![m, d], vec![d],
            ];
            for (field, shape) in BLOCK_FIELDS.iter().zip(shapes) {
                out.push((format!("blocks.{i}.{field}"), shape));
            }
        }
        out.extend([
            ("norm_g".to_string(), vec![d]),
            ("norm_b".to_string(), vec![d]),
            ("dec_proj_w".to_string(), vec![d, c]),
            ("dec_proj_b".to_string(), vec![c]),
            ("dec1_w".to_string(), vec![9 * c, c]),
            ("dec1_b".to_string(), vec![c]),
            ("dec2_w".to_string(), vec![9 * c, c]),
            ("dec2_b".to_string(), vec![c]),
            ("head_w".to_string(), vec![c, 1]),
            ("head_b".to_string(), vec![1]),
        ]);
        out
    }

    /// Fan-in scaled uniform weights, zero biases, unit norm gains.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let c = config.decoder_channels;
        let m = config.mlp_hidden();
        let p = config.patch_size;
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_w = Tensor::uniform(&[3 * p * p, d], fan_in(3 * p * p), rng);
        let pos_embed = Tensor::uniform(&[config.num_tokens(), d], 0.02, rng);
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                qkv_w: Tensor::uniform(&[d, 3 * d], fan_in(d), rng),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: Tensor::uniform(&[d, d], fan_in(d), rng),
                proj_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                fc1_w: Tensor::uniform(&[d, m], fan_in(d), rng),
                fc1_b: Tensor::zeros(&[m]),
                fc2_w: Tensor::uniform(&[m, d], fan_in(m), rng),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            pos_embed,
            blocks,
            norm_g: Tensor::filled(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
            dec_proj_w: Tensor::uniform(&[d, c], fan_in(d), rng),
            dec_proj_b: Tensor::zeros(&[c]),
            dec1_w: Tensor::uniform(&[9 * c, c], fan_in(9 * c), rng),
            dec1_b: Tensor::zeros(&[c]),
            dec2_w: Tensor::uniform(&[9 * c, c], fan_in(9 * c), rng),
            dec2_b: Tensor::zeros(&[c]),
            head_w: Tensor::uniform(&[c, 1], fan_in(c), rng),
            head_b: Tensor::zeros(&[1]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.pos_embed];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([
            &self.norm_g, &self.norm_b, &self.dec_proj_w, &self.dec_proj_b, &self.dec1_w,
            &self.dec1_b, &self.dec2_w, &self.dec2_b, &self.head_w, &self.head_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.norm_g, &mut self.norm_b, &mut self.dec_proj_w, &mut self.dec_proj_b,
            &mut self.dec1_w, &mut self.dec1_b, &mut self.dec2_w, &mut self.dec2_b,
            &mut self.head_w, &mut self.head_b,
        ]);
        out
    }

    /// Arrays paired with their canonical names.
    pub fn named<'a>(&'a self, config: &ModelConfig) -> Vec<(String, &'a Tensor)> {
        Self::layout(config).into_iter().map(|(n, _)| n).zip(self.tensors()).collect()
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Self::init(config, &mut rng).zeros_like()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flat view index -> (tensor index, offset).
    pub(crate) fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors().iter().enumerate() {
            if index < t.len() {
                return Some((i, index));
            }
            index -= t.len();
        }
        None
    }

    pub(crate) fn get_flat(&self, index: usize) -> f64 {
        let (t, o) = self.locate(index).expect("flat index in range");
        self.tensors()[t].data[o]
    }

    pub(crate) fn set_flat(&mut self, index: usize, value: f64) {
        let (t, o) = self.locate(index).expect("flat index in range");
        self.tensors_mut()[t].data[o] = value;
    }
}
