use super::{BoundParams, ModelConfig, ModelError, ModelParams, POSITION_BANK};
use crate::assign::farthest_point_sampling;
use crate::scene::Scene;
use crate::tensor::{Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Network inputs derived from one scene, in the unit-cube frame.
#[derive(Debug, Clone)]
pub struct SceneInputs<T> {
    /// `N x 6`: normalized xyz followed by rgb.
    pub points: Tensor<T>,
    /// `N x 3` normalized xyz.
    pub coords: Tensor<T>,
    /// `K x 3` normalized box centers.
    pub centers: Tensor<T>,
    /// Normalized xyz in `f64`, for sampling.
    pub coords_f64: Vec<[f64; 3]>,
}

impl<T: Real> SceneInputs<T> {
    pub fn from_scene(scene: &Scene) -> Self {
        let norm = scene.normalization();
        let coords_f64: Vec<[f64; 3]> = scene.points.iter().map(|p| norm.apply(p)).collect();
        let n = scene.num_points();
        let points: Vec<f64> = coords_f64
            .iter()
            .zip(&scene.points)
            .flat_map(|(c, p)| {
                let z = |v: f64| 2.0 * v - 1.0;
                [z(c[0]), z(c[1]), z(c[2]), z(p[3]), z(p[4]), z(p[5])]
            })
            .collect();
        let coords: Vec<f64> = coords_f64.iter().flatten().copied().collect();
        let centers: Vec<f64> = scene.centers().iter().flat_map(|c| norm.apply(c)).collect();
        SceneInputs {
            points: Tensor::from_f64(&[n, 6], &points).expect("n x 6"),
            coords: Tensor::from_f64(&[n, 3], &coords).expect("n x 3"),
            centers: Tensor::from_f64(&[scene.num_instances(), 3], &centers).expect("k x 3"),
            coords_f64,
        }
    }

    pub fn num_points(&self) -> usize {
        self.coords_f64.len()
    }
}

/// Content and position query banks on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Queries {
    /// `N_Q x C`
    pub content: Var,
    /// `N_Q x 3`
    pub position: Var,
}

/// How position queries are produced and updated.
#[derive(Debug, Clone, Copy)]
pub enum CenterMode<'a, T> {
    /// Learnable bank, unchanged within a forward pass.
    Student,
    /// Convex combinations of instance centers (`K x 3`), refined after
    /// every decoder layer.
    Teacher { centers: &'a Tensor<T> },
}

/// Everything a forward pass produces.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `N x C` point features.
    pub features: Var,
    pub queries: Queries,
    /// `N_Q x N` pre-sigmoid mask scores.
    pub mask_logits: Var,
    /// `N_Q x N` similarities in `(0, 1)`.
    pub rho: Var,
    /// `N_Q x (classes + 1)`, last column is no-object.
    pub class_logits: Var,
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var, ModelError> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

/// Point-wise two-layer perceptron; point `j`'s feature depends on row `j`
/// only.
pub fn encode_points<T: Real>(tape: &mut Tape<T>, params: &BoundParams, points: Var) -> Result<Var, ModelError> {
    let h = linear(tape, points, params.var("encoder.w1"), Some(params.var("encoder.b1")))?;
    let h = tape.relu(h);
    linear(tape, h, params.var("encoder.w2"), Some(params.var("encoder.b2")))
}

/// Fourier features of `M x 3` positions projected to the feature width.
pub fn positional_encoding<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    positions: Var,
) -> Result<Var, ModelError> {
    let f = tape.fourier(positions, config.fourier_freqs)?;
    linear(tape, f, params.var("posenc.w"), Some(params.var("posenc.b")))
}

/// Zero content queries and the learnable position bank.
pub fn init_student_queries<T: Real>(tape: &mut Tape<T>, params: &BoundParams, config: &ModelConfig) -> Queries {
    let content = tape.constant(Tensor::zeros(&[config.num_queries, config.feature_dim]));
    Queries {
        content,
        position: params.var(POSITION_BANK),
    }
}

/// `softmax(positions * centers^T) * centers`, row by row.
pub fn refine_teacher_position<T: Real>(tape: &mut Tape<T>, positions: Var, centers: Var) -> Result<Var, ModelError> {
    let ct = tape.transpose(centers)?;
    let logits = tape.matmul(positions, ct)?;
    let weights = tape.row_softmax(logits)?;
    Ok(tape.matmul(weights, centers)?)
}

/// Initial teacher position queries: `n_q` farthest-point samples of the
/// normalized coordinates, re-expressed as softmax-weighted combinations
/// of the instance centers.
pub fn init_teacher_position<T: Real>(
    tape: &mut Tape<T>,
    centers: Var,
    coords_normalized: &[[f64; 3]],
    n_q: usize,
    start: usize,
) -> Result<Var, ModelError> {
    if tape.shape(centers)[0] == 0 {
        return Err(ModelError::NoInstances);
    }
    let picks = farthest_point_sampling(coords_normalized, n_q, start)?;
    let sampled: Vec<f64> = picks.iter().flat_map(|&i| coords_normalized[i]).collect();
    let sampled = tape.constant(Tensor::from_f64(&[n_q, 3], &sampled)?);
    refine_teacher_position(tape, sampled, centers)
}

fn layer_norm<T: Real>(tape: &mut Tape<T>, params: &BoundParams, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let y = tape.layer_norm(x, T::lit(LN_EPS))?;
    let y = tape.mul(y, params.var(&format!("{prefix}.gamma")))?;
    Ok(tape.add(y, params.var(&format!("{prefix}.beta")))?)
}

/// Multi-head scaled dot-product attention with output projection.
fn attention<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
) -> Result<Var, ModelError> {
    let w = |n: &str| params.var(&format!("{prefix}.{n}"));
    let q = tape.matmul(query, w("wq"))?;
    let k = tape.matmul(key, w("wk"))?;
    let v = tape.matmul(value, w("wv"))?;
    let d = config.head_dim();
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let mut heads = Vec::with_capacity(config.attention_heads);
    for h in 0..config.attention_heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.row_softmax(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    Ok(tape.matmul(merged, w("wo"))?)
}

/// Runs every decoder layer: cross-attention to point features, query
/// self-attention, feed-forward, each with a residual and layer norm. In
/// teacher mode the positions are pulled back onto the instance centers
/// after every layer.
pub fn decoder_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    features: Var,
    queries: Queries,
    coords: Var,
    mode: CenterMode<'_, T>,
) -> Result<Queries, ModelError> {
    let centers = match mode {
        CenterMode::Teacher { centers } => Some(tape.constant(centers.clone())),
        CenterMode::Student => None,
    };
    let key_pe = positional_encoding(tape, params, config, coords)?;
    let keys = tape.add(features, key_pe)?;
    let Queries {
        mut content,
        mut position,
    } = queries;
    for l in 0..config.decoder_layers {
        let query_pe = positional_encoding(tape, params, config, position)?;

        let q = tape.add(content, query_pe)?;
        let cross = attention(tape, params, config, &format!("layer{l}.cross"), q, keys, features)?;
        let x = tape.add(content, cross)?;
        content = layer_norm(tape, params, &format!("layer{l}.norm1"), x)?;

        let q = tape.add(content, query_pe)?;
        let slf = attention(tape, params, config, &format!("layer{l}.self"), q, q, content)?;
        let x = tape.add(content, slf)?;
        content = layer_norm(tape, params, &format!("layer{l}.norm2"), x)?;

        let p = |n: &str| params.var(&format!("layer{l}.ffn.{n}"));
        let h = linear(tape, content, p("w1"), Some(p("b1")))?;
        let h = tape.relu(h);
        let h = linear(tape, h, p("w2"), Some(p("b2")))?;
        let x = tape.add(content, h)?;
        content = layer_norm(tape, params, &format!("layer{l}.norm3"), x)?;

        if let Some(c) = centers {
            position = refine_teacher_position(tape, position, c)?;
        }
    }
    Ok(Queries { content, position })
}

/// Pre-sigmoid scores `content * features^T` and their sigmoid.
pub fn predict_masks<T: Real>(tape: &mut Tape<T>, content: Var, features: Var) -> Result<(Var, Var), ModelError> {
    let ft = tape.transpose(features)?;
    let logits = tape.matmul(content, ft)?;
    let rho = tape.sigmoid(logits);
    Ok((logits, rho))
}

pub fn predict_classes<T: Real>(tape: &mut Tape<T>, params: &BoundParams, content: Var) -> Result<Var, ModelError> {
    linear(tape, content, params.var("class_head.w"), Some(params.var("class_head.b")))
}

/// Encoder, query initialization, decoder and both heads.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    inputs: &SceneInputs<T>,
    mode: CenterMode<'_, T>,
) -> Result<ForwardOutput, ModelError> {
    let points = tape.constant(inputs.points.clone());
    let coords = tape.constant(inputs.coords.clone());
    let features = encode_points(tape, params, points)?;
    let init = match mode {
        CenterMode::Student => init_student_queries(tape, params, config),
        CenterMode::Teacher { centers } => {
            let c = tape.constant(centers.clone());
            let position =
                init_teacher_position(tape, c, &inputs.coords_f64, config.num_queries, config.fps_start)?;
            let content = tape.constant(Tensor::zeros(&[config.num_queries, config.feature_dim]));
            Queries { content, position }
        }
    };
    let queries = decoder_forward(tape, params, config, features, init, coords, mode)?;
    let (mask_logits, rho) = predict_masks(tape, queries.content, features)?;
    let class_logits = predict_classes(tape, params, queries.content)?;
    Ok(ForwardOutput {
        features,
        queries,
        mask_logits,
        rho,
        class_logits,
    })
}

/// Forward pass of a whole network with every parameter frozen.
pub fn forward_frozen<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    inputs: &SceneInputs<T>,
    mode: CenterMode<'_, T>,
) -> Result<(Tape<T>, ForwardOutput), ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = forward(&mut tape, &bound, config, inputs, mode)?;
    Ok((tape, out))
}
