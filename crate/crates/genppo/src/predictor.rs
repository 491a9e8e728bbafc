//! Generalizability predictors: a DNN over selected weight statistics and a
//! CNN over the normalized weight image, both trained with Adam on mean
//! squared error.
//!
//! The DNN is the predictor that integrates into the training loop (it is
//! small and cheap at inference time); [`gen_score_with_gradient`] chains its
//! input gradient through the standardization and the statistics VJP back to
//! the policy weights. The CNN path is offline-only.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    build_weight_image, extract_stats, pearson, FeatureError, FeatureMask, FeatureVector,
    WeightImage, WeightSnapshot, IMAGE_WIDTH,
};
use crate::nn::{
    Activation, AdamState, ConvLayer, ConvTrace, Matrix, MeanPool, Mlp, MlpGradients, NnError,
    Tensor3,
};
use crate::ppo::{GenScore, PolicyNet, PpoError};
use crate::rng::{fnv1a64, mix_seed, SplitMix64};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("operation requires the {0} architecture")]
    WrongArchitecture(&'static str),
    #[error("bad artifact: {0}")]
    BadArtifact(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
}

/// Minimum dataset size accepted by the trainers.
pub const MIN_TRAIN_SAMPLES: usize = 20;

/// Predictor training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PredictorHyper {
    fn default() -> Self {
        PredictorHyper { epochs: 500, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

/// Per-feature affine normalization fitted on the training set. Constant
/// features get a std of 1 so the transform stays invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Standardizer {
        assert!(!rows.is_empty());
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut means = vec![0.0; dim];
        for row in rows {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut stds = vec![0.0; dim];
        for row in rows {
            for ((s, v), m) in stds.iter_mut().zip(row).zip(&means) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut stds {
            *s = s.sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Standardizer { means, stds }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.means).zip(&self.stds).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.means).zip(&self.stds).map(|((v, m), s)| v * s + m).collect()
    }
}

/// DNN over selected, standardized weight statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DnnPredictor {
    pub net: Mlp,
    pub mask: FeatureMask,
    pub standardizer: Standardizer,
}

/// CNN over the weight image: two 3x3 relu convolutions, mean pooling to a
/// fixed 8x8 grid, then a dense regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnPredictor {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub pool: MeanPool,
    pub head: Mlp,
    pub image_rows: usize,
}

pub const CNN_CHANNELS: usize = 8;
pub const CNN_POOL: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorModel {
    Dnn(DnnPredictor),
    Cnn(CnnPredictor),
}

/// Metrics and provenance recorded at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub arch: String,
    pub hyper: PredictorHyper,
    pub trained_on: usize,
    pub train_pearson: Option<f64>,
    pub train_mse: Option<f64>,
    pub test_pearson: Option<f64>,
    #[serde(default)]
    pub dataset_hash: Option<String>,
}

/// A trained predictor: self-contained, loading it is enough to score any
/// shape-compatible snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorArtifact {
    pub model: PredictorModel,
    pub metadata: TrainMetadata,
}

impl CnnPredictor {
    fn new(image_rows: usize, seed: u64) -> CnnPredictor {
        let mut rng = SplitMix64::new(seed);
        let conv1 = ConvLayer::new(1, CNN_CHANNELS, 3, 3, 1, Activation::Relu, &mut rng);
        let conv2 = ConvLayer::new(CNN_CHANNELS, CNN_CHANNELS, 3, 3, 1, Activation::Relu, &mut rng);
        let pool = MeanPool { out_h: CNN_POOL, out_w: CNN_POOL };
        let head = Mlp::new(
            &[CNN_CHANNELS * CNN_POOL * CNN_POOL, 64, 1],
            &[Activation::Relu, Activation::Identity],
            rng.next_u64(),
        );
        CnnPredictor { conv1, conv2, pool, head, image_rows }
    }

    fn image_tensor(&self, image: &WeightImage) -> Result<Tensor3, PredictorError> {
        if image.rows != self.image_rows || image.width != IMAGE_WIDTH {
            return Err(PredictorError::ShapeMismatch(format!(
                "image {}x{} does not match trained geometry {}x{}",
                image.rows, image.width, self.image_rows, IMAGE_WIDTH
            )));
        }
        Ok(Tensor3::from_vec(1, image.rows, image.width, image.values.clone())?)
    }

    fn forward_trace(&self, image: &WeightImage) -> Result<CnnTrace, PredictorError> {
        let input = self.image_tensor(image)?;
        let t1 = self.conv1.forward_trace(&input)?;
        let t2 = self.conv2.forward_trace(&t1.post)?;
        let pooled = self.pool.forward(&t2.post);
        let head_trace = self.head.forward_trace(&pooled.data)?;
        Ok(CnnTrace { t1, t2, pooled, head_trace })
    }

    pub fn predict(&self, image: &WeightImage) -> Result<f64, PredictorError> {
        Ok(self.forward_trace(image)?.head_trace.output()[0])
    }

    fn backward(&self, trace: &CnnTrace, d_out: f64) -> CnnGradients {
        let (head, d_pooled) = self.head.backward(&trace.head_trace, &[d_out]);
        let d_pooled_t = Tensor3 {
            channels: trace.pooled.channels,
            height: trace.pooled.height,
            width: trace.pooled.width,
            data: d_pooled,
        };
        let d_conv2_out =
            self.pool.backward(&d_pooled_t, trace.t2.post.height, trace.t2.post.width);
        let (conv2, d_mid) = self.conv2.backward(&trace.t2, &d_conv2_out);
        let (conv1, _) = self.conv1.backward(&trace.t1, &d_mid);
        CnnGradients { conv1, conv2, head }
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.conv1.kernels);
        out.extend_from_slice(&self.conv1.bias);
        out.extend_from_slice(&self.conv2.kernels);
        out.extend_from_slice(&self.conv2.bias);
        out.extend(self.head.flat_params());
        out
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        let mut off = 0;
        let mut take = |n: usize| {
            let slice = &params[off..off + n];
            off += n;
            slice.to_vec()
        };
        self.conv1.kernels = take(self.conv1.kernels.len());
        self.conv1.bias = take(self.conv1.bias.len());
        self.conv2.kernels = take(self.conv2.kernels.len());
        self.conv2.bias = take(self.conv2.bias.len());
        let head_params = take(self.head.num_params());
        self.head.set_flat_params(&head_params).expect("congruent");
    }
}

struct CnnTrace {
    t1: ConvTrace,
    t2: ConvTrace,
    pooled: Tensor3,
    head_trace: crate::nn::MlpTrace,
}

struct CnnGradients {
    conv1: crate::nn::ConvGradients,
    conv2: crate::nn::ConvGradients,
    head: MlpGradients,
}

impl CnnGradients {
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.conv1.kernels);
        out.extend_from_slice(&self.conv1.bias);
        out.extend_from_slice(&self.conv2.kernels);
        out.extend_from_slice(&self.conv2.bias);
        out.extend(self.head.flatten());
        out
    }
}

/// Trains the statistics DNN on `(features, zeta)` pairs. Deterministic
/// given `hyper.seed`.
pub fn train_dnn(
    pairs: &[(FeatureVector, f64)],
    mask: &FeatureMask,
    hyper: &PredictorHyper,
) -> Result<PredictorArtifact, PredictorError> {
    if pairs.len() < MIN_TRAIN_SAMPLES {
        return Err(PredictorError::TooFewSamples { got: pairs.len(), need: MIN_TRAIN_SAMPLES });
    }
    if mask.cardinality() == 0 {
        return Err(PredictorError::ShapeMismatch("mask selects no features".into()));
    }
    let rows: Vec<Vec<f64>> =
        pairs.iter().map(|(f, _)| mask.apply(f)).collect::<Result<_, _>>()?;
    let labels: Vec<f64> = pairs.iter().map(|(_, z)| *z).collect();
    let standardizer = Standardizer::fit(&rows);
    let inputs: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();

    let mut net = Mlp::new(
        &[mask.cardinality(), 64, 64, 1],
        &[Activation::Relu, Activation::Relu, Activation::Identity],
        mix_seed(hyper.seed, 1),
    );
    fit_mse(
        &mut net,
        &inputs,
        &labels,
        hyper,
        |net, x| Ok(net.forward(x)?[0]),
        |net, x, d| {
            let trace = net.forward_trace(x)?;
            let pred = trace.output()[0];
            let (grads, _) = net.backward(&trace, &[d(pred)]);
            Ok((pred, grads.flatten()))
        },
        |net| net.flat_params(),
        |net, p| net.set_flat_params(p).expect("congruent"),
    )?;

    let predictions: Vec<f64> =
        inputs.iter().map(|x| net.forward(x).map(|o| o[0])).collect::<Result<_, _>>()?;
    let (train_pearson, train_mse) = fit_metrics(&labels, &predictions);

    Ok(PredictorArtifact {
        model: PredictorModel::Dnn(DnnPredictor { net, mask: mask.clone(), standardizer }),
        metadata: TrainMetadata {
            arch: "dnn".into(),
            hyper: hyper.clone(),
            trained_on: pairs.len(),
            train_pearson,
            train_mse: Some(train_mse),
            test_pearson: None,
            dataset_hash: None,
        },
    })
}

/// Trains the weight-image CNN on `(image, zeta)` pairs. Deterministic given
/// `hyper.seed`.
pub fn train_cnn(
    pairs: &[(WeightImage, f64)],
    hyper: &PredictorHyper,
) -> Result<PredictorArtifact, PredictorError> {
    if pairs.len() < MIN_TRAIN_SAMPLES {
        return Err(PredictorError::TooFewSamples { got: pairs.len(), need: MIN_TRAIN_SAMPLES });
    }
    let rows = pairs[0].0.rows;
    if pairs.iter().any(|(img, _)| img.rows != rows || img.width != IMAGE_WIDTH) {
        return Err(PredictorError::ShapeMismatch("images differ in geometry".into()));
    }
    let labels: Vec<f64> = pairs.iter().map(|(_, z)| *z).collect();
    let images: Vec<&WeightImage> = pairs.iter().map(|(img, _)| img).collect();

    let mut cnn = CnnPredictor::new(rows, mix_seed(hyper.seed, 1));
    let mut adam = AdamState::new(cnn.flat_params().len(), hyper.lr);
    let mut rng = SplitMix64::new(mix_seed(hyper.seed, 2));
    let mut indices: Vec<usize> = (0..images.len()).collect();
    for _ in 0..hyper.epochs {
        rng.shuffle(&mut indices);
        for chunk in indices.chunks(hyper.batch_size.max(1)) {
            let mut grad_acc = vec![0.0; cnn.flat_params().len()];
            for &i in chunk {
                let trace = cnn.forward_trace(images[i])?;
                let pred = trace.head_trace.output()[0];
                let d_out = 2.0 * (pred - labels[i]) / chunk.len() as f64;
                let grads = cnn.backward(&trace, d_out);
                for (a, g) in grad_acc.iter_mut().zip(grads.flatten()) {
                    *a += g;
                }
            }
            let mut params = cnn.flat_params();
            adam.step(&mut params, &grad_acc)?;
            cnn.set_flat_params(&params);
        }
    }

    let predictions: Vec<f64> =
        images.iter().map(|img| cnn.predict(img)).collect::<Result<_, _>>()?;
    let (train_pearson, train_mse) = fit_metrics(&labels, &predictions);

    Ok(PredictorArtifact {
        model: PredictorModel::Cnn(cnn),
        metadata: TrainMetadata {
            arch: "cnn".into(),
            hyper: hyper.clone(),
            trained_on: pairs.len(),
            train_pearson,
            train_mse: Some(train_mse),
            test_pearson: None,
            dataset_hash: None,
        },
    })
}

/// Generic seeded minibatch MSE loop shared by the DNN path.
#[allow(clippy::too_many_arguments)]
fn fit_mse<N>(
    net: &mut N,
    inputs: &[Vec<f64>],
    labels: &[f64],
    hyper: &PredictorHyper,
    _forward: impl Fn(&N, &[f64]) -> Result<f64, PredictorError>,
    backward: impl Fn(&N, &[f64], &dyn Fn(f64) -> f64) -> Result<(f64, Vec<f64>), PredictorError>,
    get_params: impl Fn(&N) -> Vec<f64>,
    set_params: impl Fn(&mut N, &[f64]),
) -> Result<(), PredictorError> {
    let mut adam = AdamState::new(get_params(net).len(), hyper.lr);
    let mut rng = SplitMix64::new(mix_seed(hyper.seed, 2));
    let mut indices: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..hyper.epochs {
        rng.shuffle(&mut indices);
        for chunk in indices.chunks(hyper.batch_size.max(1)) {
            let mut grad_acc = vec![0.0; get_params(net).len()];
            for &i in chunk {
                let scale = 2.0 / chunk.len() as f64;
                let label = labels[i];
                let (_, grads) = backward(net, &inputs[i], &|pred| scale * (pred - label))?;
                for (a, g) in grad_acc.iter_mut().zip(grads) {
                    *a += g;
                }
            }
            let mut params = get_params(net);
            adam.step(&mut params, &grad_acc)?;
            set_params(net, &params);
        }
    }
    Ok(())
}

fn fit_metrics(labels: &[f64], predictions: &[f64]) -> (Option<f64>, f64) {
    let mse = labels
        .iter()
        .zip(predictions)
        .map(|(y, p)| (y - p) * (y - p))
        .sum::<f64>()
        / labels.len() as f64;
    (pearson(predictions, labels).ok(), mse)
}

/// Scores one snapshot with a trained artifact.
pub fn predict(artifact: &PredictorArtifact, snapshot: &WeightSnapshot) -> Result<f64, PredictorError> {
    match &artifact.model {
        PredictorModel::Dnn(dnn) => {
            let features = extract_stats(snapshot);
            let masked = dnn.mask.apply(&features).map_err(|e| {
                PredictorError::ShapeMismatch(format!("snapshot does not fit the mask: {e}"))
            })?;
            let x = dnn.standardizer.apply(&masked);
            Ok(dnn.net.forward(&x)?[0])
        }
        PredictorModel::Cnn(cnn) => cnn.predict(&build_weight_image(snapshot)),
    }
}

/// Predicted generalization score of a policy together with its gradient
/// with respect to every policy weight. DNN artifacts only (the
/// loop-integrated path); the artifact itself is never modified.
///
/// The chain: predictor input-gradient, divided by the standardization
/// scale, scattered through the feature mask, pushed through the statistics
/// VJP, and finally transposed from snapshot orientation back into the
/// policy's weight layout. Biases receive zero gradient because the
/// statistics only see weights.
pub fn gen_score_with_gradient(
    artifact: &PredictorArtifact,
    policy: &PolicyNet,
) -> Result<(f64, MlpGradients), PredictorError> {
    let dnn = match &artifact.model {
        PredictorModel::Dnn(d) => d,
        PredictorModel::Cnn(_) => return Err(PredictorError::WrongArchitecture("dnn")),
    };
    let snapshot = policy.snapshot("current");
    let features = extract_stats(&snapshot);
    let masked = dnn
        .mask
        .apply(&features)
        .map_err(|e| PredictorError::ShapeMismatch(format!("policy does not fit the mask: {e}")))?;
    let x = dnn.standardizer.apply(&masked);

    let trace = dnn.net.forward_trace(&x)?;
    let score = trace.output()[0];
    let (_, d_input) = dnn.net.backward(&trace, &[1.0]);

    let d_masked: Vec<f64> =
        d_input.iter().zip(&dnn.standardizer.stds).map(|(g, s)| g / s).collect();
    let upstream = dnn.mask.scatter(&d_masked);
    let snapshot_grads = crate::features::stats_vjp(&snapshot, &upstream)?;

    let weights: Vec<Matrix> = snapshot_grads.iter().map(|m| m.transposed()).collect();
    let biases = policy.net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect();
    Ok((score, MlpGradients { weights, biases }))
}

/// Per-agent evaluation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub agent_id: String,
    pub label: f64,
    pub prediction: f64,
}

/// Held-out evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub pearson: f64,
    pub mse: f64,
    pub rows: Vec<EvalRow>,
}

/// Scores every test snapshot and reports Pearson, MSE and the per-agent
/// table. The test set must be disjoint from the training set; that is the
/// caller's contract and is recorded, not enforced, here.
pub fn evaluate_predictor(
    artifact: &PredictorArtifact,
    test: &[(WeightSnapshot, f64)],
) -> Result<EvalReport, PredictorError> {
    let mut rows = Vec::with_capacity(test.len());
    for (snapshot, label) in test {
        rows.push(EvalRow {
            agent_id: snapshot.agent_id.clone(),
            label: *label,
            prediction: predict(artifact, snapshot)?,
        });
    }
    let labels: Vec<f64> = rows.iter().map(|r| r.label).collect();
    let predictions: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
    let r = pearson(&predictions, &labels)?;
    let mse = labels
        .iter()
        .zip(&predictions)
        .map(|(y, p)| (y - p) * (y - p))
        .sum::<f64>()
        / labels.len() as f64;
    Ok(EvalReport { pearson: r, mse, rows })
}

/// Frozen-predictor hook for the PPO trainer.
pub struct GenLossHook {
    artifact: PredictorArtifact,
    frozen_hash: u64,
}

impl GenLossHook {
    /// Wraps a DNN artifact; rejects CNN artifacts, which are offline-only.
    pub fn new(artifact: PredictorArtifact) -> Result<GenLossHook, PredictorError> {
        if !matches!(artifact.model, PredictorModel::Dnn(_)) {
            return Err(PredictorError::WrongArchitecture("dnn"));
        }
        let frozen_hash = artifact_params_hash(&artifact);
        Ok(GenLossHook { artifact, frozen_hash })
    }

    pub fn artifact(&self) -> &PredictorArtifact {
        &self.artifact
    }
}

impl GenScore for GenLossHook {
    fn score_with_grad(&self, policy: &PolicyNet) -> Result<(f64, MlpGradients), PpoError> {
        gen_score_with_gradient(&self.artifact, policy).map_err(|e| match e {
            PredictorError::ShapeMismatch(msg) => PpoError::MaskMismatch(msg),
            other => PpoError::Hook(other.to_string()),
        })
    }

    fn params_hash(&self) -> u64 {
        debug_assert_eq!(artifact_params_hash(&self.artifact), self.frozen_hash);
        artifact_params_hash(&self.artifact)
    }
}

/// FNV hash over every parameter byte of the model.
pub fn artifact_params_hash(artifact: &PredictorArtifact) -> u64 {
    let mut bytes = Vec::new();
    for m in artifact_matrices(artifact) {
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fnv1a64(&bytes)
}

/// The model parameters as a flat list of matrices, in the order used by the
/// on-disk params file.
fn artifact_matrices(artifact: &PredictorArtifact) -> Vec<Matrix> {
    let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector");
    let mlp_matrices = |net: &Mlp| -> Vec<Matrix> {
        net.layers.iter().flat_map(|l| [l.w.clone(), row(&l.b)]).collect()
    };
    match &artifact.model {
        PredictorModel::Dnn(d) => mlp_matrices(&d.net),
        PredictorModel::Cnn(c) => {
            let mut out = vec![
                Matrix::from_vec(c.conv1.out_ch, c.conv1.in_ch * c.conv1.kh * c.conv1.kw, c.conv1.kernels.clone())
                    .expect("kernel matrix"),
                row(&c.conv1.bias),
                Matrix::from_vec(c.conv2.out_ch, c.conv2.in_ch * c.conv2.kh * c.conv2.kw, c.conv2.kernels.clone())
                    .expect("kernel matrix"),
                row(&c.conv2.bias),
            ];
            out.extend(mlp_matrices(&c.head));
            out
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactMeta {
    metadata: TrainMetadata,
    mask: Option<FeatureMask>,
    standardizer: Option<Standardizer>,
    image_rows: Option<usize>,
}

/// Serializes an artifact as a directory: `params.rlwb` in the weight binary
/// format plus `metadata.json`.
pub fn save_artifact(dir: &Path, artifact: &PredictorArtifact) -> Result<(), PredictorError> {
    std::fs::create_dir_all(dir)?;
    let matrices = artifact_matrices(artifact);
    let snapshot = WeightSnapshot::new(matrices, "predictor");
    crate::features::save_snapshot(&dir.join("params.rlwb"), &snapshot)?;
    let meta = match &artifact.model {
        PredictorModel::Dnn(d) => ArtifactMeta {
            metadata: artifact.metadata.clone(),
            mask: Some(d.mask.clone()),
            standardizer: Some(d.standardizer.clone()),
            image_rows: None,
        },
        PredictorModel::Cnn(c) => ArtifactMeta {
            metadata: artifact.metadata.clone(),
            mask: None,
            standardizer: None,
            image_rows: Some(c.image_rows),
        },
    };
    std::fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads an artifact saved by [`save_artifact`].
pub fn load_artifact(dir: &Path) -> Result<PredictorArtifact, PredictorError> {
    let meta: ArtifactMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metadata.json"))?)?;
    let params = crate::features::load_snapshot(&dir.join("params.rlwb"))?;
    let ms = params.layers;

    let dense_from = |pairs: &[Matrix], acts: &[Activation]| -> Result<Mlp, PredictorError> {
        if pairs.len() != acts.len() * 2 {
            return Err(PredictorError::BadArtifact(format!(
                "expected {} matrices for the dense stack, got {}",
                acts.len() * 2,
                pairs.len()
            )));
        }
        let layers = pairs
            .chunks(2)
            .zip(acts)
            .map(|(pair, act)| crate::nn::DenseLayer {
                w: pair[0].clone(),
                b: pair[1].data().to_vec(),
                activation: *act,
            })
            .collect();
        Ok(Mlp { layers })
    };

    let model = match meta.metadata.arch.as_str() {
        "dnn" => {
            let mask = meta.mask.ok_or_else(|| PredictorError::BadArtifact("dnn without mask".into()))?;
            let standardizer = meta
                .standardizer
                .ok_or_else(|| PredictorError::BadArtifact("dnn without standardizer".into()))?;
            let net = dense_from(
                &ms,
                &[Activation::Relu, Activation::Relu, Activation::Identity],
            )?;
            PredictorModel::Dnn(DnnPredictor { net, mask, standardizer })
        }
        "cnn" => {
            if ms.len() != 8 {
                return Err(PredictorError::BadArtifact(format!(
                    "expected 8 matrices for the cnn, got {}",
                    ms.len()
                )));
            }
            let image_rows = meta
                .image_rows
                .ok_or_else(|| PredictorError::BadArtifact("cnn without image_rows".into()))?;
            let conv_from = |k: &Matrix, b: &Matrix, in_ch: usize| ConvLayer {
                out_ch: k.rows(),
                in_ch,
                kh: 3,
                kw: 3,
                kernels: k.data().to_vec(),
                bias: b.data().to_vec(),
                stride: 1,
                activation: Activation::Relu,
            };
            let conv1 = conv_from(&ms[0], &ms[1], 1);
            let conv2 = conv_from(&ms[2], &ms[3], CNN_CHANNELS);
            let head = dense_from(&ms[4..], &[Activation::Relu, Activation::Identity])?;
            PredictorModel::Cnn(CnnPredictor {
                conv1,
                conv2,
                pool: MeanPool { out_h: CNN_POOL, out_w: CNN_POOL },
                head,
                image_rows,
            })
        }
        other => return Err(PredictorError::BadArtifact(format!("unknown arch {other}"))),
    };
    Ok(PredictorArtifact { model, metadata: meta.metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_diff_grad, max_rel_err};

    fn random_features(seed: u64, n: usize, dim: usize) -> Vec<FeatureVector> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| FeatureVector { values: (0..dim).map(|_| rng.uniform(0.0, 1.0)).collect() })
            .collect()
    }

    fn r_squared(labels: &[f64], predictions: &[f64]) -> f64 {
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        let ss_tot: f64 = labels.iter().map(|y| (y - mean) * (y - mean)).sum();
        let ss_res: f64 =
            labels.iter().zip(predictions).map(|(y, p)| (y - p) * (y - p)).sum();
        1.0 - ss_res / ss_tot
    }

    fn single_feature_mask(dim: usize, index: usize) -> FeatureMask {
        FeatureMask {
            selected: (0..dim).map(|i| i == index).collect(),
            threshold: 0.3,
            scores: vec![0.0; dim],
        }
    }

    #[test]
    fn standardize_roundtrip_is_identity() {
        let rows = vec![vec![1.0, 10.0, 0.5], vec![2.0, 30.0, 0.5], vec![4.0, 20.0, 0.5]];
        let std = Standardizer::fit(&rows);
        for row in &rows {
            let back = std.invert(&std.apply(row));
            for (a, b) in row.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Constant column: std clamped to 1, transform still invertible.
        assert_eq!(std.stds[2], 1.0);
    }

    #[test]
    fn dnn_learns_a_linear_label() {
        let features = random_features(1, 100, 21);
        let pairs: Vec<(FeatureVector, f64)> =
            features.iter().map(|f| (f.clone(), 2.0 * f.values[5] + 0.3)).collect();
        let mask = single_feature_mask(21, 5);
        let hyper = PredictorHyper { epochs: 300, ..PredictorHyper::default() };
        let artifact = train_dnn(&pairs[..80], &mask, &hyper).unwrap();

        let labels: Vec<f64> = pairs[80..].iter().map(|(_, z)| *z).collect();
        let predictions: Vec<f64> = pairs[80..]
            .iter()
            .map(|(f, _)| {
                let snap_free = match &artifact.model {
                    PredictorModel::Dnn(d) => {
                        let x = d.standardizer.apply(&d.mask.apply(f).unwrap());
                        d.net.forward(&x).unwrap()[0]
                    }
                    _ => unreachable!(),
                };
                snap_free
            })
            .collect();
        let r2 = r_squared(&labels, &predictions);
        assert!(r2 >= 0.95, "held-out R^2 = {r2}");
    }

    #[test]
    fn dnn_fits_constant_labels() {
        let features = random_features(2, 40, 21);
        let pairs: Vec<(FeatureVector, f64)> =
            features.iter().map(|f| (f.clone(), 0.7)).collect();
        let mask = FeatureMask::all(21);
        let artifact = train_dnn(&pairs, &mask, &PredictorHyper::default()).unwrap();
        if let PredictorModel::Dnn(d) = &artifact.model {
            let x = d.standardizer.apply(&d.mask.apply(&pairs[0].0).unwrap());
            let pred = d.net.forward(&x).unwrap()[0];
            assert!((pred - 0.7).abs() < 1e-3, "prediction {pred}");
        }
        // Constant labels: train pearson is undefined and stays None.
        assert!(artifact.metadata.train_pearson.is_none());
    }

    #[test]
    fn dnn_training_is_deterministic() {
        let features = random_features(3, 30, 21);
        let pairs: Vec<(FeatureVector, f64)> =
            features.iter().map(|f| (f.clone(), f.values[0])).collect();
        let mask = FeatureMask::all(21);
        let hyper = PredictorHyper { epochs: 50, seed: 9, ..PredictorHyper::default() };
        let a = train_dnn(&pairs, &mask, &hyper).unwrap();
        let b = train_dnn(&pairs, &mask, &hyper).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let features = random_features(4, 5, 21);
        let pairs: Vec<(FeatureVector, f64)> =
            features.iter().map(|f| (f.clone(), 0.0)).collect();
        assert!(matches!(
            train_dnn(&pairs, &FeatureMask::all(21), &PredictorHyper::default()),
            Err(PredictorError::TooFewSamples { got: 5, need: 20 })
        ));
    }

    fn random_snapshot(seed: u64, shapes: &[(usize, usize)]) -> WeightSnapshot {
        let mut rng = SplitMix64::new(seed);
        WeightSnapshot::new(
            shapes
                .iter()
                .map(|(r, c)| {
                    Matrix::from_vec(*r, *c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect())
                        .unwrap()
                })
                .collect(),
            format!("agent_{seed}"),
        )
    }

    /// Tiny snapshots give 3-row images, which keeps CNN training cheap.
    /// A per-snapshot power transform spreads the mean pixel value over
    /// roughly [0.25, 0.75] so the label carries real variance.
    fn tiny_image_pairs(n: usize, seed: u64) -> Vec<(WeightImage, f64)> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| {
                let power = rng.uniform(0.3, 3.0);
                let shapes = [(10usize, 14usize), (14, 14), (14, 7)];
                let layers: Vec<Matrix> = shapes
                    .iter()
                    .map(|(r, c)| {
                        let data = (0..r * c).map(|_| rng.next_f64().powf(power)).collect();
                        Matrix::from_vec(*r, *c, data).unwrap()
                    })
                    .collect();
                let snap = WeightSnapshot::new(layers, "img");
                let img = build_weight_image(&snap);
                let label = img.values.iter().sum::<f64>() / img.values.len() as f64;
                (img, label)
            })
            .collect()
    }

    #[test]
    fn cnn_learns_mean_pixel_label() {
        let pairs = tiny_image_pairs(60, 100);
        let hyper =
            PredictorHyper { epochs: 150, batch_size: 16, lr: 1e-3, seed: 5 };
        let artifact = train_cnn(&pairs[..48], &hyper).unwrap();
        let cnn = match &artifact.model {
            PredictorModel::Cnn(c) => c,
            _ => unreachable!(),
        };
        let labels: Vec<f64> = pairs[48..].iter().map(|(_, z)| *z).collect();
        let predictions: Vec<f64> =
            pairs[48..].iter().map(|(img, _)| cnn.predict(img).unwrap()).collect();
        let r2 = r_squared(&labels, &predictions);
        assert!(r2 >= 0.9, "held-out R^2 = {r2}");
    }

    #[test]
    fn cnn_fits_constant_labels_and_is_deterministic() {
        let pairs: Vec<(WeightImage, f64)> =
            tiny_image_pairs(24, 300).into_iter().map(|(img, _)| (img, 0.4)).collect();
        let hyper = PredictorHyper { epochs: 120, batch_size: 8, lr: 1e-3, seed: 6 };
        let a = train_cnn(&pairs, &hyper).unwrap();
        let b = train_cnn(&pairs, &hyper).unwrap();
        assert_eq!(a.model, b.model);
        if let PredictorModel::Cnn(c) = &a.model {
            let pred = c.predict(&pairs[3].0).unwrap();
            assert!((pred - 0.4).abs() < 1e-3, "prediction {pred}");
        }
    }

    fn trained_tiny_dnn(seed: u64) -> PredictorArtifact {
        // A DNN over the 21 statistics of tiny 3-layer snapshots.
        let pairs: Vec<(FeatureVector, f64)> = (0..30)
            .map(|i| {
                let snap = random_snapshot(seed + i, &[(6, 4), (4, 4), (4, 3)]);
                let f = extract_stats(&snap);
                let label = f.values[1] + 0.5 * f.values[8];
                (f, label)
            })
            .collect();
        let mask = FeatureMask {
            selected: (0..21).map(|i| i % 2 == 0 || i == 1).collect(),
            threshold: 0.0,
            scores: vec![0.0; 21],
        };
        let hyper = PredictorHyper { epochs: 40, seed, ..PredictorHyper::default() };
        train_dnn(&pairs, &mask, &hyper).unwrap()
    }

    #[test]
    fn predict_is_pure_and_permutation_invariant() {
        let artifact = trained_tiny_dnn(7);
        let snap = random_snapshot(900, &[(6, 4), (4, 4), (4, 3)]);
        let a = predict(&artifact, &snap).unwrap();
        let b = predict(&artifact, &snap).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a.is_finite());

        // Permute within layer 0: statistics are symmetric, prediction close
        // to identical (summation order shifts by < 1e-12).
        let mut permuted = snap.clone();
        let mut data = permuted.layers[0].data().to_vec();
        data.reverse();
        permuted.layers[0] = Matrix::from_vec(6, 4, data).unwrap();
        let c = predict(&artifact, &permuted).unwrap();
        assert!((a - c).abs() < 1e-9);
    }

    /// Regenerates until every layer has pairwise-distinct values with a
    /// margin; percentile gradients are only defined there.
    fn distinct_policy(mut seed: u64) -> PolicyNet {
        loop {
            let policy = PolicyNet::new(6, 4, 3, seed);
            let ok = policy.net.layers.iter().all(|l| {
                let mut v = l.w.data().to_vec();
                v.sort_unstable_by(f64::total_cmp);
                v.windows(2).all(|w| w[1] - w[0] > 1e-4)
            });
            if ok {
                return policy;
            }
            seed += 1;
        }
    }

    #[test]
    fn gen_score_gradient_matches_finite_differences() {
        let artifact = trained_tiny_dnn(11);
        for case in 0..5u64 {
            let policy = distinct_policy(1000 + case * 17);
            let (_, grads) = gen_score_with_gradient(&artifact, &policy).unwrap();

            let theta = policy.net.flat_params();
            let fd = central_diff_grad(
                |p: &[f64]| {
                    let mut pol = policy.clone();
                    pol.net.set_flat_params(p).unwrap();
                    gen_score_with_gradient(&artifact, &pol).unwrap().0
                },
                &theta,
                1e-6,
            );
            let err = max_rel_err(&grads.flatten(), &fd);
            assert!(err < 1e-5, "case {case}: rel err {err}");
        }
    }

    #[test]
    fn gen_score_leaves_artifact_frozen() {
        let artifact = trained_tiny_dnn(13);
        let before = artifact_params_hash(&artifact);
        let policy = PolicyNet::new(6, 4, 3, 2);
        for _ in 0..10 {
            gen_score_with_gradient(&artifact, &policy).unwrap();
        }
        assert_eq!(artifact_params_hash(&artifact), before);
    }

    #[test]
    fn zero_output_layer_gives_bias_and_zero_gradient() {
        let mut artifact = trained_tiny_dnn(17);
        let bias = 0.42;
        if let PredictorModel::Dnn(d) = &mut artifact.model {
            let last = d.net.layers.last_mut().unwrap();
            last.w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            last.b[0] = bias;
        }
        let policy = PolicyNet::new(6, 4, 3, 3);
        let (score, grads) = gen_score_with_gradient(&artifact, &policy).unwrap();
        assert_eq!(score, bias);
        assert!(grads.is_all_zero());
    }

    #[test]
    fn scaling_output_layer_scales_score_and_gradient() {
        let artifact = trained_tiny_dnn(19);
        let policy = distinct_policy(500);
        let (score, grads) = gen_score_with_gradient(&artifact, &policy).unwrap();

        let mut doubled = artifact.clone();
        if let PredictorModel::Dnn(d) = &mut doubled.model {
            let last = d.net.layers.last_mut().unwrap();
            last.w.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            last.b[0] *= 2.0;
        }
        let (score2, grads2) = gen_score_with_gradient(&doubled, &policy).unwrap();
        assert!((score2 - 2.0 * score).abs() < 1e-12);
        for (a, b) in grads2.flatten().iter().zip(grads.flatten()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn cnn_artifact_is_rejected_by_gen_score() {
        let pairs = tiny_image_pairs(20, 700);
        let hyper = PredictorHyper { epochs: 1, batch_size: 8, lr: 1e-3, seed: 1 };
        let artifact = train_cnn(&pairs, &hyper).unwrap();
        let policy = PolicyNet::new(6, 4, 3, 4);
        assert!(matches!(
            gen_score_with_gradient(&artifact, &policy),
            Err(PredictorError::WrongArchitecture("dnn"))
        ));
        assert!(GenLossHook::new(artifact).is_err());
    }

    #[test]
    fn evaluation_metrics_match_definitions() {
        let artifact = trained_tiny_dnn(23);
        let test: Vec<(WeightSnapshot, f64)> = (0..10)
            .map(|i| {
                let snap = random_snapshot(2000 + i, &[(6, 4), (4, 4), (4, 3)]);
                let label = predict(&artifact, &snap).unwrap();
                (snap, label)
            })
            .collect();
        // Labels equal to predictions: pearson 1, mse 0.
        let report = evaluate_predictor(&artifact, &test).unwrap();
        assert!((report.pearson - 1.0).abs() < 1e-12);
        assert!(report.mse < 1e-24);

        // Labels shifted by a constant: pearson still 1, mse = c^2.
        let shifted: Vec<(WeightSnapshot, f64)> =
            test.iter().map(|(s, z)| (s.clone(), z + 0.25)).collect();
        let report = evaluate_predictor(&artifact, &shifted).unwrap();
        assert!((report.pearson - 1.0).abs() < 1e-12);
        assert!((report.mse - 0.0625).abs() < 1e-12);

        // The report's pearson is the features::pearson of its own columns.
        let labels: Vec<f64> = report.rows.iter().map(|r| r.label).collect();
        let predictions: Vec<f64> = report.rows.iter().map(|r| r.prediction).collect();
        assert_eq!(report.pearson, pearson(&predictions, &labels).unwrap());
    }

    #[test]
    fn random_predictions_are_uncorrelated_with_random_labels() {
        // Monte-Carlo null at n = 1000 under a pinned seed.
        let mut rng = SplitMix64::new(31);
        let a: Vec<f64> = (0..1000).map(|_| rng.next_f64()).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.next_f64()).collect();
        assert!(pearson(&a, &b).unwrap().abs() < 0.1);
    }

    #[test]
    fn constant_predictions_raise_zero_variance() {
        let mut artifact = trained_tiny_dnn(29);
        if let PredictorModel::Dnn(d) = &mut artifact.model {
            let last = d.net.layers.last_mut().unwrap();
            last.w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let test: Vec<(WeightSnapshot, f64)> = (0..5)
            .map(|i| (random_snapshot(3000 + i, &[(6, 4), (4, 4), (4, 3)]), i as f64 / 5.0))
            .collect();
        assert!(matches!(
            evaluate_predictor(&artifact, &test),
            Err(PredictorError::Feature(FeatureError::ZeroVariance(_)))
        ));
    }

    #[test]
    fn dnn_artifact_roundtrips_through_directory() {
        let artifact = trained_tiny_dnn(37);
        let dir = tempfile::tempdir().unwrap();
        save_artifact(dir.path(), &artifact).unwrap();
        let loaded = load_artifact(dir.path()).unwrap();
        assert_eq!(loaded, artifact);
        let snap = random_snapshot(4000, &[(6, 4), (4, 4), (4, 3)]);
        assert_eq!(
            predict(&artifact, &snap).unwrap().to_bits(),
            predict(&loaded, &snap).unwrap().to_bits()
        );
    }

    #[test]
    fn cnn_artifact_roundtrips_through_directory() {
        let pairs = tiny_image_pairs(20, 800);
        let hyper = PredictorHyper { epochs: 2, batch_size: 8, lr: 1e-3, seed: 2 };
        let artifact = train_cnn(&pairs, &hyper).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_artifact(dir.path(), &artifact).unwrap();
        let loaded = load_artifact(dir.path()).unwrap();
        assert_eq!(loaded, artifact);
    }

    #[test]
    fn corrupt_artifact_is_rejected() {
        let artifact = trained_tiny_dnn(41);
        let dir = tempfile::tempdir().unwrap();
        save_artifact(dir.path(), &artifact).unwrap();
        std::fs::write(dir.path().join("metadata.json"), "{}").unwrap();
        assert!(load_artifact(dir.path()).is_err());
    }
}
