//! End-to-end runs over a dataset manifest: training with checkpoint
//! metadata, feature extraction and retrieval evaluation.

use crate::data::{CheckpointMeta, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, multi_query_pool, pairwise_distances, EvalOptions, ItemMeta, RetrievalReport};
use crate::model::FusionNetwork;
use crate::part_losses::LossWeights;
use crate::tensor::Tensor;
use crate::trainer::{identification_accuracy, train, LabeledImages, TrainConfig, TrainReport};

/// Images per forward pass during feature extraction.
pub const EXTRACT_BATCH: usize = 16;

/// Train `net` on the manifest's train split. `on_checkpoint` receives the
/// network and matching metadata at every checkpoint.
pub fn train_on_manifest(
    net: &mut FusionNetwork<f32>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut on_checkpoint: impl FnMut(&FusionNetwork<f32>, &CheckpointMeta) -> Result<()>,
) -> Result<(CheckpointMeta, TrainReport)> {
    let data = manifest.training_set(&manifest.means)?;
    let meta_at = |net: &FusionNetwork<f32>, iteration| CheckpointMeta {
        config: net.config().clone(),
        iteration,
        means: manifest.means,
        seed: cfg.seed,
        label_ids: manifest.label_ids.clone(),
    };
    let report = train(net, &data, cfg, weights, |iter, net| on_checkpoint(net, &meta_at(net, iter)))?;
    Ok((meta_at(net, cfg.max_iters), report))
}

/// Eval-mode identification accuracy on the manifest's whole train split.
pub fn training_accuracy(net: &mut FusionNetwork<f32>, manifest: &DatasetManifest, means: &[f64; 3]) -> Result<f64> {
    let data: LabeledImages = manifest.training_set(means)?;
    identification_accuracy(net, &data, EXTRACT_BATCH)
}

/// L2-normalized features `[n, d]` of preprocessed `[3, 160, 64]` images.
pub fn extract(net: &mut FusionNetwork<f32>, images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let d = net.feature_dim();
    let mut out = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(EXTRACT_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].len());
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].shape());
        for img in chunk {
            data.extend_from_slice(img.data());
        }
        out.extend_from_slice(net.extract_features(&Tensor::from_vec(&shape, data)?)?.data());
    }
    Tensor::from_vec(&[images.len(), d], out)
}

/// Query-versus-gallery retrieval on the manifest, normalizing with `means`.
pub fn evaluate_manifest(
    net: &mut FusionNetwork<f32>,
    manifest: &DatasetManifest,
    means: &[f64; 3],
    multi_query: bool,
    opts: EvalOptions,
) -> Result<RetrievalReport> {
    let meta = |split| -> Vec<ItemMeta> {
        manifest
            .split(split)
            .map(|s| ItemMeta::new(s.record.identity, s.record.camera))
            .collect()
    };
    let (qmeta, gmeta) = (meta(Split::Query), meta(Split::Gallery));
    if qmeta.is_empty() || gmeta.is_empty() {
        return Err(Error::Dataset(format!(
            "manifest has {} query and {} gallery samples; both must be non-empty",
            qmeta.len(),
            gmeta.len()
        )));
    }
    let qf = extract(net, &manifest.images(Split::Query, means)?)?;
    let gf = extract(net, &manifest.images(Split::Gallery, means)?)?;
    let (qf, qmeta) = if multi_query { multi_query_pool(&qf, &qmeta)? } else { (qf, qmeta) };
    evaluate(&pairwise_distances(&qf, &gf)?, &qmeta, &gmeta, opts)
}
