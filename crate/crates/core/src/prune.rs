//! Latent-space pruning. Coordinates of the shared space are ranked by
//! their mean absolute activation over a dataset (un-normalized
//! projections), and a checkpoint is physically cut down to the top `r`
//! rows of its projection. The surviving original coordinates are recorded
//! so the text side of a classifier can be reduced to match.

use serde::{Deserialize, Serialize};

use crate::distill::{eval_mels, LoadedDataset};
use crate::encoder::{PhiNetConfig, StudentEncoder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::{FrontendConfig, PruneInfo};
use crate::tensor::Tensor;

/// A full ordering of the latent coordinates, most important first, bound
/// to the encoder and dataset it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRanking {
    pub dim: usize,
    /// All `dim` coordinates, descending importance.
    pub order: Vec<usize>,
    /// Mean absolute activation per original coordinate.
    pub importance: Vec<f64>,
    pub encoder_fingerprint: String,
    pub dataset_fingerprint: String,
}

impl PruneRanking {
    pub fn validate(&self) -> Result<()> {
        if self.order.len() != self.dim || self.importance.len() != self.dim {
            return Err(Error::format(format!(
                "ranking lists {} coordinates and {} importances for a {}-wide space",
                self.order.len(),
                self.importance.len(),
                self.dim
            )));
        }
        let mut seen = vec![false; self.dim];
        for &i in &self.order {
            if i >= self.dim || seen[i] {
                return Err(Error::format(format!(
                    "ranking order is not a permutation of 0..{}",
                    self.dim
                )));
            }
            seen[i] = true;
        }
        if self.importance.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("ranking importance is not finite".to_string()));
        }
        Ok(())
    }

    /// The first `r` surviving coordinates, in ranking order.
    pub fn top_indices(&self, r: usize) -> Result<Vec<usize>> {
        if r == 0 || r > self.dim {
            return Err(Error::contract(format!(
                "r = {r} is outside the valid range 1..={}",
                self.dim
            )));
        }
        Ok(self.order[..r].to_vec())
    }
}

/// Mean absolute value per column, accumulated in f64.
pub fn importance_from_latents<S: Scalar>(latents: &Tensor<S>) -> Result<Vec<f64>> {
    if latents.shape().len() != 2 || latents.shape()[0] == 0 {
        return Err(Error::contract(format!(
            "importance needs a non-empty [n, d] batch, got {:?}",
            latents.shape()
        )));
    }
    let (n, d) = (latents.shape()[0], latents.shape()[1]);
    let mut sums = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            sums[j] += latents.data()[i * d + j].to_f64_c().abs();
        }
    }
    for s in &mut sums {
        *s /= n as f64;
    }
    Ok(sums)
}

/// Descending by importance; equal scores keep the lower coordinate first.
pub fn order_by_importance(importance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    order
}

/// Ranks the latent coordinates of `enc` over a dataset: deterministic
/// center crops, eval mode, un-normalized projections.
pub fn rank_latents<S: Scalar>(
    enc: &StudentEncoder<S>,
    ds: &LoadedDataset,
    fe: &FrontendConfig,
    dataset_fingerprint: String,
) -> Result<PruneRanking> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mels = eval_mels(ds, &indices, fe)?;
    let latents = enc.embed_raw(&mels)?;
    let importance = importance_from_latents(&latents)?;
    let order = order_by_importance(&importance);
    Ok(PruneRanking {
        dim: enc.latent_dim(),
        order,
        importance,
        encoder_fingerprint: enc.fingerprint(),
        dataset_fingerprint,
    })
}

/// Physically prunes the projection to the top `r` ranked rows. The result
/// is a self-contained `r`-wide encoder plus the provenance record for its
/// checkpoint header. The ranking must have been computed from exactly
/// this encoder.
pub fn prune_encoder<S: Scalar>(
    enc: &StudentEncoder<S>,
    ranking: &PruneRanking,
    r: usize,
) -> Result<(StudentEncoder<S>, PruneInfo)> {
    ranking.validate()?;
    if ranking.dim != enc.latent_dim() {
        return Err(Error::contract(format!(
            "ranking covers a {}-wide latent space but the encoder is {}-wide",
            ranking.dim,
            enc.latent_dim()
        )));
    }
    if ranking.encoder_fingerprint != enc.fingerprint() {
        return Err(Error::contract(format!(
            "ranking was computed from a different encoder (fingerprint {}, this encoder is {})",
            ranking.encoder_fingerprint,
            enc.fingerprint()
        )));
    }
    let keep = ranking.top_indices(r)?;
    let d = enc.latent_dim();
    let u = enc.feature_dim();

    let cfg = enc.config();
    let pruned_cfg =
        PhiNetConfig::new(cfg.alpha, cfg.beta, cfg.t_zero, cfg.num_blocks, r)?;
    let mut out = StudentEncoder::<S>::new(pruned_cfg, 0)?;
    for (name, t) in enc.tensors() {
        match name {
            "head.weight" => {
                let mut rows = Vec::with_capacity(r * u);
                for &i in &keep {
                    rows.extend_from_slice(&t.data()[i * u..(i + 1) * u]);
                }
                out.set_tensor(name, Tensor::from_vec(vec![r, u], rows, name)?)?;
            }
            "head.bias" => {
                let picked: Vec<S> = keep.iter().map(|&i| t.data()[i]).collect();
                out.set_tensor(name, Tensor::from_vec(vec![r], picked, name)?)?;
            }
            _ => out.set_tensor(name, t.clone())?,
        }
    }
    Ok((out, PruneInfo { r, indices: keep, full_dim: d }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> StudentEncoder<f32> {
        StudentEncoder::new(PhiNetConfig::preset("tiny").unwrap(), seed).unwrap()
    }

    fn identity_ranking(enc: &StudentEncoder<f32>) -> PruneRanking {
        let d = enc.latent_dim();
        PruneRanking {
            dim: d,
            order: (0..d).collect(),
            importance: (0..d).map(|i| (d - i) as f64).collect(),
            encoder_fingerprint: enc.fingerprint(),
            dataset_fingerprint: "test".into(),
        }
    }

    #[test]
    fn worked_example_matches_hand_computation() {
        // Two 3-wide projections: mean |x| per column is [0.2, 0.7, 0.2];
        // column 1 leads, the 0/2 tie resolves to the lower index.
        let latents = Tensor::from_vec(
            vec![2, 3],
            vec![0.1f64, -0.9, 0.3, 0.3, 0.5, -0.1],
            "latents",
        )
        .unwrap();
        let imp = importance_from_latents(&latents).unwrap();
        assert!((imp[0] - 0.2).abs() < 1e-12);
        assert!((imp[1] - 0.7).abs() < 1e-12);
        assert!((imp[2] - 0.2).abs() < 1e-12);
        assert_eq!(order_by_importance(&imp), vec![1, 0, 2]);
    }

    #[test]
    fn equal_scores_keep_the_lower_coordinate_first() {
        assert_eq!(order_by_importance(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
        assert_eq!(order_by_importance(&[0.1, 0.5, 0.5]), vec![1, 2, 0]);
    }

    #[test]
    fn top_indices_are_prefix_consistent() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let importance: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
        let ranking = PruneRanking {
            dim: 16,
            order: order_by_importance(&importance),
            importance,
            encoder_fingerprint: String::new(),
            dataset_fingerprint: String::new(),
        };
        for r in 1..16 {
            let a = ranking.top_indices(r).unwrap();
            let b = ranking.top_indices(r + 1).unwrap();
            assert_eq!(a[..], b[..r]);
        }
    }

    #[test]
    fn out_of_range_r_is_rejected() {
        let enc = tiny(1);
        let ranking = identity_ranking(&enc);
        for bad in [0, 9] {
            let err = ranking.top_indices(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2);
            assert!(err.to_string().contains("1..=8"), "{err}");
        }
    }

    #[test]
    fn pruned_projection_keeps_exactly_the_selected_rows() {
        let enc = tiny(5);
        let mut ranking = identity_ranking(&enc);
        ranking.order = vec![6, 0, 3, 1, 2, 4, 5, 7];
        ranking.importance = vec![6.0, 4.0, 2.9, 5.0, 1.0, 0.5, 7.0, 0.1];
        let (pruned, info) = prune_encoder(&enc, &ranking, 3).unwrap();

        assert_eq!(pruned.latent_dim(), 3);
        assert_eq!(info, PruneInfo { r: 3, indices: vec![6, 0, 3], full_dim: 8 });

        let u = enc.feature_dim();
        let w = enc.tensor("head.weight").unwrap();
        let b = enc.tensor("head.bias").unwrap();
        let wp = pruned.tensor("head.weight").unwrap();
        let bp = pruned.tensor("head.bias").unwrap();
        assert_eq!(wp.shape(), &[3, u]);
        for (row, &src) in info.indices.iter().enumerate() {
            assert_eq!(&wp.data()[row * u..(row + 1) * u], &w.data()[src * u..(src + 1) * u]);
            assert_eq!(bp.data()[row], b.data()[src]);
        }
        for (name, t) in enc.tensors() {
            if name != "head.weight" && name != "head.bias" {
                assert_eq!(t.data(), pruned.tensor(name).unwrap().data(), "{name}");
            }
        }
    }

    #[test]
    fn full_width_prune_with_identity_order_is_bitwise() {
        let enc = tiny(7);
        let ranking = identity_ranking(&enc);
        let (pruned, info) = prune_encoder(&enc, &ranking, 8).unwrap();
        assert_eq!(info.indices, (0..8).collect::<Vec<_>>());
        assert_eq!(enc.fingerprint(), pruned.fingerprint());
    }

    #[test]
    fn ranking_from_a_different_encoder_is_rejected() {
        let enc = tiny(5);
        let other = tiny(6);
        let ranking = identity_ranking(&other);
        let err = prune_encoder(&enc, &ranking, 4).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("fingerprint"), "{err}");
    }

    #[test]
    fn ranking_survives_json() {
        let enc = tiny(5);
        let ranking = identity_ranking(&enc);
        let json = serde_json::to_string(&ranking).unwrap();
        let back: PruneRanking = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ranking);
        back.validate().unwrap();
    }

    #[test]
    fn malformed_rankings_are_rejected() {
        let base = PruneRanking {
            dim: 4,
            order: vec![0, 1, 2, 3],
            importance: vec![1.0; 4],
            encoder_fingerprint: String::new(),
            dataset_fingerprint: String::new(),
        };
        let mut short = base.clone();
        short.order.pop();
        let mut dup = base.clone();
        dup.order = vec![0, 1, 1, 3];
        let mut oob = base.clone();
        oob.order = vec![0, 1, 2, 9];
        let mut nan = base.clone();
        nan.importance[2] = f64::NAN;
        for bad in [short, dup, oob, nan] {
            assert_eq!(bad.validate().unwrap_err().exit_code(), 3);
        }
        base.validate().unwrap();
    }
}
