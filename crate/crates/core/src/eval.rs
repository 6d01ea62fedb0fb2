//! Embedding probes: contrastive-pair separation, kNN retention, and
//! jitter consistency. All operate on L2-normalized class tokens.

use crate::encoder::{Encoder, ImageTensor};
use crate::error::{DivaError, Result};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::synth::{translate, ContrastivePair, LabeledSet};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean of `1 − cos(a, b)` over embedding pairs.
pub fn mean_cosine_distance(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DivaError::Eval("pair list is empty".into()));
    }
    Ok(pairs.iter().map(|(a, b)| 1.0 - cosine(a, b)).sum::<f64>() / pairs.len() as f64)
}

pub fn pair_separation(
    encoder: &Encoder,
    params: &ParamSet,
    pairs: &[ContrastivePair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DivaError::Eval("pair list is empty".into()));
    }
    let embs = pairs
        .iter()
        .map(|p| {
            let (a, b) = p.images();
            Ok((encoder.embed(&a, params)?, encoder.embed(&b, params)?))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_cosine_distance(&embs)
}

/// kNN accuracy (percent) of `query` against `reference` by cosine
/// similarity. Votes are tallied over the `k` most similar references;
/// a tied vote goes to the tied class whose best match is most similar.
pub fn knn_accuracy(
    reference: &[Vec<f64>],
    reference_labels: &[usize],
    query: &[Vec<f64>],
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(DivaError::Eval(format!("k must be odd and >= 1, got {k}")));
    }
    if k > reference.len() {
        return Err(DivaError::Eval(format!(
            "k = {k} exceeds reference size {}",
            reference.len()
        )));
    }
    if query.is_empty() {
        return Err(DivaError::Eval("no query points".into()));
    }
    let mut correct = 0;
    for (q, &truth) in query.iter().zip(query_labels) {
        let mut sims: Vec<(f64, usize)> = reference
            .iter()
            .enumerate()
            .map(|(i, r)| (cosine(q, r), i))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &sims[..k];
        let mut votes: Vec<(usize, usize, usize)> = Vec::new(); // (label, count, first rank)
        for (rank, &(_, i)) in top.iter().enumerate() {
            let label = reference_labels[i];
            match votes.iter_mut().find(|v| v.0 == label) {
                Some(v) => v.1 += 1,
                None => votes.push((label, 1, rank)),
            }
        }
        let winner = votes
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
            .expect("k >= 1")
            .0;
        if winner == truth {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / query.len() as f64)
}

/// kNN retention on a labeled set: within each class, alternate images go
/// to the reference half and the rest are queries.
pub fn knn_retention(
    encoder: &Encoder,
    params: &ParamSet,
    set: &LabeledSet,
    k: usize,
) -> Result<f64> {
    let embs = set
        .images
        .iter()
        .map(|img| encoder.embed(img, params))
        .collect::<Result<Vec<_>>>()?;
    knn_split(&embs, &set.labels, k)
}

/// Applies the per-class alternating reference/query split to precomputed
/// embeddings.
pub fn knn_split(embs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let (mut r, mut rl, mut q, mut ql) = (vec![], vec![], vec![], vec![]);
    let mut seen = std::collections::HashMap::new();
    for (e, &l) in embs.iter().zip(labels) {
        let n = seen.entry(l).or_insert(0usize);
        *n += 1;
        if *n % 2 == 1 {
            r.push(e.clone());
            rl.push(l);
        } else {
            q.push(e.clone());
            ql.push(l);
        }
    }
    knn_accuracy(&r, &rl, &q, &ql, k)
}

/// Mean cosine similarity between embeddings of two independently
/// jittered copies of each image (shifts uniform in `-max_shift..=max_shift`).
pub fn augmentation_consistency(
    encoder: &Encoder,
    params: &ParamSet,
    images: &[ImageTensor],
    max_shift: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if images.is_empty() {
        return Err(DivaError::Eval("no images".into()));
    }
    let m = max_shift as i64;
    let mut total = 0.0;
    for img in images {
        let mut shift = || rng.int_inclusive(0, 2 * max_shift) as i64 - m;
        let (dx1, dy1, dx2, dy2) = (shift(), shift(), shift(), shift());
        let a = encoder.embed(&translate(img, dx1, dy1), params)?;
        let b = encoder.embed(&translate(img, dx2, dy2), params)?;
        total += cosine(&a, &b);
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{gen_pair, VisualPattern};

    #[test]
    fn identical_pair_has_zero_distance_orthogonal_has_one() {
        let v = vec![0.3, -0.4, 0.5];
        assert!(
            mean_cosine_distance(&[(v.clone(), v.clone())])
                .unwrap()
                .abs()
                < 1e-15
        );
        let d = mean_cosine_distance(&[(vec![1.0, 0.0], vec![0.0, 2.0])]).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        assert!(mean_cosine_distance(&[]).is_err());
    }

    #[test]
    fn separation_of_identical_images_is_zero() {
        let enc = Encoder::new(EncoderConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            ..EncoderConfig::default()
        })
        .unwrap();
        let params = enc.init_params(&mut RngStream::new(1, 0));
        let mut pair = gen_pair(VisualPattern::Color, 3);
        pair.b = pair.a.clone();
        let d = pair_separation(&enc, &params, &[pair]).unwrap();
        assert!(d.abs() < 1e-12);
        assert!(pair_separation(&enc, &params, &[]).is_err());
    }

    #[test]
    fn duplicated_query_is_found_with_k1() {
        let r = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]];
        let acc = knn_accuracy(&r, &[0, 1, 2], &[vec![0.7, 0.7]], &[2], 1).unwrap();
        assert_eq!(acc, 100.0);
        assert!(knn_accuracy(&r, &[0, 1, 2], &[vec![1.0, 0.0]], &[0], 5).is_err());
        assert!(knn_accuracy(&r, &[0, 1, 2], &[vec![1.0, 0.0]], &[0], 2).is_err());
    }

    #[test]
    fn random_embeddings_score_at_chance() {
        let mut rng = RngStream::new(77, 0);
        let n = 2048;
        let embs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..16).map(|_| rng.gaussian()).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 8).collect();
        let acc = knn_split(&embs, &labels, 5).unwrap();
        assert!((acc - 12.5).abs() <= 5.0, "{acc}");
    }

    #[test]
    fn retention_is_scale_invariant() {
        let mut rng = RngStream::new(8, 0);
        let embs: Vec<Vec<f64>> = (0..64)
            .map(|i| {
                (0..4)
                    .map(|j| rng.gaussian() + if j == i % 4 { 2.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
        let scaled: Vec<Vec<f64>> = embs
            .iter()
            .map(|e| e.iter().map(|x| 3.7 * x).collect())
            .collect();
        assert_eq!(
            knn_split(&embs, &labels, 3).unwrap(),
            knn_split(&scaled, &labels, 3).unwrap()
        );
    }
}
