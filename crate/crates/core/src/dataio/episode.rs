//! N-way K-shot episode composition.

use super::LabeledImage;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeSet;

/// One sampled item: an index into the pool plus the episode-local class
/// position in `0..n_way`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSlot {
    pub pool_index: usize,
    pub class_position: usize,
}

/// An N-way K-shot task. Support and query are class-major: all slots for
/// position 0 first, then position 1, and so on.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// Original class ids, indexed by class position.
    pub class_ids: Vec<usize>,
    pub support: Vec<EpisodeSlot>,
    pub query: Vec<EpisodeSlot>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.class_position).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.class_position).collect()
    }
}

/// Draw an episode: `n_way` classes without replacement from `split`, then
/// `k_shot + q_queries` images per class without replacement, remapping
/// labels to positions in draw order.
pub fn sample_episode(
    pool: &[LabeledImage],
    split: &BTreeSet<usize>,
    n_way: usize,
    k_shot: usize,
    q_queries: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if split.len() < n_way {
        return Err(Error::EpisodeSampling(format!(
            "split has {} classes, episode needs {}",
            split.len(),
            n_way
        )));
    }
    let mut classes: Vec<usize> = split.iter().copied().collect();
    classes.shuffle(rng);
    classes.truncate(n_way);

    let need = k_shot + q_queries;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_queries);
    for (position, &class) in classes.iter().enumerate() {
        let mut members: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, img)| img.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < need {
            return Err(Error::EpisodeSampling(format!(
                "class {} has {} images, episode needs {} (k_shot {} + q_queries {})",
                class,
                members.len(),
                need,
                k_shot,
                q_queries
            )));
        }
        members.shuffle(rng);
        for &pool_index in &members[..k_shot] {
            support.push(EpisodeSlot {
                pool_index,
                class_position: position,
            });
        }
        for &pool_index in &members[k_shot..need] {
            query.push(EpisodeSlot {
                pool_index,
                class_position: position,
            });
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        q_queries,
        class_ids: classes,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::make_synthetic_dataset;
    use crate::rng::{stream, Concern};

    fn split(range: std::ops::Range<usize>) -> BTreeSet<usize> {
        range.collect()
    }

    #[test]
    fn five_way_five_shot_sizes() {
        let pool = make_synthetic_dataset(6, 25, 8, 1).unwrap();
        let mut rng = stream(1, Concern::EpisodeSampling, 0);
        let ep = sample_episode(&pool, &split(0..6), 5, 5, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
    }

    #[test]
    fn one_shot_support_size() {
        let pool = make_synthetic_dataset(6, 25, 8, 1).unwrap();
        let mut rng = stream(1, Concern::EpisodeSampling, 1);
        let ep = sample_episode(&pool, &split(0..6), 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
    }

    #[test]
    fn deficient_class_is_named() {
        let mut pool = make_synthetic_dataset(5, 20, 8, 1).unwrap();
        // class 3 keeps only 19 images
        let idx = pool.iter().position(|img| img.label == 3).unwrap();
        pool.remove(idx);
        let mut rng = stream(1, Concern::EpisodeSampling, 2);
        let err = sample_episode(&pool, &split(0..5), 5, 5, 15, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class 3"), "message should name class 3: {msg}");
        assert!(msg.contains("19"), "message should report the count: {msg}");
    }

    #[test]
    fn too_few_classes_fails() {
        let pool = make_synthetic_dataset(3, 30, 8, 1).unwrap();
        let mut rng = stream(1, Concern::EpisodeSampling, 3);
        assert!(sample_episode(&pool, &split(0..3), 5, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn positions_are_balanced_and_disjoint() {
        let pool = make_synthetic_dataset(8, 30, 8, 1).unwrap();
        for i in 0..50 {
            let mut rng = stream(9, Concern::EpisodeSampling, i);
            let ep = sample_episode(&pool, &split(0..8), 5, 3, 7, &mut rng).unwrap();
            for pos in 0..5 {
                assert_eq!(
                    ep.support.iter().filter(|s| s.class_position == pos).count(),
                    3
                );
                assert_eq!(
                    ep.query.iter().filter(|s| s.class_position == pos).count(),
                    7
                );
            }
            let s: BTreeSet<usize> = ep.support.iter().map(|s| s.pool_index).collect();
            let q: BTreeSet<usize> = ep.query.iter().map(|s| s.pool_index).collect();
            assert_eq!(s.len(), ep.support.len());
            assert_eq!(q.len(), ep.query.len());
            assert!(s.is_disjoint(&q));
        }
    }

    #[test]
    fn same_stream_replays_identically() {
        let pool = make_synthetic_dataset(8, 30, 8, 1).unwrap();
        for i in 0..10 {
            let mut a = stream(4, Concern::EpisodeSampling, i);
            let mut b = stream(4, Concern::EpisodeSampling, i);
            let ea = sample_episode(&pool, &split(0..8), 5, 2, 4, &mut a).unwrap();
            let eb = sample_episode(&pool, &split(0..8), 5, 2, 4, &mut b).unwrap();
            assert_eq!(ea.class_ids, eb.class_ids);
            assert_eq!(ea.support, eb.support);
            assert_eq!(ea.query, eb.query);
        }
    }
}
