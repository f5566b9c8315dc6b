//! Case generation and fold partitioning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use propaseg_core::volume::{make_phantom, FadeBand, MaskVolume, PhantomConfig, Volume};
use propaseg_core::Result;

use crate::config::ExperimentConfig;

/// Seed for case `id`, independent of how cases are split into folds.
pub fn case_seed(base: u64, id: usize) -> u64 {
    let mut z = base ^ (id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Phantom description for one case; the fade band is where the backbone is
/// expected to fail.
#[derive(Clone, Debug)]
pub struct CaseSpec {
    pub id: usize,
    pub phantom: PhantomConfig,
    pub band: FadeBand,
}

impl CaseSpec {
    pub fn new(cfg: &ExperimentConfig, id: usize) -> Self {
        let seed = case_seed(cfg.seed, id);
        let p = &cfg.phantom;
        let len = cfg.corruption.band_len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFADE);
        let start = rng.gen_range(1..p.dims.d - len);
        Self {
            id,
            phantom: PhantomConfig {
                dims: p.dims,
                kind: cfg.family,
                drift: p.drift,
                noise_std: p.noise_std,
                pet_channel: p.pet_channel,
                seed,
                spacing: p.spacing,
                fade: None,
            },
            band: FadeBand {
                start,
                len,
                residual: cfg.corruption.residual,
            },
        }
    }

    pub fn clean(&self) -> Result<(Volume, MaskVolume)> {
        make_phantom(&self.phantom)
    }

    pub fn faded(&self) -> Result<(Volume, MaskVolume)> {
        make_phantom(&PhantomConfig {
            fade: Some(self.band),
            ..self.phantom.clone()
        })
    }
}

/// Held-out case ids for each fold. Every id appears in exactly one fold.
pub fn partition(cases: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..cases).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xF01D));
    let mut out = vec![Vec::new(); folds];
    for (i, id) in ids.into_iter().enumerate() {
        out[i % folds].push(id);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    out
}

/// Training ids for fold `k`: everything not held out by it.
pub fn train_ids(partition: &[Vec<usize>], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = partition
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn folds_are_disjoint_and_cover(cases in 2usize..60, folds in 2usize..6, seed in any::<u64>()) {
            prop_assume!(cases >= folds);
            let p = partition(cases, folds, seed);
            let mut all: Vec<usize> = p.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..cases).collect::<Vec<_>>());
            for k in 0..folds {
                let train = train_ids(&p, k);
                prop_assert!(train.iter().all(|id| !p[k].contains(id)));
                prop_assert_eq!(train.len() + p[k].len(), cases);
            }
            let sizes: Vec<usize> = p.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn clean_and_faded_share_geometry() {
        let cfg = ExperimentConfig::default();
        let spec = CaseSpec::new(&cfg, 3);
        let (cv, cm) = spec.clean().unwrap();
        let (fv, fm) = spec.faded().unwrap();
        assert_eq!(cm, fm);
        let plane = cfg.phantom.dims.plane();
        let band = spec.band.start..spec.band.start + spec.band.len;
        let same = |z: usize| cv.data[z * plane..(z + 1) * plane] == fv.data[z * plane..(z + 1) * plane];
        assert!((0..cfg.phantom.dims.d).filter(|z| !band.contains(z)).all(same));
        assert!(band.clone().any(|z| !same(z)));
    }

    #[test]
    fn case_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| case_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
