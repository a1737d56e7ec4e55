use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::SourceTag;
use crate::{Error, Result};

pub const CATEGORIES: [SourceTag; 3] = [SourceTag::Swapped, SourceTag::Stylized, SourceTag::Real];

/// I.i.d. categorical draws over swapped, stylized and real pools. A draw
/// that lands on an empty pool falls back to the real pool.
#[derive(Debug, Clone)]
pub struct MixSampler<T> {
    pools: [Vec<T>; 3],
    proportions: [f64; 3],
    dist: WeightedIndex<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Draw<T> {
    /// Category the sample was actually taken from.
    pub tag: SourceTag,
    /// Category the categorical draw selected before any fallback.
    pub drawn: SourceTag,
    pub item: T,
}

pub fn validate_proportions(p: [f64; 3]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidProportions(p));
    }
    Ok(())
}

impl<T: Clone> MixSampler<T> {
    pub fn new(swapped: Vec<T>, stylized: Vec<T>, real: Vec<T>, proportions: [f64; 3]) -> Result<Self> {
        validate_proportions(proportions)?;
        if real.is_empty() {
            return Err(Error::EmptyPools);
        }
        let dist = WeightedIndex::new(proportions).map_err(|_| Error::InvalidProportions(proportions))?;
        Ok(Self {
            pools: [swapped, stylized, real],
            proportions,
            dist,
        })
    }

    pub fn proportions(&self) -> [f64; 3] {
        self.proportions
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Draw<T> {
        let k = self.dist.sample(rng);
        let used = if self.pools[k].is_empty() { 2 } else { k };
        let pool = &self.pools[used];
        Draw {
            tag: CATEGORIES[used],
            drawn: CATEGORIES[k],
            item: pool[rng.gen_range(0..pool.len())].clone(),
        }
    }
}
