//! Planted block-structured interaction generator for desk-scale experiments.
//!
//! Users and items are split into `blocks` equal blocks, each further split
//! into `sub_blocks` groups. A user interacts with an item of its own block
//! with overall probability `density`, of which `own_share` lands in the
//! user's own sub-block; items of other blocks are hit with `cross_density`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, ItemId, UserId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    pub sub_blocks: usize,
    pub density: f64,
    pub own_share: f64,
    pub cross_density: f64,
    pub seed: u64,
}

impl Default for BlockSpec {
    fn default() -> Self {
        BlockSpec {
            users: 200,
            items: 200,
            blocks: 2,
            sub_blocks: 4,
            density: 0.3,
            own_share: 0.8,
            cross_density: 0.0,
            seed: 0,
        }
    }
}

impl BlockSpec {
    fn group(&self, idx: usize, n: usize) -> (usize, usize) {
        let block = idx * self.blocks / n;
        let lo = block * n / self.blocks;
        let hi = (block + 1) * n / self.blocks;
        (block, (idx - lo) * self.sub_blocks / (hi - lo))
    }

    pub fn user_group(&self, u: UserId) -> (usize, usize) {
        self.group(u as usize, self.users)
    }

    pub fn item_group(&self, i: ItemId) -> (usize, usize) {
        self.group(i as usize, self.items)
    }

    /// Within-block probabilities `(own sub-block, other sub-block)`.
    pub fn block_probabilities(&self) -> (f64, f64) {
        let s = self.sub_blocks as f64;
        if self.sub_blocks == 1 {
            return (self.density, self.density);
        }
        let own = self.density * self.own_share * s;
        let other = self.density * (1.0 - self.own_share) * s / (s - 1.0);
        (own, other)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.sub_blocks == 0 || self.users < self.blocks * self.sub_blocks || self.items < self.blocks * self.sub_blocks {
            return Err(Error::invalid("every sub-block needs at least one user and one item"));
        }
        let (own, other) = self.block_probabilities();
        for p in [own, other, self.cross_density] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("block spec implies probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draws the interaction set in (user, item) order, without timestamps.
pub fn generate_blocks(spec: &BlockSpec) -> Result<Vec<Interaction>> {
    spec.validate()?;
    let (own, other) = spec.block_probabilities();
    let mut r = rng::stream(spec.seed, &[0xB10C]);
    let mut out = Vec::new();
    for u in 0..spec.users as UserId {
        let (ub, us) = spec.user_group(u);
        for i in 0..spec.items as ItemId {
            let (ib, is) = spec.item_group(i);
            let p = match (ub == ib, us == is) {
                (true, true) => own,
                (true, false) => other,
                (false, _) => spec.cross_density,
            };
            if r.gen::<f64>() < p {
                out.push(Interaction::new(u, i));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_probabilities() {
        let (own, other) = BlockSpec::default().block_probabilities();
        assert!((own - 0.96).abs() < 1e-12);
        assert!((other - 0.08).abs() < 1e-12);
        // Weighted back to the block density.
        assert!((own / 4.0 + other * 3.0 / 4.0 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn groups_are_even() {
        let s = BlockSpec::default();
        assert_eq!(s.user_group(0), (0, 0));
        assert_eq!(s.user_group(99), (0, 3));
        assert_eq!(s.user_group(100), (1, 0));
        assert_eq!(s.item_group(125), (1, 1));
    }

    #[test]
    fn density_near_target_and_deterministic() {
        let s = BlockSpec { seed: 3, ..Default::default() };
        let a = generate_blocks(&s).unwrap();
        assert_eq!(a, generate_blocks(&s).unwrap());
        let within = a.iter().filter(|e| s.user_group(e.user).0 == s.item_group(e.item).0).count();
        let d = within as f64 / (2.0 * 100.0 * 100.0);
        assert!((d - 0.3).abs() < 0.02, "density {d}");
    }

    #[test]
    fn rejects_impossible_spec() {
        let s = BlockSpec { density: 0.9, ..Default::default() };
        assert!(generate_blocks(&s).is_err());
    }
}
