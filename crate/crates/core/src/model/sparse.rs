use std::sync::Arc;

use crate::autodiff::Rulebook;
use crate::error::{ensure, Error, Result};
use crate::volume::grid::Voxel;

/// Index sets and rulebooks of a sparse UNet, finest level first. Level
/// `l + 1` holds the parents of level `l`.
#[derive(Clone, Debug)]
pub struct SparseHierarchy {
    pub levels: Vec<Vec<Voxel>>,
    pub sub: Vec<Arc<Rulebook>>,
    /// `down[l]` maps level `l` onto level `l + 1`.
    pub down: Vec<Arc<Rulebook>>,
    /// `up[l]` maps level `l + 1` back onto level `l`.
    pub up: Vec<Arc<Rulebook>>,
}

impl SparseHierarchy {
    pub fn new(indices: Vec<Voxel>, levels: usize) -> Result<Self> {
        ensure!(levels >= 1, Error::InvalidArgument("hierarchy needs a level".into()));
        ensure!(!indices.is_empty(), Error::EmptyOccupancy);
        let mut sets = vec![indices];
        let mut down = Vec::new();
        let mut up = Vec::new();
        for _ in 1..levels {
            let fine = sets.last().expect("non-empty");
            let (parents, rb) = Rulebook::downsample(fine)?;
            up.push(Arc::new(Rulebook::upsample(&parents, fine)?));
            down.push(Arc::new(rb));
            sets.push(parents);
        }
        let sub = sets
            .iter()
            .map(|s| Rulebook::submanifold(s).map(Arc::new))
            .collect::<Result<_>>()?;
        Ok(SparseHierarchy {
            levels: sets,
            sub,
            down,
            up,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parents_halve_coordinates() {
        let fine = vec![[0, 0, 0], [1, 0, 0], [5, 2, 0], [5, 3, 7]];
        let h = SparseHierarchy::new(fine, 3).unwrap();
        assert_eq!(h.levels[1], vec![[0, 0, 0], [2, 1, 0], [2, 1, 3]]);
        assert_eq!(h.levels[2], vec![[0, 0, 0], [1, 0, 0], [1, 0, 1]]);
        assert_eq!(h.down.len(), 2);
        assert_eq!(h.up[0].n_out, 4);
        assert_eq!(h.sub[2].n_in, 3);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(matches!(SparseHierarchy::new(vec![], 2), Err(Error::EmptyOccupancy)));
    }
}
