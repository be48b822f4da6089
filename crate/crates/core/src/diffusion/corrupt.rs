use std::collections::BTreeSet;

use rand::Rng as _;

use crate::error::{ensure, Error, Result};
use crate::volume::grid::{check_sorted_unique, Voxel};

/// Upper bound on the flip probability.
pub const MAX_FLIP: f64 = 0.2;

/// Face neighbors inside `[0, resolution)^3`, in a fixed order.
pub fn face_neighbors(v: Voxel, resolution: usize) -> impl Iterator<Item = Voxel> {
    const STEPS: [(usize, i64); 6] = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)];
    STEPS.into_iter().filter_map(move |(axis, d)| {
        let c = v[axis] as i64 + d;
        if c < 0 || c >= resolution as i64 {
            return None;
        }
        let mut n = v;
        n[axis] = c as u32;
        Some(n)
    })
}

/// Drops each index with probability `p_flip`, then adds each face neighbor
/// of the survivors (not itself a survivor) with probability `p_flip`.
/// Output is sorted and unique.
pub fn corrupt_occupancy(indices: &[Voxel], resolution: usize, p_flip: f64, seed: u64) -> Result<Vec<Voxel>> {
    ensure!(
        (0.0..=MAX_FLIP).contains(&p_flip),
        Error::InvalidArgument(format!("flip probability {p_flip} outside [0, {MAX_FLIP}]"))
    );
    check_sorted_unique(indices)?;
    if p_flip == 0.0 {
        return Ok(indices.to_vec());
    }
    let mut rng = crate::rng::stream(seed, "corrupt_occupancy");
    let survivors: BTreeSet<Voxel> = indices
        .iter()
        .copied()
        .filter(|_| !rng.random_bool(p_flip))
        .collect();
    let candidates: BTreeSet<Voxel> = survivors
        .iter()
        .flat_map(|&v| face_neighbors(v, resolution))
        .filter(|n| !survivors.contains(n))
        .collect();
    let mut out: BTreeSet<Voxel> = survivors;
    for c in candidates {
        if rng.random_bool(p_flip) {
            out.insert(c);
        }
    }
    Ok(out.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Spherical shell of voxels at `res^3`.
    fn shell(res: usize, radius: f64, width: f64) -> Vec<Voxel> {
        let mut out = Vec::new();
        let c = res as f64 / 2.0;
        for x in 0..res as u32 {
            for y in 0..res as u32 {
                for z in 0..res as u32 {
                    let d = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2) + (z as f64 + 0.5 - c).powi(2)).sqrt();
                    if (d - radius).abs() < width {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = shell(16, 5.0, 0.8);
        assert_eq!(corrupt_occupancy(&s, 16, 0.0, 3).unwrap(), s);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = shell(16, 5.0, 0.8);
        let a = corrupt_occupancy(&s, 16, 0.1, 3).unwrap();
        assert_eq!(a, corrupt_occupancy(&s, 16, 0.1, 3).unwrap());
        assert_ne!(a, corrupt_occupancy(&s, 16, 0.1, 4).unwrap());
        check_sorted_unique(&a).unwrap();
    }

    #[test]
    fn rejects_large_probability() {
        assert!(corrupt_occupancy(&[[0, 0, 0]], 4, 0.25, 0).is_err());
    }

    #[test]
    fn symmetric_difference_within_binomial_bounds() {
        // Removals ~ Bin(N, p) and additions ~ Bin(M, p) where M counts the
        // free face neighbors; survivors' neighborhoods shift M slightly, so
        // M is bracketed by its value for the full shell and 6N.
        let s = shell(64, 22.0, 0.9);
        let n = s.len();
        assert!(n > 10_000, "{n}");
        let set: BTreeSet<Voxel> = s.iter().copied().collect();
        let m_full = s
            .iter()
            .flat_map(|&v| face_neighbors(v, 64))
            .filter(|x| !set.contains(x))
            .collect::<BTreeSet<_>>()
            .len();
        let p = 0.05;
        let mean = p * (n + m_full) as f64;
        let sd = (p * (1.0 - p) * (n + m_full) as f64).sqrt();
        // z = 2.576 covers 99% two-sided; 3.5 leaves room for the M shift.
        let (lo, hi) = (mean - 3.5 * sd, mean + 3.5 * sd + p * p * 6.0 * n as f64);
        for seed in 0..20 {
            let out = corrupt_occupancy(&s, 64, p, seed).unwrap();
            let o: BTreeSet<Voxel> = out.into_iter().collect();
            let sym = set.symmetric_difference(&o).count() as f64;
            assert!(sym >= lo && sym <= hi, "seed {seed}: {sym} not in [{lo}, {hi}]");
            let frac = sym / n as f64;
            assert!((0.05..=0.20).contains(&frac), "seed {seed}: fraction {frac}");
        }
    }
}
