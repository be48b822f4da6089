//! Static 3D k-d tree for exact nearest-neighbor queries.

use crate::math::Vec3;

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Implicit balanced tree: the node of `order[lo..hi]` is at the middle
    /// index, split on `axis[mid]`.
    order: Vec<u32>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = vec![0u8; points.len()];
        build(points, &mut order, &mut axis, 0, points.len());
        KdTree {
            points: points.to_vec(),
            order,
            axis,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    /// Nearest point to `q` as `(squared distance, index)`; ties resolve to
    /// the lowest index.
    pub fn nearest(&self, q: Vec3) -> Option<(f64, usize)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, best: &mut (f64, usize)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = self.points[idx];
        let d = (p - q).norm_sq();
        if d < best.0 || (d == best.0 && idx < best.1) {
            *best = (d, idx);
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - p[ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        // `<=` keeps equal-distance candidates reachable for the index tie-break.
        if diff * diff <= best.0 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Vec3], order: &mut [u32], axis: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    let (mut bmin, mut bmax) = (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY));
    for &i in &order[lo..hi] {
        bmin = bmin.min(points[i as usize]);
        bmax = bmax.max(points[i as usize]);
    }
    let ext = bmax - bmin;
    let ax = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = (lo + hi) / 2;
    order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        points[a as usize][ax]
            .total_cmp(&points[b as usize][ax])
            .then(a.cmp(&b))
    });
    axis[mid] = ax as u8;
    build(points, order, axis, lo, mid);
    build(points, order, axis, mid + 1, hi);
}
