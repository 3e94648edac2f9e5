//! Static 2D kd-tree for nearest-neighbor queries over sampled curve points.
//!
//! Built once, queried read-only, so it is safe to share across worker
//! threads. Ties on distance resolve toward the smaller input index, which
//! keeps queries deterministic.

#[derive(Debug, Clone)]
pub struct KdTree2 {
    // Points arranged in kd order with their original input indices.
    pts: Vec<[f64; 2]>,
    idx: Vec<u32>,
}

impl KdTree2 {
    pub fn build(points: &[[f64; 2]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        build_rec(points, &mut order, 0);
        let pts = order.iter().map(|&i| points[i as usize]).collect();
        KdTree2 { pts, idx: order }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Nearest input index and squared distance.
    pub fn nearest(&self, q: [f64; 2]) -> Option<(usize, f64)> {
        self.k_nearest(q, 1).into_iter().next()
    }

    /// Up to `k` nearest neighbors ordered by `(distance², input index)`.
    pub fn k_nearest(&self, q: [f64; 2], k: usize) -> Vec<(usize, f64)> {
        if self.pts.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.search(0, self.pts.len(), 0, q, k, &mut best);
        best.into_iter().map(|(d2, i)| (i as usize, d2)).collect()
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        depth: usize,
        q: [f64; 2],
        k: usize,
        best: &mut Vec<(f64, u32)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.pts[mid];
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let d2 = dx * dx + dy * dy;
        push_candidate(best, k, d2, self.idx[mid]);

        let axis = depth % 2;
        let delta = q[axis] - p[axis];
        let (near_lo, near_hi, far_lo, far_hi) = if delta < 0.0 {
            (lo, mid, mid + 1, hi)
        } else {
            (mid + 1, hi, lo, mid)
        };
        self.search(near_lo, near_hi, depth + 1, q, k, best);
        let worst = best.last().map(|b| b.0).unwrap_or(f64::INFINITY);
        if best.len() < k || delta * delta <= worst {
            self.search(far_lo, far_hi, depth + 1, q, k, best);
        }
    }
}

fn push_candidate(best: &mut Vec<(f64, u32)>, k: usize, d2: f64, idx: u32) {
    let cand = (d2, idx);
    let pos = best.partition_point(|&(bd, bi)| (bd, bi) < cand);
    if pos >= k {
        return;
    }
    best.insert(pos, cand);
    best.truncate(k);
}

fn build_rec(points: &[[f64; 2]], order: &mut [u32], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 2;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        let ka = (points[a as usize][axis], a);
        let kb = (points[b as usize][axis], b);
        ka.partial_cmp(&kb).unwrap()
    });
    let (left, right) = order.split_at_mut(mid);
    build_rec(points, left, depth + 1);
    build_rec(points, &mut right[1..], depth + 1);
}
