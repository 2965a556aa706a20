//! Static 3-d tree for exact nearest-neighbour queries.

use crate::geom::Vec3;

const LEAF_SIZE: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    root: Option<Node>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = if points.is_empty() { None } else { Some(build(points, &mut order, 0, points.len())) };
        Self { points, order, root }
    }

    /// Index and squared distance of the nearest point, `None` when empty.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let root = self.root.as_ref()?;
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(root, q, &mut best);
        Some(best)
    }

    fn search(&self, node: &Node, q: &Vec3, best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d2 = (q - self.points[i]).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], start: usize, end: usize) -> Node {
    if end - start <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    let slice = &order[start..end];
    let mut lo = points[slice[0]];
    let mut hi = lo;
    for &i in slice {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[start + mid]][axis];
    // Left holds coordinates <= value, right >= value.
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, order, start, start + mid)),
        right: Box::new(build(points, order, start + mid, end)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..2000).map(|_| Vec3::new(rng.gen(), rng.gen::<f64>() * 0.1, rng.gen())).collect();
        let tree = KdTree::new(&pts);
        for _ in 0..500 {
            let q = Vec3::new(rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5));
            let brute = pts.iter().map(|p| (q - p).norm_squared()).fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest(&q).unwrap().1, brute);
        }
        assert!(KdTree::new(&[]).nearest(&Vec3::zeros()).is_none());
    }

    #[test]
    fn duplicate_points() {
        let pts = vec![Vec3::new(1.0, 1.0, 1.0); 50];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Vec3::zeros()).unwrap(), (0, 3.0));
    }
}
