//! Balanced kd-tree for exact nearest-neighbor queries.
//!
//! Matches an exhaustive linear scan exactly, including tie-breaking by
//! lowest point index. Immutable after construction and safe to share
//! across query threads.

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug)]
enum Node {
    Leaf {
        /// Indices into the original cloud.
        indices: Vec<u32>,
    },
    Split {
        axis: u8,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Spatial index over a point cloud.
#[derive(Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    root: Node,
    leaf_size: usize,
}

impl KdTree {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::build_with_leaf_size(cloud, DEFAULT_LEAF_SIZE)
    }

    pub fn build_with_leaf_size(cloud: &PointCloud, leaf_size: usize) -> Result<Self> {
        if leaf_size == 0 {
            return Err(Error::Argument("leaf size must be positive".into()));
        }
        let points = cloud.points().to_vec();
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        let root = build_node(&points, &mut indices, leaf_size);
        Ok(Self {
            points,
            root,
            leaf_size,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Nearest point to `x`: `(point, euclidean distance, index)`.
    /// Ties resolve to the lowest index, identical to a linear scan.
    pub fn nearest(&self, x: &Point3) -> (Point3, f64, usize) {
        let mut best = Best {
            dist2: f64::INFINITY,
            index: u32::MAX,
        };
        search(&self.root, &self.points, x, &mut best);
        let p = self.points[best.index as usize];
        (p, best.dist2.sqrt(), best.index as usize)
    }

    /// Reference implementation: exhaustive scan with the same tie rule.
    pub fn nearest_linear(cloud: &PointCloud, x: &Point3) -> (Point3, f64, usize) {
        let mut best = Best {
            dist2: f64::INFINITY,
            index: u32::MAX,
        };
        for (i, p) in cloud.points().iter().enumerate() {
            best.offer(p.dist2(x), i as u32);
        }
        let p = cloud.point(best.index as usize);
        (p, best.dist2.sqrt(), best.index as usize)
    }
}

struct Best {
    dist2: f64,
    index: u32,
}

impl Best {
    #[inline]
    fn offer(&mut self, d2: f64, index: u32) {
        if d2 < self.dist2 || (d2 == self.dist2 && index < self.index) {
            self.dist2 = d2;
            self.index = index;
        }
    }
}

fn build_node(points: &[Point3], indices: &mut [u32], leaf_size: usize) -> Node {
    if indices.len() <= leaf_size {
        let mut v = indices.to_vec();
        v.sort_unstable();
        return Node::Leaf { indices: v };
    }
    // Split along the widest axis at the median.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in indices.iter() {
        let p = points[i as usize].as_array();
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    // Sort by (coordinate, index) so equal coordinates split
    // deterministically.
    indices.sort_unstable_by(|&a, &b| {
        let ca = points[a as usize].as_array()[axis];
        let cb = points[b as usize].as_array()[axis];
        ca.total_cmp(&cb).then(a.cmp(&b))
    });
    let mid = indices.len() / 2;
    let value = points[indices[mid] as usize].as_array()[axis];
    let (left_idx, right_idx) = indices.split_at_mut(mid);
    let left = build_node(points, left_idx, leaf_size);
    let right = build_node(points, right_idx, leaf_size);
    Node::Split {
        axis: axis as u8,
        value,
        left: Box::new(left),
        right: Box::new(right),
    }
}

fn search(node: &Node, points: &[Point3], x: &Point3, best: &mut Best) {
    match node {
        Node::Leaf { indices } => {
            for &i in indices {
                best.offer(points[i as usize].dist2(x), i);
            }
        }
        Node::Split {
            axis,
            value,
            left,
            right,
        } => {
            let coord = x.as_array()[*axis as usize];
            let (near, far) = if coord < *value {
                (left, right)
            } else {
                (right, left)
            };
            search(near, points, x, best);
            let plane = coord - *value;
            // The far side can only win on a strictly smaller distance, so
            // visiting it on <= also preserves exact tie-breaking: if it
            // holds an equal-distance lower index, `offer` accepts it.
            if plane * plane <= best.dist2 {
                search(far, points, x, best);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = rng_for(seed, &[0xc1]);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_point_cloud() {
        let cloud =
            PointCloud::new(vec![Point3::zero(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let tree = KdTree::build(&cloud).unwrap();
        let (t, d, i) = tree.nearest(&Point3::new(0.4, 0.0, 0.0));
        assert_eq!(t, Point3::zero());
        assert!((d - 0.4).abs() < 1e-15);
        assert_eq!(i, 0);
    }

    #[test]
    fn query_at_cloud_point_returns_it() {
        let cloud = random_cloud(64, 5);
        let tree = KdTree::build(&cloud).unwrap();
        let (t, d, i) = tree.nearest(&cloud.point(17));
        assert_eq!(i, 17);
        assert_eq!(d, 0.0);
        assert_eq!(t, cloud.point(17));
    }

    #[test]
    fn matches_linear_scan() {
        for (n, seed) in [(1usize, 1u64), (3, 2), (17, 3), (500, 4), (2000, 5)] {
            let cloud = random_cloud(n, seed);
            let tree = KdTree::build(&cloud).unwrap();
            let mut rng = rng_for(seed, &[0xfeed]);
            for _ in 0..100 {
                let q = Point3::new(
                    rng.random::<f64>() * 2.4 - 1.2,
                    rng.random::<f64>() * 2.4 - 1.2,
                    rng.random::<f64>() * 2.4 - 1.2,
                );
                let fast = tree.nearest(&q);
                let slow = KdTree::nearest_linear(&cloud, &q);
                assert_eq!(fast.2, slow.2, "index mismatch at n={n}");
                assert_eq!(fast.1, slow.1, "distance mismatch at n={n}");
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // Duplicated points: the query is equidistant to both copies.
        let p = Point3::new(0.25, -0.5, 0.125);
        let mut pts = vec![Point3::new(0.9, 0.9, 0.9); 3];
        pts.push(p);
        pts.push(p);
        let cloud = PointCloud::new(pts).unwrap();
        let tree = KdTree::build_with_leaf_size(&cloud, 1).unwrap();
        let (_, _, i) = tree.nearest(&p);
        assert_eq!(i, 3);
        let (_, _, j) = KdTree::nearest_linear(&cloud, &p);
        assert_eq!(j, 3);
    }
}
