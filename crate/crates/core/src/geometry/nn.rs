//! Exact nearest-neighbour search in 3-D: a brute-force reference and a
//! KD-tree. Both return the lowest index among equidistant candidates and
//! compute distances with the same expression, so their answers are
//! bitwise identical.

use std::cmp::Ordering;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn closer_than(&self, other: &Neighbor) -> bool {
        match self.dist2.partial_cmp(&other.dist2) {
            Some(Ordering::Less) => true,
            Some(Ordering::Equal) => self.index < other.index,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NnBackend {
    BruteForce,
    KdTree,
    /// Brute force for small targets, KD-tree otherwise.
    #[default]
    Auto,
}

const AUTO_KD_THRESHOLD: usize = 64;

#[inline]
pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn nearest_brute(query: &Point, target: &[Point]) -> Result<Neighbor> {
    if target.is_empty() {
        return Err(Error::usage("nearest neighbour in an empty target"));
    }
    let mut best = Neighbor {
        index: 0,
        dist2: dist2(query, &target[0]),
    };
    for (i, p) in target.iter().enumerate().skip(1) {
        let d = dist2(query, p);
        if d < best.dist2 {
            best = Neighbor { index: i, dist2: d };
        }
    }
    Ok(best)
}

pub fn nearest_neighbor(
    query: &Point,
    target: &PointCloud,
    backend: NnBackend,
) -> Result<Neighbor> {
    match backend {
        NnBackend::BruteForce => nearest_brute(query, target.points()),
        NnBackend::KdTree => Ok(KdTree::build(target.points())?.nearest(query)),
        NnBackend::Auto => {
            if target.len() <= AUTO_KD_THRESHOLD {
                nearest_brute(query, target.points())
            } else {
                Ok(KdTree::build(target.points())?.nearest(query))
            }
        }
    }
}

/// Nearest target point for every query point.
pub fn nearest_all(
    queries: &[Point],
    target: &[Point],
    backend: NnBackend,
) -> Result<Vec<Neighbor>> {
    if target.is_empty() {
        return Err(Error::usage("nearest neighbour in an empty target"));
    }
    let use_tree = match backend {
        NnBackend::BruteForce => false,
        NnBackend::KdTree => true,
        NnBackend::Auto => target.len() > AUTO_KD_THRESHOLD,
    };
    if use_tree {
        let tree = KdTree::build(target)?;
        Ok(queries.iter().map(|q| tree.nearest(q)).collect())
    } else {
        queries.iter().map(|q| nearest_brute(q, target)).collect()
    }
}

#[derive(Clone, Debug)]
struct KdNode {
    point: usize,
    axis: u8,
    left: Option<u32>,
    right: Option<u32>,
}

/// Static 3-D KD-tree over a borrowed point set.
#[derive(Clone, Debug)]
pub struct KdTree<'a> {
    points: &'a [Point],
    nodes: Vec<KdNode>,
    root: u32,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::usage("KD-tree over an empty point set"));
        }
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(points, &mut idx, &mut nodes).expect("non-empty");
        Ok(KdTree {
            points,
            nodes,
            root,
        })
    }

    fn build_rec(points: &[Point], idx: &mut [usize], nodes: &mut Vec<KdNode>) -> Option<u32> {
        if idx.is_empty() {
            return None;
        }
        // split on the axis of widest spread
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in idx.iter() {
            for c in 0..3 {
                lo[c] = lo[c].min(points[i][c]);
                hi[c] = hi[c].max(points[i][c]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let id = nodes.len();
        nodes.push(KdNode {
            point: idx[mid],
            axis: axis as u8,
            left: None,
            right: None,
        });
        let (l, r) = idx.split_at_mut(mid);
        let left = Self::build_rec(points, l, nodes);
        let right = Self::build_rec(points, &mut r[1..], nodes);
        nodes[id].left = left;
        nodes[id].right = right;
        Some(id as u32)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, query: &Point) -> Neighbor {
        let first = self.nodes[self.root as usize].point;
        let mut best = Neighbor {
            index: first,
            dist2: dist2(query, &self.points[first]),
        };
        self.search(self.root, query, &mut best);
        best
    }

    fn search(&self, id: u32, q: &Point, best: &mut Neighbor) {
        let node = &self.nodes[id as usize];
        let p = &self.points[node.point];
        let cand = Neighbor {
            index: node.point,
            dist2: dist2(q, p),
        };
        if cand.closer_than(best) {
            *best = cand;
        }
        let axis = node.axis as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.search(n, q, best);
        }
        // equal distances must still be visited for the lowest-index tie-break
        if let Some(f) = far {
            if diff * diff <= best.dist2 {
                self.search(f, q, best);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn trivial_cases() {
        let t = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let n = nearest_neighbor(&[0.0; 3], &t, NnBackend::BruteForce).unwrap();
        assert_eq!((n.index, n.dist2), (0, 0.0));

        let t = PointCloud::new(vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        for b in [NnBackend::BruteForce, NnBackend::KdTree] {
            let n = nearest_neighbor(&[0.0; 3], &t, b).unwrap();
            assert_eq!((n.index, n.dist2), (0, 1.0));
        }
        assert!(nearest_brute(&[0.0; 3], &[]).is_err());
        assert!(KdTree::build(&[]).is_err());
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
        ];
        let tree = KdTree::build(&pts).unwrap();
        assert_eq!(tree.nearest(&[0.0; 3]).index, 0);
        assert_eq!(nearest_brute(&[0.0; 3], &pts).unwrap().index, 0);
        // duplicated points
        let pts = vec![[0.5; 3], [0.0; 3], [0.0; 3], [0.0; 3]];
        let tree = KdTree::build(&pts).unwrap();
        assert_eq!(tree.nearest(&[0.0; 3]).index, 1);
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = crate::seed::rng(11);
        for _ in 0..20 {
            let pts: Vec<Point> = (0..64)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect();
            let tree = KdTree::build(&pts).unwrap();
            for _ in 0..50 {
                let q = [
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                ];
                assert_eq!(tree.nearest(&q), nearest_brute(&q, &pts).unwrap());
            }
        }
    }
}
