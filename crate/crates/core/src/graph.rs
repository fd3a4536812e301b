//! The zoom graph: a cumulative hierarchy of image regions. Level 1 is a
//! single root covering the frame; expanding a node splits its region into an
//! `s x s` grid of children one level deeper. Nodes never disappear, so the
//! finished graph records the whole zoom history.

use crate::error::{Error, Result};
use crate::image::{grid_split, Image, Region};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZoomNode {
    pub id: usize,
    /// 1-based depth; the root is level 1.
    pub level: usize,
    /// Always in original-image coordinates.
    pub region: Region,
    pub parent_id: Option<usize>,
    /// Row-major cell position within the parent grid.
    pub grid_index: Option<usize>,
}

/// Verdict of the zoom head for one frontier node. `prob` is the predicted
/// zoom probability, used to rank nodes when a cap limits expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoomDecision {
    pub node_id: usize,
    pub zoom: bool,
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct ZoomGraph {
    nodes: Vec<ZoomNode>,
    /// Flat N x N symmetric 0/1 matrix with unit diagonal.
    adjacency: Vec<u8>,
    current_level: usize,
    /// Grid side length of every expansion performed so far.
    grid_s: Option<usize>,
}

impl ZoomGraph {
    /// Single root node covering the image, level 1.
    pub fn init(img: &Image) -> Self {
        ZoomGraph::init_region(img.full_region())
    }

    pub fn init_region(region: Region) -> Self {
        ZoomGraph {
            nodes: vec![ZoomNode {
                id: 0,
                level: 1,
                region,
                parent_id: None,
                grid_index: None,
            }],
            adjacency: vec![1],
            current_level: 1,
            grid_s: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a graph always holds at least the root
    }

    pub fn current_level(&self) -> usize {
        self.current_level
    }

    pub fn nodes(&self) -> &[ZoomNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&ZoomNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Usage(format!("node id {id} out of {}", self.nodes.len())))
    }

    pub fn adjacency(&self) -> &[u8] {
        &self.adjacency
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.nodes.len() + j] != 0
    }

    /// Node ids at the graph's deepest level, ascending. These are the only
    /// nodes eligible for zoom decisions.
    pub fn frontier(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.level == self.current_level)
            .map(|n| n.id)
            .collect()
    }

    /// Ids of the deepest populated level (the frontier may be empty when the
    /// last expansion zoomed nothing; this never is).
    pub fn deepest_populated(&self) -> (usize, Vec<usize>) {
        let level = self.nodes.iter().map(|n| n.level).max().expect("nonempty");
        let ids = self
            .nodes
            .iter()
            .filter(|n| n.level == level)
            .map(|n| n.id)
            .collect();
        (level, ids)
    }

    /// Ids adjacent to `id` (self, parent, children, grid-4-neighbor
    /// siblings), ascending and including `id` itself.
    pub fn neighbors(&self, id: usize) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        if id >= n {
            return Err(Error::Usage(format!("node id {id} out of {n}")));
        }
        Ok((0..n).filter(|&j| self.has_edge(id, j)).collect())
    }

    /// Splits each zoomed decision node into `s x s` children one level down
    /// and advances the level counter (which moves even when nothing zooms,
    /// so the graph always reaches its final level). When the cap would be
    /// exceeded, nodes expand in descending probability order until it binds.
    /// Returns the new node ids.
    pub fn expand(
        &mut self,
        decisions: &[ZoomDecision],
        s: usize,
        node_cap: usize,
        max_level: usize,
    ) -> Result<Vec<usize>> {
        if self.current_level >= max_level {
            return Err(Error::Usage(format!(
                "cannot expand: graph already at level {} of {max_level}",
                self.current_level
            )));
        }
        if let Some(prev) = self.grid_s {
            if prev != s {
                return Err(Error::Usage(format!(
                    "grid side changed from {prev} to {s} mid-graph"
                )));
            }
        }
        let frontier = self.frontier();
        let mut seen = vec![false; self.nodes.len()];
        for d in decisions {
            let node = self.node(d.node_id)?;
            if node.level != self.current_level {
                return Err(Error::Usage(format!(
                    "decision for node {} at level {}, frontier is level {}",
                    d.node_id, node.level, self.current_level
                )));
            }
            if seen[d.node_id] {
                return Err(Error::Usage(format!(
                    "duplicate decision for node {}",
                    d.node_id
                )));
            }
            seen[d.node_id] = true;
        }
        if decisions.len() != frontier.len() {
            return Err(Error::Usage(format!(
                "expected {} decisions for the frontier, got {}",
                frontier.len(),
                decisions.len()
            )));
        }

        let mut zoomed: Vec<&ZoomDecision> = decisions.iter().filter(|d| d.zoom).collect();
        // Rank candidates for the cap: highest probability first, id breaks ties.
        zoomed.sort_by(|a, b| {
            b.prob
                .partial_cmp(&a.prob)
                .expect("zoom probabilities are finite")
                .then(a.node_id.cmp(&b.node_id))
        });
        let budget = node_cap.saturating_sub(self.nodes.len()) / (s * s);
        zoomed.truncate(budget.min(zoomed.len()));
        // Children are appended in parent-id order for stable node numbering.
        let mut parents: Vec<usize> = zoomed.iter().map(|d| d.node_id).collect();
        parents.sort_unstable();

        let old_n = self.nodes.len();
        let mut new_ids = Vec::with_capacity(parents.len() * s * s);
        for &pid in &parents {
            let parent_region = self.nodes[pid].region;
            let cells = grid_split(parent_region, s)?;
            for (gi, cell) in cells.into_iter().enumerate() {
                let id = self.nodes.len();
                self.nodes.push(ZoomNode {
                    id,
                    level: self.current_level + 1,
                    region: cell,
                    parent_id: Some(pid),
                    grid_index: Some(gi),
                });
                new_ids.push(id);
            }
        }

        let new_n = self.nodes.len();
        let mut adj = vec![0u8; new_n * new_n];
        for i in 0..old_n {
            let src = &self.adjacency[i * old_n..(i + 1) * old_n];
            adj[i * new_n..i * new_n + old_n].copy_from_slice(src);
        }
        for &id in &new_ids {
            adj[id * new_n + id] = 1;
            let node = &self.nodes[id];
            let pid = node.parent_id.expect("children have parents");
            adj[id * new_n + pid] = 1;
            adj[pid * new_n + id] = 1;
            // Grid-4-neighbor siblings share a parent and differ by one step
            // along exactly one grid axis.
            let gi = node.grid_index.expect("children have grid positions");
            let (gy, gx) = (gi / s, gi % s);
            for (dy, dx) in [(0i64, 1i64), (1, 0)] {
                let (ny, nx) = (gy as i64 + dy, gx as i64 + dx);
                if ny < s as i64 && nx < s as i64 {
                    let sibling = id + (ny as usize * s + nx as usize) - gi;
                    adj[id * new_n + sibling] = 1;
                    adj[sibling * new_n + id] = 1;
                }
            }
        }
        self.adjacency = adj;
        self.current_level += 1;
        self.grid_s = Some(s);
        Ok(new_ids)
    }

    /// Per-node CNN input: crop each node's region from the original image
    /// and resample to `d x d`. Row i of the `[N, d, d]` result is node i.
    pub fn materialize_features(&self, img: &Image, d: usize) -> Result<Tensor> {
        let n = self.nodes.len();
        let mut data = Vec::with_capacity(n * d * d);
        for node in &self.nodes {
            data.extend_from_slice(&node_feature(img, node.region, d)?);
        }
        Tensor::new(vec![n, d, d], data, false)
    }

    /// Line-delimited records `node_id level x0 y0 w h parent_id zoomed_flag`
    /// (parent_id -1 for the root; zoomed means the node has children).
    pub fn dump(&self) -> String {
        let mut zoomed = vec![false; self.nodes.len()];
        for node in &self.nodes {
            if let Some(pid) = node.parent_id {
                zoomed[pid] = true;
            }
        }
        let mut out = String::new();
        for node in &self.nodes {
            let parent = node.parent_id.map_or(-1i64, |p| p as i64);
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                node.id,
                node.level,
                node.region.x0,
                node.region.y0,
                node.region.width,
                node.region.height,
                parent,
                u8::from(zoomed[node.id]),
            ));
        }
        out
    }
}

/// The single-node feature path: crop, then bilinear resample to `d x d`.
pub fn node_feature(img: &Image, region: Region, d: usize) -> Result<Vec<f64>> {
    Ok(img.crop(region)?.resize_bilinear(d, d)?.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn full_zoom(g: &ZoomGraph) -> Vec<ZoomDecision> {
        g.frontier()
            .into_iter()
            .map(|id| ZoomDecision {
                node_id: id,
                zoom: true,
                prob: 1.0,
            })
            .collect()
    }

    fn test_image(w: usize, h: usize) -> Image {
        let data = (0..w * h).map(|i| (i % 97) as f64 / 96.0).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn init_is_a_single_self_looped_root() {
        let img = test_image(64, 64);
        let g = ZoomGraph::init(&img);
        assert_eq!(g.len(), 1);
        assert_eq!(g.current_level(), 1);
        assert_eq!(g.nodes()[0].region, Region::new(0, 0, 64, 64));
        assert_eq!(g.nodes()[0].parent_id, None);
        assert_eq!(g.adjacency(), &[1]);
        assert_eq!(g.neighbors(0).unwrap(), vec![0]);
    }

    #[test]
    fn growth_follows_the_recurrence_for_full_zoom() {
        let img = test_image(300, 300);
        let mut g = ZoomGraph::init(&img);
        let d1 = full_zoom(&g);
        g.expand(&d1, 3, 1000, 3).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g.current_level(), 2);
        let d2 = full_zoom(&g);
        assert_eq!(d2.len(), 9);
        g.expand(&d2, 3, 1000, 3).unwrap();
        assert_eq!(g.len(), 91);
        assert_eq!(g.current_level(), 3);
    }

    #[test]
    fn no_zoom_expansion_only_advances_the_level() {
        let img = test_image(32, 32);
        let mut g = ZoomGraph::init(&img);
        let decisions = vec![ZoomDecision {
            node_id: 0,
            zoom: false,
            prob: 0.1,
        }];
        g.expand(&decisions, 3, 1000, 3).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.current_level(), 2);
        assert!(g.frontier().is_empty());
        let (level, ids) = g.deepest_populated();
        assert_eq!((level, ids), (1, vec![0]));
    }

    #[test]
    fn root_after_one_full_expansion_has_ten_neighbors() {
        let img = test_image(90, 90);
        let mut g = ZoomGraph::init(&img);
        g.expand(&full_zoom(&g), 3, 1000, 2).unwrap();
        let ids = g.neighbors(0).unwrap();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn corner_child_has_four_neighbors() {
        let img = test_image(90, 90);
        let mut g = ZoomGraph::init(&img);
        g.expand(&full_zoom(&g), 3, 1000, 2).unwrap();
        // Child ids 1..=9 in row-major grid order; id 1 is the top-left corner.
        let ids = g.neighbors(1).unwrap();
        // Itself, parent, right sibling (grid 0,1 -> id 2), below sibling
        // (grid 1,0 -> id 4).
        assert_eq!(ids, vec![0, 1, 2, 4]);
        // An edge child has 5; the center child has 6 (4 siblings).
        assert_eq!(g.neighbors(2).unwrap().len(), 5);
        assert_eq!(g.neighbors(5).unwrap().len(), 6);
    }

    #[test]
    fn adjacency_is_symmetric_with_unit_diagonal() {
        let img = test_image(120, 120);
        let mut g = ZoomGraph::init(&img);
        g.expand(&full_zoom(&g), 3, 1000, 3).unwrap();
        g.expand(&full_zoom(&g), 3, 1000, 3).unwrap();
        let n = g.len();
        for i in 0..n {
            assert!(g.has_edge(i, i));
            for j in 0..n {
                assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
            }
        }
    }

    #[test]
    fn children_partition_their_parent_region() {
        let img = test_image(100, 70);
        let mut g = ZoomGraph::init(&img);
        g.expand(&full_zoom(&g), 3, 1000, 2).unwrap();
        let parent = g.nodes()[0].region;
        let total: usize = g.nodes()[1..].iter().map(|n| n.region.area()).sum();
        assert_eq!(total, parent.area());
        for child in &g.nodes()[1..] {
            let r = child.region;
            assert!(r.x0 >= parent.x0 && r.x0 + r.width <= parent.x0 + parent.width);
            assert!(r.y0 >= parent.y0 && r.y0 + r.height <= parent.y0 + parent.height);
        }
    }

    #[test]
    fn node_cap_keeps_highest_probability_nodes() {
        let img = test_image(200, 200);
        let mut g = ZoomGraph::init(&img);
        g.expand(&full_zoom(&g), 2, 1000, 3).unwrap();
        assert_eq!(g.len(), 5);
        // All four children want to zoom, but the cap leaves room for two
        // expansions of 4 children each (5 + 8 = 13 <= 14 < 5 + 12).
        let decisions: Vec<ZoomDecision> = g
            .frontier()
            .into_iter()
            .map(|id| ZoomDecision {
                node_id: id,
                zoom: true,
                prob: 0.1 * id as f64,
            })
            .collect();
        let new_ids = g.expand(&decisions, 2, 14, 3).unwrap();
        assert_eq!(new_ids.len(), 8);
        assert_eq!(g.len(), 13);
        // Parents with the highest probabilities (ids 3 and 4) expanded.
        let parents: Vec<usize> = g.nodes()[5..]
            .iter()
            .map(|n| n.parent_id.unwrap())
            .collect();
        assert!(parents.iter().all(|&p| p == 3 || p == 4));
    }

    #[test]
    fn expand_rejects_bad_decisions_and_exhausted_levels() {
        let img = test_image(64, 64);
        let mut g = ZoomGraph::init(&img);
        let zoom_root = full_zoom(&g);

        // Expanding past max level fails.
        assert!(matches!(
            g.clone().expand(&zoom_root, 3, 1000, 1),
            Err(Error::Usage(_))
        ));

        g.expand(&zoom_root, 3, 1000, 3).unwrap();
        // Root is no longer frontier.
        let stale = vec![ZoomDecision {
            node_id: 0,
            zoom: true,
            prob: 1.0,
        }];
        assert!(matches!(
            g.clone().expand(&stale, 3, 1000, 3),
            Err(Error::Usage(_))
        ));
        // Missing decisions for some frontier nodes fail.
        let partial = vec![ZoomDecision {
            node_id: 1,
            zoom: false,
            prob: 0.0,
        }];
        assert!(matches!(
            g.clone().expand(&partial, 3, 1000, 3),
            Err(Error::Usage(_))
        ));
        // Duplicated decisions fail.
        let mut dup = full_zoom(&g);
        dup[1] = dup[0];
        assert!(matches!(g.expand(&dup, 3, 1000, 3), Err(Error::Usage(_))));
    }

    #[test]
    fn materialized_root_row_equals_full_resize() {
        let img = test_image(48, 48);
        let g = ZoomGraph::init(&img);
        let feats = g.materialize_features(&img, 16).unwrap();
        assert_eq!(feats.shape(), &[1, 16, 16]);
        let direct = img.resize_bilinear(16, 16).unwrap();
        assert_eq!(feats.data(), direct.data());
    }

    #[test]
    fn materialized_child_rows_match_independent_crop_resize() {
        let img = test_image(100, 100);
        let mut g = ZoomGraph::init(&img);
        g.expand(&full_zoom(&g), 3, 1000, 2).unwrap();
        let d = 8;
        let feats = g.materialize_features(&img, d).unwrap();
        assert_eq!(feats.shape(), &[10, d, d]);
        for node in g.nodes() {
            let expected = img
                .crop(node.region)
                .unwrap()
                .resize_bilinear(d, d)
                .unwrap();
            let row = &feats.data()[node.id * d * d..(node.id + 1) * d * d];
            assert_eq!(row, expected.data(), "node {}", node.id);
        }
    }

    #[test]
    fn constant_image_materializes_constant_rows() {
        let img = Image::new(30, 30, vec![0.7; 900]).unwrap();
        let mut g = ZoomGraph::init(&img);
        g.expand(&full_zoom(&g), 3, 1000, 2).unwrap();
        let feats = g.materialize_features(&img, 8).unwrap();
        assert!(feats.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn dump_records_hierarchy_and_zoom_flags() {
        let img = test_image(60, 60);
        let mut g = ZoomGraph::init(&img);
        g.expand(&full_zoom(&g), 2, 1000, 2).unwrap();
        let dump = g.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "0 1 0 0 60 60 -1 1");
        assert_eq!(lines[1], "1 2 0 0 30 30 0 0");
        assert_eq!(lines[4], "4 2 30 30 30 30 0 0");
    }

    #[test]
    fn random_expansion_sequences_keep_growth_and_structure_invariants() {
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        for _ in 0..30 {
            let img = test_image(128, 128);
            let mut g = ZoomGraph::init(&img);
            let max_level = rng.gen_range(2..5);
            let s = rng.gen_range(2..4);
            let cap = rng.gen_range(20..200);
            while g.current_level() < max_level {
                let decisions: Vec<ZoomDecision> = g
                    .frontier()
                    .into_iter()
                    .map(|id| ZoomDecision {
                        node_id: id,
                        zoom: rng.gen_bool(0.7),
                        prob: rng.gen_range(0.0..1.0),
                    })
                    .collect();
                let before = g.len();
                let requested = decisions.iter().filter(|d| d.zoom).count();
                let new_ids = g.expand(&decisions, s, cap, max_level).unwrap();
                // Growth recurrence with the effective (post-cap) count.
                let k_eff = new_ids.len() / (s * s);
                assert_eq!(new_ids.len(), k_eff * s * s);
                assert!(k_eff <= requested);
                assert_eq!(g.len(), before + k_eff * s * s);
                assert!(g.len() <= cap.max(before));
            }
            // Structure invariants on the final graph.
            let n = g.len();
            for i in 0..n {
                assert!(g.has_edge(i, i));
                for j in 0..i {
                    assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
                    if g.has_edge(i, j) {
                        let (a, b) = (&g.nodes()[i], &g.nodes()[j]);
                        let parent_child = a.parent_id == Some(j) || b.parent_id == Some(i);
                        let siblings = a.parent_id.is_some() && a.parent_id == b.parent_id && {
                            let (ga, gb) = (a.grid_index.unwrap(), b.grid_index.unwrap());
                            let (ya, xa) = (ga / s, ga % s);
                            let (yb, xb) = (gb / s, gb % s);
                            ya.abs_diff(yb) + xa.abs_diff(xb) == 1
                        };
                        assert!(parent_child || siblings, "edge {i}-{j} unjustified");
                    }
                }
            }
        }
    }
}
