//! Spatial-temporal cube graph over an observation sequence, random-walk
//! mask sampling, and zero-masking of the selected cubes.
//!
//! The stacked sequence (F frames of H x W pixels) is divided into
//! non-overlapping f x h x w cubes; each cube is a node, and nodes that
//! touch along exactly one axis are connected. A mask is the set of unique
//! nodes visited by a uniform random walk from a uniformly drawn root,
//! grown until round(|V| * p_m) nodes are collected.

use std::collections::BTreeSet;

use rand::Rng;

use crate::tensor::Tensor;

/// F pixel frames with aligned per-step actions and rewards.
#[derive(Clone, Debug)]
pub struct ObservationSequence {
    /// Shape (F, c, H, W), pixel values in [0, 1].
    pub frames: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Start timestep within the source episode.
    pub t0: usize,
}

impl ObservationSequence {
    pub fn len(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cube dimensions: temporal length and spatial height/width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CubeShape {
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl CubeShape {
    pub fn new(f: usize, h: usize, w: usize) -> Self {
        assert!(f >= 1 && h >= 1 && w >= 1, "cube dims must be >= 1, got {f}x{h}x{w}");
        CubeShape { f, h, w }
    }
}

/// Grid graph over the cube partition. Node ids run in (t, row, col)
/// row-major order; adjacency is 6-connectivity (axis neighbors only).
#[derive(Clone, Debug)]
pub struct StGraph {
    /// (F/f, H/h, W/w)
    pub dims: (usize, usize, usize),
    pub adjacency: Vec<Vec<usize>>,
}

impl StGraph {
    pub fn node_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|n| n.len()).sum::<usize>() / 2
    }

    pub fn node_index(&self, t: usize, row: usize, col: usize) -> usize {
        let (_, ny, nx) = self.dims;
        (t * ny + row) * nx + col
    }

    pub fn node_coords(&self, id: usize) -> (usize, usize, usize) {
        let (_, ny, nx) = self.dims;
        (id / (ny * nx), (id / nx) % ny, id % nx)
    }
}

/// Node set selected for masking.
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub nodes: BTreeSet<usize>,
    /// Walk root; `None` only for the empty mask.
    pub root: Option<usize>,
    pub ratio: f64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Builds the cube grid graph for a sequence of F frames of H x W pixels.
pub fn build_graph(f_len: usize, height: usize, width: usize, cube: CubeShape) -> StGraph {
    assert!(
        f_len % cube.f == 0,
        "config error: sequence length F={f_len} not divisible by cube.f={}",
        cube.f
    );
    assert!(
        height % cube.h == 0,
        "config error: frame height H={height} not divisible by cube.h={}",
        cube.h
    );
    assert!(
        width % cube.w == 0,
        "config error: frame width W={width} not divisible by cube.w={}",
        cube.w
    );
    let dims = (f_len / cube.f, height / cube.h, width / cube.w);
    let (nt, ny, nx) = dims;
    let n = nt * ny * nx;
    let mut adjacency = vec![Vec::new(); n];
    for t in 0..nt {
        for y in 0..ny {
            for x in 0..nx {
                let id = (t * ny + y) * nx + x;
                if t + 1 < nt {
                    let other = ((t + 1) * ny + y) * nx + x;
                    adjacency[id].push(other);
                    adjacency[other].push(id);
                }
                if y + 1 < ny {
                    let other = (t * ny + y + 1) * nx + x;
                    adjacency[id].push(other);
                    adjacency[other].push(id);
                }
                if x + 1 < nx {
                    let other = (t * ny + y) * nx + x + 1;
                    adjacency[id].push(other);
                    adjacency[other].push(id);
                }
            }
        }
    }
    for n in adjacency.iter_mut() {
        n.sort_unstable();
    }
    StGraph { dims, adjacency }
}

/// Samples a connected mask of round(|V| * p_m) nodes by uniform random walk.
pub fn random_walk_mask<R: Rng>(graph: &StGraph, p_m: f64, rng: &mut R) -> MaskSet {
    assert!(
        (0.0..=1.0).contains(&p_m),
        "config error: mask ratio p_m={p_m} outside [0, 1]"
    );
    let n = graph.node_count();
    let target = (n as f64 * p_m).round() as usize;
    if target == 0 {
        return MaskSet { nodes: BTreeSet::new(), root: None, ratio: p_m };
    }
    let root = rng.gen_range(0..n);
    let mut nodes = BTreeSet::new();
    nodes.insert(root);
    let mut current = root;
    let cap = 10_000usize.saturating_mul(n);
    let mut steps = 0usize;
    while nodes.len() < target {
        let neighbors = &graph.adjacency[current];
        assert!(!neighbors.is_empty(), "walk stuck: isolated node {current}");
        current = neighbors[rng.gen_range(0..neighbors.len())];
        nodes.insert(current);
        steps += 1;
        assert!(
            steps <= cap,
            "random walk exceeded {cap} steps collecting {target} of {n} nodes"
        );
    }
    MaskSet { nodes, root: Some(root), ratio: p_m }
}

/// Zeroes every masked cube across all channels; the input is untouched.
pub fn apply_mask(seq: &ObservationSequence, mask: &MaskSet, cube: CubeShape) -> ObservationSequence {
    let shape = &seq.frames.shape;
    assert_eq!(shape.len(), 4, "apply_mask: frames must be (F,c,H,W), got {shape:?}");
    let (f_len, c, height, width) = (shape[0], shape[1], shape[2], shape[3]);
    let graph_dims = (f_len / cube.f, height / cube.h, width / cube.w);
    assert!(
        f_len % cube.f == 0 && height % cube.h == 0 && width % cube.w == 0,
        "apply_mask: sequence {f_len}x{height}x{width} does not tile by cube {}x{}x{}",
        cube.f,
        cube.h,
        cube.w
    );
    let (nt, ny, nx) = graph_dims;
    let mut out = seq.clone();
    for &node in &mask.nodes {
        assert!(
            node < nt * ny * nx,
            "apply_mask: node {node} outside the {nt}x{ny}x{nx} grid"
        );
        let t = node / (ny * nx);
        let y = (node / nx) % ny;
        let x = node % nx;
        for dt in 0..cube.f {
            let frame = t * cube.f + dt;
            for ch in 0..c {
                for dy in 0..cube.h {
                    let row = y * cube.h + dy;
                    let base = ((frame * c + ch) * height + row) * width + x * cube.w;
                    for v in &mut out.frames.data[base..base + cube.w] {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    out
}

/// True when the subgraph induced by `nodes` is connected (empty sets and
/// singletons count as connected).
pub fn induced_subgraph_connected(graph: &StGraph, nodes: &BTreeSet<usize>) -> bool {
    if nodes.len() <= 1 {
        return true;
    }
    let start = *nodes.iter().next().unwrap();
    let mut seen = BTreeSet::new();
    seen.insert(start);
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        for &u in &graph.adjacency[v] {
            if nodes.contains(&u) && seen.insert(u) {
                stack.push(u);
            }
        }
    }
    seen.len() == nodes.len()
}
