//! Typed object graphs and the block-type map `σ`.
//!
//! `sigma[i][j]` names the dynamics block through which object `j` drives
//! object `i`: `0` is the hard-zero "no relation" block, `1..=h` index shared
//! blocks. Diagonal entries carry self-interaction types; off-diagonal
//! entries are nonzero exactly when the relation `j → i` exists.

use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, LatticeLayout, QuadKind};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Relation {
    pub sender: usize,
    pub receiver: usize,
    /// Catalog index in `1..=h`.
    pub type_id: usize,
}

/// Names of the block types used by one environment family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCatalog {
    pub env_kind: Option<EnvKind>,
    pub h: usize,
    pub names: Vec<String>,
}

const ROPE_ROLES: [&str; 2] = ["top", "mass"];
/// Compass classes of the sender as seen from the receiver.
pub const LATTICE_DIRECTIONS: [(&str, (i32, i32)); 8] = [
    ("up", (0, 1)),
    ("down", (0, -1)),
    ("left", (-1, 0)),
    ("right", (1, 0)),
    ("up-left", (-1, 1)),
    ("down-left", (-1, -1)),
    ("up-right", (1, 1)),
    ("down-right", (1, -1)),
];

impl RelationCatalog {
    /// Two self types (top, other) and eight pairwise types
    /// (sender role × receiver role × hop distance).
    pub fn rope() -> Self {
        let mut names = vec!["top-self".to_string(), "mass-self".to_string()];
        for s in ROPE_ROLES {
            for r in ROPE_ROLES {
                for hop in 1..=2 {
                    names.push(format!("{s}->{r} hop{hop}"));
                }
            }
        }
        Self {
            env_kind: Some(EnvKind::Rope2D),
            h: names.len(),
            names,
        }
    }

    pub fn rope_self(top: bool) -> usize {
        if top {
            1
        } else {
            2
        }
    }

    pub fn rope_pair(sender_top: bool, receiver_top: bool, hop: usize) -> usize {
        debug_assert!(hop == 1 || hop == 2);
        3 + usize::from(!sender_top) * 4 + usize::from(!receiver_top) * 2 + (hop - 1)
    }

    /// Four self types (one per quad kind) and, per receiver kind, one
    /// pairwise type for each of the eight compass directions: 4 + 8·4 = 36.
    pub fn lattice() -> Self {
        let kinds = ["rigid", "soft", "actuated", "fixed"];
        let mut names: Vec<String> = kinds.iter().map(|k| format!("{k}-self")).collect();
        for (dir, _) in LATTICE_DIRECTIONS {
            for k in kinds {
                names.push(format!("{dir}->{k}"));
            }
        }
        Self {
            env_kind: Some(EnvKind::SoftLattice2D),
            h: names.len(),
            names,
        }
    }

    pub fn lattice_self(kind: QuadKind) -> usize {
        1 + kind.index()
    }

    pub fn lattice_pair(direction: usize, receiver: QuadKind) -> usize {
        5 + direction * 4 + receiver.index()
    }

    /// One self type and one shared pairwise type.
    pub fn fully_connected() -> Self {
        Self {
            env_kind: Some(EnvKind::SpringBalls),
            h: 2,
            names: vec!["self".into(), "pair".into()],
        }
    }

    pub fn for_env(kind: EnvKind) -> Self {
        match kind {
            EnvKind::SpringBalls => Self::fully_connected(),
            EnvKind::Rope2D => Self::rope(),
            EnvKind::SoftLattice2D => Self::lattice(),
        }
    }
}

/// Directed graph over objects with typed relations and its `σ` map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    object_types: Vec<usize>,
    num_object_types: usize,
    relations: Vec<Relation>,
    sigma: Vec<Vec<usize>>,
    h: usize,
}

impl SceneGraph {
    /// Builds a graph from object types, self-interaction types and pairwise
    /// relations, deriving `σ`.
    pub fn new(
        object_types: Vec<usize>,
        num_object_types: usize,
        self_types: Vec<usize>,
        relations: Vec<Relation>,
        h: usize,
    ) -> Result<Self> {
        let n = object_types.len();
        if self_types.len() != n {
            return Err(Error::Config("one self type per object required".into()));
        }
        if object_types.iter().any(|&t| t >= num_object_types) {
            return Err(Error::Config("object type out of range".into()));
        }
        let mut sigma = vec![vec![0; n]; n];
        for (i, &t) in self_types.iter().enumerate() {
            if t == 0 || t > h {
                return Err(Error::Config(format!("self type {t} of object {i} outside 1..={h}")));
            }
            sigma[i][i] = t;
        }
        for r in &relations {
            if r.sender >= n || r.receiver >= n || r.sender == r.receiver {
                return Err(Error::Config(format!("bad relation {r:?}")));
            }
            if r.type_id == 0 || r.type_id > h {
                return Err(Error::Config(format!("relation type {} outside 1..={h}", r.type_id)));
            }
            if sigma[r.receiver][r.sender] != 0 {
                return Err(Error::Config(format!("duplicate relation {r:?}")));
            }
            sigma[r.receiver][r.sender] = r.type_id;
        }
        Ok(Self {
            object_types,
            num_object_types,
            relations,
            sigma,
            h,
        })
    }

    /// Rope of `n` masses, mass 0 on top.
    pub fn rope(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Config(format!("rope graph needs at least 3 masses, got {n}")));
        }
        let object_types = (0..n).map(|i| usize::from(i != 0)).collect();
        let self_types = (0..n).map(|i| RelationCatalog::rope_self(i == 0)).collect();
        let mut relations = Vec::new();
        for receiver in 0..n {
            for sender in 0..n {
                let hop = sender.abs_diff(receiver);
                if hop == 1 || hop == 2 {
                    relations.push(Relation {
                        sender,
                        receiver,
                        type_id: RelationCatalog::rope_pair(sender == 0, receiver == 0, hop),
                    });
                }
            }
        }
        Self::new(object_types, 2, self_types, relations, RelationCatalog::rope().h)
    }

    /// Quads joined whenever they share a corner or an edge; relation type is
    /// the sender's direction crossed with the receiver's kind.
    pub fn lattice(layout: &LatticeLayout) -> Result<Self> {
        layout.check()?;
        let cells = &layout.cells;
        let object_types = cells.iter().map(|c| c.kind.index()).collect();
        let self_types = cells.iter().map(|c| RelationCatalog::lattice_self(c.kind)).collect();
        let mut relations = Vec::new();
        for (ri, receiver) in cells.iter().enumerate() {
            for (si, sender) in cells.iter().enumerate() {
                let offset = (sender.x - receiver.x, sender.y - receiver.y);
                if let Some(dir) = LATTICE_DIRECTIONS.iter().position(|(_, d)| *d == offset) {
                    relations.push(Relation {
                        sender: si,
                        receiver: ri,
                        type_id: RelationCatalog::lattice_pair(dir, receiver.kind),
                    });
                }
            }
        }
        Self::new(object_types, 4, self_types, relations, RelationCatalog::lattice().h)
    }

    /// Every ordered pair related, one self type and one pair type.
    pub fn fully_connected(n: usize) -> Self {
        let mut relations = Vec::new();
        for receiver in 0..n {
            for sender in 0..n {
                if sender != receiver {
                    relations.push(Relation {
                        sender,
                        receiver,
                        type_id: 2,
                    });
                }
            }
        }
        Self::new(vec![0; n], 1, vec![1; n], relations, 2).expect("valid by construction")
    }

    /// Identity typing: one shared self block, no pairwise blocks.
    pub fn diagonal(n: usize) -> Self {
        Self::new(vec![0; n], 1, vec![1; n], Vec::new(), 1).expect("valid by construction")
    }

    pub fn for_env(kind: EnvKind, n: usize, layout: Option<&LatticeLayout>) -> Result<Self> {
        match kind {
            EnvKind::SpringBalls => Ok(Self::fully_connected(n)),
            EnvKind::Rope2D => Self::rope(n),
            EnvKind::SoftLattice2D => Self::lattice(
                layout.ok_or_else(|| Error::Config("lattice graph needs a layout".into()))?,
            ),
        }
    }

    pub fn num_objects(&self) -> usize {
        self.object_types.len()
    }

    pub fn num_object_types(&self) -> usize {
        self.num_object_types
    }

    pub fn object_types(&self) -> &[usize] {
        &self.object_types
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn sigma(&self) -> &[Vec<usize>] {
        &self.sigma
    }

    /// Number of block types `h`.
    pub fn h(&self) -> usize {
        self.h
    }

    /// Distinct nonzero values appearing in `σ`.
    pub fn used_types(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self.sigma.iter().flatten().copied().filter(|&t| t > 0).collect();
        used.sort_unstable();
        used.dedup();
        used
    }

    /// `N × num_object_types` one-hot object attributes.
    pub fn object_attributes(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.num_objects(), self.num_object_types);
        for (i, &t) in self.object_types.iter().enumerate() {
            m[(i, t)] = 1.0;
        }
        m
    }

    /// `R × h` one-hot relation attributes.
    pub fn relation_attributes(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.relations.len(), self.h);
        for (k, r) in self.relations.iter().enumerate() {
            m[(k, r.type_id - 1)] = 1.0;
        }
        m
    }

    /// Relabels object `i` as `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_objects())?;
        let n = self.num_objects();
        let mut object_types = vec![0; n];
        let mut self_types = vec![0; n];
        for i in 0..n {
            object_types[perm[i]] = self.object_types[i];
            self_types[perm[i]] = self.sigma[i][i];
        }
        let relations = self
            .relations
            .iter()
            .map(|r| Relation {
                sender: perm[r.sender],
                receiver: perm[r.receiver],
                type_id: r.type_id,
            })
            .collect();
        Self::new(object_types, self.num_object_types, self_types, relations, self.h)
    }
}

pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Argument(format!("permutation has {} entries, expected {n}", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Argument(format!("{perm:?} is not a bijection on 0..{n}")));
        }
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Applies an object relabeling to the rows of `m`: row `i` moves to `perm[i]`.
pub fn permute_rows(m: &DenseMatrix, perm: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(m.row(i));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    object_types: Vec<Vec<f64>>,
    relations: Vec<[usize; 3]>,
    sigma: Vec<Vec<usize>>,
    #[serde(default)]
    h: Option<usize>,
}

impl Serialize for SceneGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let attrs = self.object_attributes();
        RawGraph {
            object_types: (0..self.num_objects()).map(|i| attrs.row(i).to_vec()).collect(),
            relations: self.relations.iter().map(|r| [r.sender, r.receiver, r.type_id]).collect(),
            sigma: self.sigma.clone(),
            h: Some(self.h),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = RawGraph::deserialize(d)?;
        let n = raw.object_types.len();
        let num_types = raw.object_types.first().map_or(0, Vec::len);
        let object_types = raw
            .object_types
            .iter()
            .map(|v| {
                let hot: Vec<usize> = (0..v.len()).filter(|&k| v[k] == 1.0).collect();
                match (hot.as_slice(), v.iter().filter(|&&x| x != 0.0).count()) {
                    ([k], 1) if v.len() == num_types => Ok(*k),
                    _ => Err(D::Error::custom("object_types must be one-hot rows of equal width")),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if raw.sigma.len() != n || raw.sigma.iter().any(|r| r.len() != n) {
            return Err(D::Error::custom("sigma must be N×N"));
        }
        let h = raw
            .h
            .unwrap_or_else(|| raw.sigma.iter().flatten().copied().max().unwrap_or(0));
        let self_types = (0..n).map(|i| raw.sigma[i][i]).collect();
        let relations = raw
            .relations
            .iter()
            .map(|&[sender, receiver, type_id]| Relation {
                sender,
                receiver,
                type_id,
            })
            .collect();
        let g = SceneGraph::new(object_types, num_types, self_types, relations, h).map_err(D::Error::custom)?;
        if g.sigma != raw.sigma {
            return Err(D::Error::custom("sigma disagrees with the relation list"));
        }
        Ok(g)
    }
}
