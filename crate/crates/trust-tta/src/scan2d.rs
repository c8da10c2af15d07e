//! Cross-Scan / Cross-Merge over patch grids, and the traversal permutations
//! that route the four directional sequences to branch parameter slots.
//!
//! The four canonical directions over an H×W grid:
//!
//! - `a` — row-major (left-to-right, top-to-bottom row order)
//! - `b` — column-major (top-to-bottom, left-to-right column order)
//! - `c` — reverse of `a`
//! - `d` — reverse of `b`
//!
//! A traversal permutation assigns one direction to each of the four branch
//! slots; slot k scans the sequence of direction `ordering[k]` with its own
//! SSM parameters. 24 permutations exist; `abcd` is the identity routing
//! used by the stock SS2D dataflow.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{scan_batched, SsmCore};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    A,
    B,
    C,
    D,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::A, Direction::B, Direction::C, Direction::D];

    pub fn index(self) -> usize {
        match self {
            Direction::A => 0,
            Direction::B => 1,
            Direction::C => 2,
            Direction::D => 3,
        }
    }

    pub fn from_char(ch: char) -> Result<Self> {
        match ch {
            'a' => Ok(Direction::A),
            'b' => Ok(Direction::B),
            'c' => Ok(Direction::C),
            'd' => Ok(Direction::D),
            other => Err(Error::InvalidPermutation(format!(
                "unknown direction '{other}'"
            ))),
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Direction::A => 'a',
            Direction::B => 'b',
            Direction::C => 'c',
            Direction::D => 'd',
        }
    }

    /// Map grid position (row-major index) → time step.
    pub fn index_map(self, h: usize, w: usize) -> Vec<usize> {
        let t = h * w;
        let mut map = vec![0usize; t];
        for r in 0..h {
            for c in 0..w {
                let pos = r * w + c;
                map[pos] = match self {
                    Direction::A => r * w + c,
                    Direction::B => c * h + r,
                    Direction::C => t - 1 - (r * w + c),
                    Direction::D => t - 1 - (c * h + r),
                };
            }
        }
        map
    }

    /// Map time step → grid position; inverse of [`Direction::index_map`].
    pub fn inverse_map(self, h: usize, w: usize) -> Vec<usize> {
        let map = self.index_map(h, w);
        let mut inv = vec![0usize; map.len()];
        for (pos, &t) in map.iter().enumerate() {
            inv[t] = pos;
        }
        inv
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// An ordering of the four directions; slot k processes direction
/// `ordering[k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Permutation {
    ordering: [Direction; 4],
}

impl Permutation {
    /// The identity routing `abcd` used for training and evaluation.
    pub fn identity() -> Self {
        Permutation {
            ordering: Direction::ALL,
        }
    }

    pub fn new(ordering: [Direction; 4]) -> Result<Self> {
        let mut seen = [false; 4];
        for d in ordering {
            if seen[d.index()] {
                return Err(Error::InvalidPermutation(format!(
                    "direction {d} repeated"
                )));
            }
            seen[d.index()] = true;
        }
        Ok(Permutation { ordering })
    }

    /// All 24 permutations in lexicographic order (a < b < c < d).
    pub fn all() -> Vec<Permutation> {
        let mut out = Vec::with_capacity(24);
        for &p0 in &Direction::ALL {
            for &p1 in &Direction::ALL {
                for &p2 in &Direction::ALL {
                    for &p3 in &Direction::ALL {
                        if let Ok(p) = Permutation::new([p0, p1, p2, p3]) {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn parse(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 4 {
            return Err(Error::InvalidPermutation(format!(
                "expected 4 directions, got {s:?}"
            )));
        }
        let mut ordering = [Direction::A; 4];
        for (i, &ch) in chars.iter().enumerate() {
            ordering[i] = Direction::from_char(ch)?;
        }
        Permutation::new(ordering)
    }

    pub fn slot(&self, k: usize) -> Direction {
        self.ordering[k]
    }

    pub fn ordering(&self) -> [Direction; 4] {
        self.ordering
    }

    pub fn is_identity(&self) -> bool {
        self.ordering == Direction::ALL
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.ordering {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl Serialize for Permutation {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Permutation {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Permutation::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Sequence tensors for all four directions, plus the grid-position → time
/// index map of each direction.
pub struct CrossScan {
    /// Indexed by `Direction::index()`; each is [B·T, C], batch-major rows.
    pub sequences: [Tensor; 4],
    pub index_maps: [Vec<usize>; 4],
}

/// Expand a batch of grids ([B·T, C], position-major rows) into the four
/// directional sequences.
pub fn cross_scan(
    tape: &Tape,
    grid: &Tensor,
    batch: usize,
    h: usize,
    w: usize,
) -> Result<CrossScan> {
    let t = h * w;
    if grid.shape()[0] != batch * t {
        return Err(Error::ShapeMismatch {
            op: "cross_scan",
            lhs: grid.shape().to_vec(),
            rhs: vec![batch * t, grid.shape().get(1).copied().unwrap_or(0)],
        });
    }
    let mut seqs = Vec::with_capacity(4);
    let mut maps = Vec::with_capacity(4);
    for dir in Direction::ALL {
        let inv = dir.inverse_map(h, w);
        // sequence row (b, t) reads grid row (b, inv[t])
        let gather: Arc<Vec<usize>> = Arc::new(
            (0..batch)
                .flat_map(|b| inv.iter().map(move |&pos| b * t + pos))
                .collect(),
        );
        seqs.push(tape.gather_rows(grid, gather)?);
        maps.push(dir.index_map(h, w));
    }
    let sequences: [Tensor; 4] = seqs.try_into().map_err(|_| Error::InvalidArgument(
        "direction count".into(),
    ))?;
    let index_maps: [Vec<usize>; 4] = maps
        .try_into()
        .map_err(|_| Error::InvalidArgument("direction count".into()))?;
    Ok(CrossScan {
        sequences,
        index_maps,
    })
}

/// Put a directional sequence back into grid-position order.
pub fn unscan(
    tape: &Tape,
    seq: &Tensor,
    dir: Direction,
    batch: usize,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let t = h * w;
    let map = dir.index_map(h, w);
    // grid row (b, pos) reads sequence row (b, map[pos])
    let gather: Arc<Vec<usize>> = Arc::new(
        (0..batch)
            .flat_map(|b| map.iter().map(move |&tt| b * t + tt))
            .collect(),
    );
    tape.gather_rows(seq, gather)
}

/// Route direction-labeled sequences to branch slots: slot k receives the
/// sequence of direction `perm.ordering[k]`.
pub fn route(perm: Permutation, sequences: &[Tensor; 4]) -> [Tensor; 4] {
    [
        sequences[perm.slot(0).index()].clone(),
        sequences[perm.slot(1).index()].clone(),
        sequences[perm.slot(2).index()].clone(),
        sequences[perm.slot(3).index()].clone(),
    ]
}

/// Parameters of one SS2D module: shared projections plus four independent
/// branch cores — the only tensors test-time adaptation updates.
#[derive(Debug, Clone)]
pub struct Ss2dParams {
    pub in_w: Tensor,
    pub in_b: Option<Tensor>,
    pub gate_w: Tensor,
    pub gate_b: Option<Tensor>,
    pub out_w: Tensor,
    pub out_b: Option<Tensor>,
    pub branches: [SsmCore; 4],
}

/// One SS2D block: project + gate, scan the four routed directions, merge
/// back to the grid, apply the gated output projection.
///
/// Cross-Merge sums the un-scanned branch grids in canonical direction order
/// (a, b, c, d), so identical branch parameters make the output exactly
/// independent of the routing permutation.
pub fn ss2d_forward(
    tape: &Tape,
    params: &Ss2dParams,
    x: &Tensor,
    batch: usize,
    h: usize,
    w: usize,
    perm: Permutation,
) -> Result<Tensor> {
    let u = tape.silu(&tape.linear(x, &params.in_w, params.in_b.as_ref())?);
    let z = tape.linear(x, &params.gate_w, params.gate_b.as_ref())?;

    let scan = cross_scan(tape, &u, batch, h, w)?;
    let routed = route(perm, &scan.sequences);

    let t = h * w;
    let mut merged_by_dir: [Option<Tensor>; 4] = [None, None, None, None];
    for (slot, seq) in routed.iter().enumerate() {
        let dir = perm.slot(slot);
        let out = scan_batched(tape, &params.branches[slot], seq, batch, t, false)?;
        merged_by_dir[dir.index()] = Some(unscan(tape, &out.y, dir, batch, h, w)?);
    }

    let mut merged: Option<Tensor> = None;
    for grid in merged_by_dir.into_iter().flatten() {
        merged = Some(match merged {
            Some(acc) => tape.add(&acc, &grid)?,
            None => grid,
        });
    }
    let merged = merged.expect("four branches");

    let gated = tape.mul(&merged, &tape.silu(&z))?;
    tape.linear(&gated, &params.out_w, params.out_b.as_ref())
}
