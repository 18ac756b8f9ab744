//! Decomposition of the 8-connected image lattice into four directed
//! acyclic graphs, one per propagation direction.
//!
//! In the southeast plan every vertex `(r, c)` depends on `(r-1, c)`,
//! `(r, c-1)` and `(r-1, c-1)`. The other three plans are its reflections.
//! Vertices are ordered in anti-diagonal wavefronts from the start corner:
//! all predecessors of a vertex lie in the previous one or two wavefronts, so
//! a whole wavefront can be evaluated at once.

use std::fmt;

use crate::error::{dim_err, Result};

/// Displacement from a vertex to one of its 8 neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Offset {
    d_row: i8,
    d_col: i8,
}

impl Offset {
    pub fn new(d_row: i8, d_col: i8) -> Option<Offset> {
        let ok = (-1..=1).contains(&d_row) && (-1..=1).contains(&d_col) && (d_row, d_col) != (0, 0);
        ok.then_some(Offset { d_row, d_col })
    }
    pub fn d_row(self) -> i8 {
        self.d_row
    }
    pub fn d_col(self) -> i8 {
        self.d_col
    }
    /// All 8 neighbour displacements.
    pub fn all() -> impl Iterator<Item = Offset> {
        (-1i8..=1)
            .flat_map(|r| (-1i8..=1).map(move |c| (r, c)))
            .filter_map(|(r, c)| Offset::new(r, c))
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:+},{:+})", self.d_row, self.d_col)
    }
}

/// Propagation direction of one plan. Information flows away from the start corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    SouthEast,
    SouthWest,
    NorthWest,
    NorthEast,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::SouthEast,
        Direction::SouthWest,
        Direction::NorthWest,
        Direction::NorthEast,
    ];

    /// Row/column sign of the flow (+1 means increasing index).
    fn signs(self) -> (i8, i8) {
        match self {
            Direction::SouthEast => (1, 1),
            Direction::SouthWest => (1, -1),
            Direction::NorthWest => (-1, -1),
            Direction::NorthEast => (-1, 1),
        }
    }

    /// The three predecessor displacements, in weight-slot order:
    /// vertical, horizontal, diagonal.
    pub fn predecessor_offsets(self) -> [Offset; 3] {
        let (sr, sc) = self.signs();
        [
            Offset { d_row: -sr, d_col: 0 },
            Offset { d_row: 0, d_col: -sc },
            Offset { d_row: -sr, d_col: -sc },
        ]
    }

    /// Weight slot of a predecessor displacement, if it belongs to this direction.
    pub fn slot(self, offset: Offset) -> Option<usize> {
        self.predecessor_offsets().iter().position(|&o| o == offset)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Direction::SouthEast => "se",
            Direction::SouthWest => "sw",
            Direction::NorthWest => "nw",
            Direction::NorthEast => "ne",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize) -> Self {
        Coord { row, col }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// A directed edge endpoint as seen from the other vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Link {
    /// The neighbouring vertex.
    pub coord: Coord,
    /// Displacement from the predecessor-side vertex to its predecessor.
    pub offset: Offset,
    /// Index into the direction's three recurrent weight slots.
    pub slot: usize,
}

/// One directed acyclic traversal of an `height × width` lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct DagPlan {
    pub direction: Direction,
    pub height: usize,
    pub width: usize,
    /// Topological order of all vertices.
    pub order: Vec<Coord>,
    /// Predecessors per vertex, indexed by `row * width + col`.
    pub predecessors: Vec<Vec<Link>>,
    /// Successors per vertex, indexed by `row * width + col`.
    pub successors: Vec<Vec<Link>>,
    /// `order[wavefronts[k]..wavefronts[k + 1]]` is the k-th wavefront.
    pub wavefronts: Vec<usize>,
}

impl DagPlan {
    pub fn build(direction: Direction, height: usize, width: usize) -> Result<DagPlan> {
        if height == 0 || width == 0 {
            return Err(dim_err!("lattice must be non-empty, got {height}x{width}"));
        }
        let (sr, sc) = direction.signs();
        // local (distance-from-start) coordinate -> lattice coordinate
        let to_global = |lr: usize, lc: usize| {
            Coord::new(
                if sr > 0 { lr } else { height - 1 - lr },
                if sc > 0 { lc } else { width - 1 - lc },
            )
        };

        let mut order = Vec::with_capacity(height * width);
        let mut wavefronts = vec![0];
        for d in 0..height + width - 1 {
            let lo = d.saturating_sub(width - 1);
            let hi = d.min(height - 1);
            for lr in lo..=hi {
                order.push(to_global(lr, d - lr));
            }
            wavefronts.push(order.len());
        }

        let n = height * width;
        let mut predecessors = vec![Vec::new(); n];
        let mut successors = vec![Vec::new(); n];
        for r in 0..height {
            for c in 0..width {
                for (slot, off) in direction.predecessor_offsets().into_iter().enumerate() {
                    let pr = r as isize + off.d_row as isize;
                    let pc = c as isize + off.d_col as isize;
                    if pr < 0 || pc < 0 || pr >= height as isize || pc >= width as isize {
                        continue;
                    }
                    let p = Coord::new(pr as usize, pc as usize);
                    predecessors[r * width + c].push(Link {
                        coord: p,
                        offset: off,
                        slot,
                    });
                    successors[p.row * width + p.col].push(Link {
                        coord: Coord::new(r, c),
                        offset: off,
                        slot,
                    });
                }
            }
        }

        Ok(DagPlan {
            direction,
            height,
            width,
            order,
            predecessors,
            successors,
            wavefronts,
        })
    }

    #[inline]
    pub fn vertex_index(&self, c: Coord) -> usize {
        c.row * self.width + c.col
    }

    pub fn vertex_count(&self) -> usize {
        self.height * self.width
    }

    pub fn predecessors_of(&self, c: Coord) -> &[Link] {
        &self.predecessors[self.vertex_index(c)]
    }

    pub fn successors_of(&self, c: Coord) -> &[Link] {
        &self.successors[self.vertex_index(c)]
    }

    pub fn start(&self) -> Coord {
        self.order[0]
    }

    /// Iterate the wavefront groups of the traversal order.
    pub fn wavefront_groups(&self) -> impl Iterator<Item = &[Coord]> {
        self.wavefronts.windows(2).map(|w| &self.order[w[0]..w[1]])
    }

    /// Directed edges `(from, to)` of the plan.
    pub fn edges(&self) -> Vec<(Coord, Coord)> {
        let mut e = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                for l in &self.predecessors[r * self.width + c] {
                    e.push((l.coord, Coord::new(r, c)));
                }
            }
        }
        e
    }
}

/// The SE, SW, NW and NE plans for a lattice, in that order.
pub fn build_dag_plans(height: usize, width: usize) -> Result<[DagPlan; 4]> {
    Ok([
        DagPlan::build(Direction::SouthEast, height, width)?,
        DagPlan::build(Direction::SouthWest, height, width)?,
        DagPlan::build(Direction::NorthWest, height, width)?,
        DagPlan::build(Direction::NorthEast, height, width)?,
    ])
}

/// First invariant violation found by [`validate_plan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlanViolation {
    ShapeMismatch(String),
    OrderLength { expected: usize, found: usize },
    OutOfBounds(Coord),
    DuplicateVertex(Coord),
    DanglingPredecessor { vertex: Coord, predecessor: Coord },
    OffsetMismatch { vertex: Coord, predecessor: Coord },
    TooManyPredecessors { vertex: Coord, count: usize },
    StartHasPredecessors(Coord),
    NotTopological { vertex: Coord, predecessor: Coord },
    SuccessorMismatch(Coord),
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::ShapeMismatch(s) => write!(f, "shape mismatch: {s}"),
            PlanViolation::OrderLength { expected, found } => {
                write!(f, "order has {found} vertices, lattice has {expected}")
            }
            PlanViolation::OutOfBounds(c) => write!(f, "vertex {c} outside the lattice"),
            PlanViolation::DuplicateVertex(c) => write!(f, "vertex {c} appears twice in order"),
            PlanViolation::DanglingPredecessor {
                vertex,
                predecessor,
            } => write!(f, "vertex {vertex} lists predecessor {predecessor} outside the lattice"),
            PlanViolation::OffsetMismatch {
                vertex,
                predecessor,
            } => write!(
                f,
                "edge {predecessor} -> {vertex} is not a valid offset for this direction"
            ),
            PlanViolation::TooManyPredecessors { vertex, count } => {
                write!(f, "vertex {vertex} has {count} predecessors")
            }
            PlanViolation::StartHasPredecessors(c) => {
                write!(f, "start vertex {c} has predecessors")
            }
            PlanViolation::NotTopological {
                vertex,
                predecessor,
            } => write!(
                f,
                "predecessor {predecessor} is not ordered before {vertex}"
            ),
            PlanViolation::SuccessorMismatch(c) => {
                write!(f, "successor list of {c} is not the transpose of the predecessors")
            }
        }
    }
}

/// Outcome of [`validate_plan`].
pub type ValidationReport = std::result::Result<(), PlanViolation>;

/// Check every structural invariant of a plan in `O(V + E)`.
pub fn validate_plan(plan: &DagPlan) -> ValidationReport {
    let (h, w) = (plan.height, plan.width);
    let n = h * w;
    if plan.predecessors.len() != n || plan.successors.len() != n {
        return Err(PlanViolation::ShapeMismatch(format!(
            "{} predecessor and {} successor lists for {n} vertices",
            plan.predecessors.len(),
            plan.successors.len()
        )));
    }
    if plan.order.len() != n {
        return Err(PlanViolation::OrderLength {
            expected: n,
            found: plan.order.len(),
        });
    }
    let in_bounds = |c: Coord| c.row < h && c.col < w;
    let mut position = vec![usize::MAX; n];
    for (i, &v) in plan.order.iter().enumerate() {
        if !in_bounds(v) {
            return Err(PlanViolation::OutOfBounds(v));
        }
        let idx = v.row * w + v.col;
        if position[idx] != usize::MAX {
            return Err(PlanViolation::DuplicateVertex(v));
        }
        position[idx] = i;
    }
    let allowed = plan.direction.predecessor_offsets();
    let mut expected_succ: Vec<Vec<(Coord, usize)>> = vec![Vec::new(); n];
    for &v in &plan.order {
        let preds = &plan.predecessors[v.row * w + v.col];
        if preds.len() > 3 {
            return Err(PlanViolation::TooManyPredecessors {
                vertex: v,
                count: preds.len(),
            });
        }
        for l in preds {
            if !in_bounds(l.coord) {
                return Err(PlanViolation::DanglingPredecessor {
                    vertex: v,
                    predecessor: l.coord,
                });
            }
            let dr = l.coord.row as isize - v.row as isize;
            let dc = l.coord.col as isize - v.col as isize;
            let geometric = allowed.get(l.slot).is_some_and(|o| {
                *o == l.offset && o.d_row as isize == dr && o.d_col as isize == dc
            });
            if !geometric {
                return Err(PlanViolation::OffsetMismatch {
                    vertex: v,
                    predecessor: l.coord,
                });
            }
            if position[l.coord.row * w + l.coord.col] >= position[v.row * w + v.col] {
                return Err(PlanViolation::NotTopological {
                    vertex: v,
                    predecessor: l.coord,
                });
            }
            expected_succ[l.coord.row * w + l.coord.col].push((v, l.slot));
        }
    }
    let start = plan.order[0];
    if !plan.predecessors[start.row * w + start.col].is_empty() {
        return Err(PlanViolation::StartHasPredecessors(start));
    }
    for (idx, exp) in expected_succ.iter().enumerate() {
        let got = &plan.successors[idx];
        let same = got.len() == exp.len()
            && got
                .iter()
                .all(|l| exp.iter().any(|&(c, s)| c == l.coord && s == l.slot));
        if !same {
            return Err(PlanViolation::SuccessorMismatch(Coord::new(idx / w, idx % w)));
        }
    }
    Ok(())
}
