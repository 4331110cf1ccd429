//! Occupancy + semantic grid shared by ground truth, agent maps and map fusion.
//!
//! Cell `(col, row)` covers `[col·res, (col+1)·res) × [row·res, (row+1)·res)`
//! in the grid frame given by `origin`. Row 0 is the bottom row; text dumps
//! print the top row first so that maps read the way they look.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::geometry::{Pose2D, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellState {
    Unknown,
    Free,
    Obstacle,
}

impl CellState {
    pub fn is_known(self) -> bool {
        self != CellState::Unknown
    }

    pub fn to_char(self) -> char {
        match self {
            CellState::Unknown => '?',
            CellState::Free => '.',
            CellState::Obstacle => '#',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '?' => Some(CellState::Unknown),
            '.' => Some(CellState::Free),
            '#' => Some(CellState::Obstacle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemLabel {
    Astronaut,
    Rock,
    Rover,
    SolarPanel,
    Regolith,
}

impl SemLabel {
    pub fn to_char(self) -> char {
        match self {
            SemLabel::Astronaut => 'A',
            SemLabel::Rock => 'K',
            SemLabel::Rover => 'R',
            SemLabel::SolarPanel => 'S',
            SemLabel::Regolith => 'G',
        }
    }

    pub fn from_char(c: char) -> Option<Option<Self>> {
        Some(match c {
            'A' => Some(SemLabel::Astronaut),
            'K' => Some(SemLabel::Rock),
            'R' => Some(SemLabel::Rover),
            'S' => Some(SemLabel::SolarPanel),
            'G' => Some(SemLabel::Regolith),
            '-' => None,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub col: usize,
    pub row: usize,
}

impl CellIndex {
    pub const fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.col, self.row)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("position ({x:.3}, {y:.3}) is outside the grid")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("grid dump line {line}: {message}")]
    Dump { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose2D,
    cells: Vec<CellState>,
    semantic: Vec<Option<SemLabel>>,
}

impl GridMap {
    /// A grid with every cell set to `fill`.
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Pose2D,
        fill: CellState,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::Invalid(
                "width and height must be positive".into(),
            ));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GridError::Invalid(format!(
                "resolution must be > 0, got {resolution}"
            )));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            cells: vec![fill; width * height],
            semantic: vec![None; width * height],
        })
    }

    /// Builds a grid from text rows, top row first.
    pub fn from_rows<S: AsRef<str>>(
        rows: &[S],
        resolution: f64,
        origin: Pose2D,
    ) -> Result<Self, GridError> {
        let height = rows.len();
        let width = rows
            .first()
            .map(|r| r.as_ref().chars().count())
            .unwrap_or(0);
        let mut grid = GridMap::new(width, height, resolution, origin, CellState::Unknown)?;
        for (i, line) in rows.iter().enumerate() {
            let line = line.as_ref();
            if line.chars().count() != width {
                return Err(GridError::Invalid(format!(
                    "row {i} has {} cells, expected {width}",
                    line.chars().count()
                )));
            }
            let row = height - 1 - i;
            for (col, ch) in line.chars().enumerate() {
                let state = CellState::from_char(ch).ok_or_else(|| {
                    GridError::Invalid(format!("row {i} col {col}: unknown cell symbol {ch:?}"))
                })?;
                grid.set(CellIndex::new(col, row), state);
            }
        }
        Ok(grid)
    }

    /// Text rows, top row first.
    pub fn to_rows(&self) -> Vec<String> {
        (0..self.height)
            .rev()
            .map(|row| {
                (0..self.width)
                    .map(|col| self.cells[row * self.width + col].to_char())
                    .collect()
            })
            .collect()
    }

    fn semantic_rows(&self) -> Vec<String> {
        (0..self.height)
            .rev()
            .map(|row| {
                (0..self.width)
                    .map(|col| self.semantic[row * self.width + col].map_or('-', SemLabel::to_char))
                    .collect()
            })
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Pose2D {
        self.origin
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    pub fn semantic(&self) -> &[Option<SemLabel>] {
        &self.semantic
    }

    pub fn linear(&self, c: CellIndex) -> usize {
        debug_assert!(c.col < self.width && c.row < self.height);
        c.row * self.width + c.col
    }

    pub fn cell_of(&self, linear: usize) -> CellIndex {
        CellIndex::new(linear % self.width, linear / self.width)
    }

    pub fn contains(&self, col: i64, row: i64) -> bool {
        col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height
    }

    pub fn get(&self, c: CellIndex) -> CellState {
        self.cells[self.linear(c)]
    }

    pub fn label(&self, c: CellIndex) -> Option<SemLabel> {
        self.semantic[self.linear(c)]
    }

    /// Sets the occupancy of a cell. Turning a cell Unknown drops its label.
    pub fn set(&mut self, c: CellIndex, state: CellState) {
        let i = self.linear(c);
        self.cells[i] = state;
        if state == CellState::Unknown {
            self.semantic[i] = None;
        }
    }

    /// Labels a known cell; labels on Unknown cells are refused.
    pub fn set_label(&mut self, c: CellIndex, label: Option<SemLabel>) -> bool {
        let i = self.linear(c);
        if label.is_some() && !self.cells[i].is_known() {
            return false;
        }
        self.semantic[i] = label;
        true
    }

    pub fn known_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_known()).count()
    }

    /// Cell containing `p`, using the floor rule.
    pub fn world_to_cell(&self, p: Vec2) -> Result<CellIndex, GridError> {
        let local = self.origin.inverse_transform_point(p);
        let col = (local.x / self.resolution).floor();
        let row = (local.y / self.resolution).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return Err(GridError::OutOfBounds { x: p.x, y: p.y });
        }
        Ok(CellIndex::new(col as usize, row as usize))
    }

    /// Continuous cell coordinates of `p` (cell centers sit at `i + 0.5`).
    pub fn world_to_grid(&self, p: Vec2) -> Vec2 {
        let local = self.origin.inverse_transform_point(p);
        Vec2::new(local.x / self.resolution, local.y / self.resolution)
    }

    pub fn grid_to_world(&self, g: Vec2) -> Vec2 {
        self.origin.transform_point(g * self.resolution)
    }

    /// Center of a cell, in world coordinates.
    pub fn cell_to_world(&self, c: CellIndex) -> Pose2D {
        let p = self.cell_center(c);
        Pose2D::new(p.x, p.y, 0.0)
    }

    pub fn cell_center(&self, c: CellIndex) -> Vec2 {
        self.grid_to_world(Vec2::new(c.col as f64 + 0.5, c.row as f64 + 0.5))
    }

    pub fn neighbors4(&self, c: CellIndex) -> impl Iterator<Item = CellIndex> + '_ {
        const D: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        D.iter().filter_map(move |&(dc, dr)| {
            let (col, row) = (c.col as i64 + dc, c.row as i64 + dr);
            self.contains(col, row)
                .then(|| CellIndex::new(col as usize, row as usize))
        })
    }

    /// Same geometry, every cell Unknown.
    pub fn blank_like(&self) -> GridMap {
        GridMap {
            cells: vec![CellState::Unknown; self.cells.len()],
            semantic: vec![None; self.cells.len()],
            ..self.clone()
        }
    }

    /// Text dump: a header line, then the occupancy rows (top first), then a
    /// `semantic` line followed by label rows.
    pub fn to_dump(&self) -> String {
        let mut out = format!(
            "gridmap {} {} {} {} {} {}\n",
            self.width,
            self.height,
            self.resolution,
            self.origin.x,
            self.origin.y,
            self.origin.theta
        );
        for r in self.to_rows() {
            out.push_str(&r);
            out.push('\n');
        }
        out.push_str("semantic\n");
        for r in self.semantic_rows() {
            out.push_str(&r);
            out.push('\n');
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<GridMap, GridError> {
        let err = |line: usize, message: String| GridError::Dump { line, message };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty dump".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 7 || fields[0] != "gridmap" {
            return Err(err(1, "expected `gridmap W H RES OX OY OTHETA`".into()));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(1, format!("{s}: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| err(1, format!("{s}: {e}")));
        let (width, height) = (int(fields[1])?, int(fields[2])?);
        let resolution = real(fields[3])?;
        let origin = Pose2D::new(real(fields[4])?, real(fields[5])?, real(fields[6])?);
        let mut rows = Vec::with_capacity(height);
        for _ in 0..height {
            let (n, l) = lines
                .next()
                .ok_or_else(|| err(height + 1, "missing occupancy row".into()))?;
            if l.chars().count() != width {
                return Err(err(n + 1, format!("expected {width} cells")));
            }
            rows.push(l);
        }
        let mut grid =
            GridMap::from_rows(&rows, resolution, origin).map_err(|e| err(1, e.to_string()))?;
        match lines.next() {
            None => return Ok(grid),
            Some((_, "semantic")) => {}
            Some((n, _)) => return Err(err(n + 1, "expected `semantic`".into())),
        }
        for i in 0..height {
            let (n, l) = lines
                .next()
                .ok_or_else(|| err(height + 2 + i, "missing semantic row".into()))?;
            if l.chars().count() != width {
                return Err(err(n + 1, format!("expected {width} labels")));
            }
            let row = height - 1 - i;
            for (col, ch) in l.chars().enumerate() {
                let label = SemLabel::from_char(ch)
                    .ok_or_else(|| err(n + 1, format!("unknown label {ch:?}")))?;
                if !grid.set_label(CellIndex::new(col, row), label) {
                    return Err(err(n + 1, format!("label on Unknown cell at column {col}")));
                }
            }
        }
        Ok(grid)
    }
}

/// Serialized form used in snapshots and wire frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMapDoc {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: Pose2D,
    pub rows: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<Vec<String>>,
}

impl From<&GridMap> for GridMapDoc {
    fn from(g: &GridMap) -> Self {
        GridMapDoc {
            width: g.width,
            height: g.height,
            resolution: g.resolution,
            origin: g.origin,
            rows: g.to_rows(),
            semantic: Some(g.semantic_rows()),
        }
    }
}

impl TryFrom<GridMapDoc> for GridMap {
    type Error = GridError;

    fn try_from(doc: GridMapDoc) -> Result<Self, Self::Error> {
        let mut grid = GridMap::from_rows(&doc.rows, doc.resolution, doc.origin)?;
        if grid.width != doc.width || grid.height != doc.height {
            return Err(GridError::Invalid(
                "declared size does not match rows".into(),
            ));
        }
        if let Some(sem) = doc.semantic {
            if sem.len() != grid.height {
                return Err(GridError::Invalid("semantic row count mismatch".into()));
            }
            for (i, line) in sem.iter().enumerate() {
                let row = grid.height - 1 - i;
                for (col, ch) in line.chars().enumerate() {
                    let label = SemLabel::from_char(ch)
                        .ok_or_else(|| GridError::Invalid(format!("unknown label {ch:?}")))?;
                    if col >= grid.width || !grid.set_label(CellIndex::new(col, row), label) {
                        return Err(GridError::Invalid(format!(
                            "bad semantic cell at row {i} col {col}"
                        )));
                    }
                }
            }
        }
        Ok(grid)
    }
}

impl Serialize for GridMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GridMapDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for GridMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = GridMapDoc::deserialize(d)?;
        GridMap::try_from(doc).map_err(serde::de::Error::custom)
    }
}
