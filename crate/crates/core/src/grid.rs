//! Tile-mixing masks.
//!
//! A mask set for a group of `group_size` images split into
//! `tiles_per_axis x tiles_per_axis` tiles stores, for every mixed image `g`
//! and tile position `(i, j)`, the index of the source image whose tile lands
//! there. Tiles never move spatially, so only the source index is recorded.
//! At every tile position the column `cells[0..group_size][i][j]` must be a
//! permutation of `0..group_size`.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Nested-array document form shared by both mask kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskDoc {
    group_size: usize,
    tiles_per_axis: usize,
    cells: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct MaskGrid {
    group_size: usize,
    tiles_per_axis: usize,
    cells: Vec<usize>,
}

impl MaskGrid {
    fn from_nested(group_size: usize, tiles_per_axis: usize, cells: &[Vec<Vec<usize>>]) -> Result<Self> {
        if group_size == 0 || tiles_per_axis == 0 {
            return Err(Error::invalid(format!(
                "group_size and tiles_per_axis must be positive (got {group_size}, {tiles_per_axis})"
            )));
        }
        if cells.len() != group_size {
            return Err(Error::invalid(format!(
                "expected {group_size} grids, found {}",
                cells.len()
            )));
        }
        let mut flat = Vec::with_capacity(group_size * tiles_per_axis * tiles_per_axis);
        for (g, grid) in cells.iter().enumerate() {
            if grid.len() != tiles_per_axis || grid.iter().any(|row| row.len() != tiles_per_axis) {
                return Err(Error::invalid(format!(
                    "grid {g} is not {tiles_per_axis}x{tiles_per_axis}"
                )));
            }
            for row in grid {
                flat.extend_from_slice(row);
            }
        }
        Ok(Self {
            group_size,
            tiles_per_axis,
            cells: flat,
        })
    }

    fn to_doc(&self) -> MaskDoc {
        let nt = self.tiles_per_axis;
        let cells = (0..self.group_size)
            .map(|g| {
                (0..nt)
                    .map(|i| (0..nt).map(|j| self.get(g, i, j)).collect())
                    .collect()
            })
            .collect();
        MaskDoc {
            group_size: self.group_size,
            tiles_per_axis: nt,
            cells,
        }
    }

    #[inline]
    fn get(&self, g: usize, i: usize, j: usize) -> usize {
        let nt = self.tiles_per_axis;
        self.cells[(g * nt + i) * nt + j]
    }

    #[inline]
    fn set(&mut self, g: usize, i: usize, j: usize, v: usize) {
        let nt = self.tiles_per_axis;
        self.cells[(g * nt + i) * nt + j] = v;
    }

    fn identity(group_size: usize, tiles_per_axis: usize) -> Self {
        let per = tiles_per_axis * tiles_per_axis;
        let cells = (0..group_size).flat_map(|g| std::iter::repeat_n(g, per)).collect();
        Self {
            group_size,
            tiles_per_axis,
            cells,
        }
    }

    fn violations(&self) -> Vec<CellViolation> {
        let nt = self.tiles_per_axis;
        let mut out = Vec::new();
        let mut seen = vec![Vec::new(); self.group_size];
        for i in 0..nt {
            for j in 0..nt {
                let mut problems = Vec::new();
                for s in seen.iter_mut() {
                    s.clear();
                }
                for g in 0..self.group_size {
                    let v = self.get(g, i, j);
                    if v >= self.group_size {
                        problems.push(CellProblem::OutOfRange { group: g, value: v });
                    } else {
                        seen[v].push(g);
                    }
                }
                for (value, groups) in seen.iter().enumerate() {
                    if groups.len() > 1 {
                        problems.push(CellProblem::Duplicate {
                            value,
                            groups: groups.clone(),
                        });
                    }
                }
                if !problems.is_empty() {
                    out.push(CellViolation {
                        row: i,
                        col: j,
                        problems,
                    });
                }
            }
        }
        out
    }

    fn inverted(&self) -> Self {
        let nt = self.tiles_per_axis;
        let mut inv = self.clone();
        for g in 0..self.group_size {
            for i in 0..nt {
                for j in 0..nt {
                    inv.set(self.get(g, i, j), i, j, g);
                }
            }
        }
        inv
    }
}

/// What is wrong at one tile position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellProblem {
    /// `cells[group][row][col] == value` is not a valid group index.
    OutOfRange { group: usize, value: usize },
    /// `value` is used by more than one mixed image at this position.
    Duplicate { value: usize, groups: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellViolation {
    pub row: usize,
    pub col: usize,
    pub problems: Vec<CellProblem>,
}

/// Every tile position whose column is not a permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationReport {
    pub violations: Vec<CellViolation>,
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            write!(f, "cell ({}, {}):", v.row, v.col)?;
            for p in &v.problems {
                match p {
                    CellProblem::OutOfRange { group, value } => {
                        write!(f, " cells[{group}][{}][{}]={value} out of range", v.row, v.col)?
                    }
                    CellProblem::Duplicate { value, groups } => {
                        write!(f, " source {value} used by groups {groups:?}")?
                    }
                }
            }
        }
        Ok(())
    }
}

impl From<ViolationReport> for Error {
    fn from(r: ViolationReport) -> Self {
        Error::Validation(format!("mask is not a per-cell permutation: {r}"))
    }
}

/// Mixing masks: `cell(g, i, j)` is the source image for tile `(i, j)` of mixed image `g`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskDoc", into = "MaskDoc")]
pub struct MixingMaskSet(MaskGrid);

/// Unmixing masks: `cell(g, i, j)` is the mixed image holding original image `g`'s tile `(i, j)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskDoc", into = "MaskDoc")]
pub struct UnmixingMaskSet(MaskGrid);

macro_rules! mask_common {
    ($t:ident) => {
        impl $t {
            /// Builds a mask set from nested `[group][row][col]` arrays and validates it.
            pub fn from_cells(
                group_size: usize,
                tiles_per_axis: usize,
                cells: &[Vec<Vec<usize>>],
            ) -> Result<Self> {
                let m = Self::from_cells_unchecked(group_size, tiles_per_axis, cells)?;
                let v = m.0.violations();
                if v.is_empty() {
                    Ok(m)
                } else {
                    Err(ViolationReport { violations: v }.into())
                }
            }

            /// Like [`Self::from_cells`] but only checks the shape, so the permutation
            /// invariant may be violated.
            pub fn from_cells_unchecked(
                group_size: usize,
                tiles_per_axis: usize,
                cells: &[Vec<Vec<usize>>],
            ) -> Result<Self> {
                MaskGrid::from_nested(group_size, tiles_per_axis, cells).map(Self)
            }

            pub fn identity(group_size: usize, tiles_per_axis: usize) -> Self {
                Self(MaskGrid::identity(group_size, tiles_per_axis))
            }

            pub fn group_size(&self) -> usize {
                self.0.group_size
            }

            pub fn tiles_per_axis(&self) -> usize {
                self.0.tiles_per_axis
            }

            #[inline]
            pub fn cell(&self, g: usize, row: usize, col: usize) -> usize {
                self.0.get(g, row, col)
            }

            pub fn cells(&self) -> Vec<Vec<Vec<usize>>> {
                self.0.to_doc().cells
            }

            pub fn is_identity(&self) -> bool {
                self.0 == MaskGrid::identity(self.0.group_size, self.0.tiles_per_axis)
            }

            pub fn to_json(&self) -> String {
                serde_json::to_string(&self.0.to_doc()).expect("mask document serializes")
            }

            pub fn from_json(s: &str) -> Result<Self> {
                Ok(serde_json::from_str(s)?)
            }

            pub fn save(&self, path: &Path) -> Result<()> {
                std::fs::write(path, self.to_json() + "\n")?;
                Ok(())
            }

            pub fn load(path: &Path) -> Result<Self> {
                Self::from_json(&std::fs::read_to_string(path)?)
            }
        }

        impl TryFrom<MaskDoc> for $t {
            type Error = Error;

            fn try_from(d: MaskDoc) -> Result<Self> {
                Self::from_cells(d.group_size, d.tiles_per_axis, &d.cells)
            }
        }

        impl From<$t> for MaskDoc {
            fn from(m: $t) -> Self {
                m.0.to_doc()
            }
        }
    };
}

mask_common!(MixingMaskSet);
mask_common!(UnmixingMaskSet);

/// Draws an independent uniform permutation of the group indices at every tile position.
pub fn generate_masks(rng: &mut Rng, group_size: usize, tiles_per_axis: usize) -> Result<MixingMaskSet> {
    if group_size == 0 || tiles_per_axis == 0 {
        return Err(Error::invalid(format!(
            "group_size and tiles_per_axis must be positive (got {group_size}, {tiles_per_axis})"
        )));
    }
    let mut grid = MaskGrid::identity(group_size, tiles_per_axis);
    let mut perm: Vec<usize> = (0..group_size).collect();
    for i in 0..tiles_per_axis {
        for j in 0..tiles_per_axis {
            for (k, p) in perm.iter_mut().enumerate() {
                *p = k;
            }
            perm.shuffle(rng);
            for (g, &src) in perm.iter().enumerate() {
                grid.set(g, i, j, src);
            }
        }
    }
    Ok(MixingMaskSet(grid))
}

pub fn validate_masks(m: &MixingMaskSet) -> std::result::Result<(), ViolationReport> {
    let violations = m.0.violations();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ViolationReport { violations })
    }
}

/// Per-cell inverse permutation: `result.cell(m.cell(g, i, j), i, j) == g`.
pub fn invert_masks(m: &MixingMaskSet) -> Result<UnmixingMaskSet> {
    validate_masks(m)?;
    Ok(UnmixingMaskSet(m.0.inverted()))
}

impl UnmixingMaskSet {
    /// Recovers the mixing masks these were derived from.
    pub fn invert(&self) -> MixingMaskSet {
        MixingMaskSet(self.0.inverted())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn single_image_group_is_identity() {
        let m = generate_masks(&mut rng_from_seed(3), 1, 4).unwrap();
        assert!(m.is_identity());
        assert!(m.cells().iter().flatten().flatten().all(|&v| v == 0));
    }

    #[test]
    fn four_by_four_columns_are_permutations() {
        let m = generate_masks(&mut rng_from_seed(11), 4, 4).unwrap();
        assert_eq!(m.cells().len(), 4);
        for i in 0..4 {
            for j in 0..4 {
                let mut col: Vec<usize> = (0..4).map(|g| m.cell(g, i, j)).collect();
                col.sort_unstable();
                assert_eq!(col, vec![0, 1, 2, 3]);
            }
        }
        assert!(validate_masks(&m).is_ok());
    }

    #[test]
    fn rejects_non_positive_sizes() {
        let mut rng = rng_from_seed(0);
        assert!(matches!(generate_masks(&mut rng, 0, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_masks(&mut rng, 4, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn identity_inverts_to_identity() {
        let m = MixingMaskSet::identity(3, 2);
        let u = invert_masks(&m).unwrap();
        assert!(u.is_identity());
    }

    #[test]
    fn swap_is_its_own_inverse() {
        let cells = vec![vec![vec![1, 1], vec![1, 1]], vec![vec![0, 0], vec![0, 0]]];
        let m = MixingMaskSet::from_cells(2, 2, &cells).unwrap();
        let u = invert_masks(&m).unwrap();
        assert_eq!(u.cells(), cells);
    }

    #[test]
    fn duplicate_source_is_reported_at_its_cell() {
        let mut cells = MixingMaskSet::identity(2, 2).cells();
        cells[1][0][0] = 0;
        let m = MixingMaskSet::from_cells_unchecked(2, 2, &cells).unwrap();
        let report = validate_masks(&m).unwrap_err();
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!((v.row, v.col), (0, 0));
        assert_eq!(
            v.problems,
            vec![CellProblem::Duplicate {
                value: 0,
                groups: vec![0, 1]
            }]
        );
        assert!(invert_masks(&m).is_err());
        assert!(MixingMaskSet::from_cells(2, 2, &cells).is_err());
    }

    #[test]
    fn out_of_range_names_the_cell() {
        let mut cells = MixingMaskSet::identity(2, 2).cells();
        cells[1][1][0] = 5;
        let m = MixingMaskSet::from_cells_unchecked(2, 2, &cells).unwrap();
        let report = validate_masks(&m).unwrap_err();
        assert_eq!(report.violations.len(), 1);
        assert_eq!((report.violations[0].row, report.violations[0].col), (1, 0));
        assert!(report.violations[0]
            .problems
            .contains(&CellProblem::OutOfRange { group: 1, value: 5 }));
        assert!(report.to_string().contains("cells[1][1][0]=5"));
    }

    #[test]
    fn json_roundtrip_and_shape_checks() {
        let m = generate_masks(&mut rng_from_seed(5), 3, 2).unwrap();
        let s = m.to_json();
        assert_eq!(MixingMaskSet::from_json(&s).unwrap(), m);
        assert!(MixingMaskSet::from_json(r#"{"group_size":2,"tiles_per_axis":1,"cells":[[[0]]]}"#).is_err());
        assert!(MixingMaskSet::from_json(r#"{"group_size":2,"tiles_per_axis":1,"cells":[[[0]],[[0]]]}"#).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_masks(&mut rng_from_seed(42), 4, 4).unwrap().to_json();
        let b = generate_masks(&mut rng_from_seed(42), 4, 4).unwrap().to_json();
        assert_eq!(a, b);
    }
}
