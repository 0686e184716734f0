//! Network layouts: gridded APs, RIS panels and random users.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("AP count {0} is not a perfect square")]
    NonSquareApCount(usize),
    #[error("{requested} central RIS panels requested, only {available} slots available")]
    NotEnoughCentralSlots { requested: usize, available: usize },
    #[error("at least one {0} is required")]
    Empty(&'static str),
}

/// A point in meters. `z` is height above ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Position { x, y, z }
    }
}

/// Euclidean distance, no wrap-around.
pub fn distance_3d(a: Position, b: Position) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Where RIS panels go relative to the AP grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeploymentStrategy {
    /// Evenly spaced along the perimeter of the coverage square.
    Edge,
    /// On the interior corners shared by four AP cells.
    Central,
    /// Half on the perimeter (rounded up), half in the interior.
    Hybrid,
}

impl DeploymentStrategy {
    pub const ALL: [DeploymentStrategy; 3] = [Self::Edge, Self::Central, Self::Hybrid];
}

impl FromStr for DeploymentStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "edge" => Ok(Self::Edge),
            "central" => Ok(Self::Central),
            "hybrid" => Ok(Self::Hybrid),
            _ => Err(format!("unknown strategy `{s}` (expected edge|central|hybrid)")),
        }
    }
}

impl fmt::Display for DeploymentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Edge => "edge",
            Self::Central => "central",
            Self::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub coverage_side: f64,
    pub ap_positions: Vec<Position>,
    pub ris_positions: Vec<Position>,
    pub user_positions: Vec<Position>,
}

/// Side length of the AP grid, if `count` is a perfect square.
pub fn grid_side(count: usize) -> Option<usize> {
    let side = (count as f64).sqrt().round() as usize;
    (side * side == count).then_some(side)
}

/// Number of interior grid corners available to centrally placed panels.
pub fn central_slots(ap_count: usize) -> usize {
    grid_side(ap_count).map_or(0, |s| s.saturating_sub(1).pow(2))
}

/// `sqrt(U) x sqrt(U)` grid of APs at the centers of equal square cells.
pub fn grid_aps(count: usize, side: f64, height: f64) -> Result<Vec<Position>, GeometryError> {
    let n = match grid_side(count) {
        Some(n) if n > 0 => n,
        _ => return Err(GeometryError::NonSquareApCount(count)),
    };
    let spacing = side / n as f64;
    let mut out = Vec::with_capacity(count);
    for row in 0..n {
        for col in 0..n {
            out.push(Position::new(
                spacing * (col as f64 + 0.5),
                spacing * (row as f64 + 0.5),
                height,
            ));
        }
    }
    Ok(out)
}

/// `count` points equally spaced along the perimeter, counter-clockwise
/// from the midpoint of the south edge.
fn edge_points(count: usize, side: f64, height: f64) -> Vec<Position> {
    let perimeter = 4.0 * side;
    (0..count)
        .map(|k| {
            let s = (side / 2.0 + perimeter * k as f64 / count as f64) % perimeter;
            let (x, y) = if s < side {
                (s, 0.0)
            } else if s < 2.0 * side {
                (side, s - side)
            } else if s < 3.0 * side {
                (3.0 * side - s, side)
            } else {
                (0.0, 4.0 * side - s)
            };
            Position::new(x.clamp(0.0, side), y.clamp(0.0, side), height)
        })
        .collect()
}

/// Interior corners of the AP grid, row-major from the south-west.
fn central_points(count: usize, grid: usize, side: f64, height: f64) -> Result<Vec<Position>, GeometryError> {
    let inner = grid.saturating_sub(1);
    if count > inner * inner {
        return Err(GeometryError::NotEnoughCentralSlots {
            requested: count,
            available: inner * inner,
        });
    }
    let spacing = side / grid as f64;
    Ok((0..count)
        .map(|k| {
            let (row, col) = (k / inner, k % inner);
            Position::new(spacing * (col + 1) as f64, spacing * (row + 1) as f64, height)
        })
        .collect())
}

pub fn place_ris(
    strategy: DeploymentStrategy,
    count: usize,
    ap_positions: &[Position],
    side: f64,
    height: f64,
) -> Result<Vec<Position>, GeometryError> {
    if count == 0 {
        return Err(GeometryError::Empty("RIS panel"));
    }
    let grid = grid_side(ap_positions.len()).ok_or(GeometryError::NonSquareApCount(ap_positions.len()))?;
    match strategy {
        DeploymentStrategy::Edge => Ok(edge_points(count, side, height)),
        DeploymentStrategy::Central => central_points(count, grid, side, height),
        DeploymentStrategy::Hybrid => {
            let on_edge = count.div_ceil(2);
            let mut out = edge_points(on_edge, side, height);
            out.extend(central_points(count - on_edge, grid, side, height)?);
            Ok(out)
        }
    }
}

/// Draws `count` users uniformly over the coverage square.
pub fn place_users<R: Rng + ?Sized>(
    count: usize,
    side: f64,
    height: f64,
    rng: &mut R,
) -> Result<Vec<Position>, GeometryError> {
    if count == 0 {
        return Err(GeometryError::Empty("user"));
    }
    Ok((0..count)
        .map(|_| {
            let x = rng.random::<f64>() * side;
            let y = rng.random::<f64>() * side;
            Position::new(x, y, height)
        })
        .collect())
}

impl NetworkLayout {
    /// Writes `kind,index,x_m,y_m,z_m` rows for every node.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "kind,index,x_m,y_m,z_m")?;
        for (kind, list) in [
            ("ap", &self.ap_positions),
            ("ris", &self.ris_positions),
            ("user", &self.user_positions),
        ] {
            for (i, p) in list.iter().enumerate() {
                writeln!(out, "{kind},{i},{:.16e},{:.16e},{:.16e}", p.x, p.y, p.z)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn xy(p: &Position) -> (f64, f64) {
        (p.x, p.y)
    }

    #[test]
    fn ap_grid() {
        let aps = grid_aps(4, 100.0, 25.0).unwrap();
        let pts: Vec<_> = aps.iter().map(xy).collect();
        assert_eq!(pts, vec![(25.0, 25.0), (75.0, 25.0), (25.0, 75.0), (75.0, 75.0)]);
        assert!(aps.iter().all(|p| p.z == 25.0));
        assert_eq!(xy(&grid_aps(1, 100.0, 0.0).unwrap()[0]), (50.0, 50.0));
        assert_eq!(grid_aps(5, 100.0, 0.0), Err(GeometryError::NonSquareApCount(5)));
        assert!(grid_aps(0, 100.0, 0.0).is_err());
    }

    #[test]
    fn edge_midpoints() {
        let aps = grid_aps(4, 100.0, 25.0).unwrap();
        let ris = place_ris(DeploymentStrategy::Edge, 4, &aps, 100.0, 10.0).unwrap();
        let pts: Vec<_> = ris.iter().map(xy).collect();
        assert_eq!(pts, vec![(50.0, 0.0), (100.0, 50.0), (50.0, 100.0), (0.0, 50.0)]);
    }

    #[test]
    fn central_and_hybrid() {
        let aps = grid_aps(4, 100.0, 25.0).unwrap();
        let ris = place_ris(DeploymentStrategy::Central, 1, &aps, 100.0, 10.0).unwrap();
        assert_eq!(xy(&ris[0]), (50.0, 50.0));
        assert!(place_ris(DeploymentStrategy::Central, 2, &aps, 100.0, 10.0).is_err());

        let ris = place_ris(DeploymentStrategy::Hybrid, 2, &aps, 100.0, 10.0).unwrap();
        assert_eq!(xy(&ris[0]), (50.0, 0.0));
        assert_eq!(xy(&ris[1]), (50.0, 50.0));

        // odd counts give the extra panel to the perimeter
        let aps = grid_aps(16, 100.0, 25.0).unwrap();
        let ris = place_ris(DeploymentStrategy::Hybrid, 5, &aps, 100.0, 10.0).unwrap();
        let on_edge = ris
            .iter()
            .filter(|p| p.x == 0.0 || p.y == 0.0 || p.x == 100.0 || p.y == 100.0)
            .count();
        assert_eq!(on_edge, 3);
    }

    #[test]
    fn users_deterministic_and_uniform() {
        let a = place_users(50, 100.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = place_users(50, 100.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);

        let many = place_users(1000, 100.0, 1.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mean_x = many.iter().map(|p| p.x).sum::<f64>() / 1000.0;
        assert!((mean_x - 50.0).abs() <= 3.0, "mean x {mean_x}");

        assert_eq!(
            place_users(0, 100.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(GeometryError::Empty("user"))
        );
    }

    #[test]
    fn distances() {
        let o = Position::new(0.0, 0.0, 0.0);
        assert_eq!(distance_3d(o, Position::new(3.0, 4.0, 0.0)), 5.0);
        assert_eq!(distance_3d(o, o), 0.0);
        assert_eq!(distance_3d(o, Position::new(1.0, 2.0, 2.0)), 3.0);
    }

    #[test]
    fn layout_csv_header_and_rows() {
        let layout = NetworkLayout {
            coverage_side: 100.0,
            ap_positions: grid_aps(4, 100.0, 25.0).unwrap(),
            ris_positions: vec![Position::new(50.0, 0.0, 10.0)],
            user_positions: vec![Position::new(1.0, 2.0, 1.0)],
        };
        let mut buf = Vec::new();
        layout.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "kind,index,x_m,y_m,z_m");
        assert_eq!(lines.len(), 1 + 4 + 1 + 1);
        assert!(lines[5].starts_with("ris,0,"));
        let cols: Vec<f64> = lines[6].split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!(cols, vec![1.0, 2.0, 1.0]);
    }

    fn point() -> impl Strategy<Value = Position> {
        (-1e3f64..1e3, -1e3f64..1e3, 0f64..1e3).prop_map(|(x, y, z)| Position::new(x, y, z))
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in point(), b in point(), c in point()) {
            let ab = distance_3d(a, b);
            prop_assert!(distance_3d(a, c) <= ab + distance_3d(b, c) + 1e-9);
            prop_assert_eq!(ab, distance_3d(b, a));
        }

        #[test]
        fn placements_stay_in_bounds(grid in 1usize..7, r in 1usize..40, j in 1usize..30,
                                     side in 10f64..2000.0, seed in any::<u64>()) {
            let u = grid * grid;
            let aps = grid_aps(u, side, 25.0).unwrap();
            let in_box = |p: &Position| p.x >= 0.0 && p.x <= side && p.y >= 0.0 && p.y <= side;
            prop_assert!(aps.iter().all(in_box));
            for (i, a) in aps.iter().enumerate() {
                for b in &aps[i + 1..] {
                    prop_assert!(distance_3d(*a, *b) > 0.0);
                }
            }
            let users = place_users(j, side, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(users.iter().all(|p| in_box(p) && p.z == 1.0));

            let edge = place_ris(DeploymentStrategy::Edge, r, &aps, side, 10.0).unwrap();
            let tol = 1e-9 * side;
            let on_perimeter = |p: &Position| p.x.abs() <= tol || p.y.abs() <= tol
                || (p.x - side).abs() <= tol || (p.y - side).abs() <= tol;
            prop_assert!(edge.iter().all(|p| in_box(p) && on_perimeter(p) && p.z == 10.0));

            let slots = central_slots(u);
            match place_ris(DeploymentStrategy::Central, r, &aps, side, 10.0) {
                Ok(central) => {
                    prop_assert!(r <= slots);
                    prop_assert!(central.iter().all(|p| p.x > 0.0 && p.x < side && p.y > 0.0 && p.y < side));
                }
                Err(_) => prop_assert!(r > slots),
            }
            if let Ok(h) = place_ris(DeploymentStrategy::Hybrid, r, &aps, side, 10.0) {
                prop_assert_eq!(h.len(), r);
                prop_assert!(h.iter().all(in_box));
            }
        }
    }
}
