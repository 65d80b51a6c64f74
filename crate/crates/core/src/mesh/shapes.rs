use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Point;

/// Domains inside the unit square, used as cell masks for staircase meshes and as the
/// containment test for blob centres.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainShape {
    Square,
    LShape,
    Plus,
    SquareWithHole,
    Circle,
    XShape,
}

impl DomainShape {
    pub const ALL: [DomainShape; 6] = [
        DomainShape::Square,
        DomainShape::LShape,
        DomainShape::Plus,
        DomainShape::SquareWithHole,
        DomainShape::Circle,
        DomainShape::XShape,
    ];

    pub fn contains(self, p: Point) -> bool {
        let [x, y] = p;
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return false;
        }
        match self {
            DomainShape::Square => true,
            DomainShape::LShape => !(x > 0.5 && y > 0.5),
            DomainShape::Plus => (x - 0.5).abs() <= 0.2 || (y - 0.5).abs() <= 0.2,
            DomainShape::SquareWithHole => {
                let inside = |t: f64| t > 1.0 / 3.0 && t < 2.0 / 3.0;
                !(inside(x) && inside(y))
            }
            DomainShape::Circle => (x - 0.5).powi(2) + (y - 0.5).powi(2) <= 0.25,
            DomainShape::XShape => (x - y).abs() <= 0.25 || (x + y - 1.0).abs() <= 0.25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainShape::Square => "square",
            DomainShape::LShape => "l_shape",
            DomainShape::Plus => "plus",
            DomainShape::SquareWithHole => "square_with_hole",
            DomainShape::Circle => "circle",
            DomainShape::XShape => "x_shape",
        }
    }
}

impl fmt::Display for DomainShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DomainShape::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown shape '{s}'"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shaped_grid;

    #[test]
    fn every_shape_meshes_connected() {
        for shape in DomainShape::ALL {
            let mesh = shaped_grid(shape, 12, 12).unwrap();
            assert!(mesh.triangles().len() <= 288);
            assert_eq!(shape.name().parse::<DomainShape>().unwrap(), shape);
        }
        assert!("triangle".parse::<DomainShape>().is_err());
    }
}
