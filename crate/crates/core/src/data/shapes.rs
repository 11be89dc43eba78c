//! Shape classes and their analytic inside/outside predicates.
//!
//! Every class is a hard-edged region test evaluated at pixel centers, so a
//! rendered foreground and its ground-truth mask agree exactly by
//! construction. Coordinates handed to [`ShapeClass::contains`] are offsets
//! from the shape center in pixels; `r` is the shape half-size in pixels.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    Diamond,
    Plus,
    Crescent,
    Tee,
}

pub const ALL_SHAPES: [ShapeClass; 10] = [
    ShapeClass::Circle,
    ShapeClass::Square,
    ShapeClass::Triangle,
    ShapeClass::Cross,
    ShapeClass::Ring,
    ShapeClass::Star,
    ShapeClass::Diamond,
    ShapeClass::Plus,
    ShapeClass::Crescent,
    ShapeClass::Tee,
];

impl ShapeClass {
    /// Stable numeric label used in tensors and archives.
    pub fn id(self) -> u32 {
        ALL_SHAPES.iter().position(|&s| s == self).unwrap() as u32
    }

    pub fn from_id(id: u32) -> Result<ShapeClass> {
        ALL_SHAPES
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown shape class id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::Star => "star",
            ShapeClass::Diamond => "diamond",
            ShapeClass::Plus => "plus",
            ShapeClass::Crescent => "crescent",
            ShapeClass::Tee => "tee",
        }
    }

    pub fn from_name(name: &str) -> Result<ShapeClass> {
        ALL_SHAPES
            .iter()
            .copied()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::config(format!("unknown shape class `{name}`")))
    }

    /// True when the point `(dx, dy)` (offset from the shape center, pixels)
    /// lies inside a shape of half-size `r`.
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        let (x, y) = (dx, dy);
        match self {
            ShapeClass::Circle => x * x + y * y <= r * r,
            ShapeClass::Square => x.abs().max(y.abs()) <= 0.85 * r,
            // Apex at the top (y = -r), base at the bottom (y = +r).
            ShapeClass::Triangle => y >= -r && y <= r && x.abs() <= (y + r) * 0.5,
            // Diagonal X: two bars along y = x and y = -x.
            ShapeClass::Cross => {
                (x.abs() - y.abs()).abs() <= 0.4 * r && x.abs().max(y.abs()) <= 0.95 * r
            }
            ShapeClass::Ring => {
                let d2 = x * x + y * y;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeClass::Star => {
                let rho = (x * x + y * y).sqrt();
                let theta = y.atan2(x);
                // Five-lobed radius modulation between 0.35r and r.
                let lobe = 0.5 * ((5.0 * theta).cos() + 1.0);
                rho <= r * (0.35 + 0.65 * lobe)
            }
            ShapeClass::Diamond => x.abs() + y.abs() <= r,
            ShapeClass::Plus => {
                (x.abs() <= 0.35 * r && y.abs() <= r) || (y.abs() <= 0.35 * r && x.abs() <= r)
            }
            ShapeClass::Crescent => {
                let inside_outer = x * x + y * y <= r * r;
                let bx = x - 0.45 * r;
                let inside_bite = bx * bx + y * y <= (0.8 * r) * (0.8 * r);
                inside_outer && !inside_bite
            }
            ShapeClass::Tee => {
                let bar = y >= -r && y <= -0.4 * r && x.abs() <= r;
                let stem = x.abs() <= 0.3 * r && y >= -r && y <= r;
                bar || stem
            }
        }
    }
}
