use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mask;

/// Shape family of a scene's target object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ShapeFamily {
    Ellipse = 0,
    Rectangle = 1,
    Triangle = 2,
    FourPointStar = 3,
}

impl ShapeFamily {
    pub const COUNT: usize = 4;
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Rectangle,
        ShapeFamily::Triangle,
        ShapeFamily::FourPointStar,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::FourPointStar => "star",
        }
    }
}

#[derive(Clone, Debug)]
enum Outline {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

/// A parametric contour placed on the canvas.
#[derive(Clone, Debug)]
pub struct Shape {
    pub family: ShapeFamily,
    pub center: (f64, f64),
    /// Circumradius in pixels.
    pub radius: f64,
    outline: Outline,
}

impl Shape {
    /// Draws the free parameters of a `family` contour (aspect, rotation,
    /// vertex jitter) for a given centre and circumradius.
    pub fn random<R: Rng + ?Sized>(family: ShapeFamily, center: (f64, f64), radius: f64, rng: &mut R) -> Self {
        let (cx, cy) = center;
        let rot = rng.random_range(0.0..TAU);
        let outline = match family {
            ShapeFamily::Ellipse => {
                let aspect = rng.random_range(0.45..0.95);
                Outline::Ellipse {
                    cx,
                    cy,
                    a: radius,
                    b: radius * aspect,
                    cos: rot.cos(),
                    sin: rot.sin(),
                }
            }
            ShapeFamily::Rectangle => {
                let aspect: f64 = rng.random_range(0.45..1.0);
                let half_w = radius / (1.0 + aspect * aspect).sqrt();
                let half_h = half_w * aspect;
                let corners = [(half_w, half_h), (-half_w, half_h), (-half_w, -half_h), (half_w, -half_h)];
                Outline::Polygon(corners.iter().map(|&(u, v)| place(u, v, cx, cy, rot)).collect())
            }
            ShapeFamily::Triangle => {
                let jitter = 15f64.to_radians();
                let verts = (0..3)
                    .map(|k| {
                        let ang = FRAC_PI_2 + k as f64 * TAU / 3.0 + rng.random_range(-jitter..jitter);
                        place(radius * ang.cos(), radius * ang.sin(), cx, cy, rot)
                    })
                    .collect();
                Outline::Polygon(verts)
            }
            ShapeFamily::FourPointStar => {
                let inner = radius * rng.random_range(0.35..0.5);
                let verts = (0..8)
                    .map(|k| {
                        let ang = k as f64 * PI / 4.0;
                        let r = if k % 2 == 0 { radius } else { inner };
                        place(r * ang.cos(), r * ang.sin(), cx, cy, rot)
                    })
                    .collect();
                Outline::Polygon(verts)
            }
        };
        Self {
            family,
            center,
            radius,
            outline,
        }
    }

    /// Whether the point `(x, y)` lies inside the contour.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match &self.outline {
            Outline::Ellipse { cx, cy, a, b, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Outline::Polygon(verts) => point_in_polygon(verts, x, y),
        }
    }

    /// Rasterizes onto a `height × width` grid: a pixel is set iff its
    /// centre lies inside the contour.
    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let mut mask = Mask::empty(height, width);
        self.paint(&mut mask);
        mask
    }

    /// Sets every pixel whose centre is inside the contour.
    pub fn paint(&self, mask: &mut Mask) {
        let r = self.radius + 1.0;
        let (cx, cy) = self.center;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil().max(0.0) as usize).min(mask.height());
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil().max(0.0) as usize).min(mask.width());
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask.set(y, x, true);
                }
            }
        }
    }
}

fn place(u: f64, v: f64, cx: f64, cy: f64, rot: f64) -> (f64, f64) {
    let (s, c) = rot.sin_cos();
    (cx + u * c - v * s, cy + u * s + v * c)
}

/// Even-odd rule; handles concave outlines.
fn point_in_polygon(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}
