//! Procedural street scenes and design renderings.
//!
//! Used for reference design assets, the mock image editor and tests. All
//! output is a pure function of the arguments.

use bikelane_core::domain::{BoundaryKind, DesignScenario, Side};
use bikelane_core::{Mask, Raster, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ROAD: Rgb = Rgb([92, 92, 96]);
pub const WHITE: Rgb = Rgb([240, 240, 240]);
pub const GREEN: Rgb = Rgb([46, 160, 67]);
const SKY: Rgb = Rgb([150, 190, 230]);
const SIDEWALK: Rgb = Rgb([180, 176, 168]);
const BOLLARD_RED: Rgb = Rgb([200, 30, 30]);
const ARMADILLO: Rgb = Rgb([20, 20, 20]);
const CAR: Rgb = Rgb([30, 60, 140]);

/// Share of the corridor width taken by a buffer zone.
const BUFFER_SHARE: f64 = 0.3;
const HORIZON: f64 = 0.55;

/// Horizontal extent `[left, right)` of the lane corridor on row `y`, if any.
pub fn corridor_span(w: u32, h: u32, y: u32) -> Option<(u32, u32)> {
    let top = (HORIZON * h as f64).round() as u32;
    if y < top || y >= h {
        return None;
    }
    let t = (y - top) as f64 / (h - top).max(1) as f64;
    let lerp = |a: f64, b: f64| ((a + (b - a) * t) * w as f64).round() as u32;
    let (l, r) = (lerp(0.56, 0.60), lerp(0.62, 0.92));
    (r > l).then_some((l, r.min(w)))
}

/// Pixels belonging to the bike-lane corridor.
pub fn lane_corridor(w: u32, h: u32) -> Mask {
    Mask::from_fn(w, h, |x, y| {
        corridor_span(w, h, y).is_some_and(|(l, r)| x >= l && x < r)
    })
}

fn line_px(w: u32) -> u32 {
    (w as f64 * 3.0 / 1024.0).round().max(1.0) as u32
}

/// A street with an existing marked lane on the right side of the road.
/// `variant` changes buildings and the existing lane surface.
pub fn street_scene(w: u32, h: u32, variant: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(variant);
    let mut img = Raster::filled(w, h, SKY);
    let horizon = (0.45 * h as f64) as u32;
    let road_top = (HORIZON * h as f64).round() as u32;

    let mut x = 0;
    while x < w {
        let bw = rng.gen_range(w / 16..=w / 6).max(1);
        let bh = rng.gen_range(h / 10..=h / 3);
        let shade: u8 = rng.gen_range(90..200);
        let color = Rgb([shade, shade.saturating_sub(20), shade.saturating_sub(35)]);
        for yy in horizon.saturating_sub(bh)..road_top {
            for xx in x..(x + bw).min(w) {
                img.set(xx, yy, color);
            }
        }
        x += bw;
    }
    let existing = if variant % 2 == 1 { GREEN } else { ROAD };
    let lw = line_px(w);
    for y in road_top..h {
        let span = corridor_span(w, h, y);
        for x in 0..w {
            let color = match span {
                Some((_, r)) if x >= r => SIDEWALK,
                Some((l, r)) if x < l + lw || (x + lw >= r && x < r) => WHITE,
                Some((l, _)) if x >= l => existing,
                _ => ROAD,
            };
            img.set(x, y, color);
        }
    }
    img
}

/// Boundary treatment painted on one side of the lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Line,
    Buffer,
    Bollards,
    Armadillos,
}

impl From<BoundaryKind> for Edge {
    fn from(kind: BoundaryKind) -> Self {
        match kind {
            BoundaryKind::DirectMovingLane | BoundaryKind::DirectParkedCars | BoundaryKind::DirectEdge => Edge::Line,
            BoundaryKind::PaintedBuffer => Edge::Buffer,
            BoundaryKind::BollardBuffer => Edge::Bollards,
            BoundaryKind::ArmadilloBuffer => Edge::Armadillos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignStyle {
    pub surface: Rgb,
    pub left: Edge,
    pub right: Edge,
    pub stripe_period: u32,
    /// Parked cars drawn along the outer right edge.
    pub parked_cars: bool,
}

impl DesignStyle {
    pub fn for_scenario(s: &DesignScenario) -> Self {
        Self {
            surface: ROAD,
            left: s.boundary(Side::Left).kind.into(),
            right: s.boundary(Side::Right).kind.into(),
            stripe_period: 12,
            parked_cars: s.boundary(Side::Right).kind == BoundaryKind::DirectParkedCars,
        }
    }
}

/// Repaints the corridor of `img` in place.
pub fn paint_design(img: &mut Raster, style: &DesignStyle) {
    let (w, h) = img.dimensions();
    let lw = line_px(w);
    let period = (style.stripe_period * w / 1024).max(2);
    for y in 0..h {
        let Some((l, r)) = corridor_span(w, h, y) else {
            continue;
        };
        let width = r - l;
        let buf = ((width as f64 * BUFFER_SHARE) as u32).max(1);
        let lane_l = if style.left == Edge::Line { l } else { l + buf };
        let lane_r = if style.right == Edge::Line { r } else { r - buf };
        for x in l..r {
            let in_buffer = x < lane_l || x >= lane_r;
            let on_line =
                x < l + lw || x + lw >= r || (x >= lane_l && x < lane_l + lw) || (x + lw >= lane_r && x < lane_r);
            let color = if on_line {
                WHITE
            } else if in_buffer {
                if ((x + y) / period).is_multiple_of(2) {
                    WHITE
                } else {
                    ROAD
                }
            } else {
                style.surface
            };
            img.set(x, y, color);
        }
        for (edge, lo, hi) in [(style.left, l, lane_l), (style.right, lane_r, r)] {
            paint_separator(img, edge, lo, hi, y, period);
        }
        if style.parked_cars && (y / (period * 8)) % 3 != 2 {
            for x in r..(r + w / 16).min(w) {
                img.set(x, y, CAR);
            }
        }
    }
}

fn paint_separator(img: &mut Raster, edge: Edge, lo: u32, hi: u32, y: u32, period: u32) {
    let marker = match edge {
        Edge::Bollards => BOLLARD_RED,
        Edge::Armadillos => ARMADILLO,
        Edge::Line | Edge::Buffer => return,
    };
    let span = period * 4;
    if !(y / span).is_multiple_of(2) || hi <= lo + 2 {
        return;
    }
    let mid = (lo + hi) / 2;
    let half = ((hi - lo) / 5).max(1);
    for x in mid.saturating_sub(half)..(mid + half).min(hi) {
        let band = (y / period.max(1)).is_multiple_of(2);
        img.set(x, y, if band { marker } else { WHITE });
    }
}

/// The shipped reference rendering for a scenario.
pub fn reference_design(scenario: &DesignScenario, size: u32) -> Raster {
    let mut img = street_scene(size, size, 0);
    paint_design(&mut img, &DesignStyle::for_scenario(scenario));
    img
}
