//! Replays a stroke log onto a binary canvas.
//!
//! Draw strokes stamp brush-width disks along their polyline; erase strokes
//! clear them. When a draw stroke, or a run of consecutive draw strokes,
//! ends within one brush width of where it started, the enclosed polygon is
//! filled with the even-odd rule. Pixel `(col, row)` is sampled at its
//! centre `(col + 0.5, row + 0.5)`.

use serde::{Deserialize, Serialize};

use odseg_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrokeMode {
    Draw,
    Erase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub mode: StrokeMode,
    /// Brush width in pixels.
    pub width: f64,
    pub points: Vec<[f64; 2]>,
}

impl Stroke {
    /// Fewer than two distinct points: nothing to draw.
    pub fn is_degenerate(&self) -> bool {
        match self.points.first() {
            None => true,
            Some(first) => self.points.iter().all(|p| p == first),
        }
    }
}

pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<bool>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![false; width * height],
        }
    }

    fn stamp(&mut self, c: [f64; 2], radius: f64, value: bool) {
        let r = radius.max(0.5);
        let x0 = ((c[0] - r - 0.5).floor().max(0.0)) as usize;
        let y0 = ((c[1] - r - 0.5).floor().max(0.0)) as usize;
        let x1 = ((c[0] + r).ceil().max(0.0) as usize).min(self.width);
        let y1 = ((c[1] + r).ceil().max(0.0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - c[0], y as f64 + 0.5 - c[1]);
                if dx * dx + dy * dy <= r * r {
                    self.pixels[y * self.width + x] = value;
                }
            }
        }
    }

    fn brush(&mut self, stroke: &Stroke, value: bool) {
        let r = stroke.width / 2.0;
        for seg in stroke.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let steps = (len / 0.5).ceil().max(1.0) as usize;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                self.stamp([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], r, value);
            }
        }
    }

    fn fill(&mut self, polygon: &[[f64; 2]]) {
        for y in 0..self.height {
            for x in 0..self.width {
                if point_in_polygon([x as f64 + 0.5, y as f64 + 0.5], polygon) {
                    self.pixels[y * self.width + x] = true;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    /// `[H, W, 1]` tensor of `{0, 1}`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as u8 as f32).collect();
        Tensor::from_vec(&[self.height, self.width, 1], data).expect("canvas size")
    }
}

/// Even-odd crossing test.
pub fn point_in_polygon(p: [f64; 2], polygon: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn closes(points: &[[f64; 2]], width: f64) -> bool {
    if points.len() < 3 {
        return false;
    }
    let (a, b) = (points[0], points[points.len() - 1]);
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() <= width
}

/// Replays `strokes` onto a `width x height` canvas.
pub fn render_mask(strokes: &[Stroke], width: usize, height: usize) -> Canvas {
    let mut canvas = Canvas::new(width, height);
    let mut chain: Vec<[f64; 2]> = Vec::new();
    let mut chain_strokes = 0;
    for s in strokes {
        if s.is_degenerate() {
            continue;
        }
        match s.mode {
            StrokeMode::Erase => {
                canvas.brush(s, false);
                chain.clear();
                chain_strokes = 0;
            }
            StrokeMode::Draw => {
                canvas.brush(s, true);
                if closes(&s.points, s.width) {
                    canvas.fill(&s.points);
                    chain.clear();
                    chain_strokes = 0;
                    continue;
                }
                chain.extend_from_slice(&s.points);
                chain_strokes += 1;
                if chain_strokes > 1 && closes(&chain, s.width) {
                    canvas.fill(&chain);
                    chain.clear();
                    chain_strokes = 0;
                }
            }
        }
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(cx: f64, cy: f64, r: f64, n: usize, from: f64, to: f64) -> Vec<[f64; 2]> {
        (0..=n)
            .map(|i| {
                let t = from + (to - from) * i as f64 / n as f64;
                [cx + r * t.cos(), cy + r * t.sin()]
            })
            .collect()
    }

    fn draw(points: Vec<[f64; 2]>, width: f64) -> Stroke {
        Stroke {
            mode: StrokeMode::Draw,
            width,
            points,
        }
    }

    #[test]
    fn closed_circle_fills() {
        let tau = std::f64::consts::TAU;
        let c = render_mask(&[draw(circle(32.0, 32.0, 15.0, 120, 0.0, tau), 1.0)], 64, 64);
        let expected = std::f64::consts::PI * 15.0 * 15.0;
        assert!((c.area() as f64 - expected).abs() / expected < 0.1);
        // open arc only stamps its outline
        let open = render_mask(&[draw(circle(32.0, 32.0, 15.0, 60, 0.0, 3.0), 2.0)], 64, 64);
        assert!(open.area() < 200);
    }

    #[test]
    fn two_halves_close_together() {
        let tau = std::f64::consts::TAU;
        let strokes = [
            draw(circle(20.0, 20.0, 8.0, 40, 0.0, tau / 2.0), 1.0),
            draw(circle(20.0, 20.0, 8.0, 40, tau / 2.0, tau), 1.0),
        ];
        let c = render_mask(&strokes, 40, 40);
        assert!(c.to_tensor().data()[20 * 40 + 20] == 1.0);
    }

    #[test]
    fn erase_clears_and_degenerate_is_ignored() {
        let line = draw(vec![[2.0, 5.0], [18.0, 5.0]], 3.0);
        let erase = Stroke {
            mode: StrokeMode::Erase,
            width: 8.0,
            ..line.clone()
        };
        assert!(!render_mask(std::slice::from_ref(&line), 20, 10).is_empty());
        assert!(render_mask(&[line.clone(), erase], 20, 10).is_empty());
        let dot = draw(vec![[3.0, 3.0], [3.0, 3.0]], 3.0);
        assert!(render_mask(&[dot], 20, 10).is_empty());
        assert!(render_mask(&[draw(vec![], 3.0)], 20, 10).is_empty());
    }

    #[test]
    fn polygon_test_square() {
        let sq = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]];
        assert!(point_in_polygon([2.0, 2.0], &sq));
        assert!(!point_in_polygon([5.0, 2.0], &sq));
    }
}
