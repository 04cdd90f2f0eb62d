//! Top-down trajectory plots of one frame record.
//!
//! World to pixel: x (forward) points up, y (left) points left, the ego
//! origin sits at the image centre and `extent` metres reach the border:
//!
//! ```text
//! scale = (size / 2) / extent
//! col   = size / 2 - scale * y
//! row   = size / 2 - scale * x
//! ```
//!
//! Colours: ground truth green, prediction red, ensemble members grey,
//! obstacle region blue, on white.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use offemma_core::kinematics::Trajectory;
use offemma_pipeline::FrameRecord;
use thiserror::Error;

pub const GT_COLOR: [u8; 3] = [0, 160, 0];
pub const PREDICTED_COLOR: [u8; 3] = [220, 0, 0];
pub const ENSEMBLE_COLOR: [u8; 3] = [160, 160, 160];
pub const OBSTACLE_COLOR: [u8; 3] = [0, 0, 220];
const BACKGROUND: [u8; 3] = [255, 255, 255];

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("frame {0} not found in the report")]
    FrameNotFound(String),
    #[error("extent must be positive, got {0}")]
    BadExtent(f64),
    #[error("image size must be at least 2 pixels")]
    BadSize,
    #[error("no layer selected")]
    NoLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layers {
    pub gt: bool,
    pub predicted: bool,
    pub ensemble: bool,
    pub obstacle: bool,
}

impl Layers {
    fn any(&self) -> bool {
        self.gt || self.predicted || self.ensemble || self.obstacle
    }
}

/// Pixel points, colour, and whether the outline closes.
type Shape = (Vec<(f64, f64)>, [u8; 3], bool);

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub record: FrameRecord,
    /// Metres from the centre to the image border.
    pub extent: f64,
    pub size: u32,
    pub layers: Layers,
}

impl PlotSpec {
    pub fn new(record: FrameRecord, extent: f64, size: u32, layers: Layers) -> Result<Self, PlotError> {
        if !(extent.is_finite() && extent > 0.0) {
            return Err(PlotError::BadExtent(extent));
        }
        if size < 2 {
            return Err(PlotError::BadSize);
        }
        if !layers.any() {
            return Err(PlotError::NoLayers);
        }
        Ok(Self {
            record,
            extent,
            size,
            layers,
        })
    }

    /// Ego-frame metres to (col, row) pixel coordinates.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.size as f64 / 2.0;
        let scale = half / self.extent;
        (half - scale * y, half - scale * x)
    }

    /// Polylines in drawing order.
    fn shapes(&self) -> Vec<Shape> {
        let path = |t: &Trajectory| {
            std::iter::once((0.0, 0.0))
                .chain(t.waypoints().iter().map(|w| (w.x, w.y)))
                .map(|(x, y)| self.to_pixel(x, y))
                .collect::<Vec<_>>()
        };
        let r = &self.record;
        let mut out = Vec::new();
        if self.layers.obstacle {
            if let Some(o) = &r.obstacle {
                out.push((o.region.iter().map(|&(x, y)| self.to_pixel(x, y)).collect(), OBSTACLE_COLOR, true));
            }
        }
        if self.layers.ensemble {
            out.extend(r.members.iter().map(|m| (path(m), ENSEMBLE_COLOR, false)));
        }
        if self.layers.gt {
            out.push((path(&r.gt), GT_COLOR, false));
        }
        if self.layers.predicted {
            if let Some(p) = &r.predicted {
                out.push((path(&p.trajectory), PREDICTED_COLOR, false));
            }
        }
        out
    }
}

pub fn find_record(records: Vec<FrameRecord>, frame_id: &str) -> Result<FrameRecord, PlotError> {
    records
        .into_iter()
        .find(|r| r.frame_id == frame_id)
        .ok_or_else(|| PlotError::FrameNotFound(frame_id.to_string()))
}

fn hex([r, g, b]: [u8; 3]) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

pub fn render_svg(spec: &PlotSpec) -> String {
    let s = spec.size;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n\
         <title>{}</title>\n<rect width=\"{s}\" height=\"{s}\" fill=\"{}\"/>\n",
        spec.record.frame_id,
        hex(BACKGROUND)
    );
    for (points, color, closed) in spec.shapes() {
        let pts: Vec<String> = points.iter().map(|(c, r)| format!("{c:.3},{r:.3}")).collect();
        let tag = if closed { "polygon" } else { "polyline" };
        let _ = writeln!(
            out,
            "<{tag} points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
            pts.join(" "),
            hex(color)
        );
    }
    let (c, r) = spec.to_pixel(0.0, 0.0);
    let _ = writeln!(out, "<circle cx=\"{c:.3}\" cy=\"{r:.3}\" r=\"3\" fill=\"black\"/>");
    out.push_str("</svg>\n");
    out
}

fn put(img: &mut RgbImage, col: i64, row: i64, color: [u8; 3]) {
    if col >= 0 && row >= 0 && (col as u32) < img.width() && (row as u32) < img.height() {
        img.put_pixel(col as u32, row as u32, Rgb(color));
    }
}

/// Samples the segment densely enough to leave no gaps.
fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let f = i as f64 / steps as f64;
        let c = a.0 + (b.0 - a.0) * f;
        let r = a.1 + (b.1 - a.1) * f;
        put(img, c.round() as i64, r.round() as i64, color);
    }
}

pub fn render_png(spec: &PlotSpec) -> RgbImage {
    let mut img = RgbImage::from_pixel(spec.size, spec.size, Rgb(BACKGROUND));
    for (points, color, closed) in spec.shapes() {
        for w in points.windows(2) {
            draw_segment(&mut img, w[0], w[1], color);
        }
        if closed && points.len() > 2 {
            draw_segment(&mut img, points[points.len() - 1], points[0], color);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use offemma_core::consistency::{aggregate, TrajectoryEnsemble};

    const ALL: Layers = Layers {
        gt: true,
        predicted: true,
        ensemble: true,
        obstacle: true,
    };

    fn record() -> FrameRecord {
        let gt = Trajectory::from_points(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (4.0, 0.0), (5.0, 0.0)], 1.0).unwrap();
        let ens = TrajectoryEnsemble::new(vec![gt.clone()]).unwrap();
        FrameRecord {
            scene_id: "s".into(),
            frame_id: "f".into(),
            timestamp: 0.0,
            gt: gt.clone(),
            predicted: Some(aggregate(&ens, 1e-6).unwrap()),
            members: vec![gt],
            ensemble_size: 1,
            errors: None,
            l2_all_steps: None,
            failed: false,
            obstacle: None,
            obstacle_success: None,
            audit: vec![],
        }
    }

    #[test]
    fn transform_matches_hand_computation() {
        let spec = PlotSpec::new(record(), 10.0, 400, ALL).unwrap();
        // 20 px per metre around (200, 200).
        assert_eq!(spec.to_pixel(0.0, 0.0), (200.0, 200.0));
        assert_eq!(spec.to_pixel(5.0, 0.0), (200.0, 100.0));
        assert_eq!(spec.to_pixel(0.0, 2.0), (160.0, 200.0));
        assert_eq!(spec.to_pixel(-1.0, -3.0), (260.0, 220.0));
    }

    #[test]
    fn predicted_endpoint_pixels() {
        let only_pred = Layers {
            gt: false,
            predicted: true,
            ensemble: false,
            obstacle: false,
        };
        let img = render_png(&PlotSpec::new(record(), 10.0, 400, only_pred).unwrap());
        assert_eq!(img.get_pixel(200, 200).0, PREDICTED_COLOR);
        assert_eq!(img.get_pixel(200, 100).0, PREDICTED_COLOR);
        assert_eq!(img.get_pixel(200, 99).0, BACKGROUND);
        let svg = render_svg(&PlotSpec::new(record(), 10.0, 400, only_pred).unwrap());
        assert!(svg.contains("points=\"200.000,200.000 200.000,180.000"));
        assert!(svg.contains("200.000,100.000\" fill=\"none\" stroke=\"#dc0000\""));
    }

    #[test]
    fn gt_only_has_no_prediction_pixels() {
        let gt_only = Layers {
            gt: true,
            predicted: false,
            ensemble: false,
            obstacle: false,
        };
        let img = render_png(&PlotSpec::new(record(), 10.0, 400, gt_only).unwrap());
        assert!(img.pixels().all(|p| p.0 != PREDICTED_COLOR));
        assert!(img.pixels().any(|p| p.0 == GT_COLOR));
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(PlotSpec::new(record(), 0.0, 400, ALL).unwrap_err(), PlotError::BadExtent(0.0));
        let none = Layers {
            gt: false,
            predicted: false,
            ensemble: false,
            obstacle: false,
        };
        assert_eq!(PlotSpec::new(record(), 1.0, 400, none).unwrap_err(), PlotError::NoLayers);
        assert_eq!(find_record(vec![record()], "zz").unwrap_err(), PlotError::FrameNotFound("zz".into()));
    }

    #[test]
    fn same_input_same_bytes() {
        let spec = PlotSpec::new(record(), 8.0, 120, ALL).unwrap();
        assert_eq!(render_svg(&spec), render_svg(&spec));
        assert_eq!(render_png(&spec), render_png(&spec));
    }
}
