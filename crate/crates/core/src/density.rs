//! Frame-wise crowd density maps: each annotated agent contributes a
//! unit-mass isotropic Gaussian placed on a fixed `H x W` grid that covers
//! the scene.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{Bounds, Point, SceneRecording};
use crate::error::{Error, Result};

pub const DEFAULT_MAP_SIZE: (usize, usize) = (80, 80);
pub const DEFAULT_SIGMA_MAP: f64 = 2.0;
pub const DEFAULT_MARGIN: f64 = 1.0;
/// Kernels are evaluated within this many standard deviations per axis.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub world_min: Point,
    pub world_max: Point,
    /// (H, W) in cells.
    pub map_size: (usize, usize),
    pub margin: f64,
}

/// Continuous map coordinates; cell `(r, c)` has its center at `(r, c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapCoord {
    pub row: f64,
    pub col: f64,
    pub in_bounds: bool,
}

impl SceneGeometry {
    pub fn new(world_min: Point, world_max: Point, map_size: (usize, usize), margin: f64) -> Result<Self> {
        let g = Self {
            world_min,
            world_max,
            map_size,
            margin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Extent of `bounds` grown by `margin` on every side.
    pub fn from_bounds(bounds: &Bounds, map_size: (usize, usize), margin: f64) -> Result<Self> {
        Self::new(
            [bounds.min[0] - margin, bounds.min[1] - margin],
            [bounds.max[0] + margin, bounds.max[1] + margin],
            map_size,
            margin,
        )
    }

    pub fn for_recording(rec: &SceneRecording, map_size: (usize, usize), margin: f64) -> Result<Self> {
        Self::from_bounds(&rec.bounds, map_size, margin)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.map_size;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("map size must be at least 8x8, got {h}x{w}")));
        }
        for d in 0..2 {
            let extent = self.world_max[d] - self.world_min[d];
            if !(extent > 0.0) || !extent.is_finite() {
                return Err(Error::Config(format!(
                    "degenerate scene geometry: axis {d} spans [{}, {}]",
                    self.world_min[d], self.world_max[d]
                )));
            }
        }
        Ok(())
    }

    pub fn world_to_map(&self, p: Point) -> MapCoord {
        let (h, w) = self.map_size;
        let col = (p[0] - self.world_min[0]) / (self.world_max[0] - self.world_min[0]) * (w - 1) as f64;
        let row = (p[1] - self.world_min[1]) / (self.world_max[1] - self.world_min[1]) * (h - 1) as f64;
        let in_bounds = (0.0..=(h - 1) as f64).contains(&row) && (0.0..=(w - 1) as f64).contains(&col);
        MapCoord { row, col, in_bounds }
    }
}

/// One rendered `H x W` frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DensityFrame {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

pub fn gaussian_kernel(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
}

/// Renders one frame: the sum of a normalized Gaussian of width `sigma_map`
/// cells centered at every in-bounds agent. Out-of-bounds agents are skipped.
pub fn render_density_frame(positions: &[Point], geometry: &SceneGeometry, sigma_map: f64) -> Result<DensityFrame> {
    if !(sigma_map > 0.0) {
        return Err(Error::Config(format!("density kernel width must be positive, got {sigma_map}")));
    }
    let (h, w) = geometry.map_size;
    let mut frame = DensityFrame::zeros(h, w);
    let radius = TRUNCATION_SIGMAS * sigma_map;
    for p in positions {
        let mc = geometry.world_to_map(*p);
        if !mc.in_bounds {
            continue;
        }
        let r_lo = (mc.row - radius).ceil().max(0.0) as usize;
        let r_hi = ((mc.row + radius).floor() as usize).min(h - 1);
        let c_lo = (mc.col - radius).ceil().max(0.0) as usize;
        let c_hi = ((mc.col + radius).floor() as usize).min(w - 1);
        for r in r_lo..=r_hi {
            let dr = r as f64 - mc.row;
            let row = &mut frame.data[r * w..(r + 1) * w];
            for (c, cell) in row.iter_mut().enumerate().take(c_hi + 1).skip(c_lo) {
                let dc = c as f64 - mc.col;
                *cell += gaussian_kernel(dr * dr + dc * dc, sigma_map);
            }
        }
    }
    Ok(frame)
}

/// Density maps over a window of frames, shape `[tau, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMapSequence {
    pub frames: Vec<DensityFrame>,
    pub geometry: SceneGeometry,
    pub frame_ids: Vec<i64>,
}

impl DensityMapSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.geometry.map_size;
        let data: Vec<f32> = self.frames.iter().flat_map(|f| f.data.iter().map(|v| *v as f32)).collect();
        Ok(Tensor::from_vec(data, (self.frames.len(), 1, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Renders the given frames of a recording, including every agent annotated
/// at each frame. Frames without annotations render as zeros.
pub fn render_sequence(
    rec: &SceneRecording,
    frame_ids: &[i64],
    geometry: &SceneGeometry,
    sigma_map: f64,
) -> Result<DensityMapSequence> {
    let per_frame: Vec<Vec<Point>> = frame_ids.iter().map(|f| rec.positions_at(*f)).collect();
    render_positions(&per_frame, frame_ids, geometry, sigma_map)
}

/// Like [`render_sequence`] but from explicit per-frame position lists.
pub fn render_positions(
    per_frame: &[Vec<Point>],
    frame_ids: &[i64],
    geometry: &SceneGeometry,
    sigma_map: f64,
) -> Result<DensityMapSequence> {
    if per_frame.len() != frame_ids.len() {
        return Err(Error::Contract(format!(
            "{} position lists for {} frame ids",
            per_frame.len(),
            frame_ids.len()
        )));
    }
    let frames = per_frame
        .iter()
        .map(|ps| render_density_frame(ps, geometry, sigma_map))
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityMapSequence {
        frames,
        geometry: geometry.clone(),
        frame_ids: frame_ids.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> SceneGeometry {
        SceneGeometry::new([0.0, 0.0], [79.0, 79.0], (80, 80), 0.0).unwrap()
    }

    #[test]
    fn map_corners_and_midpoint() {
        let g = SceneGeometry::new([-2.0, 1.0], [10.0, 7.0], (80, 80), 0.0).unwrap();
        let a = g.world_to_map(g.world_min);
        assert_eq!((a.row, a.col), (0.0, 0.0));
        let b = g.world_to_map(g.world_max);
        assert_eq!((b.row, b.col), (79.0, 79.0));
        let m = g.world_to_map([4.0, 4.0]);
        assert!((m.row - 39.5).abs() < 1e-12 && (m.col - 39.5).abs() < 1e-12);
        assert!(m.in_bounds);
        assert!(!g.world_to_map([11.0, 4.0]).in_bounds);
    }

    #[test]
    fn degenerate_geometry_rejected() {
        assert!(matches!(
            SceneGeometry::new([0.0, 0.0], [0.0, 5.0], (80, 80), 0.0),
            Err(Error::Config(_))
        ));
        assert!(SceneGeometry::new([0.0, 0.0], [1.0, 1.0], (4, 80), 0.0).is_err());
    }

    #[test]
    fn empty_frame_is_zero() {
        let f = render_density_frame(&[], &geom(), 2.0).unwrap();
        assert!(f.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn peak_value_at_cell_center() {
        let f = render_density_frame(&[[40.0, 40.0]], &geom(), 2.0).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI * 4.0);
        assert!((f.at(40, 40) - expected).abs() < 1e-12);
        assert!((expected - 0.03979).abs() < 1e-5);
    }

    #[test]
    fn coincident_agents_double() {
        let one = render_density_frame(&[[30.3, 41.7]], &geom(), 2.0).unwrap();
        let two = render_density_frame(&[[30.3, 41.7], [30.3, 41.7]], &geom(), 2.0).unwrap();
        for (a, b) in one.data.iter().zip(&two.data) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_bounds_agents_skipped() {
        let f = render_density_frame(&[[-5.0, 3.0]], &geom(), 2.0).unwrap();
        assert_eq!(f.total(), 0.0);
        assert!(render_density_frame(&[[1.0, 1.0]], &geom(), 0.0).is_err());
    }

    #[test]
    fn sequence_includes_every_annotated_agent() {
        use crate::dataset::AgentTrack;
        let t1 = AgentTrack::new(1, vec![0, 10, 20], vec![[20.0, 20.0]; 3]).unwrap();
        let t2 = AgentTrack::new(2, vec![10, 20], vec![[50.0, 60.0]; 2]).unwrap();
        let rec = SceneRecording::new("s", 2.5, vec![t1, t2]).unwrap();
        let seq = render_sequence(&rec, &[0, 10, 20, 30], &geom(), 2.0).unwrap();
        let totals: Vec<f64> = seq.frames.iter().map(|f| f.total()).collect();
        assert!((totals[0] - 1.0).abs() < 1e-3);
        assert!((totals[1] - 2.0).abs() < 1e-3);
        assert_eq!(totals[3], 0.0);
        let t = seq.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[4, 1, 80, 80]);
    }
}
