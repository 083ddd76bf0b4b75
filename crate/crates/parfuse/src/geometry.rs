//! SE(2) poses, BEV grids, rigid feature warps, and rotated-box overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Collinearity / degeneracy tolerance for polygon clipping.
const CLIP_EPS: f64 = 1e-9;

/// Normalizes an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    std::f64::consts::PI - (std::f64::consts::PI - a).rem_euclid(two_pi)
}

/// Planar pose: position in meters, yaw in radians within (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Pose2D {
        Pose2D {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    /// Body-frame point to world frame.
    pub fn to_world(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * p.0 - s * p.1 + self.x, s * p.0 + c * p.1 + self.y)
    }

    /// World-frame point into this pose's body frame.
    pub fn to_body(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.0 - self.x;
        let dy = p.1 - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Distance and bearing of `aux` as seen from `ego`'s body frame.
/// Coincident positions define the bearing as 0.
pub fn relative_pose(ego: &Pose2D, aux: &Pose2D) -> (f64, f64) {
    let dx = aux.x - ego.x;
    let dy = aux.y - ego.y;
    let d = dx.hypot(dy);
    if d == 0.0 {
        return (0.0, 0.0);
    }
    let theta = normalize_angle(dy.atan2(dx) - ego.yaw);
    (d, theta)
}

/// BEV box. `l` extends along the heading (`yaw`), `w` across it; `cz`/`h`
/// carry the vertical extent through regression but overlap stays planar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, cz: f64, w: f64, l: f64, h: f64, yaw: f64) -> Result<RotatedBox> {
        if w <= 0.0 || l <= 0.0 || h <= 0.0 {
            return Err(Error::usage(format!(
                "box dimensions must be positive, got w={w} l={l} h={h}"
            )));
        }
        Ok(RotatedBox {
            cx,
            cy,
            cz,
            w,
            l,
            h,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    /// Footprint corners, counterclockwise.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.l * 0.5;
        let hw = self.w * 0.5;
        let rot = |px: f64, py: f64| (self.cx + c * px - s * py, self.cy + s * px + c * py);
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    /// Planar containment test in the box body frame.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.0 - self.cx;
        let dy = p.1 - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l * 0.5 && v.abs() <= self.w * 0.5
    }
}

fn shoelace_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        sum += x0 * y1 - x1 * y0;
    }
    0.5 * sum.abs()
}

/// Sutherland-Hodgman clip of a convex subject polygon by a convex CCW clip
/// polygon.
fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output: Vec<(f64, f64)> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let ex = b.0 - a.0;
        let ey = b.1 - a.1;
        let inside = |p: (f64, f64)| ex * (p.1 - a.1) - ey * (p.0 - a.0) >= -CLIP_EPS;

        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let next = input[(j + 1) % input.len()];
            let cur_in = inside(cur);
            let next_in = inside(next);
            if cur_in {
                output.push(cur);
            }
            if cur_in != next_in {
                // Intersection of segment cur->next with the clip line a->b.
                let dx = next.0 - cur.0;
                let dy = next.1 - cur.1;
                let denom = ex * dy - ey * dx;
                if denom.abs() > CLIP_EPS {
                    let t = (ex * (a.1 - cur.1) - ey * (a.0 - cur.0)) / denom;
                    output.push((cur.0 + t * dx, cur.1 + t * dy));
                }
            }
        }
    }
    output
}

/// BEV intersection-over-union via convex polygon clipping. Exactly symmetric
/// in its arguments (the pair is evaluated in a canonical order).
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let key = |r: &RotatedBox| (r.cx, r.cy, r.w, r.l, r.yaw, r.cz, r.h);
    let (first, second) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let inter = clip_polygon(&first.corners(), &second.corners());
    let inter_area = shoelace_area(&inter);
    if inter_area < CLIP_EPS {
        return 0.0;
    }
    let union = first.bev_area() + second.bev_area() - inter_area;
    if union <= 0.0 {
        return 0.0;
    }
    (inter_area / union).clamp(0.0, 1.0)
}

/// Regular BEV grid in a body frame. Rows index y, columns index x, matching
/// the `[h, w, c]` feature layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
    pub h: usize,
    pub w: usize,
}

impl GridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), cell: f64) -> Result<GridSpec> {
        if cell <= 0.0 {
            return Err(Error::config(format!("grid cell must be > 0, got {cell}")));
        }
        if x_range.1 <= x_range.0 || y_range.1 <= y_range.0 {
            return Err(Error::config("grid ranges must be increasing"));
        }
        let wf = (x_range.1 - x_range.0) / cell;
        let hf = (y_range.1 - y_range.0) / cell;
        if (wf - wf.round()).abs() > 1e-9 || (hf - hf.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "grid extents must be whole multiples of the cell size, got {wf}x{hf} cells"
            )));
        }
        Ok(GridSpec {
            x_min: x_range.0,
            x_max: x_range.1,
            y_min: y_range.0,
            y_max: y_range.1,
            cell,
            h: hf.round() as usize,
            w: wf.round() as usize,
        })
    }

    /// Default desk-scale detection range: 96x48 cells at 0.8 m.
    pub fn desk_default() -> GridSpec {
        GridSpec::new((-38.4, 38.4), (-19.2, 19.2), 0.8).expect("valid default grid")
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell,
            self.y_min + (row as f64 + 0.5) * self.cell,
        )
    }

    /// Fractional (row, col) of a body-frame point relative to cell centers.
    pub fn grid_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.y_min) / self.cell - 0.5,
            (x - self.x_min) / self.cell - 0.5,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn cell_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let col = ((x - self.x_min) / self.cell) as usize;
        let row = ((y - self.y_min) / self.cell) as usize;
        Some((row.min(self.h - 1), col.min(self.w - 1)))
    }
}

/// Resamples a `[h, w, c]` feature laid out on `grid` in `src_pose`'s frame
/// onto the same grid in `dst_pose`'s frame. Each destination cell center is
/// pushed through dst -> world -> src and bilinearly sampled; the mask is the
/// sample coverage (0 outside the source extent). Identical poses short-circuit
/// to an exact copy.
pub fn warp_feature(
    src: &Tensor,
    src_pose: &Pose2D,
    dst_pose: &Pose2D,
    grid: &GridSpec,
) -> Result<(Tensor, Vec<f64>)> {
    let s = src.shape();
    if s.len() != 3 || s[0] != grid.h || s[1] != grid.w {
        return Err(Error::usage(format!(
            "feature shape {:?} does not match grid {}x{}",
            s, grid.h, grid.w
        )));
    }
    if src_pose == dst_pose {
        return Ok((src.clone(), vec![1.0; grid.h * grid.w]));
    }
    let mut coords = Vec::with_capacity(grid.h * grid.w);
    for row in 0..grid.h {
        for col in 0..grid.w {
            let p_dst = grid.cell_center(row, col);
            let p_world = dst_pose.to_world(p_dst);
            let p_src = src_pose.to_body(p_world);
            coords.push(grid.grid_coords(p_src.0, p_src.1));
        }
    }
    src.bilinear_sample(&coords, grid.h, grid.w)
}
