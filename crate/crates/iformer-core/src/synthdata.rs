//! Deterministic synthetic occlusion videos: colored shapes moving with
//! constant velocity, reflecting at the borders, rendered back-to-front by
//! depth rank. Ground truth is exact by construction: u16 instance label
//! maps, tight visible-pixel boxes, and occlusion-aware visibility. Also the
//! bit-exact on-disk dataset layout used by the command-line tools.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FrameGroundTruth;
use crate::tensor::{read_ift_file, write_ift_file, RngState, Tensor, TensorData};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];
/// An instance below this visible fraction is annotated as absent.
pub const VISIBILITY_FLOOR: f64 = 0.05;
/// Shapes may cover at most this fraction of the canvas.
const MAX_PACKING: f64 = 0.6;

const BASE_COLORS: [[u8; 3]; NUM_CLASSES] = [[220, 60, 60], [60, 200, 80], [70, 90, 230]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub fn id(self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
        }
    }

    pub fn from_id(id: usize) -> Option<ShapeClass> {
        [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle]
            .into_iter()
            .find(|c| c.id() == id)
    }
}

/// One moving shape. `depth` ranks occlusion: smaller is in front.
#[derive(Clone, Debug)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    /// Diameter / side / base-and-height extent in pixels.
    pub size: f64,
    pub color: [u8; 3],
    /// Initial center in pixel coordinates.
    pub position: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub depth: usize,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4.0 {
            return Err(Error::config(format!(
                "shape size {} is below the 4-pixel minimum",
                self.size
            )));
        }
        let speed = (self.velocity.0.powi(2) + self.velocity.1.powi(2)).sqrt();
        if speed > self.size + 1e-9 {
            return Err(Error::config(format!(
                "shape speed {speed:.3} exceeds its size {}; it could jump across an occluder",
                self.size
            )));
        }
        Ok(())
    }

    fn nominal_area(&self) -> f64 {
        let s = self.size;
        match self.class {
            ShapeClass::Circle => std::f64::consts::PI * (s / 2.0) * (s / 2.0),
            ShapeClass::Square => s * s,
            ShapeClass::Triangle => s * s / 2.0,
        }
    }
}

/// One annotated instance of one frame. `id` matches the label map (1-based;
/// 0 is background).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub id: u16,
    pub class: usize,
    /// Tight box over visible pixels, normalized (cx, cy, w, h).
    pub bbox: [f64; 4],
    /// Visible pixels / on-canvas unoccluded pixels.
    pub visibility: f64,
}

/// Frames plus exact ground truth for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub height: usize,
    pub width: usize,
    /// Per frame: channel-major RGB, 3·H·W bytes.
    pub frames: Vec<Vec<u8>>,
    /// Per frame: H·W instance ids, 0 = background.
    pub labels: Vec<Vec<u16>>,
    /// Per frame: instances visible in that frame.
    pub annotations: Vec<Vec<InstanceAnnotation>>,
}

impl Video {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Frame as a [3×H×W] float tensor in [0,1].
    pub fn frame_tensor(&self, t: usize) -> Tensor {
        let data: Vec<f64> = self.frames[t].iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::from_vec(data, &[3, self.height, self.width]).unwrap()
    }

    /// Training targets for frame `t`: one entry per annotated instance,
    /// with its full-resolution {0,1} mask cut from the label map.
    pub fn ground_truth(&self, t: usize) -> FrameGroundTruth {
        let anns = &self.annotations[t];
        let labels = &self.labels[t];
        FrameGroundTruth {
            ids: anns.iter().map(|a| a.id as usize).collect(),
            classes: anns.iter().map(|a| a.class).collect(),
            boxes: anns.iter().map(|a| a.bbox).collect(),
            masks: anns
                .iter()
                .map(|a| labels.iter().map(|&l| if l == a.id { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }
}

/// Generation knobs. Shape count is drawn uniformly from `shapes`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoSpec {
    pub canvas: (usize, usize),
    pub frames: usize,
    pub shapes: (usize, usize),
    pub size_range: (f64, f64),
    pub speed_range: (f64, f64),
    /// Probability that a shape pair is steered to cross mid-video.
    pub crossing_rate: f64,
}

impl Default for VideoSpec {
    fn default() -> VideoSpec {
        VideoSpec {
            canvas: (64, 64),
            frames: 24,
            shapes: (2, 6),
            size_range: (8.0, 16.0),
            speed_range: (0.8, 2.5),
            crossing_rate: 0.7,
        }
    }
}

impl VideoSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "canvas {h}\u{d7}{w} must be a positive multiple of 16"
            )));
        }
        if self.frames == 0 {
            return Err(Error::config("a video needs at least one frame".to_string()));
        }
        if self.shapes.0 == 0 || self.shapes.0 > self.shapes.1 {
            return Err(Error::config(format!(
                "shape count range {:?} is empty or allows zero shapes",
                self.shapes
            )));
        }
        if self.size_range.0 < 4.0 || self.size_range.0 > self.size_range.1 {
            return Err(Error::config(format!(
                "size range {:?} must stay within [4, ..] and be ordered",
                self.size_range
            )));
        }
        if self.speed_range.0 < 0.0 || self.speed_range.0 > self.speed_range.1 {
            return Err(Error::config(format!(
                "speed range {:?} must be non-negative and ordered",
                self.speed_range
            )));
        }
        if !(0.0..=1.0).contains(&self.crossing_rate) {
            return Err(Error::config(format!(
                "crossing rate {} must lie in [0,1]",
                self.crossing_rate
            )));
        }
        Ok(())
    }
}

/// Exact integer rasterization over pixel centers: circle by radius test,
/// square by half-open bounds (so a size-s square covers exactly s·s pixels),
/// triangle by half-plane tests on an isosceles outline.
pub fn rasterize_shape(
    class: ShapeClass,
    size: f64,
    center: (f64, f64),
    canvas: (usize, usize),
) -> Vec<bool> {
    let (h, w) = canvas;
    let (cx, cy) = center;
    let half = size / 2.0;
    let mut mask = vec![false; h * w];
    let x0 = ((cx - half - 1.0).floor().max(0.0)) as usize;
    let y0 = ((cy - half - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + half + 1.0).ceil().min(w as f64)) as usize;
    let y1 = ((cy + half + 1.0).ceil().min(h as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let inside = match class {
                ShapeClass::Circle => {
                    (px - cx).powi(2) + (py - cy).powi(2) <= half * half
                }
                ShapeClass::Square => {
                    px >= cx - half && px < cx + half && py >= cy - half && py < cy + half
                }
                ShapeClass::Triangle => {
                    let a = (cx, cy - half);
                    let b = (cx - half, cy + half);
                    let c = (cx + half, cy + half);
                    let side = |p: (f64, f64), q: (f64, f64)| {
                        (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0)
                    };
                    let (d0, d1, d2) = (side(a, b), side(b, c), side(c, a));
                    let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                    let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                    !(neg && pos)
                }
            };
            if inside {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

/// Advance one coordinate by one frame, reflecting at [half, extent-half].
pub(crate) fn advance(mut p: f64, mut v: f64, half: f64, extent: f64) -> (f64, f64) {
    let (lo, hi) = (half, extent - half);
    p += v;
    // A shape wider than the canvas cannot reflect; pin it to the middle.
    if lo >= hi {
        return ((lo + hi) / 2.0, 0.0);
    }
    while p < lo || p > hi {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else {
            p = 2.0 * hi - p;
            v = -v;
        }
    }
    (p, v)
}

/// Render the configured shapes over `frames` steps. Exposed separately from
/// [`generate_video`] so trajectories can be scripted exactly in tests.
pub fn simulate_video(shapes: &[ShapeSpec], canvas: (usize, usize), frames: usize) -> Result<Video> {
    let (h, w) = canvas;
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::config(format!(
            "canvas {h}\u{d7}{w} must be a positive multiple of 16"
        )));
    }
    if shapes.len() >= u16::MAX as usize {
        return Err(Error::config("too many shapes for u16 label maps".to_string()));
    }
    for s in shapes {
        s.validate()?;
    }
    let packed: f64 = shapes.iter().map(|s| s.nominal_area()).sum();
    if packed > MAX_PACKING * (h * w) as f64 {
        return Err(Error::config(format!(
            "shapes cover {:.0}% of the canvas; at most {:.0}% is allowed",
            100.0 * packed / (h * w) as f64,
            100.0 * MAX_PACKING
        )));
    }

    // Back-to-front paint order: deepest rank first, ties broken by index so
    // rendering is deterministic either way.
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by(|&a, &b| shapes[b].depth.cmp(&shapes[a].depth).then(a.cmp(&b)));

    let mut centers: Vec<(f64, f64)> = shapes.iter().map(|s| s.position).collect();
    let mut velocities: Vec<(f64, f64)> = shapes.iter().map(|s| s.velocity).collect();

    let mut video = Video {
        height: h,
        width: w,
        frames: Vec::with_capacity(frames),
        labels: Vec::with_capacity(frames),
        annotations: Vec::with_capacity(frames),
    };
    for _t in 0..frames {
        let masks: Vec<Vec<bool>> = shapes
            .iter()
            .zip(&centers)
            .map(|(s, &c)| rasterize_shape(s.class, s.size, c, canvas))
            .collect();
        let mut frame = vec![0u8; 3 * h * w];
        let mut labels = vec![0u16; h * w];
        for &i in &order {
            let color = shapes[i].color;
            let id = (i + 1) as u16;
            for (p, &on) in masks[i].iter().enumerate() {
                if on {
                    labels[p] = id;
                    for ch in 0..3 {
                        frame[ch * h * w + p] = color[ch];
                    }
                }
            }
        }
        let mut anns = Vec::new();
        for (i, mask) in masks.iter().enumerate() {
            let id = (i + 1) as u16;
            let unoccluded = mask.iter().filter(|&&b| b).count();
            let mut visible = 0usize;
            let (mut vx0, mut vy0, mut vx1, mut vy1) = (w, h, 0usize, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if labels[y * w + x] == id {
                        visible += 1;
                        vx0 = vx0.min(x);
                        vy0 = vy0.min(y);
                        vx1 = vx1.max(x);
                        vy1 = vy1.max(y);
                    }
                }
            }
            let visibility = if unoccluded == 0 {
                0.0
            } else {
                visible as f64 / unoccluded as f64
            };
            if visibility >= VISIBILITY_FLOOR && visible > 0 {
                let bw = (vx1 - vx0 + 1) as f64;
                let bh = (vy1 - vy0 + 1) as f64;
                anns.push(InstanceAnnotation {
                    id,
                    class: shapes[i].class.id(),
                    bbox: [
                        (vx0 as f64 + bw / 2.0) / w as f64,
                        (vy0 as f64 + bh / 2.0) / h as f64,
                        bw / w as f64,
                        bh / h as f64,
                    ],
                    visibility,
                });
            }
        }
        video.frames.push(frame);
        video.labels.push(labels);
        video.annotations.push(anns);

        for (i, s) in shapes.iter().enumerate() {
            let half = s.size / 2.0;
            let (px, vx) = advance(centers[i].0, velocities[i].0, half, w as f64);
            let (py, vy) = advance(centers[i].1, velocities[i].1, half, h as f64);
            centers[i] = (px, py);
            velocities[i] = (vx, vy);
        }
    }
    Ok(video)
}

/// Draw a shape set from the spec and simulate it. Pure in (spec, seed).
pub fn generate_video(spec: &VideoSpec, seed: u64) -> Result<Video> {
    spec.validate()?;
    let mut rng = RngState::new(seed);
    let (h, w) = spec.canvas;
    let n = spec.shapes.0 + rng.below(spec.shapes.1 - spec.shapes.0 + 1);

    let mut depths: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        depths.swap(i, rng.below(i + 1));
    }

    let mut shapes = Vec::with_capacity(n);
    for i in 0..n {
        let class = ShapeClass::from_id(rng.below(NUM_CLASSES)).unwrap();
        let size = rng.uniform_in(spec.size_range.0, spec.size_range.1);
        let half = size / 2.0;
        let position = (
            rng.uniform_in(half.min(w as f64 - half), (w as f64 - half).max(half)),
            rng.uniform_in(half.min(h as f64 - half), (h as f64 - half).max(half)),
        );
        let speed = rng
            .uniform_in(spec.speed_range.0, spec.speed_range.1)
            .min(size);
        let angle = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        let base = BASE_COLORS[class.id()];
        let mut color = [0u8; 3];
        for (c, &b) in color.iter_mut().zip(&base) {
            *c = (b as f64 + rng.uniform_in(-20.0, 20.0)).clamp(0.0, 255.0) as u8;
        }
        shapes.push(ShapeSpec {
            class,
            size,
            color,
            position,
            velocity: (speed * angle.cos(), speed * angle.sin()),
            depth: depths[i],
        });
    }

    // Steer odd-indexed partners toward where their pair will be mid-video,
    // so trajectories intersect at the configured rate.
    let tm = (spec.frames as f64 / 2.0).max(1.0);
    for pair in 0..n / 2 {
        let (a, b) = (2 * pair, 2 * pair + 1);
        if rng.uniform() >= spec.crossing_rate {
            continue;
        }
        let meet = (
            shapes[a].position.0 + shapes[a].velocity.0 * tm,
            shapes[a].position.1 + shapes[a].velocity.1 * tm,
        );
        let dir = (
            (meet.0 - shapes[b].position.0) / tm,
            (meet.1 - shapes[b].position.1) / tm,
        );
        let speed = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
        let cap = shapes[b].size.min(spec.speed_range.1);
        let scale = if speed > cap { cap / speed } else { 1.0 };
        shapes[b].velocity = (dir.0 * scale, dir.1 * scale);
    }

    simulate_video(&shapes, spec.canvas, spec.frames)
}

// ── dataset layout ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    classes: Vec<String>,
    videos: Vec<ManifestVideo>,
}

#[derive(Serialize, Deserialize)]
struct ManifestVideo {
    name: String,
    frames: usize,
    height: usize,
    width: usize,
}

const MANIFEST_FORMAT: &str = "shape-video-dataset-v1";

fn json_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset: 0,
        msg: e.to_string(),
    }
}

/// Write `manifest.json` plus one directory per video holding `frames.ift`
/// (u8 [T,3,H,W]), `labels.ift` (u16 [T,H,W]) and `annotations.json`.
pub fn write_dataset(videos: &[Video], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        videos: Vec::with_capacity(videos.len()),
    };
    for (i, v) in videos.iter().enumerate() {
        let name = format!("video_{i:04}");
        let vdir = dir.join(&name);
        fs::create_dir_all(&vdir)?;
        let t = v.num_frames();
        let (h, w) = (v.height, v.width);
        let frames: Vec<u8> = v.frames.iter().flatten().copied().collect();
        write_ift_file(
            &vdir.join("frames.ift"),
            &TensorData::U8(vec![t, 3, h, w], frames),
        )?;
        let labels: Vec<u16> = v.labels.iter().flatten().copied().collect();
        write_ift_file(
            &vdir.join("labels.ift"),
            &TensorData::U16(vec![t, h, w], labels),
        )?;
        let ann_path = vdir.join("annotations.json");
        let ann = serde_json::to_string_pretty(&v.annotations).map_err(|e| json_error(&ann_path, e))?;
        fs::write(&ann_path, ann)?;
        manifest.videos.push(ManifestVideo {
            name,
            frames: t,
            height: h,
            width: w,
        });
    }
    let man_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| json_error(&man_path, e))?;
    fs::write(&man_path, text)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Video>> {
    let man_path = dir.join("manifest.json");
    let text = fs::read_to_string(&man_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| json_error(&man_path, e))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(json_error(
            &man_path,
            format!("unknown dataset format {:?}", manifest.format),
        ));
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        let vdir = dir.join(&mv.name);
        let (t, h, w) = (mv.frames, mv.height, mv.width);

        let f_path = vdir.join("frames.ift");
        let frames = match read_ift_file(&f_path)? {
            TensorData::U8(shape, data) if shape == [t, 3, h, w] => data,
            other => {
                return Err(json_error(
                    &f_path,
                    format!(
                        "frames are {} {:?}, manifest says u8 [{t}, 3, {h}, {w}]",
                        other.dtype().as_str(),
                        other.shape()
                    ),
                ))
            }
        };
        let l_path = vdir.join("labels.ift");
        let labels = match read_ift_file(&l_path)? {
            TensorData::U16(shape, data) if shape == [t, h, w] => data,
            other => {
                return Err(json_error(
                    &l_path,
                    format!(
                        "labels are {} {:?}, manifest says u16 [{t}, {h}, {w}]",
                        other.dtype().as_str(),
                        other.shape()
                    ),
                ))
            }
        };
        let ann_path = vdir.join("annotations.json");
        let ann_text = fs::read_to_string(&ann_path)?;
        let annotations: Vec<Vec<InstanceAnnotation>> =
            serde_json::from_str(&ann_text).map_err(|e| json_error(&ann_path, e))?;
        if annotations.len() != t {
            return Err(json_error(
                &ann_path,
                format!("{} annotated frames for a {t}-frame video", annotations.len()),
            ));
        }
        videos.push(Video {
            height: h,
            width: w,
            frames: frames.chunks(3 * h * w).map(|c| c.to_vec()).collect(),
            labels: labels.chunks(h * w).map(|c| c.to_vec()).collect(),
            annotations,
        });
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_shape(class: ShapeClass, size: f64, pos: (f64, f64), depth: usize) -> ShapeSpec {
        ShapeSpec {
            class,
            size,
            color: BASE_COLORS[class.id()],
            position: pos,
            velocity: (0.0, 0.0),
            depth,
        }
    }

    #[test]
    fn unit_circle_at_a_pixel_center_covers_one_to_five_pixels() {
        let mask = rasterize_shape(ShapeClass::Circle, 2.0, (8.5, 8.5), (16, 16));
        let n = mask.iter().filter(|&&b| b).count();
        assert!((1..=5).contains(&n), "got {n} pixels");
    }

    #[test]
    fn interior_square_covers_exactly_size_squared_pixels() {
        for &(size, cx, cy) in &[(6.0, 8.0, 8.0), (5.0, 7.3, 9.1), (4.0, 8.5, 8.5)] {
            let mask = rasterize_shape(ShapeClass::Square, size, (cx, cy), (32, 32));
            let n = mask.iter().filter(|&&b| b).count();
            assert_eq!(n, (size * size) as usize, "size {size} at ({cx},{cy})");
        }
    }

    #[test]
    fn off_canvas_shape_rasterizes_empty() {
        for class in [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle] {
            let mask = rasterize_shape(class, 8.0, (-20.0, -20.0), (32, 32));
            assert!(mask.iter().all(|&b| !b));
        }
    }

    #[test]
    fn triangle_fills_about_half_its_bounding_square() {
        let mask = rasterize_shape(ShapeClass::Triangle, 12.0, (16.0, 16.0), (32, 32));
        let n = mask.iter().filter(|&&b| b).count() as f64;
        assert!((n - 72.0).abs() <= 14.0, "triangle area {n} far from 72");
    }

    #[test]
    fn static_shape_repeats_identically_every_frame() {
        let shapes = [static_shape(ShapeClass::Square, 8.0, (20.0, 20.0), 0)];
        let v = simulate_video(&shapes, (32, 32), 5).unwrap();
        for t in 1..5 {
            assert_eq!(v.frames[t], v.frames[0]);
            assert_eq!(v.labels[t], v.labels[0]);
            assert_eq!(v.annotations[t], v.annotations[0]);
        }
        let a = &v.annotations[0][0];
        assert_eq!(a.class, ShapeClass::Square.id());
        assert!((a.visibility - 1.0).abs() < 1e-12);
        assert_eq!(a.bbox, [20.0 / 32.0, 20.0 / 32.0, 0.25, 0.25]);
    }

    #[test]
    fn occluded_shape_visibility_dips_and_recovers() {
        // A square sits in front; a deeper circle traverses it left to right.
        let front = static_shape(ShapeClass::Square, 10.0, (32.0, 32.0), 0);
        let mut mover = static_shape(ShapeClass::Circle, 10.0, (10.0, 32.0), 1);
        mover.velocity = (2.0, 0.0);
        let v = simulate_video(&[front, mover], (64, 64), 23).unwrap();
        let vis: Vec<f64> = v
            .annotations
            .iter()
            .map(|f| f.iter().find(|a| a.id == 2).map_or(0.0, |a| a.visibility))
            .collect();
        assert!((vis[0] - 1.0).abs() < 1e-12, "clear before the crossing");
        assert!((vis[22] - 1.0).abs() < 1e-12, "clear after the crossing");
        let dip = vis.iter().cloned().fold(f64::MAX, f64::min);
        assert!(dip < 0.6, "never dipped while passing behind: min {dip}");
    }

    #[test]
    fn full_occlusion_suppresses_the_annotation() {
        let front = static_shape(ShapeClass::Square, 14.0, (32.0, 32.0), 0);
        let hidden = static_shape(ShapeClass::Circle, 8.0, (32.0, 32.0), 1);
        let v = simulate_video(&[front, hidden], (64, 64), 1).unwrap();
        assert_eq!(v.annotations[0].len(), 1, "hidden circle must not be annotated");
        assert_eq!(v.annotations[0][0].id, 1);
    }

    #[test]
    fn same_seed_reproduces_the_video_bit_for_bit() {
        let spec = VideoSpec::default();
        let a = generate_video(&spec, 1234).unwrap();
        let b = generate_video(&spec, 1234).unwrap();
        assert_eq!(a, b);
        let c = generate_video(&spec, 1235).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn overpacked_canvas_is_rejected() {
        let shapes: Vec<ShapeSpec> = (0..4)
            .map(|i| static_shape(ShapeClass::Square, 20.0, (16.0, 16.0), i))
            .collect();
        let err = simulate_video(&shapes, (32, 32), 1).unwrap_err();
        assert!(err.to_string().contains('%'), "got: {err}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn speeding_shape_is_rejected() {
        let mut s = static_shape(ShapeClass::Circle, 6.0, (16.0, 16.0), 0);
        s.velocity = (7.0, 0.0);
        let err = simulate_video(&[s], (32, 32), 1).unwrap_err();
        assert!(err.to_string().contains("speed"), "got: {err}");
    }

    #[test]
    fn reflection_keeps_centers_inside_the_walls() {
        let (mut p, mut v) = (5.0, -2.3);
        for _ in 0..200 {
            let (np, nv) = advance(p, v, 4.0, 32.0);
            p = np;
            v = nv;
            assert!((4.0..=28.0).contains(&p), "center {p} escaped");
        }
        assert!(v.abs() > 0.0);
    }

    #[test]
    fn labels_partition_the_painted_pixels() {
        let v = generate_video(&VideoSpec::default(), 77).unwrap();
        for t in 0..v.num_frames() {
            let labels = &v.labels[t];
            let frame = &v.frames[t];
            let hw = v.height * v.width;
            let mut painted = 0usize;
            for p in 0..hw {
                let bg = labels[p] == 0;
                let black = (0..3).all(|c| frame[c * hw + p] == 0);
                assert_eq!(bg, black, "label map and painted pixels disagree at {p}");
                if !bg {
                    painted += 1;
                }
            }
            let per_instance: usize = {
                let mut counts = std::collections::BTreeMap::new();
                for &l in labels {
                    if l != 0 {
                        *counts.entry(l).or_insert(0usize) += 1;
                    }
                }
                counts.values().sum()
            };
            assert_eq!(painted + (hw - painted), hw);
            assert_eq!(per_instance, painted, "instance masks must partition the foreground");
        }
    }

    #[test]
    fn boxes_are_tight_around_visible_pixels() {
        let v = generate_video(&VideoSpec::default(), 99).unwrap();
        for t in 0..v.num_frames() {
            let labels = &v.labels[t];
            for a in &v.annotations[t] {
                let [cx, cy, bw, bh] = a.bbox;
                let x0 = ((cx - bw / 2.0) * v.width as f64).round() as usize;
                let x1 = ((cx + bw / 2.0) * v.width as f64).round() as usize - 1;
                let y0 = ((cy - bh / 2.0) * v.height as f64).round() as usize;
                let y1 = ((cy + bh / 2.0) * v.height as f64).round() as usize - 1;
                let col_has = |x: usize| (y0..=y1).any(|y| labels[y * v.width + x] == a.id);
                let row_has = |y: usize| (x0..=x1).any(|x| labels[y * v.width + x] == a.id);
                assert!(col_has(x0) && col_has(x1) && row_has(y0) && row_has(y1),
                    "frame {t} instance {} box is not tight", a.id);
                // Nothing outside the box belongs to the instance.
                for (p, &l) in labels.iter().enumerate() {
                    if l == a.id {
                        let (x, y) = (p % v.width, p / v.width);
                        assert!((x0..=x1).contains(&x) && (y0..=y1).contains(&y));
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let videos: Vec<Video> = (0..3)
            .map(|i| {
                generate_video(
                    &VideoSpec {
                        frames: 6,
                        canvas: (32, 32),
                        shapes: (2, 3),
                        ..VideoSpec::default()
                    },
                    100 + i,
                )
                .unwrap()
            })
            .collect();
        write_dataset(&videos, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(videos, back);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path()).unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn truncated_tensor_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_video(
            &VideoSpec {
                frames: 4,
                canvas: (32, 32),
                shapes: (2, 2),
                ..VideoSpec::default()
            },
            7,
        )
        .unwrap();
        write_dataset(&[v], dir.path()).unwrap();
        let f = dir.path().join("video_0000").join("frames.ift");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got: {err}");
    }

    #[test]
    fn model_ground_truth_mirrors_the_annotations() {
        let v = generate_video(&VideoSpec::default(), 55).unwrap();
        let gt = v.ground_truth(0);
        assert_eq!(gt.ids.len(), v.annotations[0].len());
        for (i, a) in v.annotations[0].iter().enumerate() {
            assert_eq!(gt.ids[i], a.id as usize);
            assert_eq!(gt.classes[i], a.class);
            let area: f64 = gt.masks[i].iter().sum();
            let labeled = v.labels[0].iter().filter(|&&l| l == a.id).count() as f64;
            assert_eq!(area, labeled);
        }
    }
}
