//! Streaming inference over a video: one frame in, one prediction out, with
//! per-video score merging at the end. Output plumbing lives here too:
//! run-length encoded masks for tracks.json, PPM overlays, and the
//! conversion into metric-ready tracks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::Track;
use crate::model::InstanceFormer;
use crate::synthdata::Video;
use crate::tensor::with_fresh_tape;

#[derive(Clone, Debug)]
pub struct InferSettings {
    /// Tracks kept per video, ranked by early-frame peak confidence.
    pub k_top: usize,
    /// Sigmoid threshold binarizing mask logits.
    pub mask_threshold: f64,
    /// Collect per-frame query embeddings for CSV export.
    pub keep_embeddings: bool,
}

impl Default for InferSettings {
    fn default() -> InferSettings {
        InferSettings {
            k_top: 10,
            mask_threshold: 0.5,
            keep_embeddings: true,
        }
    }
}

/// One predicted instance in tracks.json. The id is the decoder query index
/// and is stable across the whole video by construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: usize,
    pub class: usize,
    pub score: f64,
    pub class_scores: Vec<f64>,
    /// Per frame, normalized (cx, cy, w, h).
    pub boxes: Vec<[f64; 4]>,
    /// Per frame, run-length counts over the row-major full-resolution mask,
    /// alternating off/on and starting with off.
    pub masks: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoTracks {
    pub video: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub tracks: Vec<TrackRecord>,
}

impl VideoTracks {
    /// Decode into metric-ready tracks; every frame carries a mask.
    pub fn to_eval_tracks(&self) -> Result<Vec<Track>> {
        self.tracks
            .iter()
            .map(|t| {
                if t.masks.len() != self.frames {
                    return Err(Error::config(format!(
                        "track {} has {} mask frames in a {}-frame video",
                        t.id,
                        t.masks.len(),
                        self.frames
                    )));
                }
                let masks = t
                    .masks
                    .iter()
                    .map(|rle| decode_rle(rle, self.height * self.width).map(Some))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Track {
                    masks,
                    class: t.class,
                    score: t.score,
                    source: t.id,
                })
            })
            .collect()
    }
}

/// Everything produced by streaming one video.
pub struct VideoInference {
    pub tracks: Vec<TrackRecord>,
    /// [frame][query] -> embedding row; filled when `keep_embeddings` is set.
    pub embeddings: Vec<Vec<Vec<f64>>>,
}

pub fn encode_rle(mask: &[bool]) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for &b in mask {
        if b == current {
            run += 1;
        } else {
            counts.push(run);
            current = b;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub fn decode_rle(counts: &[usize], len: usize) -> Result<Vec<bool>> {
    let total: usize = counts.iter().sum();
    if total != len {
        return Err(Error::config(format!(
            "run-length counts cover {total} pixels, mask needs {len}"
        )));
    }
    let mut mask = Vec::with_capacity(len);
    let mut current = false;
    for &c in counts {
        mask.extend(std::iter::repeat(current).take(c));
        current = !current;
    }
    Ok(mask)
}

/// Nearest-neighbor upsample of the quarter-resolution mask plane to the
/// full canvas, then threshold. Exact for the 4x stride used throughout.
/// Bilinear upsample of the quarter-resolution logit grid, thresholded in
/// logit space. Interpolating logits before the cut recovers sub-texel
/// boundaries that a nearest-neighbor fill would quantize away.
fn full_res_mask(
    logits: &[f64],
    mask_shape: (usize, usize),
    canvas: (usize, usize),
    threshold: f64,
) -> Vec<bool> {
    let (mh, mw) = mask_shape;
    let (h, w) = canvas;
    let logit_cut = (threshold / (1.0 - threshold)).ln();
    let sample = |fy: f64, fx: f64| -> f64 {
        let fy = fy.clamp(0.0, (mh - 1) as f64);
        let fx = fx.clamp(0.0, (mw - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(mh - 1), (x0 + 1).min(mw - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let top = logits[y0 * mw + x0] * (1.0 - dx) + logits[y0 * mw + x1] * dx;
        let bot = logits[y1 * mw + x0] * (1.0 - dx) + logits[y1 * mw + x1] * dx;
        top * (1.0 - dy) + bot * dy
    };
    let (sy, sx) = (mh as f64 / h as f64, mw as f64 / w as f64);
    let mut out = vec![false; h * w];
    for y in 0..h {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..w {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            out[y * w + x] = sample(fy, fx) > logit_cut;
        }
    }
    out
}

/// Stream every frame of `video` through the model and merge the per-frame
/// scores into at most `k_top` tracks. Pure inference: no ground truth, a
/// fresh computation tape per frame, bounded model state.
pub fn predict_tracks(
    model: &InstanceFormer,
    video: &Video,
    settings: &InferSettings,
) -> Result<VideoInference> {
    let cfg = model.config();
    let n = cfg.num_queries;
    let k = cfg.num_classes;
    let mut state = model.new_video()?;
    let mut boxes_per_frame: Vec<Vec<[f64; 4]>> = Vec::with_capacity(video.num_frames());
    let mut masks_per_frame: Vec<Vec<Vec<bool>>> = Vec::with_capacity(video.num_frames());
    let mut embeddings = Vec::new();
    for t in 0..video.num_frames() {
        let frame = video.frame_tensor(t);
        let pred = with_fresh_tape(|| model.process_frame(&mut state, t, &frame, None))?;
        let boxes = pred.boxes.data();
        boxes_per_frame.push(
            (0..n)
                .map(|q| [boxes[q * 4], boxes[q * 4 + 1], boxes[q * 4 + 2], boxes[q * 4 + 3]])
                .collect(),
        );
        let logits = pred.mask_logits.data();
        let (mh, mw) = pred.mask_shape;
        masks_per_frame.push(
            (0..n)
                .map(|q| {
                    full_res_mask(
                        &logits[q * mh * mw..(q + 1) * mh * mw],
                        pred.mask_shape,
                        (video.height, video.width),
                        settings.mask_threshold,
                    )
                })
                .collect(),
        );
        if settings.keep_embeddings {
            let e = pred.embeddings.data();
            let c = pred.embeddings.shape()[1];
            embeddings.push((0..n).map(|q| e[q * c..(q + 1) * c].to_vec()).collect());
        }
    }

    let merged = state.merged_scores(settings.k_top.min(n))?;
    let tracks = merged
        .into_iter()
        .map(|ts| {
            let (class, score) = ts
                .scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(c, &s)| (c, s))
                .unwrap_or((0, 0.0));
            debug_assert_eq!(ts.scores.len(), k);
            TrackRecord {
                id: ts.query,
                class,
                score,
                class_scores: ts.scores,
                boxes: boxes_per_frame.iter().map(|f| f[ts.query]).collect(),
                masks: masks_per_frame
                    .iter()
                    .map(|f| encode_rle(&f[ts.query]))
                    .collect(),
            }
        })
        .collect();
    Ok(VideoInference { tracks, embeddings })
}

/// Distinct overlay colors per track id.
fn track_color(id: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [255, 80, 80],
        [80, 255, 120],
        [90, 140, 255],
        [255, 220, 60],
        [240, 90, 255],
        [70, 240, 240],
        [255, 150, 40],
        [180, 255, 60],
    ];
    PALETTE[id % PALETTE.len()]
}

/// One binary PPM (P6) per frame with each track's mask blended over the
/// input image at half strength.
pub fn write_overlays(dir: &Path, video: &Video, inference: &VideoInference) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = (video.height, video.width);
    for t in 0..video.num_frames() {
        let mut rgb: Vec<u8> = vec![0; 3 * h * w];
        let frame = &video.frames[t];
        for p in 0..h * w {
            for c in 0..3 {
                rgb[p * 3 + c] = frame[c * h * w + p];
            }
        }
        for track in &inference.tracks {
            let mask = decode_rle(&track.masks[t], h * w)?;
            let color = track_color(track.id);
            for (p, &on) in mask.iter().enumerate() {
                if on {
                    for c in 0..3 {
                        let base = rgb[p * 3 + c] as u16;
                        rgb[p * 3 + c] = ((base + color[c] as u16) / 2) as u8;
                    }
                }
            }
        }
        let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
        ppm.extend_from_slice(&rgb);
        fs::write(dir.join(format!("{t:03}.ppm")), ppm)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    #[test]
    fn rle_roundtrips_random_masks() {
        let mut rng = RngState::new(5);
        for _ in 0..50 {
            let len = 1 + rng.below(200);
            let mask: Vec<bool> = (0..len).map(|_| rng.uniform() < 0.3).collect();
            let counts = encode_rle(&mask);
            assert_eq!(decode_rle(&counts, len).unwrap(), mask);
            // Canonical form: starts with the off-run, no empty runs after it.
            assert!(counts.iter().skip(1).all(|&c| c > 0));
        }
    }

    #[test]
    fn rle_handles_the_extremes() {
        assert_eq!(encode_rle(&[false; 4]), vec![4]);
        assert_eq!(encode_rle(&[true; 4]), vec![0, 4]);
        assert_eq!(decode_rle(&[0, 4], 4).unwrap(), vec![true; 4]);
        assert!(decode_rle(&[3], 4).is_err());
    }

    #[test]
    fn upsampled_checker_splits_at_cell_boundaries() {
        // Symmetric logits put the interpolated zero-crossing exactly on the
        // texel boundary, so the quadrants come out clean.
        let logits = vec![5.0, -5.0, -5.0, 5.0];
        let mask = full_res_mask(&logits, (2, 2), (8, 8), 0.5);
        for y in 0..8 {
            for x in 0..8 {
                let want = (y < 4) == (x < 4);
                assert_eq!(mask[y * 8 + x], want, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn upsampling_interpolates_sub_texel_boundaries() {
        // Logits 2 and -1: the zero-crossing sits 2/3 of the way between the
        // texel centers, one pixel past where block replication would cut.
        let mask = full_res_mask(&[2.0, -1.0], (1, 2), (1, 8), 0.5);
        assert_eq!(
            mask,
            [true, true, true, true, true, false, false, false],
        );
    }

    #[test]
    fn threshold_shifts_the_logit_cut() {
        let logits = vec![0.5];
        assert!(full_res_mask(&logits, (1, 1), (1, 1), 0.5)[0]);
        assert!(!full_res_mask(&logits, (1, 1), (1, 1), 0.9)[0]);
    }

    #[test]
    fn overlay_files_are_wellformed_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let video = crate::synthdata::generate_video(
            &crate::synthdata::VideoSpec {
                canvas: (16, 16),
                frames: 2,
                shapes: (1, 1),
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let inference = VideoInference {
            tracks: vec![TrackRecord {
                id: 0,
                class: 0,
                score: 0.9,
                class_scores: vec![0.9, 0.05, 0.05],
                boxes: vec![[0.5, 0.5, 0.2, 0.2]; 2],
                masks: vec![encode_rle(&vec![true; 256]), encode_rle(&vec![false; 256])],
            }],
            embeddings: Vec::new(),
        };
        write_overlays(dir.path(), &video, &inference).unwrap();
        for t in 0..2 {
            let bytes = fs::read(dir.path().join(format!("{t:03}.ppm"))).unwrap();
            let header = b"P6\n16 16\n255\n";
            assert_eq!(&bytes[..header.len()], header);
            assert_eq!(bytes.len(), header.len() + 3 * 256);
        }
    }

    #[test]
    fn eval_track_conversion_checks_frame_counts() {
        let vt = VideoTracks {
            video: "v".into(),
            height: 2,
            width: 2,
            frames: 2,
            tracks: vec![TrackRecord {
                id: 0,
                class: 0,
                score: 1.0,
                class_scores: vec![1.0],
                boxes: vec![[0.5; 4]; 2],
                masks: vec![vec![4]],
            }],
        };
        assert!(vt.to_eval_tracks().is_err());
    }
}
