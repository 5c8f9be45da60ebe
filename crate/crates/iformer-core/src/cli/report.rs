//! Ground-truth plumbing for evaluation: dataset videos become metric-ready
//! tracks, one per annotated instance, absent in frames where occlusion
//! drops the annotation.

use crate::evalkit::Track;
use crate::synthdata::Video;

/// One track per ground-truth instance id; a frame's mask is present exactly
/// when the instance is annotated there.
pub fn gt_tracks(video: &Video) -> Vec<Track> {
    let mut ids: Vec<u16> = video
        .annotations
        .iter()
        .flatten()
        .map(|a| a.id)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let class = video
                .annotations
                .iter()
                .flatten()
                .find(|a| a.id == id)
                .map(|a| a.class)
                .unwrap();
            let masks = video
                .labels
                .iter()
                .zip(&video.annotations)
                .map(|(labels, anns)| {
                    if anns.iter().any(|a| a.id == id) {
                        Some(labels.iter().map(|&l| l == id).collect())
                    } else {
                        None
                    }
                })
                .collect();
            Track {
                masks,
                class,
                score: 1.0,
                source: id as usize,
            }
        })
        .collect()
}
