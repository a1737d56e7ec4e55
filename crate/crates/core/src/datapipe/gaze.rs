use super::{FrameMeta, Gaze};

/// Unit gaze direction for (yaw, pitch) in degrees.
pub fn direction(g: &Gaze) -> [f64; 3] {
    let (y, p) = (g.yaw.to_radians(), g.pitch.to_radians());
    [p.cos() * y.sin(), p.sin(), p.cos() * y.cos()]
}

/// Angle between two gaze directions in degrees.
pub fn angle_between(a: &Gaze, b: &Gaze) -> f64 {
    let (u, v) = (direction(a), direction(b));
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let norm = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    norm.atan2(dot).to_degrees()
}

/// Largest angular gaze change between consecutive frames, or `None` when
/// any frame lacks gaze metadata.
pub fn gaze_change_score(meta: &[FrameMeta]) -> Option<f64> {
    let gazes: Option<Vec<Gaze>> = meta.iter().map(|m| m.gaze).collect();
    let gazes = gazes?;
    Some(
        gazes
            .windows(2)
            .map(|w| angle_between(&w[0], &w[1]))
            .fold(0.0, f64::max),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeSelection {
    /// Selected clip indices, highest score first.
    pub selected: Vec<usize>,
    /// Clips without gaze metadata.
    pub excluded: Vec<usize>,
    pub scores: Vec<Option<f64>>,
}

/// Keeps the top `fraction` of scored clips (at least one when any is
/// scored). Ties go to the lower index.
pub fn filter_top_fraction(clips: &[Vec<FrameMeta>], fraction: f64) -> GazeSelection {
    let scores: Vec<Option<f64>> = clips.iter().map(|m| gaze_change_score(m)).collect();
    let excluded: Vec<usize> = (0..clips.len()).filter(|&i| scores[i].is_none()).collect();
    let mut ranked: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = if ranked.is_empty() {
        0
    } else {
        ((fraction * ranked.len() as f64).round() as usize).clamp(1, ranked.len())
    };
    GazeSelection {
        selected: ranked[..keep].iter().map(|(i, _)| *i).collect(),
        excluded,
        scores,
    }
}
