use std::sync::Arc;

use crate::error::{Error, Result};

/// Directed proximity edges with features measured from sender to receiver.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeSet {
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
    /// `u_receiver - u_sender`.
    pub displacement: Vec<[f64; 2]>,
    pub distance: Vec<f64>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.senders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.senders
            .iter()
            .copied()
            .zip(self.receivers.iter().copied())
    }

    /// Concatenates edge sets of disjoint graphs, shifting node indices by the given offsets.
    pub fn disjoint_union(parts: &[(EdgeSet, usize)]) -> EdgeSet {
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        let mut displacement = Vec::new();
        let mut distance = Vec::new();
        for (edges, offset) in parts {
            senders.extend(edges.senders.iter().map(|s| s + offset));
            receivers.extend(edges.receivers.iter().map(|r| r + offset));
            displacement.extend_from_slice(&edges.displacement);
            distance.extend_from_slice(&edges.distance);
        }
        EdgeSet {
            senders: senders.into(),
            receivers: receivers.into(),
            displacement,
            distance,
        }
    }
}

/// All pairs `i != j` with `‖u_i - u_j‖ <= radius`, in both directions.
pub fn build_radius_edges(positions: &[[f64; 2]], radius: f64) -> Result<EdgeSet> {
    build_radius_edges_where(positions, radius, |_| true)
}

/// Like [`build_radius_edges`] but only between particles accepted by `include`.
///
/// Edges are ordered by sender, then receiver.
pub fn build_radius_edges_where(
    positions: &[[f64; 2]],
    radius: f64,
    include: impl Fn(usize) -> bool,
) -> Result<EdgeSet> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::config(format!(
            "connectivity radius must be positive, got {radius}"
        )));
    }
    if positions
        .iter()
        .any(|p| !(p[0].is_finite() && p[1].is_finite()))
    {
        return Err(Error::NonFinite {
            op: "build_radius_edges",
            phase: "forward",
        });
    }

    // Cell list: particles sorted by integer cell coordinates.
    let cell = |p: &[f64; 2]| {
        (
            (p[0] / radius).floor() as i64,
            (p[1] / radius).floor() as i64,
        )
    };
    let mut sorted: Vec<((i64, i64), usize)> = (0..positions.len())
        .filter(|&i| include(i))
        .map(|i| (cell(&positions[i]), i))
        .collect();
    sorted.sort_unstable();

    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    let mut displacement = Vec::new();
    let mut distance = Vec::new();
    let mut neighbours: Vec<(usize, [f64; 2], f64)> = Vec::new();
    let mut members: Vec<usize> = sorted.iter().map(|&(_, i)| i).collect();
    members.sort_unstable();

    for &i in &members {
        let (cx, cy) = cell(&positions[i]);
        neighbours.clear();
        for dx in -1..=1 {
            let key_lo = ((cx + dx, cy - 1), 0);
            let key_hi = ((cx + dx, cy + 1), usize::MAX);
            let lo = sorted.partition_point(|e| *e < key_lo);
            let hi = sorted.partition_point(|e| *e <= key_hi);
            for &(_, j) in &sorted[lo..hi] {
                if j == i {
                    continue;
                }
                let d = [
                    positions[j][0] - positions[i][0],
                    positions[j][1] - positions[i][1],
                ];
                let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if dist <= radius {
                    neighbours.push((j, d, dist));
                }
            }
        }
        neighbours.sort_unstable_by_key(|n| n.0);
        for &(j, d, dist) in &neighbours {
            senders.push(i);
            receivers.push(j);
            displacement.push(d);
            distance.push(dist);
        }
    }
    Ok(EdgeSet {
        senders: senders.into(),
        receivers: receivers.into(),
        displacement,
        distance,
    })
}
