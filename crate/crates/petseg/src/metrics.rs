//! Connected-component labeling and the challenge metrics: Dice similarity,
//! false positive volume, false negative volume, and rank aggregation.
//!
//! FPV counts predicted components whose overlap with the ground truth is
//! empty; FNV counts ground-truth components untouched by the prediction.
//! Both are reported in milliliters. Two empty masks score DSC 1.0, the
//! reward for a correct negative-control prediction.

use crate::error::{Error, Result};
use crate::volume::{voxel_volume_ml, Volume3D, VolumeKind};

/// Voxel neighborhood used to define "connected".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face and edge neighbors.
    #[default]
    Eighteen,
    /// Face, edge, and corner neighbors.
    TwentySix,
}

impl Connectivity {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// Neighbor offsets for this connectivity.
    pub fn offsets(self) -> Vec<[i32; 3]> {
        let max_manhattan = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let m = dx.abs() + dy.abs() + dz.abs();
                    if m > 0 && m <= max_manhattan {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Result of labeling: 0 = background, components numbered 1..=K in
/// first-visited order of the x-fastest scan.
#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    labels: Vec<u32>,
    counts: Vec<usize>,
    connectivity: Connectivity,
}

impl ComponentLabeling {
    pub fn num_components(&self) -> usize {
        self.counts.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Voxel count of component `label` (1-based).
    pub fn count(&self, label: u32) -> usize {
        self.counts[(label - 1) as usize]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn connectivity(&self) -> Connectivity {
        self.connectivity
    }
}

/// Label the disconnected foreground segments of a binary mask.
pub fn connected_components(
    mask: &Volume3D,
    connectivity: Connectivity,
) -> Result<ComponentLabeling> {
    let fg = mask
        .values_u8()
        .ok_or_else(|| Error::Contract("connected_components expects a binary mask".into()))?;
    let [nx, ny, nz] = mask.shape();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; fg.len()];
    let mut counts = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut next = 0u32;
    for start in 0..fg.len() {
        if fg[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0usize;
        labels[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            size += 1;
            let x = (idx % nx) as i32;
            let y = ((idx / nx) % ny) as i32;
            let z = (idx / (nx * ny)) as i32;
            for off in &offsets {
                let (qx, qy, qz) = (x + off[0], y + off[1], z + off[2]);
                if qx < 0
                    || qy < 0
                    || qz < 0
                    || qx >= nx as i32
                    || qy >= ny as i32
                    || qz >= nz as i32
                {
                    continue;
                }
                let q = qx as usize + nx * (qy as usize + ny * qz as usize);
                if fg[q] != 0 && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
        counts.push(size);
    }
    Ok(ComponentLabeling { labels, counts, connectivity })
}

fn check_pair(gt: &Volume3D, pred: &Volume3D) -> Result<()> {
    if gt.kind() != VolumeKind::Mask || pred.kind() != VolumeKind::Mask {
        return Err(Error::Contract(format!(
            "metrics expect two masks, got {:?} and {:?}",
            gt.kind(),
            pred.kind()
        )));
    }
    if gt.shape() != pred.shape() {
        return Err(Error::GeometryMismatch(format!(
            "mask shapes {:?} and {:?} differ",
            gt.shape(),
            pred.shape()
        )));
    }
    Ok(())
}

/// Dice coefficient from raw counts; two empty sets score 1.0.
pub fn dsc_from_counts(intersection: usize, gt_count: usize, pred_count: usize) -> f64 {
    if gt_count + pred_count == 0 {
        return 1.0;
    }
    2.0 * intersection as f64 / (gt_count + pred_count) as f64
}

/// Dice similarity coefficient `2|G∩P| / (|G| + |P|)`; 1.0 when both empty.
pub fn dsc(gt: &Volume3D, pred: &Volume3D) -> Result<f64> {
    check_pair(gt, pred)?;
    let g = gt.values_u8().expect("mask");
    let p = pred.values_u8().expect("mask");
    let mut inter = 0usize;
    let mut g_count = 0usize;
    let mut p_count = 0usize;
    for (a, b) in g.iter().zip(p) {
        g_count += *a as usize;
        p_count += *b as usize;
        inter += (*a & *b) as usize;
    }
    Ok(dsc_from_counts(inter, g_count, p_count))
}

/// Total volume (ml) of predicted components with zero ground-truth overlap.
pub fn fpv(gt: &Volume3D, pred: &Volume3D, connectivity: Connectivity) -> Result<f64> {
    check_pair(gt, pred)?;
    false_volume(gt, pred, connectivity)
}

/// Total volume (ml) of ground-truth components with zero predicted overlap.
pub fn fnv(gt: &Volume3D, pred: &Volume3D, connectivity: Connectivity) -> Result<f64> {
    check_pair(gt, pred)?;
    false_volume(pred, gt, connectivity)
}

/// Shared kernel: volume of `labeled_side` components that do not touch
/// `other` (labels the second argument).
fn false_volume(other: &Volume3D, labeled_side: &Volume3D, conn: Connectivity) -> Result<f64> {
    let labeling = connected_components(labeled_side, conn)?;
    let other_fg = other.values_u8().expect("mask");
    let mut touched = vec![false; labeling.num_components()];
    for (idx, &label) in labeling.labels().iter().enumerate() {
        if label != 0 && other_fg[idx] != 0 {
            touched[(label - 1) as usize] = true;
        }
    }
    let mut missed_voxels = 0usize;
    for (k, &was_touched) in touched.iter().enumerate() {
        if !was_touched {
            missed_voxels += labeling.counts()[k];
        }
    }
    let v_ml = voxel_volume_ml(labeled_side.spacing())?;
    Ok(v_ml * missed_voxels as f64)
}

/// Per-case metric triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionMetrics {
    pub dsc: f64,
    pub fpv_ml: f64,
    pub fnv_ml: f64,
}

/// Compute all three metrics for one case.
pub fn lesion_metrics(
    gt: &Volume3D,
    pred: &Volume3D,
    connectivity: Connectivity,
) -> Result<LesionMetrics> {
    Ok(LesionMetrics {
        dsc: dsc(gt, pred)?,
        fpv_ml: fpv(gt, pred, connectivity)?,
        fnv_ml: fnv(gt, pred, connectivity)?,
    })
}

/// Mean metrics of one algorithm over a test set, as fed to the ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmMetrics {
    pub name: String,
    pub mean_dsc: f64,
    pub mean_fpv_ml: f64,
    pub mean_fnv_ml: f64,
}

/// One row of the aggregate ranking table.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedAlgorithm {
    pub name: String,
    pub rank_dsc: f64,
    pub rank_fpv: f64,
    pub rank_fnv: f64,
    /// 0.5*rank_DSC + 0.25*rank_FPV + 0.25*rank_FNV; lower is better.
    pub score: f64,
    /// Fractional rank of the final score (ties share the mean).
    pub final_rank: f64,
}

/// Fractional ranks (1 = best); tied values share the mean of their positions.
fn fractional_ranks(keys: &[f64], higher_better: bool) -> Vec<f64> {
    let n = keys.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let cmp = keys[a].partial_cmp(&keys[b]).expect("keys are finite");
        if higher_better {
            cmp.reverse()
        } else {
            cmp
        }
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && keys[order[j + 1]] == keys[order[i]] {
            j += 1;
        }
        let shared = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Rank algorithms by `0.5*rank_DSC + 0.25*rank_FPV + 0.25*rank_FNV`
/// (DSC: higher better; FPV/FNV: lower better). Output is sorted by
/// ascending score; ties keep input order.
pub fn rank_aggregate(entries: &[AlgorithmMetrics]) -> Result<Vec<RankedAlgorithm>> {
    if entries.len() < 2 {
        return Err(Error::Contract(format!(
            "ranking needs at least 2 algorithms, got {}",
            entries.len()
        )));
    }
    for e in entries {
        for (metric, v) in
            [("DSC", e.mean_dsc), ("FPV", e.mean_fpv_ml), ("FNV", e.mean_fnv_ml)]
        {
            if !v.is_finite() {
                return Err(Error::Contract(format!(
                    "algorithm {} is missing a finite {metric} value",
                    e.name
                )));
            }
        }
    }
    let dsc_keys: Vec<f64> = entries.iter().map(|e| e.mean_dsc).collect();
    let fpv_keys: Vec<f64> = entries.iter().map(|e| e.mean_fpv_ml).collect();
    let fnv_keys: Vec<f64> = entries.iter().map(|e| e.mean_fnv_ml).collect();
    let r_dsc = fractional_ranks(&dsc_keys, true);
    let r_fpv = fractional_ranks(&fpv_keys, false);
    let r_fnv = fractional_ranks(&fnv_keys, false);
    let scores: Vec<f64> = (0..entries.len())
        .map(|i| 0.5 * r_dsc[i] + 0.25 * r_fpv[i] + 0.25 * r_fnv[i])
        .collect();
    let final_ranks = fractional_ranks(&scores, false);
    let mut rows: Vec<RankedAlgorithm> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| RankedAlgorithm {
            name: e.name.clone(),
            rank_dsc: r_dsc[i],
            rank_fpv: r_fpv[i],
            rank_fnv: r_fnv[i],
            score: scores[i],
            final_rank: final_ranks[i],
        })
        .collect();
    rows.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("finite scores"));
    Ok(rows)
}
