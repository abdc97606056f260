//! Pairwise features at Delaunay edge midpoints and the joint feature map.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::delaunay::{triangulate, Point2};
use crate::error::{Error, Result};
use crate::features::{decode_features, encode_features, FeatureRecord};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseFeature {
    pub midpoint: Point2,
    pub vector: Vec<f32>,
    pub parent_edge: (usize, usize),
}

/// Provenance of one joint-map row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowMeta {
    Original { point: usize },
    Pairwise { edge: (usize, usize) },
}

/// Original features stacked above the pairwise features, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFeatureMap {
    pub dim: usize,
    /// Row-major `rows × dim` values.
    pub values: Vec<f32>,
    /// Location of each row: the interest point or the edge midpoint.
    pub locations: Vec<Point2>,
    pub row_meta: Vec<RowMeta>,
    pub source_image_id: String,
}

impl JointFeatureMap {
    pub fn rows(&self) -> usize {
        self.row_meta.len()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn original_count(&self) -> usize {
        self.row_meta
            .iter()
            .filter(|m| matches!(m, RowMeta::Original { .. }))
            .count()
    }
}

pub fn edge_midpoint(p1: Point2, p2: Point2) -> Point2 {
    ((p1.0 + p2.0) / 2.0, (p1.1 + p2.1) / 2.0)
}

/// Edges used for pairing: Delaunay edges for three or more non-collinear
/// points, the single pair for two points, and consecutive neighbours along
/// the line when every point is collinear.
pub fn pairing_edges(points: &[Point2]) -> Vec<(usize, usize)> {
    match points.len() {
        0 | 1 => Vec::new(),
        2 => vec![(0, 1)],
        _ => match triangulate(points) {
            Ok(t) => t.edges,
            Err(_) => {
                let mut order: Vec<usize> = (0..points.len()).collect();
                order.sort_by(|&i, &j| {
                    let (a, b) = (points[i], points[j]);
                    a.0.total_cmp(&b.0)
                        .then(a.1.total_cmp(&b.1))
                        .then(i.cmp(&j))
                });
                order.dedup_by(|j, i| points[*i] == points[*j]);
                let mut edges: Vec<(usize, usize)> = order
                    .windows(2)
                    .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
                    .collect();
                edges.sort_unstable();
                edges
            }
        },
    }
}

/// Averages the endpoint features of every edge. Edges are normalized to
/// `(min, max)`, deduplicated and emitted in sorted order.
pub fn pair_features(
    records: &[FeatureRecord],
    edges: &[(usize, usize)],
) -> Result<Vec<PairwiseFeature>> {
    let dim = records.first().map(|r| r.vector.len()).unwrap_or(0);
    if let Some((i, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.vector.len() != dim)
    {
        return Err(Error::Shape(format!(
            "record {i} has dimension {}, expected {dim}",
            r.vector.len()
        )));
    }
    let mut sorted: Vec<(usize, usize)> =
        edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .into_iter()
        .map(|(i, j)| {
            if j >= records.len() {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) references a point beyond the {} records",
                    records.len()
                )));
            }
            let (a, b) = (&records[i], &records[j]);
            Ok(PairwiseFeature {
                midpoint: edge_midpoint((a.x, a.y), (b.x, b.y)),
                vector: a
                    .vector
                    .iter()
                    .zip(&b.vector)
                    .map(|(&u, &v)| (u + v) / 2.0)
                    .collect(),
                parent_edge: (i, j),
            })
        })
        .collect()
}

pub fn build_joint_map(
    records: &[FeatureRecord],
    pairwise: &[PairwiseFeature],
    source_image_id: &str,
) -> Result<JointFeatureMap> {
    let dim = records
        .first()
        .ok_or_else(|| {
            Error::InvalidArgument("a joint map needs at least one original feature".into())
        })?
        .vector
        .len();
    let rows = records.len() + pairwise.len();
    let mut values = Vec::with_capacity(rows * dim);
    let mut locations = Vec::with_capacity(rows);
    let mut row_meta = Vec::with_capacity(rows);
    for (i, r) in records.iter().enumerate() {
        if r.vector.len() != dim {
            return Err(Error::Shape(format!(
                "record {i} has dimension {}, expected {dim}",
                r.vector.len()
            )));
        }
        values.extend_from_slice(&r.vector);
        locations.push((r.x, r.y));
        row_meta.push(RowMeta::Original { point: i });
    }
    for p in pairwise {
        if p.vector.len() != dim {
            return Err(Error::Shape(format!(
                "pairwise feature for edge {:?} has dimension {}, expected {dim}",
                p.parent_edge,
                p.vector.len()
            )));
        }
        values.extend_from_slice(&p.vector);
        locations.push(p.midpoint);
        row_meta.push(RowMeta::Pairwise {
            edge: p.parent_edge,
        });
    }
    Ok(JointFeatureMap {
        dim,
        values,
        locations,
        row_meta,
        source_image_id: source_image_id.to_string(),
    })
}

/// Full pairing for one image: edges, midpoint features and the stacked map.
pub fn joint_map_from_records(
    records: &[FeatureRecord],
    source_image_id: &str,
) -> Result<JointFeatureMap> {
    let points: Vec<Point2> = records.iter().map(|r| (r.x, r.y)).collect();
    let edges = pairing_edges(&points);
    let pairwise = pair_features(records, &edges)?;
    build_joint_map(records, &pairwise, source_image_id)
}

/// The map as a `rows × dim` plane min-max scaled to `[0, 1]`. A constant
/// map becomes a constant 0.5 plane.
pub fn joint_map_to_plane(map: &JointFeatureMap) -> Tensor {
    let (lo, hi) = map
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = if range > 0.0 {
        map.values
            .iter()
            .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.5; map.values.len()]
    };
    Tensor::from_vec(&[map.rows(), map.dim], data).expect("joint map has rows and columns")
}

/// Plane handed to the network. Maps built from at most one interest point
/// carry no pairing and are replaced by a zero plane.
pub fn plane_for_network(map: Option<&JointFeatureMap>) -> Tensor {
    match map {
        Some(m) if m.original_count() > 1 => joint_map_to_plane(m),
        _ => Tensor::zeros(&[1, 1]),
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    source_image_id: String,
    dim: usize,
    rows: Vec<RowMeta>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the rows in the feature-file layout (row locations as coordinates)
/// and the row provenance to a `.meta.json` sidecar.
pub fn save_joint_map(map: &JointFeatureMap, path: &Path) -> Result<()> {
    let records: Vec<FeatureRecord> = (0..map.rows())
        .map(|k| FeatureRecord {
            x: map.locations[k].0,
            y: map.locations[k].1,
            vector: map.row(k).to_vec(),
        })
        .collect();
    let bytes = encode_features(&records)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        source_image_id: map.source_image_id.clone(),
        dim: map.dim,
        rows: map.row_meta.clone(),
    };
    let meta = sidecar_path(path);
    let json = serde_json::to_string_pretty(&side)?;
    std::fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))
}

pub fn load_joint_map(path: &Path) -> Result<JointFeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode_features(&bytes)?;
    let meta = sidecar_path(path);
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    if side.rows.len() != records.len() {
        return Err(Error::Format {
            offset: 8,
            reason: format!(
                "sidecar lists {} rows, file holds {}",
                side.rows.len(),
                records.len()
            ),
        });
    }
    let dim = records[0].vector.len();
    if side.dim != dim {
        return Err(Error::Format {
            offset: 12,
            reason: format!(
                "sidecar dimension {} differs from file dimension {dim}",
                side.dim
            ),
        });
    }
    Ok(JointFeatureMap {
        dim,
        values: records
            .iter()
            .flat_map(|r| r.vector.iter().copied())
            .collect(),
        locations: records.iter().map(|r| (r.x, r.y)).collect(),
        row_meta: side.rows,
        source_image_id: side.source_image_id,
    })
}
