//! Class-map vectorization: 4-connected components, pixel-edge boundary
//! tracing, and minimum-mapping-unit merging.

use crate::error::{Error, Result};
use crate::preprocess::{StandPolygon, STAGE_UNMERGE};
use crate::raster::{GeoTransform, Raster};
use std::collections::BTreeMap;

/// 4-connected components of a label map in row-major first-visit order.
/// Returns (component id per pixel, per-component label, per-component pixel
/// count).
pub(crate) fn label_components<T: Copy + Eq>(
    labels: &[T],
    w: usize,
    h: usize,
) -> (Vec<u32>, Vec<T>, Vec<usize>) {
    const UNSEEN: u32 = u32::MAX;
    let mut comp_of = vec![UNSEEN; w * h];
    let mut comp_label = Vec::new();
    let mut comp_count = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if comp_of[start] != UNSEEN {
            continue;
        }
        let comp = comp_label.len() as u32;
        let label = labels[start];
        comp_label.push(label);
        comp_count.push(0usize);
        stack.push(start);
        comp_of[start] = comp;
        while let Some(p) = stack.pop() {
            comp_count[comp as usize] += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp_of[q] == UNSEEN && labels[q] == label {
                    comp_of[q] = comp;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
    }
    (comp_of, comp_label, comp_count)
}

/// Trace the boundary rings of one component as closed loops of pixel-corner
/// coordinates (x right, y down), collinear runs merged, ordered by
/// descending absolute area so the exterior ring comes first.
pub(crate) fn trace_rings(
    comp_of: &[u32],
    target: u32,
    w: usize,
    h: usize,
) -> Vec<Vec<(f64, f64)>> {
    // directed boundary edges between corner nodes; the interior stays on a
    // consistent side so loops close
    let corner = |x: usize, y: usize| y * (w + 1) + x;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if comp_of[r * w + c] != target {
                continue;
            }
            if r == 0 || comp_of[(r - 1) * w + c] != target {
                edges.push((corner(c, r), corner(c + 1, r)));
            }
            if c + 1 == w || comp_of[r * w + c + 1] != target {
                edges.push((corner(c + 1, r), corner(c + 1, r + 1)));
            }
            if r + 1 == h || comp_of[(r + 1) * w + c] != target {
                edges.push((corner(c + 1, r + 1), corner(c, r + 1)));
            }
            if c == 0 || comp_of[r * w + c - 1] != target {
                edges.push((corner(c, r + 1), corner(c, r)));
            }
        }
    }
    let mut outgoing: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (from, _)) in edges.iter().enumerate() {
        outgoing.entry(*from).or_default().push(i);
    }
    let decode = |node: usize| ((node % (w + 1)) as i64, (node / (w + 1)) as i64);
    let mut used = vec![false; edges.len()];
    let mut rings = Vec::new();
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let mut loop_nodes = Vec::new();
        let mut current = start;
        loop {
            used[current] = true;
            let (from, to) = edges[current];
            loop_nodes.push(from);
            if to == edges[start].0 {
                break;
            }
            let (fx, fy) = decode(from);
            let (tx, ty) = decode(to);
            let din = (tx - fx, ty - fy);
            // at pinch corners two loops pass through: take the tightest
            // left turn so each loop hugs its own pixels
            let next = outgoing[&to]
                .iter()
                .copied()
                .filter(|&e| !used[e])
                .max_by_key(|&e| {
                    let (nfx, nfy) = decode(edges[e].0);
                    let (ntx, nty) = decode(edges[e].1);
                    let dout = (ntx - nfx, nty - nfy);
                    din.0 * dout.1 - din.1 * dout.0
                })
                .expect("boundary edges pair into closed loops");
            current = next;
        }
        // merge collinear runs
        let n = loop_nodes.len();
        let mut ring: Vec<(f64, f64)> = Vec::new();
        for i in 0..n {
            let (px, py) = decode(loop_nodes[(i + n - 1) % n]);
            let (cx, cy) = decode(loop_nodes[i]);
            let (nx, ny) = decode(loop_nodes[(i + 1) % n]);
            if (cx - px, cy - py) != (nx - cx, ny - cy) {
                ring.push((cx as f64, cy as f64));
            }
        }
        ring.push(ring[0]);
        rings.push(ring);
    }
    rings.sort_by(|a, b| {
        ring_area_abs(b).partial_cmp(&ring_area_abs(a)).unwrap()
    });
    rings
}

fn ring_area_abs(ring: &[(f64, f64)]) -> f64 {
    let mut acc = 0.0;
    for pair in ring.windows(2) {
        acc += pair[0].0 * pair[1].1 - pair[1].0 * pair[0].1;
    }
    (acc / 2.0).abs()
}

/// Corner-grid rings to world coordinates under `transform`.
pub(crate) fn rings_to_world(
    rings: &[Vec<(f64, f64)>],
    transform: &GeoTransform,
) -> Vec<Vec<(f64, f64)>> {
    rings
        .iter()
        .map(|ring| {
            ring.iter()
                .map(|&(x, y)| {
                    (
                        transform.origin_x + x * transform.cell_size,
                        transform.origin_y - y * transform.cell_size,
                    )
                })
                .collect()
        })
        .collect()
}

struct MergeForest {
    parent: Vec<u32>,
}

impl MergeForest {
    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let up = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = up;
            a = up;
        }
        a
    }
}

fn check_class_map(raster: &Raster) -> Result<(&[u8], usize, usize)> {
    let data = raster
        .as_u8()
        .ok_or_else(|| Error::Shape("class raster must be uint8".into()))?;
    if raster.bands() != 1 {
        return Err(Error::Shape(format!(
            "class raster must have 1 band, got {}",
            raster.bands()
        )));
    }
    if let Some(v) = data.iter().find(|&&v| v > 4) {
        return Err(Error::Encoding(format!(
            "class raster holds value {v}, classes are 0..=4"
        )));
    }
    Ok((data, raster.width(), raster.height()))
}

/// Merge components below the minimum mapping unit into the neighbor sharing
/// the longest boundary (ties: lower class id, then lower component id),
/// smallest component first. Returns the per-pixel component id map and the
/// class per component id (non-surviving ids keep stale entries).
fn mmu_merge(
    data: &[u8],
    w: usize,
    h: usize,
    cell_size: f64,
    min_area_ha: f64,
) -> (Vec<u32>, Vec<u8>, Vec<usize>) {
    let (mut comp_of, comp_label, mut comp_count) = label_components(data, w, h);
    let n = comp_label.len();
    let mut class_of: Vec<u8> = comp_label;
    if min_area_ha <= 0.0 || n == 1 {
        return (comp_of, class_of, comp_count);
    }

    // shared boundary lengths between adjacent components
    let mut adjacency: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); n];
    let touch = |a: u32, b: u32, adjacency: &mut Vec<BTreeMap<u32, usize>>| {
        if a != b {
            *adjacency[a as usize].entry(b).or_insert(0) += 1;
            *adjacency[b as usize].entry(a).or_insert(0) += 1;
        }
    };
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if c + 1 < w {
                touch(comp_of[p], comp_of[p + 1], &mut adjacency);
            }
            if r + 1 < h {
                touch(comp_of[p], comp_of[p + w], &mut adjacency);
            }
        }
    }

    let min_area_m2 = min_area_ha * 10_000.0;
    let cell_area = cell_size * cell_size;
    let mut forest = MergeForest { parent: (0..n as u32).collect() };
    loop {
        // smallest live component below the threshold
        let candidate = (0..n as u32)
            .filter(|&i| forest.find(i) == i)
            .filter(|&i| (comp_count[i as usize] as f64) * cell_area < min_area_m2)
            .min_by_key(|&i| (comp_count[i as usize], i));
        let Some(small) = candidate else { break };
        let neighbors = std::mem::take(&mut adjacency[small as usize]);
        // neighbor with the longest shared boundary; ties prefer the lower
        // class id, then the lower component id
        let target = neighbors
            .iter()
            .map(|(&other, &len)| (other, len))
            .max_by(|&(a, la), &(b, lb)| {
                la.cmp(&lb)
                    .then(class_of[b as usize].cmp(&class_of[a as usize]))
                    .then(b.cmp(&a))
            })
            .map(|(other, _)| other);
        let Some(target) = target else { break };
        forest.parent[small as usize] = target;
        comp_count[target as usize] += comp_count[small as usize];
        for (other, len) in neighbors {
            if other == target {
                continue;
            }
            adjacency[other as usize].remove(&small);
            *adjacency[other as usize].entry(target).or_insert(0) += len;
            *adjacency[target as usize].entry(other).or_insert(0) += len;
        }
        adjacency[target as usize].remove(&small);
    }
    for id in comp_of.iter_mut() {
        *id = forest.find(*id);
    }
    for i in 0..n as u32 {
        let root = forest.find(i);
        class_of[i as usize] = class_of[root as usize];
    }
    (comp_of, class_of, comp_count)
}

/// Apply the minimum-mapping-unit merge to a class raster, returning the
/// merged class raster.
pub fn apply_mmu(class_raster: &Raster, min_area_ha: f64) -> Result<Raster> {
    if !(min_area_ha.is_finite() && min_area_ha >= 0.0) {
        return Err(Error::Config(format!(
            "min_area_ha must be finite and non-negative, got {min_area_ha}"
        )));
    }
    let (data, w, h) = check_class_map(class_raster)?;
    let (comp_of, class_of, _) =
        mmu_merge(data, w, h, class_raster.transform().cell_size, min_area_ha);
    let merged: Vec<u8> = comp_of.iter().map(|&c| class_of[c as usize]).collect();
    Raster::new_u8(
        w,
        h,
        1,
        *class_raster.transform(),
        vec!["class".into()],
        class_raster.nodata(),
        merged,
    )
}

/// Vectorize a class raster: MMU-merge, then trace every surviving
/// component into a polygon. Classes are emitted as development-stage codes.
pub fn vectorize_classmap(class_raster: &Raster, min_area_ha: f64) -> Result<Vec<StandPolygon>> {
    if !(min_area_ha.is_finite() && min_area_ha >= 0.0) {
        return Err(Error::Config(format!(
            "min_area_ha must be finite and non-negative, got {min_area_ha}"
        )));
    }
    let (data, w, h) = check_class_map(class_raster)?;
    let (comp_of, class_of, _) =
        mmu_merge(data, w, h, class_raster.transform().cell_size, min_area_ha);
    let mut survivors: Vec<u32> = comp_of.to_vec();
    survivors.sort_unstable();
    survivors.dedup();
    let mut polygons = Vec::with_capacity(survivors.len());
    for comp in survivors {
        let rings = trace_rings(&comp_of, comp, w, h);
        let world = rings_to_world(&rings, class_raster.transform());
        let stage = STAGE_UNMERGE[class_of[comp as usize] as usize];
        polygons.push(StandPolygon::new(world, stage)?);
    }
    Ok(polygons)
}
