//! Frame -> candidate patches.
//!
//! Pixels strictly above a threshold are grouped into 8-connected components
//! (two-pass labeling over a union-find forest). A component survives when it
//! has exactly one local maximum, where a maximum is a plateau of equal-valued
//! connected pixels whose neighbors are all strictly lower. The survivor is
//! cropped into an odd-sized patch centered on that maximum; crops that would
//! leave the frame are discarded.

use rayon::prelude::*;

use crate::frame_io::{Frame, FrameStack};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask size mismatch");
        Self { width, height, bits }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }
}

/// Scale from median absolute deviation to standard deviation for normal data.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// `mask[i] = counts[i] > t`.
pub fn threshold(frame: &Frame, t: f64) -> BinaryMask {
    let bits = frame.counts.iter().map(|&v| v as f64 > t).collect();
    BinaryMask::new(frame.width, frame.height, bits)
}

/// Background median plus five robust standard deviations (`1.4826 * MAD`).
pub fn default_threshold(frame: &Frame) -> f64 {
    fn median(v: &mut [f64]) -> f64 {
        let mid = v.len() / 2;
        let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    }
    let mut vals: Vec<f64> = frame.counts.iter().map(|&v| v as f64).collect();
    let med = median(&mut vals);
    let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
    med + 5.0 * MAD_TO_SIGMA * median(&mut dev)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    /// 0 is background; components are 1..=K.
    pub labels: Vec<u32>,
}

impl LabelMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }
}

/// Inclusive bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

/// One 8-connected foreground component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    /// `(row, col)` in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
}

/// A component together with its local maxima in some frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub label: u32,
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
    /// One representative `(row, col)` per maximal plateau.
    pub maxima: Vec<(usize, usize)>,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        // Slot 0 is the background and never unioned.
        Self { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// 8-connected labeling. Labels are dense and ordered by the raster position
/// of each component's first pixel.
pub fn label_components(mask: &BinaryMask) -> (LabelMap, Vec<Component>) {
    let (w, h) = (mask.width, mask.height);
    let mut provisional = vec![0u32; w * h];
    let mut sets = DisjointSet::new();

    for row in 0..h {
        for col in 0..w {
            if !mask.get(row, col) {
                continue;
            }
            // Already-visited neighbors: W, NW, N, NE.
            let mut neighbors = [0u32; 4];
            let mut n = 0;
            if col > 0 && provisional[row * w + col - 1] != 0 {
                neighbors[n] = provisional[row * w + col - 1];
                n += 1;
            }
            if row > 0 {
                let up = (row - 1) * w;
                if col > 0 && provisional[up + col - 1] != 0 {
                    neighbors[n] = provisional[up + col - 1];
                    n += 1;
                }
                if provisional[up + col] != 0 {
                    neighbors[n] = provisional[up + col];
                    n += 1;
                }
                if col + 1 < w && provisional[up + col + 1] != 0 {
                    neighbors[n] = provisional[up + col + 1];
                    n += 1;
                }
            }
            let label = if n == 0 {
                sets.make()
            } else {
                let first = neighbors[0];
                for &other in &neighbors[1..n] {
                    sets.union(first, other);
                }
                first
            };
            provisional[row * w + col] = label;
        }
    }

    let mut remap = vec![0u32; sets.parent.len()];
    let mut labels = vec![0u32; w * h];
    let mut components: Vec<Component> = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let p = provisional[row * w + col];
            if p == 0 {
                continue;
            }
            let root = sets.find(p) as usize;
            if remap[root] == 0 {
                let label = components.len() as u32 + 1;
                remap[root] = label;
                components.push(Component {
                    label,
                    pixels: Vec::new(),
                    bbox: BoundingBox { min_row: row, min_col: col, max_row: row, max_col: col },
                });
            }
            let label = remap[root];
            labels[row * w + col] = label;
            let c = &mut components[label as usize - 1];
            c.pixels.push((row, col));
            c.bbox.min_row = c.bbox.min_row.min(row);
            c.bbox.min_col = c.bbox.min_col.min(col);
            c.bbox.max_row = c.bbox.max_row.max(row);
            c.bbox.max_col = c.bbox.max_col.max(col);
        }
    }
    (LabelMap { width: w, height: h, labels }, components)
}

fn neighbors8(row: usize, col: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    const OFFSETS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    OFFSETS.iter().filter_map(move |&(dr, dc)| {
        let r = row as isize + dr;
        let c = col as isize + dc;
        (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then_some((r as usize, c as usize))
    })
}

/// Strict local maxima of `frame` within a component, plateau-merged.
pub fn local_maxima(frame: &Frame, labels: &LabelMap, component: &Component) -> Vec<(usize, usize)> {
    let (w, h) = (frame.width, frame.height);
    let bb = component.bbox;
    let bw = bb.max_col - bb.min_col + 1;
    let local = |r: usize, c: usize| (r - bb.min_row) * bw + (c - bb.min_col);
    let mut seen = vec![false; bw * (bb.max_row - bb.min_row + 1)];
    let mut maxima = Vec::new();
    let mut stack = Vec::new();
    let mut plateau = Vec::new();

    for &(r0, c0) in &component.pixels {
        if seen[local(r0, c0)] {
            continue;
        }
        let value = frame.get(r0, c0);
        plateau.clear();
        stack.push((r0, c0));
        seen[local(r0, c0)] = true;
        let mut is_max = true;
        while let Some((r, c)) = stack.pop() {
            plateau.push((r, c));
            for (nr, nc) in neighbors8(r, c, w, h) {
                let v = frame.get(nr, nc);
                if v > value {
                    is_max = false;
                } else if v == value && labels.get(nr, nc) == component.label && !seen[local(nr, nc)] {
                    seen[local(nr, nc)] = true;
                    stack.push((nr, nc));
                }
            }
        }
        if is_max {
            plateau.sort_unstable();
            let n = plateau.len() as f64;
            let (sr, sc) = plateau.iter().fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
            let (cr, cc) = (sr / n, sc / n);
            let best = plateau
                .iter()
                .copied()
                .min_by(|a, b| {
                    let da = (a.0 as f64 - cr).powi(2) + (a.1 as f64 - cc).powi(2);
                    let db = (b.0 as f64 - cr).powi(2) + (b.1 as f64 - cc).powi(2);
                    da.total_cmp(&db).then(a.cmp(b))
                })
                .expect("plateau is non-empty");
            maxima.push(best);
        }
    }
    maxima.sort_unstable();
    maxima
}

pub fn describe_regions(frame: &Frame, labels: &LabelMap, components: Vec<Component>) -> Vec<Region> {
    components
        .into_iter()
        .map(|c| {
            let maxima = local_maxima(frame, labels, &c);
            Region { label: c.label, pixels: c.pixels, bbox: c.bbox, maxima }
        })
        .collect()
}

/// An odd-sized crop of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    /// Row-major `size x size` intensities.
    pub values: Vec<f64>,
    /// `(row, col)` of patch pixel (0, 0) in the frame.
    pub origin: (usize, usize),
    /// Sub-pixel `(y, z)` label in patch coordinates, when known.
    pub label_center: Option<(f64, f64)>,
    pub frame_index: usize,
    /// `(row, col)` of the maximum the crop was built around.
    pub maxima: (usize, usize),
}

impl Patch {
    /// Geometric center in patch coordinates.
    pub fn center(&self) -> f64 {
        (self.size / 2) as f64
    }
}

/// Crops a `size x size` patch whose pixel (0, 0) is at `origin`, or `None` if it leaves the frame.
pub fn crop_at(frame: &Frame, origin: (isize, isize), size: usize) -> Option<Patch> {
    let (r0, c0) = origin;
    if r0 < 0 || c0 < 0 || r0 as usize + size > frame.height || c0 as usize + size > frame.width {
        return None;
    }
    let (r0, c0) = (r0 as usize, c0 as usize);
    let mut values = Vec::with_capacity(size * size);
    for r in r0..r0 + size {
        values.extend(frame.counts[r * frame.width + c0..r * frame.width + c0 + size].iter().map(|&v| v as f64));
    }
    let half = size / 2;
    Some(Patch {
        size,
        values,
        origin: (r0, c0),
        label_center: None,
        frame_index: frame.frame_index,
        maxima: (r0 + half, c0 + half),
    })
}

/// Crop centered on `(row, col)`.
pub fn crop_centered(frame: &Frame, center: (usize, usize), size: usize) -> Option<Patch> {
    let half = (size / 2) as isize;
    crop_at(frame, (center.0 as isize - half, center.1 as isize - half), size)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiscardSummary {
    pub regions: usize,
    pub emitted: usize,
    pub multi_maxima: usize,
    pub border: usize,
    /// Regions below [`MIN_REGION_PIXELS`].
    pub small: usize,
    /// Crops holding a pixel brighter than their own maximum.
    pub overlap: usize,
}

impl DiscardSummary {
    pub fn merge(&mut self, other: &DiscardSummary) {
        self.regions += other.regions;
        self.emitted += other.emitted;
        self.multi_maxima += other.multi_maxima;
        self.border += other.border;
        self.small += other.small;
        self.overlap += other.overlap;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Candidates {
    pub patches: Vec<Patch>,
    pub summary: DiscardSummary,
}

/// Smaller regions are isolated noise or tail pixels of a neighboring peak;
/// a real peak above a robust threshold always covers more.
pub const MIN_REGION_PIXELS: usize = 3;

/// One patch per single-maximum region of `mask`, centered on that maximum.
pub fn extract_candidates(frame: &Frame, mask: &BinaryMask, patch_size: usize) -> Candidates {
    assert!(patch_size % 2 == 1 && patch_size >= 3, "patch size must be odd and >= 3");
    let (labels, components) = label_components(mask);
    let regions = describe_regions(frame, &labels, components);
    let mut out = Candidates::default();
    out.summary.regions = regions.len();
    for region in &regions {
        if region.pixels.len() < MIN_REGION_PIXELS {
            out.summary.small += 1;
            continue;
        }
        if region.maxima.len() != 1 {
            out.summary.multi_maxima += 1;
            continue;
        }
        let (r, c) = region.maxima[0];
        match crop_centered(frame, (r, c), patch_size) {
            // A brighter pixel in the crop belongs to another peak; this region is its tail.
            Some(patch) if patch.values.iter().any(|&v| v > frame.get(r, c) as f64) => out.summary.overlap += 1,
            Some(patch) => {
                out.summary.emitted += 1;
                out.patches.push(patch);
            }
            None => out.summary.border += 1,
        }
    }
    out
}

/// Threshold + extract for every frame; output keeps frame order.
pub fn segment_stack(stack: &FrameStack, t: Option<f64>, patch_size: usize) -> Vec<Candidates> {
    stack
        .frames
        .par_iter()
        .map(|f| {
            let t = t.unwrap_or_else(|| default_threshold(f));
            extract_candidates(f, &threshold(f, t), patch_size)
        })
        .collect()
}

/// Maps a patch-coordinate prediction to frame coordinates (`y` = column, `z` = row).
#[inline]
pub fn to_frame_coords(patch: &Patch, pred_y: f64, pred_z: f64) -> (f64, f64) {
    (patch.origin.1 as f64 + pred_y, patch.origin.0 as f64 + pred_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_peaks, PeakParams};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Recursive flood fill: canonical partition as sorted pixel lists.
    fn flood_fill_partition(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
        fn fill(mask: &BinaryMask, seen: &mut [bool], r: usize, c: usize, out: &mut Vec<(usize, usize)>) {
            let i = r * mask.width + c;
            if !mask.bits[i] || seen[i] {
                return;
            }
            seen[i] = true;
            out.push((r, c));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < mask.height && (nc as usize) < mask.width {
                        fill(mask, seen, nr as usize, nc as usize, out);
                    }
                }
            }
        }
        let mut seen = vec![false; mask.bits.len()];
        let mut parts = Vec::new();
        for r in 0..mask.height {
            for c in 0..mask.width {
                let mut part = Vec::new();
                fill(mask, &mut seen, r, c, &mut part);
                if !part.is_empty() {
                    part.sort_unstable();
                    parts.push(part);
                }
            }
        }
        parts
    }

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::new(w, h, rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect())
    }

    #[test]
    fn threshold_bounds() {
        let f = Frame::new(3, 1, vec![1.0, 2.0, 3.0], 0).unwrap();
        assert!(threshold(&f, 0.5).bits.iter().all(|&b| b));
        assert!(threshold(&f, 3.5).bits.iter().all(|&b| !b));
        let flat = Frame::filled(4, 4, 5.0, 0);
        assert!(threshold(&flat, 5.0).bits.iter().all(|&b| !b));
    }

    #[test]
    fn empty_mask_has_no_regions() {
        let (map, comps) = label_components(&BinaryMask::new(5, 5, vec![false; 25]));
        assert!(comps.is_empty());
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn diagonal_touch_is_one_region() {
        let (_, comps) = label_components(&mask_from(&["#..", ".#.", "..."]));
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].pixels, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn u_shape_merges_and_labels_are_raster_ordered() {
        let (map, comps) = label_components(&mask_from(&["#.#..#", "#.#...", "###.#."]));
        assert_eq!(comps.len(), 3);
        assert_eq!(map.get(0, 0), 1);
        assert_eq!(map.get(0, 2), 1);
        assert_eq!(map.get(0, 5), 2);
        assert_eq!(map.get(2, 4), 3);
    }

    #[test]
    fn labeling_matches_flood_fill_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for i in 0..200 {
            let density = 0.1 + 0.8 * (i as f64 / 199.0);
            let bits = (0..64 * 64).map(|_| rng.random_bool(density)).collect();
            let mask = BinaryMask::new(64, 64, bits);
            let (_, comps) = label_components(&mask);
            let mut ours: Vec<Vec<(usize, usize)>> = comps.into_iter().map(|c| c.pixels).collect();
            ours.iter_mut().for_each(|p| p.sort_unstable());
            assert_eq!(ours, flood_fill_partition(&mask), "mask {i}");
        }
    }

    fn peak_at(y: f64, z: f64) -> PeakParams {
        PeakParams { bg: 0.0, amp: 1000.0, eta: 0.3, mu_y: y, mu_z: z, sigma_y: 1.2, sigma_z: 1.0 }
    }

    #[test]
    fn single_peak_yields_centered_patch() {
        let frame = render_peaks(40, 30, 10.0, &[peak_at(20.0, 15.0)], 0);
        let c = extract_candidates(&frame, &threshold(&frame, 110.0), 11);
        assert_eq!(c.summary, DiscardSummary { regions: 1, emitted: 1, ..Default::default() });
        assert_eq!(c.patches[0].origin, (10, 15));
        assert_eq!(c.patches[0].maxima, (15, 20));
        let v = &c.patches[0].values;
        let center = v[5 * 11 + 5];
        assert!(v.iter().all(|&x| x <= center));
    }

    #[test]
    fn merged_pair_is_discarded_as_multi_maxima() {
        let frame = render_peaks(40, 30, 10.0, &[peak_at(16.0, 15.0), peak_at(23.0, 15.0)], 0);
        let c = extract_candidates(&frame, &threshold(&frame, 20.0), 11);
        assert_eq!(c.summary.regions, 1);
        assert_eq!(c.summary.multi_maxima, 1);
        assert!(c.patches.is_empty());
    }

    #[test]
    fn near_border_is_discarded() {
        let frame = render_peaks(40, 30, 10.0, &[peak_at(3.0, 15.0)], 0);
        let c = extract_candidates(&frame, &threshold(&frame, 110.0), 11);
        assert_eq!(c.summary.border, 1);
        assert_eq!(c.summary.emitted + c.summary.border + c.summary.multi_maxima + c.summary.small + c.summary.overlap, c.summary.regions);
    }

    #[test]
    fn tiny_regions_are_discarded_as_small() {
        let mut frame = Frame::filled(30, 30, 0.0, 0);
        frame.counts[5 * 30 + 5] = 100.0;
        frame.counts[20 * 30 + 20] = 100.0;
        frame.counts[20 * 30 + 21] = 90.0;
        let c = extract_candidates(&frame, &threshold(&frame, 50.0), 7);
        assert_eq!(c.summary, DiscardSummary { regions: 2, small: 2, ..Default::default() });
    }

    #[test]
    fn tail_fragment_next_to_brighter_peak_is_overlap() {
        let mut frame = render_peaks(40, 30, 0.0, &[peak_at(15.0, 15.0)], 0);
        for (r, c) in [(15, 20), (15, 21), (16, 20)] {
            frame.counts[r * 40 + c] = 60.0;
        }
        for (r, c) in [(15, 19), (16, 19), (14, 19), (14, 20), (14, 21), (16, 21), (15, 22), (14, 22), (16, 22)] {
            frame.counts[r * 40 + c] = 0.0;
        }
        let c = extract_candidates(&frame, &threshold(&frame, 50.0), 11);
        assert_eq!(c.summary.regions, 2);
        assert_eq!(c.summary.overlap, 1);
        assert_eq!(c.patches.len(), 1);
        assert_eq!(c.patches[0].maxima, (15, 15));
    }

    #[test]
    fn saturated_plateau_is_one_maximum() {
        let mut frame = render_peaks(30, 30, 0.0, &[peak_at(15.0, 15.0)], 0);
        for v in frame.counts.iter_mut() {
            *v = v.min(600.0);
        }
        let mask = threshold(&frame, 50.0);
        let (map, comps) = label_components(&mask);
        let regions = describe_regions(&frame, &map, comps);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].maxima, vec![(15, 15)]);
    }

    #[test]
    fn frame_coords_map_back() {
        let patch = Patch { size: 11, values: vec![0.0; 121], origin: (100, 200), label_center: None, frame_index: 0, maxima: (105, 205) };
        assert_eq!(to_frame_coords(&patch, 5.0, 5.0), (205.0, 105.0));
        let patch = Patch { origin: (0, 0), ..patch };
        assert_eq!(to_frame_coords(&patch, 0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn crop_then_map_back_is_identity_on_truth() {
        let frame = Frame::filled(50, 50, 1.0, 0);
        let truth = (23.37, 26.81);
        for dr in -3isize..=3 {
            for dc in -3isize..=3 {
                let p = crop_at(&frame, (21 + dr, 18 + dc), 11).unwrap();
                let label = (truth.0 - p.origin.1 as f64, truth.1 - p.origin.0 as f64);
                assert_eq!(to_frame_coords(&p, label.0, label.1), truth);
            }
        }
    }

    #[test]
    fn default_threshold_sits_above_background() {
        let frame = render_peaks(64, 64, 10.0, &[peak_at(30.0, 30.0)], 0);
        let t = default_threshold(&frame);
        assert!(t >= 10.0 && t < 500.0, "t = {t}");
    }

    proptest::proptest! {
        #[test]
        fn labels_equal_flood_fill(bits in proptest::collection::vec(proptest::bool::ANY, 12 * 9)) {
            let mask = BinaryMask::new(12, 9, bits);
            let (map, comps) = label_components(&mask);
            let mut ours: Vec<Vec<(usize, usize)>> = comps.iter().map(|c| c.pixels.clone()).collect();
            ours.iter_mut().for_each(|p| p.sort_unstable());
            proptest::prop_assert_eq!(ours, flood_fill_partition(&mask));
            let k = comps.len() as u32;
            proptest::prop_assert!(map.labels.iter().all(|&l| l <= k));
        }
    }
}
