use crate::error::{Error, Result};
use crate::geometry::OccupancyGrid;

/// Side of the near evaluation square, metres.
pub const NEAR_RANGE_M: f64 = 30.0;
/// Side of the far evaluation square, metres.
pub const FAR_RANGE_M: f64 = 50.0;

/// Set IoU of two binary grids over the cells whose centres lie inside the
/// `range × range` square centred on the ego origin. An empty union is 1.
pub fn grid_iou(pred: &OccupancyGrid, gt: &OccupancyGrid, range: f64) -> Result<f64> {
    if !pred.same_layout(gt) {
        return Err(Error::dim("grid_iou", "grids differ in shape, resolution or origin"));
    }
    if !(range > 0.0) {
        return Err(Error::Contract(format!("evaluation range must be positive, got {range}")));
    }
    let half = range / 2.0;
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..pred.height() {
        for c in 0..pred.width() {
            let [x, y] = pred.cell_center(r, c);
            if x.abs() > half || y.abs() > half {
                continue;
            }
            let (p, g) = (pred.is_set(r, c), gt.is_set(r, c));
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Binary grid on `layout`'s cells with every cell holding a point set.
/// Points outside the grid are ignored.
pub fn rasterize_points(layout: &OccupancyGrid, points: &[[f64; 2]]) -> OccupancyGrid {
    let mut out = OccupancyGrid::new(layout.height(), layout.width(), layout.cell_size(), layout.origin())
        .expect("layout of an existing grid is valid");
    for &p in points {
        if let Some((r, c)) = out.cell_of(p) {
            out.set(r, c, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PerceptionRange;
    use proptest::prelude::*;

    fn grid(bits: &[u8]) -> OccupancyGrid {
        // 8x8 cells of 10 m centred on the origin: centres at ±5, ±15, ±25, ±35
        OccupancyGrid::from_probs(8, 8, 10.0, [-40.0, -40.0], bits.iter().map(|&b| b as f64).collect())
            .unwrap()
    }

    #[test]
    fn near_and_far_windows_by_hand() {
        let mut p = vec![0u8; 64];
        let mut g = vec![0u8; 64];
        // centre cell (4,4) at (5,5) set in both
        p[4 * 8 + 4] = 1;
        g[4 * 8 + 4] = 1;
        // cell (6,6) at (25,25): inside far only, set in pred
        p[6 * 8 + 6] = 1;
        // corner cell (0,0) at (-35,-35): outside both windows
        g[0] = 1;
        let (p, g) = (grid(&p), grid(&g));
        assert_eq!(grid_iou(&p, &g, NEAR_RANGE_M).unwrap(), 1.0);
        assert_eq!(grid_iou(&p, &g, FAR_RANGE_M).unwrap(), 0.5);
        assert_eq!(grid_iou(&p, &g, 80.0).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn empty_union_and_layout_mismatch() {
        let z = grid(&[0; 64]);
        assert_eq!(grid_iou(&z, &z, NEAR_RANGE_M).unwrap(), 1.0);
        let other = OccupancyGrid::covering(&PerceptionRange::EGO, 8, 8).unwrap();
        assert!(grid_iou(&z, &other, NEAR_RANGE_M).is_err());
    }

    #[test]
    fn rasterize_marks_cells() {
        let z = grid(&[0; 64]);
        let r = rasterize_points(&z, &[[5.0, 5.0], [6.0, 6.0], [100.0, 0.0]]);
        assert_eq!(r.count_set(), 1);
        assert!(r.is_set(4, 4));
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in prop::collection::vec(0u8..2, 64), b in prop::collection::vec(0u8..2, 64)) {
            let (a, b) = (grid(&a), grid(&b));
            for range in [NEAR_RANGE_M, FAR_RANGE_M] {
                let ab = grid_iou(&a, &b, range).unwrap();
                prop_assert_eq!(ab, grid_iou(&b, &a, range).unwrap());
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(grid_iou(&a, &a, range).unwrap(), 1.0);
            }
        }
    }
}
